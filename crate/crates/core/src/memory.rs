//! Story-section memory: reusable scene, character and object references.
//!
//! Every panel of a section is conditioned on the same bundle, which is what
//! keeps characters and settings consistent across panels.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{digest_u64, file_sha256, json_digest};
use crate::gateway::{GatewayError, GatewayRequest, Message, ModelGateway};
use crate::story::{PanelSpec, SectionSpec};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_REFS: usize = 6;
/// Side of generated reference images, in pixels.
pub const REFERENCE_PX: u32 = 512;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("profile for {name}: {source}")]
    Gateway {
        name: String,
        #[source]
        source: GatewayError,
    },
    #[error("invalid reference {name}: {reason}")]
    InvalidRef { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefOrigin {
    User,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefAsset {
    pub name: String,
    pub text_desc: String,
    #[serde(default)]
    pub image_path: Option<PathBuf>,
    #[serde(default)]
    pub image_sha256: Option<String>,
    pub origin: RefOrigin,
}

impl RefAsset {
    /// A user-supplied reference; the image, when given, must be readable.
    pub fn user(
        name: impl Into<String>,
        text_desc: impl Into<String>,
        image_path: Option<PathBuf>,
    ) -> Result<Self, MemoryError> {
        let name = name.into();
        let text_desc = text_desc.into();
        if text_desc.trim().is_empty() {
            return Err(MemoryError::InvalidRef {
                name,
                reason: "empty description".into(),
            });
        }
        let image_sha256 = match &image_path {
            Some(p) => Some(file_sha256(p).map_err(|e| MemoryError::InvalidRef {
                name: name.clone(),
                reason: format!("{}: {e}", p.display()),
            })?),
            None => None,
        };
        Ok(Self {
            name,
            text_desc,
            image_path,
            image_sha256,
            origin: RefOrigin::User,
        })
    }

    /// Content digest of the asset: its text and image bytes, not its path.
    pub fn digest(&self) -> String {
        json_digest(&(&self.name, &self.text_desc, &self.image_sha256))
    }
}

/// References supplied before generation, keyed by name. A scene reference
/// for a section is keyed `scene:<section_id>`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserRefs(pub IndexMap<String, RefAsset>);

impl UserRefs {
    pub fn get(&self, name: &str) -> Option<&RefAsset> {
        self.0.get(name)
    }

    pub fn insert(&mut self, asset: RefAsset) {
        self.0.insert(asset.name.clone(), asset);
    }
}

pub fn scene_key(section_id: &str) -> String {
    format!("scene:{section_id}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionMemory {
    pub section_id: String,
    pub description: String,
    pub scene_ref: RefAsset,
    pub char_refs: IndexMap<String, RefAsset>,
    pub obj_refs: IndexMap<String, RefAsset>,
    /// Character presets and key-object descriptions, injected verbatim into
    /// panel prompts.
    pub profiles: IndexMap<String, String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SectionMemory {
    fn assets_mut(&mut self) -> impl Iterator<Item = &mut RefAsset> {
        std::iter::once(&mut self.scene_ref)
            .chain(self.char_refs.values_mut())
            .chain(self.obj_refs.values_mut())
    }

    pub fn assets(&self) -> impl Iterator<Item = &RefAsset> {
        std::iter::once(&self.scene_ref)
            .chain(self.char_refs.values())
            .chain(self.obj_refs.values())
    }

    /// Checks coverage of the section's names and that every image exists
    /// with its recorded digest.
    pub fn validate(&self, section: &SectionSpec) -> Result<(), MemoryError> {
        let missing = section
            .characters
            .iter()
            .filter(|c| !self.char_refs.contains_key(*c))
            .chain(section.key_objects.iter().filter(|o| !self.obj_refs.contains_key(*o)))
            .next();
        if let Some(name) = missing {
            return Err(MemoryError::InvalidRef {
                name: name.clone(),
                reason: "not covered by section memory".into(),
            });
        }
        for a in self.assets() {
            if a.text_desc.trim().is_empty() {
                return Err(MemoryError::InvalidRef {
                    name: a.name.clone(),
                    reason: "empty description".into(),
                });
            }
            if let Some(p) = &a.image_path {
                let actual = file_sha256(p).map_err(|e| MemoryError::InvalidRef {
                    name: a.name.clone(),
                    reason: format!("{}: {e}", p.display()),
                })?;
                if a.image_sha256.as_deref() != Some(actual.as_str()) {
                    return Err(MemoryError::InvalidRef {
                        name: a.name.clone(),
                        reason: "image digest mismatch".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum RefKind {
    Scene,
    Character,
    Object,
}

impl RefKind {
    fn profile_request(self, name: &str, section: &SectionSpec) -> String {
        let what = match self {
            RefKind::Scene => "the setting",
            RefKind::Character => "the character",
            RefKind::Object => "the key object",
        };
        format!(
            "Story section: {}\nScene: {}\n\nWrite a concise visual profile of {what} `{name}` \
             for a manga artist: appearance, clothing or materials, colours, distinguishing \
             features. Plain text, at most 80 words.",
            section.description, section.scene
        )
    }

    fn image_prompt(self, style: &str, name: &str, profile: &str) -> String {
        match self {
            RefKind::Scene => format!("{style}. Establishing shot of {name}, no people. {profile}"),
            RefKind::Character => format!(
                "{style}. Character reference sheet of {name}: front, side and back views on a \
                 plain background. {profile}"
            ),
            RefKind::Object => {
                format!("{style}. Design sheet of the object {name} on a plain background. {profile}")
            }
        }
    }

    fn file_prefix(self) -> &'static str {
        match self {
            RefKind::Scene => "scene",
            RefKind::Character => "char",
            RefKind::Object => "obj",
        }
    }
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    format!("{}_{}", s.trim_matches('_'), &crate::digest::sha256_hex(name.as_bytes())[..8])
}

fn generate_asset(
    kind: RefKind,
    name: &str,
    section: &SectionSpec,
    style: &str,
    asset_dir: &Path,
    gateway: &ModelGateway,
    warnings: &mut Vec<String>,
) -> Result<RefAsset, MemoryError> {
    let wrap = |source| MemoryError::Gateway {
        name: name.to_string(),
        source,
    };
    let chat = GatewayRequest::chat(
        gateway.models().chat.clone(),
        vec![Message::user(kind.profile_request(name, section))],
    );
    let profile = gateway.call(&chat).and_then(|r| r.into_text()).map_err(wrap)?;
    let profile = profile.trim().to_string();
    let seed = digest_u64(format!("{}\u{0}{name}", section.section_id).as_bytes());
    let image = GatewayRequest::image(
        gateway.models().image.clone(),
        kind.image_prompt(style, name, &profile),
        "text, speech bubbles, watermark",
        (REFERENCE_PX, REFERENCE_PX),
        seed,
        vec![],
    );
    let picture = gateway
        .call(&image)
        .and_then(|r| r.into_image())
        .map_err(|e| e.to_string())
        .and_then(|bytes| crate::raster::decode(&bytes).map_err(|e| e.to_string()));
    let (image_path, image_sha256) = match picture {
        Ok(img) => {
            let bytes = crate::raster::encode_png(&img.to_rgb8());
            let path = asset_dir.join(format!("{}_{}.png", kind.file_prefix(), slug(name)));
            crate::fsutil::write_atomic(&path, &bytes)?;
            (Some(path), Some(crate::digest::sha256_hex(&bytes)))
        }
        Err(e) => {
            let w = format!("reference image for {name} unavailable: {e}");
            log::warn!("{w}");
            warnings.push(w);
            (None, None)
        }
    };
    Ok(RefAsset {
        name: name.to_string(),
        text_desc: if profile.is_empty() { name.to_string() } else { profile },
        image_path,
        image_sha256,
        origin: RefOrigin::Generated,
    })
}

/// Assigns user references and generates the rest (one profile call and one
/// image call per missing name), writing images into `asset_dir`.
pub fn build_section_memory(
    section: &SectionSpec,
    user_refs: &UserRefs,
    style: &str,
    asset_dir: &Path,
    gateway: &ModelGateway,
) -> Result<SectionMemory, MemoryError> {
    let mut warnings = vec![];
    let mut get = |kind: RefKind, key: &str, name: &str| -> Result<RefAsset, MemoryError> {
        match user_refs.get(key) {
            Some(a) => Ok(a.clone()),
            None => generate_asset(kind, name, section, style, asset_dir, gateway, &mut warnings),
        }
    };
    let scene_ref = get(RefKind::Scene, &scene_key(&section.section_id), &section.scene)?;
    let mut char_refs = IndexMap::new();
    for c in &section.characters {
        char_refs.insert(c.clone(), get(RefKind::Character, c, c)?);
    }
    let mut obj_refs = IndexMap::new();
    for o in &section.key_objects {
        obj_refs.insert(o.clone(), get(RefKind::Object, o, o)?);
    }
    let profiles = char_refs
        .iter()
        .chain(obj_refs.iter())
        .map(|(k, a)| (k.clone(), a.text_desc.clone()))
        .collect();
    Ok(SectionMemory {
        section_id: section.section_id.clone(),
        description: section.description.clone(),
        scene_ref,
        char_refs,
        obj_refs,
        profiles,
        warnings,
    })
}

/// Cache key: the section, the style and the digests of the user references
/// this section uses.
pub fn cache_key(section: &SectionSpec, user_refs: &UserRefs, style: &str) -> String {
    let scene = scene_key(&section.section_id);
    let used: Vec<(&str, String)> = std::iter::once(scene.as_str())
        .chain(section.characters.iter().map(String::as_str))
        .chain(section.key_objects.iter().map(String::as_str))
        .filter_map(|n| user_refs.get(n).map(|a| (n, a.digest())))
        .collect();
    json_digest(&(section, style, used))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    key: String,
    memory: SectionMemory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Built,
    /// The entry on disk was unreadable or inconsistent and was replaced.
    Rebuilt,
}

fn map_paths(memory: &mut SectionMemory, f: impl Fn(&Path) -> PathBuf) {
    for a in memory.assets_mut() {
        if a.origin == RefOrigin::Generated {
            a.image_path = a.image_path.as_deref().map(&f);
        }
    }
}

fn load_entry(dir: &Path, key: &str, section: &SectionSpec) -> Result<SectionMemory, MemoryError> {
    let m: Manifest = crate::fsutil::read_json(&dir.join("manifest.json"))?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION || m.key != key {
        return Err(MemoryError::InvalidRef {
            name: section.section_id.clone(),
            reason: "manifest does not match its key".into(),
        });
    }
    let mut memory = m.memory;
    map_paths(&mut memory, |p| dir.join(p));
    memory.validate(section)?;
    Ok(memory)
}

/// The cached memory for these inputs, when a valid entry exists.
pub fn load_cached(
    section: &SectionSpec,
    user_refs: &UserRefs,
    style: &str,
    cache_root: &Path,
) -> Option<SectionMemory> {
    let key = cache_key(section, user_refs, style);
    load_entry(&cache_root.join("sections").join(&key), &key, section).ok()
}

/// Returns the cached memory for these inputs, building and persisting it on
/// a miss. Entries live in `cache_root/sections/<key>/`; a corrupt entry is
/// rebuilt.
pub fn load_or_build(
    section: &SectionSpec,
    user_refs: &UserRefs,
    style: &str,
    cache_root: &Path,
    gateway: &ModelGateway,
) -> Result<(SectionMemory, CacheStatus), MemoryError> {
    let key = cache_key(section, user_refs, style);
    let sections = cache_root.join("sections");
    let dir = sections.join(&key);
    let mut status = CacheStatus::Built;
    if dir.exists() {
        match load_entry(&dir, &key, section) {
            Ok(m) => return Ok((m, CacheStatus::Hit)),
            Err(e) => {
                log::warn!("rebuilding cache entry {key}: {e}");
                status = CacheStatus::Rebuilt;
            }
        }
    }
    let tmp = tempdir_in(&sections, &key)?;
    let mut memory = build_section_memory(section, user_refs, style, &tmp, gateway)?;
    let mut stored = memory.clone();
    map_paths(&mut stored, |p| p.strip_prefix(&tmp).unwrap_or(p).to_path_buf());
    crate::fsutil::write_json(
        &tmp.join("manifest.json"),
        &Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            key: key.clone(),
            memory: stored,
        },
    )?;
    if status == CacheStatus::Rebuilt {
        std::fs::remove_dir_all(&dir).ok();
    }
    if std::fs::rename(&tmp, &dir).is_err() {
        // Another builder won the race; its entry is equivalent.
        std::fs::remove_dir_all(&tmp).ok();
        return Ok((load_entry(&dir, &key, section)?, status));
    }
    map_paths(&mut memory, |p| dir.join(p.strip_prefix(&tmp).unwrap_or(p)));
    Ok((memory, status))
}

fn tempdir_in(parent: &Path, key: &str) -> std::io::Result<PathBuf> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static N: AtomicU64 = AtomicU64::new(0);
    std::fs::create_dir_all(parent)?;
    let dir = parent.join(format!(
        ".tmp-{key}-{}-{}",
        std::process::id(),
        N.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn mentions(haystack: &str, name: &str) -> bool {
    !name.is_empty() && haystack.to_lowercase().contains(&name.to_lowercase())
}

/// Characters then objects of the section that the panel mentions, in section
/// order. A character counts when named in the description or as a speaker.
pub fn mentioned_names(memory: &SectionMemory, panel: &PanelSpec) -> Vec<String> {
    let speaks = |name: &str| {
        panel
            .dialogue
            .iter()
            .any(|d| d.speaker.as_deref().is_some_and(|s| s.eq_ignore_ascii_case(name)))
    };
    let chars = memory
        .char_refs
        .keys()
        .filter(|c| mentions(&panel.description, c) || speaks(c));
    let objs = memory.obj_refs.keys().filter(|o| mentions(&panel.description, o));
    chars.chain(objs).cloned().collect()
}

/// The ordered reference bundle for one panel: the scene, then mentioned
/// characters, then mentioned objects, at most `max_refs` in total. User
/// references replace memory assets of the same name.
pub fn compose_ref(
    memory: &SectionMemory,
    panel: &PanelSpec,
    user_refs: &UserRefs,
    max_refs: usize,
) -> Vec<RefAsset> {
    let pick = |key: &str, a: &RefAsset| user_refs.get(key).unwrap_or(a).clone();
    let mut out = vec![pick(&scene_key(&memory.section_id), &memory.scene_ref)];
    for name in mentioned_names(memory, panel) {
        let asset = memory.char_refs.get(&name).or_else(|| memory.obj_refs.get(&name));
        if let Some(a) = asset {
            out.push(pick(&name, a));
        }
    }
    out.truncate(max_refs.max(1));
    out
}
