//! Panel prompts, panel sizing and rendering backends.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{digest_u64, json_digest, sha256_hex};
use crate::gateway::{GatewayError, GatewayRequest, ImageRef, ModelGateway};
use crate::geometry::Rect;
use crate::layout::Layout;
use crate::memory::{mentioned_names, RefAsset, SectionMemory};
use crate::story::{PanelSpec, ProjectConfig};

pub const MIN_SIDE_PX: u32 = 256;
pub const SIDE_MULTIPLE: u32 = 8;
/// Upper bound on a panel's long side; very thin regions are widened less.
pub const MAX_SIDE_PX: u32 = 4096;
const WIDE: f64 = 1.5;
const NEGATIVE: &str = "text, letters, speech bubbles, captions, watermark, signature";

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("panel {0} has no region in the page layout")]
    NoRegion(String),
    #[error("rendering prompt {prompt_digest} failed: {source}")]
    Gateway {
        prompt_digest: String,
        #[source]
        source: GatewayError,
    },
    #[error("backend returned an unreadable image: {0}")]
    BadImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelPrompt {
    pub panel_id: String,
    pub section_id: String,
    pub text: String,
    pub negative_hints: String,
    pub seed: u64,
}

impl PanelPrompt {
    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelAsset {
    pub panel_id: String,
    pub image_path: PathBuf,
    pub width_px: u32,
    pub height_px: u32,
    pub backend_id: String,
    pub prompt_digest: String,
    pub image_sha256: String,
}

/// Seed for one panel render. `variant` changes on each explicit re-render.
pub fn panel_seed(project_seed: u64, page: usize, panel_id: &str, variant: u32) -> u64 {
    digest_u64(format!("{project_seed}/{page}/{panel_id}/{variant}").as_bytes())
}

/// Framing clause: the planner's hint when given, else derived from the
/// region's aspect in page pixels.
pub fn shot_clause(panel: &PanelSpec, region: &Rect, page_px: [u32; 2]) -> String {
    if let Some(hint) = panel.shot_hint.as_deref().filter(|h| !h.trim().is_empty()) {
        return hint.trim().to_string();
    }
    let aspect = region.w * page_px[0] as f64 / (region.h * page_px[1] as f64);
    if aspect > WIDE {
        "wide landscape framing".into()
    } else if aspect < 1.0 / WIDE {
        "tall vertical framing".into()
    } else {
        "medium framing".into()
    }
}

/// The panel prompt: style, framing, section description, the profiles of
/// mentioned characters and objects, then the panel description. Dialogue is
/// never included; lettering happens after composition.
pub fn build_panel_prompt(
    page_index: usize,
    panel: &PanelSpec,
    layout: &Layout,
    memory: &SectionMemory,
    config: &ProjectConfig,
    variant: u32,
) -> Result<PanelPrompt, RenderError> {
    let region = layout
        .panel(&panel.panel_id)
        .ok_or_else(|| RenderError::NoRegion(panel.panel_id.clone()))?
        .region;
    let mut text = format!(
        "Style: {}\nShot: {}\nSection: {}\n",
        config.style.trim(),
        shot_clause(panel, &region, config.page_px),
        memory.description.trim()
    );
    for name in mentioned_names(memory, panel) {
        if let Some(profile) = memory.profiles.get(&name) {
            text.push_str(&format!("{name}: {}\n", profile.trim()));
        }
    }
    text.push_str(&format!("Panel: {}", panel.description.trim()));
    Ok(PanelPrompt {
        panel_id: panel.panel_id.clone(),
        section_id: memory.section_id.clone(),
        text,
        negative_hints: NEGATIVE.into(),
        seed: panel_seed(config.seed, page_index, &panel.panel_id, variant),
    })
}

/// Pixel size to render a region at: mapped to page pixels, scaled up so the
/// short side reaches `min_side`, each side rounded to a multiple of `multiple`.
pub fn panel_dims(region: &Rect, page_px: [u32; 2], min_side: u32, multiple: u32) -> (u32, u32) {
    let m = multiple.max(1) as f64;
    let mut w = region.w * page_px[0] as f64;
    let mut h = region.h * page_px[1] as f64;
    let short = w.min(h);
    if short < min_side as f64 {
        let s = min_side as f64 / short;
        w *= s;
        h *= s;
    }
    let long = w.max(h);
    if long > MAX_SIDE_PX as f64 {
        let s = MAX_SIDE_PX as f64 / long;
        w = (w * s).max(min_side as f64);
        h = (h * s).max(min_side as f64);
    }
    let snap = |v: f64| (((v / m).round() * m) as u32).max(multiple.max(1));
    (snap(w), snap(h))
}

pub struct RenderJob<'a> {
    pub prompt: &'a PanelPrompt,
    pub refs: &'a [RefAsset],
    pub dims: (u32, u32),
}

pub trait RenderBackend: Send + Sync {
    fn id(&self) -> String;
    fn render(&self, job: &RenderJob<'_>) -> Result<RgbImage, RenderError>;
}

/// Twelve fills, all darker than the gutter threshold so that stub panels
/// never read as gutter.
pub const PALETTE: [[u8; 3]; 12] = [
    [214, 153, 153],
    [153, 191, 214],
    [168, 214, 153],
    [214, 196, 140],
    [181, 153, 214],
    [140, 204, 196],
    [214, 168, 204],
    [191, 191, 140],
    [153, 168, 214],
    [214, 181, 153],
    [160, 200, 160],
    [200, 160, 180],
];

/// Palette index of a section. Different sections may collide.
pub fn section_color(section_id: &str) -> usize {
    (digest_u64(section_id.as_bytes()) % PALETTE.len() as u64) as usize
}

/// Deterministic placeholder art: section-keyed background, the panel id,
/// one block per reference asset and a stripe encoding the seed.
#[derive(Debug, Default, Clone, Copy)]
pub struct StubBackend;

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, c: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

impl RenderBackend for StubBackend {
    fn id(&self) -> String {
        "stub".into()
    }

    fn render(&self, job: &RenderJob<'_>) -> Result<RgbImage, RenderError> {
        let (w, h) = job.dims;
        let bg = PALETTE[section_color(&job.prompt.section_id)];
        let mut img = RgbImage::from_pixel(w, h, Rgb(bg));
        let ink = Rgb([30, 30, 30]);
        let b = 4.min(w / 8).min(h / 8);
        fill(&mut img, 0, 0, w, b, ink);
        fill(&mut img, 0, h - b, w, b, ink);
        fill(&mut img, 0, 0, b, h, ink);
        fill(&mut img, w - b, 0, b, h, ink);
        let scale = (w.min(h) / 96).clamp(1, 4);
        crate::glyph::draw_line(&mut img, 12, 12, &job.prompt.panel_id, scale, ink);
        let block = 8 * scale;
        let top = 12 + 8 * scale + 8;
        for (i, r) in job.refs.iter().enumerate() {
            let c = PALETTE[(digest_u64(r.digest().as_bytes()) % 12) as usize];
            let x = 12 + i as u32 * (block + 4);
            fill(&mut img, x, top, block, block, ink);
            fill(&mut img, x + 2, top + 2, block - 4, block - 4, Rgb(c));
        }
        let stripe_h = 2 * scale;
        let seg = ((w - 2 * b) / 64).max(1);
        for bit in 0..64u32 {
            if job.prompt.seed >> bit & 1 == 1 {
                fill(&mut img, b + bit * seg, h - b - stripe_h - 4, seg, stripe_h, ink);
            }
        }
        Ok(img)
    }
}

/// Renders through the gateway's image model and cover-fits the result to the
/// requested size.
pub struct GatewayBackend<'g> {
    pub gateway: &'g ModelGateway,
}

impl RenderBackend for GatewayBackend<'_> {
    fn id(&self) -> String {
        format!("gateway:{}", self.gateway.models().image)
    }

    fn render(&self, job: &RenderJob<'_>) -> Result<RgbImage, RenderError> {
        let references = job
            .refs
            .iter()
            .filter_map(|r| r.image_path.as_ref())
            .map(ImageRef::from_file)
            .collect::<Result<Vec<_>, _>>()?;
        let request = GatewayRequest::image(
            self.gateway.models().image.clone(),
            job.prompt.text.clone(),
            job.prompt.negative_hints.clone(),
            job.dims,
            job.prompt.seed,
            references,
        );
        let bytes = self
            .gateway
            .call(&request)
            .and_then(|r| r.into_image())
            .map_err(|source| RenderError::Gateway {
                prompt_digest: job.prompt.digest(),
                source,
            })?;
        let img = crate::raster::decode(&bytes).map_err(|e| RenderError::BadImage(e.to_string()))?;
        Ok(crate::raster::cover_fit(&img, job.dims.0, job.dims.1))
    }
}

/// Renders one panel and writes it as PNG to `out_path`.
pub fn render_panel(
    prompt: &PanelPrompt,
    refs: &[RefAsset],
    dims: (u32, u32),
    backend: &dyn RenderBackend,
    out_path: &Path,
) -> Result<PanelAsset, RenderError> {
    let job = RenderJob { prompt, refs, dims };
    let mut img = backend.render(&job)?;
    if img.dimensions() != dims {
        img = crate::raster::cover_fit(&image::DynamicImage::ImageRgb8(img), dims.0, dims.1);
    }
    let bytes = crate::raster::encode_png(&img);
    crate::fsutil::write_atomic(out_path, &bytes)?;
    Ok(PanelAsset {
        panel_id: prompt.panel_id.clone(),
        image_path: out_path.to_path_buf(),
        width_px: dims.0,
        height_px: dims.1,
        backend_id: backend.id(),
        prompt_digest: prompt.digest(),
        image_sha256: sha256_hex(&bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Panel;
    use crate::memory::RefOrigin;
    use crate::story::PanelCounts;
    use indexmap::IndexMap;

    fn asset(name: &str) -> RefAsset {
        RefAsset {
            name: name.into(),
            text_desc: format!("{name} profile"),
            image_path: None,
            image_sha256: None,
            origin: RefOrigin::Generated,
        }
    }

    fn memory() -> SectionMemory {
        let mut char_refs = IndexMap::new();
        char_refs.insert("Ren".to_string(), asset("Ren"));
        char_refs.insert("Mika".to_string(), asset("Mika"));
        SectionMemory {
            section_id: "s0".into(),
            description: "The portal opens".into(),
            scene_ref: asset("classroom"),
            profiles: char_refs.iter().map(|(k, a)| (k.clone(), a.text_desc.clone())).collect(),
            char_refs,
            obj_refs: IndexMap::new(),
            warnings: vec![],
        }
    }

    fn panel(desc: &str) -> PanelSpec {
        PanelSpec {
            panel_id: "p0_0".into(),
            description: desc.into(),
            section_id: "s0".into(),
            dialogue: vec![],
            shot_hint: None,
        }
    }

    fn layout(r: Rect) -> Layout {
        Layout::new(0, vec![Panel::new("p0_0", r)])
    }

    #[test]
    fn prompt_is_deterministic_and_selective() {
        let c = ProjectConfig::new(1, PanelCounts::Uniform(1));
        let l = layout(crate::geometry::PAGE);
        let a = build_panel_prompt(0, &panel("Ren looks up"), &l, &memory(), &c, 0).unwrap();
        let b = build_panel_prompt(0, &panel("Ren looks up"), &l, &memory(), &c, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.text.contains("Ren: Ren profile"));
        assert!(!a.text.contains("Mika"));
        assert!(a.text.ends_with("Panel: Ren looks up"));
        let v = build_panel_prompt(0, &panel("Ren looks up"), &l, &memory(), &c, 1).unwrap();
        assert_ne!(v.seed, a.seed);
    }

    #[test]
    fn framing_follows_region_unless_hinted() {
        let mut p = panel("x");
        let wide = Rect::new(0.0, 0.0, 1.0, 0.3).unwrap();
        assert_eq!(shot_clause(&p, &wide, [1000, 1000]), "wide landscape framing");
        let tall = Rect::new(0.0, 0.0, 0.3, 1.0).unwrap();
        assert_eq!(shot_clause(&p, &tall, [1000, 1000]), "tall vertical framing");
        p.shot_hint = Some("close-up".into());
        assert_eq!(shot_clause(&p, &wide, [1000, 1000]), "close-up");
    }

    #[test]
    fn dims_rules() {
        assert_eq!(panel_dims(&crate::geometry::PAGE, [1488, 2104], 256, 8), (1488, 2104));
        let half = Rect::new(0.0, 0.0, 0.5, 1.0).unwrap();
        assert_eq!(panel_dims(&half, [1488, 2104], 256, 8), (744, 2104));
        let tiny = Rect::new(0.0, 0.0, 0.05, 0.05).unwrap();
        let (w, h) = panel_dims(&tiny, [1000, 1000], 256, 8);
        assert_eq!((w, h), (256, 256));
        let (w, h) = panel_dims(&tiny, [1488, 2104], 256, 8);
        assert_eq!(w, 256);
        let want = 0.05 * 1488.0 / (0.05 * 2104.0);
        assert!(((w as f64 / h as f64) / want - 1.0).abs() < 0.02);
    }

    #[test]
    fn stub_is_deterministic_and_section_keyed() {
        let c = ProjectConfig::new(1, PanelCounts::Uniform(1));
        let l = layout(crate::geometry::PAGE);
        let p = build_panel_prompt(0, &panel("Ren"), &l, &memory(), &c, 0).unwrap();
        let refs = vec![asset("classroom"), asset("Ren")];
        let job = RenderJob { prompt: &p, refs: &refs, dims: (256, 320) };
        let a = StubBackend.render(&job).unwrap();
        assert_eq!(a, StubBackend.render(&job).unwrap());
        assert_eq!(a.dimensions(), (256, 320));
        assert_eq!(a.get_pixel(128, 160).0, PALETTE[section_color("s0")]);
        assert!(a.pixels().all(|px| {
            let [r, g, b] = px.0;
            (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) < 240.0
        }));
    }

    #[test]
    fn replay_miss_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let gw = ModelGateway::replay(dir.path().join("empty.json")).unwrap();
        let c = ProjectConfig::new(1, PanelCounts::Uniform(1));
        let l = layout(crate::geometry::PAGE);
        let p = build_panel_prompt(0, &panel("Ren"), &l, &memory(), &c, 0).unwrap();
        let r = render_panel(&p, &[], (256, 256), &GatewayBackend { gateway: &gw }, &dir.path().join("x.png"));
        match r {
            Err(RenderError::Gateway { source: GatewayError::ReplayMiss { .. }, prompt_digest }) => {
                assert_eq!(prompt_digest, p.digest())
            }
            other => panic!("{other:?}"),
        }
    }
}
