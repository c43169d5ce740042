//! Recorded request/response store.
//!
//! A cassette is a JSON file plus one sibling PNG per recorded image response:
//!
//! ```text
//! fixtures/story.cassette.json
//! fixtures/story.cassette.<key>.png
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{GatewayError, GatewayResponse, RequestKind};

pub const CASSETTE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub kind: RequestKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_file: Option<String>,
    /// Canonical request, kept for humans diagnosing misses.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub request: Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteFile {
    schema_version: u32,
    entries: Vec<CassetteEntry>,
}

#[derive(Debug)]
pub struct Cassette {
    path: PathBuf,
    entries: BTreeMap<String, CassetteEntry>,
}

impl Cassette {
    /// Opens a cassette, or starts an empty one if the file does not exist yet.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let path = path.into();
        if !path.exists() {
            return Ok(Self {
                path,
                entries: BTreeMap::new(),
            });
        }
        let text = fs::read_to_string(&path)?;
        let file: CassetteFile = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Cassette(format!("{}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for entry in file.entries {
            if entries.insert(entry.key.clone(), entry).is_some() {
                return Err(GatewayError::Cassette(format!(
                    "{}: duplicate key",
                    path.display()
                )));
            }
        }
        Ok(Self { path, entries })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &CassetteEntry> {
        self.entries.values()
    }

    fn image_path(&self, file: &str) -> PathBuf {
        self.path
            .parent()
            .map(|p| p.join(file))
            .unwrap_or_else(|| PathBuf::from(file))
    }

    fn image_file_name(&self, key: &str) -> String {
        let stem = self
            .path
            .file_name()
            .map(|s| s.to_string_lossy().trim_end_matches(".json").to_string())
            .unwrap_or_else(|| "cassette".into());
        format!("{stem}.{key}.png")
    }

    pub fn lookup(&self, key: &str) -> Result<Option<GatewayResponse>, GatewayError> {
        let Some(entry) = self.entries.get(key) else {
            return Ok(None);
        };
        match (&entry.text, &entry.image_file) {
            (Some(text), _) => Ok(Some(GatewayResponse::Text(text.clone()))),
            (None, Some(file)) => {
                let bytes = fs::read(self.image_path(file)).map_err(|e| {
                    GatewayError::Cassette(format!("image {file} for {key}: {e}"))
                })?;
                Ok(Some(GatewayResponse::Image(bytes)))
            }
            (None, None) => Err(GatewayError::Cassette(format!("entry {key} has no response"))),
        }
    }

    /// Appends (or replaces) an entry and persists the cassette.
    pub fn insert(
        &mut self,
        key: &str,
        kind: RequestKind,
        request: Value,
        response: &GatewayResponse,
    ) -> Result<(), GatewayError> {
        let mut entry = CassetteEntry {
            key: key.to_string(),
            kind,
            text: None,
            image_file: None,
            request,
        };
        match response {
            GatewayResponse::Text(t) => entry.text = Some(t.clone()),
            GatewayResponse::Image(bytes) => {
                let name = self.image_file_name(key);
                if let Some(dir) = self.path.parent() {
                    fs::create_dir_all(dir)?;
                }
                fs::write(self.image_path(&name), bytes)?;
                entry.image_file = Some(name);
            }
        }
        self.entries.insert(key.to_string(), entry);
        self.save()
    }

    pub fn save(&self) -> Result<(), GatewayError> {
        let file = CassetteFile {
            schema_version: CASSETTE_SCHEMA_VERSION,
            entries: self.entries.values().cloned().collect(),
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| GatewayError::Cassette(e.to_string()))?;
        crate::fsutil::write_atomic(&self.path, text.as_bytes())?;
        Ok(())
    }
}
