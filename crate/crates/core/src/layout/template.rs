use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{is_projected, Layout, LayoutError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub tags: Vec<String>,
    pub panel_count: usize,
    pub layout: Layout,
}

/// A library of pre-projected page layouts. Serialized as a bare JSON array.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateLibrary {
    pub entries: Vec<TemplateEntry>,
}

impl TemplateLibrary {
    /// Builds a library, rejecting any entry that projection would change.
    pub fn new(entries: Vec<TemplateEntry>, grid_resolution: u32) -> Result<Self, LayoutError> {
        let lib = Self { entries };
        lib.validate(grid_resolution)?;
        Ok(lib)
    }

    pub fn validate(&self, grid_resolution: u32) -> Result<(), LayoutError> {
        for (index, e) in self.entries.iter().enumerate() {
            if e.layout.len() != e.panel_count || !is_projected(&e.layout, grid_resolution) {
                return Err(LayoutError::TemplateNotProjected { index });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, grid_resolution: u32) -> Result<Self, LayoutError> {
        let lib: TemplateLibrary = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        lib.validate(grid_resolution)?;
        Ok(lib)
    }
}

/// The entry with `panel_count` panels sharing the most tags with `tags`;
/// the earliest such entry wins ties.
pub fn retrieve_template<S: AsRef<str>>(
    library: &TemplateLibrary,
    panel_count: usize,
    tags: &[S],
) -> Option<Layout> {
    let wanted: HashSet<&str> = tags.iter().map(AsRef::as_ref).collect();
    let mut best: Option<(usize, &TemplateEntry)> = None;
    for e in library.entries.iter().filter(|e| e.panel_count == panel_count) {
        let overlap = e
            .tags
            .iter()
            .map(String::as_str)
            .collect::<HashSet<_>>()
            .intersection(&wanted)
            .count();
        if best.is_none_or(|(b, _)| overlap > b) {
            best = Some((overlap, e));
        }
    }
    best.map(|(_, e)| e.layout.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(tags: &[&str], n: usize) -> TemplateEntry {
        TemplateEntry {
            tags: tags.iter().map(|s| s.to_string()).collect(),
            panel_count: n,
            layout: Layout::uniform_grid(0, n, 48),
        }
    }

    #[test]
    fn picks_by_count_then_tags() {
        let lib = TemplateLibrary::new(
            vec![entry(&["dialogue"], 4), entry(&["action"], 4), entry(&[], 3)],
            48,
        )
        .unwrap();
        assert_eq!(retrieve_template(&lib, 4, &["action"]), Some(lib.entries[1].layout.clone()));
        assert_eq!(retrieve_template(&lib, 4, &["none"]), Some(lib.entries[0].layout.clone()));
        assert_eq!(retrieve_template::<&str>(&lib, 7, &[]), None);
    }

    #[test]
    fn rejects_unprojected_entry() {
        let mut e = entry(&[], 2);
        e.layout.panels[0].region.w *= 0.5;
        assert!(matches!(
            TemplateLibrary::new(vec![e], 48),
            Err(LayoutError::TemplateNotProjected { index: 0 })
        ));
    }
}
