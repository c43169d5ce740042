use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gateway::GatewayMode;
use crate::layout::LayoutConstraints;

use super::StoryError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Per-page panel targets: one value for every page, or one per page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PanelCounts {
    Uniform(usize),
    PerPage(Vec<usize>),
}

/// Where panel images come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Deterministic offline placeholder art.
    #[default]
    Stub,
    /// The image model behind the gateway (live, record or replay).
    Gateway,
}

/// Weights of the bubble placement score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementWeights {
    pub subject: f64,
    pub distance: f64,
    pub reading_order: f64,
    pub overflow: f64,
    pub bubble: f64,
}

impl Default for PlacementWeights {
    fn default() -> Self {
        Self {
            subject: 1.0,
            distance: 0.5,
            reading_order: 2.0,
            overflow: 4.0,
            bubble: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub page_count: usize,
    pub panel_counts: PanelCounts,
    #[serde(default = "default_style")]
    pub style: String,
    #[serde(default = "default_language")]
    pub language: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_page_px")]
    pub page_px: [u32; 2],
    #[serde(default = "default_gutter")]
    pub gutter_px: u32,
    #[serde(default = "default_border")]
    pub border_px: u32,
    #[serde(default = "default_parallel")]
    pub max_parallel_renders: usize,
    #[serde(default)]
    pub mode: GatewayMode,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default = "default_font_px")]
    pub font_px: u32,
    #[serde(default = "default_min_font_px")]
    pub min_font_px: u32,
    #[serde(default = "default_max_refs")]
    pub max_refs: usize,
    #[serde(default = "default_grid")]
    pub grid_resolution: u32,
    #[serde(default = "default_min_area")]
    pub min_panel_area: f64,
    #[serde(default = "default_rounds")]
    pub refine_rounds: usize,
    #[serde(default)]
    pub placement_weights: PlacementWeights,
}

fn schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}
fn default_style() -> String {
    "black-and-white manga, screentone shading, clean ink lines".into()
}
fn default_language() -> String {
    "en".into()
}
fn default_page_px() -> [u32; 2] {
    [1488, 2104]
}
fn default_gutter() -> u32 {
    24
}
fn default_border() -> u32 {
    3
}
fn default_parallel() -> usize {
    4
}
fn default_font_px() -> u32 {
    24
}
fn default_min_font_px() -> u32 {
    12
}
fn default_max_refs() -> usize {
    6
}
fn default_grid() -> u32 {
    48
}
fn default_min_area() -> f64 {
    0.02
}
fn default_rounds() -> usize {
    crate::layout::DEFAULT_REFINE_ROUNDS
}

impl ProjectConfig {
    /// A config with defaults for everything but the page structure.
    pub fn new(page_count: usize, panel_counts: PanelCounts) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            page_count,
            panel_counts,
            style: default_style(),
            language: default_language(),
            seed: 0,
            page_px: default_page_px(),
            gutter_px: default_gutter(),
            border_px: default_border(),
            max_parallel_renders: default_parallel(),
            mode: GatewayMode::default(),
            backend: BackendKind::default(),
            font_px: default_font_px(),
            min_font_px: default_min_font_px(),
            max_refs: default_max_refs(),
            grid_resolution: default_grid(),
            min_panel_area: default_min_area(),
            refine_rounds: default_rounds(),
            placement_weights: PlacementWeights::default(),
        }
    }

    pub fn panel_count(&self, page: usize) -> usize {
        match &self.panel_counts {
            PanelCounts::Uniform(n) => *n,
            PanelCounts::PerPage(v) => v.get(page).copied().unwrap_or(0),
        }
    }

    pub fn layout_constraints(&self, page: usize) -> LayoutConstraints {
        let mut c = LayoutConstraints::new(self.panel_count(page));
        c.grid_resolution = self.grid_resolution;
        c.min_panel_area = self.min_panel_area;
        c
    }

    pub fn validate(&self) -> Result<(), StoryError> {
        let bad = |msg: String| Err(StoryError::InvalidConfig(msg));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.page_count == 0 {
            return bad("page_count must be at least 1".into());
        }
        if let PanelCounts::PerPage(v) = &self.panel_counts {
            if v.len() != self.page_count {
                return bad(format!(
                    "panel_counts lists {} pages, page_count is {}",
                    v.len(),
                    self.page_count
                ));
            }
        }
        for page in 0..self.page_count {
            let n = self.panel_count(page);
            if !(1..=12).contains(&n) {
                return bad(format!("page {page}: panel count {n} outside 1..=12"));
            }
            self.layout_constraints(page)
                .validate()
                .map_err(|e| StoryError::InvalidConfig(format!("page {page}: {e}")))?;
        }
        let [w, h] = self.page_px;
        if w == 0 || h == 0 {
            return bad("page_px must be positive".into());
        }
        if self.gutter_px >= w.min(h) / 4 {
            return bad(format!("gutter_px {} too large for the page", self.gutter_px));
        }
        if self.min_font_px == 0 || self.min_font_px > self.font_px {
            return bad("need 0 < min_font_px <= font_px".into());
        }
        if self.max_parallel_renders == 0 {
            return bad("max_parallel_renders must be at least 1".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoryError> {
        let text = std::fs::read_to_string(path)?;
        let config: ProjectConfig = serde_json::from_str(&text)
            .map_err(|e| StoryError::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}
