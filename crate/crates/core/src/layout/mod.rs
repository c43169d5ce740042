//! Page layouts: panel rectangles in reading order.
//!
//! Layouts come from three sources (a user file, a template library, or the
//! layout agent) and always pass through [`project`] before they are used.

mod agent;
mod extract;
mod project;
mod template;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Rect};

pub use agent::{
    critique, generate_layout, layout_prompt, passes_acceptance, pass_fraction, refine_layout,
    GeneratedLayout, LayoutSource, RefineOutcome, DEFAULT_REFINE_ROUNDS,
};
pub use extract::{extract_layout, GUTTER_LUMA};
pub use project::{is_projected, project, GridRect};
pub use template::{retrieve_template, TemplateEntry, TemplateLibrary};

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("infeasible constraints: {0}")]
    Infeasible(String),
    #[error("layout has no panels")]
    Empty,
    #[error("panel {id}: {reason}")]
    InvalidPanel { id: String, reason: String },
    #[error("duplicate panel id {0}")]
    DuplicateId(String),
    #[error("template {index} does not survive projection unchanged")]
    TemplateNotProjected { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("layout JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// One panel of a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub id: String,
    #[serde(flatten)]
    pub region: Rect,
}

impl Panel {
    pub fn new(id: impl Into<String>, region: Rect) -> Self {
        Self {
            id: id.into(),
            region,
        }
    }
}

/// Panels of one page, serialized in reading order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub page_index: usize,
    pub panels: Vec<Panel>,
}

impl Layout {
    pub fn new(page_index: usize, panels: Vec<Panel>) -> Self {
        Self { page_index, panels }
    }

    pub fn regions(&self) -> Vec<Rect> {
        self.panels.iter().map(|p| p.region).collect()
    }

    pub fn len(&self) -> usize {
        self.panels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.panels.is_empty()
    }

    pub fn panel(&self, id: &str) -> Option<&Panel> {
        self.panels.iter().find(|p| p.id == id)
    }

    pub fn coverage(&self) -> f64 {
        geometry::union_area(&self.regions())
    }

    pub fn overlap(&self) -> f64 {
        geometry::multi_cover_area(&self.regions(), 2)
    }

    /// Checks the structural rules a user-supplied layout must satisfy before
    /// projection: at least one panel, unique ids, finite positive extents.
    pub fn validate(&self) -> Result<(), LayoutError> {
        if self.panels.is_empty() {
            return Err(LayoutError::Empty);
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.panels {
            if !seen.insert(p.id.as_str()) {
                return Err(LayoutError::DuplicateId(p.id.clone()));
            }
            if !p.region.is_valid() {
                return Err(LayoutError::InvalidPanel {
                    id: p.id.clone(),
                    reason: "region must have finite coordinates and positive size".into(),
                });
            }
        }
        Ok(())
    }

    /// Renames panels, in order, to `ids`.
    pub fn with_ids<S: AsRef<str>>(mut self, ids: &[S]) -> Self {
        for (p, id) in self.panels.iter_mut().zip(ids) {
            p.id = id.as_ref().to_string();
        }
        self
    }

    pub fn load(path: &Path) -> Result<Self, LayoutError> {
        let layout: Layout = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn save(&self, path: &Path) -> Result<(), LayoutError> {
        crate::fsutil::write_json(path, self)?;
        Ok(())
    }

    /// A uniform grid of `count` cells: `ceil(sqrt(count))` columns, the last
    /// row stretched when it is not full. Cell edges lie on the projection grid.
    pub fn uniform_grid(page_index: usize, count: usize, grid_resolution: u32) -> Layout {
        let count = count.max(1);
        let g = grid_resolution.max(1) as i32;
        let cols = (count as f64).sqrt().ceil() as usize;
        let rows = count.div_ceil(cols);
        let mut panels = Vec::with_capacity(count);
        let mut k = 0;
        for row in 0..rows {
            let in_row = if row + 1 == rows { count - cols * (rows - 1) } else { cols };
            let y0 = row as i32 * g / rows as i32;
            let y1 = (row as i32 + 1) * g / rows as i32;
            for col in 0..in_row {
                let x0 = col as i32 * g / in_row as i32;
                let x1 = (col as i32 + 1) * g / in_row as i32;
                let cell = GridRect { x0, y0, x1, y1 };
                panels.push(Panel::new(format!("p{k}"), cell.to_rect(g)));
                k += 1;
            }
        }
        let mut layout = Layout::new(page_index, panels);
        layout.sort_reading_order();
        layout
    }

    pub fn sort_reading_order(&mut self) {
        let order = geometry::reading_order(&self.regions());
        let panels = std::mem::take(&mut self.panels);
        let mut slots: Vec<Option<Panel>> = panels.into_iter().map(Some).collect();
        self.panels = order
            .into_iter()
            .map(|i| slots[i].take().expect("reading order is a permutation"))
            .collect();
    }
}

/// Requirements a projected layout must meet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutConstraints {
    pub panel_count: usize,
    #[serde(default = "default_min_panel_area")]
    pub min_panel_area: f64,
    #[serde(default = "default_min_aspect")]
    pub min_aspect: f64,
    #[serde(default = "default_max_aspect")]
    pub max_aspect: f64,
    #[serde(default = "default_grid_resolution")]
    pub grid_resolution: u32,
}

fn default_min_panel_area() -> f64 {
    0.02
}
fn default_min_aspect() -> f64 {
    0.2
}
fn default_max_aspect() -> f64 {
    5.0
}
fn default_grid_resolution() -> u32 {
    48
}

impl LayoutConstraints {
    pub fn new(panel_count: usize) -> Self {
        Self {
            panel_count,
            min_panel_area: default_min_panel_area(),
            min_aspect: default_min_aspect(),
            max_aspect: default_max_aspect(),
            grid_resolution: default_grid_resolution(),
        }
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        let g = self.grid_resolution as usize;
        if self.panel_count == 0 {
            return Err(LayoutError::Infeasible("panel_count must be at least 1".into()));
        }
        if g == 0 {
            return Err(LayoutError::Infeasible("grid_resolution must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_panel_area) {
            return Err(LayoutError::Infeasible(format!(
                "min_panel_area {} outside [0, 1]",
                self.min_panel_area
            )));
        }
        if self.min_panel_area * self.panel_count as f64 > 1.0 {
            return Err(LayoutError::Infeasible(format!(
                "{} panels of at least {} page area cannot fit on one page",
                self.panel_count, self.min_panel_area
            )));
        }
        if self.panel_count > g * g {
            return Err(LayoutError::Infeasible(format!(
                "{} panels exceed the {g}x{g} grid",
                self.panel_count
            )));
        }
        if !(self.min_aspect > 0.0 && self.min_aspect <= self.max_aspect) {
            return Err(LayoutError::Infeasible(format!(
                "aspect bounds [{}, {}] are empty",
                self.min_aspect, self.max_aspect
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serializes_flat_panels() {
        let layout = Layout::new(
            0,
            vec![Panel::new("p0", Rect::new(0.5, 0.0, 0.5, 1.0).unwrap())],
        );
        let json = serde_json::to_string(&layout).unwrap();
        assert_eq!(
            json,
            r#"{"page_index":0,"panels":[{"id":"p0","x":0.5,"y":0.0,"w":0.5,"h":1.0}]}"#
        );
        let back: Layout = serde_json::from_str(&json).unwrap();
        assert_eq!(back, layout);
    }

    #[test]
    fn uniform_grid_tiles_page() {
        for n in 1..=12 {
            let layout = Layout::uniform_grid(0, n, 48);
            assert_eq!(layout.len(), n);
            assert!(layout.coverage() >= 0.999_999);
            assert_eq!(layout.overlap(), 0.0);
        }
    }

    #[test]
    fn infeasible_constraints() {
        let mut c = LayoutConstraints::new(60);
        assert!(matches!(c.validate(), Err(LayoutError::Infeasible(_))));
        c.panel_count = 0;
        assert!(c.validate().is_err());
        assert!(LayoutConstraints::new(12).validate().is_ok());
    }

    #[test]
    fn rejects_duplicate_ids() {
        let r = Rect::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let l = Layout::new(0, vec![Panel::new("a", r), Panel::new("a", r)]);
        assert!(matches!(l.validate(), Err(LayoutError::DuplicateId(_))));
    }
}
