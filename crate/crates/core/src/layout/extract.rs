//! Layout extraction from page rasters by recursive XY-cut.

use image::DynamicImage;

use crate::geometry::Rect;

use super::{project, Layout, LayoutConstraints, LayoutError, Panel};

/// Pixels at or above this luma count as gutter.
pub const GUTTER_LUMA: u8 = 240;

const MAX_DEPTH: usize = 4;

/// Half-open pixel box.
#[derive(Debug, Clone, Copy)]
struct PixBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

struct Mask {
    w: u32,
    h: u32,
    gutter: Vec<bool>,
}

impl Mask {
    fn is_gutter(&self, x: u32, y: u32) -> bool {
        self.gutter[(y * self.w + x) as usize]
    }

    fn row_clear(&self, b: &PixBox, y: u32) -> bool {
        (b.x0..b.x1).all(|x| self.is_gutter(x, y))
    }

    fn col_clear(&self, b: &PixBox, x: u32) -> bool {
        (b.y0..b.y1).all(|y| self.is_gutter(x, y))
    }

    /// Content bounding box of `b`, `None` if it is all gutter.
    fn trim(&self, b: PixBox) -> Option<PixBox> {
        let y0 = (b.y0..b.y1).find(|&y| !self.row_clear(&b, y))?;
        let y1 = (b.y0..b.y1).rev().find(|&y| !self.row_clear(&b, y))? + 1;
        let b = PixBox { y0, y1, ..b };
        let x0 = (b.x0..b.x1).find(|&x| !self.col_clear(&b, x))?;
        let x1 = (b.x0..b.x1).rev().find(|&x| !self.col_clear(&b, x))? + 1;
        Some(PixBox { x0, y0, x1, y1 })
    }
}

/// Runs of consecutive clear lines `[start, end)` at least `min_len` long.
fn bands(lo: u32, hi: u32, min_len: u32, clear: impl Fn(u32) -> bool) -> Vec<(u32, u32)> {
    let mut out = vec![];
    let mut start = None;
    for i in lo..=hi {
        let c = i < hi && clear(i);
        match (c, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s >= min_len {
                    out.push((s, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn cut(mask: &Mask, b: PixBox, depth: usize, leaves: &mut Vec<PixBox>) {
    let Some(b) = mask.trim(b) else { return };
    if depth == MAX_DEPTH {
        leaves.push(b);
        return;
    }
    let min_w = ((mask.w as f64) * 0.01).ceil().max(1.0) as u32;
    let min_h = ((mask.h as f64) * 0.01).ceil().max(1.0) as u32;
    let cols = bands(b.x0, b.x1, min_w, |x| mask.col_clear(&b, x));
    let rows = bands(b.y0, b.y1, min_h, |y| mask.row_clear(&b, y));
    let widest = |v: &[(u32, u32)]| v.iter().map(|(s, e)| e - s).max().unwrap_or(0);
    let (wc, wr) = (widest(&cols), widest(&rows));
    if wc == 0 && wr == 0 {
        leaves.push(b);
        return;
    }
    if wc >= wr {
        let mut x = b.x0;
        for (s, e) in cols.into_iter().chain([(b.x1, b.x1)]) {
            cut(mask, PixBox { x0: x, x1: s, ..b }, depth + 1, leaves);
            x = e;
        }
    } else {
        let mut y = b.y0;
        for (s, e) in rows.into_iter().chain([(b.y1, b.y1)]) {
            cut(mask, PixBox { y0: y, y1: s, ..b }, depth + 1, leaves);
            y = e;
        }
    }
}

/// Detects panel rectangles on a page raster and projects them into a layout.
///
/// Panels are renamed `p0, p1, ...` in reading order. A page without any
/// gutter split (including an all-white page) yields one full-page panel.
pub fn extract_layout(
    page: &DynamicImage,
    page_index: usize,
    grid_resolution: u32,
) -> Result<Layout, LayoutError> {
    let luma = page.to_luma8();
    let (w, h) = luma.dimensions();
    let mask = Mask {
        w,
        h,
        gutter: luma.pixels().map(|p| p.0[0] >= GUTTER_LUMA).collect(),
    };
    let mut leaves = vec![];
    if w > 0 && h > 0 {
        cut(&mask, PixBox { x0: 0, y0: 0, x1: w, y1: h }, 0, &mut leaves);
    }
    let panels: Vec<Panel> = if leaves.len() <= 1 {
        vec![Panel::new("p0", crate::geometry::PAGE)]
    } else {
        leaves
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let r = Rect {
                    x: b.x0 as f64 / w as f64,
                    y: b.y0 as f64 / h as f64,
                    w: (b.x1 - b.x0) as f64 / w as f64,
                    h: (b.y1 - b.y0) as f64 / h as f64,
                };
                Panel::new(format!("p{i}"), r)
            })
            .collect()
    };
    let g = grid_resolution as usize;
    let mut constraints = LayoutConstraints::new(panels.len().min(g * g));
    constraints.grid_resolution = grid_resolution;
    constraints.min_panel_area = 0.0;
    let projected = project(&Layout::new(page_index, panels), &constraints)?;
    let ids: Vec<String> = (0..projected.len()).map(|i| format!("p{i}")).collect();
    Ok(projected.with_ids(&ids))
}
