//! Deterministic layout projection.
//!
//! Any proposed layout is mapped to an overlap-free tiling of the page with
//! the requested number of panels. All repair work happens on an integer grid
//! of `grid_resolution` cells per side:
//!
//! 1. clamp every region to the page (regions entirely off the page are dropped);
//! 2. snap edges to the grid;
//! 3. resolve overlaps in reading order, shrinking the later panel along the
//!    side of least penetration (a panel swallowed whole is dropped);
//! 4. repair the panel count: merge the pair with the longest shared edge, or
//!    split the largest panel across its longer side;
//! 5. fill blank cells by growing panels one grid row or column at a time;
//! 6. sort by reading order.
//!
//! Step 5 cannot close every hole (a pinwheel of four panels around a gap has
//! no rectangular way to absorb it). When blank cells survive it, the panels
//! are re-tiled band by band, keeping their reading order and relative sizes.
//!
//! The output always tiles the grid exactly, so `project` is idempotent.

use std::collections::HashSet;

use crate::geometry::{self, Rect};

use super::{Layout, LayoutConstraints, LayoutError, Panel};

/// A rectangle on the projection grid: half-open cell ranges `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridRect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

/// `hi - lo`, nudged so that `lo + extent == hi` holds exactly in `f64`.
/// Adjacent projected panels then share bit-identical edges.
fn exact_extent(lo: f64, hi: f64) -> f64 {
    let mut w = hi - lo;
    for _ in 0..8 {
        let s = lo + w;
        if s == hi {
            break;
        }
        w = if s < hi { w.next_up() } else { w.next_down() };
    }
    w
}

impl GridRect {
    pub fn width(&self) -> i32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width() as i64 * self.height() as i64
    }

    pub fn overlaps(&self, o: &GridRect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    fn bbox(&self, o: &GridRect) -> GridRect {
        GridRect {
            x0: self.x0.min(o.x0),
            y0: self.y0.min(o.y0),
            x1: self.x1.max(o.x1),
            y1: self.y1.max(o.y1),
        }
    }

    /// Length of the edge segment the two rectangles share, 0 if they only touch at a corner.
    fn shared_edge(&self, o: &GridRect) -> i32 {
        let span = |a0: i32, a1: i32, b0: i32, b1: i32| (a1.min(b1) - a0.max(b0)).max(0);
        let mut shared = 0;
        if self.x1 == o.x0 || o.x1 == self.x0 {
            shared += span(self.y0, self.y1, o.y0, o.y1);
        }
        if self.y1 == o.y0 || o.y1 == self.y0 {
            shared += span(self.x0, self.x1, o.x0, o.x1);
        }
        shared
    }

    pub fn to_rect(&self, g: i32) -> Rect {
        let edge = |k: i32| k as f64 / g as f64;
        let (x0, x1, y0, y1) = (edge(self.x0), edge(self.x1), edge(self.y0), edge(self.y1));
        Rect {
            x: x0,
            y: y0,
            w: exact_extent(x0, x1),
            h: exact_extent(y0, y1),
        }
    }

    /// Snaps a page-clamped rectangle to the grid, keeping at least one cell per side.
    pub fn snap(r: &Rect, g: i32) -> GridRect {
        let snap_axis = |lo: f64, hi: f64| -> (i32, i32) {
            let mut a = ((lo * g as f64).round() as i32).clamp(0, g);
            let mut b = ((hi * g as f64).round() as i32).clamp(0, g);
            if b <= a {
                if a < g {
                    b = a + 1;
                } else {
                    a = g - 1;
                    b = g;
                }
            }
            (a, b)
        };
        let (x0, x1) = snap_axis(r.x, r.right());
        let (y0, y1) = snap_axis(r.y, r.bottom());
        GridRect { x0, y0, x1, y1 }
    }
}

#[derive(Debug, Clone)]
struct Cell {
    id: String,
    rect: GridRect,
}

/// Repairs `layout` into a valid tiling with `constraints.panel_count` panels.
pub fn project(layout: &Layout, constraints: &LayoutConstraints) -> Result<Layout, LayoutError> {
    constraints.validate()?;
    layout.validate()?;
    let g = constraints.grid_resolution as i32;
    let target = constraints.panel_count;

    // 1-2: clamp and snap.
    let snapped: Vec<Cell> = layout
        .panels
        .iter()
        .filter_map(|p| {
            p.region.clamp_to_page().map(|r| Cell {
                id: p.id.clone(),
                rect: GridRect::snap(&r, g),
            })
        })
        .collect();

    // 3: overlaps, earlier panels in reading order win.
    let order = geometry::reading_order(
        &snapped.iter().map(|c| c.rect.to_rect(g)).collect::<Vec<_>>(),
    );
    let mut cells: Vec<Cell> = Vec::with_capacity(snapped.len());
    'panels: for idx in order {
        let mut cell = snapped[idx].clone();
        for kept in &cells {
            if cell.rect.overlaps(&kept.rect) {
                match shrink_away(&cell.rect, &kept.rect) {
                    Some(r) => cell.rect = r,
                    None => continue 'panels,
                }
            }
        }
        cells.push(cell);
    }
    if cells.is_empty() {
        cells.push(Cell {
            id: "p0".into(),
            rect: GridRect { x0: 0, y0: 0, x1: g, y1: g },
        });
    }

    // 4: panel count.
    while cells.len() > target {
        merge_once(&mut cells);
    }
    while cells.len() < target {
        if !split_once(&mut cells) {
            fill_blanks(&mut cells, g);
            if !split_once(&mut cells) && !carve_blank(&mut cells, g) {
                return Err(LayoutError::Infeasible(format!(
                    "cannot reach {target} panels on a {g}x{g} grid"
                )));
            }
        }
    }

    // 5: blank fill, with band re-tiling when holes cannot be absorbed.
    fill_blanks(&mut cells, g);
    if covered_cells(&cells) < (g as i64) * (g as i64) {
        retile_bands(&mut cells, g);
    }

    // 6: reading order.
    let mut out = Layout::new(
        layout.page_index,
        cells
            .into_iter()
            .map(|c| Panel::new(c.id, c.rect.to_rect(g)))
            .collect(),
    );
    out.sort_reading_order();
    Ok(out)
}

/// True when `layout` is a fixed point of projection at `grid_resolution`
/// with its own panel count and no area floor.
pub fn is_projected(layout: &Layout, grid_resolution: u32) -> bool {
    if layout.is_empty() {
        return false;
    }
    let mut c = LayoutConstraints::new(layout.len());
    c.grid_resolution = grid_resolution;
    c.min_panel_area = 0.0;
    project(layout, &c).is_ok_and(|p| &p == layout)
}

/// Shrinks `moving` so it no longer overlaps `fixed`, cutting the side with
/// the least penetration. `None` when no cut leaves a non-empty rectangle.
fn shrink_away(moving: &GridRect, fixed: &GridRect) -> Option<GridRect> {
    let mut options: Vec<(i32, GridRect)> = Vec::with_capacity(4);
    if fixed.x1 < moving.x1 {
        options.push((fixed.x1 - moving.x0, GridRect { x0: fixed.x1, ..*moving }));
    }
    if fixed.x0 > moving.x0 {
        options.push((moving.x1 - fixed.x0, GridRect { x1: fixed.x0, ..*moving }));
    }
    if fixed.y1 < moving.y1 {
        options.push((fixed.y1 - moving.y0, GridRect { y0: fixed.y1, ..*moving }));
    }
    if fixed.y0 > moving.y0 {
        options.push((moving.y1 - fixed.y0, GridRect { y1: fixed.y0, ..*moving }));
    }
    // min_by_key keeps the first of equal costs: left, right, top, bottom.
    options.into_iter().min_by_key(|(cost, _)| *cost).map(|(_, r)| r)
}

fn fresh_id(cells: &[Cell]) -> String {
    let used: HashSet<&str> = cells.iter().map(|c| c.id.as_str()).collect();
    (0..)
        .map(|k| format!("p{k}"))
        .find(|id| !used.contains(id.as_str()))
        .expect("unbounded id space")
}

/// Merges the pair with the longest shared edge whose bounding box overlaps
/// no other panel. Without such a pair, the smallest panel is dropped and its
/// space is left to the blank fill.
fn merge_once(cells: &mut Vec<Cell>) {
    let mut best: Option<(i32, usize, usize, GridRect)> = None;
    for i in 0..cells.len() {
        for j in (i + 1)..cells.len() {
            let shared = cells[i].rect.shared_edge(&cells[j].rect);
            if shared == 0 || best.as_ref().is_some_and(|b| b.0 >= shared) {
                continue;
            }
            let bbox = cells[i].rect.bbox(&cells[j].rect);
            let blocked = cells
                .iter()
                .enumerate()
                .any(|(k, c)| k != i && k != j && c.rect.overlaps(&bbox));
            if !blocked {
                best = Some((shared, i, j, bbox));
            }
        }
    }
    match best {
        Some((_, i, j, bbox)) => {
            cells[i].rect = bbox;
            cells.remove(j);
        }
        None => {
            let smallest = (0..cells.len())
                .rev()
                .min_by_key(|&k| cells[k].rect.area())
                .expect("merge called with panels");
            cells.remove(smallest);
        }
    }
}

/// Splits the largest panel across its longer side. False if it is a single cell.
fn split_once(cells: &mut Vec<Cell>) -> bool {
    let Some(k) = (0..cells.len()).rev().max_by_key(|&k| cells[k].rect.area()) else {
        return false;
    };
    let r = cells[k].rect;
    let (a, b) = if r.width() >= r.height() && r.width() >= 2 {
        let mid = r.x0 + r.width() / 2;
        (GridRect { x1: mid, ..r }, GridRect { x0: mid, ..r })
    } else if r.height() >= 2 {
        let mid = r.y0 + r.height() / 2;
        (GridRect { y1: mid, ..r }, GridRect { y0: mid, ..r })
    } else {
        return false;
    };
    let id = fresh_id(cells);
    cells[k].rect = a;
    cells.insert(k + 1, Cell { id, rect: b });
    true
}

fn occupancy(cells: &[Cell], g: i32) -> Vec<bool> {
    let mut occ = vec![false; (g * g) as usize];
    for c in cells {
        for y in c.rect.y0..c.rect.y1 {
            for x in c.rect.x0..c.rect.x1 {
                occ[(y * g + x) as usize] = true;
            }
        }
    }
    occ
}

fn covered_cells(cells: &[Cell]) -> i64 {
    cells.iter().map(|c| c.rect.area()).sum()
}

/// Adds a new panel from the first blank cell (row-major), grown right and
/// then down while the cells stay blank.
fn carve_blank(cells: &mut Vec<Cell>, g: i32) -> bool {
    let occ = occupancy(cells, g);
    let Some(first) = occ.iter().position(|o| !o) else {
        return false;
    };
    let (x0, y0) = (first as i32 % g, first as i32 / g);
    let mut x1 = x0 + 1;
    while x1 < g && !occ[(y0 * g + x1) as usize] {
        x1 += 1;
    }
    let mut y1 = y0 + 1;
    while y1 < g && (x0..x1).all(|x| !occ[(y1 * g + x) as usize]) {
        y1 += 1;
    }
    let id = fresh_id(cells);
    cells.push(Cell {
        id,
        rect: GridRect { x0, y0, x1, y1 },
    });
    true
}

/// Grows panels into blank cells, one row or column per panel and side per
/// round, until no panel can grow.
fn fill_blanks(cells: &mut [Cell], g: i32) {
    let mut occ = occupancy(cells, g);
    let free = |occ: &[bool], x: i32, y: i32| !occ[(y * g + x) as usize];
    loop {
        let mut changed = false;
        for c in cells.iter_mut() {
            let r = c.rect;
            // left
            if r.x0 > 0 && (r.y0..r.y1).all(|y| free(&occ, r.x0 - 1, y)) {
                c.rect.x0 -= 1;
                (r.y0..r.y1).for_each(|y| occ[(y * g + r.x0 - 1) as usize] = true);
                changed = true;
            }
            let r = c.rect;
            // right
            if r.x1 < g && (r.y0..r.y1).all(|y| free(&occ, r.x1, y)) {
                c.rect.x1 += 1;
                (r.y0..r.y1).for_each(|y| occ[(y * g + r.x1) as usize] = true);
                changed = true;
            }
            let r = c.rect;
            // up
            if r.y0 > 0 && (r.x0..r.x1).all(|x| free(&occ, x, r.y0 - 1)) {
                c.rect.y0 -= 1;
                (r.x0..r.x1).for_each(|x| occ[((r.y0 - 1) * g + x) as usize] = true);
                changed = true;
            }
            let r = c.rect;
            // down
            if r.y1 < g && (r.x0..r.x1).all(|x| free(&occ, x, r.y1)) {
                c.rect.y1 += 1;
                (r.x0..r.x1).for_each(|x| occ[(r.y1 * g + x) as usize] = true);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Splits `total` cells among `weights`, at least one each, by largest remainder.
fn allocate(weights: &[f64], total: i32) -> Vec<i32> {
    let n = weights.len() as i32;
    debug_assert!(n >= 1 && n <= total);
    let spare = (total - n) as f64;
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum * spare).collect()
    } else {
        vec![spare / n as f64; n as usize]
    };
    let mut out: Vec<i32> = quotas.iter().map(|q| 1 + q.floor() as i32).collect();
    let mut left = total - out.iter().sum::<i32>();
    let mut by_remainder: Vec<usize> = (0..out.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in by_remainder.iter().cycle() {
        if left <= 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Re-tiles the page band by band: band heights follow the bands' current
/// heights, panel widths within a band follow the panels' current widths.
fn retile_bands(cells: &mut [Cell], g: i32) {
    let rects: Vec<Rect> = cells.iter().map(|c| c.rect.to_rect(g)).collect();
    let mut bands = geometry::reading_bands(&rects);
    if bands.len() > g as usize || bands.iter().any(|b| b.len() > g as usize) {
        let flat: Vec<usize> = bands.into_iter().flatten().collect();
        bands = flat.chunks(g as usize).map(|c| c.to_vec()).collect();
    }
    let heights: Vec<f64> = bands
        .iter()
        .map(|b| {
            let top = b.iter().map(|&i| cells[i].rect.y0).min().unwrap_or(0);
            let bottom = b.iter().map(|&i| cells[i].rect.y1).max().unwrap_or(0);
            (bottom - top) as f64
        })
        .collect();
    let rows = allocate(&heights, g);
    let mut y = 0;
    for (band, rows) in bands.iter().zip(rows) {
        let mut members = band.clone();
        members.sort_by_key(|&i| (cells[i].rect.x0, cells[i].rect.y0));
        let widths: Vec<f64> = members.iter().map(|&i| cells[i].rect.width() as f64).collect();
        let cols = allocate(&widths, g);
        let mut x = 0;
        for (&i, w) in members.iter().zip(cols) {
            cells[i].rect = GridRect {
                x0: x,
                y0: y,
                x1: x + w,
                y1: y + rows,
            };
            x += w;
        }
        y += rows;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(rects: &[(f64, f64, f64, f64)]) -> Layout {
        Layout::new(
            0,
            rects
                .iter()
                .enumerate()
                .map(|(i, &(x, y, w, h))| Panel::new(format!("p{i}"), Rect::new(x, y, w, h).unwrap()))
                .collect(),
        )
    }

    fn assert_tiling(l: &Layout, n: usize) {
        assert_eq!(l.len(), n);
        assert_eq!(l.overlap(), 0.0, "{l:?}");
        assert!(l.coverage() >= 0.999, "{l:?}");
    }

    #[test]
    fn exact_tiling_is_a_fixed_point() {
        let l = layout(&[(0.5, 0.0, 0.5, 1.0), (0.0, 0.0, 0.5, 1.0)]);
        let out = project(&l, &LayoutConstraints::new(2)).unwrap();
        assert_eq!(out, l);
    }

    #[test]
    fn clamps_then_fills() {
        let l = layout(&[(-0.1, 0.0, 0.5, 1.0)]);
        let out = project(&l, &LayoutConstraints::new(1)).unwrap();
        assert_eq!(out.panels[0].region, crate::geometry::PAGE);
    }

    #[test]
    fn clamp_snap_without_fill_keeps_clamped_extent() {
        let r = Rect::new(-0.1, 0.0, 0.5, 1.0).unwrap().clamp_to_page().unwrap();
        let snapped = GridRect::snap(&r, 48);
        assert_eq!((snapped.x0, snapped.x1, snapped.y0, snapped.y1), (0, 19, 0, 48));
    }

    #[test]
    fn splits_largest_when_short() {
        let l = layout(&[(0.0, 0.0, 0.3, 1.0), (0.3, 0.0, 0.7, 1.0)]);
        let out = project(&l, &LayoutConstraints::new(3)).unwrap();
        assert_tiling(&out, 3);
        // the wide right panel was split, the narrow left one kept
        assert!(out.panels.iter().any(|p| p.id == "p0" && (p.region.w - 0.3).abs() < 0.03));
    }

    #[test]
    fn merges_when_long() {
        let l = layout(&[
            (0.0, 0.0, 0.5, 0.5),
            (0.5, 0.0, 0.5, 0.5),
            (0.0, 0.5, 0.5, 0.5),
            (0.5, 0.5, 0.5, 0.5),
        ]);
        let out = project(&l, &LayoutConstraints::new(3)).unwrap();
        assert_tiling(&out, 3);
    }

    #[test]
    fn resolves_overlap() {
        let l = layout(&[(0.0, 0.0, 0.6, 1.0), (0.4, 0.0, 0.6, 1.0)]);
        let out = project(&l, &LayoutConstraints::new(2)).unwrap();
        assert_tiling(&out, 2);
    }

    #[test]
    fn pinwheel_hole_is_retiled() {
        let g = 48.0;
        let l = layout(&[
            (0.0, 0.0, 32.0 / g, 16.0 / g),
            (32.0 / g, 0.0, 16.0 / g, 32.0 / g),
            (16.0 / g, 32.0 / g, 32.0 / g, 16.0 / g),
            (0.0, 16.0 / g, 16.0 / g, 32.0 / g),
        ]);
        let out = project(&l, &LayoutConstraints::new(4)).unwrap();
        assert_tiling(&out, 4);
        assert_eq!(project(&out, &LayoutConstraints::new(4)).unwrap(), out);
    }

    #[test]
    fn everything_off_page_still_projects() {
        let l = layout(&[(1.5, 1.5, 0.2, 0.2), (-2.0, 0.0, 0.5, 0.5)]);
        let out = project(&l, &LayoutConstraints::new(3)).unwrap();
        assert_tiling(&out, 3);
    }

    #[test]
    fn contained_panel_is_dropped_then_recreated() {
        let l = layout(&[(0.0, 0.0, 1.0, 1.0), (0.2, 0.2, 0.2, 0.2)]);
        let out = project(&l, &LayoutConstraints::new(2)).unwrap();
        assert_tiling(&out, 2);
    }

    #[test]
    fn infeasible_is_an_error() {
        let l = layout(&[(0.0, 0.0, 1.0, 1.0)]);
        let mut c = LayoutConstraints::new(10);
        c.min_panel_area = 0.2;
        assert!(matches!(project(&l, &c), Err(LayoutError::Infeasible(_))));
    }

    #[test]
    fn allocation_sums_to_total() {
        assert_eq!(allocate(&[1.0, 1.0, 1.0], 48), vec![16, 16, 16]);
        assert_eq!(allocate(&[0.0, 0.0], 5).iter().sum::<i32>(), 5);
        assert_eq!(allocate(&[10.0, 1.0], 4), vec![3, 1]);
    }

    #[test]
    fn edges_are_bit_exact_between_neighbours() {
        for g in [7, 48, 100] {
            for k in 1..g {
                let a = GridRect { x0: 0, y0: 0, x1: k, y1: g }.to_rect(g);
                let b = GridRect { x0: k, y0: 0, x1: g, y1: g }.to_rect(g);
                assert_eq!(a.right(), b.x);
                assert_eq!(b.right(), 1.0);
            }
        }
    }
}
