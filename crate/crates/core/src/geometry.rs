//! Axis-aligned rectangle arithmetic in page-normalized coordinates.
//!
//! Every coordinate is a fraction of the page width or height, with the origin
//! at the top-left corner and `y` growing downward. The area routines use
//! coordinate compression over the distinct rectangle edges, so their results
//! are exact up to floating-point rounding and never depend on sampling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rectangle has non-positive extent ({w} x {h})")]
    Degenerate { w: f64, h: f64 },
    #[error("rectangle has a non-finite coordinate")]
    NonFinite,
}

/// A rectangle given by its top-left corner and extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// The full page, `[0, 1] x [0, 1]`.
pub const PAGE: Rect = Rect {
    x: 0.0,
    y: 0.0,
    w: 1.0,
    h: 1.0,
};

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::Degenerate { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds a rectangle from its edges; `None` when the extent is empty.
    pub fn from_edges(left: f64, top: f64, right: f64, bottom: f64) -> Option<Self> {
        Rect::new(left, top, right - left, bottom - top).ok()
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn aspect(&self) -> f64 {
        self.w / self.h
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        Rect::from_edges(
            self.x.max(other.x),
            self.y.max(other.y),
            self.right().min(other.right()),
            self.bottom().min(other.bottom()),
        )
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// True when the two rectangles share interior area (touching edges do not count).
    pub fn intersects(&self, other: &Rect) -> bool {
        self.intersection_area(other) > 0.0
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    /// Clips the rectangle to the page. `None` if nothing remains on the page.
    pub fn clamp_to_page(&self) -> Option<Rect> {
        self.intersection(&PAGE)
    }

    /// Moves the rectangle (without resizing, where possible) so it lies inside `bounds`.
    pub fn shifted_inside(&self, bounds: &Rect) -> Rect {
        let w = self.w.min(bounds.w);
        let h = self.h.min(bounds.h);
        let x = self.x.clamp(bounds.x, bounds.right() - w);
        let y = self.y.clamp(bounds.y, bounds.bottom() - h);
        Rect { x, y, w, h }
    }

    /// Length of the vertical overlap of the two y-extents.
    pub fn vertical_overlap(&self, other: &Rect) -> f64 {
        (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0)
    }
}

/// Intersection over union of two rectangles; 0 when they are disjoint.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Sorted, de-duplicated edge coordinates of `rects` along one axis, clipped to `[0, 1]`.
fn compressed_edges(rects: &[Rect], horizontal: bool) -> Vec<f64> {
    let mut edges: Vec<f64> = rects
        .iter()
        .flat_map(|r| {
            if horizontal {
                [r.x, r.right()]
            } else {
                [r.y, r.bottom()]
            }
        })
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    edges
}

/// Area of the points of the page covered by at least `min_count` of `rects`.
fn covered_area(rects: &[Rect], min_count: usize) -> f64 {
    if rects.is_empty() {
        return 0.0;
    }
    let xs = compressed_edges(rects, true);
    let ys = compressed_edges(rects, false);
    let mut total = 0.0;
    for xw in xs.windows(2) {
        let (x0, x1) = (xw[0], xw[1]);
        let mx = 0.5 * (x0 + x1);
        // Rectangles spanning this column; each cell of the column is then a
        // one-dimensional coverage question.
        let column: Vec<&Rect> = rects
            .iter()
            .filter(|r| r.x <= mx && mx < r.right())
            .collect();
        if column.len() < min_count {
            continue;
        }
        let mut col_height = 0.0;
        for yw in ys.windows(2) {
            let (y0, y1) = (yw[0], yw[1]);
            let my = 0.5 * (y0 + y1);
            let count = column
                .iter()
                .filter(|r| r.y <= my && my < r.bottom())
                .count();
            if count >= min_count {
                col_height += y1 - y0;
            }
        }
        total += (x1 - x0) * col_height;
    }
    total.clamp(0.0, 1.0)
}

/// Exact area of the union of `rects` within the page.
pub fn union_area(rects: &[Rect]) -> f64 {
    covered_area(rects, 1)
}

/// Exact area of the points lying in at least `min_count` rectangles.
///
/// # Panics
///
/// Panics if `min_count < 2`; use [`union_area`] for single coverage.
pub fn multi_cover_area(rects: &[Rect], min_count: usize) -> f64 {
    assert!(min_count >= 2, "multi_cover_area requires min_count >= 2");
    covered_area(rects, min_count)
}

/// One selected (target, generated) pair of a greedy matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub target: usize,
    pub generated: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// Pairs in selection order, i.e. by descending IoU.
    pub pairs: Vec<MatchPair>,
    pub unmatched_targets: Vec<usize>,
    pub unmatched_generated: Vec<usize>,
    target_count: usize,
}

impl MatchResult {
    /// Mean matched IoU over target panels; unmatched targets count as zero.
    ///
    /// A page without target panels scores 1 when nothing was generated either,
    /// and 0 otherwise.
    pub fn page_score(&self) -> f64 {
        if self.target_count == 0 {
            return if self.unmatched_generated.is_empty() {
                1.0
            } else {
                0.0
            };
        }
        self.pairs.iter().map(|p| p.iou).sum::<f64>() / self.target_count as f64
    }
}

/// Greedy one-to-one matching in descending IoU order.
///
/// Pairs with zero IoU are never selected. Equal IoUs are resolved by the lower
/// target index, then the lower generated index.
pub fn greedy_match(targets: &[Rect], generated: &[Rect]) -> MatchResult {
    let mut candidates: Vec<MatchPair> = Vec::new();
    for (t, tr) in targets.iter().enumerate() {
        for (g, gr) in generated.iter().enumerate() {
            let v = iou(tr, gr);
            if v > 0.0 {
                candidates.push(MatchPair {
                    target: t,
                    generated: g,
                    iou: v,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.target.cmp(&b.target))
            .then(a.generated.cmp(&b.generated))
    });

    let mut target_used = vec![false; targets.len()];
    let mut generated_used = vec![false; generated.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !target_used[c.target] && !generated_used[c.generated] {
            target_used[c.target] = true;
            generated_used[c.generated] = true;
            pairs.push(c);
        }
    }
    MatchResult {
        pairs,
        unmatched_targets: (0..targets.len()).filter(|&t| !target_used[t]).collect(),
        unmatched_generated: (0..generated.len())
            .filter(|&g| !generated_used[g])
            .collect(),
        target_count: targets.len(),
    }
}

/// True when two rectangles belong to the same horizontal reading band: their
/// y-extents overlap by at least half of the smaller height.
pub fn same_band(a: &Rect, b: &Rect) -> bool {
    let overlap = a.vertical_overlap(b);
    overlap > 0.0 && overlap >= 0.5 * a.h.min(b.h)
}

/// Groups panels into reading bands, in reading order.
///
/// Bands are the connected components of the [`same_band`] relation, ordered
/// by their top edge. Members of a band are ordered right to left by their
/// right edge, then by top edge, then by input index.
pub fn reading_bands(rects: &[Rect]) -> Vec<Vec<usize>> {
    let n = rects.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if same_band(&rects[i], &rects[j]) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut bands: Vec<Vec<usize>> = Vec::new();
    let mut band_index = vec![usize::MAX; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if band_index[root] == usize::MAX {
            band_index[root] = bands.len();
            bands.push(Vec::new());
        }
        bands[band_index[root]].push(i);
    }
    for band in &mut bands {
        band.sort_by(|&a, &b| {
            rects[b]
                .right()
                .total_cmp(&rects[a].right())
                .then(rects[a].y.total_cmp(&rects[b].y))
                .then(a.cmp(&b))
        });
    }
    let top = |band: &Vec<usize>| {
        band.iter()
            .map(|&i| rects[i].y)
            .fold(f64::INFINITY, f64::min)
    };
    // Bands are created in order of their lowest member index, so a stable
    // sort on the top edge keeps ties deterministic.
    bands.sort_by(|a, b| top(a).total_cmp(&top(b)));
    bands
}

/// Manga reading order: bands top to bottom, right to left within a band.
pub fn reading_order(rects: &[Rect]) -> Vec<usize> {
    reading_bands(rects).into_iter().flatten().collect()
}
