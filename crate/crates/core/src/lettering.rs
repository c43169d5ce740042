//! Speech bubbles, narration boxes, thought and shout bubbles.
//!
//! Lettering runs in three steps: [`detect_anchors`] asks a multimodal model
//! where faces and subjects are, [`place_bubbles`] picks a position for each
//! line of dialogue by greedy candidate scoring, and [`raster_text`] draws the
//! result onto the composed page.
//!
//! Rasterization uses only IEEE basic arithmetic and `sqrt`, never
//! platform math library calls, so lettered pages are byte-identical
//! everywhere.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::compose::{PageArtifact, PixelRect};
use crate::digest::sha256_hex;
use crate::gateway::{GatewayRequest, ImageRef, Message, ModelGateway};
use crate::geometry::{same_band, Rect, PAGE};
use crate::glyph;
use crate::story::{BubbleKind, DialogueLine, PageSpec, ProjectConfig};

pub const WRAP_CHARS: usize = 16;
pub const PADDING_EM: f64 = 0.6;
pub const LINE_SPACING: f64 = 1.25;
/// Bounding box growth of a starburst over the text block it holds.
pub const SHOUT_SCALE: f64 = 1.6;

#[derive(Debug, Error)]
pub enum LetterError {
    #[error("page image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorKind {
    Face,
    Subject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorBox {
    pub panel_id: String,
    pub kind: AnchorKind,
    pub region: Rect,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextElement {
    pub kind: BubbleKind,
    pub text: String,
    #[serde(default)]
    pub speaker: Option<String>,
    pub bubble: Rect,
    #[serde(default)]
    pub tail_to: Option<[f64; 2]>,
    pub panel_id: String,
    pub order_index: usize,
    pub font_px: u32,
    /// Text did not fit the panel even at the minimum font size.
    #[serde(default)]
    pub overflow: bool,
    /// The bubble breaks right-to-left order against an earlier bubble in
    /// its panel.
    #[serde(default)]
    pub order_violation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorDetection {
    pub anchors: Vec<AnchorBox>,
    /// The detector was unavailable and every panel got a centre anchor.
    pub degraded: bool,
    pub warnings: Vec<String>,
}

fn shape_scale(kind: BubbleKind) -> f64 {
    match kind {
        BubbleKind::Speech | BubbleKind::Thought => std::f64::consts::SQRT_2,
        BubbleKind::Narration => 1.0,
        BubbleKind::Shout => SHOUT_SCALE,
    }
}

/// Bubble size in pixels for wrapped `lines` at `font_px`.
pub fn bubble_px(lines: &[String], kind: BubbleKind, font_px: u32) -> (f64, f64) {
    let f = font_px as f64;
    let cols = lines.iter().map(|l| l.chars().count()).max().unwrap_or(0).max(1);
    let n = lines.len().max(1);
    let pad = PADDING_EM * f;
    let tw = cols as f64 * f + 2.0 * pad;
    let th = f * (1.0 + (n - 1) as f64 * LINE_SPACING) + 2.0 * pad;
    let s = shape_scale(kind);
    (tw * s, th * s)
}

/// Characters per line that fit `width_px` once padding and shape are
/// accounted for.
fn columns_for(width_px: f64, kind: BubbleKind, font_px: u32) -> usize {
    let f = font_px as f64;
    let inner = width_px / shape_scale(kind) - 2.0 * PADDING_EM * f;
    ((inner / f + 1e-6).floor() as usize).max(1)
}

pub fn wrap_for(text: &str, width_px: f64, kind: BubbleKind, font_px: u32) -> Vec<String> {
    glyph::wrap(text, columns_for(width_px, kind, font_px))
}

struct Sized {
    font_px: u32,
    w: f64,
    h: f64,
    overflow: bool,
}

/// Largest font from `font_px` down to `min_font_px` whose bubble fits the
/// panel; otherwise the minimum font with overflow.
fn size_text(text: &str, kind: BubbleKind, panel_px: (f64, f64), config: &ProjectConfig) -> Sized {
    let min = config.min_font_px.min(config.font_px).max(1);
    let measure = |f: u32| {
        let cols = columns_for(panel_px.0, kind, f).min(WRAP_CHARS);
        bubble_px(&glyph::wrap(text, cols), kind, f)
    };
    for f in (min..=config.font_px).rev() {
        let (w, h) = measure(f);
        if w <= panel_px.0 && h <= panel_px.1 {
            return Sized { font_px: f, w, h, overflow: false };
        }
    }
    let (w, h) = measure(min);
    Sized { font_px: min, w, h, overflow: true }
}

/// Right-to-left reading comparator: within a band the later bubble sits at
/// or left of the earlier one, across bands it sits lower.
pub fn rtl_order_ok(earlier: &Rect, later: &Rect) -> bool {
    let (ex, ey) = earlier.center();
    let (lx, ly) = later.center();
    if same_band(earlier, later) {
        lx <= ex
    } else {
        ly > ey
    }
}

/// Candidate bubble rectangles: a 3x3 grid of alignments inside the panel in
/// reading order, then the four edge midpoints (top, right, bottom, left).
/// Every candidate is shifted inside the page.
pub fn candidates(panel: &Rect, w: f64, h: f64) -> Vec<Rect> {
    let w = w.min(1.0);
    let h = h.min(1.0);
    let xs = [panel.right() - w, panel.x + (panel.w - w) / 2.0, panel.x];
    let ys = [panel.y, panel.y + (panel.h - h) / 2.0, panel.bottom() - h];
    let (cx, cy) = panel.center();
    let mut out: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    out.extend([
        (cx - w / 2.0, panel.y - h / 2.0),
        (panel.right() - w / 2.0, cy - h / 2.0),
        (cx - w / 2.0, panel.bottom() - h / 2.0),
        (panel.x - w / 2.0, cy - h / 2.0),
    ]);
    out.into_iter()
        .map(|(x, y)| {
            Rect { x, y, w, h }.shifted_inside(&PAGE)
        })
        .collect()
}

fn speaker_anchor<'a>(anchors: &[&'a AnchorBox], speaker: Option<&str>) -> Option<&'a AnchorBox> {
    let speaker = speaker?;
    let matching = |a: &&&AnchorBox| {
        a.label
            .as_deref()
            .is_some_and(|l| l.eq_ignore_ascii_case(speaker))
    };
    anchors
        .iter()
        .filter(matching)
        .find(|a| a.kind == AnchorKind::Face)
        .or_else(|| anchors.iter().find(matching))
        .copied()
}

/// Places one bubble per dialogue line inside the panel at `placement`
/// (page-normalized). Lines are placed greedily in order; `order_index`
/// counts from 0 within the panel.
pub fn place_bubbles(
    panel_id: &str,
    placement: &Rect,
    dialogue: &[DialogueLine],
    anchors: &[AnchorBox],
    config: &ProjectConfig,
) -> Vec<TextElement> {
    let wts = &config.placement_weights;
    let (pw, ph) = (config.page_px[0] as f64, config.page_px[1] as f64);
    let panel_px = (placement.w * pw, placement.h * ph);
    let own: Vec<&AnchorBox> = anchors.iter().filter(|a| a.panel_id == panel_id).collect();
    let faces: Vec<&Rect> = own
        .iter()
        .filter(|a| a.kind == AnchorKind::Face)
        .map(|a| &a.region)
        .collect();
    let mut placed: Vec<TextElement> = vec![];
    for (k, line) in dialogue.iter().enumerate() {
        let sized = size_text(&line.text, line.kind, panel_px, config);
        let cands = candidates(placement, sized.w / pw, sized.h / ph);
        let hits_face = |c: &Rect| faces.iter().any(|f| c.intersection_area(f) > 0.0);
        let face_free = cands.iter().any(|c| !hits_face(c));
        let target = speaker_anchor(&own, line.speaker.as_deref());
        let score = |c: &Rect| -> f64 {
            if face_free && hits_face(c) {
                return f64::INFINITY;
            }
            let mut s = 0.0;
            for a in &own {
                if a.kind == AnchorKind::Subject || !face_free {
                    s += wts.subject * c.intersection_area(&a.region);
                }
            }
            if let Some(t) = target {
                let ((ax, ay), (bx, by)) = (c.center(), t.region.center());
                s += wts.distance * ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
            }
            let violations = placed.iter().filter(|e| !rtl_order_ok(&e.bubble, c)).count();
            s += wts.reading_order * violations as f64;
            s += wts.overflow * (c.area() - c.intersection_area(placement));
            for e in &placed {
                s += wts.bubble * c.intersection_area(&e.bubble);
            }
            s
        };
        let mut best = 0;
        let mut best_score = f64::INFINITY;
        for (i, c) in cands.iter().enumerate() {
            let s = score(c);
            if s < best_score {
                best = i;
                best_score = s;
            }
        }
        let bubble = cands[best];
        let order_violation = placed.iter().any(|e| !rtl_order_ok(&e.bubble, &bubble));
        let tail_to = match line.kind {
            BubbleKind::Speech | BubbleKind::Shout => target.map(|t| {
                let (x, y) = t.region.center();
                [x, y]
            }),
            _ => None,
        };
        placed.push(TextElement {
            kind: line.kind,
            text: line.text.clone(),
            speaker: line.speaker.clone(),
            bubble,
            tail_to,
            panel_id: panel_id.to_string(),
            order_index: k,
            font_px: sized.font_px,
            overflow: sized.overflow,
            order_violation,
        });
    }
    placed
}

const DETECT_SYSTEM: &str = "You locate faces and main subjects on manga pages. \
Reply with JSON only.";

fn detect_prompt(page: &PageArtifact, plan_page: &PageSpec) -> String {
    let mut s = String::from(
        "For each panel of the attached page, give bounding boxes of character faces \
and of the main subject. Coordinates are fractions of the page, origin top-left, \
as [x, y, w, h]. Label a face with the speaker's name when it is one of the listed \
speakers, otherwise null.\nPanels:\n",
    );
    for pl in &page.placements {
        let r = pl.rect.normalized(page.page_px);
        let speakers = speakers_of(plan_page, &pl.panel_id);
        s.push_str(&format!(
            "- {}: [{:.4}, {:.4}, {:.4}, {:.4}] speakers: {}\n",
            pl.panel_id,
            r.x,
            r.y,
            r.w,
            r.h,
            if speakers.is_empty() { "none".into() } else { speakers.join(", ") }
        ));
    }
    s.push_str(
        "Reply as {\"anchors\": [{\"panel_id\": \"...\", \"kind\": \"face\" or \"subject\", \
\"box\": [x, y, w, h], \"label\": name or null}]}",
    );
    s
}

fn speakers_of(plan_page: &PageSpec, panel_id: &str) -> Vec<String> {
    let mut out: Vec<String> = vec![];
    if let Some(p) = plan_page.panels.iter().find(|p| p.panel_id == panel_id) {
        for d in &p.dialogue {
            if let Some(s) = &d.speaker {
                if !out.contains(s) {
                    out.push(s.clone());
                }
            }
        }
    }
    out
}

/// A subject anchor covering the middle ninth of the panel.
pub fn center_anchor(panel_id: &str, placement: &Rect) -> AnchorBox {
    AnchorBox {
        panel_id: panel_id.to_string(),
        kind: AnchorKind::Subject,
        region: Rect {
            x: placement.x + placement.w / 3.0,
            y: placement.y + placement.h / 3.0,
            w: placement.w / 3.0,
            h: placement.h / 3.0,
        },
        label: None,
    }
}

fn parse_anchor(v: &Value, page: &PageArtifact, plan_page: &PageSpec) -> Option<AnchorBox> {
    let panel_id = v.get("panel_id")?.as_str()?;
    let placement = page.placements.iter().find(|p| p.panel_id == panel_id)?;
    let b = v.get("box")?.as_array()?;
    if b.len() != 4 {
        return None;
    }
    let n: Vec<f64> = b.iter().map(|x| x.as_f64()).collect::<Option<_>>()?;
    let raw = Rect::new(n[0], n[1], n[2], n[3]).ok()?;
    let region = raw.intersection(&placement.rect.normalized(page.page_px))?;
    let label = v
        .get("label")
        .and_then(|l| l.as_str())
        .and_then(|l| {
            speakers_of(plan_page, panel_id)
                .into_iter()
                .find(|s| s.eq_ignore_ascii_case(l.trim()))
        });
    let face = v.get("kind").and_then(|k| k.as_str()) == Some("face");
    // An unlabelled face cannot be tied to a speaker and is treated as a subject.
    let kind = if face && label.is_some() { AnchorKind::Face } else { AnchorKind::Subject };
    Some(AnchorBox {
        panel_id: panel_id.to_string(),
        kind,
        region,
        label,
    })
}

/// One multimodal call for the whole page. Boxes are clipped to their panel,
/// malformed boxes dropped, and panels left without any box get a centre
/// anchor. Any gateway or parse failure degrades to centre anchors
/// everywhere.
pub fn detect_anchors(page: &PageArtifact, plan_page: &PageSpec, gateway: &ModelGateway) -> AnchorDetection {
    let centres = |warning: String| AnchorDetection {
        anchors: page
            .placements
            .iter()
            .map(|p| center_anchor(&p.panel_id, &p.rect.normalized(page.page_px)))
            .collect(),
        degraded: true,
        warnings: vec![warning],
    };
    let image = match ImageRef::from_file(&page.image_path) {
        Ok(i) => i,
        Err(e) => return centres(format!("anchor detection skipped: {e}")),
    };
    let request = GatewayRequest::multimodal(
        gateway.models().multimodal.clone(),
        vec![Message::system(DETECT_SYSTEM), Message::user(detect_prompt(page, plan_page))],
        vec![image],
    );
    let text = match gateway.call(&request).and_then(|r| r.into_text()) {
        Ok(t) => t,
        Err(e) => return centres(format!("anchor detection failed: {e}")),
    };
    let reply: Value = match crate::reply::parse_reply(&text) {
        Ok(v) => v,
        Err(e) => return centres(format!("anchor reply unparseable: {e}")),
    };
    let Some(items) = reply.get("anchors").and_then(|a| a.as_array()) else {
        return centres("anchor reply has no anchors list".into());
    };
    let mut anchors = vec![];
    let mut warnings = vec![];
    for item in items {
        match parse_anchor(item, page, plan_page) {
            Some(a) => anchors.push(a),
            None => warnings.push(format!("dropped anchor {item}")),
        }
    }
    let mut out = vec![];
    for pl in &page.placements {
        let before = out.len();
        out.extend(anchors.iter().filter(|a| a.panel_id == pl.panel_id).cloned());
        if out.len() == before {
            out.push(center_anchor(&pl.panel_id, &pl.rect.normalized(page.page_px)));
        }
    }
    AnchorDetection {
        anchors: out,
        degraded: false,
        warnings,
    }
}

/// Places bubbles for every panel of a composed page in reading order and
/// numbers them page-wide.
pub fn plan_lettering(
    page: &PageArtifact,
    plan_page: &PageSpec,
    anchors: &[AnchorBox],
    config: &ProjectConfig,
) -> Vec<TextElement> {
    let mut out = vec![];
    for pl in &page.placements {
        let Some(spec) = plan_page.panels.iter().find(|p| p.panel_id == pl.panel_id) else {
            continue;
        };
        let placement = pl.rect.normalized(page.page_px);
        out.extend(place_bubbles(&pl.panel_id, &placement, &spec.dialogue, anchors, config));
    }
    for (k, e) in out.iter_mut().enumerate() {
        e.order_index = k;
    }
    out
}

/// Pixel rectangle of a normalized bubble.
pub fn to_px(r: &Rect, page_px: [u32; 2]) -> PixelRect {
    let (pw, ph) = (page_px[0] as f64, page_px[1] as f64);
    let x0 = (r.x * pw).round().clamp(0.0, pw - 1.0) as u32;
    let y0 = (r.y * ph).round().clamp(0.0, ph - 1.0) as u32;
    let x1 = ((r.right() * pw).round() as u32).clamp(x0 + 1, page_px[0]);
    let y1 = ((r.bottom() * ph).round() as u32).clamp(y0 + 1, page_px[1]);
    PixelRect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LetterRecord {
    #[serde(flatten)]
    pub element: TextElement,
    pub bubble_px: PixelRect,
    pub tail_px: Option<[i64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LetterFile {
    pub page_index: usize,
    pub page_px: [u32; 2],
    pub elements: Vec<LetterRecord>,
}

impl LetterFile {
    pub fn new(page_index: usize, page_px: [u32; 2], elements: &[TextElement]) -> Self {
        let elements = elements
            .iter()
            .map(|e| LetterRecord {
                element: e.clone(),
                bubble_px: to_px(&e.bubble, page_px),
                tail_px: e.tail_to.map(|[x, y]| {
                    [
                        (x * page_px[0] as f64).round() as i64,
                        (y * page_px[1] as f64).round() as i64,
                    ]
                }),
            })
            .collect();
        Self { page_index, page_px, elements }
    }
}

/// `page_001.png` becomes `page_001.letter.json`.
pub fn letter_path(image_path: &Path) -> PathBuf {
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("page");
    image_path.with_file_name(format!("{stem}.letter.json"))
}

const INK: Rgb<u8> = Rgb([0, 0, 0]);
const FILL: Rgb<u8> = Rgb([255, 255, 255]);

/// Unit directions at 18 degree steps, written out so the starburst does not
/// depend on the platform's trigonometry.
const STAR_DIRS: [(f64, f64); 20] = [
    (1.0, 0.0),
    (0.951056516295153_6, 0.309016994374947_4),
    (0.809016994374947_5, 0.587785252292473_1),
    (0.587785252292473_1, 0.809016994374947_5),
    (0.309016994374947_4, 0.951056516295153_6),
    (0.0, 1.0),
    (-0.309016994374947_4, 0.951056516295153_6),
    (-0.587785252292473_1, 0.809016994374947_5),
    (-0.809016994374947_5, 0.587785252292473_1),
    (-0.951056516295153_6, 0.309016994374947_4),
    (-1.0, 0.0),
    (-0.951056516295153_6, -0.309016994374947_4),
    (-0.809016994374947_5, -0.587785252292473_1),
    (-0.587785252292473_1, -0.809016994374947_5),
    (-0.309016994374947_4, -0.951056516295153_6),
    (0.0, -1.0),
    (0.309016994374947_4, -0.951056516295153_6),
    (0.587785252292473_1, -0.809016994374947_5),
    (0.809016994374947_5, -0.587785252292473_1),
    (0.951056516295153_6, -0.309016994374947_4),
];
const STAR_INNER: f64 = 0.78;

fn in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn star(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
    STAR_DIRS
        .iter()
        .enumerate()
        .map(|(k, &(dx, dy))| {
            let r = if k % 2 == 0 { 1.0 } else { STAR_INNER };
            (cx + rx * r * dx, cy + ry * r * dy)
        })
        .collect()
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_shape(img: &mut RgbImage, kind: BubbleKind, r: &PixelRect, stroke: f64) {
    let (x0, y0) = (r.x as f64, r.y as f64);
    let (rx, ry) = (r.w as f64 / 2.0, r.h as f64 / 2.0);
    let (cx, cy) = (x0 + rx, y0 + ry);
    let (irx, iry) = ((rx - stroke).max(0.5), (ry - stroke).max(0.5));
    let outer = star(cx, cy, rx, ry);
    let inner = star(cx, cy, irx, iry);
    for py in r.y..r.bottom() {
        for px in r.x..r.right() {
            let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
            let color = match kind {
                BubbleKind::Narration => {
                    let edge = fx - x0 < stroke
                        || x0 + r.w as f64 - fx < stroke
                        || fy - y0 < stroke
                        || y0 + r.h as f64 - fy < stroke;
                    Some(if edge { INK } else { FILL })
                }
                BubbleKind::Speech | BubbleKind::Thought => {
                    let (dx, dy) = (fx - cx, fy - cy);
                    if (dx / rx).powi(2) + (dy / ry).powi(2) > 1.0 {
                        None
                    } else if (dx / irx).powi(2) + (dy / iry).powi(2) <= 1.0 {
                        Some(FILL)
                    } else if kind == BubbleKind::Thought {
                        // Dashed outline: alternate ink and fill along the rim.
                        let band = ((fx - x0 + fy - y0) / (3.0 * stroke)).floor() as i64;
                        Some(if band % 2 == 0 { INK } else { FILL })
                    } else {
                        Some(INK)
                    }
                }
                BubbleKind::Shout => {
                    if !in_polygon(fx, fy, &outer) {
                        None
                    } else if in_polygon(fx, fy, &inner) {
                        Some(FILL)
                    } else {
                        Some(INK)
                    }
                }
            };
            if let Some(c) = color {
                img.put_pixel(px, py, c);
            }
        }
    }
}

/// Filled triangle from the bubble centre toward `target`, ending partway
/// between the bubble rim and the target.
fn draw_tail(img: &mut RgbImage, r: &PixelRect, target: (f64, f64), font_px: u32) {
    let (rx, ry) = (r.w as f64 / 2.0, r.h as f64 / 2.0);
    let (cx, cy) = (r.x as f64 + rx, r.y as f64 + ry);
    let (dx, dy) = (target.0 - cx, target.1 - cy);
    let len = (dx * dx + dy * dy).sqrt();
    if len < 1.0 {
        return;
    }
    let (ux, uy) = (dx / len, dy / len);
    let rim = 1.0 / ((ux / rx).powi(2) + (uy / ry).powi(2)).sqrt();
    if len <= rim + 2.0 {
        return;
    }
    let reach = rim + (0.5 * (len - rim)).min(1.5 * font_px as f64);
    let tip = (cx + ux * reach, cy + uy * reach);
    let half = 0.35 * font_px as f64;
    let a = (cx - uy * half, cy + ux * half);
    let b = (cx + uy * half, cy - ux * half);
    let tri = [a, b, tip];
    let xs = tri.iter().map(|p| p.0);
    let ys = tri.iter().map(|p| p.1);
    let (minx, maxx) = (xs.clone().fold(f64::MAX, f64::min), xs.fold(f64::MIN, f64::max));
    let (miny, maxy) = (ys.clone().fold(f64::MAX, f64::min), ys.fold(f64::MIN, f64::max));
    for py in miny.floor() as i64..=maxy.ceil() as i64 {
        for px in minx.floor() as i64..=maxx.ceil() as i64 {
            if in_polygon(px as f64 + 0.5, py as f64 + 0.5, &tri) {
                put(img, px, py, INK);
            }
        }
    }
}

fn draw_text(img: &mut RgbImage, e: &TextElement, r: &PixelRect) {
    let f = e.font_px.max(1);
    let lines = wrap_for(&e.text, r.w as f64, e.kind, f);
    let n = lines.len().max(1) as f64;
    let th = f as f64 * (1.0 + (n - 1.0) * LINE_SPACING);
    let cx = r.x as f64 + r.w as f64 / 2.0;
    let top = r.y as f64 + r.h as f64 / 2.0 - th / 2.0;
    for (i, line) in lines.iter().enumerate() {
        let lw = glyph::text_width(line, 1) as f64 / glyph::CELL as f64 * f as f64;
        let x = (cx - lw / 2.0).round() as i64;
        let y = (top + i as f64 * f as f64 * LINE_SPACING).round() as i64;
        glyph::draw_line_px(img, x, y, line, f, INK);
    }
}

/// Draws all elements onto the page in `order_index` order.
pub fn draw_elements(img: &mut RgbImage, elements: &[TextElement]) {
    let page_px = [img.width(), img.height()];
    let mut sorted: Vec<&TextElement> = elements.iter().collect();
    sorted.sort_by_key(|e| e.order_index);
    for e in sorted {
        let r = to_px(&e.bubble, page_px);
        let stroke = (e.font_px / 8).max(2) as f64;
        if let Some([tx, ty]) = e.tail_to {
            let t = (tx * page_px[0] as f64, ty * page_px[1] as f64);
            draw_tail(img, &r, t, e.font_px);
        }
        draw_shape(img, e.kind, &r, stroke);
        draw_text(img, e, &r);
    }
}

fn letter_flags(elements: &[TextElement]) -> Vec<String> {
    let mut out = vec![];
    for e in elements {
        if e.overflow {
            out.push(format!("overflow:{}:{}", e.panel_id, e.order_index));
        }
        if e.order_violation {
            out.push(format!("reading_order:{}:{}", e.panel_id, e.order_index));
        }
    }
    out
}

/// Draws `elements` onto the unlettered page and writes the result to
/// `out_path`, with the placed geometry in a sibling `.letter.json`.
/// With no elements the page bytes are copied unchanged.
pub fn raster_text(
    page: &PageArtifact,
    elements: &[TextElement],
    out_path: &Path,
) -> Result<PageArtifact, LetterError> {
    let bytes = std::fs::read(&page.image_path)?;
    let bytes = if elements.is_empty() {
        bytes
    } else {
        let mut img = crate::raster::decode(&bytes)
            .map_err(|e| LetterError::Image {
                path: page.image_path.clone(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        draw_elements(&mut img, elements);
        crate::raster::encode_png(&img)
    };
    crate::fsutil::write_atomic(out_path, &bytes)?;
    let record = LetterFile::new(page.page_index, page.page_px, elements);
    crate::fsutil::write_json(&letter_path(out_path), &record)?;
    let mut flags: Vec<String> = page
        .flags
        .iter()
        .filter(|f| !f.starts_with("overflow:") && !f.starts_with("reading_order:"))
        .cloned()
        .collect();
    flags.extend(letter_flags(elements));
    Ok(PageArtifact {
        image_path: out_path.to_path_buf(),
        lettered: true,
        image_sha256: sha256_hex(&bytes),
        elements: elements.to_vec(),
        flags,
        ..page.clone()
    })
}
