//! Page composition and comic assembly.

use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::geometry::Rect;
use crate::layout::Layout;
use crate::lettering::TextElement;
use crate::render::PanelAsset;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const ARCHIVE_NAME: &str = "comic.cbz";

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("no asset for panel {0}")]
    MissingAsset(String),
    #[error("pages are not contiguous from 0: {0:?}")]
    NonContiguous(Vec<usize>),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    /// The rectangle in page-normalized units.
    pub fn normalized(&self, page_px: [u32; 2]) -> Rect {
        let (pw, ph) = (page_px[0] as f64, page_px[1] as f64);
        Rect::from_edges(
            self.x as f64 / pw,
            self.y as f64 / ph,
            self.right() as f64 / pw,
            self.bottom() as f64 / ph,
        )
        .expect("placements have positive size")
    }

    pub fn intersects(&self, o: &PixelRect) -> bool {
        self.x < o.right() && o.x < self.right() && self.y < o.bottom() && o.y < self.bottom()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub panel_id: String,
    pub rect: PixelRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageArtifact {
    pub page_index: usize,
    pub image_path: PathBuf,
    pub layout: Layout,
    pub placements: Vec<Placement>,
    pub page_px: [u32; 2],
    pub lettered: bool,
    pub image_sha256: String,
    /// Placed text, kept so bubble positions can be audited without re-detection.
    #[serde(default)]
    pub elements: Vec<TextElement>,
    /// Non-fatal problems, such as stub panels substituted for failed renders.
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Maps each panel to page pixels. Edges on the page boundary stay flush;
/// internal edges are inset by half the gutter (the left/top side of a gutter
/// takes the rounded-down half).
pub fn placements(layout: &Layout, page_px: [u32; 2], gutter_px: u32) -> Vec<Placement> {
    let [pw, ph] = page_px;
    let lead = gutter_px / 2;
    let trail = gutter_px - lead;
    let px = |v: f64, size: u32| ((v * size as f64).round() as i64).clamp(0, size as i64) as u32;
    layout
        .panels
        .iter()
        .map(|p| {
            let r = &p.region;
            let (mut x0, mut x1) = (px(r.x, pw), px(r.right(), pw));
            let (mut y0, mut y1) = (px(r.y, ph), px(r.bottom(), ph));
            if x0 > 0 {
                x0 += lead;
            }
            if x1 < pw {
                x1 = x1.saturating_sub(trail);
            }
            if y0 > 0 {
                y0 += lead;
            }
            if y1 < ph {
                y1 = y1.saturating_sub(trail);
            }
            let x1 = x1.max(x0 + 1).min(pw);
            let y1 = y1.max(y0 + 1).min(ph);
            let x0 = x0.min(x1 - 1);
            let y0 = y0.min(y1 - 1);
            Placement {
                panel_id: p.id.clone(),
                rect: PixelRect {
                    x: x0,
                    y: y0,
                    w: x1 - x0,
                    h: y1 - y0,
                },
            }
        })
        .collect()
}

fn stroke(img: &mut RgbImage, r: &PixelRect, width: u32) {
    let ink = Rgb([0, 0, 0]);
    let bw = width.min(r.w.div_ceil(2)).min(r.h.div_ceil(2));
    for y in r.y..r.bottom() {
        for x in r.x..r.right() {
            let edge = x < r.x + bw || x >= r.right() - bw || y < r.y + bw || y >= r.bottom() - bw;
            if edge {
                img.put_pixel(x, y, ink);
            }
        }
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, ComposeError> {
    let bytes = std::fs::read(path)?;
    crate::raster::decode(&bytes)
        .map(|i| i.to_rgb8())
        .map_err(|e| ComposeError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Composites panel assets onto a white page. Pure in its inputs.
pub fn compose_page_image(
    assets: &[PanelAsset],
    layout: &Layout,
    page_px: [u32; 2],
    gutter_px: u32,
    border_px: u32,
) -> Result<(RgbImage, Vec<Placement>), ComposeError> {
    let mut page = RgbImage::from_pixel(page_px[0], page_px[1], Rgb([255, 255, 255]));
    let places = placements(layout, page_px, gutter_px);
    for pl in &places {
        let asset = assets
            .iter()
            .find(|a| a.panel_id == pl.panel_id)
            .ok_or_else(|| ComposeError::MissingAsset(pl.panel_id.clone()))?;
        let img = load_rgb(&asset.image_path)?;
        let fitted = crate::raster::cover_fit(&image::DynamicImage::ImageRgb8(img), pl.rect.w, pl.rect.h);
        image::imageops::replace(&mut page, &fitted, pl.rect.x as i64, pl.rect.y as i64);
        stroke(&mut page, &pl.rect, border_px);
    }
    Ok((page, places))
}

/// Composes one page and writes it to `out_path` as PNG.
pub fn compose_page(
    assets: &[PanelAsset],
    layout: &Layout,
    config: &crate::story::ProjectConfig,
    out_path: &Path,
) -> Result<PageArtifact, ComposeError> {
    let (img, placements) =
        compose_page_image(assets, layout, config.page_px, config.gutter_px, config.border_px)?;
    let bytes = crate::raster::encode_png(&img);
    crate::fsutil::write_atomic(out_path, &bytes)?;
    Ok(PageArtifact {
        page_index: layout.page_index,
        image_path: out_path.to_path_buf(),
        layout: layout.clone(),
        placements,
        page_px: config.page_px,
        lettered: false,
        image_sha256: sha256_hex(&bytes),
        elements: vec![],
        flags: vec![],
    })
}

pub fn page_file_name(page_index: usize) -> String {
    format!("page_{:03}.png", page_index + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPage {
    pub index: usize,
    pub file: String,
    pub sha256: String,
    pub lettered: bool,
    pub layout: Layout,
    pub placements: Vec<Placement>,
    #[serde(default)]
    pub elements: Vec<TextElement>,
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComicManifest {
    pub schema_version: u32,
    pub config_digest: String,
    pub plan_digest: String,
    pub pages: Vec<ManifestPage>,
}

impl ComicManifest {
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        crate::fsutil::read_json(&dir.join("manifest.json"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComicArtifact {
    pub pages: Vec<PageArtifact>,
    pub manifest: ComicManifest,
    pub archive_path: PathBuf,
}

/// Writes `page_###.png`, `manifest.json` and a CBZ to `out_dir`.
///
/// The archive stores entries uncompressed with a fixed timestamp, pages in
/// reading order followed by the manifest, so equal inputs give equal bytes.
pub fn compose_comic(
    pages: &[PageArtifact],
    config_digest: &str,
    plan_digest: &str,
    out_dir: &Path,
) -> Result<ComicArtifact, ComposeError> {
    let mut pages = pages.to_vec();
    pages.sort_by_key(|p| p.page_index);
    let indices: Vec<usize> = pages.iter().map(|p| p.page_index).collect();
    if indices.iter().enumerate().any(|(i, &p)| i != p) {
        return Err(ComposeError::NonContiguous(indices));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut entries: Vec<(String, Vec<u8>)> = vec![];
    let mut manifest_pages = vec![];
    for page in &mut pages {
        let name = page_file_name(page.page_index);
        let target = out_dir.join(&name);
        let bytes = std::fs::read(&page.image_path)?;
        if page.image_path != target {
            crate::fsutil::write_atomic(&target, &bytes)?;
            page.image_path = target;
        }
        page.image_sha256 = sha256_hex(&bytes);
        manifest_pages.push(ManifestPage {
            index: page.page_index,
            file: name.clone(),
            sha256: page.image_sha256.clone(),
            lettered: page.lettered,
            layout: page.layout.clone(),
            placements: page.placements.clone(),
            elements: page.elements.clone(),
            flags: page.flags.clone(),
        });
        entries.push((name, bytes));
    }
    let manifest = ComicManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_digest: config_digest.to_string(),
        plan_digest: plan_digest.to_string(),
        pages: manifest_pages,
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    crate::fsutil::write_atomic(&out_dir.join("manifest.json"), &manifest_bytes)?;
    entries.push(("manifest.json".into(), manifest_bytes));

    let archive_path = out_dir.join(ARCHIVE_NAME);
    crate::fsutil::write_atomic(&archive_path, &zip_stored(&entries)?)?;
    Ok(ComicArtifact {
        pages,
        manifest,
        archive_path,
    })
}

fn zip_stored(entries: &[(String, Vec<u8>)]) -> Result<Vec<u8>, ComposeError> {
    use zip::write::SimpleFileOptions;
    let err = |e: zip::result::ZipError| ComposeError::Archive(e.to_string());
    let options = SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644);
    let mut w = zip::ZipWriter::new(Cursor::new(Vec::new()));
    for (name, bytes) in entries {
        w.start_file(name.as_str(), options).map_err(err)?;
        w.write_all(bytes)?;
    }
    Ok(w.finish().map_err(err)?.into_inner())
}
