//! PNG encoding and resizing helpers shared by the rendering stages.

use std::io::Cursor;

use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, RgbImage};

/// Encodes as PNG. The encoder is pure Rust with fixed settings, so equal
/// pixels give equal bytes on every platform.
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    out.into_inner()
}

pub fn decode(bytes: &[u8]) -> Result<DynamicImage, image::ImageError> {
    image::load_from_memory(bytes)
}

/// Scales `img` to cover `width x height` with its aspect kept, then crops the
/// centre. Never letterboxes.
pub fn cover_fit(img: &DynamicImage, width: u32, height: u32) -> RgbImage {
    let (iw, ih) = (img.width().max(1), img.height().max(1));
    if (iw, ih) == (width, height) {
        return img.to_rgb8();
    }
    let scale = (width as f64 / iw as f64).max(height as f64 / ih as f64);
    let sw = ((iw as f64 * scale).ceil() as u32).max(width);
    let sh = ((ih as f64 * scale).ceil() as u32).max(height);
    let scaled = img.resize_exact(sw, sh, FilterType::Triangle).to_rgb8();
    let (x, y) = ((sw - width) / 2, (sh - height) / 2);
    image::imageops::crop_imm(&scaled, x, y, width, height).to_image()
}
