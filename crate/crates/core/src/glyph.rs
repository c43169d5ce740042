//! Text drawing with the embedded 8x8 bitmap font.
//!
//! The font is compiled into the binary, so there is no font file to miss and
//! rendering is identical everywhere. Glyphs are scaled by whole multiples
//! with nearest-neighbour sampling.

use font8x8::UnicodeFonts;
use image::{Rgb, RgbImage};

pub const CELL: u32 = 8;

fn bitmap(c: char) -> [u8; 8] {
    font8x8::BASIC_FONTS
        .get(c)
        .or_else(|| font8x8::LATIN_FONTS.get(c))
        .or_else(|| font8x8::BASIC_FONTS.get('?'))
        .unwrap_or([0; 8])
}

/// Width in pixels of `text` at `scale`.
pub fn text_width(text: &str, scale: u32) -> u32 {
    text.chars().count() as u32 * CELL * scale
}

/// Draws one line with its top-left corner at `(x, y)`; pixels outside the
/// image are skipped.
pub fn draw_line(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let s = scale.max(1) as i64;
    for (k, c) in text.chars().enumerate() {
        let rows = bitmap(c);
        let ox = x + k as i64 * CELL as i64 * s;
        for (row, bits) in rows.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 0 {
                    continue;
                }
                for dy in 0..s {
                    for dx in 0..s {
                        let px = ox + col as i64 * s + dx;
                        let py = y + row as i64 * s + dy;
                        if px >= 0 && py >= 0 && px < w && py < h {
                            img.put_pixel(px as u32, py as u32, color);
                        }
                    }
                }
            }
        }
    }
}

/// Draws one line with glyphs sampled to `font_px` square cells, so sizes need
/// not be multiples of the native cell.
pub fn draw_line_px(img: &mut RgbImage, x: i64, y: i64, text: &str, font_px: u32, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let f = font_px.max(1) as i64;
    for (k, c) in text.chars().enumerate() {
        let rows = bitmap(c);
        let ox = x + k as i64 * f;
        for v in 0..f {
            let bits = rows[(v * CELL as i64 / f) as usize];
            for u in 0..f {
                if bits >> (u * CELL as i64 / f) & 1 == 0 {
                    continue;
                }
                let (px, py) = (ox + u, y + v);
                if px >= 0 && py >= 0 && px < w && py < h {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
}

/// Greedy word wrap at `max_chars` per line. Words longer than a line are
/// broken.
pub fn wrap(text: &str, max_chars: usize) -> Vec<String> {
    let max = max_chars.max(1);
    let mut lines = vec![];
    let mut cur = String::new();
    for word in text.split_whitespace() {
        let mut word: Vec<char> = word.chars().collect();
        while word.len() > max {
            if !cur.is_empty() {
                lines.push(std::mem::take(&mut cur));
            }
            lines.push(word[..max].iter().collect());
            word.drain(..max);
        }
        if word.is_empty() {
            continue;
        }
        let wlen = word.len();
        let clen = cur.chars().count();
        if clen > 0 && clen + 1 + wlen > max {
            lines.push(std::mem::take(&mut cur));
        }
        if !cur.is_empty() {
            cur.push(' ');
        }
        cur.extend(word);
    }
    if !cur.is_empty() {
        lines.push(cur);
    }
    lines
}
