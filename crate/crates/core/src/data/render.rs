//! Box overlays with score captions.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::geometry::{Label, LabeledBox};

pub const PANEL_COLOR: Rgb<u8> = Rgb([220, 30, 30]);
pub const CHARACTER_COLOR: Rgb<u8> = Rgb([30, 100, 230]);
const THICKNESS: u32 = 2;
const GLYPH_SCALE: u32 = 2;

pub fn label_color(label: Label) -> Rgb<u8> {
    match label {
        Label::Panel => PANEL_COLOR,
        Label::Character => CHARACTER_COLOR,
    }
}

/// 3x5 glyphs, one row per byte, bit 2 is the leftmost column.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        'P' => [7, 5, 7, 4, 4],
        'C' => [7, 4, 4, 4, 7],
        ' ' => [0; 5],
        _ => return None,
    })
}

fn caption_size(text: &str) -> (u32, u32) {
    let n = text.chars().count() as u32;
    ((4 * n + 1) * GLYPH_SCALE, 7 * GLYPH_SCALE)
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

fn draw_caption(img: &mut RgbImage, x: u32, y: u32, text: &str, bg: Rgb<u8>) {
    let (w, h) = caption_size(text);
    fill_rect(img, x, y, x + w, y + h, bg);
    let s = GLYPH_SCALE;
    for (i, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let gx = x + (1 + 4 * i as u32) * s;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    let px = gx + col * s;
                    let py = y + (1 + r as u32) * s;
                    fill_rect(img, px, py, px + s, py + s, Rgb([255, 255, 255]));
                }
            }
        }
    }
}

/// Draws each box as a two-pixel outline just inside its edges. The caption
/// (class initial and score) goes above the box, or below it when there is no
/// room above; it is omitted when neither fits.
pub fn render_boxes(img: &RgbImage, boxes: &[LabeledBox]) -> RgbImage {
    let mut out = img.clone();
    let (iw, ih) = (img.width(), img.height());
    for b in boxes {
        let (x0, y0, x1, y1) = b.bbox.corners();
        let clamp = |v: f64, max: u32| v.round().clamp(0.0, f64::from(max)) as u32;
        let (x0, y0, x1, y1) = (clamp(x0, iw), clamp(y0, ih), clamp(x1, iw), clamp(y1, ih));
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        let color = label_color(b.label);
        let t = THICKNESS;
        fill_rect(&mut out, x0, y0, x1, (y0 + t).min(y1), color);
        fill_rect(&mut out, x0, y1.saturating_sub(t).max(y0), x1, y1, color);
        fill_rect(&mut out, x0, y0, (x0 + t).min(x1), y1, color);
        fill_rect(&mut out, x1.saturating_sub(t).max(x0), y0, x1, y1, color);

        let initial = if b.label == Label::Panel { 'P' } else { 'C' };
        let text = match b.score {
            Some(s) => format!("{initial} {s:.2}"),
            None => initial.to_string(),
        };
        let (cw, ch) = caption_size(&text);
        if x0 + cw > iw {
            continue;
        }
        if y0 >= ch {
            draw_caption(&mut out, x0, y0 - ch, &text, color);
        } else if y1 + ch <= ih {
            draw_caption(&mut out, x0, y1, &text, color);
        }
    }
    out
}

pub fn render_detections(img: &RgbImage, boxes: &[LabeledBox], out_path: &Path) -> Result<()> {
    render_boxes(img, boxes).save(out_path)?;
    Ok(())
}
