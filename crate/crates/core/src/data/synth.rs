//! Synthetic comic pages: bordered panels on a light page, each holding a
//! few dark "character" figures, with exact ground truth.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vgg::{to_vgg_json, VggEntry};
use super::{AnnotatedPage, PageImage};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSpace, Label, LabeledBox};

pub const DEFAULT_PAGE_SIZE: (u32, u32) = (480, 640);
pub const ANNOTATION_FILE: &str = "annotations.json";

const MARGIN: u32 = 14;
const GUTTER: u32 = 12;
const BORDER: u32 = 3;
const MIN_PANEL_SIDE: u32 = 48;

/// Integer pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl Rect {
    fn w(&self) -> u32 {
        self.x1 - self.x0
    }

    fn h(&self) -> u32 {
        self.y1 - self.y0
    }

    fn bbox(&self) -> BBox {
        BBox::from_corners(f64::from(self.x0), f64::from(self.y0), f64::from(self.x1), f64::from(self.y1))
    }

    fn overlaps(&self, o: &Rect, pad: u32) -> bool {
        self.x0 < o.x1 + pad && o.x0 < self.x1 + pad && self.y0 < o.y1 + pad && o.y0 < self.y1 + pad
    }
}

/// Split `0..len` into `parts` segments separated by `gap`, with sizes
/// jittered around equal shares.
fn partition(rng: &mut ChaCha8Rng, start: u32, len: u32, parts: u32, gap: u32) -> Vec<(u32, u32)> {
    let usable = len - gap * (parts - 1);
    let weights: Vec<f64> = (0..parts).map(|_| rng.random_range(0.7..1.3)).collect();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(parts as usize);
    let mut pos = start;
    for (i, w) in weights.iter().enumerate() {
        let size = if i as u32 == parts - 1 { start + len - pos } else { (f64::from(usable) * w / total).round() as u32 };
        out.push((pos, pos + size));
        pos += size + gap;
    }
    out
}

fn panel_layout(rng: &mut ChaCha8Rng, width: u32, height: u32) -> Vec<Rect> {
    let count: u32 = rng.random_range(2..=6);
    let min_rows = count.div_ceil(3);
    let max_rows = count.min(3);
    let rows = rng.random_range(min_rows..=max_rows);
    // Distribute panels over rows, each row holding between 1 and 3.
    let mut per_row = vec![1u32; rows as usize];
    for _ in 0..count - rows {
        let open: Vec<usize> = (0..per_row.len()).filter(|&r| per_row[r] < 3).collect();
        per_row[open[rng.random_range(0..open.len())]] += 1;
    }
    let mut panels = Vec::with_capacity(count as usize);
    for (r, (y0, y1)) in partition(rng, MARGIN, height - 2 * MARGIN, rows, GUTTER).into_iter().enumerate() {
        for (x0, x1) in partition(rng, MARGIN, width - 2 * MARGIN, per_row[r], GUTTER) {
            panels.push(Rect { x0, y0, x1, y1 });
        }
    }
    panels
}

fn fill(img: &mut RgbImage, r: &Rect, v: u8) {
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            img.put_pixel(x, y, Rgb([v, v, v]));
        }
    }
}

fn draw_panel(img: &mut RgbImage, rng: &mut ChaCha8Rng, p: &Rect) {
    fill(img, p, 0);
    let inner = Rect { x0: p.x0 + BORDER, y0: p.y0 + BORDER, x1: p.x1 - BORDER, y1: p.y1 - BORDER };
    fill(img, &inner, rng.random_range(228..=250));
    // Light hatching as background scenery.
    let tone: u8 = rng.random_range(200..=220);
    let step = rng.random_range(9..=16);
    let mut y = inner.y0 + step;
    while y < inner.y1 {
        for x in inner.x0..inner.x1 {
            img.put_pixel(x, y, Rgb([tone, tone, tone]));
        }
        y += step;
    }
}

/// A head disc above an elliptical body, spanning `r` exactly.
fn draw_character(img: &mut RgbImage, rng: &mut ChaCha8Rng, r: &Rect) {
    let v: u8 = rng.random_range(40..=110);
    let (w, h) = (f64::from(r.w()), f64::from(r.h()));
    let head_r = (w * 0.35).min(h * 0.2);
    let head_c = (f64::from(r.x0) + w / 2.0, f64::from(r.y0) + head_r);
    let body_top = f64::from(r.y0) + 1.6 * head_r;
    let body_c = (f64::from(r.x0) + w / 2.0, (body_top + f64::from(r.y1)) / 2.0);
    let (ax, ay) = (w / 2.0, (f64::from(r.y1) - body_top) / 2.0);
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            let in_head = (px - head_c.0).powi(2) + (py - head_c.1).powi(2) <= head_r * head_r;
            let in_body = ((px - body_c.0) / ax).powi(2) + ((py - body_c.1) / ay).powi(2) <= 1.0;
            if in_head || in_body {
                img.put_pixel(x, y, Rgb([v, v, v]));
            }
        }
    }
}

fn place_characters(rng: &mut ChaCha8Rng, panel: &Rect) -> Vec<Rect> {
    let inset = BORDER + 5;
    let (iw, ih) = (panel.w() - 2 * inset, panel.h() - 2 * inset);
    let wanted = rng.random_range(0..=3);
    let mut placed = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..25 {
            let w = ((f64::from(iw) * rng.random_range(0.15..0.35)) as u32).max(12).min(iw);
            let h = ((f64::from(ih) * rng.random_range(0.4..0.75)) as u32).max(20).min(ih);
            let x0 = panel.x0 + inset + rng.random_range(0..=iw - w);
            let y0 = panel.y0 + inset + rng.random_range(0..=ih - h);
            let r = Rect { x0, y0, x1: x0 + w, y1: y0 + h };
            if placed.iter().all(|o: &Rect| !o.overlaps(&r, 4)) {
                placed.push(r);
                break;
            }
        }
    }
    placed
}

fn page_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Page `index` of the dataset identified by `seed`.
pub fn generate_page(seed: u64, index: usize, page_size: (u32, u32)) -> Result<AnnotatedPage> {
    let (width, height) = page_size;
    let min_side = 2 * MARGIN + 3 * MIN_PANEL_SIDE + 2 * GUTTER;
    if width < min_side || height < min_side {
        return Err(Error::Config(format!("synthetic pages must be at least {min_side}x{min_side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(page_seed(seed, index));
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut gts = Vec::new();
    for panel in panel_layout(&mut rng, width, height) {
        draw_panel(&mut img, &mut rng, &panel);
        gts.push(LabeledBox::truth(panel.bbox(), Label::Panel));
        for c in place_characters(&mut rng, &panel) {
            draw_character(&mut img, &mut rng, &c);
            gts.push(LabeledBox::truth(c.bbox(), Label::Character));
        }
    }
    Ok(AnnotatedPage {
        image_id: format!("synth_{index:04}.png"),
        image: PageImage::Loaded(img),
        space: ImageSpace::new(width, height)?,
        gts,
        source_split: None,
    })
}

pub fn generate_synthetic_dataset(n_pages: usize, seed: u64, page_size: (u32, u32)) -> Result<Vec<AnnotatedPage>> {
    if n_pages == 0 {
        return Err(Error::Config("at least one synthetic page is required".into()));
    }
    (0..n_pages).map(|i| generate_page(seed, i, page_size)).collect()
}

/// Writes each page as PNG plus a VGG annotation file into `dir`.
pub fn write_dataset(pages: &[AnnotatedPage], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pages.len());
    for p in pages {
        let path = dir.join(&p.image_id);
        p.image.load()?.save(&path)?;
        entries.push(VggEntry { filename: p.image_id.clone(), file_size: Some(std::fs::metadata(&path)?.len()), boxes: p.gts.clone() });
    }
    std::fs::write(dir.join(ANNOTATION_FILE), to_vgg_json(&entries))?;
    Ok(())
}
