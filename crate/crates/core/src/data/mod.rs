//! Datasets: annotated pages, VGG Image Annotator files, splits, synthetic
//! pages, detection records and box overlays.

pub mod detections;
pub mod render;
pub mod splits;
pub mod synth;
pub mod vgg;

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageSpace, LabeledBox};
use crate::nn::Tensor;

pub use splits::{make_splits, DatasetManifest, Split};

/// Pixels of a page, held in memory or read on demand.
#[derive(Debug, Clone, PartialEq)]
pub enum PageImage {
    Loaded(RgbImage),
    File(PathBuf),
}

impl PageImage {
    pub fn load(&self) -> Result<RgbImage> {
        match self {
            PageImage::Loaded(img) => Ok(img.clone()),
            PageImage::File(path) => load_rgb(path),
        }
    }
}

/// One page with ground truth in original image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedPage {
    pub image_id: String,
    pub image: PageImage,
    pub space: ImageSpace,
    pub gts: Vec<LabeledBox>,
    pub source_split: Option<Split>,
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(image::open(path)?.to_rgb8())
}

/// Direct (aspect-distorting) resize to `side`x`side`, channels scaled to
/// `[0, 1]`, laid out `[1, 3, side, side]`.
pub fn image_to_tensor(img: &RgbImage, side: usize) -> Tensor<f32> {
    let resized;
    let src = if img.width() as usize == side && img.height() as usize == side {
        img
    } else {
        resized = image::imageops::resize(img, side as u32, side as u32, FilterType::Triangle);
        &resized
    };
    let plane = side * side;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in src.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px.0[c]) / 255.0;
        }
    }
    Tensor::from_vec(1, 3, side, side, data)
}

/// Serializable summary of a page (everything except pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageInfo {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: usize,
}

impl From<&AnnotatedPage> for PageInfo {
    fn from(p: &AnnotatedPage) -> Self {
        Self { image_id: p.image_id.clone(), width: p.space.width, height: p.space.height, boxes: p.gts.len() }
    }
}
