//! Page-level glue: dataset pages to training samples, and images to
//! detections in their own coordinate frame.

use image::RgbImage;

use crate::data::{image_to_tensor, AnnotatedPage};
use crate::error::Result;
use crate::geometry::{from_network_space_sized, to_network_space_sized, ImageSpace, LabeledBox};
use crate::loss::encode_targets;
use crate::network::{Network, NetworkConfig};
use crate::postprocess::{decode, filter_objectness, nms, Detection, NMS_IOU_THRESHOLD, OBJECTNESS_THRESHOLD};
use crate::train::Sample;

/// Ground truth of `page` in the `cfg.input_size` network frame.
pub fn network_space_truth(page: &AnnotatedPage, cfg: &NetworkConfig) -> Vec<LabeledBox> {
    page.gts.iter().map(|g| LabeledBox { bbox: to_network_space_sized(&g.bbox, page.space, cfg.input_size as u32), ..*g }).collect()
}

/// Box dimensions of every page in network space, for anchor clustering.
pub fn network_space_dims(pages: &[AnnotatedPage], input_size: usize) -> Vec<(f64, f64)> {
    pages
        .iter()
        .flat_map(|p| p.gts.iter().map(move |g| to_network_space_sized(&g.bbox, p.space, input_size as u32)))
        .map(|b| (b.w, b.h))
        .collect()
}

pub fn prepare_sample(page: &AnnotatedPage, cfg: &NetworkConfig) -> Result<Sample> {
    let img = page.image.load()?;
    let targets = encode_targets(&network_space_truth(page, cfg), &cfg.anchors, cfg);
    Ok(Sample { image: image_to_tensor(&img, cfg.input_size), targets })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    pub obj_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self { obj_threshold: OBJECTNESS_THRESHOLD, nms_iou: NMS_IOU_THRESHOLD }
    }
}

/// Resize, forward, decode, objectness filter, NMS, then map back to the
/// image's own coordinates.
pub fn detect_image(net: &Network<f32>, img: &RgbImage, opts: &DetectOptions) -> Result<Vec<Detection>> {
    let cfg = net.config();
    let space = ImageSpace::new(img.width(), img.height())?;
    let heads = net.forward(&image_to_tensor(img, cfg.input_size))?;
    let dets = decode(&heads, &cfg.anchors, cfg)?;
    let kept = nms(&filter_objectness(&dets, opts.obj_threshold), opts.nms_iou);
    Ok(kept.into_iter().map(|d| Detection { bbox: from_network_space_sized(&d.bbox, space, cfg.input_size as u32), ..d }).collect())
}
