//! Head decoding, objectness filtering and per-class greedy NMS.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, Scale};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox, Label, LabeledBox};
use crate::network::{class_probabilities, sigmoid, DetectionHeads, NetworkConfig};

pub const OBJECTNESS_THRESHOLD: f64 = 0.70;
pub const NMS_IOU_THRESHOLD: f64 = 0.5;
/// Bound on decoded `tw`, `th` so an untrained head cannot overflow `exp`.
const MAX_LOG_SCALE: f64 = 10.0;

/// Grid position a detection was decoded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRef {
    pub scale: Scale,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub label: Label,
    pub objectness: f64,
    pub class_prob: f64,
    /// Set for detections decoded from heads; absent when read back from disk.
    pub slot: Option<SlotRef>,
}

impl Detection {
    /// Ranking score used by NMS and matching.
    pub fn score(&self) -> f64 {
        self.objectness * self.class_prob
    }

    pub fn labeled(&self) -> LabeledBox {
        LabeledBox { bbox: self.bbox, label: self.label, score: Some(self.score()) }
    }
}

/// Decode batch item `item` into one detection per slot, ordered by scale,
/// anchor, row, column.
pub fn decode_item(heads: &DetectionHeads, item: usize, anchors: &AnchorSet, cfg: &NetworkConfig) -> Result<Vec<Detection>> {
    if item >= heads.batch() {
        return Err(Error::Shape(format!("batch item {item} out of range ({})", heads.batch())));
    }
    if anchors.per_scale_count() != cfg.boxes_per_cell {
        return Err(Error::Shape(format!("{} anchors per scale for {} boxes per cell", anchors.per_scale_count(), cfg.boxes_per_cell)));
    }
    let depth = cfg.slot_depth();
    let mut out = Vec::with_capacity(cfg.total_slots());
    for s in Scale::ALL {
        let g = heads.get(s);
        if g.side != cfg.grid_side(s) || g.depth != cfg.head_depth() {
            return Err(Error::Shape(format!("head {s:?} does not match the configuration")));
        }
        let stride = s.stride() as f64;
        for a in 0..cfg.boxes_per_cell {
            let prior = anchors.get(s, a);
            for gy in 0..g.side {
                for gx in 0..g.side {
                    let raw = |j: usize| g.get(item, a * depth + j, gy, gx);
                    let values: Vec<f64> = (0..depth).map(raw).collect();
                    if values.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("head {s:?} slot ({a}, {gy}, {gx})")));
                    }
                    let bbox = BBox::new(
                        (sigmoid(values[0]) + gx as f64) * stride,
                        (sigmoid(values[1]) + gy as f64) * stride,
                        prior.w * values[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
                        prior.h * values[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
                    );
                    let probs = class_probabilities(&values[5..], cfg.head_mode);
                    let (best, p) =
                        probs.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |acc, (j, p)| if p > acc.1 { (j, p) } else { acc });
                    out.push(Detection {
                        bbox,
                        label: Label::from_index(best).unwrap_or(Label::Character),
                        objectness: sigmoid(values[4]),
                        class_prob: p,
                        slot: Some(SlotRef { scale: s, anchor: a, gy, gx }),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Decode a single-image head set.
pub fn decode(heads: &DetectionHeads, anchors: &AnchorSet, cfg: &NetworkConfig) -> Result<Vec<Detection>> {
    decode_item(heads, 0, anchors, cfg)
}

/// Keep detections whose objectness is strictly above `threshold`, in order.
pub fn filter_objectness(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.objectness > threshold).copied().collect()
}

/// Order by descending score; equal scores keep their input order.
pub(crate) fn by_score_desc<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| score(&items[b]).total_cmp(&score(&items[a])));
    order
}

/// Greedy non-maximal suppression, independently per class. A detection is
/// dropped iff it overlaps an already kept detection of its class with IoU
/// above `iou_threshold`. Output is in descending score order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score_desc(dets, Detection::score) {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| k.label == d.label && iou_unchecked(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{encode_targets, ideal_heads};
    use crate::network::HeadMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(cx: f64, cy: f64, w: f64, h: f64, obj: f64, label: Label) -> Detection {
        Detection { bbox: BBox::new(cx, cy, w, h), label, objectness: obj, class_prob: 1.0, slot: None }
    }

    /// Repeatedly take the best remaining detection and rescan every pair.
    fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut alive: Vec<bool> = vec![true; dets.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if alive[i] && best.is_none_or(|b| dets[i].score() > dets[b].score()) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            alive[b] = false;
            out.push(dets[b]);
            for j in 0..dets.len() {
                if alive[j] && dets[j].label == dets[b].label && iou_unchecked(&dets[j].bbox, &dets[b].bbox) > thr {
                    alive[j] = false;
                }
            }
        }
        out
    }

    #[test]
    fn zero_heads_decode_to_priors_at_cell_centers() {
        let cfg = NetworkConfig::default();
        let heads = DetectionHeads::zeros(&cfg, 1);
        let dets = decode(&heads, &cfg.anchors, &cfg).unwrap();
        assert_eq!(dets.len(), 10647);
        let first = dets[0];
        let prior = cfg.anchors.get(Scale::P1, 0);
        assert_eq!(first.bbox, BBox::new(16.0, 16.0, prior.w, prior.h));
        assert_eq!(first.objectness, 0.5);
    }

    #[test]
    fn output_count_for_other_sizes() {
        let cfg = NetworkConfig { input_size: 224, head_mode: HeadMode::Softmax, ..Default::default() };
        let dets = decode(&DetectionHeads::zeros(&cfg, 1), &cfg.anchors, &cfg).unwrap();
        assert_eq!(dets.len(), (7 * 7 + 14 * 14 + 28 * 28) * 3);
    }

    #[test]
    fn huge_scale_logits_stay_finite() {
        let cfg = NetworkConfig::default();
        let mut heads = DetectionHeads::zeros(&cfg, 1);
        heads.grids[0].set(0, 2, 0, 0, 800.0);
        heads.grids[0].set(0, 3, 0, 0, -800.0);
        let d = decode(&heads, &cfg.anchors, &cfg).unwrap()[0];
        assert!(d.bbox.w.is_finite() && d.bbox.h > 0.0);
    }

    #[test]
    fn non_finite_raw_values_are_rejected() {
        let cfg = NetworkConfig::default();
        let mut heads = DetectionHeads::zeros(&cfg, 1);
        heads.grids[2].data[17] = f64::INFINITY;
        assert!(matches!(decode(&heads, &cfg.anchors, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn responsible_slot_reproduces_ground_truth() {
        let cfg = NetworkConfig::default();
        let gts = vec![
            LabeledBox::truth(BBox::new(130.0, 77.0, 140.0, 90.0), Label::Panel),
            LabeledBox::truth(BBox::new(300.0, 310.0, 25.0, 40.0), Label::Character),
        ];
        let targets = vec![encode_targets(&gts, &cfg.anchors, &cfg)];
        let dets = decode(&ideal_heads(&targets, &cfg, 15.0), &cfg.anchors, &cfg).unwrap();
        let kept = filter_objectness(&dets, OBJECTNESS_THRESHOLD);
        assert_eq!(kept.len(), 2);
        for (gt, d) in gts.iter().zip(&kept) {
            assert_eq!(gt.label, d.label);
            for (a, b) in [(gt.bbox.cx, d.bbox.cx), (gt.bbox.cy, d.bbox.cy), (gt.bbox.w, d.bbox.w), (gt.bbox.h, d.bbox.h)] {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn objectness_filter_is_strict() {
        let dets: Vec<Detection> = [0.69, 0.70, 0.71].iter().map(|&p| det(5.0, 5.0, 4.0, 4.0, p, Label::Panel)).collect();
        let kept = filter_objectness(&dets, 0.70);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].objectness, 0.71);
        let half: Vec<Detection> = (0..4).map(|_| det(5.0, 5.0, 4.0, 4.0, 0.5, Label::Panel)).collect();
        assert!(filter_objectness(&half, 0.7).is_empty());
        assert_eq!(filter_objectness(&half, 0.0), half);
    }

    #[test]
    fn nms_examples() {
        let single = vec![det(5.0, 5.0, 4.0, 4.0, 0.3, Label::Panel)];
        assert_eq!(nms(&single, 0.5), single);
        let pair = vec![det(5.0, 5.0, 4.0, 4.0, 0.8, Label::Panel), det(5.0, 5.0, 4.0, 4.0, 0.9, Label::Panel)];
        let kept = nms(&pair, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].objectness, 0.9);
        let cross = vec![det(5.0, 5.0, 4.0, 4.0, 0.8, Label::Panel), det(5.0, 5.0, 4.0, 4.0, 0.9, Label::Character)];
        assert_eq!(nms(&cross, 0.5).len(), 2);
    }

    #[test]
    fn nms_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..2000 {
            let n = rng.random_range(0..=6);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let label = if rng.random_bool(0.5) { Label::Panel } else { Label::Character };
                    det(
                        rng.random_range(0.0..40.0),
                        rng.random_range(0.0..40.0),
                        rng.random_range(5.0..30.0),
                        rng.random_range(5.0..30.0),
                        rng.random_range(0.0..1.0),
                        label,
                    )
                })
                .collect();
            let got = nms(&dets, 0.5);
            assert_eq!(got, nms_oracle(&dets, 0.5));
            for (i, a) in got.iter().enumerate() {
                for b in &got[i + 1..] {
                    assert!(a.label != b.label || iou_unchecked(&a.bbox, &b.bbox) <= 0.5);
                }
            }
        }
    }
}
