//! Ground-truth encoding onto the head grids and the detection loss.
//!
//! Loss per image, averaged over the batch:
//! * coordinates: squared error on `(sigmoid(tx), sigmoid(ty), tw, th)`,
//!   averaged over responsible slots;
//! * objectness: binary cross-entropy over every slot, with positives and
//!   negatives each averaged separately so a handful of responsible slots is
//!   not drowned by ten thousand empty ones;
//! * class: per-class binary cross-entropy summed over classes (sigmoid head)
//!   or softmax cross-entropy (softmax head), averaged over responsible slots.
//!
//! Every non-responsible slot is a negative; there is no ignore region.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign_anchor, AnchorSet, Scale};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Label, LabeledBox};
use crate::network::{class_probabilities, sigmoid, DetectionHeads, HeadMode, NetworkConfig};

/// Upper bound used for in-cell offsets so they stay strictly below 1.
const MAX_OFFSET: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotTarget {
    pub scale: Scale,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub label: Label,
}

/// Encoded targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrids {
    /// Per scale, `B * S * S` flags indexed `(anchor * S + gy) * S + gx`.
    pub objectness: [Vec<u8>; 3],
    pub slots: Vec<SlotTarget>,
    /// Boxes that overwrote an earlier box in the same slot.
    pub collisions: usize,
    /// Boxes under one pixel in either dimension after resizing.
    pub skipped: usize,
    sides: [usize; 3],
}

impl TargetGrids {
    pub fn empty(cfg: &NetworkConfig) -> Self {
        let sides = Scale::ALL.map(|s| cfg.grid_side(s));
        Self { objectness: sides.map(|s| vec![0; cfg.boxes_per_cell * s * s]), slots: Vec::new(), collisions: 0, skipped: 0, sides }
    }

    pub fn side(&self, scale: Scale) -> usize {
        self.sides[scale.index()]
    }

    pub fn slot_index(&self, scale: Scale, anchor: usize, gy: usize, gx: usize) -> usize {
        let s = self.side(scale);
        (anchor * s + gy) * s + gx
    }

    pub fn is_responsible(&self, scale: Scale, anchor: usize, gy: usize, gx: usize) -> bool {
        self.objectness[scale.index()][self.slot_index(scale, anchor, gy, gx)] != 0
    }

    pub fn positives(&self) -> usize {
        self.slots.len()
    }
}

/// Encode network-space ground truth. Each box claims the slot of its best
/// anchor at the cell containing its center; a later box in an occupied slot
/// replaces the earlier one and is counted as a collision.
pub fn encode_targets(gts: &[LabeledBox], anchors: &AnchorSet, cfg: &NetworkConfig) -> TargetGrids {
    let mut t = TargetGrids::empty(cfg);
    for gt in gts {
        let b = gt.bbox;
        if !(b.w >= 1.0 && b.h >= 1.0) {
            t.skipped += 1;
            continue;
        }
        let (scale, anchor) = assign_anchor(&b, anchors);
        let stride = scale.stride() as f64;
        let side = t.side(scale);
        let cell = |c: f64| ((c / stride).floor().max(0.0) as usize).min(side - 1);
        let (gx, gy) = (cell(b.cx), cell(b.cy));
        let prior = anchors.get(scale, anchor);
        let target = SlotTarget {
            scale,
            anchor,
            gy,
            gx,
            tx: (b.cx / stride - gx as f64).clamp(0.0, MAX_OFFSET),
            ty: (b.cy / stride - gy as f64).clamp(0.0, MAX_OFFSET),
            tw: (b.w / prior.w).ln(),
            th: (b.h / prior.h).ln(),
            label: gt.label,
        };
        let idx = t.slot_index(scale, anchor, gy, gx);
        let mask = &mut t.objectness[scale.index()][idx];
        if *mask != 0 {
            t.collisions += 1;
            t.slots.retain(|s| !(s.scale == scale && s.anchor == anchor && s.gy == gy && s.gx == gx));
        }
        *mask = 1;
        t.slots.push(target);
    }
    if t.skipped > 0 {
        warn!("skipped {} ground-truth boxes smaller than one pixel", t.skipped);
    }
    t
}

/// Boxes described by the responsible slots, in network space.
pub fn decode_targets(targets: &TargetGrids, anchors: &AnchorSet) -> Vec<LabeledBox> {
    targets
        .slots
        .iter()
        .map(|s| {
            let stride = s.scale.stride() as f64;
            let prior = anchors.get(s.scale, s.anchor);
            let bbox = BBox::new((s.gx as f64 + s.tx) * stride, (s.gy as f64 + s.ty) * stride, prior.w * s.tw.exp(), prior.h * s.th.exp());
            LabeledBox::truth(bbox, s.label)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub coord: f64,
    pub objectness: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { coord: 1.0, objectness: 1.0, class: 1.0 }
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub coord: f64,
    pub objectness: f64,
    pub class: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy on a logit, and its derivative.
fn bce_logit(logit: f64, target: f64) -> (f64, f64) {
    (softplus(logit) - target * logit, sigmoid(logit) - target)
}

fn check_shapes(heads: &DetectionHeads, targets: &[TargetGrids], cfg: &NetworkConfig) -> Result<()> {
    if heads.batch() != targets.len() {
        return Err(Error::Shape(format!("{} head items but {} target sets", heads.batch(), targets.len())));
    }
    for s in Scale::ALL {
        let g = heads.get(s);
        if g.side != cfg.grid_side(s) || g.depth != cfg.head_depth() || g.batch != targets.len() {
            return Err(Error::Shape(format!(
                "head {s:?} is {}x{}x{}, expected {}x{}x{}",
                g.side,
                g.side,
                g.depth,
                cfg.grid_side(s),
                cfg.grid_side(s),
                cfg.head_depth()
            )));
        }
    }
    if !heads.is_finite() {
        return Err(Error::NonFinite("detection heads".into()));
    }
    Ok(())
}

/// Loss and its gradient with respect to every raw head value.
pub fn detection_loss_with_grad(
    heads: &DetectionHeads,
    targets: &[TargetGrids],
    cfg: &NetworkConfig,
    weights: &LossWeights,
) -> Result<(LossBreakdown, DetectionHeads)> {
    check_shapes(heads, targets, cfg)?;
    let batch = targets.len() as f64;
    let depth = cfg.slot_depth();
    let classes = cfg.num_classes;
    let mut grads = DetectionHeads::zeros(cfg, targets.len());
    let mut out = LossBreakdown::default();

    for (b, t) in targets.iter().enumerate() {
        let n_pos = t.positives();
        let pos_obj = weights.objectness / (n_pos.max(1) as f64 * batch);
        let neg_obj = weights.objectness / ((cfg.total_slots() - n_pos).max(1) as f64 * batch);
        for s in Scale::ALL {
            let grid = heads.get(s);
            let gg = grads.get_mut(s);
            let side = grid.side;
            let mask = &t.objectness[s.index()];
            for a in 0..cfg.boxes_per_cell {
                let ch = a * depth + 4;
                for gy in 0..side {
                    for gx in 0..side {
                        let y = f64::from(mask[(a * side + gy) * side + gx]);
                        let i = grid.index(b, ch, gy, gx);
                        let (l, d) = bce_logit(grid.data[i], y);
                        let obj_scale = if y > 0.0 { pos_obj } else { neg_obj };
                        out.objectness += l * obj_scale;
                        gg.data[i] = d * obj_scale;
                    }
                }
            }
        }

        let pos_scale = 1.0 / (n_pos.max(1) as f64 * batch);
        for slot in &t.slots {
            let grid = heads.get(slot.scale);
            let base = slot.anchor * depth;
            let raw = |j: usize| grid.get(b, base + j, slot.gy, slot.gx);
            let idx = |j: usize| grid.index(b, base + j, slot.gy, slot.gx);
            let gg = grads.get_mut(slot.scale);

            let wc = weights.coord * pos_scale;
            for (j, target) in [(0, slot.tx), (1, slot.ty)] {
                let p = sigmoid(raw(j));
                let err = p - target;
                out.coord += wc * err * err;
                gg.data[idx(j)] += wc * 2.0 * err * p * (1.0 - p);
            }
            for (j, target) in [(2, slot.tw), (3, slot.th)] {
                let err = raw(j) - target;
                out.coord += wc * err * err;
                gg.data[idx(j)] += wc * 2.0 * err;
            }

            let wk = weights.class * pos_scale;
            let logits: Vec<f64> = (0..classes).map(|j| raw(5 + j)).collect();
            let truth = slot.label.index();
            match cfg.head_mode {
                HeadMode::Sigmoid => {
                    let per = wk;
                    for (j, &z) in logits.iter().enumerate() {
                        let (l, d) = bce_logit(z, if j == truth { 1.0 } else { 0.0 });
                        out.class += per * l;
                        gg.data[idx(5 + j)] += per * d;
                    }
                }
                HeadMode::Softmax => {
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                    out.class += wk * (lse - logits[truth]);
                    for (j, p) in class_probabilities(&logits, HeadMode::Softmax).into_iter().enumerate() {
                        gg.data[idx(5 + j)] += wk * (p - if j == truth { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }
    out.total = out.coord + out.objectness + out.class;
    Ok((out, grads))
}

pub fn detection_loss(
    heads: &DetectionHeads,
    targets: &[TargetGrids],
    cfg: &NetworkConfig,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    detection_loss_with_grad(heads, targets, cfg, weights).map(|(l, _)| l)
}

/// Heads that predict `targets` exactly, with every logit saturated at
/// `saturation` in the right direction.
pub fn ideal_heads(targets: &[TargetGrids], cfg: &NetworkConfig, saturation: f64) -> DetectionHeads {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let depth = cfg.slot_depth();
    let mut heads = DetectionHeads::zeros(cfg, targets.len());
    for (b, t) in targets.iter().enumerate() {
        for s in Scale::ALL {
            let g = heads.get_mut(s);
            for a in 0..cfg.boxes_per_cell {
                for gy in 0..g.side {
                    for gx in 0..g.side {
                        g.set(b, a * depth + 4, gy, gx, -saturation);
                    }
                }
            }
        }
        for slot in &t.slots {
            let g = heads.get_mut(slot.scale);
            let base = slot.anchor * depth;
            g.set(b, base, slot.gy, slot.gx, logit(slot.tx));
            g.set(b, base + 1, slot.gy, slot.gx, logit(slot.ty));
            g.set(b, base + 2, slot.gy, slot.gx, slot.tw);
            g.set(b, base + 3, slot.gy, slot.gx, slot.th);
            g.set(b, base + 4, slot.gy, slot.gx, saturation);
            for j in 0..cfg.num_classes {
                let v = if j == slot.label.index() { saturation } else { -saturation };
                g.set(b, base + 5 + j, slot.gy, slot.gx, v);
            }
        }
    }
    heads
}
