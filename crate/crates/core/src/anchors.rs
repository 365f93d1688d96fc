//! Prior anchor shapes: IoU-distance k-means over ground-truth dimensions and
//! the per-scale partition used by the detector heads.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{co_centered_iou, BBox};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

/// One of the three detection scales. `P1` is the coarsest grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    P1,
    P2,
    P3,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::P1, Scale::P2, Scale::P3];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Input pixels per grid cell.
    pub fn stride(self) -> usize {
        match self {
            Scale::P1 => 32,
            Scale::P2 => 16,
            Scale::P3 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn new(w: f64, h: f64) -> Self {
        Self { w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn dims(&self) -> (f64, f64) {
        (self.w, self.h)
    }
}

impl From<[f64; 2]> for Anchor {
    fn from(v: [f64; 2]) -> Self {
        Anchor::new(v[0], v[1])
    }
}

impl From<Anchor> for [f64; 2] {
    fn from(a: Anchor) -> Self {
        [a.w, a.h]
    }
}

/// Anchors in network-space pixels, sorted by descending area and split evenly
/// across the three scales (largest third to `P1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Anchor>", into = "Vec<Anchor>")]
pub struct AnchorSet {
    anchors: Vec<Anchor>,
}

impl AnchorSet {
    /// Validates positivity and the 3-way split, then orders by descending area.
    pub fn new(mut anchors: Vec<Anchor>) -> Result<Self> {
        if anchors.is_empty() || !anchors.len().is_multiple_of(Scale::ALL.len()) {
            return Err(Error::Anchors(format!("anchor count {} is not a positive multiple of {}", anchors.len(), Scale::ALL.len())));
        }
        if let Some(a) = anchors.iter().find(|a| !(a.w > 0.0 && a.h > 0.0 && a.w.is_finite() && a.h.is_finite())) {
            return Err(Error::Anchors(format!("anchor {}x{} must have positive finite sides", a.w, a.h)));
        }
        sort_by_area_desc(&mut anchors);
        Ok(Self { anchors })
    }

    /// Generic nine priors for a 416x416 input, used when no dataset-specific
    /// anchors are supplied.
    pub fn default_nine() -> Self {
        let raw = [
            (373.0, 326.0),
            (156.0, 198.0),
            (116.0, 90.0),
            (59.0, 119.0),
            (62.0, 45.0),
            (30.0, 61.0),
            (33.0, 23.0),
            (16.0, 30.0),
            (10.0, 13.0),
        ];
        Self::new(raw.iter().map(|&(w, h)| Anchor::new(w, h)).collect()).expect("static anchors are valid")
    }

    pub fn all(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn per_scale_count(&self) -> usize {
        self.anchors.len() / Scale::ALL.len()
    }

    pub fn per_scale(&self, scale: Scale) -> &[Anchor] {
        let n = self.per_scale_count();
        &self.anchors[scale.index() * n..(scale.index() + 1) * n]
    }

    pub fn get(&self, scale: Scale, index: usize) -> Anchor {
        self.per_scale(scale)[index]
    }

    /// Same anchors with every side multiplied by `factor` (for inputs other
    /// than the one the anchors were clustered at).
    pub fn scaled(&self, factor: f64) -> AnchorSet {
        AnchorSet { anchors: self.anchors.iter().map(|a| Anchor::new(a.w * factor, a.h * factor)).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl TryFrom<Vec<Anchor>> for AnchorSet {
    type Error = Error;

    fn try_from(v: Vec<Anchor>) -> Result<Self> {
        AnchorSet::new(v)
    }
}

impl From<AnchorSet> for Vec<Anchor> {
    fn from(s: AnchorSet) -> Self {
        s.anchors
    }
}

fn sort_by_area_desc(v: &mut [Anchor]) {
    v.sort_by(|a, b| b.area().total_cmp(&a.area()));
}

/// Output of [`kmeans_iou`].
#[derive(Debug, Clone)]
pub struct Clustering {
    /// Representatives sorted by descending area.
    pub centers: Vec<Anchor>,
    /// Mean `1 - IoU` to the assigned representative after each iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn distance(p: (f64, f64), c: &Anchor) -> f64 {
    1.0 - co_centered_iou(p, c.dims())
}

fn nearest(p: (f64, f64), centers: &[Anchor]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = distance(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp_seed(dims: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<Anchor> {
    let first = dims[rng.random_range(0..dims.len())];
    let mut centers = vec![Anchor::new(first.0, first.1)];
    let mut d2: Vec<f64> = dims.iter().map(|&p| distance(p, &centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            // Floating-point leftovers must never land on an existing center.
            if d2[idx] == 0.0 {
                idx = d2.iter().rposition(|&w| w > 0.0).unwrap_or(idx);
            }
            idx
        } else {
            rng.random_range(0..dims.len())
        };
        let c = Anchor::new(dims[pick].0, dims[pick].1);
        for (p, d) in dims.iter().zip(d2.iter_mut()) {
            *d = d.min(distance(*p, &c).powi(2));
        }
        centers.push(c);
    }
    centers
}

fn objective(dims: &[(f64, f64)], assign: &[usize], centers: &[Anchor]) -> f64 {
    let total: f64 = dims.iter().zip(assign).map(|(&p, &j)| distance(p, &centers[j])).sum();
    total / dims.len() as f64
}

/// k-means over `(w, h)` pairs with `d = 1 - IoU` (boxes compared co-centered),
/// seeded by k-means++ from `seed`.
///
/// The centroid update uses the per-cluster mean of `w` and `h`, but is only
/// accepted when it does not increase that cluster's IoU cost, so the objective
/// never increases from one iteration to the next.
pub fn kmeans_iou(dims: &[(f64, f64)], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::Anchors("k must be at least 1".into()));
    }
    if let Some(p) = dims.iter().find(|p| !(p.0 > 0.0 && p.1 > 0.0 && p.0.is_finite() && p.1.is_finite())) {
        return Err(Error::Anchors(format!("box dimensions {}x{} must be positive", p.0, p.1)));
    }
    let distinct: HashSet<(u64, u64)> = dims.iter().map(|p| (p.0.to_bits(), p.1.to_bits())).collect();
    if distinct.len() < k {
        return Err(Error::Anchors(format!("only {} distinct box shapes for k = {k}; reduce k or add annotated boxes", distinct.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp_seed(dims, k, &mut rng);
    let mut assign = vec![usize::MAX; dims.len()];
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        let mut dist = vec![0.0; dims.len()];
        for (i, &p) in dims.iter().enumerate() {
            let (j, d) = nearest(p, &centers);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
            dist[i] = d;
        }

        // Re-seed empty clusters with the point farthest from its representative.
        let mut counts = vec![0usize; k];
        for &j in &assign {
            counts[j] += 1;
        }
        #[allow(clippy::needless_range_loop)]
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..dims.len()).filter(|&i| counts[assign[i]] > 1).max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[assign[i]] -= 1;
                counts[j] = 1;
                assign[i] = j;
                dist[i] = 0.0;
                centers[j] = Anchor::new(dims[i].0, dims[i].1);
                changed = true;
            }
        }

        if !changed {
            history.push(objective(dims, &assign, &centers));
            break;
        }

        #[allow(clippy::needless_range_loop)]
        for j in 0..k {
            let members: Vec<(f64, f64)> = dims.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(&p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            let mean = Anchor::new(members.iter().map(|p| p.0).sum::<f64>() / n, members.iter().map(|p| p.1).sum::<f64>() / n);
            let cost = |c: &Anchor| members.iter().map(|&p| distance(p, c)).sum::<f64>();
            if cost(&mean) <= cost(&centers[j]) {
                centers[j] = mean;
            }
        }
        history.push(objective(dims, &assign, &centers));
    }

    sort_by_area_desc(&mut centers);
    Ok(Clustering { centers, objective: history, iterations })
}

/// Cluster ground-truth dimensions (network space) into `k` anchors, sorted by
/// descending area and partitioned across the three scales.
pub fn cluster_anchors(gt_dims: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet> {
    if !k.is_multiple_of(Scale::ALL.len()) {
        return Err(Error::Anchors(format!("k = {k} cannot be split evenly over {} scales", Scale::ALL.len())));
    }
    AnchorSet::new(kmeans_iou(gt_dims, k, seed)?.centers)
}

/// The anchor with the largest co-centered IoU against `gt`, together with the
/// scale that owns it and its index within that scale. Ties go to the lower
/// global index.
pub fn assign_anchor(gt: &BBox, anchors: &AnchorSet) -> (Scale, usize) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, a) in anchors.all().iter().enumerate() {
        let v = co_centered_iou((gt.w, gt.h), a.dims());
        if v > best.1 {
            best = (i, v);
        }
    }
    let per = anchors.per_scale_count();
    (Scale::ALL[best.0 / per], best.0 % per)
}
