use super::{Param, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Statistics a forward pass normalized with.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub count: usize,
    /// `false` when the running estimates were used (inference mode).
    pub batch: bool,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn apply(&self, z: &Tensor<T>, mean: &[T], inv_std: &[T]) -> Tensor<T> {
        let mut y = z.clone();
        let plane = z.plane();
        for i in 0..z.n {
            let item = y.item_mut(i);
            for c in 0..z.c {
                let (m, s) = (mean[c], inv_std[c] * self.gamma.value[c]);
                let b = self.beta.value[c];
                item[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = (*v - m) * s + b);
            }
        }
        y
    }

    pub fn forward_eval(&self, z: &Tensor<T>) -> (Tensor<T>, BnStats<T>) {
        let stats = self.running_stats();
        (self.apply(z, &stats.mean, &stats.inv_std), stats)
    }

    fn running_stats(&self) -> BnStats<T> {
        let eps = T::of(BN_EPS);
        BnStats {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
            inv_std: self.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
            count: 0,
            batch: false,
        }
    }

    /// Normalizes with the statistics of this batch. Running estimates are
    /// left untouched; see [`BatchNorm::update_running`].
    pub fn forward_batch(&self, z: &Tensor<T>) -> (Tensor<T>, BnStats<T>) {
        let plane = z.plane();
        let count = z.n * plane;
        let inv_count = T::one() / T::of(count as f64);
        let mut mean = vec![T::zero(); z.c];
        let mut var = vec![T::zero(); z.c];
        for c in 0..z.c {
            let mut s = T::zero();
            for i in 0..z.n {
                s += z.item(i)[c * plane..(c + 1) * plane].iter().fold(T::zero(), |a, &v| a + v);
            }
            mean[c] = s * inv_count;
            let mut q = T::zero();
            for i in 0..z.n {
                q += z.item(i)[c * plane..(c + 1) * plane].iter().fold(T::zero(), |a, &v| {
                    let d = v - mean[c];
                    a + d * d
                });
            }
            var[c] = q * inv_count;
        }
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = self.apply(z, &mean, &inv_std);
        (y, BnStats { mean, var, inv_std, count, batch: true })
    }

    pub fn update_running(&mut self, stats: &BnStats<T>) {
        if !stats.batch {
            return;
        }
        let m = T::of(BN_MOMENTUM);
        let unbias = if stats.count > 1 { T::of(stats.count as f64 / (stats.count - 1) as f64) } else { T::one() };
        for c in 0..self.channels() {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (T::one() - m) * self.running_var[c] + m * stats.var[c] * unbias;
        }
    }

    pub fn forward_train(&mut self, z: &Tensor<T>) -> (Tensor<T>, BnStats<T>) {
        let (y, stats) = self.forward_batch(z);
        self.update_running(&stats);
        (y, stats)
    }

    /// Gradient w.r.t. the pre-normalization input `z`; accumulates gamma/beta grads.
    pub fn backward(&mut self, z: &Tensor<T>, stats: &BnStats<T>, dy: &Tensor<T>) -> Tensor<T> {
        let plane = z.plane();
        let count = T::of((z.n * plane) as f64);
        let mut dz = Tensor::zeros(z.n, z.c, z.h, z.w);
        for c in 0..z.c {
            let (m, is) = (stats.mean[c], stats.inv_std[c]);
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..z.n {
                let zs = &z.item(i)[c * plane..(c + 1) * plane];
                let gs = &dy.item(i)[c * plane..(c + 1) * plane];
                for (&zv, &g) in zs.iter().zip(gs) {
                    sum_dy += g;
                    sum_dy_xhat += g * (zv - m) * is;
                }
            }
            self.gamma.grad[c] += sum_dy_xhat;
            self.beta.grad[c] += sum_dy;
            let scale = self.gamma.value[c] * is;
            for i in 0..z.n {
                let zs = &z.item(i)[c * plane..(c + 1) * plane];
                let gs = &dy.item(i)[c * plane..(c + 1) * plane];
                let out = &mut dz.item_mut(i)[c * plane..(c + 1) * plane];
                if stats.batch {
                    let k = scale / count;
                    for ((o, &zv), &g) in out.iter_mut().zip(zs).zip(gs) {
                        let xhat = (zv - m) * is;
                        *o = k * (count * g - sum_dy - xhat * sum_dy_xhat);
                    }
                } else {
                    for (o, &g) in out.iter_mut().zip(gs) {
                        *o = scale * g;
                    }
                }
            }
        }
        dz
    }
}
