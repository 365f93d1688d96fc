use rand::Rng;

use super::{Param, Real, Tensor};

/// Square 2-D convolution with "same" padding (`k / 2`).
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out, in, k, k]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Conv2d<T> {
    /// Kaiming-uniform weights for leaky-ReLU layers, or the fan-in uniform
    /// default for linear output layers (`leaky = false`, with bias).
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        leaky: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = if leaky { (6.0 / ((1.0 + super::LEAKY_SLOPE * super::LEAKY_SLOPE) * fan_in)).sqrt() } else { 1.0 / fan_in.sqrt() };
        let n = out_channels * in_channels * kernel * kernel;
        let weight = Param::new((0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect());
        let bias = bias.then(|| {
            let b = 1.0 / fan_in.sqrt();
            Param::new((0..out_channels).map(|_| T::of(rng.random_range(-b..b))).collect())
        });
        Self { in_channels, out_channels, kernel, stride, weight, bias }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Output columns `lo..hi` whose input column `ox * stride + kx - pad`
    /// falls inside `0..w`.
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad());
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(wo) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        let (ho, wo) = (self.out_side(h), self.out_side(w));
        let mut row = 0;
        for ci in 0..self.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= h {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[(iy - p) * w..(iy - p + 1) * w];
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        let first = lo * s + kx - p;
                        if s == 1 {
                            out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (j, v) in out_row[lo..hi].iter_mut().enumerate() {
                                *v = src[first + j * s];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        let (ho, wo) = (self.out_side(h), self.out_side(w));
        let mut row = 0;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= h {
                            continue;
                        }
                        let dst = &mut plane[(iy - p) * w..(iy - p + 1) * w];
                        let first = lo * s + kx - p;
                        let g = &src[oy * wo + lo..oy * wo + hi];
                        if s == 1 {
                            for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(g) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in g.iter().enumerate() {
                                dst[first + j * s] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let (ho, wo) = (self.out_side(x.h), self.out_side(x.w));
        let spatial = ho * wo;
        let kk = self.patch_len();
        let mut out = Tensor::zeros(x.n, self.out_channels, ho, wo);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * spatial] };
        for i in 0..x.n {
            let input = x.item(i);
            let b: &[T] = if self.is_pointwise() {
                input
            } else {
                self.im2col(input, x.h, x.w, &mut cols);
                &cols
            };
            let y = out.item_mut(i);
            T::gemm(self.out_channels, kk, spatial, T::one(), &self.weight.value, kk, 1, b, spatial, 1, T::zero(), y, spatial, 1);
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.value.iter().enumerate() {
                    y[o * spatial..(o + 1) * spatial].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let spatial = dy.plane();
        let kk = self.patch_len();
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * spatial] };
        let mut dcols = if self.is_pointwise() || !need_input_grad { Vec::new() } else { vec![T::zero(); kk * spatial] };
        for i in 0..x.n {
            let g = dy.item(i);
            let input = x.item(i);
            let b: &[T] = if self.is_pointwise() {
                input
            } else {
                self.im2col(input, x.h, x.w, &mut cols);
                &cols
            };
            // dW += dY * cols^T
            T::gemm(self.out_channels, spatial, kk, T::one(), g, spatial, 1, b, 1, spatial, T::one(), &mut self.weight.grad, kk, 1);
            if let Some(bias) = &mut self.bias {
                for (o, bg) in bias.grad.iter_mut().enumerate() {
                    *bg += g[o * spatial..(o + 1) * spatial].iter().fold(T::zero(), |a, &v| a + v);
                }
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = W^T * dY
                if self.is_pointwise() {
                    T::gemm(
                        kk,
                        self.out_channels,
                        spatial,
                        T::one(),
                        &self.weight.value,
                        1,
                        kk,
                        g,
                        spatial,
                        1,
                        T::zero(),
                        dx.item_mut(i),
                        spatial,
                        1,
                    );
                } else {
                    T::gemm(
                        kk,
                        self.out_channels,
                        spatial,
                        T::one(),
                        &self.weight.value,
                        1,
                        kk,
                        g,
                        spatial,
                        1,
                        T::zero(),
                        &mut dcols,
                        spatial,
                        1,
                    );
                    self.col2im(&dcols, x.h, x.w, dx.item_mut(i));
                }
            }
        }
        dx
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Param::len)
    }
}
