//! Minimal CPU tensor engine: NCHW tensors, convolution via im2col + GEMM,
//! batch normalization and the element-wise pieces the detector needs, each
//! with a hand-written backward pass.

mod batchnorm;
mod conv;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use batchnorm::{BatchNorm, BnStats};
pub use conv::Conv2d;

/// Scalar type the engine runs on (`f32` for training, `f64` for gradient checks).
pub trait Real: num_traits::Float + Default + Send + Sync + Debug + AddAssign + SubAssign + MulAssign + 'static {
    /// `C = alpha * A * B + beta * C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand {what} too small: need index {last}, have {len}");
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                check_extent(a.len(), m, k, rsa, csa, "A");
                check_extent(b.len(), k, n, rsb, csb, "B");
                check_extent(c.len(), m, n, rsc, csc, "C");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    gemm::gemm(
                        m,
                        n,
                        k,
                        c.as_mut_ptr(),
                        csc as isize,
                        rsc as isize,
                        beta != 0.0,
                        a.as_ptr(),
                        csa as isize,
                        rsa as isize,
                        b.as_ptr(),
                        csb as isize,
                        rsb as isize,
                        beta,
                        alpha,
                        false,
                        false,
                        false,
                        gemm::Parallelism::None,
                    )
                }
            }

            fn of(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![T::zero(); n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length does not match shape");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements belonging to batch item `i`.
    pub fn item(&self, i: usize) -> &[T] {
        let len = self.c * self.plane();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.c * self.plane();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert!(self.same_shape(other), "add of mismatched shapes {:?} vs {:?}", self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu<T: Real>(x: &mut Tensor<T>) {
    let slope = T::of(LEAKY_SLOPE);
    for v in &mut x.data {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward of [`leaky_relu`] given its output (the sign is preserved).
pub fn leaky_relu_backward<T: Real>(out: &Tensor<T>, grad: &mut Tensor<T>) {
    let slope = T::of(LEAKY_SLOPE);
    for (g, &y) in grad.data.iter_mut().zip(&out.data) {
        if y < T::zero() {
            *g *= slope;
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.shape();
    let mut out = Tensor::zeros(n, c, 2 * h, 2 * w);
    for nc in 0..n * c {
        let src = &x.data[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        for y in 0..2 * h {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xo, d) in dst[y * 2 * w..(y + 1) * 2 * w].iter_mut().enumerate() {
                *d = row[xo / 2];
            }
        }
    }
    out
}

/// Backward of [`upsample2`]: sum each 2x2 block.
pub fn upsample2_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = grad.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(n, c, h, w);
    for nc in 0..n * c {
        let src = &grad.data[nc * h2 * w2..(nc + 1) * h2 * w2];
        let dst = &mut out.data[nc * h * w..(nc + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    out
}

/// Concatenate along channels. All inputs share `n`, `h`, `w`.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    for p in parts {
        assert!(p.n == n && p.h == h && p.w == w, "concat of mismatched spatial shapes");
    }
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(i));
        }
    }
    Tensor::from_vec(n, c, h, w, data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Real>(x: &Tensor<T>, sizes: &[usize]) -> Vec<Tensor<T>> {
    assert_eq!(sizes.iter().sum::<usize>(), x.c);
    let plane = x.plane();
    let mut parts: Vec<Tensor<T>> = sizes.iter().map(|&c| Tensor::zeros(x.n, c, x.h, x.w)).collect();
    for i in 0..x.n {
        let src = x.item(i);
        let mut offset = 0;
        for (p, &c) in parts.iter_mut().zip(sizes) {
            p.item_mut(i).copy_from_slice(&src[offset * plane..(offset + c) * plane]);
            offset += c;
        }
    }
    parts
}
