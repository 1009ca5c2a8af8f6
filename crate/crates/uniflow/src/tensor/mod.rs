//! Dense 4-D tensors in batch x channel x height x width layout, plus the
//! recording tape that gives them reverse-mode gradients.
//!
//! Everything is 64-bit: the gradient audits in this crate compare reverse-mode
//! results against central finite differences at 1e-4 relative tolerance, which
//! is not reachable in f32, and at desk scale the memory cost is irrelevant.

mod graph;
mod ops;

pub mod check;

pub use graph::{Graph, Padding, PointwiseKind, Val};

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Extents of a 4-D tensor: (batch, channels, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Flat index of element (n, c, h, w) in row-major N,C,H,W order.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c() + c) * self.h() + h) * self.w() + w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n(), self.c(), self.h(), self.w())
    }
}

/// Dense 4-D array of f64 with optional gradient tracking.
///
/// `grad` is present iff `requires_grad`; it accumulates across backward
/// passes until [`Tensor::zero_grad`] is called.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            data: vec![0.0; shape.numel()],
            shape,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            data: vec![value; shape.numel()],
            shape,
            requires_grad: false,
            grad: None,
        }
    }

    /// Single-element tensor of shape 1x1x1x1.
    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    /// I.i.d. normal entries with the given std, from a seeded stream.
    pub fn randn(shape: Shape, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..shape.numel()).map(|_| std * normal(rng)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform entries in [lo, hi).
    pub fn rand_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Enable gradient tracking; allocates a zeroed grad buffer.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add `delta` into the grad buffer (allocating it if needed).
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = value;
    }

    /// Elementwise clamp into [lo, hi]; used at image export.
    pub fn clamped(&self, lo: f64, hi: f64) -> Tensor {
        let mut out = self.clone();
        out.requires_grad = false;
        out.grad = None;
        for v in out.data.iter_mut() {
            *v = v.clamp(lo, hi);
        }
        out
    }

    /// Mean of |self - other| over all elements.
    pub fn l1_to(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "l1 distance needs equal shapes, got {} vs {}",
                self.shape, other.shape
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
        let s = first.shape();
        let mut data = Vec::with_capacity(items.len() * s.numel());
        for t in items {
            if t.shape() != s {
                return Err(Error::Shape(format!(
                    "batch items disagree: {} vs {}",
                    t.shape(),
                    s
                )));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(Shape::new(items.len() * s.n(), s.c(), s.h(), s.w()), data)
    }

    /// Extract sample `n` as a batch-1 tensor.
    pub fn slice_batch(&self, n: usize) -> Tensor {
        let s = self.shape;
        let per = s.c() * s.h() * s.w();
        let data = self.data[n * per..(n + 1) * per].to_vec();
        Tensor {
            shape: Shape::new(1, s.c(), s.h(), s.w()),
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

/// Standard normal draw via Box-Muller; deterministic per rng stream.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
