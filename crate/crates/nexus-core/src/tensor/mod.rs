//! Dense row-major tensors over `f32` or `f64`.
//!
//! The same model code runs in both precisions: `f32` for training runs,
//! `f64` when checking gradients against finite differences. Everything is
//! generic over [`Scalar`] so the precision switch never forks the math.

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub mod tape;

pub use tape::{Tape, ValueId};

/// Element type contract for tensors. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Serialize
    + DeserializeOwned
{
    const ZERO: Self;
    const ONE: Self;

    /// Number of bits in the significand plus sign, for error messages only.
    const BITS: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn is_finite(self) -> bool;

    fn maximum(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $bits:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const BITS: usize = $bits;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_f32(x: f32) -> Self {
                x as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }

            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn sin(self) -> Self {
                self.sin()
            }
            #[inline]
            fn cos(self) -> Self {
                self.cos()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn powf(self, e: Self) -> Self {
                self.powf(e)
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32, 32);
impl_scalar!(f64, 64);

/// Dense row-major tensor. `grad`, when present, always matches `data` in
/// length; `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape,
                reason: format!("shape wants {numel} elements, data has {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::ZERO; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init via Box-Muller so the draw sequence is identical for
    /// every `Scalar` type given the same RNG stream.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            let r = (-2.0 * (1.0 - u1).ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            data.push(T::from_f64(r * c * std));
            if data.len() < numel {
                data.push(T::from_f64(r * s * std));
            }
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Overwrites the grad buffer. Length must match; tape-internal use only.
    pub(crate) fn set_grad(&mut self, g: Vec<T>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    /// Adds `delta` into the grad buffer, allocating zeros on first use.
    /// Accumulation instead of overwrite: a tensor used twice in a graph
    /// receives the sum of both contributions.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::ZERO; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    /// Size of the trailing dimension; 1 for rank-0 style scalars.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        let cols = self.last_dim().max(1);
        self.data.chunks_exact(cols)
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                shape: self.shape.clone(),
                reason: "expected exactly one element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Elementwise mean of same-shaped tensors. Summation order follows the
    /// argument order, so the result is reproducible.
    pub fn mean_of(tensors: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::invalid("mean_of: empty tensor list"))?;
        // The mean of identical inputs is that input exactly; summing first
        // would round (3x + division is not bit-exact), so short-circuit.
        if tensors[1..]
            .iter()
            .all(|t| t.shape == first.shape && t.data == first.data)
        {
            return Ok((*first).clone());
        }
        let mut acc = vec![T::ZERO; first.numel()];
        for t in tensors {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "mean_of",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            for (a, x) in acc.iter_mut().zip(&t.data) {
                *a += *x;
            }
        }
        let inv = T::from_f64(1.0 / tensors.len() as f64);
        for a in acc.iter_mut() {
            *a *= inv;
        }
        Tensor::from_vec(first.shape.clone(), acc)
    }

    /// `(1 - lambda) * a + lambda * b`, elementwise.
    pub fn lerp(a: &Tensor<T>, b: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                op: "lerp",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let lam = T::from_f64(lambda);
        let one_minus = T::ONE - lam;
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| one_minus * x + lam * y)
            .collect();
        Tensor::from_vec(a.shape.clone(), data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Top-k selection per row of the trailing dimension.
#[derive(Clone, Debug)]
pub struct TopK<T> {
    /// Row-major `[rows, k]` expert indices, descending by score.
    pub indices: Vec<u32>,
    /// Scores at those indices, same layout.
    pub values: Tensor<T>,
}

/// Selects the `k` largest entries along the last axis. Ties keep the lower
/// index; with `k == n` this is a full descending argsort.
pub fn top_k<T: Scalar>(t: &Tensor<T>, k: usize) -> Result<TopK<T>> {
    let n = t.last_dim();
    if t.rank() == 0 || n == 0 {
        return Err(Error::InvalidShape {
            op: "top_k",
            shape: t.shape().to_vec(),
            reason: "needs a non-empty trailing axis".into(),
        });
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "top_k: k={k} out of range for axis of size {n}"
        )));
    }
    let rows = t.numel() / n;
    let mut indices = Vec::with_capacity(rows * k);
    let mut values = Vec::with_capacity(rows * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for row in t.data().chunks_exact(n) {
        order.clear();
        order.extend(0..n);
        order.sort_by(|&i, &j| {
            row[j]
                .partial_cmp(&row[i])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        for &i in &order[..k] {
            indices.push(i as u32);
            values.push(row[i]);
        }
    }
    let mut out_shape = t.shape().to_vec();
    *out_shape.last_mut().unwrap() = k;
    Ok(TopK {
        indices,
        values: Tensor::from_vec(out_shape, values)?,
    })
}
