//! Dense tensors, parameters and the reverse-mode tape.
//!
//! Activations use the `(N, C, H, W)` layout throughout. Storage is a flat,
//! contiguous, row-major `Vec<T>` where `T` is `f32` (training default) or
//! `f64` (verification suites).

mod param;
pub(crate) mod rng;
pub(crate) mod scalar;
mod tape;

pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use rng::{derive_seed, seeded_rng, FpRng};
pub use scalar::{DType, Scalar};
pub use tape::{BackwardFn, Tape, Var};

use std::fmt;

use rand::RngExt;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered list of positive extents.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub(crate) Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::Shape("a shape needs at least one extent".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("extent {pos} of {dims:?} is zero")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Size(dims.clone()))?;
        Ok(Shape(dims))
    }

    /// Shape of a scalar (one element).
    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Splits a rank-4 shape into `(n, c, h, w)`.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("expected an (N, C, H, W) tensor, got {self}"))),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

impl TryFrom<&[usize]> for Shape {
    type Error = Error;
    fn try_from(dims: &[usize]) -> Result<Self> {
        Shape::new(dims.to_vec())
    }
}

/// Initial content for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Normal { mean: f64, std: f64, seed: u64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    pub(crate) shape: Shape,
    pub(crate) data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::Shape(format!(
                "{} values cannot fill shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        Self::new(Shape::new(dims.to_vec())?, data)
    }

    pub fn zeros(shape: &Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &Shape, value: T) -> Self {
        Tensor { shape: shape.clone(), data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    /// Creates a tensor with deterministic content: identical arguments give
    /// bitwise-identical tensors.
    pub fn create(dims: &[usize], fill: Fill) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        let n = shape.numel();
        let data = match fill {
            Fill::Zeros => vec![T::zero(); n],
            Fill::Ones => vec![T::one(); n],
            Fill::Constant(c) => vec![T::from_f64(c); n],
            Fill::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::Config(format!("uniform fill needs lo < hi, got [{lo}, {hi})")));
                }
                let mut rng = seeded_rng(seed, &[]);
                (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect()
            }
            Fill::Normal { mean, std, seed } => {
                let dist = Normal::new(mean, std)
                    .map_err(|e| Error::Config(format!("normal fill: {e}")))?;
                let mut rng = seeded_rng(seed, &[]);
                (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(Shape::new(dims.to_vec())?, self.data)
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data[..] {
            [v] => Ok(v),
            _ => Err(Error::Contract(format!("item() on a tensor of shape {}", self.shape))),
        }
    }

    /// Index of the first NaN/Inf element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Converts between precisions.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fill() {
        let t = Tensor::<f32>::create(&[1, 1, 2, 2], Fill::Zeros).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        assert_eq!(t.dims(), &[1, 1, 2, 2]);
    }

    #[test]
    fn constant_fill() {
        let t = Tensor::<f32>::create(&[2, 3, 1, 1], Fill::Constant(1.5)).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(t.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn seeded_fills_are_bitwise_reproducible() {
        let fill = Fill::Uniform { lo: -1.0, hi: 1.0, seed: 7 };
        let a = Tensor::<f32>::create(&[1, 1, 4, 4], fill).unwrap();
        let b = Tensor::<f32>::create(&[1, 1, 4, 4], fill).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.data().iter().all(|&v| (-1.0..1.0).contains(&v)));

        let other = Tensor::<f32>::create(&[1, 1, 4, 4], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 8 }).unwrap();
        assert_ne!(bits(&a), bits(&other));

        let n1 = Tensor::<f64>::create(&[64], Fill::Normal { mean: 0.0, std: 1.0, seed: 3 }).unwrap();
        let n2 = Tensor::<f64>::create(&[64], Fill::Normal { mean: 0.0, std: 1.0, seed: 3 }).unwrap();
        assert_eq!(n1, n2);
    }

    #[test]
    fn invalid_shapes() {
        assert!(matches!(Shape::new(vec![2, 0, 3]), Err(Error::Shape(_))));
        assert!(matches!(Shape::new(vec![usize::MAX, 3]), Err(Error::Size(_))));
        assert!(matches!(
            Tensor::<f32>::create(&[1 << 40, 1 << 40], Fill::Zeros),
            Err(Error::Size(_))
        ));
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn nchw_split() {
        let s = Shape::new(vec![2, 3, 4, 5]).unwrap();
        assert_eq!(s.nchw().unwrap(), (2, 3, 4, 5));
        assert!(Shape::new(vec![2, 3]).unwrap().nchw().is_err());
        assert_eq!(s.to_string(), "(2, 3, 4, 5)");
    }
}
