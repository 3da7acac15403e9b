//! Dense 64-bit tensors, a reverse-mode tape and a seeded random source.
//!
//! [`Tensor`] is a plain value: a shape plus row-major data. Differentiation
//! happens on a [`Tape`], which records every operation applied to its
//! [`Var`] handles and replays them backwards in [`Tape::backward`].

mod conv;
mod gradcheck;
mod rng;
mod tape;

pub use conv::{conv_output_extent, ConvGeometry, PoolGeometry};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use rng::{derive_seed, SeededRng, RNG_ALGORITHM};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Initialisation rule for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Normal { mean: f64, std: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if let Some(bad) = shape.iter().position(|&e| e == 0) {
        return Err(Error::InvalidShape(format!(
            "extent {bad} of {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel = check_extents(shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        let numel = check_extents(shape)?;
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Constant(c) => vec![c; numel],
            Init::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::Config(format!(
                        "uniform init needs lo < hi, got [{lo}, {hi}]"
                    )));
                }
                let mut rng = SeededRng::new(seed);
                (0..numel).map(|_| rng.uniform_in(lo, hi)).collect()
            }
            Init::Normal { mean, std, seed } => {
                if !(std >= 0.0) {
                    return Err(Error::Config(format!(
                        "normal init needs std >= 0, got {std}"
                    )));
                }
                let mut rng = SeededRng::new(seed);
                (0..numel).map(|_| rng.normal(mean, std)).collect()
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Zeros)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::create(shape, Init::Constant(value))
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor over `values`. Panics on an empty slice.
    pub fn from_slice(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "from_slice needs at least one value");
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Shape-preserving zero tensor, used for gradient buffers.
    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel = check_extents(shape)?;
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of a multi-dimensional coordinate in row-major order.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| acc * e + i)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack of {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }
}

/// Right-aligned unit-axis broadcast check: every axis of `rhs` either matches
/// the corresponding axis of `lhs` or is 1.
pub(crate) fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len()
        && rhs
            .iter()
            .rev()
            .zip(lhs.iter().rev())
            .all(|(&r, &l)| r == l || r == 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_zeros_and_constants() {
        let z = Tensor::create(&[2, 2], Init::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::create(&[3], Init::Constant(1.0)).unwrap();
        assert_eq!(c.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn seeded_inits_are_reproducible() {
        let init = Init::Uniform {
            lo: 0.0,
            hi: 1.0,
            seed: 7,
        };
        let a = Tensor::create(&[4], init).unwrap();
        let b = Tensor::create(&[4], init).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(matches!(
            Tensor::create(&[2, 0], Init::Zeros),
            Err(Error::InvalidShape(_))
        ));
        assert!(Tensor::create(&[2], Init::Uniform { lo: 1.0, hi: 1.0, seed: 0 }).is_err());
        assert!(Tensor::create(&[2], Init::Normal { mean: 0.0, std: -1.0, seed: 0 }).is_err());
    }

    #[test]
    fn broadcast_rule() {
        assert!(broadcastable(&[2, 3, 4, 4], &[2, 3, 1, 1]));
        assert!(broadcastable(&[5, 3], &[3]));
        assert!(!broadcastable(&[5, 3], &[2]));
        assert!(!broadcastable(&[3], &[2, 3]));
    }
}
