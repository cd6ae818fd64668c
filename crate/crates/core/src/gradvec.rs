//! Flat per-layer gradient vectors and the geometry the surgery strategies
//! need: inner products, 2-norms and angles.
//!
//! Flattening is row-major (C order). A `GradientVector` always remembers the
//! shape it came from so it can be reshaped back after surgery.

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use thiserror::Error;

/// 2-norm below which a gradient is treated as zero and its direction as
/// undefined.
pub const TOL_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("non-finite gradient entry {value} in layer `{layer}` at flat index {index}")]
    NonFinite {
        layer: String,
        index: usize,
        value: f64,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero dimension")]
    ZeroDimension(Vec<usize>),
    #[error("gradient lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

/// A layer gradient flattened to one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    shape: Vec<usize>,
}

impl GradientVector {
    /// Builds a vector from already-flat values. `shape` must multiply out to
    /// `values.len()` and every value must be finite.
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Self, GradError> {
        Self::with_layer("<unnamed>", values, shape)
    }

    /// Same as [`GradientVector::new`] but errors name `layer`.
    pub fn with_layer(layer: &str, values: Vec<f64>, shape: Vec<usize>) -> Result<Self, GradError> {
        if shape.contains(&0) {
            return Err(GradError::ZeroDimension(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(GradError::ShapeMismatch {
                shape,
                expected,
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(GradError::NonFinite {
                layer: layer.to_string(),
                index,
                value,
            });
        }
        Ok(Self { values, shape })
    }

    /// One-dimensional vector with shape `[len]`.
    pub fn from_slice(values: &[f64]) -> Result<Self, GradError> {
        let len = values.len();
        Self::new(values.to_vec(), vec![len])
    }

    pub fn zeros_like(other: &GradientVector) -> Self {
        Self {
            values: vec![0.0; other.values.len()],
            shape: other.shape.clone(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn dot(&self, other: &GradientVector) -> Result<f64, GradError> {
        check_len(self, other)?;
        Ok(dot(&self.values, &other.values))
    }

    /// `self * factor`, keeping the shape.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            shape: self.shape.clone(),
        }
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, factor: f64, other: &GradientVector) -> Result<Self, GradError> {
        check_len(self, other)?;
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + factor * b)
                .collect(),
            shape: self.shape.clone(),
        })
    }

    pub fn add(&self, other: &GradientVector) -> Result<Self, GradError> {
        check_len(self, other)?;
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
            shape: self.shape.clone(),
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.norm() < TOL_NORM
    }
}

fn check_len(a: &GradientVector, b: &GradientVector) -> Result<(), GradError> {
    if a.len() != b.len() {
        return Err(GradError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-major linearization of `tensor`. `layer` is only used in errors.
pub fn flatten(layer: &str, tensor: ArrayViewD<'_, f64>) -> Result<GradientVector, GradError> {
    let shape = tensor.shape().to_vec();
    // `iter` walks in logical row-major order whatever the memory layout is.
    let values: Vec<f64> = tensor.iter().copied().collect();
    GradientVector::with_layer(layer, values, shape)
}

/// Inverse of [`flatten`].
pub fn reshape(g: &GradientVector) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&g.shape), g.values.clone())
        .expect("shape invariant guarantees a valid reshape")
}

/// Angle between two gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleReport {
    /// Angle in `[0, π]`, absent when either vector is degenerate.
    pub phi: Option<f64>,
    /// Cosine of the angle, clamped to `[-1, 1]`. Zero when degenerate.
    pub cos_phi: f64,
    pub degenerate: bool,
}

impl AngleReport {
    /// Negative inner product, i.e. `phi > π/2`.
    pub fn is_conflicting(&self) -> bool {
        !self.degenerate && self.cos_phi < 0.0
    }
}

/// Computes the angle between `a` and `b`.
///
/// The angle itself is evaluated as `2·atan2(‖â − b̂‖, ‖â + b̂‖)` on the unit
/// vectors, which stays accurate near 0 and π where `acos` of the cosine
/// loses half its digits. The reported cosine is the clamped
/// `a·b / (‖a‖‖b‖)`.
pub fn angle_between(a: &GradientVector, b: &GradientVector) -> Result<AngleReport, GradError> {
    check_len(a, b)?;
    let na = a.norm();
    let nb = b.norm();
    if na < TOL_NORM || nb < TOL_NORM {
        return Ok(AngleReport {
            phi: None,
            cos_phi: 0.0,
            degenerate: true,
        });
    }
    let cos_phi = (dot(&a.values, &b.values) / (na * nb)).clamp(-1.0, 1.0);
    Ok(AngleReport {
        phi: Some(unit_angle(&a.values, na, &b.values, nb)),
        cos_phi,
        degenerate: false,
    })
}

pub(crate) fn unit_angle(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}
