//! Similarity kernels used to weight neighborhoods when estimating per-point
//! covariances.
//!
//! The five variants are kept exactly in their published forms, including the
//! RBF variant that multiplies the squared distance by sigma instead of
//! dividing. The histogram-intersection kernel treats the two points as
//! 3-bin histograms and is the only one with a domain restriction (and the
//! only asymmetric one: the denominator is the first argument's mass).

use crate::types::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelDescriptor {
    /// exp(-||x - y||^2 * sigma)
    Rbf { sigma: f64 },
    /// exp(-||x - y||^2 / (2 sigma^2))
    Gaussian { sigma: f64 },
    /// (alpha <x, y> + c)^degree
    Polynomial { alpha: f64, c: f64, degree: u32 },
    /// sum_i min(x_i, y_i) / sum_i x_i, components must be non-negative
    HistogramIntersection,
    /// exp(-||x - y|| / sigma)
    Laplacian { sigma: f64 },
}

impl KernelDescriptor {
    /// Default choice: Laplacian with the voxel leaf size as length scale.
    pub fn default_for_leaf(leaf_size: f64) -> Self {
        KernelDescriptor::Laplacian { sigma: leaf_size }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelDescriptor::Rbf { .. } => "rbf",
            KernelDescriptor::Gaussian { .. } => "gaussian",
            KernelDescriptor::Polynomial { .. } => "polynomial",
            KernelDescriptor::HistogramIntersection => "histogram_intersection",
            KernelDescriptor::Laplacian { .. } => "laplacian",
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        match *self {
            KernelDescriptor::Rbf { sigma }
            | KernelDescriptor::Gaussian { sigma }
            | KernelDescriptor::Laplacian { sigma } => {
                if sigma > 0.0 && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(KernelError::InvalidParameter {
                        kernel: self.name(),
                        detail: format!("sigma must be positive and finite, got {sigma}"),
                    })
                }
            }
            KernelDescriptor::Polynomial { alpha, c, degree } => {
                if !alpha.is_finite() || !c.is_finite() {
                    return Err(KernelError::InvalidParameter {
                        kernel: self.name(),
                        detail: "alpha and c must be finite".into(),
                    });
                }
                if degree == 0 {
                    return Err(KernelError::InvalidParameter {
                        kernel: self.name(),
                        detail: "degree must be at least 1".into(),
                    });
                }
                Ok(())
            }
            KernelDescriptor::HistogramIntersection => Ok(()),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("{kernel} kernel: {detail}")]
    InvalidParameter { kernel: &'static str, detail: String },
    #[error("histogram intersection requires non-negative components, got {value}")]
    NegativeComponent { value: f64 },
    #[error("histogram intersection has zero mass in its first argument")]
    ZeroMass,
}

/// Evaluates `kernel` on a pair of points.
pub fn kernel_eval(kernel: &KernelDescriptor, x: &Point3, y: &Point3) -> Result<f64, KernelError> {
    match *kernel {
        KernelDescriptor::Rbf { sigma } => {
            let d2 = (x - y).norm_squared();
            Ok((-d2 * sigma).exp())
        }
        KernelDescriptor::Gaussian { sigma } => {
            let d2 = (x - y).norm_squared();
            Ok((-d2 / (2.0 * sigma * sigma)).exp())
        }
        KernelDescriptor::Polynomial { alpha, c, degree } => {
            let dot = x.coords.dot(&y.coords);
            Ok((alpha * dot + c).powi(degree as i32))
        }
        KernelDescriptor::HistogramIntersection => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..3 {
                let (a, b) = (x.coords[i], y.coords[i]);
                if a < 0.0 {
                    return Err(KernelError::NegativeComponent { value: a });
                }
                if b < 0.0 {
                    return Err(KernelError::NegativeComponent { value: b });
                }
                num += a.min(b);
                den += a;
            }
            if den == 0.0 {
                return Err(KernelError::ZeroMass);
            }
            Ok(num / den)
        }
        KernelDescriptor::Laplacian { sigma } => {
            let d = (x - y).norm();
            Ok((-d / sigma).exp())
        }
    }
}
