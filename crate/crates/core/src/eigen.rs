//! Eigendecomposition of diffusion tensors and the scalar maps derived from
//! it: fractional anisotropy, mean diffusivity, principal direction.

use serde::{Deserialize, Serialize};

use crate::error::{DtiError, Result};
use crate::linalg::jacobi_symmetric;
use crate::scalar::{dot3, norm3, Real};
use crate::tensor::DiffusionTensor;

pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 50;

/// Eigenvalues in descending order, paired with unit eigenvectors:
/// `vectors[k]` belongs to `values[k]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem<T> {
    pub values: [T; 3],
    pub vectors: [[T; 3]; 3],
}

impl<T: Real> EigenSystem<T> {
    /// Direction of strongest diffusion.
    pub fn principal(&self) -> [T; 3] {
        self.vectors[0]
    }

    pub fn reconstruct(&self) -> DiffusionTensor<T> {
        // from_eigen wants vectors as columns
        let mut cols = [[T::zero(); 3]; 3];
        for (k, v) in self.vectors.iter().enumerate() {
            for r in 0..3 {
                cols[r][k] = v[r];
            }
        }
        DiffusionTensor::from_eigen(&self.values, &cols)
    }

    pub fn min_value(&self) -> T {
        self.values[2]
    }
}

/// Cyclic Jacobi eigendecomposition, eigenvalues sorted descending.
/// Repeated eigenvalues yield an arbitrary orthonormal basis of their
/// eigenspace.
pub fn eigendecompose<T: Real>(tensor: &DiffusionTensor<T>) -> EigenSystem<T> {
    let e = jacobi_symmetric(tensor.to_matrix(), T::lit(JACOBI_TOLERANCE), JACOBI_MAX_SWEEPS);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        e.values[b]
            .partial_cmp(&e.values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.map(|k| e.values[k]);
    let vectors = order.map(|k| [e.vectors[0][k], e.vectors[1][k], e.vectors[2][k]]);
    EigenSystem { values, vectors }
}

/// `sqrt(3/2) * |lambda - mean| / |lambda|`, clamped to `[0, 1]`. The zero
/// tensor has FA 0.
pub fn fractional_anisotropy<T: Real>(eigs: &EigenSystem<T>) -> T {
    fa_from_values(&eigs.values)
}

pub fn fa_from_values<T: Real>(l: &[T; 3]) -> T {
    let norm = norm3(l);
    if norm == T::zero() || !norm.is_finite() {
        return T::zero();
    }
    let mean = (l[0] + l[1] + l[2]) / T::lit(3.0);
    let dev = [l[0] - mean, l[1] - mean, l[2] - mean];
    let fa = T::lit(1.5).sqrt() * norm3(&dev) / norm;
    fa.max(T::zero()).min(T::one())
}

pub fn mean_diffusivity<T: Real>(eigs: &EigenSystem<T>) -> T {
    (eigs.values[0] + eigs.values[1] + eigs.values[2]) / T::lit(3.0)
}

/// Angle in degrees between two axes, ignoring the sign of either vector.
/// Inputs are normalized first; zero or non-finite vectors are rejected.
pub fn angular_error<T: Real>(v1: &[T; 3], v2: &[T; 3]) -> Result<T> {
    let (n1, n2) = (norm3(v1), norm3(v2));
    for (n, name) in [(n1, "first"), (n2, "second")] {
        if !(n > T::zero()) || !n.is_finite() {
            return Err(DtiError::InvalidVector(format!("{name} vector has norm {n}")));
        }
    }
    let cos = (dot3(v1, v2) / (n1 * n2)).abs().min(T::one());
    Ok(cos.acos().to_degrees())
}
