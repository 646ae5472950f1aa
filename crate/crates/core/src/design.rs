//! Design matrix of the log-linearized signal model and the forward model.

use crate::error::{DtiError, Result};
use crate::linalg::singular_values;
use crate::scalar::{norm3, Real};
use crate::scheme::GradientScheme;
use crate::tensor::DiffusionTensor;

const UNIT_TOLERANCE: f64 = 1e-6;

/// One row `[b gx^2, b gy^2, b gz^2, 2b gx gy, 2b gx gz, 2b gy gz]` per
/// diffusion-weighted measurement, in scheme order, so that
/// `B * D = -ln(s / s0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<T> {
    rows: Vec<[T; 6]>,
    source_index: Vec<usize>,
    condition: T,
}

pub fn design_row<T: Real>(g: &[T; 3], b: T) -> [T; 6] {
    let two_b = T::lit(2.0) * b;
    [
        b * g[0] * g[0],
        b * g[1] * g[1],
        b * g[2] * g[2],
        two_b * g[0] * g[1],
        two_b * g[0] * g[2],
        two_b * g[1] * g[2],
    ]
}

pub fn build_design_matrix<T: Real>(scheme: &GradientScheme<T>) -> Result<DesignMatrix<T>> {
    let mut rows = Vec::new();
    let mut source_index = Vec::new();
    for (i, m) in scheme.entries().iter().enumerate() {
        if !m.is_weighted() {
            continue;
        }
        let n = norm3(&m.direction);
        if (n - T::one()).abs() > T::lit(UNIT_TOLERANCE) {
            return Err(DtiError::InvalidScheme(format!("entry {i}: direction norm {n}")));
        }
        rows.push(design_row(&m.direction, m.bvalue));
        source_index.push(i);
    }
    let condition = if rows.len() >= 6 {
        let sv = singular_values(&rows);
        if sv[5] > T::zero() {
            sv[0] / sv[5]
        } else {
            T::infinity()
        }
    } else {
        T::infinity()
    };
    Ok(DesignMatrix {
        rows,
        source_index,
        condition,
    })
}

impl<T: Real> DesignMatrix<T> {
    pub fn rows(&self) -> &[[T; 6]] {
        &self.rows
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    /// Scheme position of each row.
    pub fn source_index(&self) -> &[usize] {
        &self.source_index
    }

    /// Ratio of extreme singular values (infinite with fewer than six rows).
    pub fn condition_number(&self) -> T {
        self.condition
    }

    /// Fails unless the matrix supports a six-parameter fit.
    pub fn ensure_fittable(&self) -> Result<()> {
        if self.rows.len() < 6 {
            return Err(DtiError::InsufficientMeasurements(self.rows.len()));
        }
        if !(self.condition <= T::singular_condition()) {
            return Err(DtiError::SingularDesign {
                condition: self.condition.as_f64(),
            });
        }
        Ok(())
    }

    /// `B * D`, the negated log attenuation of every weighted measurement.
    pub fn apply(&self, tensor: &DiffusionTensor<T>) -> Vec<T> {
        let d = tensor.to_array();
        self.rows
            .iter()
            .map(|r| r.iter().zip(&d).map(|(&a, &b)| a * b).sum())
            .collect()
    }
}

/// Noiseless signals `s0 * exp(-B_i D)` for every weighted measurement.
pub fn predict_signals<T: Real>(tensor: &DiffusionTensor<T>, scheme: &GradientScheme<T>, s0: T) -> Vec<T> {
    scheme
        .entries()
        .iter()
        .filter(|m| m.is_weighted())
        .map(|m| {
            let row = design_row(&m.direction, m.bvalue);
            let att: T = row.iter().zip(tensor.to_array()).map(|(&a, b)| a * b).sum();
            s0 * (-att).exp()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_axis_row() {
        assert_eq!(design_row(&[1.0, 0.0, 0.0], 1000.0), [1000.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn diagonal_direction_row() {
        let h = 0.5f64.sqrt();
        let r = design_row(&[h, h, 0.0], 1000.0);
        let want = [500.0, 500.0, 0.0, 1000.0, 0.0, 0.0];
        for k in 0..6 {
            assert!((r[k] - want[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn row_diagonal_sums_to_b() {
        let s = GradientScheme::<f64>::uniform(30, 1000.0);
        let b = build_design_matrix(&s).unwrap();
        assert_eq!(b.nrows(), 30);
        for r in b.rows() {
            assert!((r[0] + r[1] + r[2] - 1000.0).abs() < 1e-9 * 1000.0);
        }
    }

    #[test]
    fn rows_invariant_to_direction_sign() {
        let g = [0.3f64, -0.5, 0.812403840463596];
        assert_eq!(design_row(&g, 700.0), design_row(&g.map(|x| -x), 700.0));
    }

    #[test]
    fn predictions() {
        let scheme = GradientScheme::<f64>::skare6(1000.0);
        for s in predict_signals(&DiffusionTensor::isotropic(1e-3), &scheme, 1.0) {
            assert!((s - (-1.0f64).exp()).abs() < 1e-12);
        }
        assert!(predict_signals(&DiffusionTensor::zero(), &scheme, 3.0).iter().all(|&s| s == 3.0));
        let x = GradientScheme::<f64>::new(&[[1.0, 0.0, 0.0]], &[1000.0]).unwrap();
        let s = predict_signals(&DiffusionTensor::diagonal(2e-3, 1e-3, 1e-3), &x, 100.0);
        assert!((s[0] - 13.533528323661270).abs() < 1e-9);
    }

    #[test]
    fn duplicated_direction_is_singular() {
        let mut dirs: Vec<[f64; 3]> = SKARE.to_vec();
        dirs[5] = dirs[4];
        let s = GradientScheme::new(&dirs, &[1000.0; 6]).unwrap();
        let b = build_design_matrix(&s).unwrap();
        assert!(matches!(b.ensure_fittable(), Err(DtiError::SingularDesign { .. })));
    }

    #[test]
    fn too_few_rows() {
        let s = GradientScheme::new(&SKARE[..5], &[1000.0; 5]).unwrap();
        let b = build_design_matrix(&s).unwrap();
        assert!(matches!(b.ensure_fittable(), Err(DtiError::InsufficientMeasurements(5))));
    }

    const SKARE: [[f64; 3]; 6] = crate::scheme::SKARE6_DIRECTIONS;
}
