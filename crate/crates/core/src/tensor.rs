//! The symmetric 3x3 diffusion tensor and its six-element vector form.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Symmetric diffusion tensor in mm^2/s.
///
/// The vectorized order used everywhere in this crate (design-matrix
/// columns, volume channels, network outputs) is
/// `[Dxx, Dyy, Dzz, Dxy, Dxz, Dyz]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DiffusionTensor<T> {
    pub d_xx: T,
    pub d_yy: T,
    pub d_zz: T,
    pub d_xy: T,
    pub d_xz: T,
    pub d_yz: T,
}

impl<T: Real> DiffusionTensor<T> {
    pub fn new(d_xx: T, d_yy: T, d_zz: T, d_xy: T, d_xz: T, d_yz: T) -> Self {
        Self {
            d_xx,
            d_yy,
            d_zz,
            d_xy,
            d_xz,
            d_yz,
        }
    }

    pub fn zero() -> Self {
        Self::from_array([T::zero(); 6])
    }

    pub fn isotropic(d: T) -> Self {
        Self::diagonal(d, d, d)
    }

    pub fn diagonal(xx: T, yy: T, zz: T) -> Self {
        Self::new(xx, yy, zz, T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(v: [T; 6]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn to_array(&self) -> [T; 6] {
        [self.d_xx, self.d_yy, self.d_zz, self.d_xy, self.d_xz, self.d_yz]
    }

    pub fn to_matrix(&self) -> [[T; 3]; 3] {
        [
            [self.d_xx, self.d_xy, self.d_xz],
            [self.d_xy, self.d_yy, self.d_yz],
            [self.d_xz, self.d_yz, self.d_zz],
        ]
    }

    /// Symmetrizes by averaging the off-diagonal pairs.
    pub fn from_matrix(m: &[[T; 3]; 3]) -> Self {
        let half = T::lit(0.5);
        Self::new(
            m[0][0],
            m[1][1],
            m[2][2],
            half * (m[0][1] + m[1][0]),
            half * (m[0][2] + m[2][0]),
            half * (m[1][2] + m[2][1]),
        )
    }

    /// `sum_k lambda_k v_k v_k^T`, with `vectors[r][k]` the r-th component of
    /// eigenvector k.
    pub fn from_eigen(values: &[T; 3], vectors: &[[T; 3]; 3]) -> Self {
        let mut m = [[T::zero(); 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| values[k] * vectors[r][k] * vectors[c][k]).sum();
            }
        }
        Self::from_matrix(&m)
    }

    /// Axially symmetric tensor `perp * I + (axial - perp) * u u^T`.
    pub fn axial(axial: T, perp: T, direction: &[T; 3]) -> Self {
        let mut m = [[T::zero(); 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let id = if r == c { perp } else { T::zero() };
                m[r][c] = id + (axial - perp) * direction[r] * direction[c];
            }
        }
        Self::from_matrix(&m)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    pub fn trace(&self) -> T {
        self.d_xx + self.d_yy + self.d_zz
    }

    /// Frobenius norm of the full 3x3 matrix (off-diagonals counted twice).
    pub fn frobenius_norm(&self) -> T {
        let two = T::lit(2.0);
        (self.d_xx * self.d_xx
            + self.d_yy * self.d_yy
            + self.d_zz * self.d_zz
            + two * (self.d_xy * self.d_xy + self.d_xz * self.d_xz + self.d_yz * self.d_yz))
            .sqrt()
    }

    pub fn sub(&self, other: &Self) -> Self {
        let (a, b) = (self.to_array(), other.to_array());
        Self::from_array(std::array::from_fn(|i| a[i] - b[i]))
    }

    pub fn scale(&self, k: T) -> Self {
        Self::from_array(self.to_array().map(|x| x * k))
    }

    /// `g^T D g`.
    pub fn quadratic_form(&self, g: &[T; 3]) -> T {
        let m = self.to_matrix();
        (0..3).map(|r| (0..3).map(|c| g[r] * m[r][c] * g[c]).sum::<T>()).sum()
    }

    /// `R D R^T` for a rotation (or any) 3x3 matrix `R`.
    pub fn rotated(&self, rot: &[[T; 3]; 3]) -> Self {
        let m = self.to_matrix();
        let mut out = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = T::zero();
                for k in 0..3 {
                    for l in 0..3 {
                        acc = acc + rot[i][k] * m[k][l] * rot[j][l];
                    }
                }
                out[i][j] = acc;
            }
        }
        Self::from_matrix(&out)
    }

    pub fn cast<U: Real>(&self) -> DiffusionTensor<U> {
        DiffusionTensor::from_array(self.to_array().map(|x| U::lit(x.as_f64())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_order_matches_matrix() {
        let t = DiffusionTensor::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        let m = t.to_matrix();
        assert_eq!(m[0][1], 4.0);
        assert_eq!(m[0][2], 5.0);
        assert_eq!(m[1][2], 6.0);
        assert_eq!(DiffusionTensor::from_matrix(&m), t);
    }

    #[test]
    fn axial_along_x_is_diagonal() {
        let t = DiffusionTensor::axial(3.0, 1.0, &[1.0, 0.0, 0.0]);
        assert_eq!(t, DiffusionTensor::diagonal(3.0, 1.0, 1.0));
    }

    #[test]
    fn quadratic_form_of_isotropic() {
        let t = DiffusionTensor::isotropic(2.0);
        let g = [0.6, 0.8, 0.0];
        assert!((t.quadratic_form(&g) - 2.0f64).abs() < 1e-15);
    }
}
