//! Diffusion-weighted volumes: synthesis from tensors, Rician corruption,
//! b0 normalization and voxel-wise classical fitting.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{build_design_matrix, predict_signals};
use crate::error::{DtiError, Result};
use crate::fitters::ClassicalMethod;
use crate::rng::{purpose, stream};
use crate::scalar::Real;
use crate::scheme::GradientScheme;
use crate::tensor::DiffusionTensor;
use crate::volume::Volume4D;

/// Normalized inputs are clamped to this interval.
pub const NORMALIZED_RANGE: (f64, f64) = (1e-6, 10.0);

/// One channel per scheme entry: unweighted entries carry `s0`, the others
/// the noiseless model signal.
pub fn synthesize_dwi<T: Real>(
    tensors: &Volume4D<T>,
    s0: &Volume4D<T>,
    scheme: &GradientScheme<T>,
) -> Result<Volume4D<T>> {
    if tensors.channels() != 6 || s0.channels() != 1 {
        return Err(DtiError::ShapeMismatch(format!(
            "expected 6 tensor channels and 1 s0 channel, got {} and {}",
            tensors.channels(),
            s0.channels()
        )));
    }
    tensors.ensure_same_grid(s0, "tensors vs s0")?;
    let m = scheme.len();
    let mut out = Volume4D::zeros(tensors.dims(), m).with_voxel_size(tensors.voxel_size());
    out.data_mut()
        .par_chunks_exact_mut(m)
        .zip(tensors.data().par_chunks_exact(6))
        .zip(s0.data().par_iter())
        .for_each(|((dst, t), &s)| {
            let weighted = predict_signals(&DiffusionTensor::from_slice(t), scheme, s);
            let mut w = weighted.into_iter();
            for (d, entry) in dst.iter_mut().zip(scheme.entries()) {
                *d = if entry.is_weighted() { w.next().unwrap() } else { s };
            }
        });
    Ok(out)
}

/// Noise level expressed as `20 log10(reference / sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// `f64::INFINITY` means no noise.
    pub snr_db: f64,
    pub reference_amplitude: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn sigma(&self) -> f64 {
        if self.snr_db == f64::INFINITY {
            0.0
        } else {
            self.reference_amplitude / 10f64.powf(self.snr_db / 20.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY || !(self.reference_amplitude > 0.0) {
            return Err(DtiError::InvalidParameter(format!("{self:?}")));
        }
        Ok(())
    }
}

/// `A -> sqrt((A + n1)^2 + n2^2)` with `n1, n2 ~ N(0, sigma^2)` drawn from a
/// per-voxel stream.
pub fn add_rician_noise<T: Real>(signals: &Volume4D<T>, noise: &NoiseSpec) -> Result<Volume4D<T>> {
    noise.validate()?;
    let sigma = noise.sigma();
    let mut out = signals.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let c = signals.channels();
    out.data_mut().par_chunks_exact_mut(c).enumerate().for_each(|(i, vox)| {
        let mut rng = stream(noise.seed, purpose::RICIAN, i as u64);
        for v in vox.iter_mut() {
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            let a = v.as_f64() + sigma * n1;
            let b = sigma * n2;
            *v = T::lit((a * a + b * b).sqrt());
        }
    });
    Ok(out)
}

/// Mean of the designated b0 channel over the foreground.
pub fn reference_amplitude<T: Real>(dwi: &Volume4D<T>, scheme: &GradientScheme<T>, mask: &[bool]) -> Result<f64> {
    let b0 = b0_channel(dwi, scheme)?;
    check_mask(dwi, mask)?;
    let (sum, n) = dwi
        .voxels()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v[b0].as_f64(), n + 1));
    if n == 0 {
        return Err(DtiError::InvalidParameter("empty foreground mask".into()));
    }
    Ok(sum / n as f64)
}

fn b0_channel<T: Real>(dwi: &Volume4D<T>, scheme: &GradientScheme<T>) -> Result<usize> {
    if dwi.channels() != scheme.len() {
        return Err(DtiError::ShapeMismatch(format!(
            "volume has {} channels, scheme has {} entries",
            dwi.channels(),
            scheme.len()
        )));
    }
    scheme
        .b0_index()
        .ok_or_else(|| DtiError::InvalidScheme("no unweighted measurement for normalization".into()))
}

fn check_mask<T>(vol: &Volume4D<T>, mask: &[bool]) -> Result<()>
where
    T: Real,
{
    if mask.len() != vol.voxel_count() {
        return Err(DtiError::ShapeMismatch(format!(
            "mask has {} voxels, volume {}",
            mask.len(),
            vol.voxel_count()
        )));
    }
    Ok(())
}

/// Weighted channels divided by the designated b0, clamped to
/// [`NORMALIZED_RANGE`]. Voxels with a non-positive b0 map to the lower
/// clamp.
pub fn normalize_dwi<T: Real>(dwi: &Volume4D<T>, scheme: &GradientScheme<T>) -> Result<Volume4D<T>> {
    let b0 = b0_channel(dwi, scheme)?;
    let weighted = scheme.weighted_indices();
    let (lo, hi) = (T::lit(NORMALIZED_RANGE.0), T::lit(NORMALIZED_RANGE.1));
    let mut out = Volume4D::zeros(dwi.dims(), weighted.len()).with_voxel_size(dwi.voxel_size());
    for (src, dst) in dwi.voxels().zip(out.data_mut().chunks_exact_mut(weighted.len())) {
        let s0 = src[b0];
        for (d, &c) in dst.iter_mut().zip(&weighted) {
            let r = if s0 > T::zero() { src[c] / s0 } else { lo };
            *d = r.max(lo).min(hi);
        }
    }
    Ok(out)
}

/// Fits every masked voxel with a classical method. Background voxels and
/// voxels whose fit fails are set to zero; the count of failed voxels is
/// returned alongside.
pub fn fit_volume<T: Real>(
    dwi: &Volume4D<T>,
    scheme: &GradientScheme<T>,
    method: ClassicalMethod,
    mask: Option<&[bool]>,
) -> Result<(Volume4D<T>, usize)> {
    let b0 = b0_channel(dwi, scheme)?;
    if let Some(m) = mask {
        check_mask(dwi, m)?;
    }
    let design = build_design_matrix(scheme)?;
    design.ensure_fittable()?;
    let weighted = scheme.weighted_indices();
    let mut out = Volume4D::zeros(dwi.dims(), 6).with_voxel_size(dwi.voxel_size());
    let failures: usize = out
        .data_mut()
        .par_chunks_exact_mut(6)
        .zip(dwi.data().par_chunks_exact(dwi.channels()))
        .enumerate()
        .map(|(i, (dst, src))| {
            if mask.is_some_and(|m| !m[i]) {
                return 0;
            }
            let signals: Vec<T> = weighted.iter().map(|&c| src[c]).collect();
            match method.fit(&signals, src[b0], &design) {
                Ok(fit) => {
                    dst.copy_from_slice(&fit.tensor.to_array());
                    0
                }
                Err(_) => 1,
            }
        })
        .sum();
    Ok((out, failures))
}
