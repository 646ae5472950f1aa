//! Paired (normalized signal patch, reference tensor patch) training data.

use serde::{Deserialize, Serialize};
use tensorformer_core::{
    add_rician_noise, fit_volume, generate_phantom, normalize_dwi, reference_amplitude, synthesize_dwi,
    ClassicalMethod, GradientScheme, NoiseSpec, PhantomSpec, Volume4D,
};

use crate::autodiff::Matrix;
use crate::error::{NnError, Result};
use crate::transformer::{extract_patches, TARGET_SCALE};

#[derive(Debug, Clone)]
pub struct PatchPair {
    /// Source phantom; validation splits never separate a group.
    pub group: usize,
    pub origin: [usize; 3],
    pub signals: Matrix,
    /// Reference tensors scaled by [`TARGET_SCALE`].
    pub target: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub pairs: Vec<PatchPair>,
}

/// Where the training labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum LabelMode {
    /// The phantom's own tensors.
    GroundTruth,
    /// CWLLS on a dense uniform scheme simulated at the given SNR.
    DenseCwlls { directions: usize, snr_db: f64 },
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Cuts matching patches out of a normalized signal volume and a tensor
    /// volume (in mm²/s).
    pub fn push_volume(
        &mut self,
        group: usize,
        signals: &Volume4D<f64>,
        tensors: &Volume4D<f64>,
        side: usize,
        stride: usize,
    ) -> Result<()> {
        signals.ensure_same_grid(tensors, "reference tensors")?;
        if tensors.channels() != 6 {
            return Err(NnError::Config(format!("reference has {} channels, expected 6", tensors.channels())));
        }
        let xs = extract_patches(signals, side, stride)?;
        let ys = extract_patches(tensors, side, stride)?;
        for (x, y) in xs.into_iter().zip(ys) {
            self.pairs.push(PatchPair {
                group,
                origin: x.origin,
                signals: x.features,
                target: y.features * TARGET_SCALE,
            });
        }
        Ok(())
    }

    /// Indices of (training, validation) pairs. Whole groups go to
    /// validation, taken from the highest group ids, until at least
    /// `val_fraction` of the pairs are held out. With a single group the
    /// last patches are held out instead.
    pub fn split(&self, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.pairs.len();
        let want = (val_fraction * n as f64).round() as usize;
        if want == 0 {
            return ((0..n).collect(), Vec::new());
        }
        let mut groups: Vec<usize> = self.pairs.iter().map(|p| p.group).collect();
        groups.sort_unstable();
        groups.dedup();
        if groups.len() < 2 {
            let cut = n - want.min(n - 1);
            return ((0..cut).collect(), (cut..n).collect());
        }
        let mut held = Vec::new();
        let mut count = 0;
        for &g in groups.iter().rev().take(groups.len() - 1) {
            if count >= want {
                break;
            }
            held.push(g);
            count += self.pairs.iter().filter(|p| p.group == g).count();
        }
        (0..n).partition(|&i| !held.contains(&self.pairs[i].group))
    }
}

/// Simulates every phantom at every SNR and collects the patches.
/// `f64::INFINITY` in `snrs_db` means noiseless.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub phantoms: Vec<PhantomSpec>,
    pub snrs_db: Vec<f64>,
    pub noise_seed: u64,
    pub side: usize,
    pub stride: usize,
    pub labels: LabelMode,
}

pub fn synthetic_dataset(spec: &SyntheticSpec, scheme: &GradientScheme<f64>) -> Result<Dataset> {
    let mut data = Dataset::default();
    for (g, ps) in spec.phantoms.iter().enumerate() {
        let phantom = generate_phantom::<f64>(ps)?;
        let mask = phantom.foreground();
        let clean = synthesize_dwi(&phantom.tensors, &phantom.s0, scheme)?;
        let reference = reference_amplitude(&clean, scheme, &mask)?;
        let target = match spec.labels {
            LabelMode::GroundTruth => phantom.tensors.clone(),
            LabelMode::DenseCwlls { directions, snr_db } => {
                let dense = GradientScheme::uniform(directions, 1000.0);
                let dwi = synthesize_dwi(&phantom.tensors, &phantom.s0, &dense)?;
                let noisy = add_rician_noise(
                    &dwi,
                    &NoiseSpec {
                        snr_db,
                        reference_amplitude: reference,
                        seed: noise_seed(spec.noise_seed, g, usize::MAX),
                    },
                )?;
                fit_volume(&noisy, &dense, ClassicalMethod::Cwlls, Some(&mask))?.0
            }
        };
        for (k, &snr_db) in spec.snrs_db.iter().enumerate() {
            let noisy = add_rician_noise(
                &clean,
                &NoiseSpec {
                    snr_db,
                    reference_amplitude: reference,
                    seed: noise_seed(spec.noise_seed, g, k),
                },
            )?;
            let norm = normalize_dwi(&noisy, scheme)?;
            data.push_volume(g, &norm, &target, spec.side, spec.stride)?;
        }
    }
    Ok(data)
}

/// Distinct noise seed per (phantom, realization).
pub fn noise_seed(base: u64, phantom: usize, realization: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((phantom as u64) << 32)
        .wrapping_add(realization as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(group: usize) -> PatchPair {
        PatchPair {
            group,
            origin: [0; 3],
            signals: Matrix::zeros((1, 6)),
            target: Matrix::zeros((1, 6)),
        }
    }

    #[test]
    fn split_keeps_groups_whole() {
        let data = Dataset {
            pairs: (0..5).flat_map(|g| (0..4).map(move |_| pair(g))).collect(),
        };
        let (train, val) = data.split(0.2);
        assert_eq!(val.len(), 4);
        assert!(val.iter().all(|&i| data.pairs[i].group == 4));
        assert_eq!(train.len(), 16);
    }

    #[test]
    fn single_group_falls_back_to_patches() {
        let data = Dataset {
            pairs: (0..10).map(|_| pair(0)).collect(),
        };
        let (train, val) = data.split(0.2);
        assert_eq!((train.len(), val.len()), (8, 2));
        assert_eq!(data.split(0.0).1.len(), 0);
    }

    #[test]
    fn synthetic_noiseless_patches_match_phantom() {
        let spec = SyntheticSpec {
            phantoms: vec![PhantomSpec {
                dims: [6, 6, 6],
                seed: 3,
                ..PhantomSpec::default()
            }],
            snrs_db: vec![f64::INFINITY],
            noise_seed: 1,
            side: 3,
            stride: 3,
            labels: LabelMode::GroundTruth,
        };
        let data = synthetic_dataset(&spec, &GradientScheme::skare6(1000.0)).unwrap();
        assert_eq!(data.len(), 8);
        let p = &data.pairs[0];
        assert_eq!(p.signals.dim(), (27, 6));
        assert!(p.target.iter().all(|x| x.abs() < 5.0));
        assert!(p.signals.iter().all(|&x| x > 0.0 && x <= 1.0));
    }
}
