//! Noise sweeps: corrupt one phantom at several SNRs and noise seeds, run
//! every estimator, and score each against the ground truth.

use serde::{Deserialize, Serialize};

use crate::dwi::{add_rician_noise, reference_amplitude, synthesize_dwi, NoiseSpec};
use crate::error::{DtiError, Result};
use crate::evaluation::{compare_volumes, MetricsReport, METRIC_NAMES};
use crate::phantom::Phantom;
use crate::scheme::GradientScheme;
use crate::volume::Volume4D;

/// Maps a raw signal volume (b0 included) to a tensor volume in mm²/s.
pub type Estimator<'a> = Box<dyn Fn(&Volume4D<f64>) -> Result<Volume4D<f64>> + 'a>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    /// `None` for the column without added noise.
    pub snr_db: Option<f64>,
    pub method: String,
    pub seed: Option<u64>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub snr_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub reference_amplitude: f64,
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    /// Seed-averaged whole-mask metric (`tensor`, `md`, `fa` or `angle`).
    pub fn mean(&self, snr_db: Option<f64>, method: &str, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.snr_db == snr_db && e.method == method)
            .filter_map(|e| e.report.overall.metric(metric))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = Vec::new();
        for e in &self.entries {
            if !m.contains(&e.method) {
                m.push(e.method.clone());
            }
        }
        m
    }

    /// One row per entry × region × metric; `snr_db` is `none` for the
    /// noiseless column and `seed` is empty there.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("snr_db,seed,method,region,metric,value\n");
        for e in &self.entries {
            let snr = e.snr_db.map_or("none".to_string(), |v| v.to_string());
            let seed = e.seed.map_or(String::new(), |v| v.to_string());
            for row in e.report.csv_rows(&e.method) {
                s.push_str(&format!("{snr},{seed},{row}\n"));
            }
        }
        s
    }

    /// Seed-averaged metrics, one row per SNR × method × metric.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("snr_db,method,metric,mean\n");
        let snrs = std::iter::once(None).chain(self.snr_levels.iter().map(|&v| Some(v)));
        for snr in snrs {
            for m in self.methods() {
                for metric in METRIC_NAMES {
                    if let Some(v) = self.mean(snr, &m, metric) {
                        let label = snr.map_or("none".to_string(), |v| v.to_string());
                        s.push_str(&format!("{label},{m},{metric},{v:.10e}\n"));
                    }
                }
            }
        }
        s
    }
}

/// Runs every estimator on the noiseless signals once, then on each
/// (SNR, seed) Rician realization. SNR levels must be distinct and finite.
pub fn noise_sweep(
    phantom: &Phantom<f64>,
    scheme: &GradientScheme<f64>,
    snr_levels: &[f64],
    seeds: &[u64],
    estimators: &[(String, Estimator)],
    angle_fa_threshold: f64,
) -> Result<SweepResult> {
    for (i, a) in snr_levels.iter().enumerate() {
        if !a.is_finite() || snr_levels[..i].contains(a) {
            return Err(DtiError::InvalidParameter(format!(
                "SNR levels must be finite and distinct, got {snr_levels:?}"
            )));
        }
    }
    if seeds.is_empty() && !snr_levels.is_empty() {
        return Err(DtiError::InvalidParameter("at least one noise seed is required".into()));
    }
    let mask = phantom.foreground();
    let clean = synthesize_dwi(&phantom.tensors, &phantom.s0, scheme)?;
    let reference = reference_amplitude(&clean, scheme, &mask)?;
    let mut entries = Vec::new();
    let mut score = |dwi: &Volume4D<f64>, snr: Option<f64>, seed: Option<u64>| -> Result<()> {
        for (name, est) in estimators {
            let pred = est(dwi)?;
            let report = compare_volumes(&pred, &phantom.tensors, &mask, Some(&phantom.labels), angle_fa_threshold)?;
            entries.push(SweepEntry {
                snr_db: snr,
                method: name.clone(),
                seed,
                report,
            });
        }
        Ok(())
    };
    score(&clean, None, None)?;
    for &snr in snr_levels {
        for &seed in seeds {
            let noisy = add_rician_noise(
                &clean,
                &NoiseSpec {
                    snr_db: snr,
                    reference_amplitude: reference,
                    seed,
                },
            )?;
            score(&noisy, Some(snr), Some(seed))?;
        }
    }
    Ok(SweepResult {
        snr_levels: snr_levels.to_vec(),
        seeds: seeds.to_vec(),
        reference_amplitude: reference,
        entries,
    })
}
