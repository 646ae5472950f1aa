//! Voxel-wise comparison of tensor volumes: tensor, MD, FA and principal
//! direction errors, per-region breakdowns and Bland-Altman tables.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::eigen::{angular_error, eigendecompose, fractional_anisotropy, mean_diffusivity};
use crate::error::{DtiError, Result};
use crate::phantom::label_name;
use crate::scalar::Real;
use crate::tensor::DiffusionTensor;
use crate::volume::Volume4D;

/// Angles are only scored where the reference FA exceeds this.
pub const DEFAULT_ANGLE_FA_THRESHOLD: f64 = 0.15;

pub const METRIC_NAMES: [&str; 4] = ["tensor", "md", "fa", "angle"];

/// Mean absolute errors over a set of voxels. Tensor and MD errors are in
/// mm^2/s, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub voxel_count: usize,
    pub angle_voxel_count: usize,
    pub tensor_error: f64,
    pub md_error: f64,
    pub fa_error: f64,
    pub angle_error_deg: f64,
}

impl RegionMetrics {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "tensor" => Some(self.tensor_error),
            "md" => Some(self.md_error),
            "fa" => Some(self.fa_error),
            "angle" => Some(self.angle_error_deg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Accum {
    n: usize,
    n_angle: usize,
    tensor: f64,
    md: f64,
    fa: f64,
    angle: f64,
}

impl Accum {
    fn finish(&self) -> RegionMetrics {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        RegionMetrics {
            voxel_count: self.n,
            angle_voxel_count: self.n_angle,
            tensor_error: mean(self.tensor, self.n),
            md_error: mean(self.md, self.n),
            fa_error: mean(self.fa, self.n),
            angle_error_deg: mean(self.angle, self.n_angle),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: RegionMetrics,
    /// Keyed by region name (`wm`, `gm`, `csf`, or `label_<n>`).
    pub regions: BTreeMap<String, RegionMetrics>,
    pub angle_fa_threshold: f64,
}

impl MetricsReport {
    /// Flat rows `method,region,metric,value`, without header.
    pub fn csv_rows(&self, method: &str) -> Vec<String> {
        let mut rows = Vec::new();
        let mut push = |region: &str, m: &RegionMetrics| {
            for name in METRIC_NAMES {
                rows.push(format!("{method},{region},{name},{:.10e}", m.metric(name).unwrap()));
            }
        };
        push("all", &self.overall);
        for (k, m) in &self.regions {
            push(k, m);
        }
        rows
    }

    pub fn to_csv(&self, method: &str) -> String {
        let mut s = String::from("method,region,metric,value\n");
        for r in self.csv_rows(method) {
            s.push_str(&r);
            s.push('\n');
        }
        s
    }
}

fn region_key(label: f64) -> String {
    let l = label.round();
    if (1.0..=3.0).contains(&l) {
        label_name(l as u8).to_string()
    } else {
        format!("label_{}", l as i64)
    }
}

fn check_tensor_pair<T: Real>(pred: &Volume4D<T>, reference: &Volume4D<T>, mask: &[bool]) -> Result<()> {
    if pred.channels() != 6 || reference.channels() != 6 {
        return Err(DtiError::ShapeMismatch(format!(
            "tensor volumes need 6 channels, got {} and {}",
            pred.channels(),
            reference.channels()
        )));
    }
    pred.ensure_same_grid(reference, "prediction vs reference")?;
    if mask.len() != pred.voxel_count() {
        return Err(DtiError::ShapeMismatch(format!(
            "mask has {} voxels, volume {}",
            mask.len(),
            pred.voxel_count()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(DtiError::InvalidParameter("empty mask".into()));
    }
    Ok(())
}

/// Compares predicted against reference tensors over the mask.
///
/// The tensor error of a voxel is `sum_i |pred_i - ref_i|` over the six
/// elements; FA and MD errors are absolute differences; the angle error is
/// between principal eigenvectors and only counted where the reference FA
/// exceeds `angle_fa_threshold`.
pub fn compare_volumes<T: Real>(
    pred: &Volume4D<T>,
    reference: &Volume4D<T>,
    mask: &[bool],
    labels: Option<&Volume4D<T>>,
    angle_fa_threshold: f64,
) -> Result<MetricsReport> {
    check_tensor_pair(pred, reference, mask)?;
    if let Some(l) = labels {
        pred.ensure_same_grid(l, "prediction vs labels")?;
    }
    let mut overall = Accum::default();
    let mut regions: BTreeMap<String, Accum> = BTreeMap::new();
    for (i, (p, r)) in pred.voxels().zip(reference.voxels()).enumerate() {
        if !mask[i] {
            continue;
        }
        let tp = DiffusionTensor::from_slice(p);
        let tr = DiffusionTensor::from_slice(r);
        let ep = eigendecompose(&tp);
        let er = eigendecompose(&tr);
        let tensor: f64 = p.iter().zip(r).map(|(&a, &b)| (a - b).abs().as_f64()).sum();
        let md = (mean_diffusivity(&ep) - mean_diffusivity(&er)).abs().as_f64();
        let fa_ref = fractional_anisotropy(&er).as_f64();
        let fa = (fractional_anisotropy(&ep).as_f64() - fa_ref).abs();
        let angle = if fa_ref > angle_fa_threshold {
            angular_error(&ep.principal(), &er.principal()).ok().map(|a| a.as_f64())
        } else {
            None
        };
        let mut targets = vec![&mut overall];
        let key = labels.map(|l| region_key(l.data()[i].as_f64()));
        let entry;
        if let Some(k) = key {
            entry = regions.entry(k).or_default();
            targets.push(entry);
        }
        for acc in targets {
            acc.n += 1;
            acc.tensor += tensor;
            acc.md += md;
            acc.fa += fa;
            if let Some(a) = angle {
                acc.n_angle += 1;
                acc.angle += a;
            }
        }
    }
    Ok(MetricsReport {
        overall: overall.finish(),
        regions: regions.into_iter().map(|(k, a)| (k, a.finish())).collect(),
        angle_fa_threshold,
    })
}

/// Per-voxel FA and MD maps (one channel each).
pub fn scalar_maps<T: Real>(tensors: &Volume4D<T>) -> Result<(Volume4D<T>, Volume4D<T>)> {
    if tensors.channels() != 6 {
        return Err(DtiError::ShapeMismatch(format!(
            "tensor volume needs 6 channels, got {}",
            tensors.channels()
        )));
    }
    let mut fa = Volume4D::zeros(tensors.dims(), 1).with_voxel_size(tensors.voxel_size());
    let mut md = fa.clone();
    for (i, t) in tensors.voxels().enumerate() {
        let e = eigendecompose(&DiffusionTensor::from_slice(t));
        fa.data_mut()[i] = fractional_anisotropy(&e);
        md.data_mut()[i] = mean_diffusivity(&e);
    }
    Ok((fa, md))
}

/// Bland-Altman agreement data for a scalar map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    /// `((pred + ref) / 2, pred - ref)` per masked voxel, in voxel order.
    pub pairs: Vec<(f64, f64)>,
    pub bias: f64,
    /// Sample standard deviation of the differences.
    pub sd: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
}

impl BlandAltman {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mean,diff\n");
        for (m, d) in &self.pairs {
            let _ = writeln!(s, "{m:.10e},{d:.10e}");
        }
        s
    }
}

pub fn bland_altman_data<T: Real>(pred: &Volume4D<T>, reference: &Volume4D<T>, mask: &[bool]) -> Result<BlandAltman> {
    if pred.channels() != 1 || reference.channels() != 1 {
        return Err(DtiError::ShapeMismatch("Bland-Altman needs scalar (1-channel) maps".into()));
    }
    pred.ensure_same_grid(reference, "prediction vs reference")?;
    if mask.len() != pred.voxel_count() {
        return Err(DtiError::ShapeMismatch(format!(
            "mask has {} voxels, volume {}",
            mask.len(),
            pred.voxel_count()
        )));
    }
    let pairs: Vec<(f64, f64)> = pred
        .data()
        .iter()
        .zip(reference.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &r), _)| {
            let (p, r) = (p.as_f64(), r.as_f64());
            ((p + r) / 2.0, p - r)
        })
        .collect();
    let n = pairs.len();
    let bias = if n == 0 {
        0.0
    } else {
        pairs.iter().map(|p| p.1).sum::<f64>() / n as f64
    };
    let sd = if n < 2 {
        0.0
    } else {
        (pairs.iter().map(|p| (p.1 - bias).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(BlandAltman {
        pairs,
        bias,
        sd,
        lower_limit: bias - 1.96 * sd,
        upper_limit: bias + 1.96 * sd,
    })
}
