//! Synthetic ground-truth tensor volumes with labelled regions and
//! spatially smooth microstructure.
//!
//! Three tissue analogues are generated: a white-matter-like class with
//! high anisotropy, a grey-matter-like class with low anisotropy and an
//! isotropic fluid class. Anisotropy, diffusivity and fibre direction vary
//! smoothly in space: random values on a coarse control lattice (spacing =
//! `length_scale` voxels) are trilinearly interpolated. Directions are
//! interpolated as outer products `u u^T`, which is sign-agnostic, and the
//! principal eigenvector of the blend is used.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::eigen::eigendecompose;
use crate::error::{DtiError, Result};
use crate::rng::{purpose, stream};
use crate::scalar::Real;
use crate::tensor::DiffusionTensor;
use crate::volume::Volume4D;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_WM: u8 = 1;
pub const LABEL_GM: u8 = 2;
pub const LABEL_CSF: u8 = 3;

pub fn label_name(label: u8) -> &'static str {
    match label {
        LABEL_WM => "wm",
        LABEL_GM => "gm",
        LABEL_CSF => "csf",
        _ => "background",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionModel {
    /// Curved bands: fluid | grey | white | grey | fluid along x.
    Layered,
    /// A white-matter tube bent along a circular arc, directions tangent to
    /// the arc, embedded in grey matter with fluid in the far corners.
    CurvedTract,
}

/// Ranges of fractional anisotropy and mean diffusivity (mm^2/s) for one
/// tissue class. Eigenvalues follow from these: an axially symmetric
/// tensor with the sampled FA and MD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    pub fa: [f64; 2],
    pub md: [f64; 2],
}

impl RegionParams {
    /// Eigenvalue bounds `(smallest, largest)` implied by the FA/MD ranges.
    pub fn eigenvalue_range(&self) -> (f64, f64) {
        let (_, lo) = axial_eigenvalues(self.fa[1], self.md[0]);
        let (hi, _) = axial_eigenvalues(self.fa[1], self.md[1]);
        (lo, hi.max(self.md[1]))
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = self.fa[0] >= 0.0
            && self.fa[1] < 1.0
            && self.fa[0] <= self.fa[1]
            && self.md[0] > 0.0
            && self.md[0] <= self.md[1]
            && self.md[1].is_finite();
        if ok {
            Ok(())
        } else {
            Err(DtiError::InvalidParameter(format!("region {name}: {self:?}")))
        }
    }
}

/// `(axial, perpendicular)` eigenvalues of a prolate tensor with the given
/// FA and MD.
pub fn axial_eigenvalues(fa: f64, md: f64) -> (f64, f64) {
    let ratio = (1.0 + fa * (3.0 - 2.0 * fa * fa).sqrt()) / (1.0 - fa * fa);
    let perp = 3.0 * md / (ratio + 2.0);
    (ratio * perp, perp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    pub region_model: RegionModel,
    pub wm: RegionParams,
    pub gm: RegionParams,
    pub csf: RegionParams,
    /// Control-lattice spacing in voxels; 1 gives independent voxels.
    pub length_scale: f64,
    pub voxel_size: [f64; 3],
    pub s0_mean: f64,
    /// Relative smooth variation of `s0` around its mean.
    pub s0_variation: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            seed: 0,
            region_model: RegionModel::Layered,
            wm: RegionParams {
                fa: [0.6, 0.9],
                md: [0.6e-3, 0.8e-3],
            },
            gm: RegionParams {
                fa: [0.05, 0.25],
                md: [0.8e-3, 1.0e-3],
            },
            csf: RegionParams {
                fa: [0.0, 0.0],
                md: [2.9e-3, 3.1e-3],
            },
            length_scale: 8.0,
            voxel_size: [1.0; 3],
            s0_mean: 1.0,
            s0_variation: 0.05,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(DtiError::InvalidParameter(format!("dims {:?}", self.dims)));
        }
        if !(self.length_scale >= 1.0) || !self.length_scale.is_finite() {
            return Err(DtiError::InvalidParameter(format!(
                "length scale {} must be >= 1",
                self.length_scale
            )));
        }
        if !(self.s0_mean > 0.0) || !(0.0..1.0).contains(&self.s0_variation) {
            return Err(DtiError::InvalidParameter(format!(
                "s0 mean {} / variation {}",
                self.s0_mean, self.s0_variation
            )));
        }
        self.wm.validate("wm")?;
        self.gm.validate("gm")?;
        self.csf.validate("csf")
    }

    pub fn region(&self, label: u8) -> Option<&RegionParams> {
        match label {
            LABEL_WM => Some(&self.wm),
            LABEL_GM => Some(&self.gm),
            LABEL_CSF => Some(&self.csf),
            _ => None,
        }
    }
}

/// Generated ground truth: tensors (6 channels, mm^2/s), labels (1
/// channel) and unweighted signal `s0` (1 channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom<T> {
    pub tensors: Volume4D<T>,
    pub labels: Volume4D<T>,
    pub s0: Volume4D<T>,
}

impl<T: Real> Phantom<T> {
    pub fn label_at(&self, i: usize) -> u8 {
        self.labels.data()[i].as_f64().round() as u8
    }

    /// Voxels with a tissue label.
    pub fn foreground(&self) -> Vec<bool> {
        (0..self.labels.voxel_count())
            .map(|i| self.label_at(i) != LABEL_BACKGROUND)
            .collect()
    }
}

/// Scalar field on a coarse lattice, trilinearly interpolated.
struct Lattice<V> {
    shape: [usize; 3],
    spacing: f64,
    nodes: Vec<V>,
}

impl<V: Copy> Lattice<V> {
    fn new(dims: [usize; 3], spacing: f64, mut sample: impl FnMut(usize) -> V) -> Self {
        let shape = dims.map(|n| ((n.saturating_sub(1)) as f64 / spacing).ceil() as usize + 2);
        let count = shape[0] * shape[1] * shape[2];
        Self {
            shape,
            spacing,
            nodes: (0..count).map(&mut sample).collect(),
        }
    }

    /// The eight surrounding nodes with their trilinear weights.
    fn corners(&self, p: [usize; 3]) -> [(V, f64); 8] {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let u = p[a] as f64 / self.spacing;
            let i = (u.floor() as usize).min(self.shape[a] - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        std::array::from_fn(|k| {
            let off = [(k >> 2) & 1, (k >> 1) & 1, k & 1];
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                idx[a] = base[a] + off[a];
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            let n = (idx[0] * self.shape[1] + idx[1]) * self.shape[2] + idx[2];
            (self.nodes[n], w)
        })
    }
}

impl Lattice<f64> {
    fn value(&self, p: [usize; 3]) -> f64 {
        self.corners(p).iter().map(|(v, w)| v * w).sum()
    }
}

impl Lattice<[f64; 3]> {
    /// Principal axis of the weighted sum of outer products.
    fn axis(&self, p: [usize; 3], extra: Option<([f64; 3], f64)>) -> [f64; 3] {
        let mut m = [[0.0; 3]; 3];
        let mut add = |u: &[f64; 3], w: f64| {
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += w * u[r] * u[c];
                }
            }
        };
        for (u, w) in self.corners(p) {
            add(&u, w);
        }
        if let Some((u, w)) = extra {
            add(&u, w);
        }
        eigendecompose(&DiffusionTensor::from_matrix(&m)).principal()
    }
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-8 {
            return v.map(|x| x / n);
        }
    }
}

struct RegionSample {
    label: u8,
    /// Tangent of the tract for the curved model.
    tangent: Option<[f64; 3]>,
}

fn region_at(spec: &PhantomSpec, p: [usize; 3]) -> RegionSample {
    let [nx, ny, nz] = spec.dims.map(|n| n as f64);
    let (x, y, z) = (p[0] as f64 + 0.5, p[1] as f64 + 0.5, p[2] as f64 + 0.5);
    match spec.region_model {
        RegionModel::Layered => {
            let tau = std::f64::consts::TAU;
            let u = x / nx + 0.05 * (tau * y / ny).sin() + 0.05 * (tau * z / nz).cos();
            let label = if !(0.1..0.9).contains(&u) {
                LABEL_CSF
            } else if !(0.3..0.7).contains(&u) {
                LABEL_GM
            } else {
                LABEL_WM
            };
            RegionSample { label, tangent: None }
        }
        RegionModel::CurvedTract => {
            let scale = nx.max(ny);
            let radius = 0.55 * scale;
            let r = (x * x + y * y).sqrt();
            let dist = (r - radius).abs() / scale;
            let label = if dist < 0.17 {
                LABEL_WM
            } else if dist < 0.34 {
                LABEL_GM
            } else {
                LABEL_CSF
            };
            let tangent = if r > 0.0 {
                [-y / r, x / r, 0.0]
            } else {
                [1.0, 0.0, 0.0]
            };
            RegionSample {
                label,
                tangent: Some(tangent),
            }
        }
    }
}

/// Builds the phantom described by `spec`. Every tensor is positive
/// definite; the output is a pure function of the spec (including seed).
pub fn generate_phantom<T: Real>(spec: &PhantomSpec) -> Result<Phantom<T>> {
    spec.validate()?;
    let seed = spec.seed;
    let uniform = |p: u64| move |i: usize| stream(seed, p, i as u64).gen::<f64>();
    let fa_field = Lattice::new(spec.dims, spec.length_scale, uniform(purpose::PHANTOM_FA));
    let md_field = Lattice::new(spec.dims, spec.length_scale, uniform(purpose::PHANTOM_MD));
    let s0_field = Lattice::new(spec.dims, spec.length_scale, uniform(purpose::PHANTOM_S0));
    let dir_field = Lattice::new(spec.dims, spec.length_scale, |i| {
        random_unit(&mut stream(seed, purpose::PHANTOM_DIRECTION, i as u64))
    });

    let mut tensors = Volume4D::<T>::zeros(spec.dims, 6).with_voxel_size(spec.voxel_size);
    let mut labels = Volume4D::<T>::zeros(spec.dims, 1).with_voxel_size(spec.voxel_size);
    let mut s0 = Volume4D::<T>::zeros(spec.dims, 1).with_voxel_size(spec.voxel_size);

    for i in 0..tensors.voxel_count() {
        let p = tensors.coords(i);
        let region = region_at(spec, p);
        let params = spec.region(region.label).expect("tissue label");
        let fa = params.fa[0] + (params.fa[1] - params.fa[0]) * fa_field.value(p);
        let md = params.md[0] + (params.md[1] - params.md[0]) * md_field.value(p);
        let (axial, perp) = axial_eigenvalues(fa, md);
        let extra = match (region.label, region.tangent) {
            (LABEL_WM, Some(t)) => Some((t, 4.0)),
            _ => None,
        };
        let dir = dir_field.axis(p, extra);
        let t = DiffusionTensor::axial(axial, perp, &dir);
        for (dst, v) in tensors.voxel_at_mut(i).iter_mut().zip(t.to_array()) {
            *dst = T::lit(v);
        }
        labels.voxel_at_mut(i)[0] = T::lit(region.label as f64);
        let s = spec.s0_mean * (1.0 + spec.s0_variation * (2.0 * s0_field.value(p) - 1.0));
        s0.voxel_at_mut(i)[0] = T::lit(s);
    }
    Ok(Phantom { tensors, labels, s0 })
}
