//! Diffusion tensor algebra, classical estimators, synthetic phantoms and
//! the error metrics used to compare tensor estimates.
//!
//! Numerics are generic over [`Real`] (`f32`/`f64`); the aliases below fix
//! the precision used by the command-line tools and acceptance runs.

pub mod design;
pub mod dwi;
pub mod eigen;
pub mod error;
pub mod evaluation;
pub mod fitters;
pub mod linalg;
pub mod phantom;
pub mod rng;
pub mod scalar;
pub mod scheme;
pub mod sweep;
pub mod tensor;
pub mod volume;

pub use design::{build_design_matrix, predict_signals, DesignMatrix};
pub use dwi::{add_rician_noise, fit_volume, normalize_dwi, reference_amplitude, synthesize_dwi, NoiseSpec};
pub use eigen::{angular_error, eigendecompose, fractional_anisotropy, mean_diffusivity, EigenSystem};
pub use error::{DtiError, Result};
pub use evaluation::{bland_altman_data, compare_volumes, BlandAltman, MetricsReport, RegionMetrics};
pub use fitters::{
    fit_cnls, fit_ols, fit_wlls_constrained, ClassicalMethod, CnlsConfig, FitResult, WeightingScheme,
};
pub use phantom::{generate_phantom, Phantom, PhantomSpec, RegionModel, RegionParams};
pub use scalar::Real;
pub use scheme::GradientScheme;
pub use sweep::{noise_sweep, SweepEntry, SweepResult};
pub use tensor::DiffusionTensor;
pub use volume::{SampleType, Volume4D, VolumeSidecar};

pub type Tensor64 = DiffusionTensor<f64>;
pub type Tensor32 = DiffusionTensor<f32>;
pub type Scheme64 = GradientScheme<f64>;
pub type Design64 = DesignMatrix<f64>;
pub type Eigen64 = EigenSystem<f64>;
pub type Volume64 = Volume4D<f64>;
pub type Volume32 = Volume4D<f32>;
pub type Phantom64 = Phantom<f64>;
pub type FitResult64 = FitResult<f64>;
