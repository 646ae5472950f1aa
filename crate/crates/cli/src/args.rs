//! Command-line syntax. Every subcommand's arguments serialize into the run
//! manifest and deserialize again for `rerun`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub const OUT_DIR_ENV: &str = "TENSORFORMER_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "tensorformer", version, about = "Diffusion tensor estimation with patch transformers")]
pub struct Cli {
    /// Worker threads; 1 guarantees bit-reproducible output. Default: all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Base directory for relative or omitted `--out` paths.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Generate a synthetic tensor phantom (tensors, labels, s0).
    Phantom(PhantomArgs),
    /// Synthesize diffusion-weighted signals from a phantom, optionally with Rician noise.
    Synth(SynthArgs),
    /// Estimate a tensor volume with a classical fitter or a trained model.
    Fit(FitArgs),
    /// Train Model S, or Model ST around a frozen Model S.
    Train(TrainArgs),
    /// Compare a tensor volume against a reference.
    Evaluate(EvaluateArgs),
    /// Run estimators over a grid of SNR levels and noise seeds.
    Sweep(SweepArgs),
    /// Re-run a command from its manifest.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Phantom(_) => "phantom",
            Command::Synth(_) => "synth",
            Command::Fit(_) => "fit",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Sweep(_) => "sweep",
            Command::Rerun(_) => "rerun",
        }
    }

    pub fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::Phantom(a) => a.out.as_ref(),
            Command::Synth(a) => a.out.as_ref(),
            Command::Fit(a) => a.out.as_ref(),
            Command::Train(a) => a.out.as_ref(),
            Command::Evaluate(a) => a.out.as_ref(),
            Command::Sweep(a) => a.out.as_ref(),
            Command::Rerun(a) => a.out.as_ref(),
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        let slot = match self {
            Command::Phantom(a) => &mut a.out,
            Command::Synth(a) => &mut a.out,
            Command::Fit(a) => &mut a.out,
            Command::Train(a) => &mut a.out,
            Command::Evaluate(a) => &mut a.out,
            Command::Sweep(a) => &mut a.out,
            Command::Rerun(a) => &mut a.out,
        };
        *slot = Some(out);
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let nums = parts
        .iter()
        .map(|p| p.parse::<usize>().map_err(|e| format!("bad dimension {p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match nums.as_slice() {
        [n] => Ok([*n; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(format!("expected X,Y,Z or a single size, got {s:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionModelArg {
    Layered,
    CurvedTract,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PhantomArgs {
    /// Grid size as X,Y,Z (or one number for a cube).
    #[arg(long, value_parser = parse_dims, default_value = "32,32,32")]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = RegionModelArg::Layered)]
    pub model: RegionModelArg,
    /// Correlation length of the smooth fields, in voxels.
    #[arg(long, default_value_t = 8.0)]
    pub length_scale: f64,
    /// Patch side the phantom will be used with; checked against the dims.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    pub dtype: DtypeArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemePreset {
    Skare6,
}

/// Either a preset or an FSL bvec/bval pair.
#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
pub struct SchemeArgs {
    #[arg(long, value_enum, conflicts_with_all = ["bvec", "bval"])]
    pub scheme: Option<SchemePreset>,
    #[arg(long, requires = "bval")]
    pub bvec: Option<PathBuf>,
    #[arg(long, requires = "bvec")]
    pub bval: Option<PathBuf>,
    /// b-value (s/mm²) of the preset scheme.
    #[arg(long, default_value_t = 1000.0)]
    pub bvalue: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Phantom directory written by `phantom`.
    #[arg(long)]
    pub phantom: PathBuf,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// SNR in dB; omit for noiseless signals.
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    pub dtype: DtypeArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Ols,
    Cwlls,
    Cnls,
    ModelS,
    ModelSt,
}

impl MethodArg {
    pub fn name(&self) -> &'static str {
        match self {
            MethodArg::Ols => "ols",
            MethodArg::Cwlls => "cwlls",
            MethodArg::Cnls => "cnls",
            MethodArg::ModelS => "model-s",
            MethodArg::ModelSt => "model-st",
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, MethodArg::ModelS | MethodArg::ModelSt)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Signal volume stem (e.g. `synth/dwi`); its `.bvec`/`.bval` are used
    /// when no scheme is given.
    #[arg(long)]
    pub dwi: PathBuf,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Model checkpoint; required for learned methods.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Label volume stem; voxels labelled 0 are left empty.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Patch stride for learned methods (default: from the checkpoint).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    pub dtype: DtypeArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageArg {
    S,
    St,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionArg {
    Softmax,
    Unnormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelArg {
    GroundTruth,
    DenseCwlls,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Model S checkpoint kept fixed while training stage `st`.
    #[arg(long)]
    pub frozen: Option<PathBuf>,
    /// Training pair `DWI_STEM:TENSOR_STEM` (repeatable). Without pairs,
    /// phantoms are simulated from the options below.
    #[arg(long = "pair")]
    pub pairs: Vec<String>,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// Number of simulated training phantoms.
    #[arg(long, default_value_t = 4)]
    pub phantoms: usize,
    /// Seed of the first simulated phantom; the rest count upwards.
    #[arg(long, default_value_t = 100)]
    pub phantom_seed: u64,
    #[arg(long, value_parser = parse_dims, default_value = "24,24,24")]
    pub dims: [usize; 3],
    /// Comma-separated SNR levels (dB) simulated for every phantom.
    #[arg(long, value_delimiter = ',', default_value = "20")]
    pub snr: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    #[arg(long, value_enum, default_value_t = LabelArg::GroundTruth)]
    pub labels: LabelArg,
    #[arg(long, default_value_t = 5)]
    pub patch: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 64)]
    pub d_head: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, value_enum, default_value_t = AttentionArg::Softmax)]
    pub attention: AttentionArg,
    /// Drop the residual connection and layer normalization.
    #[arg(long)]
    pub no_stabilizers: bool,
    /// Default patch stride at prediction time.
    #[arg(long, default_value_t = 1)]
    pub inference_stride: usize,
    /// Patch stride when cutting training data.
    #[arg(long)]
    pub train_stride: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 1)]
    pub plateau_patience: usize,
    #[arg(long, default_value_t = 2)]
    pub early_stop: usize,
    #[arg(long, default_value_t = 50)]
    pub max_epochs: usize,
    /// Seed for initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Predicted tensor volume stem.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference tensor volume stem.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Label volume stem for per-region rows and the foreground mask.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Method name written into the report.
    #[arg(long, default_value = "pred")]
    pub method: String,
    #[arg(long, default_value_t = tensorformer_core::evaluation::DEFAULT_ANGLE_FA_THRESHOLD)]
    pub angle_fa_threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub phantom: PathBuf,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[arg(long, value_delimiter = ',', default_value = "50,30,20,15")]
    pub snr: Vec<f64>,
    /// Noise realizations per SNR level.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// First noise seed; realizations use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Comma-separated methods.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "cwlls")]
    pub methods: Vec<MethodArg>,
    #[arg(long)]
    pub checkpoint_s: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_st: Option<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = tensorformer_core::evaluation::DEFAULT_ANGLE_FA_THRESHOLD)]
    pub angle_fa_threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
