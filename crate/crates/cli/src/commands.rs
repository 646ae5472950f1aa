//! Implementations of the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use tensorformer_core::evaluation::{bland_altman_data, compare_volumes, scalar_maps, MetricsReport, METRIC_NAMES};
use tensorformer_core::sweep::{noise_sweep, Estimator};
use tensorformer_core::volume::write_atomic;
use tensorformer_core::{
    add_rician_noise, fit_volume, generate_phantom, normalize_dwi, reference_amplitude, synthesize_dwi,
    ClassicalMethod, GradientScheme, NoiseSpec, Phantom, PhantomSpec, RegionModel, SampleType, Volume4D,
};
use tensorformer_nn::checkpoint::load_checkpoint;
use tensorformer_nn::dataset::{synthetic_dataset, LabelMode, SyntheticSpec};
use tensorformer_nn::transformer::{patch_origins, MODEL_ST_KIND};
use tensorformer_nn::{
    predict_volume, train_model_s, train_model_st, AttentionMode, Dataset, ModelConfig, ModelS, ModelST, TensorModel,
    TrainConfig,
};

use crate::args::*;
use crate::error::{CliError, Result};

type Volume = Volume4D<f64>;

/// What a command read and wrote, for the manifest.
#[derive(Debug, Default)]
pub struct Record {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub details: Value,
    pub summary: Vec<String>,
}

impl Record {
    fn save_volume(&mut self, vol: &Volume, stem: PathBuf, dtype: DtypeArg, seed: Option<u64>, desc: &str) -> Result<()> {
        let t = match dtype {
            DtypeArg::F32 => SampleType::Float32,
            DtypeArg::F64 => SampleType::Float64,
        };
        vol.save(&stem, t, seed, desc)?;
        self.outputs.push(tensorformer_core::volume::raw_path(&stem));
        self.outputs.push(tensorformer_core::volume::sidecar_path(&stem));
        Ok(())
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        write_atomic(&path, bytes)?;
        self.outputs.push(path);
        Ok(())
    }

    fn load_volume(&mut self, stem: &Path) -> Result<Volume> {
        let (v, _) = Volume::load(stem)
            .map_err(|e| CliError::Input(format!("cannot load volume {}: {e}", stem.display())))?;
        self.inputs.push(stem.to_path_buf());
        Ok(v)
    }
}

/// Argument checks that need no file access, run before anything is
/// created on disk.
pub fn precheck(command: &Command) -> Result<()> {
    match command {
        Command::Fit(a) if a.method.is_learned() => {
            require_checkpoint(a.method, a.checkpoint.as_ref(), "--checkpoint")?;
        }
        Command::Train(a) if a.stage == StageArg::St && a.frozen.is_none() => {
            return Err(CliError::Usage("--stage st requires --frozen <model-s checkpoint>".into()));
        }
        Command::Sweep(a) => {
            for &m in &a.methods {
                match m {
                    MethodArg::ModelS => {
                        require_checkpoint(m, a.checkpoint_s.as_ref(), "--checkpoint-s")?;
                    }
                    MethodArg::ModelSt => {
                        require_checkpoint(m, a.checkpoint_st.as_ref(), "--checkpoint-st")?;
                    }
                    _ => {}
                }
            }
        }
        _ => {}
    }
    Ok(())
}

pub fn dispatch(command: &Command, out: &Path) -> Result<Record> {
    match command {
        Command::Phantom(a) => phantom(a, out),
        Command::Synth(a) => synth(a, out),
        Command::Fit(a) => fit(a, out),
        Command::Train(a) => train(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Rerun(_) => Err(CliError::Usage("rerun cannot be nested".into())),
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Preset, explicit FSL pair, or the `.bvec`/`.bval` next to `stem`.
fn load_scheme(args: &SchemeArgs, stem: Option<&Path>, rec: &mut Record) -> Result<GradientScheme<f64>> {
    if let Some(SchemePreset::Skare6) = args.scheme {
        return Ok(GradientScheme::skare6(args.bvalue));
    }
    let (bvec, bval) = match (&args.bvec, &args.bval, stem) {
        (Some(v), Some(b), _) => (v.clone(), b.clone()),
        (None, None, Some(s)) => (with_suffix(s, ".bvec"), with_suffix(s, ".bval")),
        (None, None, None) => return Ok(GradientScheme::skare6(args.bvalue)),
        _ => return Err(CliError::Usage("--bvec and --bval must be given together".into())),
    };
    if !bvec.exists() || !bval.exists() {
        return Err(CliError::Usage(format!(
            "no gradient scheme: pass --scheme skare6 or --bvec/--bval (looked for {})",
            bvec.display()
        )));
    }
    rec.inputs.push(bvec.clone());
    rec.inputs.push(bval.clone());
    Ok(GradientScheme::load_fsl(&bvec, &bval)?)
}

fn mask_from_labels(labels: &Volume) -> Vec<bool> {
    labels.data().iter().map(|&l| l.round() != 0.0).collect()
}

fn region_model(m: RegionModelArg) -> RegionModel {
    match m {
        RegionModelArg::Layered => RegionModel::Layered,
        RegionModelArg::CurvedTract => RegionModel::CurvedTract,
    }
}

fn phantom(a: &PhantomArgs, out: &Path) -> Result<Record> {
    if let Some(l) = a.patch {
        for d in a.dims {
            patch_origins(d, l, l).map_err(|e| CliError::Input(e.to_string()))?;
        }
    }
    let spec = PhantomSpec {
        dims: a.dims,
        seed: a.seed,
        region_model: region_model(a.model),
        length_scale: a.length_scale,
        ..PhantomSpec::default()
    };
    let ph = generate_phantom::<f64>(&spec)?;
    let mut rec = Record::default();
    rec.seeds.insert("phantom".into(), a.seed);
    rec.save_volume(&ph.tensors, out.join("tensors"), a.dtype, Some(a.seed), "diffusion tensors (mm^2/s)")?;
    rec.save_volume(&ph.labels, out.join("labels"), a.dtype, Some(a.seed), "labels 0 bg, 1 wm, 2 gm, 3 csf")?;
    rec.save_volume(&ph.s0, out.join("s0"), a.dtype, Some(a.seed), "unweighted signal")?;
    rec.details = json!({ "spec": spec });
    rec.summary.push(format!("phantom {:?} seed {} written to {}", a.dims, a.seed, out.display()));
    Ok(rec)
}

fn load_phantom(dir: &Path, rec: &mut Record) -> Result<Phantom<f64>> {
    Ok(Phantom {
        tensors: rec.load_volume(&dir.join("tensors"))?,
        labels: rec.load_volume(&dir.join("labels"))?,
        s0: rec.load_volume(&dir.join("s0"))?,
    })
}

fn synth(a: &SynthArgs, out: &Path) -> Result<Record> {
    let mut rec = Record::default();
    let ph = load_phantom(&a.phantom, &mut rec)?;
    let scheme = load_scheme(&a.scheme, None, &mut rec)?;
    let mut dwi = synthesize_dwi(&ph.tensors, &ph.s0, &scheme)?;
    let mut details = json!({ "measurements": scheme.len(), "snr_db": a.snr });
    if let Some(snr_db) = a.snr {
        let mask = mask_from_labels(&ph.labels);
        let reference = reference_amplitude(&dwi, &scheme, &mask)?;
        let noise = NoiseSpec {
            snr_db,
            reference_amplitude: reference,
            seed: a.noise_seed,
        };
        dwi = add_rician_noise(&dwi, &noise)?;
        details["reference_amplitude"] = json!(reference);
        details["sigma"] = json!(noise.sigma());
        rec.seeds.insert("noise".into(), a.noise_seed);
    }
    let stem = out.join("dwi");
    rec.save_volume(&dwi, stem.clone(), a.dtype, a.snr.map(|_| a.noise_seed), "diffusion-weighted signals")?;
    let (bvec, bval) = (with_suffix(&stem, ".bvec"), with_suffix(&stem, ".bval"));
    scheme.save_fsl(&bvec, &bval)?;
    rec.outputs.push(bvec);
    rec.outputs.push(bval);
    rec.details = details;
    rec.summary.push(format!("{} measurements written to {}", scheme.len(), stem.display()));
    Ok(rec)
}

enum LoadedModel {
    S(ModelS),
    St(ModelST),
}

impl LoadedModel {
    fn load(path: &Path, want: MethodArg) -> Result<Self> {
        let ck = load_checkpoint(path)
            .map_err(|e| CliError::Input(format!("cannot load checkpoint {}: {e}", path.display())))?;
        let kind = ck.metadata.get("kind").and_then(Value::as_str).unwrap_or("");
        let is_st = kind == MODEL_ST_KIND;
        if is_st != (want == MethodArg::ModelSt) {
            return Err(CliError::Input(format!(
                "checkpoint {} holds a {kind} model, method {} was requested",
                path.display(),
                want.name()
            )));
        }
        Ok(if is_st {
            LoadedModel::St(ModelST::load(path)?)
        } else {
            LoadedModel::S(ModelS::load(path)?)
        })
    }

    fn model(&self) -> &dyn TensorModel {
        match self {
            LoadedModel::S(m) => m,
            LoadedModel::St(m) => m,
        }
    }
}

fn require_checkpoint(method: MethodArg, ck: Option<&PathBuf>, flag: &str) -> Result<PathBuf> {
    ck.cloned()
        .ok_or_else(|| CliError::Usage(format!("method {} requires {flag} <path>", method.name())))
}

fn classical(m: MethodArg) -> Option<ClassicalMethod> {
    match m {
        MethodArg::Ols => Some(ClassicalMethod::Ols),
        MethodArg::Cwlls => Some(ClassicalMethod::Cwlls),
        MethodArg::Cnls => Some(ClassicalMethod::Cnls),
        _ => None,
    }
}

fn predict(model: &dyn TensorModel, dwi: &Volume, scheme: &GradientScheme<f64>, mask: Option<&[bool]>, stride: Option<usize>) -> Result<Volume> {
    let norm = normalize_dwi(dwi, scheme)?;
    let stride = stride.unwrap_or(model.config().inference_stride);
    Ok(predict_volume(model, &norm, mask, stride)?)
}

fn fit(a: &FitArgs, out: &Path) -> Result<Record> {
    let checkpoint = if a.method.is_learned() {
        Some(require_checkpoint(a.method, a.checkpoint.as_ref(), "--checkpoint")?)
    } else {
        None
    };
    let mut rec = Record::default();
    let dwi = rec.load_volume(&a.dwi)?;
    let scheme = load_scheme(&a.scheme, Some(&a.dwi), &mut rec)?;
    if dwi.channels() != scheme.len() {
        return Err(CliError::Input(format!(
            "gradient scheme has {} entries but the signal volume has {} channels",
            scheme.len(),
            dwi.channels()
        )));
    }
    let mask = match &a.labels {
        Some(l) => {
            let labels = rec.load_volume(l)?;
            dwi.ensure_same_grid(&labels, "labels")?;
            Some(mask_from_labels(&labels))
        }
        None => None,
    };
    let tensors = match (classical(a.method), checkpoint) {
        (Some(m), _) => {
            let (t, failures) = fit_volume(&dwi, &scheme, m, mask.as_deref())?;
            rec.details = json!({ "method": a.method.name(), "failed_voxels": failures });
            t
        }
        (None, Some(ck)) => {
            let model = LoadedModel::load(&ck, a.method)?;
            rec.inputs.push(ck);
            let t = predict(model.model(), &dwi, &scheme, mask.as_deref(), a.stride)?;
            rec.details = json!({
                "method": a.method.name(),
                "stride": a.stride.unwrap_or(model.model().config().inference_stride),
                "config": model.model().config(),
            });
            t
        }
        (None, None) => unreachable!("learned methods checked above"),
    };
    rec.save_volume(&tensors, out.join("tensors"), a.dtype, None, &format!("{} tensor estimate (mm^2/s)", a.method.name()))?;
    rec.summary.push(format!("{} tensors written to {}", a.method.name(), out.join("tensors").display()));
    Ok(rec)
}

fn parse_pair(s: &str) -> Result<(PathBuf, PathBuf)> {
    match s.split_once(':') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((PathBuf::from(a), PathBuf::from(b))),
        _ => Err(CliError::Usage(format!("--pair expects DWI_STEM:TENSOR_STEM, got {s:?}"))),
    }
}

fn model_config(a: &TrainArgs) -> ModelConfig {
    ModelConfig {
        patch: a.patch,
        d_model: a.d_model,
        d_head: a.d_head,
        heads: a.heads,
        layers: a.layers,
        signal_channels: 6,
        attention: match a.attention {
            AttentionArg::Softmax => AttentionMode::Softmax,
            AttentionArg::Unnormalized => AttentionMode::Unnormalized,
        },
        stabilizers: !a.no_stabilizers,
        inference_stride: a.inference_stride,
    }
}

fn training_data(a: &TrainArgs, patch: usize, rec: &mut Record) -> Result<(Dataset, usize)> {
    let stride = a.train_stride.unwrap_or(patch);
    if a.pairs.is_empty() {
        let scheme = load_scheme(&a.scheme, None, rec)?;
        let spec = SyntheticSpec {
            phantoms: (0..a.phantoms)
                .map(|i| PhantomSpec {
                    dims: a.dims,
                    seed: a.phantom_seed + i as u64,
                    region_model: if i % 2 == 0 { RegionModel::Layered } else { RegionModel::CurvedTract },
                    ..PhantomSpec::default()
                })
                .collect(),
            snrs_db: a.snr.clone(),
            noise_seed: a.noise_seed,
            side: patch,
            stride,
            labels: match a.labels {
                LabelArg::GroundTruth => LabelMode::GroundTruth,
                LabelArg::DenseCwlls => LabelMode::DenseCwlls {
                    directions: 30,
                    snr_db: 40.0,
                },
            },
        };
        rec.seeds.insert("phantom".into(), a.phantom_seed);
        rec.seeds.insert("noise".into(), a.noise_seed);
        return Ok((synthetic_dataset(&spec, &scheme)?, scheme.weighted_count()));
    }
    let mut data = Dataset::default();
    let mut channels = None;
    for (g, p) in a.pairs.iter().enumerate() {
        let (dwi_stem, ten_stem) = parse_pair(p)?;
        let dwi = rec.load_volume(&dwi_stem)?;
        let tensors = rec.load_volume(&ten_stem)?;
        let scheme = load_scheme(&a.scheme, Some(&dwi_stem), rec)?;
        let norm = normalize_dwi(&dwi, &scheme)?;
        if channels.is_some_and(|c| c != norm.channels()) {
            return Err(CliError::Input("training pairs use different numbers of measurements".into()));
        }
        channels = Some(norm.channels());
        data.push_volume(g, &norm, &tensors, patch, stride)?;
    }
    Ok((data, channels.unwrap_or(6)))
}

fn train(a: &TrainArgs, out: &Path) -> Result<Record> {
    let mut rec = Record::default();
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        initial_lr: a.lr,
        lr_decay: a.lr_decay,
        plateau_patience: a.plateau_patience,
        early_stop_patience: a.early_stop,
        max_epochs: a.max_epochs,
        seed: a.seed,
        val_fraction: a.val_fraction,
    };
    cfg.validate()?;
    rec.seeds.insert("train".into(), a.seed);
    let ckpt = out.join("model.ckpt");
    let (mut log, details) = match a.stage {
        StageArg::S => {
            let mut mc = model_config(a);
            let (data, channels) = training_data(a, mc.patch, &mut rec)?;
            mc.signal_channels = channels;
            let (model, log) = train_model_s(ModelS::new(mc, a.seed)?, &data, &cfg)?;
            model.save(&ckpt)?;
            (log, json!({ "stage": "s", "patches": data.len(), "model_s_hash": model.hash() }))
        }
        StageArg::St => {
            let frozen = a
                .frozen
                .clone()
                .ok_or_else(|| CliError::Usage("--stage st requires --frozen <model-s checkpoint>".into()))?;
            let s = match LoadedModel::load(&frozen, MethodArg::ModelS)? {
                LoadedModel::S(s) => s,
                LoadedModel::St(_) => unreachable!("kind checked"),
            };
            rec.inputs.push(frozen);
            let before = s.hash();
            let (data, channels) = training_data(a, s.config.patch, &mut rec)?;
            if channels != s.config.signal_channels {
                return Err(CliError::Input(format!(
                    "training data has {channels} measurements, the frozen model expects {}",
                    s.config.signal_channels
                )));
            }
            let (model, log) = train_model_st(&s, &data, &cfg)?;
            model.save(&ckpt)?;
            (
                log,
                json!({
                    "stage": "st",
                    "patches": data.len(),
                    "model_s_hash_before": before,
                    "model_s_hash_after": model.model_s_hash(),
                }),
            )
        }
    };
    rec.outputs.push(ckpt.clone());
    // relative to the log, so re-runs into another directory match byte for byte
    log.checkpoint = Some(PathBuf::from("model.ckpt"));
    rec.write(out.join("train_log.jsonl"), log.to_jsonl()?.as_bytes())?;
    rec.summary.push(format!(
        "{} epochs, best validation loss {:.6} at epoch {}, stop: {:?}; checkpoint {}",
        log.epochs.len(),
        log.best_val_loss,
        log.best_epoch,
        log.stop_reason,
        ckpt.display()
    ));
    rec.details = details;
    Ok(rec)
}

/// Stdout table with tensor and MD errors scaled by 1000.
fn display_rows(method: &str, report: &MetricsReport) -> Vec<String> {
    let mut rows = vec![format!(
        "{:<10} {:<6} {:>14} {:>14} {:>10} {:>10}",
        "method", "region", "tensor(x1000)", "MD(x1000)", "FA", "angle(deg)"
    )];
    let mut push = |region: &str, m: &tensorformer_core::RegionMetrics| {
        let angle = if m.angle_voxel_count == 0 {
            "-".to_string()
        } else {
            format!("{:.2}", m.angle_error_deg)
        };
        rows.push(format!(
            "{:<10} {:<6} {:>14.4} {:>14.4} {:>10.4} {:>10}",
            method,
            region,
            m.tensor_error * 1000.0,
            m.md_error * 1000.0,
            m.fa_error,
            angle
        ));
    };
    push("all", &report.overall);
    for (k, m) in &report.regions {
        push(k, m);
    }
    rows
}

fn evaluate(a: &EvaluateArgs, out: &Path) -> Result<Record> {
    let mut rec = Record::default();
    let pred = rec.load_volume(&a.pred)?;
    let reference = rec.load_volume(&a.reference)?;
    let labels = a.labels.as_ref().map(|l| rec.load_volume(l)).transpose()?;
    let mask = match &labels {
        Some(l) => mask_from_labels(l),
        None => vec![true; reference.voxel_count()],
    };
    let report = compare_volumes(&pred, &reference, &mask, labels.as_ref(), a.angle_fa_threshold)?;
    let (fa_p, md_p) = scalar_maps(&pred)?;
    let (fa_r, md_r) = scalar_maps(&reference)?;
    let ba_fa = bland_altman_data(&fa_p, &fa_r, &mask)?;
    let ba_md = bland_altman_data(&md_p, &md_r, &mask)?;
    let json = json!({
        "method": a.method,
        "metrics": METRIC_NAMES,
        "units": { "tensor": "mm^2/s", "md": "mm^2/s", "fa": "1", "angle": "degrees" },
        "report": report,
        "bland_altman": {
            "fa": { "bias": ba_fa.bias, "lower": ba_fa.lower_limit, "upper": ba_fa.upper_limit },
            "md": { "bias": ba_md.bias, "lower": ba_md.lower_limit, "upper": ba_md.upper_limit },
        },
    });
    rec.write(out.join("metrics.json"), serde_json::to_string_pretty(&json)?.as_bytes())?;
    rec.write(out.join("metrics.csv"), report.to_csv(&a.method).as_bytes())?;
    rec.write(out.join("bland_altman_fa.csv"), ba_fa.to_csv().as_bytes())?;
    rec.write(out.join("bland_altman_md.csv"), ba_md.to_csv().as_bytes())?;
    rec.summary = display_rows(&a.method, &report);
    Ok(rec)
}

fn sweep(a: &SweepArgs, out: &Path) -> Result<Record> {
    let mut rec = Record::default();
    let ph = load_phantom(&a.phantom, &mut rec)?;
    let scheme = load_scheme(&a.scheme, None, &mut rec)?;
    let mask = mask_from_labels(&ph.labels);
    let mut models = Vec::new();
    for &m in &a.methods {
        let path = match m {
            MethodArg::ModelS => Some(require_checkpoint(m, a.checkpoint_s.as_ref(), "--checkpoint-s")?),
            MethodArg::ModelSt => Some(require_checkpoint(m, a.checkpoint_st.as_ref(), "--checkpoint-st")?),
            _ => None,
        };
        let loaded = path.as_ref().map(|p| LoadedModel::load(p, m)).transpose()?;
        if let Some(p) = path {
            rec.inputs.push(p);
        }
        models.push((m, loaded));
    }
    let estimators: Vec<(String, Estimator)> = models
        .iter()
        .map(|(m, loaded)| {
            let (scheme, mask) = (&scheme, &mask);
            let est: Estimator = match (classical(*m), loaded) {
                (Some(c), _) => Box::new(move |dwi: &Volume| Ok(fit_volume(dwi, scheme, c, Some(mask))?.0)),
                (None, Some(l)) => Box::new(move |dwi: &Volume| {
                    predict(l.model(), dwi, scheme, Some(mask), a.stride)
                        .map_err(|e| tensorformer_core::DtiError::InvalidParameter(e.to_string()))
                }),
                (None, None) => unreachable!("learned methods carry a model"),
            };
            (m.name().to_string(), est)
        })
        .collect();
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| a.noise_seed + k).collect();
    let result = noise_sweep(&ph, &scheme, &a.snr, &seeds, &estimators, a.angle_fa_threshold)?;
    rec.seeds.insert("noise".into(), a.noise_seed);
    rec.write(out.join("sweep.json"), serde_json::to_string_pretty(&result)?.as_bytes())?;
    rec.write(out.join("sweep.csv"), result.to_csv().as_bytes())?;
    rec.write(out.join("sweep_summary.csv"), result.summary_csv().as_bytes())?;
    for line in result.summary_csv().lines() {
        rec.summary.push(line.to_string());
    }
    rec.details = json!({ "snr_levels": a.snr, "seeds": seeds, "methods": a.methods });
    Ok(rec)
}
