//! Patch-sequence transformers mapping normalized diffusion signals to
//! diffusion tensors.
//!
//! A cubic patch of side `L` becomes an `L³ x channels` sequence in the
//! row-major voxel order of the patch. Model S embeds the signals, adds a
//! learnable positional encoding, runs a stack of multi-head self-attention
//! modules and projects every element to six tensor channels. Model ST runs
//! two such trunks, one on the signals and one on the frozen Model S
//! estimate, concatenates their outputs and projects to six channels.
//!
//! Model outputs are tensors multiplied by [`TARGET_SCALE`].

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tensorformer_core::dwi::NORMALIZED_RANGE;
use tensorformer_core::Volume4D;

use crate::autodiff::{Init, Matrix, NodeId, ParamId, ParamStore, Tape};
use crate::checkpoint::{load_checkpoint, params_hash, save_checkpoint};
use crate::error::{NnError, Result};
use crate::trainer::he_initialize;

/// Tensors are learned in units of 1e-3 mm²/s.
pub const TARGET_SCALE: f64 = 1000.0;

pub const MODEL_S_KIND: &str = "model-s";
pub const MODEL_ST_KIND: &str = "model-st";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Scores are row-softmaxed before weighting the values.
    Softmax,
    /// Raw scaled scores weight the values directly.
    Unnormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Patch side `L`; sequences have `L³` elements.
    pub patch: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub heads: usize,
    pub layers: usize,
    /// Normalized signal channels per voxel.
    pub signal_channels: usize,
    pub attention: AttentionMode,
    /// Residual connection plus layer normalization after every module.
    pub stabilizers: bool,
    /// Patch stride used when predicting a whole volume.
    pub inference_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 5,
            d_model: 64,
            d_head: 64,
            heads: 2,
            layers: 2,
            signal_channels: 6,
            attention: AttentionMode::Softmax,
            stabilizers: true,
            inference_stride: 1,
        }
    }
}

impl ModelConfig {
    pub fn seq_len(&self) -> usize {
        self.patch.pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("patch", self.patch),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("heads", self.heads),
            ("layers", self.layers),
            ("signal_channels", self.signal_channels),
            ("inference_stride", self.inference_stride),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(NnError::Config(format!("{name} must be positive")));
            }
        }
        if self.inference_stride > self.patch {
            return Err(NnError::Config(format!(
                "inference_stride {} exceeds patch side {}",
                self.inference_stride, self.patch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    /// `[W_Q, W_K, W_V]` per head.
    heads: Vec<[ParamId; 3]>,
    out_w: ParamId,
    out_b: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

/// Embedding, positional encoding and the attention stack.
#[derive(Debug, Clone)]
pub struct Trunk {
    embed_w: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
}

impl Trunk {
    fn register(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, d_in: usize) -> Self {
        let d = cfg.d_model;
        let embed_w = store.add(format!("{prefix}.embed.w"), d_in, d, Init::He);
        let pos = store.add(format!("{prefix}.embed.pos"), cfg.seq_len(), d, Init::Zeros);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("{prefix}.block{i}");
                let heads = (0..cfg.heads)
                    .map(|h| ["wq", "wk", "wv"].map(|w| store.add(format!("{p}.head{h}.{w}"), d, cfg.d_head, Init::He)))
                    .collect();
                let out_w = store.add(format!("{p}.out.w"), cfg.heads * cfg.d_head, d, Init::He);
                let out_b = store.add(format!("{p}.out.b"), 1, d, Init::Zeros);
                let norm = cfg.stabilizers.then(|| {
                    (
                        store.add(format!("{p}.ln.gamma"), 1, d, Init::Ones),
                        store.add(format!("{p}.ln.beta"), 1, d, Init::Zeros),
                    )
                });
                Block {
                    heads,
                    out_w,
                    out_b,
                    norm,
                }
            })
            .collect();
        Self { embed_w, pos, blocks }
    }

    pub fn pos_id(&self) -> ParamId {
        self.pos
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.embed_w);
        let p = tape.param(store, self.pos);
        let e = tape.matmul(x, w)?;
        let mut h = tape.add(e, p)?;
        for b in &self.blocks {
            h = attention_module(tape, store, cfg, b, h)?;
        }
        Ok(h)
    }
}

fn attention_module(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, b: &Block, x: NodeId) -> Result<NodeId> {
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let mut outs = Vec::with_capacity(b.heads.len());
    for ids in &b.heads {
        let [wq, wk, wv] = ids.map(|id| tape.param(store, id));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let raw = tape.matmul_transb(q, k)?;
        let mut scores = tape.scale(raw, scale)?;
        if cfg.attention == AttentionMode::Softmax {
            scores = tape.softmax_rows(scores)?;
        }
        outs.push(tape.matmul(scores, v)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let ow = tape.param(store, b.out_w);
    let ob = tape.param(store, b.out_b);
    let proj = tape.matmul(cat, ow)?;
    let proj = tape.add_row(proj, ob)?;
    let y = tape.relu(proj)?;
    match b.norm {
        None => Ok(y),
        Some((gamma, beta)) => {
            let r = tape.add(x, y)?;
            let n = tape.layer_norm_rows(r)?;
            let g = tape.param(store, gamma);
            let bt = tape.param(store, beta);
            let n = tape.mul_row(n, g)?;
            Ok(tape.add_row(n, bt)?)
        }
    }
}

/// The first-stage estimator: trunk plus a linear six-channel head.
#[derive(Debug, Clone)]
struct SParts {
    trunk: Trunk,
    head_w: ParamId,
    head_b: ParamId,
}

impl SParts {
    fn register(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let trunk = Trunk::register(store, "s", cfg, cfg.signal_channels);
        let head_w = store.add("s.head.w", cfg.d_model, 6, Init::He);
        let head_b = store.add("s.head.b", 1, 6, Init::Zeros);
        Self { trunk, head_w, head_b }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, x: NodeId) -> Result<NodeId> {
        let h = self.trunk.forward(tape, store, cfg, x)?;
        let w = tape.param(store, self.head_w);
        let b = tape.param(store, self.head_b);
        let y = tape.matmul(h, w)?;
        Ok(tape.add_row(y, b)?)
    }
}

fn check_input(cfg: &ModelConfig, x: &Matrix, width: usize, what: &str) -> Result<()> {
    if x.dim() != (cfg.seq_len(), width) {
        return Err(NnError::Config(format!(
            "{what} input has shape {:?}, expected ({}, {width})",
            x.dim(),
            cfg.seq_len()
        )));
    }
    Ok(())
}

/// Common interface for whole-volume prediction.
pub trait TensorModel: Sync {
    fn config(&self) -> &ModelConfig;
    /// Tensor sequence (scaled by [`TARGET_SCALE`]) for one signal patch.
    fn predict_patch(&self, signals: &Matrix) -> Result<Matrix>;
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone)]
pub struct ModelS {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub seed: u64,
    parts: SParts,
}

impl ModelS {
    /// Parameters at their deterministic starting values (He weights,
    /// zero positional encodings and shifts, unit scales).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let parts = SParts::register(&mut store, &config);
        he_initialize(&mut store, seed, |_| true);
        Ok(Self {
            config,
            store,
            seed,
            parts,
        })
    }

    pub fn positional_encoding(&self) -> ParamId {
        self.parts.trunk.pos
    }

    pub fn forward(&self, tape: &mut Tape, signals: NodeId) -> Result<NodeId> {
        self.parts.forward(tape, &self.store, &self.config, signals)
    }

    pub fn hash(&self) -> String {
        params_hash(&self.store, "s.")
    }

    pub fn metadata(&self) -> Value {
        json!({
            "kind": MODEL_S_KIND,
            "config": self.config,
            "seed": self.seed,
            "target_scale": TARGET_SCALE,
            "input_range": [NORMALIZED_RANGE.0, NORMALIZED_RANGE.1],
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.store, self.metadata())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let (config, seed) = read_metadata(&ck.metadata, MODEL_S_KIND)?;
        let mut model = Self::new(config, seed)?;
        ck.apply_to(&mut model.store)?;
        Ok(model)
    }
}

fn read_metadata(meta: &Value, kind: &str) -> Result<(ModelConfig, u64)> {
    let found = meta.get("kind").and_then(Value::as_str).unwrap_or("<none>");
    if found != kind {
        return Err(NnError::Checkpoint(format!("expected a {kind} checkpoint, found {found}")));
    }
    let config: ModelConfig = serde_json::from_value(meta.get("config").cloned().unwrap_or(Value::Null))?;
    let seed = meta.get("seed").and_then(Value::as_u64).unwrap_or(0);
    Ok((config, seed))
}

impl TensorModel for ModelS {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn predict_patch(&self, signals: &Matrix) -> Result<Matrix> {
        check_input(&self.config, signals, self.config.signal_channels, "signal")?;
        let mut tape = Tape::new();
        let x = tape.input(signals.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y)?.clone())
    }

    fn kind(&self) -> &'static str {
        MODEL_S_KIND
    }
}

/// Second-stage estimator. It carries a frozen copy of Model S, whose
/// per-patch output feeds the tensor branch.
#[derive(Debug, Clone)]
pub struct ModelST {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub seed: u64,
    s: SParts,
    signal: Trunk,
    tensor: Trunk,
    head_w: ParamId,
    head_b: ParamId,
}

impl ModelST {
    /// Fresh second-stage parameters around a frozen copy of `model_s`.
    pub fn new(model_s: &ModelS, seed: u64) -> Result<Self> {
        let config = model_s.config.clone();
        let mut store = ParamStore::new();
        let s = SParts::register(&mut store, &config);
        let signal = Trunk::register(&mut store, "st.sig", &config, config.signal_channels);
        let tensor = Trunk::register(&mut store, "st.ten", &config, 6);
        let head_w = store.add("st.head.w", 2 * config.d_model, 6, Init::He);
        let head_b = store.add("st.head.b", 1, 6, Init::Zeros);
        he_initialize(&mut store, seed, |p| p.name.starts_with("st."));
        for (dst, src) in store.iter_mut().zip(model_s.store.iter()) {
            debug_assert_eq!(dst.name, src.name);
            dst.value.assign(&src.value);
            dst.trainable = false;
        }
        Ok(Self {
            config,
            store,
            seed,
            s,
            signal,
            tensor,
            head_w,
            head_b,
        })
    }

    pub fn head_weight(&self) -> ParamId {
        self.head_w
    }

    /// Hash of the embedded Model S parameters.
    pub fn model_s_hash(&self) -> String {
        params_hash(&self.store, "s.")
    }

    /// The embedded first-stage model as a standalone [`ModelS`].
    pub fn model_s(&self) -> Result<ModelS> {
        let mut m = ModelS::new(self.config.clone(), 0)?;
        for (dst, src) in m.store.iter_mut().zip(self.store.iter()) {
            dst.value.assign(&src.value);
        }
        Ok(m)
    }

    /// First-stage estimate for a patch, as fed to the tensor branch.
    pub fn stage_one(&self, signals: &Matrix) -> Result<Matrix> {
        check_input(&self.config, signals, self.config.signal_channels, "signal")?;
        let mut tape = Tape::new();
        let x = tape.input(signals.clone());
        let y = self.s.forward(&mut tape, &self.store, &self.config, x)?;
        Ok(tape.value(y)?.clone())
    }

    pub fn forward(&self, tape: &mut Tape, signals: NodeId, s_tensors: NodeId) -> Result<NodeId> {
        let a = self.signal.forward(tape, &self.store, &self.config, signals)?;
        let b = self.tensor.forward(tape, &self.store, &self.config, s_tensors)?;
        let cat = tape.concat_cols(&[a, b])?;
        let w = tape.param(&self.store, self.head_w);
        let bias = tape.param(&self.store, self.head_b);
        let y = tape.matmul(cat, w)?;
        Ok(tape.add_row(y, bias)?)
    }

    /// Second-stage output given an explicit tensor-branch input.
    pub fn predict_with(&self, signals: &Matrix, s_tensors: &Matrix) -> Result<Matrix> {
        check_input(&self.config, signals, self.config.signal_channels, "signal")?;
        check_input(&self.config, s_tensors, 6, "tensor")?;
        let mut tape = Tape::new();
        let x = tape.input(signals.clone());
        let t = tape.input(s_tensors.clone());
        let y = self.forward(&mut tape, x, t)?;
        Ok(tape.value(y)?.clone())
    }

    pub fn metadata(&self) -> Value {
        json!({
            "kind": MODEL_ST_KIND,
            "config": self.config,
            "seed": self.seed,
            "target_scale": TARGET_SCALE,
            "input_range": [NORMALIZED_RANGE.0, NORMALIZED_RANGE.1],
            "model_s_hash": self.model_s_hash(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.store, self.metadata())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let (config, seed) = read_metadata(&ck.metadata, MODEL_ST_KIND)?;
        let mut model = Self::new(&ModelS::new(config, 0)?, seed)?;
        ck.apply_to(&mut model.store)?;
        for p in model.store.iter_mut() {
            p.trainable = p.name.starts_with("st.");
        }
        if let Some(h) = ck.metadata.get("model_s_hash").and_then(Value::as_str) {
            if h != model.model_s_hash() {
                return Err(NnError::Checkpoint(
                    "embedded first-stage parameters do not match the recorded hash".into(),
                ));
            }
        }
        Ok(model)
    }
}

impl TensorModel for ModelST {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn predict_patch(&self, signals: &Matrix) -> Result<Matrix> {
        let t = self.stage_one(signals)?;
        self.predict_with(signals, &t)
    }

    fn kind(&self) -> &'static str {
        MODEL_ST_KIND
    }
}

/// An `L³ x channels` patch in row-major voxel order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub origin: [usize; 3],
    pub side: usize,
    pub features: Matrix,
}

/// Origins `0, stride, 2·stride, …` plus a final `dim - side` so the
/// whole axis is covered.
pub fn patch_origins(dim: usize, side: usize, stride: usize) -> Result<Vec<usize>> {
    if side == 0 || stride == 0 {
        return Err(NnError::Patch("patch side and stride must be positive".into()));
    }
    if dim < side {
        return Err(NnError::Patch(format!(
            "volume axis of {dim} voxels is smaller than the patch side {side}; use a larger volume or a smaller patch"
        )));
    }
    let mut out: Vec<usize> = (0..=dim - side).step_by(stride).collect();
    if *out.last().unwrap() != dim - side {
        out.push(dim - side);
    }
    Ok(out)
}

fn all_origins(dims: [usize; 3], side: usize, stride: usize) -> Result<Vec<[usize; 3]>> {
    let [ox, oy, oz] = [0, 1, 2].map(|a| patch_origins(dims[a], side, stride));
    let (ox, oy, oz) = (ox?, oy?, oz?);
    let mut out = Vec::with_capacity(ox.len() * oy.len() * oz.len());
    for &x in &ox {
        for &y in &oy {
            for &z in &oz {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Features of the patch at `origin`.
pub fn patch_at(volume: &Volume4D<f64>, origin: [usize; 3], side: usize) -> Matrix {
    let c = volume.channels();
    let mut m = Matrix::zeros((side.pow(3), c));
    let mut row = 0;
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let v = volume.voxel([origin[0] + x, origin[1] + y, origin[2] + z]);
                m.row_mut(row).as_slice_mut().unwrap().copy_from_slice(v);
                row += 1;
            }
        }
    }
    m
}

pub fn extract_patches(volume: &Volume4D<f64>, side: usize, stride: usize) -> Result<Vec<PatchSequence>> {
    Ok(all_origins(volume.dims(), side, stride)?
        .into_iter()
        .map(|origin| PatchSequence {
            origin,
            side,
            features: patch_at(volume, origin, side),
        })
        .collect())
}

/// Scatters patches back onto a grid, averaging voxels covered more than
/// once. Voxels no patch covers stay zero.
pub fn reassemble(patches: &[PatchSequence], dims: [usize; 3], channels: usize) -> Result<Volume4D<f64>> {
    let mut sum = Volume4D::<f64>::zeros(dims, channels);
    let mut count = vec![0u32; sum.voxel_count()];
    for p in patches {
        accumulate(&mut sum, &mut count, p.origin, p.side, &p.features, 1.0)?;
    }
    for (v, &n) in sum.data_mut().chunks_exact_mut(channels).zip(&count) {
        if n > 1 {
            v.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    Ok(sum)
}

fn accumulate(
    sum: &mut Volume4D<f64>,
    count: &mut [u32],
    origin: [usize; 3],
    side: usize,
    features: &Matrix,
    scale: f64,
) -> Result<()> {
    let dims = sum.dims();
    if features.dim() != (side.pow(3), sum.channels()) || (0..3).any(|a| origin[a] + side > dims[a]) {
        return Err(NnError::Patch(format!(
            "patch at {origin:?} with shape {:?} does not fit the {dims:?} grid",
            features.dim()
        )));
    }
    let mut row = 0;
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let c = [origin[0] + x, origin[1] + y, origin[2] + z];
                let i = sum.linear_index(c);
                for (d, &f) in sum.voxel_at_mut(i).iter_mut().zip(features.row(row)) {
                    *d += f * scale;
                }
                count[i] += 1;
                row += 1;
            }
        }
    }
    Ok(())
}

/// Whole-volume tensor estimate in mm²/s. Overlapping patch outputs are
/// averaged per voxel and voxels outside `mask` are zeroed.
pub fn predict_volume<M: TensorModel + ?Sized>(
    model: &M,
    signals: &Volume4D<f64>,
    mask: Option<&[bool]>,
    stride: usize,
) -> Result<Volume4D<f64>> {
    let cfg = model.config();
    if signals.channels() != cfg.signal_channels {
        return Err(NnError::Config(format!(
            "signal volume has {} channels, the model expects {}",
            signals.channels(),
            cfg.signal_channels
        )));
    }
    if let Some(m) = mask {
        if m.len() != signals.voxel_count() {
            return Err(NnError::Config(format!(
                "mask has {} entries for {} voxels",
                m.len(),
                signals.voxel_count()
            )));
        }
    }
    let side = cfg.patch;
    let origins = all_origins(signals.dims(), side, stride)?;
    let mut sum = Volume4D::<f64>::zeros(signals.dims(), 6).with_voxel_size(signals.voxel_size());
    let mut count = vec![0u32; sum.voxel_count()];
    for chunk in origins.chunks(256) {
        let outs = chunk
            .par_iter()
            .map(|&o| model.predict_patch(&patch_at(signals, o, side)))
            .collect::<Result<Vec<_>>>()?;
        for (&o, y) in chunk.iter().zip(&outs) {
            accumulate(&mut sum, &mut count, o, side, y, 1.0)?;
        }
    }
    for (i, v) in sum.data_mut().chunks_exact_mut(6).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            v.fill(0.0);
        } else {
            let k = count[i] as f64 * TARGET_SCALE;
            v.iter_mut().for_each(|x| *x /= k);
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            patch: 2,
            d_model: 8,
            d_head: 4,
            heads: 2,
            layers: 2,
            ..ModelConfig::default()
        }
    }

    fn ramp(rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 + 0.05)
    }

    #[test]
    fn origins_cover_axis() {
        assert_eq!(patch_origins(5, 5, 5).unwrap(), vec![0]);
        assert_eq!(patch_origins(10, 5, 5).unwrap(), vec![0, 5]);
        assert_eq!(patch_origins(12, 5, 5).unwrap(), vec![0, 5, 7]);
        assert_eq!(patch_origins(7, 5, 1).unwrap(), vec![0, 1, 2]);
        assert!(matches!(patch_origins(2, 5, 5), Err(NnError::Patch(_))));
    }

    #[test]
    fn extract_counts_and_order() {
        let v = Volume4D::<f64>::from_voxels([10, 5, 5], 1, |c, out| out[0] = (c[0] * 100 + c[1] * 10 + c[2]) as f64);
        let p = extract_patches(&v, 5, 5).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].features.nrows(), 125);
        assert_eq!(p[1].origin, [5, 0, 0]);
        assert_eq!(p[1].features[[0, 0]], 500.0);
        assert_eq!(p[1].features[[1, 0]], 501.0);
        assert_eq!(p[1].features[[5, 0]], 510.0);
    }

    #[test]
    fn parameter_shapes() {
        let m = ModelS::new(small(), 1).unwrap();
        let st = ModelST::new(&m, 2).unwrap();
        let shape = |s: &ParamStore, n: &str| s.value(s.find(n).unwrap()).dim();
        assert_eq!(shape(&m.store, "s.embed.pos"), (8, 8));
        assert_eq!(shape(&m.store, "s.block1.head1.wq"), (8, 4));
        assert_eq!(shape(&m.store, "s.block0.out.w"), (8, 8));
        assert_eq!(shape(&st.store, "st.head.w"), (16, 6));
        assert_eq!(shape(&st.store, "st.ten.embed.w"), (6, 8));
        assert!(st.store.iter().filter(|p| p.name.starts_with("s.")).all(|p| !p.trainable));
        assert_eq!(st.model_s_hash(), m.hash());
    }

    #[test]
    fn output_shapes_and_input_checks() {
        let m = ModelS::new(small(), 1).unwrap();
        assert_eq!(m.predict_patch(&ramp(8, 6)).unwrap().dim(), (8, 6));
        assert!(m.predict_patch(&ramp(9, 6)).is_err());
        let st = ModelST::new(&m, 2).unwrap();
        assert_eq!(st.predict_patch(&ramp(8, 6)).unwrap().dim(), (8, 6));
    }

    #[test]
    fn single_element_attends_to_itself() {
        let cfg = ModelConfig {
            patch: 1,
            d_model: 4,
            d_head: 3,
            heads: 1,
            layers: 1,
            stabilizers: false,
            ..ModelConfig::default()
        };
        let m = ModelS::new(cfg.clone(), 3).unwrap();
        let x = ramp(1, 6);
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let out = m.forward(&mut tape, xn).unwrap();
        let st = &m.store;
        let get = |n: &str| st.value(st.find(n).unwrap()).clone();
        let h0 = x.dot(&get("s.embed.w")) + get("s.embed.pos");
        let v = h0.dot(&get("s.block0.head0.wv"));
        let y = (v.dot(&get("s.block0.out.w")) + get("s.block0.out.b")).mapv(|a| a.max(0.0));
        let want = y.dot(&get("s.head.w")) + get("s.head.b");
        let got = tape.value(out).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_overlapping_reassembly_is_exact() {
        let v = Volume4D::<f64>::from_voxels([10, 5, 6], 2, |c, out| {
            out[0] = (c[0] as f64).sin() + c[2] as f64 / 7.0;
            out[1] = c[1] as f64 * 0.3;
        });
        let p = extract_patches(&v, 5, 5).unwrap();
        let back = reassemble(&p, v.dims(), 2).unwrap();
        assert_eq!(back.data(), v.data());
        let p1 = extract_patches(&v, 3, 1).unwrap();
        let back1 = reassemble(&p1, v.dims(), 2).unwrap();
        for (a, b) in back1.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelS::new(small(), 5).unwrap();
        let st = ModelST::new(&m, 6).unwrap();
        m.save(dir.path().join("s.ckpt")).unwrap();
        st.save(dir.path().join("st.ckpt")).unwrap();
        let m2 = ModelS::load(dir.path().join("s.ckpt")).unwrap();
        let st2 = ModelST::load(dir.path().join("st.ckpt")).unwrap();
        let x = ramp(8, 6);
        assert_eq!(m.predict_patch(&x).unwrap(), m2.predict_patch(&x).unwrap());
        assert_eq!(st.predict_patch(&x).unwrap(), st2.predict_patch(&x).unwrap());
        assert!(ModelS::load(dir.path().join("st.ckpt")).is_err());
        assert_eq!(st2.model_s().unwrap().hash(), m.hash());
    }

    #[test]
    fn predict_volume_rejects_wrong_channels() {
        let m = ModelS::new(small(), 1).unwrap();
        let v = Volume4D::<f64>::zeros([4, 4, 4], 5);
        assert!(matches!(predict_volume(&m, &v, None, 1), Err(NnError::Config(_))));
    }
}
