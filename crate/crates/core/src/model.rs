//! The forecaster: configuration and variants, the named parameter registry,
//! the end-to-end forward pass, and checkpointing.
//!
//! The full model concatenates feature, periodicity, and adaptive embeddings
//! into a hidden block, runs a stack of temporal encoder layers followed by a
//! stack of spatial ones, then regresses each node's flattened hidden window
//! onto the output horizon with one shared affine head. Variants switch off
//! individual pieces:
//!
//! - `no-adaptive` drops the adaptive table;
//! - `no-periodicity` drops the calendar tables;
//! - `no-temporal` drops the temporal layer stack;
//! - `no-transformer` drops both stacks (embeddings straight into the head);
//! - `spatial-embedding` replaces the per-(frame, node) adaptive table with a
//!   per-node one, removing the time axis from the learned identity.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Normalizer};
use crate::embedding::{self, DAY_SLOTS, TIME_SLOTS};
use crate::error::{Error, Result};
use crate::stts::atomic_write;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{encoder_layer, AttentionAxis, AttentionScale, LayerVars};

// ── configuration ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    NoAdaptive,
    NoPeriodicity,
    NoTemporal,
    NoTransformer,
    SpatialEmbedding,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoAdaptive,
        Variant::NoPeriodicity,
        Variant::NoTemporal,
        Variant::NoTransformer,
        Variant::SpatialEmbedding,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAdaptive => "no-adaptive",
            Variant::NoPeriodicity => "no-periodicity",
            Variant::NoTemporal => "no-temporal",
            Variant::NoTransformer => "no-transformer",
            Variant::SpatialEmbedding => "spatial-embedding",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of {}",
                    Variant::ALL.map(|v| v.as_str()).join(", ")
                ))
            })
    }
}

impl FromStr for AttentionScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-head" => Ok(AttentionScale::PerHead),
            "model-dim" => Ok(AttentionScale::ModelDim),
            other => Err(Error::Config(format!(
                "unknown scale mode {other:?}; expected per-head or model-dim"
            ))),
        }
    }
}

impl fmt::Display for AttentionScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionScale::PerHead => "per-head",
            AttentionScale::ModelDim => "model-dim",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Input window length.
    pub input_len: usize,
    /// Forecast horizon length.
    pub output_len: usize,
    pub nodes: usize,
    /// Width of the feature embedding and of each calendar table.
    pub feature_dim: usize,
    /// Width of the adaptive (or node) table.
    pub adaptive_dim: usize,
    pub heads: usize,
    /// Encoder layers per stack.
    pub layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub scale_mode: AttentionScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            input_len: 12,
            output_len: 12,
            nodes: 0,
            feature_dim: 24,
            adaptive_dim: 80,
            heads: 4,
            layers: 3,
            ffn_dim: 256,
            dropout: 0.1,
            scale_mode: AttentionScale::PerHead,
        }
    }
}

impl ModelConfig {
    pub fn has_periodicity(&self) -> bool {
        self.variant != Variant::NoPeriodicity
    }

    pub fn has_adaptive(&self) -> bool {
        !matches!(self.variant, Variant::NoAdaptive | Variant::SpatialEmbedding)
    }

    pub fn has_node_table(&self) -> bool {
        self.variant == Variant::SpatialEmbedding
    }

    pub fn temporal_layers(&self) -> usize {
        match self.variant {
            Variant::NoTemporal | Variant::NoTransformer => 0,
            _ => self.layers,
        }
    }

    pub fn spatial_layers(&self) -> usize {
        match self.variant {
            Variant::NoTransformer => 0,
            _ => self.layers,
        }
    }

    /// Channel width of the assembled hidden block: the sum of the widths of
    /// the embeddings the variant keeps.
    pub fn hidden_dim(&self) -> usize {
        let mut d = self.feature_dim;
        if self.has_periodicity() {
            d += 2 * self.feature_dim;
        }
        if self.has_adaptive() || self.has_node_table() {
            d += self.adaptive_dim;
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_len", self.input_len),
            ("output_len", self.output_len),
            ("nodes", self.nodes),
            ("feature_dim", self.feature_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if (self.has_adaptive() || self.has_node_table()) && self.adaptive_dim == 0 {
            return Err(Error::Config("adaptive_dim must be positive for this variant".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let hidden = self.hidden_dim();
        if hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads = {} must divide the hidden width {hidden} (variant {})",
                self.heads, self.variant
            )));
        }
        Ok(())
    }
}

// ── parameter registry ──

/// Flat ordered registry of named parameter tensors. Construction order is
/// fixed per config, which makes checkpoints positional and seeds
/// reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.entries.push((name, tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

// ── architecture slots ──

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    norm1_gain: usize,
    norm1_bias: usize,
    norm2_gain: usize,
    norm2_bias: usize,
}

impl LayerSlots {
    fn bind(&self, vars: &[Var]) -> LayerVars {
        LayerVars {
            wq: vars[self.wq],
            wk: vars[self.wk],
            wv: vars[self.wv],
            wo: vars[self.wo],
            ffn_w1: vars[self.ffn_w1],
            ffn_b1: vars[self.ffn_b1],
            ffn_w2: vars[self.ffn_w2],
            ffn_b2: vars[self.ffn_b2],
            norm1_gain: vars[self.norm1_gain],
            norm1_bias: vars[self.norm1_bias],
            norm2_gain: vars[self.norm2_gain],
            norm2_bias: vars[self.norm2_bias],
        }
    }
}

#[derive(Debug, Clone)]
struct Slots {
    feature_w: usize,
    feature_b: usize,
    day_table: Option<usize>,
    time_table: Option<usize>,
    adaptive: Option<usize>,
    node_table: Option<usize>,
    temporal: Vec<LayerSlots>,
    spatial: Vec<LayerSlots>,
    head_w: usize,
    head_b: usize,
}

enum Init {
    Seeded(u64),
    Zeroed,
}

// ── model ──

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    slots: Slots,
}

impl Model {
    /// Builds a model with seeded Glorot/zero/one initialization. Identical
    /// config and seed always produce identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        Model::build(config, Init::Seeded(seed))
    }

    fn build(config: ModelConfig, init: Init) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(match init {
            Init::Seeded(s) => s,
            Init::Zeroed => 0,
        });
        let zeroed = matches!(init, Init::Zeroed);
        let mut params = ParamStore::default();
        let glorot = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            if zeroed {
                Tensor::zeros(shape)
            } else {
                Tensor::glorot_uniform(shape, rng)
            }
        };

        let d = config.hidden_dim();
        let (t_in, t_out, n) = (config.input_len, config.output_len, config.nodes);

        let feature_w = params.push("feature.weight".into(), glorot(vec![1, config.feature_dim], &mut rng));
        let feature_b = params.push("feature.bias".into(), Tensor::zeros(vec![config.feature_dim]));

        let (day_table, time_table) = if config.has_periodicity() {
            (
                Some(params.push(
                    "periodicity.day_of_week".into(),
                    glorot(vec![DAY_SLOTS, config.feature_dim], &mut rng),
                )),
                Some(params.push(
                    "periodicity.time_of_day".into(),
                    glorot(vec![TIME_SLOTS, config.feature_dim], &mut rng),
                )),
            )
        } else {
            (None, None)
        };

        let adaptive = config
            .has_adaptive()
            .then(|| params.push("adaptive.table".into(), glorot(vec![t_in, n, config.adaptive_dim], &mut rng)));
        let node_table = config
            .has_node_table()
            .then(|| params.push("node.table".into(), glorot(vec![n, config.adaptive_dim], &mut rng)));

        let stack = |prefix: &str, count: usize, params: &mut ParamStore, rng: &mut ChaCha8Rng| {
            (0..count)
                .map(|i| LayerSlots {
                    wq: params.push(format!("{prefix}.{i}.attn.query"), glorot(vec![d, d], rng)),
                    wk: params.push(format!("{prefix}.{i}.attn.key"), glorot(vec![d, d], rng)),
                    wv: params.push(format!("{prefix}.{i}.attn.value"), glorot(vec![d, d], rng)),
                    wo: params.push(format!("{prefix}.{i}.attn.output"), glorot(vec![d, d], rng)),
                    ffn_w1: params.push(format!("{prefix}.{i}.ffn.w1"), glorot(vec![d, config.ffn_dim], rng)),
                    ffn_b1: params.push(format!("{prefix}.{i}.ffn.b1"), Tensor::zeros(vec![config.ffn_dim])),
                    ffn_w2: params.push(format!("{prefix}.{i}.ffn.w2"), glorot(vec![config.ffn_dim, d], rng)),
                    ffn_b2: params.push(format!("{prefix}.{i}.ffn.b2"), Tensor::zeros(vec![d])),
                    norm1_gain: params.push(format!("{prefix}.{i}.norm1.gain"), Tensor::full(vec![d], 1.0)),
                    norm1_bias: params.push(format!("{prefix}.{i}.norm1.bias"), Tensor::zeros(vec![d])),
                    norm2_gain: params.push(format!("{prefix}.{i}.norm2.gain"), Tensor::full(vec![d], 1.0)),
                    norm2_bias: params.push(format!("{prefix}.{i}.norm2.bias"), Tensor::zeros(vec![d])),
                })
                .collect::<Vec<_>>()
        };
        let temporal = stack("temporal", config.temporal_layers(), &mut params, &mut rng);
        let spatial = stack("spatial", config.spatial_layers(), &mut params, &mut rng);

        let head_w = params.push("head.weight".into(), glorot(vec![t_in * d, t_out], &mut rng));
        let head_b = params.push("head.bias".into(), Tensor::zeros(vec![t_out]));

        Ok(Model {
            config,
            params,
            slots: Slots {
                feature_w,
                feature_b,
                day_table,
                time_table,
                adaptive,
                node_table,
                temporal,
                spatial,
                head_w,
                head_b,
            },
        })
    }

    /// Total scalar parameter count of a model with this config.
    pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
        Ok(Model::build(*config, Init::Zeroed)?.params.total_values())
    }

    /// Binds every parameter onto a tape in registry order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.leaf(t, trainable)).collect()
    }

    /// Runs the model on a collated batch of normalized inputs, producing
    /// normalized predictions of shape `(batch, output_len, nodes, 1)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch.input_len != cfg.input_len || batch.nodes != cfg.nodes {
            return Err(Error::Contract(format!(
                "batch geometry ({} steps, {} nodes) does not match the model ({}, {})",
                batch.input_len, batch.nodes, cfg.input_len, cfg.nodes
            )));
        }
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound parameters, model has {}",
                vars.len(),
                self.params.len()
            )));
        }
        let (b, t, n) = (batch.size, cfg.input_len, cfg.nodes);
        let x = tape.leaf_from(vec![b, t, n, 1], batch.x.clone(), false)?;

        let mut parts = vec![embedding::feature_embed(
            tape,
            x,
            vars[self.slots.feature_w],
            vars[self.slots.feature_b],
        )?];
        if let (Some(day), Some(time)) = (self.slots.day_table, self.slots.time_table) {
            parts.push(embedding::periodicity_embed(
                tape,
                vars[day],
                vars[time],
                &batch.day,
                &batch.time,
                b,
                t,
                n,
            )?);
        }
        if let Some(slot) = self.slots.adaptive {
            parts.push(embedding::adaptive_embed(tape, vars[slot], b)?);
        }
        if let Some(slot) = self.slots.node_table {
            parts.push(embedding::node_embed(tape, vars[slot], b, t)?);
        }
        let mut z = embedding::assemble(tape, &parts)?;

        for slots in &self.slots.temporal {
            let lv = slots.bind(vars);
            z = encoder_layer(
                tape,
                z,
                AttentionAxis::Time,
                &lv,
                cfg.heads,
                cfg.scale_mode,
                cfg.dropout,
                train,
                rng,
            )?;
        }
        for slots in &self.slots.spatial {
            let lv = slots.bind(vars);
            z = encoder_layer(
                tape,
                z,
                AttentionAxis::Space,
                &lv,
                cfg.heads,
                cfg.scale_mode,
                cfg.dropout,
                train,
                rng,
            )?;
        }

        let d = cfg.hidden_dim();
        let per_node = tape.transpose(z, &[0, 2, 1, 3])?;
        let flat = tape.reshape(per_node, vec![b, n, t * d])?;
        let proj = tape.matmul(flat, vars[self.slots.head_w])?;
        let proj = tape.add(proj, vars[self.slots.head_b])?;
        let out = tape.transpose(proj, &[0, 2, 1])?;
        tape.reshape(out, vec![b, cfg.output_len, n, 1])
    }

    /// Convenience inference: fresh tape, eval mode, de-normalized output
    /// tensor of shape `(batch, output_len, nodes, 1)`.
    pub fn predict(&self, batch: &Batch, norm: &Normalizer) -> Result<Tensor> {
        self.predict_into(&mut Tape::new(), batch, norm)
    }

    /// Like [`Model::predict`] but reuses `tape` (cleared first), so a loop
    /// over batches recycles its buffers.
    pub fn predict_into(&self, tape: &mut Tape, batch: &Batch, norm: &Normalizer) -> Result<Tensor> {
        tape.clear();
        let vars = self.bind(tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred = self.forward(tape, &vars, batch, false, &mut rng)?;
        let denorm = tape.affine(pred, norm.std, norm.mean);
        Ok(tape.value_tensor(denorm))
    }

    /// Fetches a copy of one embedding table for dumping or analysis.
    pub fn embedding_table(&self, kind: EmbeddingKind) -> Result<(&'static str, Tensor)> {
        let (label, slot) = match kind {
            EmbeddingKind::Adaptive => ("adaptive.table", self.slots.adaptive),
            EmbeddingKind::Node => ("node.table", self.slots.node_table),
            EmbeddingKind::DayOfWeek => ("periodicity.day_of_week", self.slots.day_table),
            EmbeddingKind::TimeOfDay => ("periodicity.time_of_day", self.slots.time_table),
        };
        match slot {
            Some(i) => Ok((label, self.params.tensor(i).clone())),
            None => Err(Error::Config(format!(
                "variant {} has no {label} table",
                self.config.variant
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Adaptive,
    Node,
    DayOfWeek,
    TimeOfDay,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Adaptive => "adaptive",
            EmbeddingKind::Node => "node",
            EmbeddingKind::DayOfWeek => "day-of-week",
            EmbeddingKind::TimeOfDay => "time-of-day",
        }
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(EmbeddingKind::Adaptive),
            "node" => Ok(EmbeddingKind::Node),
            "day-of-week" => Ok(EmbeddingKind::DayOfWeek),
            "time-of-day" => Ok(EmbeddingKind::TimeOfDay),
            other => Err(Error::Config(format!(
                "unknown embedding {other:?}; expected adaptive, node, day-of-week, or time-of-day"
            ))),
        }
    }
}

// ── checkpointing ──

/// A loaded checkpoint: the model plus the scaler and training progress it
/// was saved with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub normalizer: Normalizer,
    pub trained_epochs: usize,
}

const MANIFEST_VERSION_LINE: &str = "stae-checkpoint v1";

pub fn manifest_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".blob");
    PathBuf::from(p)
}

/// Saves `<prefix>.manifest` (text: config, normalizer, progress, and the
/// parameter table with byte offsets) and `<prefix>.blob` (all parameter
/// values as little-endian f64 in manifest order). Writes are atomic and the
/// blob lands before the manifest.
pub fn save_checkpoint(model: &Model, norm: &Normalizer, trained_epochs: usize, prefix: &Path) -> Result<()> {
    let cfg = &model.config;
    let mut manifest = String::new();
    manifest.push_str(MANIFEST_VERSION_LINE);
    manifest.push('\n');
    manifest.push_str("[config]\n");
    manifest.push_str(&format!("variant = {}\n", cfg.variant));
    manifest.push_str(&format!("input_len = {}\n", cfg.input_len));
    manifest.push_str(&format!("output_len = {}\n", cfg.output_len));
    manifest.push_str(&format!("nodes = {}\n", cfg.nodes));
    manifest.push_str(&format!("feature_dim = {}\n", cfg.feature_dim));
    manifest.push_str(&format!("adaptive_dim = {}\n", cfg.adaptive_dim));
    manifest.push_str(&format!("heads = {}\n", cfg.heads));
    manifest.push_str(&format!("layers = {}\n", cfg.layers));
    manifest.push_str(&format!("ffn_dim = {}\n", cfg.ffn_dim));
    manifest.push_str(&format!("dropout = {}\n", cfg.dropout));
    manifest.push_str(&format!("scale_mode = {}\n", cfg.scale_mode));
    manifest.push_str("[normalizer]\n");
    manifest.push_str(&format!("mean = {}\n", norm.mean));
    manifest.push_str(&format!("std = {}\n", norm.std));
    manifest.push_str("[meta]\n");
    manifest.push_str(&format!("trained_epochs = {trained_epochs}\n"));
    manifest.push_str("[params]\n");

    let mut blob = Vec::with_capacity(model.params.total_values() * 8);
    for (name, tensor) in model.params.iter() {
        let shape = tensor
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!("{name} {shape} {}\n", blob.len()));
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    atomic_write(&blob_path(prefix), &blob)?;
    atomic_write(&manifest_path(prefix), manifest.as_bytes())
}

fn manifest_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Loads a checkpoint saved by [`save_checkpoint`], rebuilding the model from
/// the recorded config and verifying every parameter name, shape, and offset
/// against the blob.
pub fn load_checkpoint(prefix: &Path) -> Result<Checkpoint> {
    let mpath = manifest_path(prefix);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_VERSION_LINE) {
        return Err(manifest_err(&mpath, "not a stae-checkpoint v1 manifest"));
    }

    #[derive(Default)]
    struct Raw {
        config: Vec<(String, String)>,
        normalizer: Vec<(String, String)>,
        meta: Vec<(String, String)>,
        params: Vec<(String, Vec<usize>, usize)>,
    }
    let mut raw = Raw::default();
    let mut section = String::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].to_string();
            continue;
        }
        if section == "params" {
            let mut it = line.split_whitespace();
            let (name, shape, offset) = (it.next(), it.next(), it.next());
            let (name, shape, offset) = match (name, shape, offset, it.next()) {
                (Some(n), Some(s), Some(o), None) => (n, s, o),
                _ => return Err(manifest_err(&mpath, format!("malformed param line {}", lineno + 2))),
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| manifest_err(&mpath, format!("bad shape in param line {}", lineno + 2)))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| manifest_err(&mpath, format!("bad offset in param line {}", lineno + 2)))?;
            raw.params.push((name.to_string(), shape, offset));
        } else {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| manifest_err(&mpath, format!("expected key = value at line {}", lineno + 2)))?;
            let pair = (key.trim().to_string(), value.trim().to_string());
            match section.as_str() {
                "config" => raw.config.push(pair),
                "normalizer" => raw.normalizer.push(pair),
                "meta" => raw.meta.push(pair),
                other => return Err(manifest_err(&mpath, format!("unknown section [{other}]"))),
            }
        }
    }

    let lookup = |entries: &[(String, String)], key: &str| -> Result<String> {
        entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| manifest_err(&mpath, format!("missing key {key}")))
    };
    let parse_usize = |entries: &[(String, String)], key: &str| -> Result<usize> {
        lookup(entries, key)?
            .parse()
            .map_err(|_| manifest_err(&mpath, format!("{key} is not an integer")))
    };
    let parse_f64 = |entries: &[(String, String)], key: &str| -> Result<f64> {
        lookup(entries, key)?
            .parse()
            .map_err(|_| manifest_err(&mpath, format!("{key} is not a number")))
    };

    let config = ModelConfig {
        variant: lookup(&raw.config, "variant")?.parse()?,
        input_len: parse_usize(&raw.config, "input_len")?,
        output_len: parse_usize(&raw.config, "output_len")?,
        nodes: parse_usize(&raw.config, "nodes")?,
        feature_dim: parse_usize(&raw.config, "feature_dim")?,
        adaptive_dim: parse_usize(&raw.config, "adaptive_dim")?,
        heads: parse_usize(&raw.config, "heads")?,
        layers: parse_usize(&raw.config, "layers")?,
        ffn_dim: parse_usize(&raw.config, "ffn_dim")?,
        dropout: parse_f64(&raw.config, "dropout")?,
        scale_mode: lookup(&raw.config, "scale_mode")?.parse()?,
    };
    let normalizer = Normalizer {
        mean: parse_f64(&raw.normalizer, "mean")?,
        std: parse_f64(&raw.normalizer, "std")?,
    };
    if normalizer.std <= 0.0 {
        return Err(manifest_err(&mpath, format!("normalizer std {} must be positive", normalizer.std)));
    }
    let trained_epochs = parse_usize(&raw.meta, "trained_epochs")?;

    let bpath = blob_path(prefix);
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

    let mut model = Model::build(config, Init::Zeroed)?;
    if raw.params.len() != model.params.len() {
        return Err(manifest_err(
            &mpath,
            format!(
                "manifest lists {} parameters, config implies {}",
                raw.params.len(),
                model.params.len()
            ),
        ));
    }
    let mut expected_offset = 0usize;
    for (i, (name, shape, offset)) in raw.params.iter().enumerate() {
        if name != model.params.name(i) {
            return Err(manifest_err(
                &mpath,
                format!("parameter {i} is {name:?}, config implies {:?}", model.params.name(i)),
            ));
        }
        let tensor = model.params.tensor_mut(i);
        if shape != tensor.shape() {
            return Err(manifest_err(
                &mpath,
                format!("{name}: manifest shape {shape:?} vs config shape {:?}", tensor.shape()),
            ));
        }
        if *offset != expected_offset {
            return Err(manifest_err(
                &mpath,
                format!("{name}: offset {offset} does not match running layout {expected_offset}"),
            ));
        }
        let bytes = tensor.numel() * 8;
        let end = offset + bytes;
        if end > blob.len() {
            return Err(Error::Checkpoint {
                path: bpath.clone(),
                detail: format!("blob truncated: {name} needs bytes {offset}..{end}, blob has {}", blob.len()),
            });
        }
        for (slot, chunk) in tensor.data_mut().iter_mut().zip(blob[*offset..end].chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(Error::Checkpoint {
            path: bpath,
            detail: format!("blob holds {} bytes, parameters account for {expected_offset}", blob.len()),
        });
    }

    Ok(Checkpoint {
        model,
        normalizer,
        trained_epochs,
    })
}
