//! Probes on trained models: the variant ablation battery, the
//! temporal-shuffle degradation comparison, frame-to-frame correlation of the
//! adaptive table, and raw embedding dumps.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{chronological_split, Normalizer, SplitSpec, TrafficDataset, WindowSet};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, evaluate_shuffled, EvalConfig};
use crate::model::{Checkpoint, EmbeddingKind, Model, ModelConfig, Variant};
use crate::stts;
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig};

// ── ablation battery ──

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub parameter_count: usize,
    pub hidden_dim: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// `"ok"`, or the error that took this variant out of the battery.
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    /// Trained best models, aligned with `rows`; `None` where training failed.
    pub models: Vec<Option<Model>>,
    pub normalizer: Normalizer,
}

impl AblationOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,parameters,hidden_dim,mae,rmse,mape,best_epoch,epochs_run,status\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.variant,
                r.parameter_count,
                r.hidden_dim,
                r.mae,
                r.rmse,
                r.mape,
                r.best_epoch,
                r.epochs_run,
                r.status
            ));
        }
        out
    }

    pub fn model_for(&self, variant: Variant) -> Option<&Model> {
        self.rows
            .iter()
            .position(|r| r.variant == variant)
            .and_then(|i| self.models[i].as_ref())
    }

    pub fn row_for(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains every requested variant with identical splits, seed, and schedule,
/// then scores each on the test segment. A variant that fails to build or
/// train gets its error recorded in `status` without aborting the battery.
pub fn run_ablation(
    dataset: &TrafficDataset,
    split: SplitSpec,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<AblationOutcome> {
    if variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    let [train_ds, val_ds, test_ds] = chronological_split(dataset, split);
    let normalizer = Normalizer::fit(&train_ds.values)?;
    let (t_in, t_out) = (base.input_len, base.output_len);
    let train_ws = WindowSet::new(&train_ds, t_in, t_out)?;
    let val_ws = WindowSet::new(&val_ds, t_in, t_out)?;
    let test_ws = WindowSet::new(&test_ds, t_in, t_out)?;
    let eval_cfg = EvalConfig {
        null_value: train_cfg.null_value,
        mape_epsilon: train_cfg.mape_epsilon,
        batch_size: train_cfg.eval_batch_size,
        threads: train_cfg.threads,
    };

    let mut rows = Vec::with_capacity(variants.len());
    let mut models = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = ModelConfig { variant, ..*base };
        let attempt = (|| -> Result<(Model, AblationRow)> {
            let mut model = Model::new(cfg, train_cfg.seed)?;
            let outcome = train(&mut model, &train_ws, &val_ws, &normalizer, train_cfg)?;
            let report = evaluate(&model, &test_ws, &normalizer, &eval_cfg)?;
            let row = AblationRow {
                variant,
                parameter_count: model.params.total_values(),
                hidden_dim: cfg.hidden_dim(),
                mae: report.mae,
                rmse: report.rmse,
                mape: report.mape,
                best_epoch: outcome.best_epoch,
                epochs_run: outcome.history.len(),
                status: "ok".into(),
            };
            Ok((model, row))
        })();
        match attempt {
            Ok((model, row)) => {
                rows.push(row);
                models.push(Some(model));
            }
            Err(e) => {
                rows.push(AblationRow {
                    variant,
                    parameter_count: Model::parameter_count(&cfg).unwrap_or(0),
                    hidden_dim: cfg.hidden_dim(),
                    mae: f64::NAN,
                    rmse: f64::NAN,
                    mape: f64::NAN,
                    best_epoch: 0,
                    epochs_run: 0,
                    status: format!("error: {e}"),
                });
                models.push(None);
            }
        }
    }
    Ok(AblationOutcome {
        rows,
        models,
        normalizer,
    })
}

// ── shuffle probe ──

#[derive(Debug, Clone, Copy)]
pub struct ProbeRow {
    pub intact_mae: f64,
    pub mean_shuffled_mae: f64,
    /// Relative degradation `(shuffled − intact) / intact`.
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct ShuffleReport {
    pub adaptive: ProbeRow,
    pub node_only: ProbeRow,
    /// `adaptive.delta / node_only.delta`; meaningful when both are positive.
    pub ratio: f64,
    pub permutations: usize,
}

impl ShuffleReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,intact_mae,mean_shuffled_mae,relative_degradation\n");
        for (name, row) in [("adaptive", &self.adaptive), ("node-only", &self.node_only)] {
            out.push_str(&format!(
                "{},{},{},{}\n",
                name, row.intact_mae, row.mean_shuffled_mae, row.delta
            ));
        }
        out
    }
}

fn probe_one(
    ck: &Checkpoint,
    windows: &WindowSet,
    eval_cfg: &EvalConfig,
    perms: &[Vec<usize>],
) -> Result<ProbeRow> {
    if ck.trained_epochs == 0 {
        return Err(Error::Data(
            "shuffle probe needs a trained checkpoint; this one records zero training epochs".into(),
        ));
    }
    let intact = evaluate(&ck.model, windows, &ck.normalizer, eval_cfg)?.mae;
    if perms.is_empty() {
        return Ok(ProbeRow {
            intact_mae: intact,
            mean_shuffled_mae: intact,
            delta: 0.0,
        });
    }
    let mut sum = 0.0;
    for perm in perms {
        sum += evaluate_shuffled(&ck.model, windows, &ck.normalizer, eval_cfg, Some(perm))?.mae;
    }
    let mean = sum / perms.len() as f64;
    Ok(ProbeRow {
        intact_mae: intact,
        mean_shuffled_mae: mean,
        delta: (mean - intact) / intact,
    })
}

/// Compares how much random frame shuffling of the input window hurts a model
/// with the spatio-temporal adaptive table against one with the node-only
/// table. Both are scored on the same windows and the same permutations.
pub fn shuffle_probe_with_perms(
    adaptive: &Checkpoint,
    node_only: &Checkpoint,
    windows: &WindowSet,
    eval_cfg: &EvalConfig,
    perms: &[Vec<usize>],
) -> Result<ShuffleReport> {
    let a = probe_one(adaptive, windows, eval_cfg, perms)?;
    let n = probe_one(node_only, windows, eval_cfg, perms)?;
    Ok(ShuffleReport {
        adaptive: a,
        node_only: n,
        ratio: a.delta / n.delta,
        permutations: perms.len(),
    })
}

pub fn random_frame_perms(input_len: usize, n_perms: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_perms)
        .map(|_| {
            let mut p: Vec<usize> = (0..input_len).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect()
}

pub fn shuffle_probe(
    adaptive: &Checkpoint,
    node_only: &Checkpoint,
    windows: &WindowSet,
    eval_cfg: &EvalConfig,
    n_perms: usize,
    seed: u64,
) -> Result<ShuffleReport> {
    let perms = random_frame_perms(adaptive.model.config.input_len, n_perms, seed);
    shuffle_probe_with_perms(adaptive, node_only, windows, eval_cfg, &perms)
}

// ── frame correlation ──

#[derive(Debug, Clone)]
pub struct FrameCorrelation {
    pub frames: usize,
    /// Row-major `(frames, frames)` Pearson coefficients; entries touching an
    /// undefined (zero-variance) frame are NaN and flagged in `defined`.
    pub matrix: Vec<f64>,
    pub defined: Vec<bool>,
}

impl FrameCorrelation {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.frames + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.frames {
            let row: Vec<String> = (0..self.frames)
                .map(|j| {
                    let v = self.at(i, j);
                    if v.is_nan() {
                        String::new()
                    } else {
                        format!("{v}")
                    }
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// P6 pixmap: +1 red, 0 white, −1 blue, undefined gray.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.frames, self.frames).into_bytes();
        for i in 0..self.frames {
            for j in 0..self.frames {
                let v = self.at(i, j);
                let px = if v.is_nan() {
                    [128, 128, 128]
                } else {
                    let c = v.clamp(-1.0, 1.0);
                    let fade = ((1.0 - c.abs()) * 255.0).round() as u8;
                    if c >= 0.0 {
                        [255, fade, fade]
                    } else {
                        [fade, fade, 255]
                    }
                };
                out.extend_from_slice(&px);
            }
        }
        out
    }
}

/// Pearson correlation between every pair of frames of a `(T, N, width)`
/// table, each frame flattened over its node and channel axes. The matrix is
/// exactly symmetric with a unit diagonal; zero-variance frames are marked
/// undefined rather than poisoning their neighbors.
pub fn frame_correlation(table: &Tensor) -> Result<FrameCorrelation> {
    let shape = table.shape();
    if shape.len() != 3 {
        return Err(Error::Contract(format!(
            "frame correlation expects a (frames, nodes, width) table, got shape {shape:?}"
        )));
    }
    let (t, row_len) = (shape[0], shape[1] * shape[2]);
    let rows: Vec<&[f64]> = (0..t).map(|i| &table.data()[i * row_len..(i + 1) * row_len]).collect();

    let means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / row_len as f64).collect();
    let sds: Vec<f64> = rows
        .iter()
        .zip(&means)
        .map(|(r, &m)| (r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / row_len as f64).sqrt())
        .collect();
    let defined: Vec<bool> = sds.iter().map(|&s| s > 0.0).collect();

    let mut matrix = vec![f64::NAN; t * t];
    for i in 0..t {
        if defined[i] {
            matrix[i * t + i] = 1.0;
        }
        for j in i + 1..t {
            if !(defined[i] && defined[j]) {
                continue;
            }
            let mut cov = 0.0;
            for k in 0..row_len {
                cov += (rows[i][k] - means[i]) * (rows[j][k] - means[j]);
            }
            let r = cov / row_len as f64 / (sds[i] * sds[j]);
            matrix[i * t + j] = r;
            matrix[j * t + i] = r;
        }
    }
    Ok(FrameCorrelation {
        frames: t,
        matrix,
        defined,
    })
}

/// Mean correlation of defined frame pairs at distance 1 versus distance at
/// least `far`; `None` when either set is empty.
pub fn adjacent_vs_distant(corr: &FrameCorrelation, far: usize) -> Option<(f64, f64)> {
    let mut near = (0.0, 0usize);
    let mut dist = (0.0, 0usize);
    for i in 0..corr.frames {
        for j in i + 1..corr.frames {
            if !(corr.defined[i] && corr.defined[j]) {
                continue;
            }
            let v = corr.at(i, j);
            if j - i == 1 {
                near = (near.0 + v, near.1 + 1);
            }
            if j - i >= far {
                dist = (dist.0 + v, dist.1 + 1);
            }
        }
    }
    (near.1 > 0 && dist.1 > 0).then(|| (near.0 / near.1 as f64, dist.0 / dist.1 as f64))
}

// ── embedding dumps ──

/// Writes one embedding table as an STTS tensor file.
pub fn dump_embedding(model: &Model, kind: EmbeddingKind, path: &Path) -> Result<()> {
    let (label, tensor) = model.embedding_table(kind)?;
    stts::save_tensor(label, &tensor, path)
}
