//! Masked forecast metrics: MAE, RMSE, and MAPE per horizon plus their
//! horizon averages, and batched model evaluation.
//!
//! Entries whose ground truth equals the null value are excluded everywhere.
//! MAPE additionally excludes entries with |truth| at or below
//! `mape_epsilon` and is reported as a percentage. Averaged metrics are the
//! arithmetic mean of the per-horizon values over horizons that have any
//! surviving entries.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::{Normalizer, WindowSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::Tape;

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub null_value: f64,
    pub mape_epsilon: f64,
    pub batch_size: usize,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            null_value: 0.0,
            mape_epsilon: 1.0,
            batch_size: 32,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonMetrics {
    /// 1-based forecast step.
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Percentage; NaN when every entry at this horizon failed the MAPE
    /// magnitude guard.
    pub mape: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_horizon: Vec<HorizonMetrics>,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,mae,rmse,mape,count\n");
        for h in &self.per_horizon {
            out.push_str(&format!("{},{},{},{},{}\n", h.horizon, h.mae, h.rmse, h.mape, h.count));
        }
        out.push_str(&format!(
            "avg,{},{},{},{}\n",
            self.mae,
            self.rmse,
            self.mape,
            self.per_horizon.iter().map(|h| h.count).sum::<usize>()
        ));
        out
    }
}

/// Running per-horizon sums. Accumulation order is window-major, then
/// horizon, then node, so independently chunked accumulators merged in chunk
/// order reproduce a single sequential pass over the same chunks.
#[derive(Debug, Clone)]
pub struct Accumulator {
    horizons: usize,
    nodes: usize,
    abs: Vec<f64>,
    sq: Vec<f64>,
    ape: Vec<f64>,
    count: Vec<usize>,
    ape_count: Vec<usize>,
    null_value: f64,
    mape_epsilon: f64,
}

impl Accumulator {
    pub fn new(horizons: usize, nodes: usize, null_value: f64, mape_epsilon: f64) -> Self {
        Accumulator {
            horizons,
            nodes,
            abs: vec![0.0; horizons],
            sq: vec![0.0; horizons],
            ape: vec![0.0; horizons],
            count: vec![0; horizons],
            ape_count: vec![0; horizons],
            null_value,
            mape_epsilon,
        }
    }

    /// Feeds `windows` stacked `(window, horizon, node)` prediction/target
    /// pairs, both in original units.
    pub fn update(&mut self, pred: &[f64], target: &[f64], windows: usize) -> Result<()> {
        let expected = windows * self.horizons * self.nodes;
        if pred.len() != expected || target.len() != expected {
            return Err(Error::Contract(format!(
                "metrics update: {windows} windows × {} horizons × {} nodes needs {expected} values, got {} predictions and {} targets",
                self.horizons,
                self.nodes,
                pred.len(),
                target.len()
            )));
        }
        for w in 0..windows {
            for t in 0..self.horizons {
                let base = (w * self.horizons + t) * self.nodes;
                for n in 0..self.nodes {
                    let y = target[base + n];
                    if y == self.null_value {
                        continue;
                    }
                    let e = pred[base + n] - y;
                    self.abs[t] += e.abs();
                    self.sq[t] += e * e;
                    self.count[t] += 1;
                    if y.abs() > self.mape_epsilon {
                        self.ape[t] += e.abs() / y.abs();
                        self.ape_count[t] += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Accumulator) {
        for t in 0..self.horizons {
            self.abs[t] += other.abs[t];
            self.sq[t] += other.sq[t];
            self.ape[t] += other.ape[t];
            self.count[t] += other.count[t];
            self.ape_count[t] += other.ape_count[t];
        }
    }

    pub fn finalize(&self) -> Result<MetricsReport> {
        let mut per_horizon = Vec::with_capacity(self.horizons);
        for t in 0..self.horizons {
            if self.count[t] == 0 {
                continue;
            }
            let c = self.count[t] as f64;
            per_horizon.push(HorizonMetrics {
                horizon: t + 1,
                mae: self.abs[t] / c,
                rmse: (self.sq[t] / c).sqrt(),
                mape: if self.ape_count[t] == 0 {
                    f64::NAN
                } else {
                    100.0 * self.ape[t] / self.ape_count[t] as f64
                },
                count: self.count[t],
            });
        }
        if per_horizon.is_empty() {
            return Err(Error::EmptyReport);
        }
        let k = per_horizon.len() as f64;
        let mae = per_horizon.iter().map(|h| h.mae).sum::<f64>() / k;
        let rmse = per_horizon.iter().map(|h| h.rmse).sum::<f64>() / k;
        let with_mape: Vec<f64> = per_horizon.iter().map(|h| h.mape).filter(|m| !m.is_nan()).collect();
        let mape = if with_mape.is_empty() {
            f64::NAN
        } else {
            with_mape.iter().sum::<f64>() / with_mape.len() as f64
        };
        Ok(MetricsReport {
            per_horizon,
            mae,
            rmse,
            mape,
        })
    }
}

/// One-shot report over flat `(windows, horizons, nodes)` arrays in original
/// units.
pub fn report_from_arrays(
    pred: &[f64],
    target: &[f64],
    windows: usize,
    horizons: usize,
    nodes: usize,
    null_value: f64,
    mape_epsilon: f64,
) -> Result<MetricsReport> {
    let mut acc = Accumulator::new(horizons, nodes, null_value, mape_epsilon);
    acc.update(pred, target, windows)?;
    acc.finalize()
}

const CHUNK: usize = 256;

/// Evaluates the model over every window, de-normalizing predictions before
/// metric computation. Windows are processed in fixed chunks whose partial
/// sums merge in chunk order, so the result is bit-identical for any
/// `threads` setting; `frame_perm`, when given, permutes each window's input
/// frames (values only) before prediction.
pub fn evaluate_shuffled(
    model: &Model,
    windows: &WindowSet,
    norm: &Normalizer,
    cfg: &EvalConfig,
    frame_perm: Option<&[usize]>,
) -> Result<MetricsReport> {
    let total = windows.len();
    if total == 0 {
        return Err(Error::EmptyReport);
    }
    let horizons = model.config.output_len;
    let nodes = model.config.nodes;
    let batch_size = cfg.batch_size.max(1);

    let run_chunk = |chunk_id: usize| -> Result<Accumulator> {
        let mut acc = Accumulator::new(horizons, nodes, cfg.null_value, cfg.mape_epsilon);
        let mut tape = Tape::new();
        let lo = chunk_id * CHUNK;
        let hi = (lo + CHUNK).min(total);
        let indices: Vec<usize> = (lo..hi).collect();
        for group in indices.chunks(batch_size) {
            let mut batch = windows.batch(group, Some(norm))?;
            if let Some(perm) = frame_perm {
                batch = crate::data::temporal_shuffle(&batch, perm, true)?;
            }
            let pred = model.predict_into(&mut tape, &batch, norm)?;
            acc.update(pred.data(), &batch.y, group.len())?;
        }
        Ok(acc)
    };

    let chunks = total.div_ceil(CHUNK);
    let threads = cfg.threads.max(1).min(chunks);
    let mut partials: Vec<Option<Accumulator>> = Vec::with_capacity(chunks);
    if threads == 1 {
        for c in 0..chunks {
            partials.push(Some(run_chunk(c)?));
        }
    } else {
        partials.resize_with(chunks, || None);
        let slots = Mutex::new(&mut partials);
        let next = AtomicUsize::new(0);
        let first_err: Mutex<Option<Error>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let c = next.fetch_add(1, Ordering::Relaxed);
                    if c >= chunks {
                        break;
                    }
                    match run_chunk(c) {
                        Ok(acc) => slots.lock().expect("metrics worker poisoned")[c] = Some(acc),
                        Err(e) => {
                            let mut guard = first_err.lock().expect("metrics worker poisoned");
                            if guard.is_none() {
                                *guard = Some(e);
                            }
                            break;
                        }
                    }
                });
            }
        });
        if let Some(e) = first_err.into_inner().expect("metrics worker poisoned") {
            return Err(e);
        }
    }

    let mut acc = Accumulator::new(horizons, nodes, cfg.null_value, cfg.mape_epsilon);
    for partial in partials {
        acc.merge(&partial.expect("every chunk either filled or errored"));
    }
    acc.finalize()
}

pub fn evaluate(model: &Model, windows: &WindowSet, norm: &Normalizer, cfg: &EvalConfig) -> Result<MetricsReport> {
    evaluate_shuffled(model, windows, norm, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::model::{Model, ModelConfig, Variant};
    use crate::transformer::AttentionScale;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loop_oracle(
        pred: &[f64],
        target: &[f64],
        windows: usize,
        horizons: usize,
        nodes: usize,
        null: f64,
        eps: f64,
    ) -> Option<(Vec<(f64, f64, f64, usize)>, f64, f64, f64)> {
        let mut rows = Vec::new();
        for t in 0..horizons {
            let (mut abs, mut sq, mut ape, mut c, mut ac) = (0.0, 0.0, 0.0, 0usize, 0usize);
            for w in 0..windows {
                for n in 0..nodes {
                    let i = (w * horizons + t) * nodes + n;
                    if target[i] == null {
                        continue;
                    }
                    let e = pred[i] - target[i];
                    abs += e.abs();
                    sq += e * e;
                    c += 1;
                    if target[i].abs() > eps {
                        ape += e.abs() / target[i].abs();
                        ac += 1;
                    }
                }
            }
            if c > 0 {
                let mape = if ac > 0 { 100.0 * ape / ac as f64 } else { f64::NAN };
                rows.push((abs / c as f64, (sq / c as f64).sqrt(), mape, c));
            }
        }
        if rows.is_empty() {
            return None;
        }
        let k = rows.len() as f64;
        let mae = rows.iter().map(|r| r.0).sum::<f64>() / k;
        let rmse = rows.iter().map(|r| r.1).sum::<f64>() / k;
        let mapes: Vec<f64> = rows.iter().map(|r| r.2).filter(|m| !m.is_nan()).collect();
        let mape = if mapes.is_empty() {
            f64::NAN
        } else {
            mapes.iter().sum::<f64>() / mapes.len() as f64
        };
        Some((rows, mae, rmse, mape))
    }

    #[test]
    fn single_point_examples() {
        let r = report_from_arrays(&[110.0], &[100.0], 1, 1, 1, 0.0, 1.0).unwrap();
        assert_eq!(r.mae, 10.0);
        assert_eq!(r.rmse, 10.0);
        assert_eq!(r.mape, 10.0);
        let r = report_from_arrays(&[3.0], &[1.0], 1, 1, 1, 0.0, 0.5).unwrap();
        assert_eq!(r.rmse, 2.0);
    }

    #[test]
    fn wholly_masked_input_is_an_explicit_error() {
        let err = report_from_arrays(&[1.0, 2.0], &[0.0, 0.0], 1, 2, 1, 0.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::EmptyReport));
    }

    #[test]
    fn masked_entries_do_not_influence_the_report() {
        let target = vec![5.0, 0.0, 7.0, 0.0, 2.0, 3.0];
        let mut pred = vec![4.0, 10.0, 8.0, -3.0, 2.5, 2.0];
        let before = report_from_arrays(&pred, &target, 1, 2, 3, 0.0, 1.0).unwrap();
        pred[1] = 1e12;
        pred[3] = f64::NAN;
        let after = report_from_arrays(&pred, &target, 1, 2, 3, 0.0, 1.0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn matches_loop_oracle_exactly_on_random_masked_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for case in 0..120 {
            let (w, h, n) = (
                rng.random_range(1..=6),
                rng.random_range(1..=13),
                rng.random_range(1..=7),
            );
            let len = w * h * n;
            let target: Vec<f64> = (0..len)
                .map(|_| {
                    if rng.random_range(0..4) == 0 {
                        0.0
                    } else {
                        rng.random_range(-50.0..120.0)
                    }
                })
                .collect();
            let pred: Vec<f64> = (0..len).map(|_| rng.random_range(-60.0..130.0)).collect();
            let ours = report_from_arrays(&pred, &target, w, h, n, 0.0, 1.0);
            let oracle = loop_oracle(&pred, &target, w, h, n, 0.0, 1.0);
            match (ours, oracle) {
                (Err(Error::EmptyReport), None) => {}
                (Ok(r), Some((rows, mae, rmse, mape))) => {
                    assert_eq!(r.per_horizon.len(), rows.len(), "case {case}");
                    for (got, want) in r.per_horizon.iter().zip(&rows) {
                        assert_eq!(got.mae.to_bits(), want.0.to_bits(), "case {case}");
                        assert_eq!(got.rmse.to_bits(), want.1.to_bits(), "case {case}");
                        assert!(
                            got.mape.to_bits() == want.2.to_bits() || (got.mape.is_nan() && want.2.is_nan()),
                            "case {case}"
                        );
                        assert_eq!(got.count, want.3, "case {case}");
                        assert!(got.rmse >= got.mae, "case {case}: rmse {} < mae {}", got.rmse, got.mae);
                    }
                    assert_eq!(r.mae.to_bits(), mae.to_bits(), "case {case}");
                    assert_eq!(r.rmse.to_bits(), rmse.to_bits(), "case {case}");
                    assert!(r.mape.to_bits() == mape.to_bits() || (r.mape.is_nan() && mape.is_nan()));
                    assert!(r.rmse >= r.mae, "case {case}");
                }
                (ours, oracle) => panic!("case {case}: report {ours:?} vs oracle {}", oracle.is_some()),
            }
        }
    }

    #[test]
    fn mape_guard_excludes_small_magnitudes() {
        // |y| = 0.5 is unmasked (contributes to MAE) but below the MAPE guard.
        let r = report_from_arrays(&[1.5, 12.0], &[0.5, 10.0], 1, 1, 2, 0.0, 1.0).unwrap();
        assert_eq!(r.per_horizon[0].count, 2);
        assert_eq!(r.mae, 1.5);
        assert_eq!(r.mape, 20.0);
    }

    fn eval_fixture() -> (Model, crate::data::TrafficDataset, Normalizer) {
        let cfg = ModelConfig {
            variant: Variant::Full,
            input_len: 3,
            output_len: 2,
            nodes: 3,
            feature_dim: 2,
            adaptive_dim: 2,
            heads: 2,
            layers: 1,
            ffn_dim: 8,
            dropout: 0.0,
            scale_mode: AttentionScale::PerHead,
        };
        let model = Model::new(cfg, 8).unwrap();
        // 600 steps -> 596 windows, enough to span several evaluation chunks
        let ds = generate_synthetic(&SyntheticConfig {
            nodes: 3,
            steps: 600,
            clusters: 1,
            noise_std: 2.0,
            ..Default::default()
        })
        .unwrap();
        let norm = Normalizer::fit(&ds.values).unwrap();
        (model, ds, norm)
    }

    #[test]
    fn evaluate_matches_per_window_oracle_and_any_thread_count() {
        let (model, ds, norm) = eval_fixture();
        let ws = WindowSet::new(&ds, 3, 2).unwrap();
        let cfg = EvalConfig {
            batch_size: 7,
            ..Default::default()
        };
        let report = evaluate(&model, &ws, &norm, &cfg).unwrap();

        // window-by-window oracle over the same predictions
        let mut acc = Accumulator::new(2, 3, 0.0, 1.0);
        for i in 0..ws.len() {
            let batch = ws.batch(&[i], Some(&norm)).unwrap();
            let pred = model.predict(&batch, &norm).unwrap();
            acc.update(pred.data(), &batch.y, 1).unwrap();
        }
        let oracle = acc.finalize().unwrap();
        for (a, b) in report.per_horizon.iter().zip(&oracle.per_horizon) {
            assert!((a.mae - b.mae).abs() < 1e-12);
            assert!((a.rmse - b.rmse).abs() < 1e-12);
            assert_eq!(a.count, b.count);
        }

        for threads in [2, 4] {
            let multi = evaluate(
                &model,
                &ws,
                &norm,
                &EvalConfig {
                    threads,
                    batch_size: 7,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(multi, report, "thread count must not change a single bit");
        }
    }

    #[test]
    fn identity_frame_permutation_changes_nothing() {
        let (model, ds, norm) = eval_fixture();
        let ws = WindowSet::new(&ds, 3, 2).unwrap();
        let cfg = EvalConfig::default();
        let plain = evaluate(&model, &ws, &norm, &cfg).unwrap();
        let id = evaluate_shuffled(&model, &ws, &norm, &cfg, Some(&[0, 1, 2])).unwrap();
        assert_eq!(plain, id);
        let swapped = evaluate_shuffled(&model, &ws, &norm, &cfg, Some(&[2, 1, 0])).unwrap();
        assert_ne!(plain, swapped, "a real permutation must reach the metrics");
    }
}
