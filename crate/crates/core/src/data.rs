//! Traffic series container, synthetic data generation, chronological
//! splitting, normalization, and sliding-window batching.
//!
//! A series holds one scalar reading per (step, node) plus two calendar
//! channels: day-of-week (0..7, 0 = Monday) and time-of-day slot (0..288 at
//! 5-minute resolution). Readings equal to the configured null value are
//! treated as missing by the loss and the metrics, never imputed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::embedding::{DAY_SLOTS, TIME_SLOTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficDataset {
    pub name: String,
    pub nodes: usize,
    pub interval_minutes: u32,
    /// Row-major `(steps, nodes)` readings.
    pub values: Vec<f64>,
    /// Day-of-week per step, `0..7`.
    pub day_of_week: Vec<u8>,
    /// Time-of-day slot per step, `0..288`.
    pub time_of_day: Vec<u16>,
}

impl TrafficDataset {
    pub fn steps(&self) -> usize {
        if self.nodes == 0 {
            0
        } else {
            self.values.len() / self.nodes
        }
    }

    pub fn value(&self, step: usize, node: usize) -> f64 {
        self.values[step * self.nodes + node]
    }

    /// Checks internal consistency: channel lengths against `nodes`, calendar
    /// ranges, and that consecutive steps advance the clock by one slot.
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::Data("dataset has zero nodes".into()));
        }
        if self.values.len() % self.nodes != 0 {
            return Err(Error::Data(format!(
                "{} values do not tile {} nodes",
                self.values.len(),
                self.nodes
            )));
        }
        let steps = self.steps();
        if self.day_of_week.len() != steps || self.time_of_day.len() != steps {
            return Err(Error::Data(format!(
                "calendar channels ({} day, {} time) do not cover {steps} steps",
                self.day_of_week.len(),
                self.time_of_day.len()
            )));
        }
        for t in 0..steps {
            if self.day_of_week[t] as usize >= DAY_SLOTS {
                return Err(Error::Data(format!(
                    "day-of-week {} at step {t} outside 0..{DAY_SLOTS}",
                    self.day_of_week[t]
                )));
            }
            if self.time_of_day[t] as usize >= TIME_SLOTS {
                return Err(Error::Data(format!(
                    "time-of-day {} at step {t} outside 0..{TIME_SLOTS}",
                    self.time_of_day[t]
                )));
            }
            if t > 0 {
                let wrapped = self.time_of_day[t - 1] as usize == TIME_SLOTS - 1;
                let want_tod = if wrapped { 0 } else { self.time_of_day[t - 1] + 1 };
                if self.time_of_day[t] != want_tod {
                    return Err(Error::Data(format!(
                        "time-of-day jumps from {} to {} at step {t}",
                        self.time_of_day[t - 1],
                        self.time_of_day[t]
                    )));
                }
                let want_dow = if wrapped {
                    (self.day_of_week[t - 1] + 1) % DAY_SLOTS as u8
                } else {
                    self.day_of_week[t - 1]
                };
                if self.day_of_week[t] != want_dow {
                    return Err(Error::Data(format!(
                        "day-of-week jumps from {} to {} at step {t}",
                        self.day_of_week[t - 1],
                        self.day_of_week[t]
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── synthetic generation ──

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub name: String,
    pub nodes: usize,
    pub steps: usize,
    pub clusters: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            name: "synthetic".into(),
            nodes: 8,
            steps: 2016,
            clusters: 2,
            noise_std: 0.5,
            seed: 42,
        }
    }
}

/// Weekend-dipping weekly profile, rotated per cluster.
const WEEK_SHAPE: [f64; 7] = [0.10, 0.16, 0.12, 0.08, 0.20, -0.35, -0.45];
const AR_RHO: f64 = 0.9;

fn circular_distance(u: f64, center: f64) -> f64 {
    let d = (u - center).abs();
    d.min(1.0 - d)
}

fn bump(u: f64, center: f64, width: f64) -> f64 {
    let d = circular_distance(u, center) / width;
    (-0.5 * d * d).exp()
}

/// Double-peaked daily profile over `u` in `[0, 1)`: a sharp morning rush and
/// a broader evening one on a positive floor.
fn diurnal(u: f64) -> f64 {
    0.35 + 1.1 * bump(u, 0.32, 0.055) + 0.85 * bump(u, 0.77, 0.075)
}

/// Generates a seeded synthetic traffic series.
///
/// Nodes are assigned contiguously to `clusters` groups. Each cluster has its
/// own base level, a phase-shifted copy of the daily profile, and (for every
/// cluster except the first) a rotated weekly modulation. On top of the
/// deterministic profile every node carries an AR(1) process with marginal
/// standard deviation `noise_std` plus white noise at half that scale;
/// readings are floored at zero. With `noise_std = 0` and a single cluster
/// the series is an exact function of the time-of-day slot, hence exactly
/// periodic with period 288.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<TrafficDataset> {
    if cfg.clusters == 0 || cfg.nodes < cfg.clusters {
        return Err(Error::Config(format!(
            "synthetic data needs nodes >= clusters >= 1, got {} nodes / {} clusters",
            cfg.nodes, cfg.clusters
        )));
    }
    if cfg.steps < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 steps, got {}", cfg.steps)));
    }
    if cfg.noise_std < 0.0 {
        return Err(Error::Config(format!("noise_std must be non-negative, got {}", cfg.noise_std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let innovation = Normal::new(0.0, cfg.noise_std * (1.0 - AR_RHO * AR_RHO).sqrt())
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let white = Normal::new(0.0, 0.5 * cfg.noise_std).expect("scaled std stays finite");
    let start = Normal::new(0.0, cfg.noise_std).expect("std checked above");

    let day_of_week: Vec<u8> = (0..cfg.steps).map(|t| ((t / TIME_SLOTS) % DAY_SLOTS) as u8).collect();
    let time_of_day: Vec<u16> = (0..cfg.steps).map(|t| (t % TIME_SLOTS) as u16).collect();

    let mut values = vec![0.0; cfg.steps * cfg.nodes];
    for node in 0..cfg.nodes {
        let cluster = node * cfg.clusters / cfg.nodes;
        let base = 45.0 + 25.0 * cluster as f64;
        let phase = cluster as f64 / cfg.clusters as f64;
        let week_amp = if cluster == 0 { 0.0 } else { 0.25 + 0.05 * cluster as f64 };
        let mut ar = start.sample(&mut rng);
        for step in 0..cfg.steps {
            let u = (time_of_day[step] as f64 / TIME_SLOTS as f64 + phase).fract();
            let weekday = week_amp * WEEK_SHAPE[(day_of_week[step] as usize + cluster) % DAY_SLOTS];
            ar = AR_RHO * ar + innovation.sample(&mut rng);
            let clean = base * (diurnal(u) + weekday);
            values[step * cfg.nodes + node] = (clean + ar + white.sample(&mut rng)).max(0.0);
        }
    }
    Ok(TrafficDataset {
        name: cfg.name.clone(),
        nodes: cfg.nodes,
        interval_minutes: 5,
        values,
        day_of_week,
        time_of_day,
    })
}

// ── chronological split ──

/// Train/validation/test fractions, e.g. `7:1:2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
}

impl SplitSpec {
    pub fn new(weights: [f64; 3]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < 0.0) || weights[0] <= 0.0 || sum <= 0.0 {
            return Err(Error::Config(format!(
                "split weights must be non-negative with a positive train share, got {weights:?}"
            )));
        }
        Ok(SplitSpec {
            fractions: [weights[0] / sum, weights[1] / sum, weights[2] / sum],
        })
    }
}

impl std::str::FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("split must look like 7:1:2, got {s:?}")));
        }
        let mut w = [0.0; 3];
        for (slot, part) in w.iter_mut().zip(&parts) {
            *slot = part
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("split component {part:?} is not a number")))?;
        }
        SplitSpec::new(w)
    }
}

impl std::fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.fractions[0], self.fractions[1], self.fractions[2])
    }
}

fn slice_dataset(ds: &TrafficDataset, from: usize, to: usize) -> TrafficDataset {
    TrafficDataset {
        name: ds.name.clone(),
        nodes: ds.nodes,
        interval_minutes: ds.interval_minutes,
        values: ds.values[from * ds.nodes..to * ds.nodes].to_vec(),
        day_of_week: ds.day_of_week[from..to].to_vec(),
        time_of_day: ds.time_of_day[from..to].to_vec(),
    }
}

/// Splits a series into contiguous train/validation/test stretches, in time
/// order, with boundaries at rounded fractions of the step count.
pub fn chronological_split(ds: &TrafficDataset, spec: SplitSpec) -> [TrafficDataset; 3] {
    let steps = ds.steps();
    let b1 = (steps as f64 * spec.fractions[0]).round() as usize;
    let b2 = (steps as f64 * (spec.fractions[0] + spec.fractions[1])).round() as usize;
    let (b1, b2) = (b1.min(steps), b2.min(steps).max(b1));
    [
        slice_dataset(ds, 0, b1),
        slice_dataset(ds, b1, b2),
        slice_dataset(ds, b2, steps),
    ]
}

// ── normalization ──

/// Zero-mean unit-variance scaler fitted on training values only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot fit a normalizer on an empty series".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 0.0 {
            return Err(Error::Data(format!(
                "series is constant (std = {std}), normalization undefined"
            )));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

// ── sliding windows ──

/// Lazy view of all `(input, output)` window pairs of a series.
#[derive(Debug, Clone, Copy)]
pub struct WindowSet<'a> {
    pub data: &'a TrafficDataset,
    pub input_len: usize,
    pub output_len: usize,
}

impl<'a> WindowSet<'a> {
    pub fn new(data: &'a TrafficDataset, input_len: usize, output_len: usize) -> Result<Self> {
        if input_len == 0 || output_len == 0 {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        if data.steps() < input_len + output_len {
            return Err(Error::Data(format!(
                "{} steps cannot fit one {input_len}+{output_len} window",
                data.steps()
            )));
        }
        Ok(WindowSet {
            data,
            input_len,
            output_len,
        })
    }

    /// Number of windows: `steps - input_len - output_len + 1`.
    pub fn len(&self) -> usize {
        self.data.steps() - self.input_len - self.output_len + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Collates windows into a batch. Inputs are normalized when a scaler is
    /// given; targets always stay in raw units.
    pub fn batch(&self, indices: &[usize], norm: Option<&Normalizer>) -> Result<Batch> {
        let (t_in, t_out, nodes) = (self.input_len, self.output_len, self.data.nodes);
        let count = self.len();
        if let Some(&bad) = indices.iter().find(|&&w| w >= count) {
            return Err(Error::IndexOutOfRange {
                what: "window",
                index: bad,
                size: count,
            });
        }
        let b = indices.len();
        let mut batch = Batch {
            size: b,
            input_len: t_in,
            output_len: t_out,
            nodes,
            x: Vec::with_capacity(b * t_in * nodes),
            y: Vec::with_capacity(b * t_out * nodes),
            day: Vec::with_capacity(b * t_in),
            time: Vec::with_capacity(b * t_in),
        };
        for &w in indices {
            for t in 0..t_in {
                let step = w + t;
                batch.day.push(self.data.day_of_week[step] as usize);
                batch.time.push(self.data.time_of_day[step] as usize);
                let row = &self.data.values[step * nodes..(step + 1) * nodes];
                match norm {
                    Some(nz) => batch.x.extend(row.iter().map(|&v| nz.normalize(v))),
                    None => batch.x.extend_from_slice(row),
                }
            }
            for h in 0..t_out {
                let step = w + t_in + h;
                batch.y.extend_from_slice(&self.data.values[step * nodes..(step + 1) * nodes]);
            }
        }
        Ok(batch)
    }
}

/// A collated mini-batch: inputs `(size, input_len, nodes)`, targets
/// `(size, output_len, nodes)`, calendar indices `(size, input_len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub input_len: usize,
    pub output_len: usize,
    pub nodes: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub day: Vec<usize>,
    pub time: Vec<usize>,
}

/// Reorders the input frames of every window by `perm` (frame `i` of the
/// result is frame `perm[i]` of the original). With `values_only` the
/// calendar channels keep their original order, so only the readings lose
/// their temporal alignment; otherwise the calendar moves with the values.
/// Targets are never touched.
pub fn temporal_shuffle(batch: &Batch, perm: &[usize], values_only: bool) -> Result<Batch> {
    let t = batch.input_len;
    let mut seen = vec![false; t];
    if perm.len() != t || perm.iter().any(|&p| p >= t || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Contract(format!(
            "temporal_shuffle: {perm:?} is not a permutation of 0..{t}"
        )));
    }
    let mut out = batch.clone();
    let n = batch.nodes;
    for b in 0..batch.size {
        for (i, &p) in perm.iter().enumerate() {
            let dst = (b * t + i) * n;
            let src = (b * t + p) * n;
            out.x[dst..dst + n].copy_from_slice(&batch.x[src..src + n]);
            if !values_only {
                out.day[b * t + i] = batch.day[b * t + p];
                out.time[b * t + i] = batch.time[b * t + p];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    fn node_series(ds: &TrafficDataset, node: usize) -> Vec<f64> {
        (0..ds.steps()).map(|t| ds.value(t, node)).collect()
    }

    #[test]
    fn synthetic_has_requested_shape_and_calendar() {
        let ds = generate_synthetic(&SyntheticConfig {
            steps: 2016,
            nodes: 8,
            clusters: 2,
            noise_std: 0.5,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(ds.steps(), 2016);
        assert_eq!(ds.nodes, 8);
        assert_eq!(ds.values.len(), 2016 * 8);
        ds.validate().unwrap();
        assert_eq!(ds.time_of_day[0], 0);
        assert_eq!(ds.time_of_day[287], 287);
        assert_eq!(ds.time_of_day[288], 0);
        assert_eq!(ds.day_of_week[287], 0);
        assert_eq!(ds.day_of_week[288], 1);
        assert_eq!(ds.day_of_week[2015], 6);
        assert!(ds.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let cfg = SyntheticConfig {
            noise_std: 2.0,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn noiseless_single_cluster_is_exactly_daily_periodic() {
        let ds = generate_synthetic(&SyntheticConfig {
            steps: 288 * 4,
            nodes: 3,
            clusters: 1,
            noise_std: 0.0,
            ..Default::default()
        })
        .unwrap();
        for node in 0..3 {
            let s = node_series(&ds, node);
            for t in 0..s.len() - 288 {
                assert_eq!(s[t], s[t + 288], "bitwise periodicity broken at t={t}");
            }
            let r = pearson(&s[..s.len() - 288], &s[288..]);
            assert!((r - 1.0).abs() < 1e-12, "lag-288 autocorrelation {r}");
        }
    }

    #[test]
    fn clusters_correlate_within_more_than_across() {
        let ds = generate_synthetic(&SyntheticConfig {
            steps: 2016,
            nodes: 6,
            clusters: 3,
            noise_std: 3.0,
            ..Default::default()
        })
        .unwrap();
        let series: Vec<Vec<f64>> = (0..6).map(|n| node_series(&ds, n)).collect();
        // contiguous assignment: nodes (0,1), (2,3), (4,5)
        let within = [(0, 1), (2, 3), (4, 5)];
        let across = [(0, 2), (1, 4), (3, 5), (0, 5), (2, 4)];
        let mean = |pairs: &[(usize, usize)]| {
            pairs.iter().map(|&(a, b)| pearson(&series[a], &series[b])).sum::<f64>() / pairs.len() as f64
        };
        let (w, a) = (mean(&within), mean(&across));
        assert!(w > a, "within-cluster correlation {w} must exceed across-cluster {a}");
    }

    #[test]
    fn synthetic_rejects_bad_configs() {
        assert!(generate_synthetic(&SyntheticConfig {
            nodes: 2,
            clusters: 3,
            ..Default::default()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticConfig {
            clusters: 0,
            ..Default::default()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticConfig {
            noise_std: -1.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn split_is_chronological_and_exhaustive() {
        let ds = generate_synthetic(&SyntheticConfig {
            steps: 1000,
            nodes: 4,
            clusters: 2,
            noise_std: 1.0,
            ..Default::default()
        })
        .unwrap();
        let spec: SplitSpec = "7:1:2".parse().unwrap();
        let [train, val, test] = chronological_split(&ds, spec);
        assert_eq!(train.steps(), 700);
        assert_eq!(val.steps(), 100);
        assert_eq!(test.steps(), 200);
        let mut glued = train.values.clone();
        glued.extend(&val.values);
        glued.extend(&test.values);
        assert_eq!(glued, ds.values);
        assert_eq!(val.time_of_day[0], ds.time_of_day[700]);
        for part in [&train, &val, &test] {
            part.validate().unwrap();
        }
    }

    #[test]
    fn split_spec_parses_and_rejects() {
        let s: SplitSpec = "6:2:2".parse().unwrap();
        assert!((s.fractions[0] - 0.6).abs() < 1e-12);
        assert!("1:2".parse::<SplitSpec>().is_err());
        assert!("a:b:c".parse::<SplitSpec>().is_err());
        assert!("0:5:5".parse::<SplitSpec>().is_err());
        assert!("-1:1:1".parse::<SplitSpec>().is_err());
    }

    #[test]
    fn normalizer_standardizes_train_split() {
        let ds = generate_synthetic(&SyntheticConfig {
            steps: 800,
            nodes: 5,
            clusters: 2,
            noise_std: 2.0,
            ..Default::default()
        })
        .unwrap();
        let nz = Normalizer::fit(&ds.values).unwrap();
        let scaled: Vec<f64> = ds.values.iter().map(|&v| nz.normalize(v)).collect();
        let n = scaled.len() as f64;
        let mean = scaled.iter().sum::<f64>() / n;
        let var = scaled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-9, "std {}", var.sqrt());
        for &v in ds.values.iter().take(50) {
            assert!((nz.denormalize(nz.normalize(v)) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn normalizer_rejects_constant_series() {
        assert!(Normalizer::fit(&[3.0; 10]).is_err());
        assert!(Normalizer::fit(&[]).is_err());
    }

    #[test]
    fn window_count_and_alignment() {
        let ds = generate_synthetic(&SyntheticConfig {
            steps: 300,
            nodes: 3,
            clusters: 1,
            noise_std: 1.0,
            ..Default::default()
        })
        .unwrap();
        let ws = WindowSet::new(&ds, 12, 12).unwrap();
        assert_eq!(ws.len(), 300 - 12 - 12 + 1);
        let batch = ws.batch(&[0, 5], None).unwrap();
        assert_eq!(batch.x.len(), 2 * 12 * 3);
        assert_eq!(batch.y.len(), 2 * 12 * 3);
        assert_eq!(batch.x[0], ds.value(0, 0));
        assert_eq!(batch.x[(12 + 3) * 3 + 1], ds.value(5 + 3, 1));
        assert_eq!(batch.y[2], ds.value(12, 2));
        assert_eq!(batch.y[12 * 3 + 4 * 3 + 1], ds.value(5 + 12 + 4, 1));
        assert_eq!(batch.time[12 + 7], ds.time_of_day[5 + 7] as usize);

        let nz = Normalizer::fit(&ds.values).unwrap();
        let normed = ws.batch(&[4], Some(&nz)).unwrap();
        assert_eq!(normed.x[0], nz.normalize(ds.value(4, 0)));
        assert_eq!(normed.y[0], ds.value(4 + 12, 0), "targets stay raw");
    }

    #[test]
    fn windows_reject_short_series_and_bad_index() {
        let ds = generate_synthetic(&SyntheticConfig {
            steps: 20,
            nodes: 2,
            clusters: 1,
            noise_std: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert!(WindowSet::new(&ds, 12, 12).is_err());
        let ws = WindowSet::new(&ds, 6, 6).unwrap();
        assert_eq!(ws.len(), 9);
        assert!(ws.batch(&[9], None).is_err());
    }

    #[test]
    fn shuffle_identity_and_inverse() {
        let ds = generate_synthetic(&SyntheticConfig {
            steps: 100,
            nodes: 2,
            clusters: 1,
            noise_std: 1.0,
            ..Default::default()
        })
        .unwrap();
        let ws = WindowSet::new(&ds, 6, 3).unwrap();
        let batch = ws.batch(&[0, 7, 13], None).unwrap();
        let identity: Vec<usize> = (0..6).collect();
        assert_eq!(temporal_shuffle(&batch, &identity, false).unwrap(), batch);

        let perm = [2usize, 0, 5, 1, 4, 3];
        let mut inverse = vec![0usize; 6];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let shuffled = temporal_shuffle(&batch, &perm, false).unwrap();
        assert_ne!(shuffled, batch);
        let restored = temporal_shuffle(&shuffled, &inverse, false).unwrap();
        assert_eq!(restored, batch);

        let values_only = temporal_shuffle(&batch, &perm, true).unwrap();
        assert_eq!(values_only.day, batch.day);
        assert_eq!(values_only.time, batch.time);
        assert_eq!(values_only.x, shuffled.x);
        assert_eq!(values_only.y, batch.y);

        assert!(temporal_shuffle(&batch, &[0, 0, 1, 2, 3, 4], false).is_err());
        assert!(temporal_shuffle(&batch, &[0, 1], false).is_err());
    }

    proptest! {
        #[test]
        fn window_count_formula_holds(steps in 24usize..200, t_in in 1usize..12, t_out in 1usize..12) {
            prop_assume!(steps >= t_in + t_out);
            let ds = generate_synthetic(&SyntheticConfig {
                steps,
                nodes: 2,
                clusters: 1,
                noise_std: 0.1,
                ..Default::default()
            }).unwrap();
            let ws = WindowSet::new(&ds, t_in, t_out).unwrap();
            prop_assert_eq!(ws.len(), steps - t_in - t_out + 1);
            // every window index is reachable and aligned
            let last = ws.len() - 1;
            let batch = ws.batch(&[last], None).unwrap();
            prop_assert_eq!(batch.y[(t_out - 1) * 2], ds.value(steps - 1, 0));
        }

        #[test]
        fn shuffle_roundtrip_any_permutation(seed in 0u64..1000) {
            let ds = generate_synthetic(&SyntheticConfig {
                steps: 64,
                nodes: 2,
                clusters: 1,
                noise_std: 1.0,
                ..Default::default()
            }).unwrap();
            let ws = WindowSet::new(&ds, 8, 2).unwrap();
            let batch = ws.batch(&[0, 11], None).unwrap();
            let mut perm: Vec<usize> = (0..8).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut inverse = vec![0usize; 8];
            for (i, &p) in perm.iter().enumerate() { inverse[p] = i; }
            let there = temporal_shuffle(&batch, &perm, false).unwrap();
            let back = temporal_shuffle(&there, &inverse, false).unwrap();
            prop_assert_eq!(back, batch);
        }
    }
}
