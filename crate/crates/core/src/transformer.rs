//! Multi-head self-attention encoder layers applied along either the time
//! axis or the node axis of a `(batch, steps, nodes, channels)` block.
//!
//! A temporal layer attends across the window positions of each node
//! independently; a spatial layer attends across nodes at each step. Both use
//! the same post-norm residual layout: attention, dropout, add & normalize,
//! position-wise feed-forward, dropout, add & normalize. Attention
//! projections carry no biases; the feed-forward affines do.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Epsilon inside layer-norm's variance square root.
pub const NORM_EPS: f64 = 1e-5;

/// Which axis a layer attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    Time,
    Space,
}

/// Denominator convention for attention scores.
///
/// `PerHead` divides by `sqrt(channels / heads)` (the per-head width), the
/// convention of mainstream transformer implementations and the default here.
/// `ModelDim` divides by `sqrt(channels)`, the full concatenated width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionScale {
    #[default]
    PerHead,
    ModelDim,
}

/// Parameter handles for one encoder layer, pre-bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

/// Multi-head self-attention over the chosen axis of a
/// `(batch, steps, nodes, channels)` input. Output shape equals input shape.
pub fn self_attention(
    tape: &mut Tape,
    z: Var,
    axis: AttentionAxis,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    scale: AttentionScale,
) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 4 {
        return Err(Error::Contract(format!(
            "self_attention: expected (batch, steps, nodes, channels), got {shape:?}"
        )));
    }
    let channels = shape[3];
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Contract(format!(
            "self_attention: {heads} heads do not divide {channels} channels"
        )));
    }
    let dk = channels / heads;
    let scale_dim = match scale {
        AttentionScale::PerHead => dk,
        AttentionScale::ModelDim => channels,
    };
    let inv_scale = 1.0 / (scale_dim as f64).sqrt();

    // Arrange as (batch, group, seq, channels) with the attended axis third.
    let seq_first = match axis {
        AttentionAxis::Time => tape.transpose(z, &[0, 2, 1, 3])?,
        AttentionAxis::Space => z,
    };
    let s4 = tape.shape(seq_first).to_vec();
    let (b, g, s) = (s4[0], s4[1], s4[2]);

    let q = tape.matmul(seq_first, wq)?;
    let k = tape.matmul(seq_first, wk)?;
    let v = tape.matmul(seq_first, wv)?;

    let split = |tape: &mut Tape, x: Var| -> Result<Var> {
        let x = tape.reshape(x, vec![b, g, s, heads, dk])?;
        tape.transpose(x, &[0, 1, 3, 2, 4])
    };
    let qh = split(tape, q)?;
    let kh = split(tape, k)?;
    let vh = split(tape, v)?;

    let kt = tape.transpose(kh, &[0, 1, 2, 4, 3])?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.affine(scores, inv_scale, 0.0);
    let weights = tape.softmax_last(scores);
    let ctx = tape.matmul(weights, vh)?;

    let merged = tape.transpose(ctx, &[0, 1, 3, 2, 4])?;
    let merged = tape.reshape(merged, vec![b, g, s, channels])?;
    let out = tape.matmul(merged, wo)?;

    match axis {
        AttentionAxis::Time => tape.transpose(out, &[0, 2, 1, 3]),
        AttentionAxis::Space => Ok(out),
    }
}

/// One post-norm encoder layer over the chosen axis.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer(
    tape: &mut Tape,
    z: Var,
    axis: AttentionAxis,
    lv: &LayerVars,
    heads: usize,
    scale: AttentionScale,
    dropout: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let attended = self_attention(tape, z, axis, lv.wq, lv.wk, lv.wv, lv.wo, heads, scale)?;
    let attended = tape.dropout(attended, dropout, train, rng)?;
    let res1 = tape.add(z, attended)?;
    let normed1 = tape.layer_norm(res1, lv.norm1_gain, lv.norm1_bias, NORM_EPS)?;

    let hidden = tape.matmul(normed1, lv.ffn_w1)?;
    let hidden = tape.add(hidden, lv.ffn_b1)?;
    let hidden = tape.relu(hidden);
    let ffn = tape.matmul(hidden, lv.ffn_w2)?;
    let ffn = tape.add(ffn, lv.ffn_b2)?;
    let ffn = tape.dropout(ffn, dropout, train, rng)?;
    let res2 = tape.add(normed1, ffn)?;
    tape.layer_norm(res2, lv.norm2_gain, lv.norm2_bias, NORM_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Scalar reference: per (batch, group) matrix attention with explicit
    /// head slicing, softmax, and output projection.
    fn loop_attention(
        x: &[f64],
        (b, g, s, d): (usize, usize, usize, usize),
        wq: &[f64],
        wk: &[f64],
        wv: &[f64],
        wo: &[f64],
        heads: usize,
        scale_dim: usize,
    ) -> Vec<f64> {
        let dk = d / heads;
        let mut out = vec![0.0; b * g * s * d];
        for bg in 0..b * g {
            let base = bg * s * d;
            let project = |w: &[f64]| {
                let mut m = vec![0.0; s * d];
                for i in 0..s {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for p in 0..d {
                            acc += x[base + i * d + p] * w[p * d + j];
                        }
                        m[i * d + j] = acc;
                    }
                }
                m
            };
            let (q, k, v) = (project(wq), project(wk), project(wv));
            let mut ctx = vec![0.0; s * d];
            for h in 0..heads {
                let off = h * dk;
                for i in 0..s {
                    let mut row = vec![0.0; s];
                    for j in 0..s {
                        let mut acc = 0.0;
                        for p in 0..dk {
                            acc += q[i * d + off + p] * k[j * d + off + p];
                        }
                        row[j] = acc / (scale_dim as f64).sqrt();
                    }
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for w in row.iter_mut() {
                        *w = (*w - max).exp();
                        denom += *w;
                    }
                    for w in row.iter_mut() {
                        *w /= denom;
                    }
                    for j in 0..s {
                        for p in 0..dk {
                            ctx[i * d + off + p] += row[j] * v[j * d + off + p];
                        }
                    }
                }
            }
            for i in 0..s {
                for j in 0..d {
                    let mut acc = 0.0;
                    for p in 0..d {
                        acc += ctx[i * d + p] * wo[p * d + j];
                    }
                    out[base + i * d + j] = acc;
                }
            }
        }
        out
    }

    fn transpose_bt(x: &[f64], b: usize, t: usize, n: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ti in 0..t {
                for ni in 0..n {
                    for di in 0..d {
                        out[((bi * n + ni) * t + ti) * d + di] = x[((bi * t + ti) * n + ni) * d + di];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_loop_oracle_on_random_shapes() {
        let mut r = rng(1234);
        for case in 0..120 {
            let b = r.random_range(1..3usize);
            let t = r.random_range(1..5usize);
            let n = r.random_range(1..5usize);
            let heads = [1, 2, 4][case % 3];
            let dk = r.random_range(1..4usize);
            let d = heads * dk;
            let axis = if case % 2 == 0 { AttentionAxis::Space } else { AttentionAxis::Time };
            let scale = if case % 4 < 2 { AttentionScale::PerHead } else { AttentionScale::ModelDim };
            let scale_dim = match scale {
                AttentionScale::PerHead => dk,
                AttentionScale::ModelDim => d,
            };

            let x: Vec<f64> = (0..b * t * n * d).map(|_| r.random_range(-2.0..2.0)).collect();
            let mk = |r: &mut ChaCha8Rng| -> Vec<f64> { (0..d * d).map(|_| r.random_range(-1.0..1.0)).collect() };
            let (wq, wk, wv, wo) = (mk(&mut r), mk(&mut r), mk(&mut r), mk(&mut r));

            let mut tape = Tape::new();
            let z = tape.constant(vec![b, t, n, d], x.clone()).unwrap();
            let vq = tape.constant(vec![d, d], wq.clone()).unwrap();
            let vk = tape.constant(vec![d, d], wk.clone()).unwrap();
            let vv = tape.constant(vec![d, d], wv.clone()).unwrap();
            let vo = tape.constant(vec![d, d], wo.clone()).unwrap();
            let out = self_attention(&mut tape, z, axis, vq, vk, vv, vo, heads, scale).unwrap();
            assert_eq!(tape.shape(out), &[b, t, n, d]);

            let want = match axis {
                AttentionAxis::Space => loop_attention(&x, (b, t, n, d), &wq, &wk, &wv, &wo, heads, scale_dim),
                AttentionAxis::Time => {
                    let xt = transpose_bt(&x, b, t, n, d);
                    let yt = loop_attention(&xt, (b, n, t, d), &wq, &wk, &wv, &wo, heads, scale_dim);
                    transpose_bt(&yt, b, n, t, d)
                }
            };
            let got = tape.value(out);
            let worst = got
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-10, "case {case}: max abs err {worst}");
        }
    }

    #[test]
    fn scale_modes_differ_unless_single_head_covers_width() {
        let mut r = rng(5);
        let (b, t, n, d) = (1, 3, 2, 4);
        let x: Vec<f64> = (0..b * t * n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..d * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let z = tape.constant(vec![b, t, n, d], x).unwrap();
        let wv = tape.constant(vec![d, d], w).unwrap();
        let a = self_attention(&mut tape, z, AttentionAxis::Space, wv, wv, wv, wv, 2, AttentionScale::PerHead).unwrap();
        let m = self_attention(&mut tape, z, AttentionAxis::Space, wv, wv, wv, wv, 2, AttentionScale::ModelDim).unwrap();
        let diff: f64 = tape
            .value(a)
            .iter()
            .zip(tape.value(m))
            .map(|(p, q)| (p - q).abs())
            .sum();
        assert!(diff > 1e-9, "per-head and model-dim scaling must disagree for 2 heads");
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![1, 2, 2, 6], vec![0.0; 24]).unwrap();
        let w = tape.constant(vec![6, 6], vec![0.0; 36]).unwrap();
        let err = self_attention(&mut tape, z, AttentionAxis::Time, w, w, w, w, 4, AttentionScale::PerHead).unwrap_err();
        assert!(err.to_string().contains("4 heads"), "{err}");
    }

    fn layer_fixture(tape: &mut Tape, d: usize, dff: usize, seed: u64) -> LayerVars {
        let mut r = rng(seed);
        let mut mat = |rows: usize, cols, lo: f64, hi: f64| {
            let t = Tensor::uniform(vec![rows, cols], lo, hi, &mut r);
            tape.leaf(&t, true)
        };
        let wq = mat(d, d, -0.5, 0.5);
        let wk = mat(d, d, -0.5, 0.5);
        let wv = mat(d, d, -0.5, 0.5);
        let wo = mat(d, d, -0.5, 0.5);
        let ffn_w1 = mat(d, dff, -0.5, 0.5);
        let ffn_w2 = mat(dff, d, -0.5, 0.5);
        let ffn_b1 = tape.leaf(&Tensor::zeros(vec![dff]), true);
        let ffn_b2 = tape.leaf(&Tensor::zeros(vec![d]), true);
        let norm1_gain = tape.leaf(&Tensor::full(vec![d], 1.0), true);
        let norm1_bias = tape.leaf(&Tensor::zeros(vec![d]), true);
        let norm2_gain = tape.leaf(&Tensor::full(vec![d], 1.0), true);
        let norm2_bias = tape.leaf(&Tensor::zeros(vec![d]), true);
        LayerVars {
            wq,
            wk,
            wv,
            wo,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            norm1_gain,
            norm1_bias,
            norm2_gain,
            norm2_bias,
        }
    }

    #[test]
    fn encoder_layer_preserves_shape_and_is_deterministic_in_eval() {
        let (b, t, n, d, dff) = (2, 3, 4, 6, 10);
        let mut r = rng(9);
        let x: Vec<f64> = (0..b * t * n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let run = |x: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let lv = layer_fixture(&mut tape, d, dff, 42);
            let z = tape.constant(vec![b, t, n, d], x.to_vec()).unwrap();
            let out = encoder_layer(
                &mut tape,
                z,
                AttentionAxis::Time,
                &lv,
                2,
                AttentionScale::PerHead,
                0.3,
                false,
                &mut rng(0),
            )
            .unwrap();
            assert_eq!(tape.shape(out), &[b, t, n, d]);
            tape.value(out).to_vec()
        };
        assert_eq!(run(&x), run(&x));
    }

    #[test]
    fn temporal_layer_keeps_nodes_separate() {
        let (b, t, n, d, dff) = (1, 4, 3, 6, 8);
        let mut r = rng(11);
        let mut x: Vec<f64> = (0..b * t * n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let run = |x: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let lv = layer_fixture(&mut tape, d, dff, 7);
            let z = tape.constant(vec![b, t, n, d], x.to_vec()).unwrap();
            let out = encoder_layer(
                &mut tape,
                z,
                AttentionAxis::Time,
                &lv,
                3,
                AttentionScale::PerHead,
                0.0,
                false,
                &mut rng(0),
            )
            .unwrap();
            tape.value(out).to_vec()
        };
        let before = run(&x);
        // perturb every channel of node 2 at every step
        for ti in 0..t {
            for di in 0..d {
                x[(ti * n + 2) * d + di] += 3.0;
            }
        }
        let after = run(&x);
        for ti in 0..t {
            for ni in 0..2 {
                for di in 0..d {
                    let idx = (ti * n + ni) * d + di;
                    assert!(
                        (before[idx] - after[idx]).abs() < 1e-12,
                        "temporal attention leaked across nodes at t={ti} n={ni}"
                    );
                }
            }
        }
    }

    #[test]
    fn spatial_layer_is_node_permutation_equivariant() {
        let (b, t, n, d, dff) = (1, 2, 5, 4, 6);
        let mut r = rng(13);
        let x: Vec<f64> = (0..b * t * n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = vec![0.0; x.len()];
        for ti in 0..t {
            for (ni, &src) in perm.iter().enumerate() {
                for di in 0..d {
                    xp[(ti * n + ni) * d + di] = x[(ti * n + src) * d + di];
                }
            }
        }
        let run = |x: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let lv = layer_fixture(&mut tape, d, dff, 21);
            let z = tape.constant(vec![b, t, n, d], x.to_vec()).unwrap();
            let out = encoder_layer(
                &mut tape,
                z,
                AttentionAxis::Space,
                &lv,
                2,
                AttentionScale::PerHead,
                0.0,
                false,
                &mut rng(0),
            )
            .unwrap();
            tape.value(out).to_vec()
        };
        let y = run(&x);
        let yp = run(&xp);
        for ti in 0..t {
            for (ni, &src) in perm.iter().enumerate() {
                for di in 0..d {
                    let a = yp[(ti * n + ni) * d + di];
                    let bval = y[(ti * n + src) * d + di];
                    assert!((a - bval).abs() < 1e-10, "not equivariant at t={ti} n={ni}");
                }
            }
        }
    }

    #[test]
    fn encoder_layer_gradients_match_finite_differences() {
        let (b, t, n, d, dff) = (1, 2, 2, 4, 5);
        let mut r = rng(31);
        let x: Vec<f64> = (0..b * t * n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let build = |tape: &mut Tape, w1: &[f64]| -> Var {
            let mut lv = layer_fixture(tape, d, dff, 3);
            let wt = Tensor::new(vec![d, dff], w1.to_vec()).unwrap();
            lv.ffn_w1 = tape.leaf(&wt, true);
            let z = tape.constant(vec![b, t, n, d], x.clone()).unwrap();
            let out = encoder_layer(
                tape,
                z,
                AttentionAxis::Space,
                &lv,
                2,
                AttentionScale::PerHead,
                0.0,
                false,
                &mut rng(0),
            )
            .unwrap();
            let a = tape.abs(out);
            tape.sum(a)
        };
        let w1: Vec<f64> = (0..d * dff).map(|_| r.random_range(-0.5..0.5)).collect();
        let mut tape = Tape::new();
        let loss = build(&mut tape, &w1);
        tape.backward(loss).unwrap();
        let lv_w1 = Var(12); // 13th leaf: the replacement ffn_w1 pushed after the fixture's 12
        let analytic = tape.grad(lv_w1).unwrap().to_vec();
        let h = 1e-5;
        for j in [0usize, 3, 7, d * dff - 1] {
            let probe = |delta: f64| {
                let mut w = w1.clone();
                w[j] += delta;
                let mut tp = Tape::new();
                let l = build(&mut tp, &w);
                tp.value(l)[0]
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-4);
            assert!(
                (analytic[j] - numeric).abs() / denom < 1e-5,
                "entry {j}: analytic {} numeric {numeric}",
                analytic[j]
            );
        }
    }
}
