//! Central finite-difference verification of analytic gradients, reported
//! per named parameter group.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tape::{Tape, Var};

/// Result for one named parameter tensor.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> &GroupReport {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("report always has at least one group")
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= self.tol)
    }

    pub fn flagged(&self) -> Vec<&GroupReport> {
        self.groups.iter().filter(|g| g.max_rel_err > self.tol).collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.groups.iter().map(|g| g.name.len()).max().unwrap_or(4);
        for g in &self.groups {
            writeln!(
                f,
                "{:<width$}  rel_err {:10.3e}  {}  (analytic {:.6e} vs numeric {:.6e} at [{}])",
                g.name,
                g.max_rel_err,
                if g.max_rel_err <= self.tol { "ok  " } else { "FAIL" },
                g.analytic_at_worst,
                g.numeric_at_worst,
                g.worst_index,
            )?;
        }
        let w = self.worst();
        write!(
            f,
            "worst group {} at rel_err {:.3e} (h = {:.1e}, tol = {:.1e}): {}",
            w.name,
            w.max_rel_err,
            self.h,
            self.tol,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Relative error with an absolute floor so that near-zero gradient pairs are
/// compared absolutely; the floor sits well above central-difference noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares the analytic gradient of `loss_fn` against central finite
/// differences, element by element, for every parameter in `params`.
///
/// `loss_fn` is handed a fresh tape plus one bound variable per parameter (in
/// registry order) and must return a scalar loss. It must be deterministic;
/// a bit-unstable loss is rejected up front since finite differences would be
/// meaningless.
pub fn grad_check<F>(params: &ParamStore, loss_fn: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Config(format!(
            "step size h = {h:e} outside [1e-6, 1e-4]; smaller drowns in rounding noise, larger in truncation error"
        )));
    }
    if params.is_empty() {
        return Err(Error::Contract("grad check needs at least one parameter".into()));
    }

    let base: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .zip(values)
            .map(|((_, t), v)| tape.leaf_from(t.shape().to_vec(), v.clone(), false))
            .collect::<Result<_>>()?;
        let loss = loss_fn(&mut tape, &vars)?;
        if tape.shape(loss) != [1] {
            return Err(Error::Contract(format!(
                "grad check loss must be scalar, got shape {:?}",
                tape.shape(loss)
            )));
        }
        Ok(tape.value(loss)[0])
    };

    let probe = eval(&base)?;
    if probe.to_bits() != eval(&base)?.to_bits() {
        return Err(Error::Numeric(
            "loss is not deterministic across evaluations; disable dropout or fix the seed before grad checking"
                .into(),
        ));
    }

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t, true)).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(params.iter())
            .map(|(&v, (name, _))| match tape.grad(v) {
                Some(g) => Ok(g.to_vec()),
                None => Err(Error::Contract(format!("parameter {name} received no gradient"))),
            })
            .collect::<Result<Vec<Vec<f64>>>>()?
    };

    let mut values = base.clone();
    let mut groups = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        let mut worst = GroupReport {
            name: name.to_string(),
            checked: base[p].len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: analytic[p].first().copied().unwrap_or(0.0),
            numeric_at_worst: 0.0,
        };
        for j in 0..base[p].len() {
            let saved = values[p][j];
            values[p][j] = saved + h;
            let up = eval(&values)?;
            values[p][j] = saved - h;
            let down = eval(&values)?;
            values[p][j] = saved;
            let numeric = (up - down) / (2.0 * h);
            let rel = relative_error(analytic[p][j], numeric);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = j;
                worst.analytic_at_worst = analytic[p][j];
                worst.numeric_at_worst = numeric;
            }
        }
        groups.push(worst);
    }

    Ok(GradCheckReport { groups, h, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig, WindowSet};
    use crate::model::{Model, ModelConfig, Variant};
    use crate::transformer::AttentionScale;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quadratic_store() -> ParamStore {
        let cfg = ModelConfig {
            variant: Variant::NoTransformer,
            input_len: 1,
            output_len: 1,
            nodes: 1,
            feature_dim: 1,
            adaptive_dim: 1,
            heads: 1,
            layers: 1,
            ffn_dim: 1,
            dropout: 0.0,
            scale_mode: AttentionScale::PerHead,
        };
        Model::new(cfg, 3).unwrap().params
    }

    #[test]
    fn quadratic_loss_checks_to_analytic_precision() {
        let mut model_params = quadratic_store();
        for p in 0..model_params.len() {
            for (j, v) in model_params.tensor_mut(p).data_mut().iter_mut().enumerate() {
                *v = 0.3 + 0.01 * (p as f64) + 0.001 * (j as f64);
            }
        }
        let params = model_params;
        let report = grad_check(
            &params,
            |tape, vars| {
                let mut loss = tape.scalar(0.0);
                for &v in vars {
                    let sq = tape.mul(v, v)?;
                    let s = tape.sum(sq);
                    loss = tape.add(loss, s)?;
                }
                Ok(loss)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.worst().max_rel_err < 1e-7, "{report}");
        assert_eq!(report.groups.len(), params.len());
    }

    #[test]
    fn step_size_is_range_checked() {
        let params = quadratic_store();
        let f = |tape: &mut Tape, vars: &[Var]| {
            let v = vars[0];
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        };
        assert!(grad_check(&params, f, 1e-7, 1e-4).is_err());
        assert!(grad_check(&params, f, 1e-3, 1e-4).is_err());
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let params = quadratic_store();
        let counter = std::cell::Cell::new(0.0);
        let err = grad_check(
            &params,
            |tape, _| {
                counter.set(counter.get() + 1.0);
                Ok(tape.scalar(counter.get()))
            },
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("deterministic"), "{err}");
    }

    #[test]
    fn corrupted_backward_rule_is_flagged() {
        let params = quadratic_store();
        let report = grad_check(
            &params,
            |tape, vars| {
                tape.inject_backward_fault(0.02);
                let a = vars[0]; // feature.weight, shape [1, 1]
                let prod = tape.matmul(a, a)?;
                let s = tape.sum(prod);
                // keep every other parameter in the graph so all get grads
                let mut loss = s;
                for &v in &vars[1..] {
                    let sq = tape.mul(v, v)?;
                    let vs = tape.sum(sq);
                    loss = tape.add(loss, vs)?;
                }
                Ok(loss)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        let flagged = report.flagged();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].name, "feature.weight");
    }

    #[test]
    fn small_full_model_passes_end_to_end() {
        let cfg = ModelConfig {
            variant: Variant::Full,
            input_len: 2,
            output_len: 2,
            nodes: 2,
            feature_dim: 2,
            adaptive_dim: 2,
            heads: 2,
            layers: 1,
            ffn_dim: 4,
            dropout: 0.0,
            scale_mode: AttentionScale::PerHead,
        };
        let model = Model::new(cfg, 11).unwrap();
        let ds = generate_synthetic(&SyntheticConfig {
            nodes: 2,
            steps: 40,
            clusters: 1,
            noise_std: 1.0,
            ..Default::default()
        })
        .unwrap();
        let ws = WindowSet::new(&ds, 2, 2).unwrap();
        let batch = ws.batch(&[1, 7], None).unwrap();
        let target: Vec<f64> = batch.y.clone();
        let report = grad_check(
            &model.params,
            |tape, vars| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let pred = model.forward(tape, vars, &batch, false, &mut rng)?;
                let y = tape.leaf_from(
                    vec![batch.size, cfg.output_len, cfg.nodes, 1],
                    target.clone(),
                    false,
                )?;
                let diff = tape.sub(pred, y)?;
                let sq = tape.mul(diff, diff)?;
                Ok(tape.mean(sq))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
