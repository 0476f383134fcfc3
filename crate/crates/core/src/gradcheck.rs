//! Finite-difference verification of every differentiable tape operation
//! and of the full two-SL-T distillation objective.
//!
//! Each check evaluates a scalar function twice: once through the tape's
//! backward rules and once through [`finite_diff_grad`], which only ever
//! reads forward values.

use rand::distributions::{Distribution, Uniform};
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::losses::{cross_entropy, distill_objective, fuse_logits, total_objective, DistillConfig};
use crate::model::{Model, ModelSpec};
use crate::rng::{self, Rng};
use crate::tensor::{finite_diff_grad, max_relative_error, OpKind, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub seeds: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    /// One line per check: name, worst relative error, verdict.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<18} max_rel_error={:.3e} seeds={} {}\n",
                c.name,
                c.max_rel_error,
                c.seeds,
                if c.passed() { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Largest relative error between tape and finite-difference gradients of
/// `f` with respect to each of `inputs`. `fault` corrupts one backward rule
/// on the analytic side only.
pub fn check_function<F>(inputs: &[Tensor], f: F, fault: Option<OpKind>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    tape.inject_fault(fault);
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let grads = f(&tape, &vars)?.backward()?;

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.leaf(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                Ok(f(&tape, &vars)?.value().item())
            },
            &inputs[i],
            STEP,
        )?;
        worst = worst.max(max_relative_error(grads.get(var), &numeric, ABS_FLOOR));
    }
    Ok(worst)
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Normal entries pushed at least `gap` away from zero.
fn away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor {
    normal(rng, shape).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    let dist = Uniform::new(0, classes);
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// `sum(y ∘ r)` for a fixed random `r`, so every output entry gets a
/// distinct upstream gradient.
fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>, r: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(&tape.leaf(r.clone()))?.sum())
}

/// Hidden pre-activations of `model` on `x` all satisfy `|z| > gap`, so a
/// finite-difference step cannot cross a rectifier kink.
fn clear_of_kinks(model: &Model, x: &Tensor, gap: f64) -> bool {
    let mut h = x.clone();
    let last = model.layers().len() - 1;
    for (i, layer) in model.layers().iter().enumerate() {
        let z = crate::tensor::kernels::add_bias(
            &crate::tensor::kernels::matmul(&h, &layer.weight).expect("shapes"),
            &layer.bias,
        )
        .expect("shapes");
        if i < last {
            if z.data().iter().any(|v| v.abs() <= gap) {
                return false;
            }
            h = crate::tensor::kernels::relu(&z);
        }
    }
    true
}

fn model_inputs(model: &Model) -> Vec<Tensor> {
    model.params().cloned().collect()
}

/// Rebuilds an MLP forward from flat parameter vars `[w0, b0, w1, b1, ...]`.
fn mlp_forward<'t>(params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
    let n = params.len() / 2;
    let mut h = x;
    for (i, wb) in params.chunks_exact(2).enumerate() {
        h = h.matmul(&wb[0])?.add_bias(&wb[1])?;
        if i + 1 < n {
            h = h.relu();
        }
    }
    Ok(h)
}

fn single_case(name: &'static str, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = rng::rng(seed);
    match name {
        "matmul" => {
            let a = normal(&mut rng, &[3, 4]);
            let b = normal(&mut rng, &[4, 2]);
            let r = normal(&mut rng, &[3, 2]);
            check_function(&[a, b], |t, v| weighted_sum(t, v[0].matmul(&v[1])?, &r), fault)
        }
        "add_bias" => {
            let x = normal(&mut rng, &[3, 4]);
            let b = normal(&mut rng, &[4]);
            let r = normal(&mut rng, &[3, 4]);
            check_function(&[x, b], |t, v| weighted_sum(t, v[0].add_bias(&v[1])?, &r), fault)
        }
        "relu" => {
            let x = away_from_zero(&mut rng, &[4, 5], 1e-3);
            let r = normal(&mut rng, &[4, 5]);
            check_function(&[x], |t, v| weighted_sum(t, v[0].relu(), &r), fault)
        }
        "log_softmax_rows" => {
            let x = normal(&mut rng, &[3, 5]).map(|v| 3.0 * v);
            let r = normal(&mut rng, &[3, 5]);
            check_function(&[x], |t, v| weighted_sum(t, v[0].log_softmax_rows()?, &r), fault)
        }
        "scale" => {
            let x = normal(&mut rng, &[2, 3]);
            let s: f64 = StandardNormal.sample(&mut rng);
            let r = normal(&mut rng, &[2, 3]);
            check_function(&[x], |t, v| weighted_sum(t, v[0].scale(s), &r), fault)
        }
        "add" => {
            let a = normal(&mut rng, &[3, 3]);
            let b = normal(&mut rng, &[3, 3]);
            let r = normal(&mut rng, &[3, 3]);
            check_function(&[a, b], |t, v| weighted_sum(t, v[0].add(&v[1])?, &r), fault)
        }
        "mul" => {
            let a = normal(&mut rng, &[3, 3]);
            let b = normal(&mut rng, &[3, 3]);
            let r = normal(&mut rng, &[3, 3]);
            check_function(&[a, b], |t, v| weighted_sum(t, v[0].mul(&v[1])?, &r), fault)
        }
        "sum" => {
            let x = normal(&mut rng, &[4, 2]);
            // sum(x)·sum(x) so the upstream gradient is not a constant 1.
            check_function(
                &[x],
                |_, v| {
                    let s = v[0].sum();
                    s.mul(&s)
                },
                fault,
            )
        }
        "nll_mean" => {
            let x = normal(&mut rng, &[4, 5]);
            let y = labels(&mut rng, 4, 5);
            check_function(&[x], |_, v| v[0].nll_mean(&y), fault)
        }
        "kl_to_target" => {
            let x = normal(&mut rng, &[4, 5]);
            let target = crate::tensor::kernels::log_softmax_rows(&normal(&mut rng, &[4, 5]))?;
            check_function(&[x], |_, v| v[0].kl_to_target(&target), fault)
        }
        "mlp_cross_entropy" => {
            let spec = ModelSpec::new(4, vec![6], 3)?;
            let (model, x) = loop {
                let model = Model::init(spec.clone(), rng::derive_seed(seed, 100))?;
                let x = normal(&mut rng, &[5, 4]);
                if clear_of_kinks(&model, &x, 1e-3) {
                    break (model, x);
                }
            };
            let y = labels(&mut rng, 5, 3);
            check_function(
                &model_inputs(&model),
                |t, v| cross_entropy(&mlp_forward(v, t.leaf(x.clone()))?, &y),
                fault,
            )
        }
        "slkd_composite" => {
            // Student MLP against a fixed teacher and two fused SL-T targets.
            let spec = ModelSpec::new(4, vec![5], 3)?;
            let (model, x) = loop {
                let model = Model::init(spec.clone(), rng::derive_seed(seed, 200))?;
                let x = normal(&mut rng, &[6, 4]);
                if clear_of_kinks(&model, &x, 1e-3) {
                    break (model, x);
                }
            };
            let y = labels(&mut rng, 6, 3);
            let teacher = normal(&mut rng, &[6, 3]).map(|v| 2.0 * v);
            let slt1 = normal(&mut rng, &[6, 3]);
            let slt2 = normal(&mut rng, &[6, 3]);
            let cfg = DistillConfig {
                alpha: 0.3,
                tau: 2.0,
                lambda: 0.7,
                eta: 1.3,
                rho: 0.6,
                ..DistillConfig::default()
            };
            let fused = fuse_logits(&[cfg.rho, 1.0 - cfg.rho], &[&slt1, &slt2])?;
            check_function(
                &model_inputs(&model),
                |t, v| {
                    let s = mlp_forward(v, t.leaf(x.clone()))?;
                    let l_ts = distill_objective(&y, &s, &teacher, &cfg)?;
                    let l_slts = distill_objective(&y, &s, &fused, &cfg)?;
                    total_objective(&l_ts, &l_slts, &cfg)
                },
                fault,
            )
        }
        other => unreachable!("unknown check {other}"),
    }
}

/// Names of every check, one per differentiable op plus two composites.
pub const CHECKS: [&str; 12] = [
    "matmul",
    "add_bias",
    "relu",
    "log_softmax_rows",
    "scale",
    "add",
    "mul",
    "sum",
    "nll_mean",
    "kl_to_target",
    "mlp_cross_entropy",
    "slkd_composite",
];

/// Runs every check over `seeds` random draws.
pub fn run_suite(seeds: usize, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let checks = CHECKS
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let mut worst: f64 = 0.0;
            for s in 0..seeds {
                let seed = rng::derive_seed(k as u64, s as u64);
                worst = worst.max(single_case(name, seed, fault)?);
            }
            Ok(CheckResult {
                name,
                max_rel_error: worst,
                seeds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_stock_rules() {
        let report = run_suite(3, None).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.checks.len(), CHECKS.len());
    }

    #[test]
    fn every_differentiable_op_is_covered() {
        for kind in OpKind::DIFFERENTIABLE {
            assert!(CHECKS.contains(&kind.name()), "{kind} has no check");
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let report = run_suite(2, Some(OpKind::Relu)).unwrap();
        assert!(!report.passed());
        let relu = report.checks.iter().find(|c| c.name == "relu").unwrap();
        assert!(!relu.passed());
        let mm = report.checks.iter().find(|c| c.name == "matmul").unwrap();
        assert!(mm.passed());
    }
}
