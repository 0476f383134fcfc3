//! Distillation objectives.
//!
//! All objectives are batch means. Supervision targets are passed as plain
//! [`Tensor`]s, never as tape variables, so no gradient can reach the
//! network that produced them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor, Var};

/// Training mode of a distillation session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Cross-entropy only, no teacher.
    Scratch,
    /// Vanilla knowledge distillation from the teacher.
    Kd,
    /// Teacher plus two co-trained, fused self-learning teachers.
    Slkd,
    /// Self-learning teachers trained to completion first, then frozen.
    SlkdSeq,
    /// Student supervised by the fused self-learning teachers only.
    SltOnly,
    /// Teacher plus a single self-learning teacher.
    SlkdSingle,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Scratch,
        Mode::Kd,
        Mode::Slkd,
        Mode::SlkdSeq,
        Mode::SltOnly,
        Mode::SlkdSingle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::Kd => "kd",
            Mode::Slkd => "slkd",
            Mode::SlkdSeq => "slkd_seq",
            Mode::SltOnly => "slt_only",
            Mode::SlkdSingle => "slkd_single",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Mode::Scratch
    }

    /// Number of self-learning teachers the mode trains.
    pub fn slt_count(self) -> usize {
        match self {
            Mode::Scratch | Mode::Kd => 0,
            Mode::SlkdSingle => 1,
            Mode::Slkd | Mode::SlkdSeq | Mode::SltOnly => 2,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown mode `{s}` (expected one of scratch, kd, slkd, slkd_seq, slt_only, slkd_single)"
                ))
            })
    }
}

/// Loss weights and temperature shared by every objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of cross-entropy against the softened KL term.
    pub alpha: f64,
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of the teacher-supervised student objective.
    pub lambda: f64,
    /// Weight of the SL-T-supervised student objective.
    pub eta: f64,
    /// Fusion weight of the first SL-T.
    pub rho: f64,
    /// Multiply the KL term by `tau²`.
    pub tau_squared: bool,
    pub mode: Mode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.1,
            tau: 4.0,
            lambda: 1.0,
            eta: 1.0,
            rho: 0.5,
            tau_squared: true,
            mode: Mode::Slkd,
        }
    }
}

impl DistillConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.tau, self.lambda, self.eta, self.rho]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::contract(format!("non-finite loss weight in {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::contract(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.tau <= 0.0 {
            return Err(Error::contract(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda < 0.0 || self.eta < 0.0 {
            return Err(Error::contract("lambda and eta must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::contract(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.mode.slt_count() > 0 && self.lambda == 0.0 && self.eta == 0.0 {
            return Err(Error::contract(
                "at least one of lambda and eta must be positive",
            ));
        }
        Ok(())
    }

    /// Fusion weights for the mode's self-learning teachers.
    pub fn fusion_weights(&self) -> Vec<f64> {
        match self.mode.slt_count() {
            0 => Vec::new(),
            1 => vec![1.0],
            _ => vec![self.rho, 1.0 - self.rho],
        }
    }
}

/// Mean cross-entropy of integer labels under row-softmax of `logits`.
pub fn cross_entropy<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.log_softmax_rows()?.nll_mean(labels)
}

/// `KL(softmax(target/τ) ‖ softmax(student/τ))`, averaged over rows and
/// multiplied by `τ²` when `tau_squared` is set.
pub fn kd_divergence<'t>(
    target_logits: &Tensor,
    student_logits: &Var<'t>,
    tau: f64,
    tau_squared: bool,
) -> Result<Var<'t>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::contract(format!("tau must be positive, got {tau}")));
    }
    let shape = student_logits.shape();
    if target_logits.shape() != shape.as_slice() {
        return Err(Error::dim(format!(
            "target logits {:?} vs student logits {shape:?}",
            target_logits.shape()
        )));
    }
    let target_logp = kernels::log_softmax_rows(&kernels::scale(target_logits, 1.0 / tau))?;
    let kl = student_logits
        .scale(1.0 / tau)
        .log_softmax_rows()?
        .kl_to_target(&target_logp)?;
    Ok(if tau_squared { kl.scale(tau * tau) } else { kl })
}

/// `α·CE(labels, student) + (1 − α)·KD(target, student)`.
pub fn distill_objective<'t>(
    labels: &[usize],
    student_logits: &Var<'t>,
    target_logits: &Tensor,
    cfg: &DistillConfig,
) -> Result<Var<'t>> {
    let ce = cross_entropy(student_logits, labels)?;
    let kd = kd_divergence(target_logits, student_logits, cfg.tau, cfg.tau_squared)?;
    ce.scale(cfg.alpha).add(&kd.scale(1.0 - cfg.alpha))
}

/// `λ·l_ts + η·l_slts`.
pub fn total_objective<'t>(l_ts: &Var<'t>, l_slts: &Var<'t>, cfg: &DistillConfig) -> Result<Var<'t>> {
    l_ts.scale(cfg.lambda).add(&l_slts.scale(cfg.eta))
}

/// Convex combination of equally shaped logit matrices.
pub fn fuse_logits(weights: &[f64], logits: &[&Tensor]) -> Result<Tensor> {
    if weights.is_empty() || weights.len() != logits.len() {
        return Err(Error::contract(format!(
            "{} fusion weights for {} logit sets",
            weights.len(),
            logits.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::contract(format!("fusion weights must be nonnegative: {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("fusion weights sum to {total}, not 1")));
    }
    let shape = logits[0].shape();
    if let Some(bad) = logits.iter().find(|l| l.shape() != shape) {
        return Err(Error::dim(format!(
            "fused logits disagree in shape: {shape:?} vs {:?}",
            bad.shape()
        )));
    }
    let mut out = vec![0.0; logits[0].len()];
    for (w, l) in weights.iter().zip(logits) {
        for (o, v) in out.iter_mut().zip(l.data()) {
            *o += w * v;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Plain value of the row-mean `KL(softmax(target/τ) ‖ softmax(student/τ))`,
/// without any `τ²` factor. Used for monitoring, not optimisation.
pub fn mean_kl(target_logits: &Tensor, student_logits: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::contract(format!("tau must be positive, got {tau}")));
    }
    if target_logits.shape() != student_logits.shape() {
        return Err(Error::dim(format!(
            "target logits {:?} vs student logits {:?}",
            target_logits.shape(),
            student_logits.shape()
        )));
    }
    let t = kernels::log_softmax_rows(&kernels::scale(target_logits, 1.0 / tau))?;
    let s = kernels::log_softmax_rows(&kernels::scale(student_logits, 1.0 / tau))?;
    let total: f64 = t
        .data()
        .iter()
        .zip(s.data())
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p > 0.0 {
                p * (lp - lq)
            } else {
                0.0
            }
        })
        .sum();
    // Rounding can leave a tiny negative value for identical inputs.
    Ok((total / t.rows() as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v]).unwrap()
    }

    #[test]
    fn cross_entropy_cases() {
        let tape = Tape::new();
        let certain = tape.leaf(row(&[0.0, 1e4, 0.0]));
        assert!(cross_entropy(&certain, &[1]).unwrap().value().item() < 1e-12);

        let uniform = tape.leaf(Tensor::zeros(&[3, 5]));
        let ce = cross_entropy(&uniform, &[0, 4, 2]).unwrap().value().item();
        assert!((ce - 5f64.ln()).abs() < 1e-12);

        let x = tape.leaf(row(&[2.0, 0.0]));
        let expected = -(1.0 / (1.0 + 2f64.exp())).ln();
        let ce = cross_entropy(&x, &[1]).unwrap().value().item();
        assert!((ce - expected).abs() < 1e-12);
        assert!((ce - 2.1269).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let tape = Tape::new();
        let x = tape.leaf(row(&[1.0, 2.0]));
        assert!(matches!(cross_entropy(&x, &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn kd_divergence_cases() {
        let tape = Tape::new();
        let t = row(&[2.0, 0.0]);
        let same = tape.leaf(t.clone());
        for tau in [0.5, 1.0, 4.0] {
            let v = kd_divergence(&t, &same, tau, true).unwrap().value().item();
            assert!(v.abs() < 1e-12);
        }
        let s = tape.leaf(row(&[0.0, 2.0]));
        let v = kd_divergence(&t, &s, 1.0, true).unwrap().value().item();
        assert!((v - 1.5232).abs() < 1e-4, "{v}");

        let scaled = kd_divergence(&t, &s, 4.0, true).unwrap().value().item();
        let plain = kd_divergence(&t, &s, 4.0, false).unwrap().value().item();
        assert!(scaled > plain);
        assert!((scaled - 16.0 * plain).abs() < 1e-12);
        assert!(kd_divergence(&t, &s, 0.0, true).is_err());
        assert!(kd_divergence(&t, &s, -1.0, true).is_err());
    }

    #[test]
    fn objective_reductions() {
        let tape = Tape::new();
        let s = tape.leaf(Tensor::from_rows(&[[0.3, -1.0, 2.0], [0.0, 0.5, 0.1]]).unwrap());
        let t = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, -1.0]]).unwrap();
        let labels = [2, 1];

        let cfg = DistillConfig { alpha: 1.0, ..Default::default() };
        let obj = distill_objective(&labels, &s, &t, &cfg).unwrap().value().item();
        let ce = cross_entropy(&s, &labels).unwrap().value().item();
        assert_eq!(obj, ce);

        let cfg = DistillConfig { alpha: 0.0, ..Default::default() };
        let same = s.detach();
        let obj = distill_objective(&labels, &s, &same, &cfg).unwrap().value().item();
        assert!(obj.abs() < 1e-12);
    }

    #[test]
    fn total_objective_weights() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(0.3));
        let b = tape.leaf(Tensor::scalar(0.5));
        let cfg = |lambda, eta| DistillConfig { lambda, eta, ..Default::default() };
        assert_eq!(total_objective(&a, &b, &cfg(1.0, 0.0)).unwrap().value().item(), 0.3);
        assert_eq!(total_objective(&a, &b, &cfg(0.0, 1.0)).unwrap().value().item(), 0.5);
        assert!((total_objective(&a, &b, &cfg(1.0, 1.0)).unwrap().value().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn fusion_cases() {
        let l1 = row(&[1.0, 3.0]);
        let l2 = row(&[3.0, 1.0]);
        assert_eq!(fuse_logits(&[1.0, 0.0], &[&l1, &l2]).unwrap(), l1);
        assert_eq!(fuse_logits(&[0.5, 0.5], &[&l1, &l2]).unwrap(), row(&[2.0, 2.0]));
        let f = fuse_logits(&[0.7, 0.3], &[&l1, &l2]).unwrap();
        assert!((f.data()[0] - 1.6).abs() < 1e-12 && (f.data()[1] - 2.4).abs() < 1e-12);
        assert!(matches!(fuse_logits(&[0.7, 0.4], &[&l1, &l2]), Err(Error::Contract(_))));
        assert!(fuse_logits(&[1.2, -0.2], &[&l1, &l2]).is_err());
    }

    #[test]
    fn mean_kl_matches_scalar_evaluation() {
        let v = mean_kl(&row(&[2.0, 0.0]), &row(&[0.0, 2.0]), 1.0).unwrap();
        let p = 1.0 / (1.0 + (-2f64).exp());
        let expected = p * (p / (1.0 - p)).ln() + (1.0 - p) * ((1.0 - p) / p).ln();
        assert!((v - expected).abs() < 1e-12);
        assert_eq!(mean_kl(&row(&[1.0, 2.0]), &row(&[1.0, 2.0]), 3.0).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = [
            DistillConfig { alpha: 1.5, ..Default::default() },
            DistillConfig { tau: 0.0, ..Default::default() },
            DistillConfig { rho: -0.1, ..Default::default() },
            DistillConfig { eta: f64::NAN, ..Default::default() },
            DistillConfig { lambda: 0.0, eta: 0.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let kd = DistillConfig { lambda: 0.0, eta: 0.0, mode: Mode::Kd, ..Default::default() };
        assert!(kd.validate().is_ok());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("vanilla".parse::<Mode>().is_err());
    }
}
