//! SGD and the training loops for every distillation mode.
//!
//! Every session is single-threaded and a pure function of its inputs and
//! seed. The student, each self-learning teacher (SL-T) and the batch
//! shuffler draw from independent seed streams, so switching modes never
//! perturbs the student's initialisation or batch order. That is what makes
//! the mode equivalences (`slkd` with `η = 0` versus `kd`, `kd` with `α = 1`
//! versus `scratch`) hold bit for bit.
//!
//! Within one batch all forward passes and gradients are computed before
//! any parameter is updated; updates then run student first, SL-Ts after.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskData};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, distill_objective, fuse_logits, total_objective, DistillConfig, Mode};
use crate::model::{Model, ModelSpec};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Tape, Tensor, Var};
use crate::trajectory::{epoch_divergences, top1_accuracy, TrajectoryLog, TrajectoryRecord};

/// Epoch budget and SGD hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Epochs at which the learning rate is multiplied by `decay_rate`.
    pub decay_stages: Vec<usize>,
    pub decay_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Schedule {
    /// The 240-epoch CIFAR recipe compressed to 60 epochs, decay stages
    /// scaled to match.
    fn default() -> Self {
        Schedule {
            epochs: 60,
            batch_size: 64,
            lr0: 0.05,
            decay_stages: vec![35, 45, 55],
            decay_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::contract(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::contract(format!(
                "decay_rate must lie in (0, 1], got {}",
                self.decay_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::contract("weight_decay must be nonnegative"));
        }
        if self.decay_stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!(
                "decay_stages must be strictly increasing: {:?}",
                self.decay_stages
            )));
        }
        if self.decay_stages.last().is_some_and(|&s| s >= self.epochs) {
            return Err(Error::contract(format!(
                "decay_stages {:?} must all be below epochs = {}",
                self.decay_stages, self.epochs
            )));
        }
        Ok(())
    }

    /// `lr0 · decay_rate^k` where `k` counts the stages at or before `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        let k = self.decay_stages.iter().filter(|&&s| s <= epoch).count();
        Ok(self.lr0 * self.decay_rate.powi(k as i32))
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn for_model(model: &Model) -> Self {
        OptimizerState {
            velocity: model.params().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// One SGD step with L2 weight decay and heavy-ball momentum:
/// `g' = g + wd·p`, `v ← μ·v + g'`, `p ← p − lr·v`.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.into_iter().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::dim(format!(
                "parameter {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let gd = gi + weight_decay * *pi;
            *vi = momentum * *vi + gd;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Outcome of one training session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub mode: Mode,
    pub seed: u64,
    /// Student probe accuracy after the last epoch.
    pub final_accuracy: f64,
    /// Best student probe accuracy over all epochs.
    pub best_accuracy: f64,
    pub trajectory: TrajectoryLog,
    /// Mean student objective over the batches of each epoch.
    pub epoch_losses: Vec<f64>,
    pub epochs: usize,
    pub student: Model,
    /// SL-Ts as they stand at the end of the session (empty for scratch/kd).
    pub slts: Vec<Model>,
}

/// What an observer sees at the end of each epoch.
pub struct EpochView<'a> {
    pub epoch: usize,
    pub student: &'a Model,
    pub slts: &'a [&'a Model],
    pub record: &'a TrajectoryRecord,
    pub train_loss: f64,
}

pub fn evaluate_accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    top1_accuracy(&model.forward(dataset.features())?, dataset.labels())
}

/// Initialisation seeds for the mode's SL-Ts: distinct from each other and
/// from the teacher's parameter seed.
pub fn slt_seeds(seed: u64, count: usize, teacher_seed: u64) -> Vec<u64> {
    let base = derive_seed(seed, stream::SLT_INIT);
    let mut out = Vec::with_capacity(count);
    let mut k = 0;
    while out.len() < count {
        let s = derive_seed(base, k);
        k += 1;
        if s != teacher_seed && !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

pub fn student_seed(seed: u64) -> u64 {
    derive_seed(seed, stream::STUDENT_INIT)
}

struct Learner {
    model: Model,
    opt: OptimizerState,
}

impl Learner {
    fn new(model: Model) -> Self {
        let opt = OptimizerState::for_model(&model);
        Learner { model, opt }
    }

    fn step(&mut self, grads: &[Tensor], lr: f64, schedule: &Schedule) -> Result<()> {
        sgd_step(
            self.model.params_mut(),
            grads,
            &mut self.opt,
            lr,
            schedule.momentum,
            schedule.weight_decay,
        )
    }
}

struct StepGrads {
    loss: f64,
    logits: Tensor,
    grads: Vec<Tensor>,
}

/// Forward `x` through `model` on a fresh tape, apply `objective` to the
/// logits and backpropagate.
fn compute_grads<F>(model: &Model, x: &Tensor, objective: F) -> Result<StepGrads>
where
    F: for<'t> FnOnce(&Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let logits = bound.forward(&tape.leaf(x.clone()))?;
    let loss = objective(&logits)?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::numeric(format!("training loss became {value}")));
    }
    let mut g = loss.backward()?;
    Ok(StepGrads {
        loss: value,
        logits: logits.detach(),
        grads: bound.params().iter().map(|p| g.take(p)).collect(),
    })
}

/// Order of parameter updates within a batch. All targets are computed
/// before any update, so the order must not change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateOrder {
    #[default]
    StudentFirst,
    SltsFirst,
}

/// Everything one session needs besides the mode-specific networks.
struct Session<'a> {
    mode: Mode,
    teacher: Option<&'a Model>,
    data: &'a TaskData,
    schedule: &'a Schedule,
    cfg: DistillConfig,
    seed: u64,
    teacher_logits: Option<Tensor>,
    order: UpdateOrder,
}

impl Session<'_> {
    fn teacher_batch(&self, indices: &[usize]) -> Result<Option<Tensor>> {
        self.teacher_logits
            .as_ref()
            .map(|t| t.select_rows(indices))
            .transpose()
    }

    /// Trains `slts` against the teacher alone for the whole schedule.
    fn pretrain_slts(&self, slts: &mut [Learner]) -> Result<()> {
        for epoch in 0..self.schedule.epochs {
            let lr = self.schedule.lr_at_epoch(epoch)?;
            for batch in self.data.train.batches(self.schedule.batch_size, self.seed, epoch)? {
                let target = self.teacher_batch(&batch.indices)?.expect("teacher present");
                for slt in slts.iter_mut() {
                    let step = compute_grads(&slt.model, &batch.features, |l| {
                        distill_objective(&batch.labels, l, &target, &self.cfg)
                    })?;
                    slt.step(&step.grads, lr, self.schedule)?;
                }
            }
        }
        Ok(())
    }

    fn run(
        &self,
        student_spec: &ModelSpec,
        observer: &mut dyn FnMut(&EpochView<'_>),
    ) -> Result<SessionResult> {
        let mode = self.mode;
        let mut student = Learner::new(Model::init(student_spec.clone(), student_seed(self.seed))?);

        let teacher_seed = self.teacher.map_or(u64::MAX, Model::param_seed);
        let mut slts = match self.teacher {
            Some(t) => slt_seeds(self.seed, mode.slt_count(), teacher_seed)
                .into_iter()
                .map(|s| t.clone_architecture(s).map(Learner::new))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let frozen = mode == Mode::SlkdSeq;
        if frozen {
            self.pretrain_slts(&mut slts)?;
        }
        let weights = self.cfg.fusion_weights();

        let mut log = TrajectoryLog::new(mode, self.cfg.clone());
        let mut epoch_losses = Vec::with_capacity(self.schedule.epochs);
        let mut best = f64::NEG_INFINITY;

        for epoch in 0..self.schedule.epochs {
            let lr = self.schedule.lr_at_epoch(epoch)?;
            let batches = self.data.train.batches(self.schedule.batch_size, self.seed, epoch)?;
            let mut loss_sum = 0.0;
            for batch in &batches {
                let x = &batch.features;
                let labels = &batch.labels;
                let target = self.teacher_batch(&batch.indices)?;

                // SL-T objectives against the teacher, from pre-update weights.
                let mut slt_steps = Vec::new();
                let slt_logits: Vec<Tensor> = if frozen {
                    slts.iter().map(|s| s.model.forward(x)).collect::<Result<_>>()?
                } else {
                    let t = target.as_ref();
                    for slt in &slts {
                        let t = t.expect("SL-T modes have a teacher");
                        slt_steps.push(compute_grads(&slt.model, x, |l| {
                            distill_objective(labels, l, t, &self.cfg)
                        })?);
                    }
                    slt_steps.iter().map(|s| s.logits.clone()).collect()
                };
                let fused = if slt_logits.is_empty() {
                    None
                } else {
                    let refs: Vec<&Tensor> = slt_logits.iter().collect();
                    Some(fuse_logits(&weights, &refs)?)
                };

                let student_step = compute_grads(&student.model, x, |s| match mode {
                    Mode::Scratch => cross_entropy(s, labels),
                    Mode::Kd => distill_objective(labels, s, target.as_ref().expect("teacher"), &self.cfg),
                    _ => {
                        let l_ts = distill_objective(labels, s, target.as_ref().expect("teacher"), &self.cfg)?;
                        let l_slts = distill_objective(labels, s, fused.as_ref().expect("fused"), &self.cfg)?;
                        total_objective(&l_ts, &l_slts, &self.cfg)
                    }
                })?;
                loss_sum += student_step.loss;

                match self.order {
                    UpdateOrder::StudentFirst => {
                        student.step(&student_step.grads, lr, self.schedule)?;
                        for (slt, step) in slts.iter_mut().zip(&slt_steps) {
                            slt.step(&step.grads, lr, self.schedule)?;
                        }
                    }
                    UpdateOrder::SltsFirst => {
                        for (slt, step) in slts.iter_mut().zip(&slt_steps).rev() {
                            slt.step(&step.grads, lr, self.schedule)?;
                        }
                        student.step(&student_step.grads, lr, self.schedule)?;
                    }
                }
            }

            let train_loss = loss_sum / batches.len() as f64;
            let slt_refs: Vec<&Model> = slts.iter().map(|s| &s.model).collect();
            let record = epoch_divergences(
                epoch,
                &student.model,
                self.teacher,
                &slt_refs,
                &weights,
                &self.data.test,
                self.cfg.tau,
            )?;
            best = best.max(record.acc_student);
            epoch_losses.push(train_loss);
            observer(&EpochView {
                epoch,
                student: &student.model,
                slts: &slt_refs,
                record: &record,
                train_loss,
            });
            log.append(record)?;
        }

        let final_accuracy = match log.last() {
            Some(r) => r.acc_student,
            None => evaluate_accuracy(&student.model, &self.data.test)?,
        };
        Ok(SessionResult {
            mode,
            seed: self.seed,
            final_accuracy,
            best_accuracy: best.max(final_accuracy),
            trajectory: log,
            epoch_losses,
            epochs: self.schedule.epochs,
            student: student.model,
            slts: slts.into_iter().map(|s| s.model).collect(),
        })
    }
}

fn check_compat(teacher: Option<&Model>, student_spec: &ModelSpec, data: &TaskData) -> Result<()> {
    student_spec.validate()?;
    let d = data.train.dim();
    let c = data.train.classes();
    if data.test.dim() != d || data.test.classes() != c {
        return Err(Error::contract("train and test splits disagree in shape"));
    }
    if student_spec.input_dim != d || student_spec.classes != c {
        return Err(Error::contract(format!(
            "student spec {}→{} does not fit data {d}→{c}",
            student_spec.input_dim, student_spec.classes
        )));
    }
    if let Some(t) = teacher {
        let ts = t.spec();
        if ts.input_dim != d || ts.classes != c {
            return Err(Error::contract(format!(
                "teacher {}→{} does not fit data {d}→{c}",
                ts.input_dim, ts.classes
            )));
        }
    }
    Ok(())
}

/// Trains a student in `cfg.mode`. `teacher` is ignored in scratch mode and
/// required otherwise.
pub fn train(
    teacher: Option<&Model>,
    student_spec: &ModelSpec,
    data: &TaskData,
    schedule: &Schedule,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<SessionResult> {
    train_observed(teacher, student_spec, data, schedule, cfg, seed, &mut |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_observed(
    teacher: Option<&Model>,
    student_spec: &ModelSpec,
    data: &TaskData,
    schedule: &Schedule,
    cfg: &DistillConfig,
    seed: u64,
    observer: &mut dyn FnMut(&EpochView<'_>),
) -> Result<SessionResult> {
    run_with_order(teacher, student_spec, data, schedule, cfg, seed, UpdateOrder::default(), observer)
}

/// [`train_observed`] with an explicit update order.
#[allow(clippy::too_many_arguments)]
pub fn run_with_order(
    teacher: Option<&Model>,
    student_spec: &ModelSpec,
    data: &TaskData,
    schedule: &Schedule,
    cfg: &DistillConfig,
    seed: u64,
    order: UpdateOrder,
    observer: &mut dyn FnMut(&EpochView<'_>),
) -> Result<SessionResult> {
    schedule.validate()?;
    cfg.validate()?;
    let mode = cfg.mode;
    let teacher = if mode.needs_teacher() {
        Some(teacher.ok_or_else(|| Error::contract(format!("mode {mode} needs a teacher")))?)
    } else {
        None
    };
    check_compat(teacher, student_spec, data)?;

    let mut cfg = cfg.clone();
    if mode == Mode::SltOnly {
        cfg.lambda = 0.0;
    }
    let teacher_logits = teacher.map(|t| t.forward(data.train.features())).transpose()?;
    Session {
        mode,
        teacher,
        data,
        schedule,
        cfg,
        seed,
        teacher_logits,
        order,
    }
    .run(student_spec, observer)
}

/// Trains a teacher from scratch and keeps the parameters of its best probe
/// epoch (the earliest one on ties). The returned session still describes the
/// whole run.
pub fn train_teacher(
    spec: &ModelSpec,
    data: &TaskData,
    schedule: &Schedule,
    seed: u64,
) -> Result<(Model, SessionResult)> {
    let cfg = DistillConfig::default().with_mode(Mode::Scratch);
    let mut best: Option<(Model, f64)> = None;
    let session = train_observed(None, spec, data, schedule, &cfg, seed, &mut |view| {
        if best.as_ref().is_none_or(|(_, acc)| view.record.acc_student > *acc) {
            best = Some((view.student.clone(), view.record.acc_student));
        }
    })?;
    let model = best.map_or_else(|| session.student.clone(), |(m, _)| m);
    Ok((model, session))
}

fn with_mode(cfg: &DistillConfig, mode: Mode) -> DistillConfig {
    cfg.clone().with_mode(mode)
}

/// Cross-entropy training without a teacher.
pub fn train_scratch(spec: &ModelSpec, data: &TaskData, schedule: &Schedule, seed: u64) -> Result<SessionResult> {
    let cfg = DistillConfig::default().with_mode(Mode::Scratch);
    train(None, spec, data, schedule, &cfg, seed)
}

/// Vanilla knowledge distillation.
pub fn train_kd(
    teacher: &Model,
    student_spec: &ModelSpec,
    data: &TaskData,
    schedule: &Schedule,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<SessionResult> {
    train(Some(teacher), student_spec, data, schedule, &with_mode(cfg, Mode::Kd), seed)
}

/// Parallel SLKD with co-trained SL-Ts; `cfg.mode` picks two fused SL-Ts
/// (`slkd`) or one (`slkd_single`).
pub fn train_slkd(
    teacher: &Model,
    student_spec: &ModelSpec,
    data: &TaskData,
    schedule: &Schedule,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<SessionResult> {
    if !matches!(cfg.mode, Mode::Slkd | Mode::SlkdSingle) {
        return Err(Error::contract(format!(
            "train_slkd runs slkd or slkd_single, not {}",
            cfg.mode
        )));
    }
    train(Some(teacher), student_spec, data, schedule, cfg, seed)
}

/// SL-Ts trained to completion against the teacher, then frozen while the
/// student trains.
pub fn train_slkd_sequential(
    teacher: &Model,
    student_spec: &ModelSpec,
    data: &TaskData,
    schedule: &Schedule,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<SessionResult> {
    train(Some(teacher), student_spec, data, schedule, &with_mode(cfg, Mode::SlkdSeq), seed)
}

/// Parallel SLKD with the teacher branch of the student objective removed.
pub fn train_slt_only(
    teacher: &Model,
    student_spec: &ModelSpec,
    data: &TaskData,
    schedule: &Schedule,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<SessionResult> {
    train(Some(teacher), student_spec, data, schedule, &with_mode(cfg, Mode::SltOnly), seed)
}
