use std::cell::RefCell;

use slkd_core::data::gaussian_mixture;
use slkd_core::losses::{distill_objective, mean_kl};
use slkd_core::training::{
    evaluate_accuracy, run_with_order, sgd_step, train, train_kd, train_observed, train_scratch,
    train_slkd, train_slkd_sequential, train_slt_only, train_teacher, OptimizerState, UpdateOrder,
};
use slkd_core::{DistillConfig, Mode, Model, ModelSpec, Schedule, SessionResult, Tape, TaskData, Tensor};

fn task() -> TaskData {
    gaussian_mixture(4, 6, 40, 0.8, 3).unwrap()
}

fn short() -> Schedule {
    Schedule {
        epochs: 6,
        batch_size: 32,
        decay_stages: vec![3, 5],
        ..Schedule::default()
    }
}

fn student_spec() -> ModelSpec {
    ModelSpec::new(6, vec![5], 4).unwrap()
}

fn teacher(data: &TaskData) -> Model {
    let spec = ModelSpec::new(6, vec![16, 16], 4).unwrap();
    train_teacher(&spec, data, &short(), 99).unwrap().0
}

fn same_student(a: &SessionResult, b: &SessionResult) {
    assert_eq!(a.student, b.student);
    assert_eq!(a.student.checksum(), b.student.checksum());
    assert_eq!(a.final_accuracy.to_bits(), b.final_accuracy.to_bits());
    assert_eq!(a.best_accuracy.to_bits(), b.best_accuracy.to_bits());
    let accs = |r: &SessionResult| r.trajectory.records().iter().map(|x| x.acc_student).collect::<Vec<_>>();
    assert_eq!(accs(a), accs(b));
}

#[test]
fn lr_schedule_examples() {
    let s = Schedule {
        epochs: 240,
        decay_stages: vec![150, 180, 210],
        ..Schedule::default()
    };
    assert_eq!(s.lr_at_epoch(0).unwrap(), 0.05);
    assert!((s.lr_at_epoch(150).unwrap() - 0.005).abs() < 1e-15);
    assert!((s.lr_at_epoch(239).unwrap() - 0.00005).abs() < 1e-15);
    assert!(s.lr_at_epoch(240).is_err());
}

fn one_param_step(p: f64, g: f64, lr: f64, wd: f64) -> f64 {
    let mut model = Model::init(ModelSpec::new(1, vec![], 2).unwrap(), 0).unwrap();
    let mut state = OptimizerState::for_model(&model);
    let mut params: Vec<Tensor> = model.params().cloned().collect();
    params[0] = Tensor::matrix(1, 2, vec![p, p]).unwrap();
    let grads: Vec<Tensor> = params.iter().map(|t| t.map(|_| g)).collect();
    sgd_step(params.iter_mut(), &grads, &mut state, lr, 0.0, wd).unwrap();
    for (dst, src) in model.params_mut().zip(&params) {
        *dst = src.clone();
    }
    model.layers()[0].weight.get(0, 0)
}

#[test]
fn sgd_step_examples() {
    assert!((one_param_step(1.0, 0.5, 0.1, 0.0) - 0.95).abs() < 1e-15);
    assert_eq!(one_param_step(0.7, 0.0, 0.1, 0.0), 0.7);
    assert!((one_param_step(1.0, 0.5, 0.1, 5e-4) - 0.94995).abs() < 1e-15);
}

#[test]
fn sgd_rejects_mismatched_state() {
    let mut p = [Tensor::scalar(1.0)];
    let mut state = OptimizerState::for_model(&Model::init(ModelSpec::new(1, vec![], 2).unwrap(), 0).unwrap());
    assert!(sgd_step(p.iter_mut(), &[Tensor::scalar(0.5)], &mut state, 0.1, 0.9, 0.0).is_err());
}

#[test]
fn sessions_are_deterministic() {
    let data = task();
    let t = teacher(&data);
    for mode in Mode::ALL {
        let cfg = DistillConfig::default().with_mode(mode);
        let a = train(Some(&t), &student_spec(), &data, &short(), &cfg, 5).unwrap();
        let b = train(Some(&t), &student_spec(), &data, &short(), &cfg, 5).unwrap();
        assert_eq!(a, b, "{mode}");
        assert_eq!(a.trajectory.to_csv(), b.trajectory.to_csv());
        assert!(a.epoch_losses.iter().all(|l| l.is_finite()), "{mode}");
    }
}

#[test]
fn slkd_without_slt_term_is_kd() {
    let data = task();
    let t = teacher(&data);
    let cfg = DistillConfig { eta: 0.0, ..DistillConfig::default() };
    for mode in [Mode::Slkd, Mode::SlkdSingle, Mode::SlkdSeq] {
        let slkd = train(Some(&t), &student_spec(), &data, &short(), &cfg.clone().with_mode(mode), 2).unwrap();
        let kd = train_kd(&t, &student_spec(), &data, &short(), &cfg, 2).unwrap();
        same_student(&slkd, &kd);
    }
}

#[test]
fn kd_without_kd_term_is_scratch() {
    let data = task();
    let t = teacher(&data);
    let cfg = DistillConfig { alpha: 1.0, ..DistillConfig::default() };
    let kd = train_kd(&t, &student_spec(), &data, &short(), &cfg, 4).unwrap();
    let scratch = train_scratch(&student_spec(), &data, &short(), 4).unwrap();
    same_student(&kd, &scratch);
}

#[test]
fn slkd_without_teacher_term_is_slt_only() {
    let data = task();
    let t = teacher(&data);
    let cfg = DistillConfig { lambda: 0.0, ..DistillConfig::default() };
    let slkd = train_slkd(&t, &student_spec(), &data, &short(), &cfg, 6).unwrap();
    let slt_only = train_slt_only(&t, &student_spec(), &data, &short(), &DistillConfig::default(), 6).unwrap();
    same_student(&slkd, &slt_only);
    assert_eq!(slkd.slts, slt_only.slts);
}

#[test]
fn update_order_does_not_matter() {
    let data = task();
    let t = teacher(&data);
    for mode in [Mode::Slkd, Mode::SlkdSingle, Mode::SltOnly] {
        let cfg = DistillConfig::default().with_mode(mode);
        let run = |order| {
            run_with_order(Some(&t), &student_spec(), &data, &short(), &cfg, 8, order, &mut |_| {}).unwrap()
        };
        assert_eq!(run(UpdateOrder::StudentFirst), run(UpdateOrder::SltsFirst), "{mode}");
    }
}

#[test]
fn teacher_is_never_modified() {
    let data = task();
    let t = teacher(&data);
    let before = t.checksum();
    for mode in Mode::ALL {
        let cfg = DistillConfig::default().with_mode(mode);
        train(Some(&t), &student_spec(), &data, &short(), &cfg, 1).unwrap();
        assert_eq!(t.checksum(), before, "{mode}");
    }
}

#[test]
fn sequential_slts_stay_frozen() {
    let data = task();
    let t = teacher(&data);
    let sums = RefCell::new(Vec::new());
    let cfg = DistillConfig::default().with_mode(Mode::SlkdSeq);
    let result = train_observed(Some(&t), &student_spec(), &data, &short(), &cfg, 3, &mut |view| {
        sums.borrow_mut().push(view.slts.iter().map(|m| m.checksum()).collect::<Vec<_>>());
    })
    .unwrap();
    let sums = sums.into_inner();
    assert_eq!(sums.len(), short().epochs);
    assert_eq!(sums[0].len(), 2);
    assert!(sums.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(result.slts.iter().map(Model::checksum).collect::<Vec<_>>(), sums[0]);
    let direct = train_slkd_sequential(&t, &student_spec(), &data, &short(), &cfg, 3).unwrap();
    assert_eq!(direct, result);
}

#[test]
fn parallel_slts_keep_learning() {
    let data = task();
    let t = teacher(&data);
    let sums = RefCell::new(Vec::new());
    train_observed(Some(&t), &student_spec(), &data, &short(), &DistillConfig::default(), 3, &mut |view| {
        sums.borrow_mut().push(view.slts[0].checksum());
    })
    .unwrap();
    let sums = sums.into_inner();
    assert!(sums.windows(2).all(|w| w[0] != w[1]));
}

#[test]
fn rho_one_measures_against_first_slt() {
    let data = task();
    let t = teacher(&data);
    let cfg = DistillConfig { rho: 1.0, ..DistillConfig::default() };
    let r = train_slkd(&t, &student_spec(), &data, &short(), &cfg, 2).unwrap();
    let x = data.test.features();
    let expected = mean_kl(&r.slts[0].forward(x).unwrap(), &r.student.forward(x).unwrap(), cfg.tau).unwrap();
    assert_eq!(r.trajectory.last().unwrap().kl_student_slt, Some(expected));
}

#[test]
fn slt_count_follows_mode() {
    let data = task();
    let t = teacher(&data);
    for mode in Mode::ALL {
        let r = train(Some(&t), &student_spec(), &data, &short(), &DistillConfig::default().with_mode(mode), 0)
            .unwrap();
        assert_eq!(r.slts.len(), mode.slt_count(), "{mode}");
        for slt in &r.slts {
            assert_eq!(slt.spec(), t.spec());
            assert_ne!(slt.param_seed(), t.param_seed());
        }
        let rec = r.trajectory.last().unwrap();
        assert_eq!(rec.kl_student_teacher.is_some(), mode.needs_teacher());
        assert_eq!(rec.kl_student_slt.is_some(), mode.slt_count() > 0);
    }
}

#[test]
fn contract_errors() {
    let data = task();
    let cfg = DistillConfig::default();
    assert!(train(None, &student_spec(), &data, &short(), &cfg, 0).is_err());
    let wrong = Model::init(ModelSpec::new(6, vec![4], 3).unwrap(), 0).unwrap();
    assert!(train(Some(&wrong), &student_spec(), &data, &short(), &cfg, 0).is_err());
    let t = teacher(&data);
    assert!(train_slkd(&t, &student_spec(), &data, &short(), &cfg.clone().with_mode(Mode::Kd), 0).is_err());
    let bad = ModelSpec::new(5, vec![4], 4).unwrap();
    assert!(train_kd(&t, &bad, &data, &short(), &cfg, 0).is_err());
}

#[test]
fn zero_epochs_reports_initial_accuracy() {
    let data = task();
    let schedule = Schedule { epochs: 0, decay_stages: vec![], ..Schedule::default() };
    let r = train_scratch(&student_spec(), &data, &schedule, 11).unwrap();
    let init = Model::init(student_spec(), r.student.param_seed()).unwrap();
    assert_eq!(r.student, init);
    assert_eq!(r.final_accuracy, evaluate_accuracy(&init, &data.test).unwrap());
    assert!(r.trajectory.is_empty());
}

#[test]
fn separable_blobs_are_learned() {
    let data = gaussian_mixture(2, 4, 100, 0.05, 17).unwrap();
    let schedule = Schedule { epochs: 30, decay_stages: vec![20], ..Schedule::default() };
    let r = train_scratch(&ModelSpec::new(4, vec![8], 2).unwrap(), &data, &schedule, 0).unwrap();
    assert!(r.final_accuracy > 0.95, "{}", r.final_accuracy);
}

#[test]
fn teacher_checkpoint_is_its_best_epoch() {
    let data = task();
    let spec = ModelSpec::new(6, vec![16, 16], 4).unwrap();
    let (model, session) = train_teacher(&spec, &data, &short(), 99).unwrap();
    assert_eq!(evaluate_accuracy(&model, &data.test).unwrap(), session.best_accuracy);
}

#[test]
fn copied_logits_with_pure_kd_have_zero_loss() {
    let data = task();
    let t = teacher(&data);
    let logits = t.forward(data.train.features()).unwrap();
    let tape = Tape::new();
    let cfg = DistillConfig { alpha: 0.0, ..DistillConfig::default() };
    let loss = distill_objective(data.train.labels(), &tape.leaf(logits.clone()), &logits, &cfg).unwrap();
    assert!(loss.value().item().abs() < 1e-12);
}

#[test]
fn accuracy_matches_brute_force() {
    let data = gaussian_mixture(5, 3, 30, 1.0, 8).unwrap();
    let model = Model::init(ModelSpec::new(3, vec![7], 5).unwrap(), 21).unwrap();
    let logits = model.forward(data.test.features()).unwrap();
    let mut hits = 0;
    for (i, &y) in data.test.labels().iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        hits += usize::from(best == y);
    }
    let expected = hits as f64 / data.test.len() as f64;
    assert_eq!(evaluate_accuracy(&model, &data.test).unwrap(), expected);
}

#[test]
fn constant_prediction_on_balanced_classes() {
    let data = gaussian_mixture(4, 3, 25, 1.0, 2).unwrap();
    let spec = ModelSpec::new(3, vec![], 4).unwrap();
    let zero = Model::init(spec.clone(), 0).unwrap();
    let mut layers = zero.layers().to_vec();
    layers[0].weight = Tensor::zeros(&[3, 4]);
    layers[0].bias = Tensor::vector(vec![0.0, 2.0, 1.0, 0.0]).unwrap();
    let constant = Model::from_layers(spec, 0, layers).unwrap();
    assert_eq!(evaluate_accuracy(&constant, &data.test).unwrap(), 0.25);

    let all_ties = Model::from_layers(
        ModelSpec::new(3, vec![], 4).unwrap(),
        0,
        vec![slkd_core::model::Layer { weight: Tensor::zeros(&[3, 4]), bias: Tensor::zeros(&[4]) }],
    )
    .unwrap();
    let first_class = data.test.labels().iter().filter(|&&y| y == 0).count() as f64 / data.test.len() as f64;
    assert_eq!(evaluate_accuracy(&all_ties, &data.test).unwrap(), first_class);
}
