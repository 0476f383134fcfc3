//! Subcommand implementations. Each writes its artifacts under the
//! configured output directory and returns what it wrote.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use slkd_core::gradcheck::{run_suite, GradcheckReport};
use slkd_core::training::{evaluate_accuracy, train, train_teacher};
use slkd_core::{DistillConfig, Mode, Model, OpKind, Schedule, SessionResult, TaskData};

use crate::config::{ExperimentConfig, TaskSpec};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub hidden: Vec<usize>,
    pub teacher_seed: u64,
    /// Probe accuracy of the saved (best-epoch) parameters.
    pub test_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub final_epoch_accuracy: f64,
    pub checksum: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub teacher_hidden: Option<Vec<usize>>,
    pub student_hidden: Vec<usize>,
    pub task: TaskSpec,
    pub distill: DistillConfig,
    pub schedule: Schedule,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: Mode,
    pub teacher_hidden: Option<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub final_mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub final_std: f64,
    pub best_mean: f64,
    pub best_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub aggregate: Aggregate,
    pub runs: Vec<RunSummary>,
}

/// A finished seed: its summary and the full session.
pub struct SeedRun {
    pub summary: RunSummary,
    pub session: SessionResult,
}

pub struct DistillOutcome {
    pub report: DistillReport,
    pub runs: Vec<SeedRun>,
    pub dir: PathBuf,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

pub fn hidden_label(hidden: &[usize]) -> String {
    if hidden.is_empty() {
        "linear".into()
    } else {
        hidden.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("summary serializes");
    s.push('\n');
    s
}

/// Trains the configured teacher, keeping its best probe epoch, and saves it
/// to the teacher path with a summary beside it.
pub fn run_train_teacher(cfg: &ExperimentConfig) -> Result<TeacherSummary> {
    let data = cfg.task.load()?;
    let (teacher, summary) = fit_teacher(cfg, &data, &cfg.teacher.hidden)?;
    let path = cfg.teacher_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    teacher.save(&path).map_err(|e| match e {
        slkd_core::Error::Io(io) => CliError::io(&path, io),
        other => other.into(),
    })?;
    write(&path.with_extension("summary.json"), &to_json(&summary))?;
    Ok(summary)
}

/// Trains a teacher without touching the filesystem.
pub fn fit_teacher(cfg: &ExperimentConfig, data: &TaskData, hidden: &[usize]) -> Result<(Model, TeacherSummary)> {
    let (spec, _) = cfg.specs_for_data(data, hidden)?;
    let start = Instant::now();
    let (teacher, session) = train_teacher(&spec, data, &cfg.schedule, cfg.teacher_seed)?;
    let test_accuracy = evaluate_accuracy(&teacher, &data.test)?;
    let best_epoch = session
        .trajectory
        .records()
        .iter()
        .find(|r| r.acc_student == session.best_accuracy)
        .map(|r| r.epoch);
    let summary = TeacherSummary {
        hidden: hidden.to_vec(),
        teacher_seed: cfg.teacher_seed,
        test_accuracy,
        best_epoch,
        final_epoch_accuracy: session.final_accuracy,
        checksum: teacher.checksum(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((teacher, summary))
}

fn load_teacher(cfg: &ExperimentConfig) -> Result<Model> {
    let path = cfg.teacher_path();
    Model::load(&path).map_err(|e| match e {
        slkd_core::Error::Io(io) => CliError::io(&path, io),
        other => other.into(),
    })
}

/// Runs `mode` once per configured seed. Sessions are independent; with
/// `jobs > 1` they run concurrently and are then ordered by seed.
pub fn sweep(
    cfg: &ExperimentConfig,
    data: &TaskData,
    teacher: Option<&Model>,
    mode: Mode,
    jobs: usize,
) -> Result<Vec<SeedRun>> {
    let hidden = teacher.map(|t| t.spec().hidden.clone());
    let (_, student_spec) = cfg.specs_for_data(data, hidden.as_deref().unwrap_or(&[]))?;
    let distill = cfg.distill.clone().with_mode(mode);
    let one = |&seed: &u64| -> Result<SeedRun> {
        let start = Instant::now();
        let session = train(teacher, &student_spec, data, &cfg.schedule, &distill, seed)?;
        let summary = RunSummary {
            mode,
            seed,
            teacher_hidden: hidden.clone(),
            student_hidden: cfg.student.hidden.clone(),
            task: cfg.task.clone(),
            distill: distill.clone(),
            schedule: cfg.schedule.clone(),
            final_accuracy: session.final_accuracy,
            best_accuracy: session.best_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        Ok(SeedRun { summary, session })
    };
    let mut runs = if jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?
            .install(|| cfg.seeds.par_iter().map(one).collect::<Result<Vec<_>>>())?
    } else {
        cfg.seeds.iter().map(one).collect::<Result<Vec<_>>>()?
    };
    runs.sort_by_key(|r| r.summary.seed);
    Ok(runs)
}

pub fn aggregate(mode: Mode, teacher_hidden: Option<Vec<usize>>, runs: &[RunSummary]) -> Aggregate {
    let finals: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
    let bests: Vec<f64> = runs.iter().map(|r| r.best_accuracy).collect();
    Aggregate {
        mode,
        teacher_hidden,
        seeds: runs.iter().map(|r| r.seed).collect(),
        final_mean: mean(&finals),
        final_std: sample_std(&finals),
        best_mean: mean(&bests),
        best_std: sample_std(&bests),
    }
}

/// Distils one mode over all seeds and writes `<out>/<mode>/seed-<s>.csv`
/// trajectories plus `<out>/<mode>/summary.json`. Scratch mode never reads
/// the teacher file.
pub fn run_distill(cfg: &ExperimentConfig, mode: Mode, jobs: usize) -> Result<DistillOutcome> {
    let data = cfg.task.load()?;
    let teacher = if mode.needs_teacher() { Some(load_teacher(cfg)?) } else { None };
    let runs = sweep(cfg, &data, teacher.as_ref(), mode, jobs)?;

    let dir = cfg.out_dir.join(mode.name());
    create_dir(&dir)?;
    for run in &runs {
        write(
            &dir.join(format!("seed-{}.csv", run.summary.seed)),
            &run.session.trajectory.to_csv(),
        )?;
    }
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let report = DistillReport {
        aggregate: aggregate(mode, teacher.map(|t| t.spec().hidden.clone()), &summaries),
        runs: summaries,
    };
    write(&dir.join("summary.json"), &to_json(&report))?;
    Ok(DistillOutcome { report, runs, dir })
}

/// Pairwise difference of two cells under the same teacher:
/// `later − earlier` in the configured mode order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareDiff {
    pub teacher_hidden: Vec<usize>,
    pub minuend: Mode,
    pub subtrahend: Mode,
    pub final_diff: f64,
    pub best_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub cells: Vec<Aggregate>,
    pub diffs: Vec<CompareDiff>,
}

pub const COMPARE_HEADER: &str = "kind,teacher,mode,final_mean,final_std,best_mean,best_std,seeds";

impl CompareTable {
    /// Builds the difference rows from cells laid out teacher-major in the
    /// order of `teachers` and `modes`.
    pub fn new(cells: Vec<Aggregate>, teachers: &[Vec<usize>], modes: &[Mode]) -> Self {
        assert_eq!(cells.len(), teachers.len() * modes.len(), "one cell per teacher and mode");
        let mut diffs = Vec::new();
        for (t, hidden) in teachers.iter().enumerate() {
            let row = &cells[t * modes.len()..(t + 1) * modes.len()];
            for i in 0..row.len() {
                for b in &row[i + 1..] {
                    let a = &row[i];
                    diffs.push(CompareDiff {
                        teacher_hidden: hidden.clone(),
                        minuend: b.mode,
                        subtrahend: a.mode,
                        final_diff: b.final_mean - a.final_mean,
                        best_diff: b.best_mean - a.best_mean,
                    });
                }
            }
        }
        CompareTable { cells, diffs }
    }

    /// Cell rows then difference rows. Difference rows leave the std and
    /// seed columns empty.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{COMPARE_HEADER}\n");
        for c in &self.cells {
            writeln!(
                out,
                "cell,{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                c.teacher_hidden.as_deref().map_or("none".into(), hidden_label),
                c.mode,
                c.final_mean,
                c.final_std,
                c.best_mean,
                c.best_std,
                c.seeds.len()
            )
            .unwrap();
        }
        for d in &self.diffs {
            writeln!(
                out,
                "diff,{},{}-{},{:.16e},,{:.16e},,",
                hidden_label(&d.teacher_hidden),
                d.minuend,
                d.subtrahend,
                d.final_diff,
                d.best_diff
            )
            .unwrap();
        }
        out
    }

    /// Human-readable `mean ± std` table, accuracies in percent.
    pub fn render(&self) -> String {
        let mut out = format!("{:<14} {:<12} {:>18} {:>18}\n", "teacher", "mode", "final", "best");
        for c in &self.cells {
            writeln!(
                out,
                "{:<14} {:<12} {:>9.2} ± {:<6.2} {:>9.2} ± {:<6.2}",
                c.teacher_hidden.as_deref().map_or("none".into(), hidden_label),
                c.mode.name(),
                100.0 * c.final_mean,
                100.0 * c.final_std,
                100.0 * c.best_mean,
                100.0 * c.best_std
            )
            .unwrap();
        }
        for d in &self.diffs {
            writeln!(
                out,
                "{:<14} {:<12} {:>+9.2}          {:>+9.2}",
                hidden_label(&d.teacher_hidden),
                format!("{}-{}", d.minuend, d.subtrahend),
                100.0 * d.final_diff,
                100.0 * d.best_diff
            )
            .unwrap();
        }
        out
    }
}

/// Runs every mode against every teacher size. Teachers are trained here
/// with the configured teacher seed, exactly as `train-teacher` would.
/// Writes `<out>/compare/compare.csv`, `compare.json`, the teachers and
/// every per-seed trajectory.
pub fn run_compare(cfg: &ExperimentConfig, jobs: usize) -> Result<CompareTable> {
    let modes = &cfg.compare.modes;
    let teachers = cfg.compare_teachers();
    if modes.len() < 2 && teachers.len() < 2 {
        return Err(CliError::Usage("compare needs at least two modes or two teacher sizes".into()));
    }
    let data = cfg.task.load()?;
    let dir = cfg.out_dir.join("compare");
    create_dir(&dir)?;
    let mut cells = Vec::new();
    for hidden in &teachers {
        let label = hidden_label(hidden);
        let (teacher, summary) = fit_teacher(cfg, &data, hidden)?;
        teacher.save(dir.join(format!("teacher-{label}.json")))?;
        write(&dir.join(format!("teacher-{label}.summary.json")), &to_json(&summary))?;
        for &mode in modes {
            let runs = sweep(cfg, &data, Some(&teacher), mode, jobs)?;
            for run in &runs {
                write(
                    &dir.join(format!("{label}-{mode}-seed-{}.csv", run.summary.seed)),
                    &run.session.trajectory.to_csv(),
                )?;
            }
            let summaries: Vec<RunSummary> = runs.into_iter().map(|r| r.summary).collect();
            cells.push(aggregate(mode, Some(hidden.clone()), &summaries));
        }
    }
    let table = CompareTable::new(cells, &teachers, modes);
    write(&dir.join("compare.csv"), &table.to_csv())?;
    write(&dir.join("compare.json"), &to_json(&table))?;
    Ok(table)
}

pub fn run_gradcheck(trials: usize, fault: Option<OpKind>) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(CliError::Usage("gradcheck needs at least one trial".into()));
    }
    let report = run_suite(trials, fault)?;
    Ok(report)
}
