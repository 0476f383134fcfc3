//! Per-epoch divergence and accuracy tracking between the student, the
//! teacher and the (fused) self-learning teachers.
//!
//! Divergences use the same direction and temperature as the training
//! losses, `KL(softmax(target/τ) ‖ softmax(student/τ))`, but without the
//! `τ²` factor. They are measured on a held-out probe set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{fuse_logits, mean_kl, DistillConfig, Mode};
use crate::model::Model;
use crate::tensor::{kernels, Tensor};

pub const CSV_HEADER: &str = "epoch,kl_student_teacher,kl_student_slt,acc_student,acc_slt,acc_teacher";

/// Measurements at the end of one epoch. Teacher and SL-T columns are
/// `None` in modes that do not have those networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub epoch: usize,
    pub kl_student_teacher: Option<f64>,
    pub kl_student_slt: Option<f64>,
    pub acc_student: f64,
    pub acc_slt: Option<f64>,
    pub acc_teacher: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub mode: Mode,
    pub config: DistillConfig,
    records: Vec<TrajectoryRecord>,
}

/// Fraction of rows whose arg-max (lowest index on ties) equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty set"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let hits = kernels::argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Measures the student against the teacher and against the weighted fusion
/// of `slts` on `probe`. Models are only read.
pub fn epoch_divergences(
    epoch: usize,
    student: &Model,
    teacher: Option<&Model>,
    slts: &[&Model],
    fusion_weights: &[f64],
    probe: &Dataset,
    tau: f64,
) -> Result<TrajectoryRecord> {
    if probe.is_empty() {
        return Err(Error::contract("probe set is empty"));
    }
    let x = probe.features();
    let labels = probe.labels();
    let student_logits = student.forward(x)?;

    let (kl_student_teacher, acc_teacher) = match teacher {
        Some(t) => {
            let logits = t.forward(x)?;
            (
                Some(mean_kl(&logits, &student_logits, tau)?),
                Some(top1_accuracy(&logits, labels)?),
            )
        }
        None => (None, None),
    };

    let (kl_student_slt, acc_slt) = if slts.is_empty() {
        (None, None)
    } else {
        let outputs = slts.iter().map(|m| m.forward(x)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = outputs.iter().collect();
        let fused = fuse_logits(fusion_weights, &refs)?;
        (
            Some(mean_kl(&fused, &student_logits, tau)?),
            Some(top1_accuracy(&fused, labels)?),
        )
    };

    Ok(TrajectoryRecord {
        epoch,
        kl_student_teacher,
        kl_student_slt,
        acc_student: top1_accuracy(&student_logits, labels)?,
        acc_slt,
        acc_teacher,
    })
}

fn fmt_opt(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        write!(out, "{v:.16e}").unwrap();
    }
}

fn parse_opt(field: &str, line: usize, name: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("{name}: `{field}` is not a number"),
    })
}

impl TrajectoryLog {
    pub fn new(mode: Mode, config: DistillConfig) -> Self {
        TrajectoryLog {
            mode,
            config,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TrajectoryRecord> {
        self.records.last()
    }

    /// Appends a record whose epoch is strictly after the last one.
    pub fn append(&mut self, record: TrajectoryRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::contract(format!(
                    "epoch {} does not follow logged epoch {}",
                    record.epoch, last.epoch
                )));
            }
        }
        let divergences = [record.kl_student_teacher, record.kl_student_slt];
        if divergences.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::numeric(format!(
                "epoch {}: divergences must be finite and nonnegative",
                record.epoch
            )));
        }
        self.records.push(record);
        Ok(())
    }

    /// Header plus one newline-terminated row per epoch; absent values are
    /// empty fields, present ones carry 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            write!(out, "{},", r.epoch).unwrap();
            fmt_opt(&mut out, r.kl_student_teacher);
            out.push(',');
            fmt_opt(&mut out, r.kl_student_slt);
            out.push(',');
            fmt_opt(&mut out, Some(r.acc_student));
            out.push(',');
            fmt_opt(&mut out, r.acc_slt);
            out.push(',');
            fmt_opt(&mut out, r.acc_teacher);
            out.push('\n');
        }
        out
    }

    /// Parses rows written by [`TrajectoryLog::to_csv`].
    pub fn parse_csv(text: &str) -> Result<Vec<TrajectoryRecord>> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{CSV_HEADER}`"),
                })
            }
        }
        let mut out = Vec::new();
        for (idx, raw) in lines {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = raw.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 6 fields, found {}", f.len()),
                });
            }
            let epoch = f[0].parse().map_err(|_| Error::Parse {
                line,
                message: format!("epoch `{}` is not an integer", f[0]),
            })?;
            let acc_student = parse_opt(f[3], line, "acc_student")?.ok_or(Error::Parse {
                line,
                message: "acc_student is required".into(),
            })?;
            out.push(TrajectoryRecord {
                epoch,
                kl_student_teacher: parse_opt(f[1], line, "kl_student_teacher")?,
                kl_student_slt: parse_opt(f[2], line, "kl_student_slt")?,
                acc_student,
                acc_slt: parse_opt(f[4], line, "acc_slt")?,
                acc_teacher: parse_opt(f[5], line, "acc_teacher")?,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::ModelSpec;

    fn record(epoch: usize) -> TrajectoryRecord {
        TrajectoryRecord {
            epoch,
            kl_student_teacher: Some(0.123456789012345),
            kl_student_slt: Some(1.0 / 3.0),
            acc_student: 0.25,
            acc_slt: Some(0.5),
            acc_teacher: None,
        }
    }

    #[test]
    fn append_enforces_increasing_epochs() {
        let mut log = TrajectoryLog::new(Mode::Slkd, DistillConfig::default());
        log.append(record(0)).unwrap();
        assert_eq!(log.len(), 1);
        log.append(record(5)).unwrap();
        assert!(matches!(log.append(record(3)), Err(Error::Contract(_))));
        assert!(log.append(record(5)).is_err());
        let mut bad = record(6);
        bad.kl_student_slt = Some(-1.0);
        assert!(log.append(bad).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut log = TrajectoryLog::new(Mode::Kd, DistillConfig::default());
        for e in 0..3 {
            log.append(record(e)).unwrap();
        }
        let csv = log.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.ends_with('\n'));
        let parsed = TrajectoryLog::parse_csv(&csv).unwrap();
        assert_eq!(parsed, log.records());
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(TrajectoryLog::parse_csv("a,b\n").is_err());
        let text = format!("{CSV_HEADER}\n0,1,2,3\n");
        assert!(matches!(TrajectoryLog::parse_csv(&text), Err(Error::Parse { line: 2, .. })));
    }

    fn probe() -> Dataset {
        let x = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]]).unwrap();
        Dataset::new(x, vec![0, 1, 0], 2, Split::Test).unwrap()
    }

    #[test]
    fn copied_networks_have_zero_divergence() {
        let spec = ModelSpec::new(2, vec![4], 2).unwrap();
        let teacher = Model::init(spec.clone(), 1).unwrap();
        let student = teacher.clone();
        let rec = epoch_divergences(0, &student, Some(&teacher), &[&student], &[1.0], &probe(), 4.0)
            .unwrap();
        assert!(rec.kl_student_teacher.unwrap() < 1e-9);
        assert!(rec.kl_student_slt.unwrap() < 1e-9);
        assert_eq!(rec.acc_teacher, Some(rec.acc_student));
    }

    #[test]
    fn evaluation_leaves_models_untouched() {
        let spec = ModelSpec::new(2, vec![3], 2).unwrap();
        let models: Vec<Model> = (0..4).map(|s| Model::init(spec.clone(), s).unwrap()).collect();
        let before: Vec<u64> = models.iter().map(Model::checksum).collect();
        epoch_divergences(
            1,
            &models[0],
            Some(&models[1]),
            &[&models[2], &models[3]],
            &[0.5, 0.5],
            &probe(),
            2.0,
        )
        .unwrap();
        let after: Vec<u64> = models.iter().map(Model::checksum).collect();
        assert_eq!(before, after);
    }
}
