//! Experiment configuration. Every field has a default, so a config file
//! only needs the values it changes; `slkd print-config` shows the rest.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slkd_core::data::{gaussian_mixture, load_tabular, spirals};
use slkd_core::{DistillConfig, Mode, ModelSpec, Schedule, TaskData};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussianMixture,
    Spirals,
    Tabular,
}

/// Which data to train on. Generator-specific fields are ignored by the
/// other generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub generator: Generator,
    pub classes: usize,
    /// Feature count for `gaussian_mixture`.
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    /// Angular noise for `spirals`.
    pub noise: f64,
    pub seed: u64,
    /// Train and test files for `tabular`, each standardized on its own.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            generator: Generator::GaussianMixture,
            classes: 10,
            dim: 16,
            n_per_class: 500,
            spread: 0.9,
            noise: 0.2,
            seed: 0,
            train_path: None,
            test_path: None,
        }
    }
}

impl TaskSpec {
    pub fn load(&self) -> Result<TaskData> {
        Ok(match self.generator {
            Generator::GaussianMixture => gaussian_mixture(self.classes, self.dim, self.n_per_class, self.spread, self.seed)?,
            Generator::Spirals => spirals(self.classes, self.n_per_class, self.noise, self.seed)?,
            Generator::Tabular => {
                let path = |p: &Option<PathBuf>, which: &str| {
                    p.clone()
                        .ok_or_else(|| CliError::Usage(format!("tabular task needs task.{which}_path")))
                };
                let train = load_tabular(path(&self.train_path, "train")?, self.classes)?;
                let test = load_tabular(path(&self.test_path, "test")?, self.classes)?;
                TaskData { train, test }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    pub modes: Vec<Mode>,
    /// Teacher hidden layers per sweep point; empty means `teacher.hidden`.
    pub teacher_hidden: Vec<Vec<usize>>,
}

impl Default for CompareSpec {
    fn default() -> Self {
        CompareSpec {
            modes: vec![Mode::Kd, Mode::Slkd],
            teacher_hidden: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub teacher_seed: u64,
    /// Defaults to `<out_dir>/teacher.json`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_file: Option<PathBuf>,
    pub task: TaskSpec,
    pub teacher: NetworkSpec,
    pub student: NetworkSpec,
    pub distill: DistillConfig,
    pub schedule: Schedule,
    pub compare: CompareSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            teacher_seed: 1000,
            teacher_file: None,
            task: TaskSpec::default(),
            teacher: NetworkSpec { hidden: vec![64, 64, 64] },
            student: NetworkSpec { hidden: vec![8] },
            distill: DistillConfig::default(),
            schedule: Schedule::default(),
            compare: CompareSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seeds must not be empty".into()));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(CliError::Usage(format!("seeds must be distinct: {:?}", self.seeds)));
        }
        self.distill.validate()?;
        self.schedule.validate()?;
        self.teacher_spec()?;
        self.student_spec()?;
        for hidden in &self.compare.teacher_hidden {
            self.spec_for(hidden)?;
        }
        Ok(())
    }

    /// Input width of the configured task.
    pub fn input_dim(&self) -> Option<usize> {
        match self.task.generator {
            Generator::GaussianMixture => Some(self.task.dim),
            Generator::Spirals => Some(2),
            Generator::Tabular => None,
        }
    }

    fn spec_for(&self, hidden: &[usize]) -> Result<ModelSpec> {
        // Tabular widths are only known once the file is read; 1 is a
        // placeholder that still lets the rest of the spec be checked.
        let dim = self.input_dim().unwrap_or(1);
        Ok(ModelSpec::new(dim, hidden.to_vec(), self.task.classes)?)
    }

    pub fn teacher_spec(&self) -> Result<ModelSpec> {
        self.spec_for(&self.teacher.hidden)
    }

    pub fn student_spec(&self) -> Result<ModelSpec> {
        self.spec_for(&self.student.hidden)
    }

    /// Specs with the input width taken from loaded data.
    pub fn specs_for_data(&self, data: &TaskData, teacher_hidden: &[usize]) -> Result<(ModelSpec, ModelSpec)> {
        let dim = data.train.dim();
        Ok((
            ModelSpec::new(dim, teacher_hidden.to_vec(), self.task.classes)?,
            ModelSpec::new(dim, self.student.hidden.clone(), self.task.classes)?,
        ))
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.teacher_file
            .clone()
            .unwrap_or_else(|| self.out_dir.join("teacher.json"))
    }

    pub fn compare_teachers(&self) -> Vec<Vec<usize>> {
        if self.compare.teacher_hidden.is_empty() {
            vec![self.teacher.hidden.clone()]
        } else {
            self.compare.teacher_hidden.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = ExperimentConfig::from_toml("seeds = [7]\n[distill]\nmode = \"kd\"\n").unwrap();
        assert_eq!(cfg.seeds, [7]);
        assert_eq!(cfg.distill.mode, Mode::Kd);
        assert_eq!(cfg.schedule, Schedule::default());
        assert_eq!(cfg.teacher.hidden, [64, 64, 64]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml("seeds = [1, 1]").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 3").is_err());
        assert!(ExperimentConfig::from_toml("[distill]\nmode = \"nope\"").is_err());
        assert!(ExperimentConfig::from_toml("[task]\nclasses = 1").is_err());
    }
}
