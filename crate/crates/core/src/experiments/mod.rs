//! Multi-seed experiment runners: the cross-stage supervision grid and the
//! component ablation ladder.

mod report;
mod store;

pub use report::{emit_report, render, Report, ReportFormat, ABLATION_REFERENCE, GRID_REFERENCE};
pub use store::{IndexRow, ResultsStore};

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::ArchSpec;
use crate::train::{train_distill, Teacher, TrainOptions};
use crate::types::{config_hash, DistillConfig, Mechanism, RunRecord, TrainSchedule};

/// Accuracies of one cell over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    /// Final accuracy of every completed run, in seed order.
    pub runs: Vec<f64>,
    pub mean: Option<f64>,
    /// Sample variance (zero for a single run).
    pub variance: Option<f64>,
    /// First training error, if any run failed.
    pub error: Option<String>,
}

impl CellSummary {
    pub fn from_runs(runs: Vec<f64>, error: Option<String>) -> Self {
        let (mean, variance) = if error.is_some() || runs.is_empty() {
            (None, None)
        } else {
            let (m, v) = mean_variance(&runs);
            (Some(m), Some(v))
        };
        Self {
            runs,
            mean,
            variance,
            error,
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Mean and sample variance.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub student_stage: usize,
    pub teacher_stage: usize,
    pub summary: CellSummary,
}

/// Single-pair distillation accuracy for every (student stage, teacher
/// stage) combination, plus the plain-student baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageGridResult {
    pub stages: usize,
    pub repeats: usize,
    pub baseline: Option<CellSummary>,
    /// Student-stage major.
    pub cells: Vec<GridCell>,
}

impl StageGridResult {
    pub fn cell(&self, student: usize, teacher: usize) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.student_stage == student && c.teacher_stage == teacher)
            .map(|c| &c.summary)
    }

    /// Mean over the diagonal cells that completed.
    pub fn diagonal_mean(&self) -> Option<f64> {
        let diag: Vec<f64> = (1..=self.stages)
            .filter_map(|i| self.cell(i, i).and_then(|c| c.mean))
            .collect();
        (!diag.is_empty()).then(|| diag.iter().sum::<f64>() / diag.len() as f64)
    }

    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.summary.failed()) || self.baseline.as_ref().is_some_and(CellSummary::failed)
    }
}

/// Components enabled in one ablation row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Review mechanism: shallower teacher stages supervise deeper student stages.
    pub rm: bool,
    /// Residual fusion recursion.
    pub rlf: bool,
    pub abf: bool,
    pub hcl: bool,
}

impl AblationFlags {
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for (on, name) in [(self.rm, "RM"), (self.rlf, "RLF"), (self.abf, "ABF"), (self.hcl, "HCL")] {
            if on {
                v.push(name);
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub flags: AblationFlags,
    pub config: DistillConfig,
    pub summary: CellSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub repeats: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.summary.failed())
    }
}

/// The six ladder rows, components added one at a time: same-stage L2,
/// naive review, residual fusion, then attention fusion and the pyramid
/// distance separately and together.
pub fn ablation_ladder(base: &DistillConfig) -> Vec<(String, AblationFlags, DistillConfig)> {
    let row = |mechanism, abf, hcl| DistillConfig {
        mechanism,
        use_abf: abf,
        use_hcl: hcl,
        stage_pair: None,
        ..base.clone()
    };
    let f = |rm, rlf, abf, hcl| AblationFlags { rm, rlf, abf, hcl };
    vec![
        ("baseline".into(), f(false, false, false, false), row(Mechanism::Mkd, false, false)),
        ("rm".into(), f(true, false, false, false), row(Mechanism::MkdReviewNaive, false, false)),
        ("rm-rlf".into(), f(true, true, false, false), row(Mechanism::MkdReviewResidual, false, false)),
        ("rm-rlf-abf".into(), f(true, true, true, false), row(Mechanism::MkdReviewResidual, true, false)),
        ("rm-rlf-hcl".into(), f(true, true, false, true), row(Mechanism::MkdReviewResidual, false, true)),
        ("rm-rlf-abf-hcl".into(), f(true, true, true, true), row(Mechanism::MkdReviewResidual, true, true)),
    ]
}

/// Shared inputs of every run of an experiment.
pub struct Experiment<'a> {
    pub student: ArchSpec,
    pub teacher: Teacher<'a>,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub schedule: TrainSchedule,
    /// λ, pyramid levels and other settings shared by all rows.
    pub base: DistillConfig,
    pub seeds: Vec<u64>,
    /// Persist and reuse per-run records here.
    pub store: Option<ResultsStore>,
    pub options: TrainOptions,
    executed: Cell<usize>,
}

impl<'a> Experiment<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        student: ArchSpec,
        teacher: Teacher<'a>,
        train: &'a Dataset,
        test: &'a Dataset,
        schedule: TrainSchedule,
        base: DistillConfig,
        seeds: Vec<u64>,
        store: Option<ResultsStore>,
    ) -> Self {
        Self {
            student,
            teacher,
            train,
            test,
            schedule,
            base,
            seeds,
            store,
            options: TrainOptions::default(),
            executed: Cell::new(0),
        }
    }

    /// Training runs actually executed (not reloaded from the store).
    pub fn runs_executed(&self) -> usize {
        self.executed.get()
    }

    fn check_stages(&self) -> Result<usize> {
        let (s, t) = (self.student.stages(), self.teacher.net.stages());
        if s != t {
            return Err(Error::StageCount { student: s, teacher: t });
        }
        Ok(s)
    }

    /// One run, reloaded from the store when a record with the same config,
    /// student and teacher weights exists.
    pub fn run_one(&self, experiment: &str, cell: &str, config: &DistillConfig) -> Result<RunRecord> {
        let hash = config_hash(config, &self.schedule);
        if let Some(store) = &self.store {
            if let Some(r) = store.lookup(experiment, cell, config.seed, &hash)? {
                let teacher = (config.mechanism != Mechanism::None).then(|| self.teacher.store.fingerprint());
                if r.student_arch == self.student.name && r.teacher_fingerprint == teacher {
                    return Ok(r);
                }
            }
        }
        self.executed.set(self.executed.get() + 1);
        let outcome = train_distill(
            &self.student,
            Some(self.teacher),
            config,
            &self.schedule,
            self.train,
            self.test,
            &self.options,
        )?;
        if let Some(store) = &self.store {
            store.save(experiment, cell, config.seed, &outcome.record)?;
        }
        Ok(outcome.record)
    }

    /// Runs `config` once per seed; a failure marks the cell failed but
    /// does not abort the experiment.
    pub fn run_cell(&self, experiment: &str, cell: &str, config: &DistillConfig) -> CellSummary {
        let mut runs = Vec::with_capacity(self.seeds.len());
        for &seed in &self.seeds {
            let c = DistillConfig { seed, ..config.clone() };
            match self.run_one(experiment, cell, &c) {
                Ok(r) => runs.push(r.final_accuracy),
                Err(e) => return CellSummary::from_runs(runs, Some(e.to_string())),
            }
        }
        CellSummary::from_runs(runs, None)
    }

    /// Plain cross-entropy training of the student, shared by all
    /// experiments.
    pub fn run_baseline(&self) -> CellSummary {
        self.run_cell("plain", "plain", &DistillConfig::plain(0))
    }

    pub fn run_stage_grid(&self) -> Result<StageGridResult> {
        let n = self.check_stages()?;
        let baseline = Some(self.run_baseline());
        let mut cells = Vec::with_capacity(n * n);
        for i in 1..=n {
            for j in 1..=n {
                let config = DistillConfig {
                    mechanism: Mechanism::Skd,
                    stage_pair: Some((i, j)),
                    ..self.base.clone()
                };
                cells.push(GridCell {
                    student_stage: i,
                    teacher_stage: j,
                    summary: self.run_cell("stage-grid", &format!("s{i}-t{j}"), &config),
                });
            }
        }
        Ok(StageGridResult {
            stages: n,
            repeats: self.seeds.len(),
            baseline,
            cells,
        })
    }

    pub fn run_ablation(&self) -> Result<AblationResult> {
        self.check_stages()?;
        let rows = ablation_ladder(&self.base)
            .into_iter()
            .map(|(label, flags, config)| {
                let summary = self.run_cell("ablation", &label, &config);
                AblationRow {
                    label,
                    flags,
                    config,
                    summary,
                }
            })
            .collect();
        Ok(AblationResult {
            repeats: self.seeds.len(),
            rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_variance() {
        let (m, v) = mean_variance(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((v - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(mean_variance(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn ladder_rows() {
        let rows = ablation_ladder(&DistillConfig::default());
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].1.names(), Vec::<&str>::new());
        assert_eq!(rows[1].1.names(), vec!["RM"]);
        assert_eq!(rows[5].1.names(), vec!["RM", "RLF", "ABF", "HCL"]);
        assert_eq!(rows[0].2.mechanism, Mechanism::Mkd);
        assert!(!rows[0].2.use_hcl);
        assert_eq!(rows[1].2.mechanism, Mechanism::MkdReviewNaive);
        assert!(rows[2..].iter().all(|r| r.2.mechanism == Mechanism::MkdReviewResidual));
        assert!(rows[5].2.use_abf && rows[5].2.use_hcl);
    }

    #[test]
    fn failed_cell_has_no_mean() {
        let c = CellSummary::from_runs(vec![50.0], Some("diverged".into()));
        assert!(c.failed() && c.mean.is_none());
    }
}
