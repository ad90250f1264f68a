use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::types::RunRecord;

/// One row of an experiment index.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndexRow {
    pub cell: String,
    pub seed: u64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub config_hash: String,
    pub file: String,
}

/// Directory of per-run records: `<root>/<experiment>/<cell>-seed<k>.json`
/// plus `<root>/<experiment>/index.csv`.
#[derive(Clone, Debug)]
pub struct ResultsStore {
    root: PathBuf,
}

impl ResultsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn experiment_dir(&self, experiment: &str) -> PathBuf {
        self.root.join(experiment)
    }

    fn stem(cell: &str, seed: u64) -> String {
        format!("{cell}-seed{seed}")
    }

    pub fn record_path(&self, experiment: &str, cell: &str, seed: u64) -> PathBuf {
        self.experiment_dir(experiment).join(format!("{}.json", Self::stem(cell, seed)))
    }

    /// A stored record whose configuration hash equals `config_hash`.
    pub fn lookup(&self, experiment: &str, cell: &str, seed: u64, config_hash: &str) -> Result<Option<RunRecord>> {
        let path = self.record_path(experiment, cell, seed);
        if !path.exists() {
            return Ok(None);
        }
        let record = RunRecord::load(&path)?;
        Ok((record.config_hash == config_hash).then_some(record))
    }

    /// Writes the record (atomically) and refreshes the experiment index.
    pub fn save(&self, experiment: &str, cell: &str, seed: u64, record: &RunRecord) -> Result<()> {
        record.save(&self.experiment_dir(experiment), &Self::stem(cell, seed))?;
        self.write_index(experiment)
    }

    /// Every stored record of an experiment, sorted by file name.
    pub fn records(&self, experiment: &str) -> Result<Vec<(String, RunRecord)>> {
        let dir = self.experiment_dir(experiment);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".json"))
            .collect();
        names.sort();
        names
            .into_iter()
            .map(|n| Ok((n.clone(), RunRecord::load(&dir.join(&n))?)))
            .collect()
    }

    fn write_index(&self, experiment: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let records = self.records(experiment)?;
        if records.is_empty() {
            w.write_record(["cell", "seed", "final_accuracy", "best_accuracy", "config_hash", "file"])
                .map_err(|e| Error::Other(e.to_string()))?;
        }
        for (file, r) in records {
            let stem = file.trim_end_matches(".json");
            let (cell, seed) = stem.rsplit_once("-seed").unwrap_or((stem, "0"));
            w.serialize(IndexRow {
                cell: cell.to_string(),
                seed: seed.parse().unwrap_or(0),
                final_accuracy: r.final_accuracy,
                best_accuracy: r.best_accuracy,
                config_hash: r.config_hash.clone(),
                file,
            })
            .map_err(|e| Error::Other(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Other(e.to_string()))?;
        write_atomic(&self.experiment_dir(experiment).join("index.csv"), &bytes)
    }
}
