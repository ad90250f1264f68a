//! Shared data model: stage-indexed features, configurations and run records.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use reviewkd_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which network a feature came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Student,
    Teacher,
}

/// A 4-D activation `(N, C, H, W)` tagged with its 1-based stage index.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    stage: usize,
    source: Source,
}

impl FeatureMap {
    pub fn new(data: Tensor, stage: usize, source: Source) -> Result<Self> {
        let (n, c, h, w) = data.dims4()?;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "feature dimensions must be >= 1, got {:?}",
                data.shape()
            )));
        }
        if stage == 0 {
            return Err(Error::StageOutOfRange { stage, stages: 0 });
        }
        if !data.all_finite() {
            return Err(Error::Shape(format!(
                "stage {stage} {source:?} feature has non-finite entries"
            )));
        }
        Ok(Self {
            data,
            stage,
            source,
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn source(&self) -> Source {
        self.source
    }

    /// `(N, C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims4().expect("validated at construction")
    }
}

/// Per-stage features plus logits of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs {
    features: Vec<FeatureMap>,
    logits: Tensor,
}

impl StageOutputs {
    /// Validates stage ordering, spatial monotonicity and batch agreement.
    pub fn new(features: Vec<FeatureMap>, logits: Tensor) -> Result<Self> {
        let (rows, _) = logits.dims2()?;
        let stages = features.len();
        for (k, f) in features.iter().enumerate() {
            if f.stage() != k + 1 {
                return Err(Error::Shape(format!(
                    "feature at position {k} carries stage {}",
                    f.stage()
                )));
            }
            let (n, _, h, w) = f.dims();
            if n != rows {
                return Err(Error::Shape(format!(
                    "stage {} batch {n} but logits have {rows} rows",
                    k + 1
                )));
            }
            if k > 0 {
                let (_, _, ph, pw) = features[k - 1].dims();
                if h > ph || w > pw {
                    return Err(Error::Shape(format!(
                        "stage {} spatial {h}x{w} larger than stage {} ({ph}x{pw})",
                        k + 1,
                        k
                    )));
                }
            }
            if f.stage() > stages {
                return Err(Error::StageOutOfRange {
                    stage: f.stage(),
                    stages,
                });
            }
        }
        if !logits.all_finite() {
            return Err(Error::Shape("logits have non-finite entries".into()));
        }
        Ok(Self { features, logits })
    }

    pub fn stages(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[FeatureMap] {
        &self.features
    }

    /// Feature of 1-based stage `k`.
    pub fn feature(&self, k: usize) -> Result<&FeatureMap> {
        if k == 0 || k > self.features.len() {
            return Err(Error::StageOutOfRange {
                stage: k,
                stages: self.features.len(),
            });
        }
        Ok(&self.features[k - 1])
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

/// Distillation objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Plain cross-entropy training.
    None,
    /// One student stage against one teacher stage.
    Skd,
    /// Same-stage pairs at every stage.
    Mkd,
    /// One student stage against every shallower-or-equal teacher stage.
    SkdReview,
    /// All pairs `j <= i`, each with its own transform.
    MkdReviewNaive,
    /// Residual recursion with top-down fusion.
    MkdReviewResidual,
    /// Temperature-softened logit matching.
    LogitKd,
}

impl Mechanism {
    pub const ALL: [Mechanism; 7] = [
        Mechanism::None,
        Mechanism::Skd,
        Mechanism::Mkd,
        Mechanism::SkdReview,
        Mechanism::MkdReviewNaive,
        Mechanism::MkdReviewResidual,
        Mechanism::LogitKd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Skd => "skd",
            Mechanism::Mkd => "mkd",
            Mechanism::SkdReview => "skd_review",
            Mechanism::MkdReviewNaive => "mkd_review_naive",
            Mechanism::MkdReviewResidual => "mkd_review_residual",
            Mechanism::LogitKd => "logit_kd",
        }
    }

    pub fn needs_stage_pair(self) -> bool {
        matches!(self, Mechanism::Skd | Mechanism::SkdReview)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mechanism {s:?}")))
    }
}

fn default_kd_temperature() -> f64 {
    4.0
}

fn default_kd_weight() -> f64 {
    0.9
}

/// Mechanism toggles and weights for one distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda_weight: f64,
    pub mechanism: Mechanism,
    /// Attention gates in the residual fusion; plain summation otherwise.
    pub use_abf: bool,
    /// Pyramid-pooled distance instead of plain mean squared error.
    pub use_hcl: bool,
    /// Pooled sizes used by the pyramid distance, besides the full resolution.
    pub pyramid_levels: Vec<usize>,
    /// `(student_stage, teacher_stage)` for single-pair mechanisms.
    pub stage_pair: Option<(usize, usize)>,
    pub seed: u64,
    #[serde(default = "default_kd_temperature")]
    pub kd_temperature: f64,
    /// Weight of the soft-target term; cross-entropy gets `1 - kd_weight`.
    #[serde(default = "default_kd_weight")]
    pub kd_weight: f64,
    /// Channel width shared by the fusion chain; defaults to the narrowest
    /// teacher stage.
    #[serde(default)]
    pub fusion_channels: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_weight: 1.0,
            mechanism: Mechanism::MkdReviewResidual,
            use_abf: true,
            use_hcl: true,
            pyramid_levels: vec![4, 2, 1],
            stage_pair: None,
            seed: 0,
            kd_temperature: default_kd_temperature(),
            kd_weight: default_kd_weight(),
            fusion_channels: None,
        }
    }
}

impl DistillConfig {
    pub fn plain(seed: u64) -> Self {
        Self {
            mechanism: Mechanism::None,
            lambda_weight: 0.0,
            use_abf: false,
            use_hcl: false,
            seed,
            ..Self::default()
        }
    }
}

/// Checks every [`DistillConfig`] invariant, reporting the first violation.
pub fn validate_config(config: DistillConfig) -> Result<DistillConfig> {
    if !(config.lambda_weight >= 0.0) || !config.lambda_weight.is_finite() {
        return Err(Error::Config(format!(
            "lambda_weight must be finite and >= 0, got {}",
            config.lambda_weight
        )));
    }
    if config.pyramid_levels.contains(&0) {
        return Err(Error::Config("pyramid_levels must all be >= 1".into()));
    }
    if config.pyramid_levels.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config(format!(
            "pyramid_levels not descending: {:?}",
            config.pyramid_levels
        )));
    }
    match (config.mechanism.needs_stage_pair(), config.stage_pair) {
        (true, None) => {
            return Err(Error::Config(format!(
                "stage_pair required for mechanism {}",
                config.mechanism
            )))
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!(
                "stage_pair only applies to skd and skd_review, not {}",
                config.mechanism
            )))
        }
        (true, Some((i, j))) if i == 0 || j == 0 => {
            return Err(Error::Config("stage_pair stages are 1-based".into()))
        }
        _ => {}
    }
    if !(config.kd_temperature > 0.0) {
        return Err(Error::Config("kd_temperature must be > 0".into()));
    }
    if !(0.0..=1.0).contains(&config.kd_weight) {
        return Err(Error::Config("kd_weight must lie in [0, 1]".into()));
    }
    if config.fusion_channels == Some(0) {
        return Err(Error::Config("fusion_channels must be >= 1".into()));
    }
    Ok(config)
}

/// Epoch count, learning-rate policy and optimizer constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// First epoch at which the decay applies.
    pub decay_start_epoch: usize,
    pub decay_every: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl TrainSchedule {
    /// 240 epochs, lr 0.1 decayed by 0.1 every 30 epochs after epoch 150.
    pub fn full() -> Self {
        Self {
            epochs: 240,
            base_lr: 0.1,
            lr_decay_factor: 0.1,
            decay_start_epoch: 150,
            decay_every: 30,
            batch_size: 128,
            weight_decay: 5e-4,
            momentum: 0.9,
        }
    }

    /// 20 epochs with decays at epochs 10 and 15.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            base_lr: 0.1,
            lr_decay_factor: 0.1,
            decay_start_epoch: 10,
            decay_every: 5,
            batch_size: 128,
            weight_decay: 5e-4,
            momentum: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0) {
            return fail(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return fail(format!(
                "lr_decay_factor must lie in (0, 1), got {}",
                self.lr_decay_factor
            ));
        }
        if self.decay_start_epoch > self.epochs {
            return fail(format!(
                "decay_start_epoch {} exceeds epochs {}",
                self.decay_start_epoch, self.epochs
            ));
        }
        if self.decay_every == 0 {
            return fail("decay_every must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

/// A config file: distillation and schedule fields side by side.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub distill: DistillConfig,
    #[serde(flatten)]
    pub schedule: TrainSchedule,
}

impl ExperimentConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        let parsed: ExperimentConfig =
            serde_yaml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        parsed.schedule.validate()?;
        let distill = validate_config(parsed.distill)?;
        Ok(Self {
            distill,
            schedule: parsed.schedule,
        })
    }

    pub fn to_yaml(&self) -> Result<String> {
        serde_yaml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml(&text).map_err(|e| Error::format(path, e))
    }
}

/// SHA-256 over the canonical JSON encoding of config and schedule
/// (the seed is part of the config).
pub fn config_hash(config: &DistillConfig, schedule: &TrainSchedule) -> String {
    let bytes = serde_json::to_vec(&(config, schedule)).expect("plain data serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Metrics of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ce_loss: f64,
    pub distill_loss: f64,
    pub eval_accuracy: f64,
}

/// Everything persisted about one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: DistillConfig,
    pub schedule: TrainSchedule,
    pub student_arch: String,
    pub teacher_arch: Option<String>,
    /// Checksum of the teacher weights, when a teacher was used.
    #[serde(default)]
    pub teacher_fingerprint: Option<String>,
    pub per_epoch: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub wall_time_s: f64,
    pub config_hash: String,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Other(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Other(e.to_string()))
    }

    /// Flat CSV of the `per_epoch` rows.
    pub fn epochs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.per_epoch {
            w.serialize(row).map_err(|e| Error::Other(e.to_string()))?;
        }
        if self.per_epoch.is_empty() {
            w.write_record(["epoch", "train_ce_loss", "distill_loss", "eval_accuracy"])
                .map_err(|e| Error::Other(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to each other.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::io::write_atomic(&dir.join(format!("{stem}.json")), self.to_json()?.as_bytes())?;
        crate::io::write_atomic(&dir.join(format!("{stem}.csv")), self.epochs_csv()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e))
    }
}
