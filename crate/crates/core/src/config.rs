//! Experiment configuration (TOML). Unknown keys are rejected; the schema is
//! published in `schema/config.schema.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alliance::{AcorlConfig, ProjectionSpec, TrainOptions};
use crate::data::{ComplementaryCueSpec, CueGroup};
use crate::error::{Error, Result};
use crate::fusion::LateFusionOptions;
use crate::nn::ModelSpec;
use crate::rng::subseed;

/// The canonical experiment shipped with the repository.
pub const CANONICAL_CONFIG: &str = include_str!("../configs/canonical.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Run every subcommand once per seed, into `<out>/seed-<s>`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Artifact name of the model trained by `train` / `train-acorl`.
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default = "default_snapshots")]
    pub snapshot_epochs: Vec<usize>,
    #[serde(default)]
    pub acorl: AcorlSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub trials: TrialConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub attribute: AttributeSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_name() -> String {
    "model".into()
}

fn default_snapshots() -> Vec<usize> {
    vec![1, 5]
}

/// Either a generated complementary-cue dataset or a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub generate: Option<GenerateConfig>,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

/// Dataset generation settings; the generator seed is derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub groups: Vec<CueGroup>,
    pub noise_dims: usize,
    #[serde(default = "one")]
    pub noise_sigma: f64,
}

fn one() -> f64 {
    1.0
}

impl GenerateConfig {
    pub fn to_spec(&self, seed: u64) -> ComplementaryCueSpec {
        ComplementaryCueSpec {
            num_classes: self.num_classes,
            samples_per_class: self.samples_per_class,
            groups: self.groups.clone(),
            noise_dims: self.noise_dims,
            noise_sigma: self.noise_sigma,
            seed: subseed(seed, "data"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Classifier,
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub head: HeadKind,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 8]
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: default_hidden(),
            head: HeadKind::Classifier,
        }
    }
}

impl ModelConfig {
    pub fn to_spec(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec> {
        let spec = match self.head {
            HeadKind::Classifier => ModelSpec::classifier(input_dim, self.hidden_dims.clone(), num_classes),
            HeadKind::Embedding => ModelSpec::embedding(input_dim, self.hidden_dims.clone(), num_classes),
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcorlSection {
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub projection: ProjectionSpec,
    /// Checkpoints of the frozen models to avoid.
    #[serde(default)]
    pub avoid: Vec<PathBuf>,
}

impl Default for AcorlSection {
    fn default() -> Self {
        AcorlSection {
            lambda: 1.0,
            temperature: 1.0,
            projection: ProjectionSpec::default(),
            avoid: Vec::new(),
        }
    }
}

impl AcorlSection {
    pub fn to_config(&self) -> AcorlConfig {
        AcorlConfig {
            lambda: self.lambda,
            temperature: self.temperature,
            projection: self.projection,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    OutputWeighted,
    OutputLogreg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    #[serde(default = "default_fusion_name")]
    pub name: String,
    #[serde(default)]
    pub members: Vec<PathBuf>,
    /// Output-fusion flavour; inferred from the member heads when absent.
    #[serde(default)]
    pub output_mode: Option<OutputMode>,
    #[serde(default)]
    pub late: LateFusionOptions,
}

fn default_fusion_name() -> String {
    "fusion".into()
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            name: default_fusion_name(),
            members: Vec::new(),
            output_mode: None,
            late: LateFusionOptions::default(),
        }
    }
}

/// Verification trial counts for the evaluation and calibration splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    #[serde(default = "default_eval_genuine")]
    pub eval_genuine_per_class: usize,
    #[serde(default = "default_eval_impostor")]
    pub eval_impostor_total: usize,
    #[serde(default = "default_calib_genuine")]
    pub calibration_genuine_per_class: usize,
    #[serde(default = "default_calib_impostor")]
    pub calibration_impostor_total: usize,
}

fn default_eval_genuine() -> usize {
    200
}
fn default_eval_impostor() -> usize {
    3000
}
fn default_calib_genuine() -> usize {
    100
}
fn default_calib_impostor() -> usize {
    1500
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            eval_genuine_per_class: default_eval_genuine(),
            eval_impostor_total: default_eval_impostor(),
            calibration_genuine_per_class: default_calib_genuine(),
            calibration_impostor_total: default_calib_impostor(),
        }
    }
}

/// One checkpoint to evaluate and the report cell it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalEntry {
    pub checkpoint: PathBuf,
    #[serde(default = "default_regime")]
    pub regime: String,
    #[serde(default = "default_fusion_label")]
    pub fusion: String,
    #[serde(default)]
    pub members: Option<String>,
}

fn default_regime() -> String {
    "plain".into()
}
fn default_fusion_label() -> String {
    "single".into()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub entries: Vec<EvalEntry>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Feature-wise mean of the training split.
    #[default]
    Mean,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSection {
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub baseline: BaselineKind,
}

fn default_samples() -> usize {
    60
}
fn default_steps() -> usize {
    64
}

impl Default for AttributeSection {
    fn default() -> Self {
        AttributeSection {
            checkpoints: Vec::new(),
            samples: default_samples(),
            steps: default_steps(),
            baseline: BaselineKind::Mean,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default)]
    pub runs: Vec<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn canonical() -> Self {
        Self::parse(CANONICAL_CONFIG).expect("shipped canonical config parses")
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.generate, &self.data.path) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::config("[data] needs exactly one of `generate` or `path`")),
        }
        self.acorl.to_config().validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if self.attribute.steps == 0 {
            return Err(Error::config("attribute.steps must be at least 1"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name must be a plain file stem"));
        }
        Ok(())
    }
}

/// Seed of a named member model within a run.
pub fn member_seed(run_seed: u64, name: &str) -> u64 {
    subseed(run_seed, &format!("member.{name}"))
}
