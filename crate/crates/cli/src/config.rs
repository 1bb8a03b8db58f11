//! Run configuration: one JSON document with a section per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use uattr::attribution::{InfluenceConfig, LossScoring, INFLUENCE_PROJECTED, PIXEL_COSINE, SINGLE_TIMESTEP, UNLEARNING};
use uattr::data::DatasetSpec;
use uattr::diffusion::DiffusionConfig;
use uattr::eval::EncoderConfig;
use uattr::fisher::FisherConfig;
use uattr::train::TrainConfig;
use uattr::unlearn::UnlearnConfig;
use uattr::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// Samples of the base model from keyed noise.
    Sample,
    /// Refinements of each exact-duplicate group's base image.
    Groups,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryConfig {
    pub source: QuerySource,
    pub count: usize,
    pub seed: u64,
    /// Noise level the group base images are refined from.
    pub t_start: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            source: QuerySource::Sample,
            count: 20,
            seed: 0,
            t_start: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k_grid: Vec<usize>,
    pub models_per_k: usize,
    pub random_seed: u64,
    pub loss_seed: u64,
    pub stride: usize,
    pub methods: Vec<String>,
    /// Timestep of the single-timestep variant.
    pub t_fixed: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![10, 25, 50, 100],
            models_per_k: 3,
            random_seed: 0,
            loss_seed: 0,
            stride: 1,
            methods: [UNLEARNING, PIXEL_COSINE, INFLUENCE_PROJECTED, SINGLE_TIMESTEP]
                .map(String::from)
                .to_vec(),
            t_fixed: 100,
        }
    }
}

/// Artifact locations, relative to the workspace root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub runs: PathBuf,
    pub fisher: PathBuf,
    pub queries: PathBuf,
    pub unlearned: PathBuf,
    pub scores: PathBuf,
    pub encoder: PathBuf,
    pub eval: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            runs: "runs".into(),
            fisher: "fisher/fisher.bin".into(),
            queries: "queries/queries.json".into(),
            unlearned: "unlearned".into(),
            scores: "scores".into(),
            encoder: "encoder/encoder.bin".into(),
            eval: "eval".into(),
            report: "report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Name of the base training run under `paths.runs`.
    pub name: String,
    pub dataset: DatasetSpec,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub fisher: FisherConfig,
    pub unlearn: UnlearnConfig,
    pub scoring: LossScoring,
    pub influence: InfluenceConfig,
    pub encoder: EncoderConfig,
    pub queries: QueryConfig,
    pub evaluate: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "base".into(),
            dataset: DatasetSpec::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            fisher: FisherConfig::default(),
            unlearn: UnlearnConfig::default(),
            scoring: LossScoring::default(),
            influence: InfluenceConfig::default(),
            encoder: EncoderConfig::default(),
            queries: QueryConfig::default(),
            evaluate: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults) and applies `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::DependencyMissing(p.to_path_buf()),
                    _ => e.into(),
                })?;
                let parsed: RunConfig = serde_json::from_slice(&bytes)?;
                serde_json::to_value(parsed)?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.diffusion.validate()?;
        self.train.validate()?;
        self.unlearn.validate(&self.diffusion)?;
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Validation("name must be a plain directory name".into()));
        }
        if self.evaluate.k_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("evaluate.k_grid must be strictly ascending".into()));
        }
        if self.evaluate.models_per_k == 0 {
            return Err(Error::Validation("evaluate.models_per_k must be >= 1".into()));
        }
        self.diffusion.check_timestep(self.evaluate.t_fixed)?;
        self.diffusion.check_timestep(self.queries.t_start)?;
        for m in &self.evaluate.methods {
            if ![UNLEARNING, PIXEL_COSINE, INFLUENCE_PROJECTED, SINGLE_TIMESTEP].contains(&m.as_str()) {
                return Err(Error::Validation(format!("unknown method `{m}`")));
            }
        }
        Ok(())
    }
}

/// Sets the dotted `key` of `root` to `value`, parsed as JSON when possible
/// and as a string otherwise. Every key on the path must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override `{assignment}` is not key=value")))?;
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Validation(format!("unknown config key `{key}`")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
