//! TOML run configuration with full defaults.
//!
//! Unknown keys are errors. Relative paths resolve against the directory of
//! the configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::PoolingKind;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::metrics::{SetAggregation, DEFAULT_NDCG_P};
use crate::model::ModelConfig;
use crate::objective::{AdamConfig, LrSchedule, Reduction, DEFAULT_MARGIN};

/// Floating-point width used for training and evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub pooling: PoolingKind,
    pub stopword_masking: bool,
    pub margin: f64,
    pub reduction: Reduction,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; `0` means no limit.
    pub max_steps: u64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            pooling: PoolingKind::MrSw,
            stopword_masking: false,
            margin: DEFAULT_MARGIN,
            reduction: Reduction::Sum,
            batch_size: 40,
            epochs: 30,
            max_steps: 0,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ndcg_p: usize,
    pub relevance_aggregation: SetAggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ndcg_p: DEFAULT_NDCG_P,
            relevance_aggregation: SetAggregation::Max,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_manifest: Option<PathBuf>,
    /// Used for checkpoint selection; defaults to the training corpus.
    pub validation_manifest: Option<PathBuf>,
    /// Corpus scored by `eval` and `align`; defaults to validation, then training.
    pub eval_manifest: Option<PathBuf>,
    /// Where `train` writes checkpoints and logs.
    pub out_dir: Option<PathBuf>,
    /// Relevance table cache for the evaluated corpus.
    pub relevance_cache: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses, resolves paths against `base` and validates.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let p = &mut cfg.paths;
        for slot in [
            &mut p.train_manifest,
            &mut p.validation_manifest,
            &mut p.eval_manifest,
            &mut p.out_dir,
            &mut p.relevance_cache,
        ] {
            if let Some(rel) = slot.as_mut() {
                if rel.is_relative() {
                    *rel = base.join(&*rel);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.synthetic.validate()?;
        let t = &self.training;
        if !(t.margin.is_finite() && t.margin >= 0.0) {
            return bad(format!("margin {} must be finite and non-negative", t.margin));
        }
        if t.batch_size < 2 {
            return bad(format!("batch_size {} leaves no negatives", t.batch_size));
        }
        if t.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        let s = &t.schedule;
        if !(s.lr > 0.0 && s.lr_decayed > 0.0 && s.lr.is_finite() && s.lr_decayed.is_finite()) {
            return bad("learning rates must be positive".into());
        }
        let a = &t.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive".into());
        }
        if self.eval.ndcg_p == 0 {
            return bad("ndcg_p must be at least 1".into());
        }
        Ok(())
    }

    pub fn train_manifest(&self) -> Result<&Path> {
        self.paths
            .train_manifest
            .as_deref()
            .ok_or_else(|| Error::Config("paths.train_manifest is not set".into()))
    }

    pub fn validation_manifest(&self) -> Result<&Path> {
        match &self.paths.validation_manifest {
            Some(p) => Ok(p),
            None => self.train_manifest(),
        }
    }

    pub fn eval_manifest(&self) -> Result<&Path> {
        match &self.paths.eval_manifest {
            Some(p) => Ok(p),
            None => self.validation_manifest(),
        }
    }
}
