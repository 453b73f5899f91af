//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::read_file;
use crate::error::{Error, Result};
use crate::factorization::TrainConfig;
use crate::fusion::FusionConfig;
use crate::stable::EditConfig;
use crate::world::WorldSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpace {
    /// Toy-rendered features.
    Feature,
    /// Flattened latent codes.
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Real codes per unseen category used as the NAS training split.
    pub shots: usize,
    pub generated_per_category: usize,
    pub test_per_category: usize,
    /// Simulated inversion noise.
    pub eta: f64,
    pub feature_space: FeatureSpace,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: 10,
            generated_per_category: 100,
            test_per_category: 50,
            eta: 0.3,
            feature_space: FeatureSpace::Feature,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.generated_per_category == 0 || self.test_per_category == 0 {
            return Err(Error::Config("eval counts must be at least 1".into()));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config("eval.eta must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub train: TrainConfig,
    pub edit: EditConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
        Self::from_json(text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Schema checks on every section.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::InvalidInput(m) => Error::Config(m),
            other => other,
        };
        self.world.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        self.edit.validate().map_err(as_config)?;
        self.fusion.validate().map_err(as_config)?;
        self.eval.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_documents() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.lambda1, 0.0005);
        assert_eq!(c.edit.alpha, 2.0);
        let c = RunConfig::from_json(r#"{"edit": {"alpha": 0.5}, "world": {"seed": 9}}"#).unwrap();
        assert_eq!(c.edit.alpha, 0.5);
        assert_eq!(c.world.seed, 9);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::from_json(r#"{"wrld": {}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"lr": 1}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"batch_size": 0}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"eval": {"eta": -1}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("[1,"), Err(Error::Config(_))));
    }
}
