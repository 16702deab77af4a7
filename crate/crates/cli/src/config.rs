use std::path::Path;

use dialcrit::dialenv::EnvConfig;
use dialcrit::evaluator::EvalConfig;
use dialcrit::latent::{LatentConfig, PretrainSchedule};
use dialcrit::plas::{PlasConfig, ReinforceConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Every tunable of every command. Sections missing from the file keep their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub corpus: CorpusConfig,
    pub latent: LatentConfig,
    pub pretrain: PretrainSchedule,
    pub plas: PlasConfig,
    pub reinforce: ReinforceConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Behavior policies and their sampling weights.
    pub mix: Vec<MixEntry>,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Seed of the training split; validation and test use the next two.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub policy: String,
    pub weight: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            mix: vec![
                MixEntry {
                    policy: "eps-0.1".into(),
                    weight: 0.5,
                },
                MixEntry {
                    policy: "eps-0.6".into(),
                    weight: 0.5,
                },
            ],
            train: 2000,
            valid: 500,
            test: 500,
            seed: 5,
        }
    }
}

/// Parses `policy=weight` pairs separated by commas.
pub fn parse_mix(text: &str) -> Result<Vec<MixEntry>, String> {
    text.split(',')
        .map(|part| {
            let (policy, weight) = part
                .split_once('=')
                .ok_or_else(|| format!("mix entry `{part}` is not policy=weight"))?;
            let weight: f64 = weight.trim().parse().map_err(|_| format!("bad weight in `{part}`"))?;
            Ok(MixEntry {
                policy: policy.trim().to_string(),
                weight,
            })
        })
        .collect()
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let usage = |e: dialcrit::Error| Failure::Usage(e.to_string());
        self.latent.validate().map_err(usage)?;
        self.plas.validate().map_err(usage)?;
        self.reinforce.validate().map_err(usage)?;
        self.eval.validate().map_err(usage)?;
        let c = &self.corpus;
        if c.train == 0 || c.valid == 0 || c.test == 0 {
            return Err(Failure::Usage("corpus split sizes must be positive".into()));
        }
        if c.mix.is_empty() || c.mix.iter().any(|m| !(m.weight > 0.0)) {
            return Err(Failure::Usage("policy mix needs at least one entry, all weights positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
