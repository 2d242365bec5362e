//! Run configuration: defaults, overlaid by a TOML file, overlaid by flags.

use std::path::Path;

use ctxhead::globalmodel::GlobalTrainConfig;
use ctxhead::local::LocalTrainConfig;
use ctxhead::structloss::PairwiseTrainConfig;
use ctxhead::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub local: LocalTrainConfig,
    pub global: GlobalTrainConfig,
    pub pairwise: PairwiseTrainConfig,
}

/// Recursively replaces entries of `base` with those of `over`, so a file may
/// set a single nested field and inherit the rest.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Failure::Usage(m) => Failure::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, Failure> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Failure::Usage(e.to_string()))?;
        let mut base = toml::Value::try_from(Self::default()).map_err(|e| Failure::Runtime(e.to_string()))?;
        merge(&mut base, over);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Failure::Usage(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.synth.validate()?;
        self.local.sgd.validate()?;
        self.global.sgd.validate()?;
        self.pairwise.sgd.validate()?;
        self.pairwise.loss.validate()?;
        Ok(())
    }

    /// `--seed` replaces every random seed the run uses.
    pub fn reseed(&mut self, seed: u64) {
        self.synth.rng_seed = seed;
        self.local.sgd.rng_seed = seed;
        self.global.sgd.rng_seed = seed;
        self.pairwise.sgd.rng_seed = seed;
        self.pairwise.kmeans_seed = seed;
    }
}
