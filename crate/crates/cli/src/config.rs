use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use hggan::adversary::{DiscriminatorConfig, TrainConfig};
use hggan::construct::{DhcConfig, OhghConfig};
use hggan::dataio::SynthConfig;
use hggan::eval::ClassifierConfig;
use hggan::ihen::GeneratorConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkCheckConfig {
    pub samples: usize,
    pub cap: usize,
}

impl Default for WalkCheckConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            cap: hggan::walk::DEFAULT_STEP_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub seeds: u64,
    pub classifier: ClassifierConfig,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            classifier: ClassifierConfig::default(),
        }
    }
}

/// Every module's settings; any field may be omitted from the JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub dhc: DhcConfig,
    pub ohgh: OhghConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub walk_check: WalkCheckConfig,
    pub evaluate: EvaluateConfig,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let cfg = serde_json::from_str(&text).map_err(hggan::Error::from)?;
                Ok(cfg)
            }
        }
    }

    /// Applies the global seed to every seeded component.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.synth.seed = s;
            self.ohgh.seed = s;
            self.generator.seed = s;
            self.discriminator.seed = s.wrapping_add(1);
            self.train.seed = s;
        }
        self.train.dhc = self.dhc.clone();
        self
    }
}
