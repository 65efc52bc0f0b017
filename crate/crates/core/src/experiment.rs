//! Experiment configuration files and the default synthetic benchmark.
//!
//! A config file is JSON with the blocks `table`, `generator`, `network`,
//! `train`, `coupling`, `compound` and `fine_tune`. Every block and key is
//! optional; missing values take the benchmark defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coupling::CouplingConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::NetworkConfig;
use crate::relatedness::{default_compound_classes, load_compound_classes, CompoundClass, RelatednessTable};
use crate::synthdata::GeneratorConfig;
use crate::trainer::{FineTuneConfig, TrainConfig};
use crate::zeroshot::CompoundPredictionConfig;

/// `"cognitive"`, `"empirical"` or a path to a table file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TableSource(pub String);

impl Default for TableSource {
    fn default() -> Self {
        TableSource("cognitive".into())
    }
}

impl TableSource {
    /// Relative paths resolve against `base`.
    pub fn resolve(&self, base: &Path) -> Result<RelatednessTable> {
        match self.0.as_str() {
            "cognitive" => Ok(RelatednessTable::cognitive()),
            "empirical" => Ok(RelatednessTable::empirical()),
            path => RelatednessTable::load(base.join(path)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompoundSettings {
    /// Class list file; the bundled eleven classes when absent.
    pub classes: Option<PathBuf>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Use class AU weights in the zero-shot AU term.
    pub weighted: bool,
    pub valence_term: bool,
}

impl Default for CompoundSettings {
    fn default() -> Self {
        CompoundSettings {
            classes: None,
            train_per_class: 20,
            test_per_class: 100,
            weighted: false,
            valence_term: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub table: TableSource,
    pub generator: GeneratorConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub coupling: CouplingConfig,
    pub compound: CompoundSettings,
    pub fine_tune: FineTuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            table: TableSource::default(),
            generator: GeneratorConfig {
                noise_sigma: 1.0,
                ..GeneratorConfig::default()
            },
            network: NetworkConfig::default(),
            train: TrainConfig {
                learning_rate: 0.1,
                epochs: 40,
                iterations: 40,
                weights: LossWeights {
                    mu_dm: 0.1,
                    mu_sca: 0.3,
                    ..LossWeights::default()
                },
                ..TrainConfig::default()
            },
            coupling: CouplingConfig {
                normalize_q: false,
                full_bernoulli: true,
                ..CouplingConfig::default()
            },
            compound: CompoundSettings::default(),
            fine_tune: FineTuneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.network.validate()?;
        self.train_config().validate()?;
        if self.network.input_dim != self.generator.feature_dim {
            return Err(Error::InvalidInput(format!(
                "network.input_dim {} differs from generator.feature_dim {}",
                self.network.input_dim, self.generator.feature_dim
            )));
        }
        if self.compound.train_per_class == 0 || self.compound.test_per_class == 0 {
            return Err(Error::InvalidInput("compound sample counts must be at least 1".into()));
        }
        Ok(())
    }

    /// The train block with the coupling block folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            coupling: self.coupling,
            ..self.train.clone()
        }
    }

    /// Sets the training and network seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.network.seed = seed;
        self.fine_tune.seed = seed;
        self
    }

    /// The generator block with the resolved table.
    pub fn generator_config(&self, base: &Path) -> Result<GeneratorConfig> {
        Ok(GeneratorConfig {
            table: self.table.resolve(base)?,
            ..self.generator.clone()
        })
    }

    pub fn compound_classes(&self, table: &RelatednessTable, base: &Path) -> Result<Vec<CompoundClass>> {
        match &self.compound.classes {
            Some(p) => load_compound_classes(base.join(p), table),
            None => Ok(default_compound_classes(table)),
        }
    }

    pub fn compound_prediction_config(&self, classes: Vec<CompoundClass>) -> Result<CompoundPredictionConfig> {
        let mut cfg = CompoundPredictionConfig::new(classes)?;
        cfg.weighted = self.compound.weighted;
        cfg.valence_term = self.compound.valence_term;
        Ok(cfg)
    }
}
