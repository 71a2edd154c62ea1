use std::path::Path;

use dpfn_core::data::CorpusConfig;
use dpfn_core::separation::SeparatorConfig;
use dpfn_core::speaker::SpeakerNetConfig;
use dpfn_core::training::TrainConfig;
use dpfn_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run needs, read from one TOML file. Missing sections take defaults.
///
/// ```toml
/// seed = 3
/// [corpus]
/// train_mixtures = 8
/// [separator]
/// blocks = 2
/// [train]
/// epochs = 20
/// crop_s = 0.5
/// [train.optimizer]
/// lr = 0.002
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the corpus and training seeds when set.
    pub seed: Option<u64>,
    pub corpus: CorpusConfig,
    pub separator: SeparatorConfig,
    pub speaker: SpeakerNetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = cfg.seed {
            cfg.set_seed(s);
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.corpus.seed = seed;
        self.train.seed = seed;
    }
}
