//! Parameter store plus the modules built on it, saved as one checkpoint.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::param::ParamStore;
use crate::separation::{ConditioningMode, Separator, SeparatorConfig};
use crate::signal::{Waveform, SAMPLE_RATE};
use crate::speaker::{EmbeddingProjection, ExternalEmbedding, SpeakerFilter, SpeakerNet, SpeakerNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Unconditioned separator trained with PIT.
    Baseline,
    /// Speaker-conditioned separator with its speaker module.
    Dpfn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub sample_rate: u32,
    pub separator: SeparatorConfig,
    #[serde(default)]
    pub speaker: Option<SpeakerNetConfig>,
    /// Input width of external embeddings (known-speaker path).
    #[serde(default)]
    pub external_dim: Option<usize>,
    /// Classes of the optional speaker-identity head.
    #[serde(default)]
    pub identity_classes: Option<usize>,
}

impl ModelConfig {
    pub fn baseline(separator: SeparatorConfig) -> Self {
        Self {
            kind: ModelKind::Baseline,
            sample_rate: SAMPLE_RATE,
            separator: SeparatorConfig {
                mode: ConditioningMode::None,
                ..separator
            },
            speaker: None,
            external_dim: None,
            identity_classes: None,
        }
    }

    pub fn dpfn(mode: ConditioningMode, separator: SeparatorConfig, speaker: SpeakerNetConfig) -> Self {
        Self {
            kind: ModelKind::Dpfn,
            sample_rate: SAMPLE_RATE,
            separator: SeparatorConfig {
                mode,
                filter_dim: speaker.filter_dim,
                ..separator
            },
            speaker: Some(speaker),
            external_dim: None,
            identity_classes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.separator.validate()?;
        match self.kind {
            ModelKind::Baseline => {
                if self.separator.mode.is_conditioned() {
                    return Err(Error::Config("baseline model must use mode `none`".into()));
                }
            }
            ModelKind::Dpfn => {
                if !self.separator.mode.is_conditioned() {
                    return Err(Error::Config("DPFN model needs a conditioned mode".into()));
                }
                let spk = self
                    .speaker
                    .as_ref()
                    .ok_or_else(|| Error::Config("DPFN model needs a speaker module config".into()))?;
                spk.validate()?;
                if spk.filter_dim != self.separator.filter_dim {
                    return Err(Error::Config(format!(
                        "speaker filter_dim {} differs from separator filter_dim {}",
                        spk.filter_dim, self.separator.filter_dim
                    )));
                }
            }
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub separator: Separator,
    pub speaker: Option<SpeakerNet>,
    pub projection: Option<EmbeddingProjection>,
    pub classifier: Option<Linear>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let separator = Separator::new(&mut store, "sep", config.separator.clone(), &mut rng)?;
        let speaker = match &config.speaker {
            Some(c) if config.kind == ModelKind::Dpfn => Some(SpeakerNet::new(&mut store, "spk", c.clone(), &mut rng)?),
            _ => None,
        };
        let d = config.separator.filter_dim;
        let projection = match config.external_dim {
            Some(n) => Some(EmbeddingProjection::new(&mut store, "xvec", n, d, &mut rng)?),
            None => None,
        };
        let classifier = match config.identity_classes {
            Some(k) => Some(Linear::new(&mut store, "cls", d, k, true, &mut rng)?),
            None => None,
        };
        Ok(Self {
            config,
            store,
            separator,
            speaker,
            projection,
            classifier,
        })
    }

    pub fn mode(&self) -> ConditioningMode {
        self.config.separator.mode
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.store, &serde_json::to_value(&self.config)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir)?;
        let config: ModelConfig = serde_json::from_value(manifest.config)
            .map_err(|e| Error::format("config", format!("checkpoint config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        checkpoint::load_into(dir, &mut model.store)?;
        Ok(model)
    }

    /// Copies every parameter that `other` also has (same name and shape).
    pub fn init_from(&mut self, other: &Model) -> Result<usize> {
        let mut copied = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            if let Ok(src) = other.store.id(self.store.name(id)) {
                let v = other.store.value(src);
                if v.shape() == self.store.value(id).shape() {
                    self.store.set_value(id, v.clone())?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    pub fn check_sample_rate(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate() != self.config.sample_rate {
            return Err(Error::invalid(format!(
                "audio at {} Hz but model expects {} Hz",
                w.sample_rate(),
                self.config.sample_rate
            )));
        }
        Ok(())
    }

    pub fn speaker_net(&self) -> Result<&SpeakerNet> {
        self.speaker
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no speaker module"))
    }

    /// Speaker filter of `audio` from the speaker module.
    /// Audio shorter than one analysis frame is rejected.
    pub fn embed(&self, audio: &Waveform) -> Result<SpeakerFilter> {
        self.check_sample_rate(audio)?;
        let net = self.speaker_net()?;
        if audio.len() < net.config.frame_len {
            return Err(Error::InputTooShort {
                op: "embed",
                len: audio.len(),
                needed: net.config.frame_len,
            });
        }
        net.filter_from_waveform(&self.store, audio)
    }

    /// Maps an external embedding through the trained projection.
    pub fn project_external(&self, e: &ExternalEmbedding) -> Result<SpeakerFilter> {
        let proj = self
            .projection
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no external-embedding projection"))?;
        proj.project(&self.store, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sep() -> SeparatorConfig {
        SeparatorConfig {
            encoder_filters: 4,
            bottleneck: 3,
            chunk_size: 4,
            blocks: 2,
            hidden: 2,
            ..SeparatorConfig::default()
        }
    }

    #[test]
    fn save_load_round_trip_keeps_config_and_values() {
        let spk = SpeakerNetConfig {
            stacks: 1,
            blocks: 2,
            residual_channels: 3,
            out_channels: 3,
            filter_dim: 2,
            ..SpeakerNetConfig::default()
        };
        let mut cfg = ModelConfig::dpfn(ConditioningMode::Both, tiny_sep(), spk);
        cfg.identity_classes = Some(3);
        let m = Model::new(cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        for id in m.store.ids() {
            assert_eq!(m.store.value(id), back.store.value(back.store.id(m.store.name(id)).unwrap()));
        }
    }

    #[test]
    fn mismatched_filter_dim_is_a_config_error() {
        let mut cfg = ModelConfig::dpfn(ConditioningMode::Target, tiny_sep(), SpeakerNetConfig::default());
        cfg.separator.filter_dim = 3;
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    }
}
