//! Training loops for the PIT baseline and the speaker-conditioned model.
//!
//! The baseline is trained with the permutation-invariant loss. The
//! conditioned model never searches permutations: each speaker filter is
//! computed from audio (or an embedding) tied to a known reference, so output
//! `k` is always scored against reference `k`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::MixtureExample;
use crate::error::{Error, Result};
use crate::loss::{self, SiSnrOptions};
use crate::model::{Model, ModelKind};
use crate::optim::{Adam, AdamConfig};
use crate::param::ParamId;
use crate::separation::ConditioningMode;
use crate::signal::Waveform;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    BaselinePit,
    /// Speaker module fed with clean reference speech.
    DpfnPretrainClean,
    /// Speaker module fed with aligned baseline estimates.
    DpfnFinetuneSeparated,
    /// Filters come from external embeddings through the projection layer.
    KnownSpeaker,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::BaselinePit => "baseline-pit",
            Phase::DpfnPretrainClean => "dpfn-pretrain-clean",
            Phase::DpfnFinetuneSeparated => "dpfn-finetune-separated",
            Phase::KnownSpeaker => "known-speaker",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    /// Accepts the full names and the short forms `pretrain-clean` / `finetune-separated`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline-pit" => Ok(Phase::BaselinePit),
            "dpfn-pretrain-clean" | "pretrain-clean" => Ok(Phase::DpfnPretrainClean),
            "dpfn-finetune-separated" | "finetune-separated" => Ok(Phase::DpfnFinetuneSeparated),
            "known-speaker" => Ok(Phase::KnownSpeaker),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub loss_eps: f64,
    pub zero_mean: bool,
    pub seed: u64,
    pub phase: Phase,
    /// Weight of the speaker-identity cross-entropy; 0 disables its effect.
    pub identity_weight: f64,
    /// Random training crop length in seconds; `None` trains on whole mixtures.
    pub crop_s: Option<f64>,
    /// Validate every this many epochs (and always after the last one); 0 never validates.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            optimizer: AdamConfig::default(),
            loss_eps: loss::DEFAULT_EPS,
            zero_mean: false,
            seed: 0,
            phase: Phase::BaselinePit,
            identity_weight: 0.0,
            crop_s: None,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loss_eps > 0.0) {
            return Err(Error::Config("loss_eps must be > 0".into()));
        }
        if !(self.identity_weight >= 0.0) {
            return Err(Error::Config("identity_weight must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if let Some(c) = self.crop_s {
            if !(c > 0.0) {
                return Err(Error::Config("crop_s must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn si_snr_options(&self) -> SiSnrOptions {
        SiSnrOptions {
            eps: self.loss_eps,
            zero_mean: self.zero_mean,
        }
    }
}

/// What the speaker filters of one training mixture are computed from.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    None,
    /// One waveform per reference source, fed to the speaker module.
    Audio(Vec<Waveform>),
    /// One external embedding per reference source, fed to the projection.
    Embedding(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub example: MixtureExample,
    pub condition: Condition,
    /// Speaker class per reference for the identity head (empty when unused).
    pub classes: Vec<usize>,
}

/// Items for the PIT baseline.
pub fn baseline_items(examples: &[MixtureExample]) -> Vec<TrainItem> {
    examples
        .iter()
        .map(|e| TrainItem {
            example: e.clone(),
            condition: Condition::None,
            classes: Vec::new(),
        })
        .collect()
}

/// Items whose filters come from the clean references.
pub fn clean_items(examples: &[MixtureExample]) -> Vec<TrainItem> {
    examples
        .iter()
        .map(|e| TrainItem {
            example: e.clone(),
            condition: Condition::Audio(e.sources.clone()),
            classes: Vec::new(),
        })
        .collect()
}

/// Items whose filters come from baseline estimates, each aligned to its reference.
/// Returns the items and the alignment used for every mixture.
pub fn separated_items(examples: &[MixtureExample], baseline: &Model, opts: SiSnrOptions) -> Result<(Vec<TrainItem>, Vec<Vec<usize>>)> {
    if baseline.config.kind != ModelKind::Baseline {
        return Err(Error::invalid("fine-tuning needs a baseline (mode `none`) checkpoint"));
    }
    let results: Vec<Result<(TrainItem, Vec<usize>)>> = examples
        .par_iter()
        .map(|e| {
            let est = baseline.separator.separate(&baseline.store, &e.mixture, &[])?.waveforms;
            let pairs = loss::align_outputs(&est, &e.sources, None, opts)?;
            let mut audio = vec![None; e.sources.len()];
            let mut perm = vec![0; pairs.len()];
            for p in pairs {
                audio[p.reference_index] = Some(p.estimate);
                perm[p.estimate_index] = p.reference_index;
            }
            let audio = audio
                .into_iter()
                .map(|a| a.ok_or_else(|| Error::invalid("alignment left a reference without an estimate")))
                .collect::<Result<Vec<_>>>()?;
            Ok((
                TrainItem {
                    example: e.clone(),
                    condition: Condition::Audio(audio),
                    classes: Vec::new(),
                },
                perm,
            ))
        })
        .collect();
    let mut items = Vec::with_capacity(results.len());
    let mut perms = Vec::with_capacity(results.len());
    for r in results {
        let (i, p) = r?;
        items.push(i);
        perms.push(p);
    }
    Ok((items, perms))
}

/// Items whose filters come from per-speaker external embeddings.
pub fn known_speaker_items(examples: &[MixtureExample], embeddings: &HashMap<String, Vec<f64>>) -> Result<Vec<TrainItem>> {
    examples
        .iter()
        .map(|e| {
            let emb = e
                .speaker_ids
                .iter()
                .map(|id| {
                    embeddings
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::invalid(format!("no external embedding for speaker `{id}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainItem {
                example: e.clone(),
                condition: Condition::Embedding(emb),
                classes: Vec::new(),
            })
        })
        .collect()
}

/// Assigns identity classes by sorted speaker id; returns the class names.
pub fn assign_classes(items: &mut [TrainItem]) -> Vec<String> {
    let mut names: Vec<String> = items
        .iter()
        .flat_map(|i| i.example.speaker_ids.iter().cloned())
        .collect();
    names.sort();
    names.dedup();
    for item in items.iter_mut() {
        item.classes = item
            .example
            .speaker_ids
            .iter()
            .map(|id| names.binary_search(id).expect("collected above"))
            .collect();
    }
    names
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub mode: ConditioningMode,
    /// Mean training loss (negative SI-SNR, dB).
    pub train_loss_db: f64,
    /// Mean aligned SI-SNR on the validation items, when validated.
    pub val_si_snr_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub steps: u64,
}

impl TrainReport {
    pub fn final_loss_db(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |h| h.train_loss_db)
    }
}

/// Graph outputs for one item: estimates ordered like the references.
pub struct ItemGraph {
    pub estimates: Vec<Var>,
    pub references: Vec<Var>,
    pub filters: Vec<Var>,
}

fn other(k: usize) -> usize {
    1 - k
}

fn check_item(model: &Model, item: &TrainItem, phase: Phase) -> Result<()> {
    let n = item.example.sources.len();
    match (phase, &item.condition) {
        (Phase::BaselinePit, Condition::None) => {
            if model.config.kind != ModelKind::Baseline {
                return Err(Error::invalid("phase baseline-pit needs a baseline model"));
            }
            if n != model.config.separator.num_sources {
                return Err(Error::invalid(format!(
                    "baseline emits {} sources but the mixture has {n}",
                    model.config.separator.num_sources
                )));
            }
        }
        (Phase::DpfnPretrainClean | Phase::DpfnFinetuneSeparated, Condition::Audio(a)) if a.len() == n => {
            model.speaker_net()?;
        }
        (Phase::KnownSpeaker, Condition::Embedding(e)) if e.len() == n => {
            if model.projection.is_none() {
                return Err(Error::invalid("phase known-speaker needs a model with an embedding projection"));
            }
        }
        _ => {
            return Err(Error::invalid(format!(
                "training item does not provide the conditioning phase `{phase}` expects"
            )))
        }
    }
    if phase != Phase::BaselinePit {
        if model.config.kind != ModelKind::Dpfn {
            return Err(Error::invalid(format!("phase `{phase}` needs a DPFN model")));
        }
        if model.mode() != ConditioningMode::Target && n != 2 {
            return Err(Error::invalid(format!("mode `{}` needs two-source mixtures", model.mode())));
        }
    }
    Ok(())
}

/// Builds the separator passes for one item. `span` crops mixture and references.
pub fn item_graph(g: &mut Graph, model: &Model, item: &TrainItem, span: Option<(usize, usize)>) -> Result<ItemGraph> {
    let ex = &item.example;
    let crop = |w: &Waveform| -> Tensor {
        let s = w.samples();
        match span {
            Some((a, len)) => Tensor::from_vec(s[a..a + len].to_vec()),
            None => Tensor::from_vec(s.to_vec()),
        }
    };
    let mix = g.constant(crop(&ex.mixture));
    let references: Vec<Var> = ex.sources.iter().map(|s| g.constant(crop(s))).collect();
    let store = &model.store;
    let filters: Vec<Var> = match &item.condition {
        Condition::None => Vec::new(),
        Condition::Audio(audio) => {
            let net = model.speaker_net()?;
            audio
                .iter()
                .map(|a| net.forward_waveform(g, store, a))
                .collect::<Result<_>>()?
        }
        Condition::Embedding(emb) => {
            let proj = model
                .projection
                .as_ref()
                .ok_or_else(|| Error::invalid("model has no embedding projection"))?;
            emb.iter()
                .map(|e| {
                    let v = g.constant(Tensor::from_vec(e.clone()));
                    proj.forward(g, store, v)
                })
                .collect::<Result<_>>()?
        }
    };
    let sep = &model.separator;
    let estimates = match model.mode() {
        ConditioningMode::None => sep.forward(g, store, mix, None)?.waveforms,
        ConditioningMode::Target => {
            let mut out = Vec::with_capacity(filters.len());
            for &f in &filters {
                out.push(sep.forward(g, store, mix, Some(f))?.waveforms[0]);
            }
            out
        }
        ConditioningMode::NonTarget => {
            let mut out = Vec::with_capacity(filters.len());
            for k in 0..filters.len() {
                out.push(sep.forward(g, store, mix, Some(filters[other(k)]))?.waveforms[0]);
            }
            out
        }
        ConditioningMode::Both => {
            let cond = sep.condition(g, &filters)?;
            sep.forward(g, store, mix, cond)?.waveforms
        }
    };
    Ok(ItemGraph {
        estimates,
        references,
        filters,
    })
}

/// Scalar training loss for one item; returns `(loss, loss value)`.
fn item_loss(g: &mut Graph, model: &Model, item: &TrainItem, cfg: &TrainConfig, span: Option<(usize, usize)>) -> Result<(Var, f64)> {
    let opts = cfg.si_snr_options();
    let ig = item_graph(g, model, item, span)?;
    let mut total = if cfg.phase == Phase::BaselinePit {
        loss::pit_loss(g, &ig.estimates, &ig.references, opts)?.0
    } else {
        loss::reconstruction_loss(g, &ig.estimates, &ig.references, opts)?
    };
    let recon = g.value(total).item()?;
    if let (Some(cls), false) = (&model.classifier, item.classes.is_empty()) {
        let mut id_total: Option<Var> = None;
        for (&f, &c) in ig.filters.iter().zip(&item.classes) {
            let l = loss::identity_loss(g, &model.store, f, c, cls)?;
            id_total = Some(match id_total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        if let Some(t) = id_total {
            let w = cfg.identity_weight / ig.filters.len().max(1) as f64;
            let t = g.scale(t, w)?;
            total = g.add(total, t)?;
        }
    }
    Ok((total, recon))
}

/// Parameters updated in `phase`.
pub fn phase_parameters(model: &Model, phase: Phase) -> Vec<ParamId> {
    let prefixes: &[&str] = match phase {
        Phase::BaselinePit => &["sep."],
        Phase::DpfnPretrainClean | Phase::DpfnFinetuneSeparated => &["sep.", "spk.", "cls."],
        Phase::KnownSpeaker => &["sep.", "xvec.", "cls."],
    };
    let store = &model.store;
    store
        .ids()
        .filter(|&id| store.is_trainable(id) && prefixes.iter().any(|p| store.name(id).starts_with(p)))
        .collect()
}

/// Estimates for one item without gradients, ordered like the references.
pub fn infer_item(model: &Model, item: &TrainItem) -> Result<Vec<Waveform>> {
    let mut g = Graph::inference();
    let ig = item_graph(&mut g, model, item, None)?;
    let sr = item.example.mixture.sample_rate();
    ig.estimates
        .iter()
        .map(|&v| Waveform::new(g.value(v).data().to_vec(), sr))
        .collect()
}

/// Mean aligned SI-SNR over `items` (read-only fan-out across threads).
pub fn validate(model: &Model, items: &[TrainItem], opts: SiSnrOptions) -> Result<f64> {
    let per_item: Vec<Result<Vec<f64>>> = items
        .par_iter()
        .map(|item| {
            let est = infer_item(model, item)?;
            let pairs = loss::align_outputs(&est, &item.example.sources, None, opts)?;
            Ok(pairs.iter().map(|p| p.si_snr_db).collect())
        })
        .collect();
    let mut all = Vec::new();
    for r in per_item {
        all.extend(r?);
    }
    if all.is_empty() {
        return Err(Error::invalid("validation over zero items"));
    }
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}

/// Trains `model` in place. `log` receives every epoch record as it completes.
pub fn train(
    model: &mut Model,
    items: &[TrainItem],
    dev: &[TrainItem],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for item in items.iter().chain(dev) {
        check_item(model, item, cfg.phase)?;
        model.check_sample_rate(&item.example.mixture)?;
    }
    let crop_len = cfg
        .crop_s
        .map(|c| (c * model.config.sample_rate as f64).round() as usize);
    let ids = phase_parameters(model, cfg.phase);
    let mut adam = Adam::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            for &i in batch {
                let item = &items[i];
                let len = item.example.mixture.len();
                let span = match crop_len {
                    Some(c) if c < len => Some((rng.random_range(0..=len - c), c)),
                    _ => None,
                };
                let mut g = Graph::new();
                let (loss, value) = item_loss(&mut g, model, item, cfg, span)?;
                g.backward(loss)?;
                model.store.accumulate_grads(&g);
                loss_sum += value;
            }
            model.store.scale_grads(1.0 / batch.len() as f64);
            adam.step(&mut model.store, &ids)?;
        }
        let validate_now = !dev.is_empty()
            && cfg.validate_every > 0
            && (epoch % cfg.validate_every == 0 || epoch == cfg.epochs);
        let val = if validate_now {
            Some(validate(model, dev, cfg.si_snr_options())?)
        } else {
            None
        };
        let record = EpochLog {
            epoch,
            phase: cfg.phase,
            mode: model.mode(),
            train_loss_db: loss_sum / items.len() as f64,
            val_si_snr_db: val,
        };
        log(&record)?;
        history.push(record);
    }
    model.store.zero_grad();
    Ok(TrainReport {
        history,
        steps: adam.steps(),
    })
}

/// Loss of every item under the current parameters, without updating them.
pub fn evaluate_loss(model: &Model, items: &[TrainItem], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for item in items {
        let mut g = Graph::inference();
        total += item_loss(&mut g, model, item, cfg, None)?.1;
    }
    Ok(total / items.len().max(1) as f64)
}
