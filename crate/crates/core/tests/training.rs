use std::collections::HashMap;

use dpfn_core::data::{self, CorpusConfig, MixtureExample, Split};
use dpfn_core::model::{Model, ModelConfig};
use dpfn_core::optim::AdamConfig;
use dpfn_core::separation::{ConditioningMode, SeparatorConfig};
use dpfn_core::speaker::SpeakerNetConfig;
use dpfn_core::training::{self, EpochLog, Phase, TrainConfig};

fn sep_cfg() -> SeparatorConfig {
    SeparatorConfig {
        encoder_filters: 8,
        bottleneck: 4,
        chunk_size: 10,
        blocks: 2,
        hidden: 3,
        ..SeparatorConfig::default()
    }
}

fn spk_cfg() -> SpeakerNetConfig {
    SpeakerNetConfig {
        stacks: 1,
        blocks: 2,
        residual_channels: 4,
        out_channels: 4,
        filter_dim: 3,
        ..SpeakerNetConfig::default()
    }
}

fn examples() -> (Vec<MixtureExample>, Vec<MixtureExample>) {
    let cfg = CorpusConfig {
        duration_s: 0.25,
        train_mixtures: 3,
        dev_mixtures: 2,
        eval_mixtures: 1,
        seed: 9,
        ..CorpusConfig::default()
    };
    let (_, ex) = data::generate_examples(&cfg).unwrap();
    let pick = |s: Split| ex.iter().filter(|(r, _)| r.split == s).map(|(_, e)| e.clone()).collect();
    (pick(Split::Train), pick(Split::Dev))
}

fn cfg(phase: Phase, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        phase,
        optimizer: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn quiet() -> impl FnMut(&EpochLog) -> dpfn_core::Result<()> {
    |_| Ok(())
}

fn param_bytes(m: &Model) -> Vec<u64> {
    m.store
        .ids()
        .flat_map(|id| m.store.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn baseline_loss_falls_over_the_first_epochs() {
    let (train, dev) = examples();
    let mut model = Model::new(ModelConfig::baseline(sep_cfg()), 0).unwrap();
    let items = training::baseline_items(&train);
    let report = training::train(&mut model, &items, &training::baseline_items(&dev), &cfg(Phase::BaselinePit, 5), &mut quiet()).unwrap();
    assert_eq!(report.history.len(), 5);
    assert_eq!(report.steps, 15);
    assert!(report.final_loss_db() < report.history[0].train_loss_db);
    assert!(report.history.iter().all(|h| h.val_si_snr_db.is_some()));
}

#[test]
fn training_is_bit_reproducible() {
    let (train, dev) = examples();
    let run = || {
        let mut model = Model::new(ModelConfig::dpfn(ConditioningMode::Both, sep_cfg(), spk_cfg()), 4).unwrap();
        let mut c = cfg(Phase::DpfnPretrainClean, 3);
        c.crop_s = Some(0.1);
        c.batch_size = 2;
        let r = training::train(&mut model, &training::clean_items(&train), &training::clean_items(&dev), &c, &mut quiet()).unwrap();
        (serde_json::to_string(&r.history).unwrap(), param_bytes(&model))
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_keeps_the_loss() {
    let (train, _) = examples();
    let mut model = Model::new(ModelConfig::dpfn(ConditioningMode::Target, sep_cfg(), spk_cfg()), 1).unwrap();
    let items = training::clean_items(&train);
    let c = cfg(Phase::DpfnPretrainClean, 2);
    training::train(&mut model, &items, &[], &c, &mut quiet()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = Model::load(dir.path()).unwrap();
    assert_eq!(param_bytes(&model), param_bytes(&loaded));
    let a = training::evaluate_loss(&model, &items, &c).unwrap();
    let b = training::evaluate_loss(&loaded, &items, &c).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn empty_or_mismatched_inputs_are_errors() {
    let (train, _) = examples();
    let mut baseline = Model::new(ModelConfig::baseline(sep_cfg()), 0).unwrap();
    assert!(training::train(&mut baseline, &[], &[], &cfg(Phase::BaselinePit, 1), &mut quiet()).is_err());
    let clean = training::clean_items(&train);
    assert!(training::train(&mut baseline, &clean, &[], &cfg(Phase::BaselinePit, 1), &mut quiet()).is_err());
    assert!(training::train(&mut baseline, &clean, &[], &cfg(Phase::DpfnPretrainClean, 1), &mut quiet()).is_err());
    let mut dpfn = Model::new(ModelConfig::dpfn(ConditioningMode::Both, sep_cfg(), spk_cfg()), 0).unwrap();
    let plain = training::baseline_items(&train);
    assert!(training::train(&mut dpfn, &plain, &[], &cfg(Phase::DpfnPretrainClean, 1), &mut quiet()).is_err());
    assert!(training::train(&mut dpfn, &clean, &[], &cfg(Phase::KnownSpeaker, 1), &mut quiet()).is_err());
    assert!(training::separated_items(&train, &dpfn, Default::default()).is_err());
    let bad = TrainConfig { epochs: 0, ..cfg(Phase::BaselinePit, 1) };
    assert!(training::train(&mut baseline, &plain, &[], &bad, &mut quiet()).is_err());
}

#[test]
fn zero_identity_weight_leaves_training_unchanged() {
    let (train, _) = examples();
    let plain_cfg = ModelConfig::dpfn(ConditioningMode::Both, sep_cfg(), spk_cfg());
    let mut with_head_cfg = plain_cfg.clone();
    let mut items = training::clean_items(&train);
    with_head_cfg.identity_classes = Some(training::assign_classes(&mut items).len());
    let mut plain = Model::new(plain_cfg, 2).unwrap();
    let mut with_head = Model::new(with_head_cfg, 2).unwrap();
    let c = cfg(Phase::DpfnPretrainClean, 2);
    training::train(&mut plain, &training::clean_items(&train), &[], &c, &mut quiet()).unwrap();
    training::train(&mut with_head, &items, &[], &c, &mut quiet()).unwrap();
    for id in plain.store.ids() {
        let other = with_head.store.id(plain.store.name(id)).unwrap();
        assert_eq!(plain.store.value(id), with_head.store.value(other), "{}", plain.store.name(id));
    }
}

#[test]
fn identity_weight_trains_the_classifier() {
    let (train, _) = examples();
    let mut mc = ModelConfig::dpfn(ConditioningMode::Target, sep_cfg(), spk_cfg());
    let mut items = training::clean_items(&train);
    let names = training::assign_classes(&mut items);
    assert!(names.windows(2).all(|w| w[0] < w[1]));
    mc.identity_classes = Some(names.len());
    let mut a = Model::new(mc.clone(), 3).unwrap();
    let mut b = Model::new(mc, 3).unwrap();
    training::train(&mut a, &items, &[], &cfg(Phase::DpfnPretrainClean, 1), &mut quiet()).unwrap();
    let weighted = TrainConfig { identity_weight: 1.0, ..cfg(Phase::DpfnPretrainClean, 1) };
    training::train(&mut b, &items, &[], &weighted, &mut quiet()).unwrap();
    let cls = a.store.id("cls.weight").unwrap();
    assert_eq!(a.store.value(cls), &Model::new(a.config.clone(), 3).unwrap().store.value(cls).clone());
    assert_ne!(a.store.value(cls), b.store.value(cls));
}

#[test]
fn fine_tuning_uses_aligned_baseline_estimates() {
    let (train, _) = examples();
    let mut baseline = Model::new(ModelConfig::baseline(sep_cfg()), 0).unwrap();
    training::train(&mut baseline, &training::baseline_items(&train), &[], &cfg(Phase::BaselinePit, 2), &mut quiet()).unwrap();
    let (items, perms) = training::separated_items(&train, &baseline, Default::default()).unwrap();
    assert_eq!(items.len(), train.len());
    for p in &perms {
        let mut s = p.clone();
        s.sort();
        assert_eq!(s, vec![0, 1]);
    }
    let mut dpfn = Model::new(ModelConfig::dpfn(ConditioningMode::NonTarget, sep_cfg(), spk_cfg()), 0).unwrap();
    let r = training::train(&mut dpfn, &items, &[], &cfg(Phase::DpfnFinetuneSeparated, 2), &mut quiet()).unwrap();
    assert!(r.final_loss_db().is_finite());
}

#[test]
fn known_speaker_phase_trains_the_projection_only_with_the_separator() {
    let (train, _) = examples();
    let mut emb = HashMap::new();
    for ex in &train {
        for (k, id) in ex.speaker_ids.iter().enumerate() {
            emb.insert(id.clone(), vec![k as f64 + 0.5, id.len() as f64 * 0.1, -1.0, 0.25, 0.0]);
        }
    }
    let items = training::known_speaker_items(&train, &emb).unwrap();
    let mut mc = ModelConfig::dpfn(ConditioningMode::Both, sep_cfg(), spk_cfg());
    mc.external_dim = Some(5);
    let mut model = Model::new(mc.clone(), 5).unwrap();
    let fresh = Model::new(mc, 5).unwrap();
    training::train(&mut model, &items, &[], &cfg(Phase::KnownSpeaker, 1), &mut quiet()).unwrap();
    for id in model.store.ids() {
        let name = model.store.name(id);
        let moved = model.store.value(id) != fresh.store.value(id);
        if name.starts_with("spk.") {
            assert!(!moved, "{name} changed");
        } else if name.starts_with("xvec.") {
            assert!(moved, "{name} did not change");
        }
    }
    emb.clear();
    assert!(training::known_speaker_items(&train, &emb).is_err());
}

#[test]
fn phases_select_parameter_groups() {
    let mut mc = ModelConfig::dpfn(ConditioningMode::Target, sep_cfg(), spk_cfg());
    mc.external_dim = Some(4);
    let model = Model::new(mc, 0).unwrap();
    let names = |p: Phase| -> Vec<String> {
        training::phase_parameters(&model, p).into_iter().map(|id| model.store.name(id).to_string()).collect()
    };
    assert!(names(Phase::BaselinePit).iter().all(|n| n.starts_with("sep.")));
    assert!(names(Phase::DpfnPretrainClean).iter().any(|n| n.starts_with("spk.")));
    assert!(!names(Phase::DpfnPretrainClean).iter().any(|n| n.starts_with("xvec.")));
    assert!(names(Phase::KnownSpeaker).iter().any(|n| n.starts_with("xvec.")));
    assert!(!names(Phase::KnownSpeaker).iter().any(|n| n.starts_with("spk.")));
}
