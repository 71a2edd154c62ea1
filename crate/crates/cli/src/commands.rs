use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dpfn_core::data::{self, Corpus, MixtureExample, Split};
use dpfn_core::model::{Model, ModelConfig};
use dpfn_core::pipeline::{self, FilterInput, MetricsRecord, System};
use dpfn_core::separation::ConditioningMode;
use dpfn_core::signal::{self, Waveform};
use dpfn_core::speaker::ExternalEmbedding;
use dpfn_core::training::{self, EpochLog, Phase, TrainItem};
use dpfn_core::{Error, Result};

use crate::config::RunConfig;
use crate::{Common, TrainArgs};

pub const TRAIN_LOG: &str = "train_log.jsonl";

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn apply_train_args(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.optimizer.lr = lr;
    }
}

pub fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = run_config(common)?;
    let corpus = data::build_corpus(&cfg.corpus, out)?;
    println!("manifest: {}", out.join(data::MANIFEST_FILE).display());
    for split in Split::ALL {
        println!("{}: {} mixtures", split.as_str(), corpus.split(split).len());
    }
    Ok(())
}

fn load_train(corpus: &Corpus, limit: Option<usize>) -> Result<Vec<MixtureExample>> {
    let mut recs = corpus.split(Split::Train);
    if let Some(n) = limit {
        recs.truncate(n);
    }
    if recs.is_empty() {
        return Err(Error::Invalid("train split is empty".into()));
    }
    recs.into_iter().map(|r| corpus.load(r)).collect()
}

/// Runs the training loop, appending every epoch record to `<out>/train_log.jsonl` and stdout.
fn run_training(model: &mut Model, items: &[TrainItem], dev: &[TrainItem], cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut log_file = fs::File::create(out.join(TRAIN_LOG))?;
    let mut log = |e: &EpochLog| -> Result<()> {
        let line = serde_json::to_string(e)?;
        writeln!(log_file, "{line}")?;
        println!("{line}");
        Ok(())
    };
    training::train(model, items, dev, &cfg.train, &mut log)?;
    model.save(out)?;
    println!("checkpoint: {}", out.display());
    Ok(())
}

pub fn train_baseline(common: &Common, args: &TrainArgs) -> Result<()> {
    let mut cfg = run_config(common)?;
    apply_train_args(&mut cfg, args);
    cfg.train.phase = Phase::BaselinePit;
    let corpus = Corpus::open(&args.data)?;
    let train = load_train(&corpus, args.limit)?;
    let dev = corpus.load_split(Split::Dev)?;
    let mut mc = ModelConfig::baseline(cfg.separator.clone());
    mc.sample_rate = train[0].mixture.sample_rate();
    let mut model = Model::new(mc, cfg.train.seed)?;
    run_training(
        &mut model,
        &training::baseline_items(&train),
        &training::baseline_items(&dev),
        &cfg,
        &args.out,
    )
}

/// Reads every `*.emb` file in `dir`, keyed by its label (or file stem).
pub fn load_embedding_dir(dir: &Path) -> Result<HashMap<String, ExternalEmbedding>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "emb"));
    paths.sort();
    let mut map = HashMap::new();
    for p in paths {
        let e = ExternalEmbedding::read(&p)?;
        let key = match &e.label {
            Some(l) => l.clone(),
            None => p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
        };
        map.insert(key, e);
    }
    if map.is_empty() {
        return Err(Error::Invalid(format!("no .emb files in {}", dir.display())));
    }
    Ok(map)
}

#[allow(clippy::too_many_arguments)]
pub fn train_dpfn(
    common: &Common,
    args: &TrainArgs,
    mode: ConditioningMode,
    phase: Phase,
    baseline_ckpt: Option<&Path>,
    init_ckpt: Option<&Path>,
    embeddings: Option<&Path>,
) -> Result<()> {
    if !mode.is_conditioned() {
        return Err(Error::Config("mode `none` is trained with train-baseline".into()));
    }
    if phase == Phase::BaselinePit {
        return Err(Error::Config("phase baseline-pit is trained with train-baseline".into()));
    }
    let mut cfg = run_config(common)?;
    apply_train_args(&mut cfg, args);
    cfg.train.phase = phase;
    let opts = cfg.train.si_snr_options();
    let corpus = Corpus::open(&args.data)?;
    let train = load_train(&corpus, args.limit)?;
    let dev = corpus.load_split(Split::Dev)?;

    let mut mc = ModelConfig::dpfn(mode, cfg.separator.clone(), cfg.speaker.clone());
    mc.sample_rate = train[0].mixture.sample_rate();
    let (mut items, dev_items) = match phase {
        Phase::DpfnPretrainClean => (training::clean_items(&train), training::clean_items(&dev)),
        Phase::DpfnFinetuneSeparated => {
            let path = baseline_ckpt
                .ok_or_else(|| Error::Config("phase finetune-separated needs --baseline-checkpoint".into()))?;
            let baseline = Model::load(path)?;
            (
                training::separated_items(&train, &baseline, opts)?.0,
                training::separated_items(&dev, &baseline, opts)?.0,
            )
        }
        Phase::KnownSpeaker => {
            let dir = embeddings.ok_or_else(|| Error::Config("phase known-speaker needs --embeddings".into()))?;
            let map = load_embedding_dir(dir)?;
            let dims: Vec<usize> = map.values().map(|e| e.values.len()).collect();
            if dims.iter().any(|&d| d != dims[0]) {
                return Err(Error::Invalid("external embeddings differ in width".into()));
            }
            mc.external_dim = Some(dims[0]);
            let values: HashMap<String, Vec<f64>> = map.into_iter().map(|(k, e)| (k, e.values)).collect();
            (
                training::known_speaker_items(&train, &values)?,
                training::known_speaker_items(&dev, &values)?,
            )
        }
        Phase::BaselinePit => unreachable!("rejected above"),
    };
    if cfg.train.identity_weight > 0.0 {
        mc.identity_classes = Some(training::assign_classes(&mut items).len());
    }
    let mut model = Model::new(mc, cfg.train.seed)?;
    if let Some(p) = init_ckpt {
        let init = Model::load(p)?;
        let n = model.init_from(&init)?;
        println!("initialized {n} parameters from {}", p.display());
    }
    run_training(&mut model, &items, &dev_items, &cfg, &args.out)
}

fn file_label(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

pub fn separate(
    common: &Common,
    mixture: &Path,
    checkpoint: &Path,
    baseline_ckpt: Option<&Path>,
    embeddings: &[PathBuf],
    references: &[PathBuf],
    out: &Path,
) -> Result<()> {
    let cfg = run_config(common)?;
    let model = Model::load(checkpoint)?;
    let mix = signal::read_wav(mixture)?;
    model.check_sample_rate(&mix)?;
    let result = if embeddings.is_empty() {
        let path = baseline_ckpt.ok_or_else(|| Error::Config("separate needs --baseline-checkpoint or --embedding files".into()))?;
        let baseline = Model::load(path)?;
        pipeline::cascade(&model, &baseline, &mix)?
    } else {
        let filters = embeddings
            .iter()
            .map(|p| pipeline::filter_from_embedding(&model, &ExternalEmbedding::read(p)?))
            .collect::<Result<Vec<_>>>()?;
        pipeline::separate_with_filters(&model, &mix, filters, Vec::new())?
    };
    fs::create_dir_all(out)?;
    for (k, w) in result.outputs.iter().enumerate() {
        let p = out.join(format!("s{}.wav", k + 1));
        signal::write_wav(&p, w)?;
        println!("wrote {}", p.display());
    }
    if !references.is_empty() {
        let sources = references.iter().map(|p| signal::read_wav(p)).collect::<Result<Vec<Waveform>>>()?;
        let ex = MixtureExample {
            mixture: mix,
            sources,
            speaker_ids: references.iter().map(|p| file_label(p)).collect(),
            snr_db: f64::NAN,
        };
        let scores = pipeline::score(&ex, &result.outputs, cfg.train.si_snr_options())?;
        for s in &scores {
            println!("{}", serde_json::to_string(s)?);
        }
        let n = scores.len() as f64;
        let summary = serde_json::json!({
            "mean_si_snr_db": scores.iter().map(|s| s.si_snr_db).sum::<f64>() / n,
            "improvement_db": scores.iter().map(|s| s.improvement_db).sum::<f64>() / n,
        });
        println!("{summary}");
    }
    Ok(())
}

pub struct EvalArgs {
    pub data: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub baseline_checkpoint: Option<PathBuf>,
    pub splits: String,
    pub enrolled: bool,
    pub embeddings: Option<PathBuf>,
    pub oracle: bool,
    pub out: Option<PathBuf>,
}

pub fn evaluate(common: &Common, args: &EvalArgs) -> Result<()> {
    let cfg = run_config(common)?;
    let opts = cfg.train.si_snr_options();
    let corpus = Corpus::open(&args.data)?;
    let splits = args
        .splits
        .split(',')
        .map(|s| s.trim().parse::<Split>())
        .collect::<Result<Vec<_>>>()?;
    let dpfn = args.checkpoint.as_deref().map(Model::load).transpose()?;
    let baseline = args.baseline_checkpoint.as_deref().map(Model::load).transpose()?;
    let external = args.embeddings.as_deref().map(load_embedding_dir).transpose()?;
    if dpfn.is_none() && baseline.is_none() && !args.oracle {
        return Err(Error::Config("evaluate needs --checkpoint, --baseline-checkpoint or --oracle".into()));
    }
    let filters = match (&dpfn, &external, args.enrolled, &baseline) {
        (None, ..) => None,
        (Some(_), Some(map), _, _) => Some(FilterInput::External(map)),
        (Some(_), None, true, _) => Some(FilterInput::References),
        (Some(_), None, false, Some(b)) => Some(FilterInput::Baseline(b)),
        (Some(_), None, false, None) => {
            return Err(Error::Config(
                "a conditioned model needs --baseline-checkpoint, --enrolled or --embeddings".into(),
            ))
        }
    };
    let mut records: Vec<MetricsRecord> = Vec::new();
    for split in splits {
        let examples = corpus.load_split(split)?;
        if let (Some(model), Some(f)) = (&dpfn, filters) {
            records.push(pipeline::evaluate(&examples, split.as_str(), System::Dpfn { model, filters: f }, opts)?);
        }
        if let Some(b) = &baseline {
            records.push(pipeline::evaluate(&examples, split.as_str(), System::Baseline(b), opts)?);
        }
        if args.oracle {
            records.push(pipeline::evaluate(&examples, split.as_str(), System::Oracle, opts)?);
        }
    }
    let lines = records
        .iter()
        .map(serde_json::to_string)
        .collect::<serde_json::Result<Vec<_>>>()?;
    for l in &lines {
        println!("{l}");
    }
    if let Some(p) = &args.out {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, lines.join("\n") + "\n")?;
    }
    print!("\n{}", pipeline::format_table(&records));
    Ok(())
}

pub fn embed(_common: &Common, input: &Path, checkpoint: &Path, out: &Path, label: Option<String>) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let audio = signal::read_wav(input)?;
    let filter = model.embed(&audio)?;
    let e = ExternalEmbedding {
        label,
        values: filter.v,
    };
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    e.write(out)?;
    println!("wrote {} ({} values)", out.display(), e.values.len());
    Ok(())
}
