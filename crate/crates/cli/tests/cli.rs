use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpfn_core::data::{Corpus, Split};
use dpfn_core::model::Model;
use dpfn_core::pipeline;
use dpfn_core::signal::{self, Waveform};
use dpfn_core::speaker::ExternalEmbedding;

const TINY: &str = r#"
seed = 5

[corpus]
duration_s = 0.5
train_mixtures = 2
dev_mixtures = 1
eval_mixtures = 1

[separator]
encoder_filters = 8
bottleneck = 4
chunk_size = 10
blocks = 2
hidden = 3

[speaker]
stacks = 1
blocks = 2
residual_channels = 4
out_channels = 4
filter_dim = 3

[train]
epochs = 2
validate_every = 1
"#;

fn dpfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpfn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dpfn(args);
    assert!(
        out.status.success(),
        "dpfn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    baseline: PathBuf,
    dpfn: PathBuf,
}

/// Tiny corpus, a baseline and a `both`-mode model fine-tuned on baseline estimates.
fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.toml");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    let baseline = root.join("baseline");
    ok(&["train-baseline", "--config", s(&config), "--data", s(&data), "--out", s(&baseline)]);
    let pre = root.join("pre");
    ok(&["train-dpfn", "--config", s(&config), "--data", s(&data), "--out", s(&pre), "--mode", "both"]);
    let dpfn_dir = root.join("dpfn");
    ok(&[
        "train-dpfn",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&dpfn_dir),
        "--mode",
        "both",
        "--phase",
        "finetune-separated",
        "--baseline-checkpoint",
        s(&baseline),
        "--checkpoint",
        s(&pre),
    ]);
    Setup {
        _dir: dir,
        root,
        config,
        data,
        baseline,
        dpfn: dpfn_dir,
    }
}

fn json_lines(stdout: &str) -> Vec<serde_json::Value> {
    stdout
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_default_config_writes_96_mixtures_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    let out = ok(&["gen-data", "--out", s(&a)]);
    assert!(out.contains("train: 64 mixtures"));
    ok(&["gen-data", "--out", s(&b)]);
    let corpus = Corpus::open(&a).unwrap();
    assert_eq!(corpus.records.len(), 96);
    assert_eq!(
        fs::read(a.join("manifest.jsonl")).unwrap(),
        fs::read(b.join("manifest.jsonl")).unwrap()
    );
    assert!(a.join(&corpus.split(Split::Eval)[0].mixture).exists());
}

#[test]
fn training_is_reproducible_and_logs_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, TINY).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["train-baseline", "--config", s(&config), "--data", s(&data), "--out", s(&out), "--epochs", "3"]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let log_a = fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    assert_eq!(log_a, fs::read_to_string(b.join("train_log.jsonl")).unwrap());
    let records = json_lines(&log_a);
    assert_eq!(records.len(), 3);
    assert_eq!(records[0]["phase"], "baseline-pit");
    assert!(records[2]["val_si_snr_db"].is_f64());
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let mut n = 0;
    for entry in fs::read_dir(a.join("params")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join("params").join(&name)).unwrap(),
            fs::read(b.join("params").join(&name)).unwrap()
        );
        n += 1;
    }
    assert!(n > 0);
}

#[test]
fn finetune_without_baseline_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, TINY).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    let out = dpfn(&[
        "train-dpfn",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("x")),
        "--mode",
        "target",
        "--phase",
        "finetune-separated",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]:"));
}

#[test]
fn unknown_mode_is_rejected() {
    let out = dpfn(&["train-dpfn", "--data", "x", "--out", "y", "--mode", "sideways"]);
    assert!(!out.status.success());
}

#[test]
fn cascade_commands_agree_and_repeat_exactly() {
    let st = setup();
    let corpus = Corpus::open(&st.data).unwrap();
    let rec = corpus.split(Split::Eval)[0].clone();
    let mix = st.data.join(&rec.mixture);
    let refs: Vec<PathBuf> = rec.sources.iter().map(|p| st.data.join(p)).collect();

    let sep = |out: &Path| {
        ok(&[
            "separate",
            "--config",
            s(&st.config),
            "--mixture",
            s(&mix),
            "--checkpoint",
            s(&st.dpfn),
            "--baseline-checkpoint",
            s(&st.baseline),
            "--reference",
            s(&refs[0]),
            "--reference",
            s(&refs[1]),
            "--out",
            s(out),
        ])
    };
    let (o1, o2) = (st.root.join("sep1"), st.root.join("sep2"));
    let stdout = sep(&o1);
    sep(&o2);
    let wavs: Vec<_> = fs::read_dir(&o1).unwrap().collect();
    assert_eq!(wavs.len(), 2);
    for f in ["s1.wav", "s2.wav"] {
        assert_eq!(fs::read(o1.join(f)).unwrap(), fs::read(o2.join(f)).unwrap());
    }
    let summary = json_lines(&stdout).pop().unwrap();

    let eval = ok(&[
        "evaluate",
        "--config",
        s(&st.config),
        "--data",
        s(&st.data),
        "--splits",
        "eval",
        "--checkpoint",
        s(&st.dpfn),
        "--baseline-checkpoint",
        s(&st.baseline),
    ]);
    let rows = json_lines(&eval);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["mode"], "both");
    assert_eq!(rows[1]["system"], "baseline");
    let a = summary["mean_si_snr_db"].as_f64().unwrap();
    let b = rows[0]["mean_si_snr_db"].as_f64().unwrap();
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    let again = ok(&[
        "evaluate",
        "--config",
        s(&st.config),
        "--data",
        s(&st.data),
        "--splits",
        "eval",
        "--checkpoint",
        s(&st.dpfn),
        "--baseline-checkpoint",
        s(&st.baseline),
    ]);
    assert_eq!(eval, again);
}

#[test]
fn embed_round_trips_through_separate() {
    let st = setup();
    let corpus = Corpus::open(&st.data).unwrap();
    let rec = corpus.split(Split::Dev)[0].clone();
    let mix_path = st.data.join(&rec.mixture);
    let mut emb_paths = Vec::new();
    for (k, src) in rec.sources.iter().enumerate() {
        let p = st.root.join(format!("emb/{k}.emb"));
        ok(&["embed", "--input", s(&st.data.join(src)), "--checkpoint", s(&st.dpfn), "--out", s(&p)]);
        let again = st.root.join(format!("emb/{k}-again.emb"));
        ok(&["embed", "--input", s(&st.data.join(src)), "--checkpoint", s(&st.dpfn), "--out", s(&again)]);
        assert_eq!(fs::read(&p).unwrap(), fs::read(&again).unwrap());
        emb_paths.push(p);
    }
    let model = Model::load(&st.dpfn).unwrap();
    let mut filters = Vec::new();
    for (p, src) in emb_paths.iter().zip(&rec.sources) {
        let from_file = ExternalEmbedding::read(p).unwrap();
        assert_eq!(from_file.values.len(), 3);
        let direct = model.embed(&signal::read_wav(&st.data.join(src)).unwrap()).unwrap();
        for (a, b) in from_file.values.iter().zip(&direct.v) {
            assert!((a - b).abs() < 1e-12);
        }
        filters.push(direct);
    }
    let out = st.root.join("sep_emb");
    ok(&[
        "separate",
        "--mixture",
        s(&mix_path),
        "--checkpoint",
        s(&st.dpfn),
        "--embedding",
        s(&emb_paths[0]),
        "--embedding",
        s(&emb_paths[1]),
        "--out",
        s(&out),
    ]);
    let mix = signal::read_wav(&mix_path).unwrap();
    let internal = pipeline::separate_with_filters(&model, &mix, filters, Vec::new()).unwrap();
    for (k, w) in internal.outputs.iter().enumerate() {
        let expect = st.root.join(format!("expect{k}.wav"));
        signal::write_wav(&expect, w).unwrap();
        assert_eq!(fs::read(out.join(format!("s{}.wav", k + 1))).unwrap(), fs::read(&expect).unwrap());
    }

    let short = st.root.join("short.wav");
    signal::write_wav(&short, &Waveform::new(vec![0.1; 500], 8000).unwrap()).unwrap();
    let res = dpfn(&["embed", "--input", s(&short), "--checkpoint", s(&st.dpfn), "--out", s(&st.root.join("x.emb"))]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error[input]:"));

    let hi_rate = st.root.join("16k.wav");
    signal::write_wav(&hi_rate, &Waveform::new(vec![0.1; 4000], 16000).unwrap()).unwrap();
    let res = dpfn(&[
        "separate",
        "--mixture",
        s(&hi_rate),
        "--checkpoint",
        s(&st.dpfn),
        "--baseline-checkpoint",
        s(&st.baseline),
        "--out",
        s(&st.root.join("y")),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error[invalid]:"));
}

#[test]
fn oracle_evaluation_hits_the_ceiling_and_empty_splits_fail() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, TINY.replace("dev_mixtures = 1", "dev_mixtures = 0")).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    let metrics = dir.path().join("m/metrics.jsonl");
    let out = ok(&["evaluate", "--data", s(&data), "--splits", "train,eval", "--oracle", "--out", s(&metrics)]);
    let rows = json_lines(&out);
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r["mean_si_snr_db"].as_f64().unwrap() >= 60.0);
        assert_eq!(r["system"], "oracle");
    }
    assert_eq!(rows[0]["split"], "train");
    assert_eq!(rows[1]["split"], "eval");
    assert_eq!(json_lines(&fs::read_to_string(&metrics).unwrap()), rows);
    assert!(out.contains("Oracle"));

    let res = dpfn(&["evaluate", "--data", s(&data), "--splits", "dev", "--oracle"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error[invalid]:"));
}
