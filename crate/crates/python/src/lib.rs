//! Python module `dpfn`: corpus generation, training, separation and scoring.
//!
//! Audio crosses the boundary as flat lists of floats (any float sequence,
//! numpy arrays included). Configs are JSON strings with the same fields as
//! the Rust structs; omitted fields keep their defaults.

use std::path::PathBuf;

use dpfn_core::data::{self, Corpus, CorpusConfig, Split};
use dpfn_core::loss::{self, SiSnrOptions};
use dpfn_core::model::{self as core_model, ModelConfig, ModelKind};
use dpfn_core::pipeline::{self, FilterInput, System};
use dpfn_core::separation::{ConditioningMode, SeparatorConfig};
use dpfn_core::signal::{self, Waveform};
use dpfn_core::speaker::{ExternalEmbedding, SpeakerFilter, SpeakerNetConfig};
use dpfn_core::training::{self, EpochLog, Phase, TrainConfig};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: dpfn_core::Error) -> PyErr {
    let msg = format!("{}: {e}", e.class());
    match e.class() {
        "io" => PyOSError::new_err(msg),
        "numeric" | "graph" => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>, what: &str) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(format!("{what} config: {e}"))),
    }
}

fn wave(samples: Vec<f64>, sample_rate: u32) -> PyResult<Waveform> {
    Waveform::new(samples, sample_rate).map_err(err)
}

fn split(name: &str) -> PyResult<Split> {
    name.parse().map_err(err)
}

/// A baseline or speaker-conditioned separator with its parameters.
#[pyclass(module = "dpfn")]
struct Model {
    inner: core_model::Model,
}

#[pymethods]
impl Model {
    /// Unconditioned two-output separator.
    #[staticmethod]
    #[pyo3(signature = (seed=0, separator=None))]
    fn baseline(seed: u64, separator: Option<&str>) -> PyResult<Self> {
        let sep: SeparatorConfig = parse_json(separator, "separator")?;
        let inner = core_model::Model::new(ModelConfig::baseline(sep), seed).map_err(err)?;
        Ok(Self { inner })
    }

    /// Speaker-conditioned separator; `mode` is target, non-target or both.
    #[staticmethod]
    #[pyo3(signature = (mode, seed=0, separator=None, speaker=None))]
    fn dpfn(mode: &str, seed: u64, separator: Option<&str>, speaker: Option<&str>) -> PyResult<Self> {
        let mode: ConditioningMode = mode.parse().map_err(err)?;
        let sep: SeparatorConfig = parse_json(separator, "separator")?;
        let spk: SpeakerNetConfig = parse_json(speaker, "speaker")?;
        let inner = core_model::Model::new(ModelConfig::dpfn(mode, sep, spk), seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core_model::Model::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode().to_string()
    }

    #[getter]
    fn is_baseline(&self) -> bool {
        self.inner.config.kind == ModelKind::Baseline
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.config.sample_rate
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        let s = &self.inner.store;
        s.ids().map(|id| s.value(id).len()).sum()
    }

    /// Model configuration as a JSON string.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Speaker filter of a clean recording.
    fn embed(&self, audio: Vec<f64>) -> PyResult<Vec<f64>> {
        let w = wave(audio, self.inner.config.sample_rate)?;
        Ok(self.inner.embed(&w).map_err(err)?.v)
    }

    /// Separates `mixture`. Conditioned models need one filter per speaker.
    #[pyo3(signature = (mixture, filters=None))]
    fn separate(&self, py: Python<'_>, mixture: Vec<f64>, filters: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let w = wave(mixture, self.inner.config.sample_rate)?;
        let filters: Vec<SpeakerFilter> = filters
            .unwrap_or_default()
            .into_iter()
            .map(|v| {
                pipeline::filter_from_embedding(&self.inner, &ExternalEmbedding { label: None, values: v })
            })
            .collect::<dpfn_core::Result<_>>()
            .map_err(err)?;
        let m = &self.inner;
        let out = py
            .detach(|| m.separator.separate(&m.store, &w, &filters))
            .map_err(err)?;
        Ok(out.waveforms.into_iter().map(Waveform::into_samples).collect())
    }

    /// Trains on the train split of a corpus directory and returns one
    /// `(epoch, train_loss_db, val_si_snr_db)` tuple per epoch. Conditioned
    /// models use the clean references for their filters unless `baseline`
    /// is given, in which case they train on its aligned estimates.
    #[pyo3(signature = (corpus_dir, epochs=10, lr=1e-3, seed=0, limit=None, batch_size=1, crop_s=None, baseline=None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        corpus_dir: PathBuf,
        epochs: usize,
        lr: f64,
        seed: u64,
        limit: Option<usize>,
        batch_size: usize,
        crop_s: Option<f64>,
        baseline: Option<PyRef<'_, Model>>,
    ) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
        let corpus = Corpus::open(&corpus_dir).map_err(err)?;
        let mut recs = corpus.split(Split::Train);
        if let Some(n) = limit {
            recs.truncate(n);
        }
        let train = recs.into_iter().map(|r| corpus.load(r)).collect::<dpfn_core::Result<Vec<_>>>().map_err(err)?;
        let dev = corpus.load_split(Split::Dev).map_err(err)?;
        let mut cfg = TrainConfig {
            epochs,
            seed,
            batch_size,
            crop_s,
            ..TrainConfig::default()
        };
        cfg.optimizer.lr = lr;
        let opts = cfg.si_snr_options();
        let (items, dev_items) = if self.inner.config.kind == ModelKind::Baseline {
            cfg.phase = Phase::BaselinePit;
            (training::baseline_items(&train), training::baseline_items(&dev))
        } else if let Some(b) = &baseline {
            cfg.phase = Phase::DpfnFinetuneSeparated;
            (
                training::separated_items(&train, &b.inner, opts).map_err(err)?.0,
                training::separated_items(&dev, &b.inner, opts).map_err(err)?.0,
            )
        } else {
            cfg.phase = Phase::DpfnPretrainClean;
            (training::clean_items(&train), training::clean_items(&dev))
        };
        let model = &mut self.inner;
        let report = py
            .detach(|| training::train(model, &items, &dev_items, &cfg, &mut |_: &EpochLog| Ok(())))
            .map_err(err)?;
        Ok(report
            .history
            .iter()
            .map(|h| (h.epoch, h.train_loss_db, h.val_si_snr_db))
            .collect())
    }

    /// Scores the model on one corpus split. Conditioned models take their
    /// filters from `baseline` estimates, or from the clean references when
    /// `enrolled` is true.
    #[pyo3(signature = (corpus_dir, split_name="eval", baseline=None, enrolled=false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        corpus_dir: PathBuf,
        split_name: &str,
        baseline: Option<PyRef<'_, Model>>,
        enrolled: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let corpus = Corpus::open(&corpus_dir).map_err(err)?;
        let examples = corpus.load_split(split(split_name)?).map_err(err)?;
        let system = if self.inner.config.kind == ModelKind::Baseline {
            System::Baseline(&self.inner)
        } else {
            let filters = match (&baseline, enrolled) {
                (_, true) => FilterInput::References,
                (Some(b), false) => FilterInput::Baseline(&b.inner),
                (None, false) => {
                    return Err(PyValueError::new_err("a conditioned model needs `baseline` or enrolled=True"))
                }
            };
            System::Dpfn {
                model: &self.inner,
                filters,
            }
        };
        let rec = pipeline::evaluate(&examples, split_name, system, SiSnrOptions::default()).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("split", rec.split)?;
        d.set_item("mode", rec.mode.to_string())?;
        d.set_item("system", rec.system)?;
        d.set_item("mean_si_snr_db", rec.mean_si_snr_db)?;
        d.set_item("improvement_db", rec.improvement_db)?;
        d.set_item("count", rec.count)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(mode={}, parameters={})",
            self.inner.mode(),
            self.num_parameters()
        )
    }
}

/// Baseline first, then the conditioned model on filters from its estimates.
#[pyfunction]
fn cascade(py: Python<'_>, dpfn: PyRef<'_, Model>, baseline: PyRef<'_, Model>, mixture: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let w = wave(mixture, dpfn.inner.config.sample_rate)?;
    let (d, b) = (&dpfn.inner, &baseline.inner);
    let out = py.detach(|| pipeline::cascade(d, b, &w)).map_err(err)?;
    Ok(out.outputs.into_iter().map(Waveform::into_samples).collect())
}

#[pyfunction]
#[pyo3(signature = (estimate, reference, eps=loss::DEFAULT_EPS, zero_mean=false))]
fn si_snr(estimate: Vec<f64>, reference: Vec<f64>, eps: f64, zero_mean: bool) -> PyResult<f64> {
    loss::si_snr(&estimate, &reference, SiSnrOptions { eps, zero_mean }).map_err(err)
}

/// Assignment maximizing total SI-SNR; entry `i` is the reference matched to estimate `i`.
#[pyfunction]
fn best_alignment(estimates: Vec<Vec<f64>>, references: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    let e: Vec<&[f64]> = estimates.iter().map(Vec::as_slice).collect();
    let r: Vec<&[f64]> = references.iter().map(Vec::as_slice).collect();
    loss::best_alignment(&e, &r, SiSnrOptions::default()).map_err(err)
}

/// Returns `(samples, sample_rate)` of a mono 16-bit PCM file.
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f64>, u32)> {
    let w = signal::read_wav(&path).map_err(err)?;
    let sr = w.sample_rate();
    Ok((w.into_samples(), sr))
}

#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate=signal::SAMPLE_RATE))]
fn write_wav(path: PathBuf, samples: Vec<f64>, sample_rate: u32) -> PyResult<()> {
    signal::write_wav(&path, &wave(samples, sample_rate)?).map_err(err)
}

/// Magnitude spectrogram as `[frame][bin]` with the default 160 ms Hann window and 80 ms hop.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate=signal::SAMPLE_RATE))]
fn stft_mag(samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
    let spec = signal::stft_mag(&wave(samples, sample_rate)?, signal::STFT_FRAME, signal::STFT_HOP).map_err(err)?;
    Ok((0..spec.frames())
        .map(|t| (0..spec.bins()).map(|k| spec.get(k, t)).collect())
        .collect())
}

/// Writes a synthetic corpus and returns the mixture count of each split.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn generate_corpus<'py>(py: Python<'py>, out_dir: PathBuf, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg: CorpusConfig = parse_json(config, "corpus")?;
    let corpus = py.detach(|| data::build_corpus(&cfg, &out_dir)).map_err(err)?;
    let d = PyDict::new(py);
    for s in Split::ALL {
        d.set_item(s.as_str(), corpus.split(s).len())?;
    }
    Ok(d)
}

#[pymodule]
fn dpfn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(cascade, m)?)?;
    m.add_function(wrap_pyfunction!(si_snr, m)?)?;
    m.add_function(wrap_pyfunction!(best_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(stft_mag, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add("SAMPLE_RATE", signal::SAMPLE_RATE)?;
    Ok(())
}
