//! Inference cascade and split-level evaluation.
//!
//! A mixture is first split by the baseline; each initial estimate goes
//! through the speaker module and the resulting filters condition the
//! second-stage separator.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MixtureExample;
use crate::error::{Error, Result};
use crate::loss::{self, SiSnrOptions};
use crate::model::{Model, ModelKind};
use crate::separation::ConditioningMode;
use crate::signal::Waveform;
use crate::speaker::{ExternalEmbedding, FilterSource, SpeakerFilter};

/// Filters for the conditioned model, from an external embedding file's values.
/// Uses the projection when the model has one; otherwise the values are taken
/// as the filter itself and must already have the filter width.
pub fn filter_from_embedding(model: &Model, e: &ExternalEmbedding) -> Result<SpeakerFilter> {
    if model.projection.is_some() {
        return model.project_external(e);
    }
    let d = model.config.separator.filter_dim;
    if e.values.len() != d {
        return Err(Error::invalid(format!(
            "embedding has {} values but the model expects filters of width {d}",
            e.values.len()
        )));
    }
    Ok(SpeakerFilter {
        v: e.values.clone(),
        source: FilterSource::ExternalEmbedding,
        speaker_label: e.label.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    /// Baseline estimates (empty when the filters came from elsewhere).
    pub initial: Vec<Waveform>,
    pub filters: Vec<SpeakerFilter>,
    pub outputs: Vec<Waveform>,
}

/// Runs the baseline and embeds each of its estimates.
pub fn filters_from_baseline(dpfn: &Model, baseline: &Model, mixture: &Waveform) -> Result<(Vec<Waveform>, Vec<SpeakerFilter>)> {
    if baseline.config.kind != ModelKind::Baseline {
        return Err(Error::invalid("the first stage must be a baseline (mode `none`) checkpoint"));
    }
    baseline.check_sample_rate(mixture)?;
    let initial = baseline.separator.separate(&baseline.store, mixture, &[])?.waveforms;
    let filters = initial.iter().map(|w| dpfn.embed(w)).collect::<Result<Vec<_>>>()?;
    Ok((initial, filters))
}

/// Second-stage separation with the given filters.
pub fn separate_with_filters(dpfn: &Model, mixture: &Waveform, filters: Vec<SpeakerFilter>, initial: Vec<Waveform>) -> Result<CascadeOutput> {
    dpfn.check_sample_rate(mixture)?;
    let outputs = dpfn.separator.separate(&dpfn.store, mixture, &filters)?.waveforms;
    Ok(CascadeOutput {
        initial,
        filters,
        outputs,
    })
}

/// Full cascade: baseline, speaker module, conditioned separator.
pub fn cascade(dpfn: &Model, baseline: &Model, mixture: &Waveform) -> Result<CascadeOutput> {
    let (initial, filters) = filters_from_baseline(dpfn, baseline, mixture)?;
    separate_with_filters(dpfn, mixture, filters, initial)
}

/// Where the conditioned model's filters come from during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum FilterInput<'a> {
    /// Embeddings of the baseline's estimates (the deployed cascade).
    Baseline(&'a Model),
    /// Embeddings of the clean references (enrollment audio of each speaker).
    References,
    /// External embeddings keyed by speaker id.
    External(&'a HashMap<String, ExternalEmbedding>),
}

/// The system under evaluation.
#[derive(Debug, Clone, Copy)]
pub enum System<'a> {
    Baseline(&'a Model),
    Dpfn { model: &'a Model, filters: FilterInput<'a> },
    /// References scored against themselves.
    Oracle,
}

impl System<'_> {
    pub fn mode(&self) -> ConditioningMode {
        match self {
            System::Baseline(_) | System::Oracle => ConditioningMode::None,
            System::Dpfn { model, .. } => model.mode(),
        }
    }

    /// Estimates for one mixture.
    pub fn estimates(&self, ex: &MixtureExample) -> Result<Vec<Waveform>> {
        match *self {
            System::Oracle => Ok(ex.sources.clone()),
            System::Baseline(m) => {
                m.check_sample_rate(&ex.mixture)?;
                Ok(m.separator.separate(&m.store, &ex.mixture, &[])?.waveforms)
            }
            System::Dpfn { model, filters } => {
                let out = match filters {
                    FilterInput::Baseline(b) => cascade(model, b, &ex.mixture)?,
                    FilterInput::References => {
                        let f = ex.sources.iter().map(|s| model.embed(s)).collect::<Result<Vec<_>>>()?;
                        separate_with_filters(model, &ex.mixture, f, Vec::new())?
                    }
                    FilterInput::External(map) => {
                        let f = ex
                            .speaker_ids
                            .iter()
                            .map(|id| {
                                let e = map
                                    .get(id)
                                    .ok_or_else(|| Error::invalid(format!("no external embedding for speaker `{id}`")))?;
                                filter_from_embedding(model, e)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        separate_with_filters(model, &ex.mixture, f, Vec::new())?
                    }
                };
                Ok(out.outputs)
            }
        }
    }
}

/// Aligned score of one estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScore {
    pub estimate_index: usize,
    pub reference_index: usize,
    pub speaker: Option<String>,
    pub si_snr_db: f64,
    /// Gain over using the mixture itself as the estimate.
    pub improvement_db: f64,
}

/// Aligns `estimates` to the references and scores each pair.
pub fn score(ex: &MixtureExample, estimates: &[Waveform], opts: SiSnrOptions) -> Result<Vec<SourceScore>> {
    let pairs = loss::align_outputs(estimates, &ex.sources, Some(&ex.speaker_ids), opts)?;
    pairs
        .into_iter()
        .map(|p| {
            let base = loss::si_snr_waveforms(&ex.mixture, &p.reference, opts)?;
            Ok(SourceScore {
                estimate_index: p.estimate_index,
                reference_index: p.reference_index,
                speaker: p.speaker_label,
                si_snr_db: p.si_snr_db,
                improvement_db: p.si_snr_db - base,
            })
        })
        .collect()
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split: String,
    pub mode: ConditioningMode,
    pub system: String,
    pub mean_si_snr_db: f64,
    pub improvement_db: f64,
    /// Number of mixtures.
    pub count: usize,
}

/// Mean aligned SI-SNR and improvement of `system` over `examples`.
pub fn evaluate(examples: &[MixtureExample], split: &str, system: System<'_>, opts: SiSnrOptions) -> Result<MetricsRecord> {
    if examples.is_empty() {
        return Err(Error::invalid(format!("split `{split}` has no mixtures")));
    }
    let per: Vec<Result<Vec<SourceScore>>> = examples
        .par_iter()
        .map(|ex| score(ex, &system.estimates(ex)?, opts))
        .collect();
    let (mut si, mut imp, mut n) = (0.0, 0.0, 0usize);
    for r in per {
        for s in r? {
            si += s.si_snr_db;
            imp += s.improvement_db;
            n += 1;
        }
    }
    let name = match system {
        System::Baseline(_) => "baseline",
        System::Oracle => "oracle",
        System::Dpfn { filters: FilterInput::Baseline(_), .. } => "dpfn-cascade",
        System::Dpfn { filters: FilterInput::References, .. } => "dpfn-enrolled",
        System::Dpfn { filters: FilterInput::External(_), .. } => "dpfn-external",
    };
    Ok(MetricsRecord {
        split: split.to_string(),
        mode: system.mode(),
        system: name.to_string(),
        mean_si_snr_db: si / n as f64,
        improvement_db: imp / n as f64,
        count: examples.len(),
    })
}

fn row_label(r: &MetricsRecord) -> &'static str {
    match r.mode {
        ConditioningMode::Target => "Target",
        ConditioningMode::NonTarget => "Non-Target",
        ConditioningMode::Both => "Both",
        ConditioningMode::None if r.system == "oracle" => "Oracle",
        ConditioningMode::None => "Baseline",
    }
}

/// Human-readable table of metrics rows.
pub fn format_table(records: &[MetricsRecord]) -> String {
    let mut out = format!(
        "{:<6} {:<11} {:<14} {:>12} {:>12} {:>6}\n",
        "split", "row", "system", "SI-SNR dB", "SI-SNRi dB", "count"
    );
    for r in records {
        out.push_str(&format!(
            "{:<6} {:<11} {:<14} {:>12.3} {:>12.3} {:>6}\n",
            r.split,
            row_label(r),
            r.system,
            r.mean_si_snr_db,
            r.improvement_db,
            r.count
        ));
    }
    out
}
