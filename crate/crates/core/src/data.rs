//! Synthetic two-speaker corpus.
//!
//! Every synthetic speaker owns a frequency band. An utterance is a sum of
//! harmonics of a slowly gliding f0; each harmonic is weighted by the
//! speaker's spectral envelope, which vanishes outside the band, and the
//! whole signal is gated by syllable-like on/off envelopes. Speakers therefore
//! differ in spectral placement, pitch and rhythm, and a brick-wall band-pass
//! on the declared band recovers a speaker from a mixture.
//!
//! On disk a corpus is a directory of 16-bit WAV files plus `manifest.jsonl`
//! (one record per mixture) and `speakers.json`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{self, Waveform};

pub const PEAK: f64 = 0.9;
pub const MIN_DURATION_S: f64 = 0.25;
const LOW_EDGE_HZ: f64 = 100.0;
const HIGH_EDGE_HZ: f64 = 3900.0;
const MAX_F0_HZ: f64 = 250.0;
const MIN_F0_HZ: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub id: String,
    pub f0_range: (f64, f64),
    /// Declared band in Hz; the spectral envelope is zero outside it.
    pub band: (f64, f64),
    /// Envelope control points spread evenly across the band.
    pub harmonic_profile: Vec<f64>,
    /// Syllables per second.
    pub am_rate_range: (f64, f64),
    pub seed: u64,
}

impl SyntheticSpeaker {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyq = sample_rate as f64 / 2.0;
        let (lo, hi) = self.band;
        let (f_lo, f_hi) = self.f0_range;
        if !(0.0 < lo && lo < hi && hi < nyq) {
            return Err(Error::invalid(format!("speaker {}: band {:?} outside (0, {nyq})", self.id, self.band)));
        }
        if !(0.0 < f_lo && f_lo <= f_hi && f_hi < nyq) {
            return Err(Error::invalid(format!("speaker {}: bad f0 range {:?}", self.id, self.f0_range)));
        }
        if self.harmonic_profile.is_empty() || self.harmonic_profile.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid(format!("speaker {}: profile must be positive", self.id)));
        }
        if !(0.0 < self.am_rate_range.0 && self.am_rate_range.0 <= self.am_rate_range.1) {
            return Err(Error::invalid(format!("speaker {}: bad modulation rates", self.id)));
        }
        Ok(())
    }

    /// Spectral envelope at frequency `f`: profile interpolation times a
    /// raised-cosine taper over the outer 15% of the band on each side.
    pub fn envelope(&self, f: f64) -> f64 {
        let (lo, hi) = self.band;
        if f <= lo || f >= hi {
            return 0.0;
        }
        let u = (f - lo) / (hi - lo);
        let taper_w = 0.15;
        let taper = if u < taper_w {
            0.5 * (1.0 - (PI * u / taper_w).cos())
        } else if u > 1.0 - taper_w {
            0.5 * (1.0 - (PI * (1.0 - u) / taper_w).cos())
        } else {
            1.0
        };
        let p = &self.harmonic_profile;
        let shape = if p.len() == 1 {
            p[0]
        } else {
            let pos = u * (p.len() - 1) as f64;
            let i = (pos.floor() as usize).min(p.len() - 2);
            let frac = pos - i as f64;
            p[i] * (1.0 - frac) + p[i + 1] * frac
        };
        taper * shape
    }
}

/// `count` speakers with disjoint, equal-width bands tiling 100..3900 Hz.
pub fn speaker_bank(count: usize, seed: u64) -> Result<Vec<SyntheticSpeaker>> {
    if count == 0 {
        return Err(Error::invalid("speaker bank needs at least one speaker"));
    }
    let width = (HIGH_EDGE_HZ - LOW_EDGE_HZ) / count as f64;
    // at least one harmonic must always fall inside the band
    let f0_cap = MAX_F0_HZ.min(width * 0.9);
    if f0_cap < MIN_F0_HZ {
        return Err(Error::invalid(format!("{count} speakers leave bands narrower than the lowest f0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let lo = LOW_EDGE_HZ + width * i as f64;
            let f0_lo = rng.random_range(MIN_F0_HZ..(MIN_F0_HZ + f0_cap) / 2.0);
            let f0_hi = (f0_lo + rng.random_range(20.0..60.0)).min(f0_cap);
            let profile = (0..3).map(|_| rng.random_range(0.4..1.0)).collect();
            let rate_lo = rng.random_range(2.5..4.5);
            let spk = SyntheticSpeaker {
                id: format!("spk{i:02}"),
                f0_range: (f0_lo, f0_hi),
                band: (lo, lo + width),
                harmonic_profile: profile,
                am_rate_range: (rate_lo, rate_lo + rng.random_range(0.5..2.0)),
                seed: rng.random(),
            };
            Ok(spk)
        })
        .collect()
}

fn utterance_rng(speaker: &SyntheticSpeaker, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ speaker.seed)
}

/// Syllable gating: raised-cosine bursts separated by short pauses.
fn syllable_envelope(rng: &mut ChaCha8Rng, n: usize, sr: f64, rates: (f64, f64)) -> Vec<f64> {
    let mut env = vec![0.0; n];
    let ramp = (0.02 * sr) as usize;
    let mut pos = (rng.random_range(0.0..0.05) * sr) as usize;
    while pos < n {
        let rate = rng.random_range(rates.0..=rates.1);
        let len = ((0.7 / rate) * sr) as usize;
        let gap = ((0.3 / rate) * sr * rng.random_range(0.5..1.5)) as usize;
        let gain = rng.random_range(0.6..1.0);
        for k in 0..len.min(n - pos) {
            let edge = k.min(len - 1 - k);
            let a = if edge < ramp {
                0.5 * (1.0 - (PI * edge as f64 / ramp as f64).cos())
            } else {
                1.0
            };
            env[pos + k] = gain * a;
        }
        pos += len + gap;
    }
    env
}

/// One utterance of `speaker`, deterministic in `(speaker, seed)`, peak-normalized to 0.9.
pub fn synth_utterance(speaker: &SyntheticSpeaker, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if !(duration_s >= MIN_DURATION_S) {
        return Err(Error::invalid(format!(
            "utterance duration {duration_s} s is below the {MIN_DURATION_S} s minimum"
        )));
    }
    speaker.validate(sample_rate)?;
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let mut rng = utterance_rng(speaker, seed);

    // f0 glides linearly between random knots
    let knots: Vec<f64> = (0..5)
        .map(|_| rng.random_range(speaker.f0_range.0..=speaker.f0_range.1))
        .collect();
    let f0_at = |t: usize| {
        let pos = t as f64 / n.max(2) as f64 * (knots.len() - 1) as f64;
        let i = (pos.floor() as usize).min(knots.len() - 2);
        let frac = pos - i as f64;
        knots[i] * (1.0 - frac) + knots[i + 1] * frac
    };
    let k_lo = (speaker.band.0 / speaker.f0_range.1).floor().max(1.0) as usize;
    let k_hi = (speaker.band.1 / speaker.f0_range.0).ceil() as usize;
    let phases0: Vec<f64> = (k_lo..=k_hi).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut out = vec![0.0; n];
    let mut base_phase = 0.0;
    for (t, slot) in out.iter_mut().enumerate() {
        let f0 = f0_at(t);
        let mut v = 0.0;
        for (j, k) in (k_lo..=k_hi).enumerate() {
            let f = k as f64 * f0;
            let a = speaker.envelope(f);
            if a > 0.0 {
                v += a * (k as f64 * base_phase + phases0[j]).sin();
            }
        }
        *slot = v;
        base_phase += 2.0 * PI * f0 / sr;
        if base_phase > 2.0 * PI {
            base_phase -= 2.0 * PI;
        }
    }
    let env = syllable_envelope(&mut rng, n, sr, speaker.am_rate_range);
    out.iter_mut().zip(&env).for_each(|(v, e)| *v *= e);
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::invalid(format!("speaker {} produced a silent utterance", speaker.id)));
    }
    out.iter_mut().for_each(|v| *v *= PEAK / peak);
    Waveform::new(out, sample_rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub mixture: Waveform,
    /// Sources as mixed (the second one already rescaled).
    pub sources: Vec<Waveform>,
    pub speaker_ids: Vec<String>,
    pub snr_db: f64,
}

impl MixtureExample {
    /// Scales sources and mixture by one factor so the mixture peak is at most `peak`.
    pub fn limit_peak(&mut self, peak: f64) -> Result<()> {
        let cur = self.mixture.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if cur <= peak {
            return Ok(());
        }
        let c = peak / cur;
        let sr = self.mixture.sample_rate();
        let scaled: Vec<Vec<f64>> = self
            .sources
            .iter()
            .map(|s| s.samples().iter().map(|v| v * c).collect())
            .collect();
        self.mixture = Waveform::new(sum_sources(&scaled), sr)?;
        self.sources = scaled
            .into_iter()
            .map(|s| Waveform::new(s, sr))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

fn sum_sources(sources: &[Vec<f64>]) -> Vec<f64> {
    let mut out = sources[0].clone();
    for s in &sources[1..] {
        out.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    out
}

/// Rescales `s2` so that `10 log10(P(s1) / P(s2')) == snr_db` and mixes.
pub fn mix_at_snr(s1: &Waveform, s2: &Waveform, snr_db: f64) -> Result<MixtureExample> {
    if s1.len() != s2.len() {
        return Err(Error::Shape {
            op: "mix_at_snr",
            lhs: vec![s1.len()],
            rhs: vec![s2.len()],
        });
    }
    if s1.sample_rate() != s2.sample_rate() {
        return Err(Error::invalid("sources have different sample rates"));
    }
    let (p1, p2) = (s1.power(), s2.power());
    if p1 == 0.0 || p2 == 0.0 {
        return Err(Error::invalid("cannot mix a zero-power source"));
    }
    let scale = (p1 / (p2 * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = s2.samples().iter().map(|v| v * scale).collect();
    let mixture = sum_sources(&[s1.samples().to_vec(), scaled.clone()]);
    Ok(MixtureExample {
        mixture: Waveform::new(mixture, s1.sample_rate())?,
        sources: vec![s1.clone(), Waveform::new(scaled, s1.sample_rate())?],
        speaker_ids: Vec::new(),
        snr_db,
    })
}

/// Keeps only the DFT bins inside `[lo_hz, hi_hz]` (full-length brick-wall filter).
pub fn band_pass(w: &Waveform, lo_hz: f64, hi_hz: f64) -> Result<Waveform> {
    let n = w.len();
    let sr = w.sample_rate() as f64;
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = w.samples().iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < lo_hz || f > hi_hz {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    Waveform::new(buf.iter().map(|c| c.re / n as f64).collect(), w.sample_rate())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    /// Speakers held out for the eval split; train and dev share the rest.
    pub eval_speakers: usize,
    pub duration_s: f64,
    pub train_mixtures: usize,
    pub dev_mixtures: usize,
    pub eval_mixtures: usize,
    pub snr_range_db: (f64, f64),
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_speakers: 12,
            eval_speakers: 4,
            duration_s: 1.0,
            train_mixtures: 64,
            dev_mixtures: 16,
            eval_mixtures: 16,
            snr_range_db: (0.0, 5.0),
            sample_rate: signal::SAMPLE_RATE,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_mixtures,
            Split::Dev => self.dev_mixtures,
            Split::Eval => self.eval_mixtures,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 4 {
            return Err(Error::Config(format!(
                "a disjoint eval split needs at least 4 speakers, got {}",
                self.num_speakers
            )));
        }
        if self.eval_speakers < 2 || self.num_speakers - self.eval_speakers < 2 {
            return Err(Error::Config(format!(
                "need >= 2 eval speakers and >= 2 train speakers, got {} of {}",
                self.eval_speakers, self.num_speakers
            )));
        }
        if self.duration_s < MIN_DURATION_S {
            return Err(Error::Config(format!("duration_s must be >= {MIN_DURATION_S}")));
        }
        let (lo, hi) = self.snr_range_db;
        if !(lo <= hi) {
            return Err(Error::Config("snr_range_db must be ordered".into()));
        }
        Ok(())
    }

    /// Indices of held-out speakers, spread between the training bands.
    pub fn eval_speaker_indices(&self) -> Vec<usize> {
        let step = self.num_speakers as f64 / self.eval_speakers as f64;
        (0..self.eval_speakers)
            .map(|j| ((j as f64 + 0.5) * step).floor() as usize)
            .collect()
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub mixture: String,
    pub sources: Vec<String>,
    pub speakers: Vec<String>,
    pub snr_db: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub speakers: Vec<SyntheticSpeaker>,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPEAKERS_FILE: &str = "speakers.json";

struct PlannedMixture {
    record: ManifestRecord,
    speakers: [usize; 2],
    utterance_seeds: [u64; 2],
}

/// Generates an in-memory example for one planned mixture.
fn realize(plan: &PlannedMixture, bank: &[SyntheticSpeaker], cfg: &CorpusConfig) -> Result<MixtureExample> {
    let s1 = synth_utterance(&bank[plan.speakers[0]], cfg.duration_s, cfg.sample_rate, plan.utterance_seeds[0])?;
    let s2 = synth_utterance(&bank[plan.speakers[1]], cfg.duration_s, cfg.sample_rate, plan.utterance_seeds[1])?;
    let mut ex = mix_at_snr(&s1, &s2, plan.record.snr_db)?;
    ex.limit_peak(PEAK)?;
    ex.speaker_ids = plan.record.speakers.clone();
    Ok(ex)
}

fn plan_corpus(cfg: &CorpusConfig) -> Vec<PlannedMixture> {
    let eval_idx = cfg.eval_speaker_indices();
    let train_idx: Vec<usize> = (0..cfg.num_speakers).filter(|i| !eval_idx.contains(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_C0DE);
    let mut plans = Vec::new();
    for split in Split::ALL {
        let pool = if split == Split::Eval { &eval_idx } else { &train_idx };
        for k in 0..cfg.count(split) {
            let a = pool[rng.random_range(0..pool.len())];
            let mut b = pool[rng.random_range(0..pool.len() - 1)];
            if b >= a {
                b = pool[pool.iter().position(|&p| p == b).expect("in pool") + 1];
            }
            let (lo, hi) = cfg.snr_range_db;
            let snr = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let seed: u64 = rng.random();
            let id = format!("{}-{k:04}", split.as_str());
            let dir = format!("{}/{k:04}", split.as_str());
            plans.push(PlannedMixture {
                record: ManifestRecord {
                    id,
                    split,
                    mixture: format!("{dir}/mix.wav"),
                    sources: vec![format!("{dir}/s1.wav"), format!("{dir}/s2.wav")],
                    speakers: vec![format!("spk{a:02}"), format!("spk{b:02}")],
                    snr_db: snr,
                    seed,
                },
                speakers: [a, b],
                utterance_seeds: [seed, seed.rotate_left(17) ^ 0xA5A5],
            });
        }
    }
    plans
}

/// In-memory corpus: `(record, example)` pairs in manifest order.
pub fn generate_examples(cfg: &CorpusConfig) -> Result<(Vec<SyntheticSpeaker>, Vec<(ManifestRecord, MixtureExample)>)> {
    cfg.validate()?;
    let bank = speaker_bank(cfg.num_speakers, cfg.seed)?;
    let plans = plan_corpus(cfg);
    let examples = plans
        .par_iter()
        .map(|p| realize(p, &bank, cfg).map(|ex| (p.record.clone(), ex)))
        .collect::<Result<Vec<_>>>()?;
    Ok((bank, examples))
}

/// Writes WAVs, `manifest.jsonl` and `speakers.json` under `out_dir` (created if missing).
pub fn build_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<Corpus> {
    let (bank, examples) = generate_examples(cfg)?;
    fs::create_dir_all(out_dir)?;
    examples.par_iter().try_for_each(|(rec, ex)| -> Result<()> {
        let mix_path = out_dir.join(&rec.mixture);
        fs::create_dir_all(mix_path.parent().expect("record path has a parent"))?;
        signal::write_wav(&mix_path, &ex.mixture)?;
        for (path, src) in rec.sources.iter().zip(&ex.sources) {
            signal::write_wav(&out_dir.join(path), src)?;
        }
        Ok(())
    })?;
    let mut manifest = fs::File::create(out_dir.join(MANIFEST_FILE))?;
    for (rec, _) in &examples {
        writeln!(manifest, "{}", serde_json::to_string(rec)?)?;
    }
    fs::write(out_dir.join(SPEAKERS_FILE), serde_json::to_string_pretty(&bank)?)?;
    Ok(Corpus {
        root: out_dir.to_path_buf(),
        speakers: bank,
        records: examples.into_iter().map(|(r, _)| r).collect(),
    })
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(MANIFEST_FILE))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<ManifestRecord>>>()?;
        let speakers = match fs::read_to_string(root.join(SPEAKERS_FILE)) {
            Ok(t) => serde_json::from_str(&t)?,
            Err(_) => Vec::new(),
        };
        Ok(Self {
            root: root.to_path_buf(),
            speakers,
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Reads the mixture and source WAVs of one record.
    pub fn load(&self, rec: &ManifestRecord) -> Result<MixtureExample> {
        let mixture = signal::read_wav(&self.root.join(&rec.mixture))?;
        let sources = rec
            .sources
            .iter()
            .map(|p| signal::read_wav(&self.root.join(p)))
            .collect::<Result<Vec<_>>>()?;
        if sources.iter().any(|s| s.len() != mixture.len()) {
            return Err(Error::format(rec.id.clone(), "source and mixture lengths differ"));
        }
        Ok(MixtureExample {
            mixture,
            sources,
            speaker_ids: rec.speakers.clone(),
            snr_db: rec.snr_db,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<MixtureExample>> {
        self.split(split).into_iter().map(|r| self.load(r)).collect()
    }

    pub fn speaker(&self, id: &str) -> Option<&SyntheticSpeaker> {
        self.speakers.iter().find(|s| s.id == id)
    }
}
