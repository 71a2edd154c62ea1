//! Waveforms, 16-bit PCM WAV I/O, Hann-window STFT magnitudes and framing.

use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 8000;
/// 160 ms at 8 kHz.
pub const STFT_FRAME: usize = 1280;
/// 80 ms at 8 kHz.
pub const STFT_HOP: usize = 640;

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform must hold at least one sample"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("waveform holds non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean of squared samples.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }

    /// Zero-pads on the right up to `len` samples (no-op when already long enough).
    pub fn padded_to(&self, len: usize) -> Waveform {
        let mut samples = self.samples.clone();
        if samples.len() < len {
            samples.resize(len, 0.0);
        }
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a RIFF/WAVE byte buffer holding 16-bit PCM mono audio.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(Error::format("riff", "missing RIFF signature"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::format("wave", "missing WAVE form type"));
    }
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(String::from_utf8_lossy(id), "chunk runs past end of file"))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::format("fmt", "chunk shorter than 16 bytes"));
                }
                fmt = Some((read_u16(body, 0), read_u16(body, 2), read_u32(body, 4), read_u16(body, 14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    let (format_tag, channels, sample_rate, bits) = fmt.ok_or_else(|| Error::format("fmt", "missing fmt chunk"))?;
    if format_tag != 1 {
        return Err(Error::format("audio_format", format!("expected PCM (1), got {format_tag}")));
    }
    if channels != 1 {
        return Err(Error::format("channels", format!("expected mono, got {channels} channels")));
    }
    if bits != 16 {
        return Err(Error::format("bits_per_sample", format!("expected 16, got {bits}")));
    }
    if sample_rate == 0 {
        return Err(Error::format("sample_rate", "sample rate is zero"));
    }
    let data = data.ok_or_else(|| Error::format("data", "missing data chunk"))?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    if samples.is_empty() {
        return Err(Error::format("data", "no samples"));
    }
    Waveform::new(samples, sample_rate)
}

/// Serializes as 16-bit PCM mono; samples outside `[-1, 1)` are clipped.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    decode_wav(&fs::read(path)?)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    fs::write(path, encode_wav(w))?;
    Ok(())
}

/// Symmetric Hann window: `0.5 * (1 - cos(2 pi k / (n - 1)))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("hann window needs n >= 2, got {n}")));
    }
    let denom = (n - 1) as f64;
    let mut w: Vec<f64> = (0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / denom).cos()))
        .collect();
    for k in 0..n / 2 {
        w[n - 1 - k] = w[k];
    }
    Ok(w)
}

/// Number of full frames: `1 + floor((len - frame_len) / hop)`, or 0 when too short.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len || hop == 0 {
        0
    } else {
        1 + (len - frame_len) / hop
    }
}

/// Magnitude time-frequency matrix, `bins x frames`, row-major by bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    mags: Vec<f64>,
    bins: usize,
    frames: usize,
    frame_len: usize,
    hop: usize,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.mags[bin * self.frames + frame]
    }

    pub fn mags(&self) -> &[f64] {
        &self.mags
    }

    /// `[bins, frames]` tensor (channels by time).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.bins, self.frames], self.mags.clone()).expect("spectrogram shape")
    }
}

/// Hann-windowed STFT magnitude. Trailing samples that do not fill a frame are dropped;
/// signals shorter than one frame must be zero-padded by the caller.
pub fn stft_mag(w: &Waveform, frame_len: usize, hop: usize) -> Result<Spectrogram> {
    if hop == 0 || frame_len < 2 {
        return Err(Error::invalid("stft needs frame_len >= 2 and hop >= 1"));
    }
    if w.len() < frame_len {
        return Err(Error::InputTooShort {
            op: "stft_mag (zero-pad the signal to one frame before calling)",
            len: w.len(),
            needed: frame_len,
        });
    }
    let window = hann_window(frame_len)?;
    let frames = frame_count(w.len(), frame_len, hop);
    let bins = frame_len / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_len);
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    let mut mags = vec![0.0; bins * frames];
    for t in 0..frames {
        let frame = &w.samples()[t * hop..t * hop + frame_len];
        for ((slot, &x), &win) in buf.iter_mut().zip(frame).zip(&window) {
            *slot = Complex::new(x * win, 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            mags[f * frames + t] = buf[f].norm();
        }
    }
    Ok(Spectrogram {
        mags,
        bins,
        frames,
        frame_len,
        hop,
    })
}

/// Splits `x` into `[frames, frame_len]` with the given hop; trailing samples that do
/// not fill a frame are dropped.
pub fn frame_signal(x: &[f64], frame_len: usize, hop: usize) -> Result<Tensor> {
    if hop == 0 || frame_len == 0 || hop > frame_len {
        return Err(Error::invalid(format!(
            "framing needs 1 <= hop <= frame_len, got hop {hop}, frame_len {frame_len}"
        )));
    }
    let n = frame_count(x.len(), frame_len, hop);
    let mut data = Vec::with_capacity(n * frame_len);
    for t in 0..n {
        data.extend_from_slice(&x[t * hop..t * hop + frame_len]);
    }
    Tensor::new(vec![n, frame_len], data)
}

/// Sums `[frames, frame_len]` back onto a signal of length `(frames - 1) * hop + frame_len`,
/// dividing every sample by the number of frames covering it.
pub fn overlap_add_signal(frames: &Tensor, hop: usize) -> Result<Vec<f64>> {
    let shape = frames.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "overlap_add_signal",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let (n, frame_len) = (shape[0], shape[1]);
    if hop == 0 || hop > frame_len {
        return Err(Error::invalid(format!(
            "overlap-add needs 1 <= hop <= frame_len, got hop {hop}, frame_len {frame_len}"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let len = (n - 1) * hop + frame_len;
    let mut out = vec![0.0; len];
    let mut count = vec![0u32; len];
    for (t, frame) in frames.data().chunks(frame_len).enumerate() {
        for (k, v) in frame.iter().enumerate() {
            out[t * hop + k] += v;
            count[t * hop + k] += 1;
        }
    }
    for (v, c) in out.iter_mut().zip(&count) {
        *v /= *c as f64;
    }
    Ok(out)
}
