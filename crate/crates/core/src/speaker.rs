//! Speaker module: maps a waveform to a fixed-size speaker filter.
//!
//! The spectrogram `[bins, frames]` goes through `stacks` stacks, each an
//! entry convolution followed by `blocks` residual blocks
//! (`LayerNorm(Conv1d(LeakyReLU(y)))`, with a skip added after every second
//! block) and a LeakyReLU. A 1x1 convolution then mixes channels per frame,
//! the result is mean-pooled over time, and `Linear(ReLU(.))` yields the
//! filter. Speakers known ahead of time can instead supply an external
//! embedding that goes through a trainable projection.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, LayerNorm, Linear};
use crate::param::ParamStore;
use crate::signal::{self, Spectrogram, Waveform};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerNetConfig {
    pub stacks: usize,
    /// Residual blocks per stack; even, since skips span pairs of blocks.
    pub blocks: usize,
    pub residual_channels: usize,
    pub out_channels: usize,
    pub filter_dim: usize,
    pub kernel: usize,
    pub entry_kernel: usize,
    pub leaky_slope: f64,
    pub frame_len: usize,
    pub hop: usize,
}

impl Default for SpeakerNetConfig {
    fn default() -> Self {
        Self {
            stacks: 2,
            blocks: 4,
            residual_channels: 32,
            out_channels: 32,
            filter_dim: 16,
            kernel: 3,
            entry_kernel: 1,
            leaky_slope: 0.01,
            frame_len: signal::STFT_FRAME,
            hop: signal::STFT_HOP,
        }
    }
}

impl SpeakerNetConfig {
    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.stacks < 1 {
            return Err(Error::Config("speaker.stacks must be >= 1".into()));
        }
        if self.blocks < 2 || self.blocks % 2 != 0 {
            return Err(Error::Config(format!(
                "speaker.blocks must be even and >= 2, got {}",
                self.blocks
            )));
        }
        if self.filter_dim < 1 || self.residual_channels < 1 || self.out_channels < 1 {
            return Err(Error::Config("speaker dimensions must be >= 1".into()));
        }
        if self.kernel % 2 == 0 || self.entry_kernel % 2 == 0 {
            return Err(Error::Config("speaker kernels must be odd to preserve frame count".into()));
        }
        if self.frame_len < 2 || self.hop < 1 {
            return Err(Error::Config("speaker STFT needs frame_len >= 2 and hop >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterSource {
    LearnedFromAudio,
    ExternalEmbedding,
}

/// Conditioning vector for one speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerFilter {
    pub v: Vec<f64>,
    pub source: FilterSource,
    pub speaker_label: Option<String>,
}

impl SpeakerFilter {
    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.v.clone())
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv: Conv1d,
    pub norm: LayerNorm,
    pub slope: f64,
}

impl ResidualBlock {
    /// `y: [channels, frames]` -> same shape.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, y: Var) -> Result<Var> {
        let a = g.leaky_relu(y, self.slope)?;
        let c = self.conv.forward(g, store, a)?;
        if g.shape(c) != g.shape(y) {
            return Err(Error::Shape {
                op: "residual_block",
                lhs: g.shape(y).to_vec(),
                rhs: g.shape(c).to_vec(),
            });
        }
        self.norm.forward(g, store, c, 0)
    }
}

#[derive(Debug, Clone)]
pub struct ResidualStack {
    pub entry: Conv1d,
    pub blocks: Vec<ResidualBlock>,
    pub slope: f64,
}

impl ResidualStack {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut y = self.entry.forward(g, store, x)?;
        let mut skip = y;
        for (j, block) in self.blocks.iter().enumerate() {
            y = block.forward(g, store, y)?;
            if j % 2 == 1 {
                y = g.add(y, skip)?;
                skip = y;
            }
        }
        g.leaky_relu(y, self.slope)
    }
}

#[derive(Debug, Clone)]
pub struct SpeakerNet {
    pub config: SpeakerNetConfig,
    pub stacks: Vec<ResidualStack>,
    pub proj: Conv1d,
    pub out: Linear,
}

impl SpeakerNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: SpeakerNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let rc = config.residual_channels;
        let mut stacks = Vec::with_capacity(config.stacks);
        for i in 0..config.stacks {
            let in_ch = if i == 0 { config.bins() } else { rc };
            let name = format!("{prefix}.stack{i}");
            let entry = Conv1d::new(
                store,
                &format!("{name}.entry"),
                in_ch,
                rc,
                config.entry_kernel,
                1,
                true,
                rng,
            )?
            .same_padding(config.entry_kernel);
            let mut blocks = Vec::with_capacity(config.blocks);
            for j in 0..config.blocks {
                let bname = format!("{name}.block{j}");
                blocks.push(ResidualBlock {
                    conv: Conv1d::new(store, &format!("{bname}.conv"), rc, rc, config.kernel, 1, true, rng)?
                        .same_padding(config.kernel),
                    norm: LayerNorm::new(store, &format!("{bname}.norm"), rc)?,
                    slope: config.leaky_slope,
                });
            }
            stacks.push(ResidualStack {
                entry,
                blocks,
                slope: config.leaky_slope,
            });
        }
        let proj = Conv1d::new(store, &format!("{prefix}.proj"), rc, config.out_channels, 1, 1, true, rng)?;
        let out = Linear::new(
            store,
            &format!("{prefix}.out"),
            config.out_channels,
            config.filter_dim,
            true,
            rng,
        )?;
        Ok(Self {
            config,
            stacks,
            proj,
            out,
        })
    }

    pub fn filter_dim(&self) -> usize {
        self.config.filter_dim
    }

    /// Magnitude spectrogram of `w`, zero-padded to one frame when shorter.
    pub fn spectrogram(&self, w: &Waveform) -> Result<Spectrogram> {
        let padded = w.padded_to(self.config.frame_len);
        signal::stft_mag(&padded, self.config.frame_len, self.config.hop)
    }

    /// Residual stacks followed by the per-frame channel projection: `[bins, T] -> [out_channels, T]`.
    pub fn frame_features(&self, g: &mut Graph, store: &ParamStore, spec: Var) -> Result<Var> {
        let shape = g.shape(spec).to_vec();
        if shape.len() != 2 || shape[0] != self.config.bins() {
            return Err(Error::Shape {
                op: "speaker input",
                lhs: shape,
                rhs: vec![self.config.bins()],
            });
        }
        if shape[1] == 0 {
            return Err(Error::invalid("empty spectrogram"));
        }
        let mut x = spec;
        for stack in &self.stacks {
            x = stack.forward(g, store, x)?;
        }
        self.proj.forward(g, store, x)
    }

    /// Time-pooled features to filter: `Linear(ReLU(mean_t(z)))`.
    pub fn pool_and_project(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let pooled = g.mean_axis(z, 1)?;
        let a = g.relu(pooled)?;
        self.out.forward(g, store, a)
    }

    /// Spectrogram `[bins, frames]` -> filter `[filter_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, spec: Var) -> Result<Var> {
        let z = self.frame_features(g, store, spec)?;
        self.pool_and_project(g, store, z)
    }

    pub fn forward_waveform(&self, g: &mut Graph, store: &ParamStore, w: &Waveform) -> Result<Var> {
        let spec = self.spectrogram(w)?;
        let x = g.constant(spec.to_tensor());
        self.forward(g, store, x)
    }

    pub fn extract_filter(&self, store: &ParamStore, spec: &Spectrogram) -> Result<SpeakerFilter> {
        if spec.frames() == 0 {
            return Err(Error::invalid("empty spectrogram"));
        }
        let mut g = Graph::inference();
        let x = g.constant(spec.to_tensor());
        let v = self.forward(&mut g, store, x)?;
        Ok(SpeakerFilter {
            v: g.value(v).data().to_vec(),
            source: FilterSource::LearnedFromAudio,
            speaker_label: None,
        })
    }

    pub fn filter_from_waveform(&self, store: &ParamStore, w: &Waveform) -> Result<SpeakerFilter> {
        self.extract_filter(store, &self.spectrogram(w)?)
    }
}

/// A pre-computed speaker embedding (for instance an x-vector) read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbedding {
    pub label: Option<String>,
    pub values: Vec<f64>,
}

impl ExternalEmbedding {
    /// Text form:
    ///
    /// ```text
    /// # comment lines are ignored
    /// dim 4
    /// label spk07
    /// 0.12, -0.5 0.33
    /// 1.0
    /// ```
    ///
    /// `label` is optional; values may be separated by commas and/or whitespace.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .peekable();
        let header = lines.next().ok_or_else(|| Error::format("dim", "empty embedding file"))?;
        let dim: usize = header
            .strip_prefix("dim")
            .map(str::trim)
            .ok_or_else(|| Error::format("dim", "first line must be `dim <n>`"))?
            .parse()
            .map_err(|_| Error::format("dim", format!("bad dimension in `{header}`")))?;
        let mut label = None;
        if let Some(l) = lines.peek() {
            if let Some(rest) = l.strip_prefix("label") {
                label = Some(rest.trim().to_string()).filter(|s| !s.is_empty());
                lines.next();
            }
        }
        let mut values = Vec::with_capacity(dim);
        for line in lines {
            for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::format("values", format!("not a number: `{tok}`")))?;
                if !v.is_finite() {
                    return Err(Error::format("values", "non-finite value"));
                }
                values.push(v);
            }
        }
        if values.len() != dim {
            return Err(Error::format(
                "values",
                format!("declared dim {dim} but found {} values", values.len()),
            ));
        }
        Ok(Self { label, values })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("dim {}\n", self.values.len());
        if let Some(l) = &self.label {
            let _ = writeln!(s, "label {l}");
        }
        let vals: Vec<String> = self.values.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Trainable fully connected map from an external embedding space to filter space.
#[derive(Debug, Clone)]
pub struct EmbeddingProjection {
    pub linear: Linear,
}

impl EmbeddingProjection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        filter_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, prefix, in_dim, filter_dim, true, rng)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim
    }

    /// Sets the weight to the identity (square projections only) and the bias to zero.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        let (n, m) = (self.linear.out_dim, self.linear.in_dim);
        if n != m {
            return Err(Error::invalid("identity projection must be square"));
        }
        let mut w = Tensor::zeros([n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = 1.0;
        }
        store.set_value(self.linear.weight, w)?;
        if let Some(b) = self.linear.bias {
            store.set_value(b, Tensor::zeros([n]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, embedding: Var) -> Result<Var> {
        if g.shape(embedding) != [self.in_dim()] {
            return Err(Error::Shape {
                op: "embedding projection",
                lhs: g.shape(embedding).to_vec(),
                rhs: vec![self.in_dim()],
            });
        }
        self.linear.forward(g, store, embedding)
    }

    pub fn project(&self, store: &ParamStore, embedding: &ExternalEmbedding) -> Result<SpeakerFilter> {
        if embedding.values.len() != self.in_dim() {
            return Err(Error::Shape {
                op: "embedding projection",
                lhs: vec![embedding.values.len()],
                rhs: vec![self.in_dim()],
            });
        }
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_vec(embedding.values.clone()));
        let v = self.forward(&mut g, store, x)?;
        Ok(SpeakerFilter {
            v: g.value(v).data().to_vec(),
            source: FilterSource::ExternalEmbedding,
            speaker_label: embedding.label.clone(),
        })
    }
}

/// Reads an embedding file and maps it through `projection`.
pub fn load_external_embedding(
    path: &Path,
    projection: &EmbeddingProjection,
    store: &ParamStore,
) -> Result<SpeakerFilter> {
    projection.project(store, &ExternalEmbedding::read(path)?)
}
