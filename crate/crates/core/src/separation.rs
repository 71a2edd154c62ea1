//! Mask-based time-domain separator with dual-path recurrent blocks.
//!
//! Pipeline: strided conv encoder + ReLU, layer norm and a linear bottleneck,
//! segmentation into half-overlapping chunks, `L` blocks alternating between
//! intra-chunk and inter-chunk BiLSTMs, PReLU and a linear layer emitting one
//! mask per output, overlap-add, sigmoid, masking of the encoder features and
//! a transposed-conv decoder.
//!
//! When a speaker filter is supplied every block modulates its features with a
//! per-channel scale and shift computed from the filter (FiLM). Without a
//! filter the network is a plain dual-path separator trained with PIT.
//!
//! Chunk tensors are stored `[chunk, num_chunks, feature]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BiLstm, Conv1d, LayerNorm, Linear, PRelu};
use crate::param::{ParamId, ParamStore};
use crate::signal::Waveform;
use crate::speaker::SpeakerFilter;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    /// Unconditioned baseline emitting `num_sources` outputs.
    None,
    /// One filter per run; extracts that speaker.
    Target,
    /// One filter per run; extracts the speaker the filter does *not* describe.
    NonTarget,
    /// Two concatenated filters; two outputs in filter order.
    Both,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 4] = [Self::None, Self::Target, Self::NonTarget, Self::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Target => "target",
            Self::NonTarget => "non-target",
            Self::Both => "both",
        }
    }

    pub fn is_conditioned(self) -> bool {
        self != Self::None
    }
}

impl std::str::FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown conditioning mode `{s}`")))
    }
}

impl std::fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparatorConfig {
    pub encoder_filters: usize,
    pub encoder_kernel: usize,
    pub encoder_stride: usize,
    pub bottleneck: usize,
    pub chunk_size: usize,
    /// Dual-path blocks, alternating intra / inter.
    pub blocks: usize,
    /// BiLSTM hidden size per direction.
    pub hidden: usize,
    pub mode: ConditioningMode,
    /// Dimension of one speaker filter.
    pub filter_dim: usize,
    /// Outputs of the unconditioned separator.
    pub num_sources: usize,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            encoder_filters: 64,
            encoder_kernel: 16,
            encoder_stride: 8,
            bottleneck: 32,
            chunk_size: 50,
            blocks: 4,
            hidden: 32,
            mode: ConditioningMode::None,
            filter_dim: 16,
            num_sources: 2,
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 || self.blocks % 2 != 0 {
            return Err(Error::Config(format!(
                "separator.blocks must be even and >= 2, got {}",
                self.blocks
            )));
        }
        if self.chunk_size < 2 || self.chunk_size % 2 != 0 {
            return Err(Error::Config(format!(
                "separator.chunk_size must be even and >= 2, got {}",
                self.chunk_size
            )));
        }
        if self.encoder_stride == 0 || self.encoder_kernel == 0 || self.encoder_stride > self.encoder_kernel {
            return Err(Error::Config("separator encoder needs 1 <= stride <= kernel".into()));
        }
        if self.encoder_filters == 0 || self.bottleneck == 0 || self.hidden == 0 {
            return Err(Error::Config("separator widths must be >= 1".into()));
        }
        if self.mode == ConditioningMode::None && self.num_sources < 2 {
            return Err(Error::Config("unconditioned separator needs num_sources >= 2".into()));
        }
        if self.mode.is_conditioned() && self.filter_dim == 0 {
            return Err(Error::Config("conditioned separator needs filter_dim >= 1".into()));
        }
        Ok(())
    }

    pub fn chunk_hop(&self) -> usize {
        self.chunk_size / 2
    }

    /// Width of the conditioning vector fed to each block.
    pub fn condition_dim(&self) -> usize {
        match self.mode {
            ConditioningMode::None => 0,
            ConditioningMode::Target | ConditioningMode::NonTarget => self.filter_dim,
            ConditioningMode::Both => 2 * self.filter_dim,
        }
    }

    /// Waveforms produced per forward pass.
    pub fn outputs_per_pass(&self) -> usize {
        match self.mode {
            ConditioningMode::None => self.num_sources,
            ConditioningMode::Target | ConditioningMode::NonTarget => 1,
            ConditioningMode::Both => 2,
        }
    }

    /// Encoder frame count for `len` samples (no padding).
    pub fn encoder_frames(&self, len: usize) -> usize {
        crate::signal::frame_count(len, self.encoder_kernel, self.encoder_stride)
    }

    /// Smallest length `>= len` whose encoder frames tile it exactly.
    pub fn padded_len(&self, len: usize) -> usize {
        let (k, s) = (self.encoder_kernel, self.encoder_stride);
        if len <= k {
            k
        } else {
            k + (len - k).div_ceil(s) * s
        }
    }
}

/// Number of half-overlapping chunks of `chunk` frames used for `frames` frames.
pub fn chunk_count(frames: usize, chunk: usize) -> usize {
    frames.div_ceil(chunk / 2).max(1)
}

/// Segmented features `[chunk, num_chunks, feature]` plus the zero frames appended on the right.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkTensor {
    pub data: Tensor,
    pub pad_info: usize,
}

impl ChunkTensor {
    pub fn chunk_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn num_chunks(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.data.shape()[2]
    }

    /// Sums the chunks back onto the frame axis, normalizes by coverage and drops the padding.
    pub fn overlap_add(&self) -> Result<Tensor> {
        let hop = self.chunk_size() / 2;
        let frames = (self.num_chunks() - 1) * hop + self.chunk_size() - self.pad_info;
        let mut g = Graph::inference();
        let x = g.constant(self.data.clone());
        let y = g.overlap_add(x, hop, frames)?;
        Ok(g.value(y).clone())
    }
}

/// Splits `x: [frames, feature]` into half-overlapping chunks of `chunk` frames.
pub fn segment(x: &Tensor, chunk: usize) -> Result<ChunkTensor> {
    if x.rank() != 2 || x.shape()[0] == 0 {
        return Err(Error::Shape {
            op: "segment",
            lhs: x.shape().to_vec(),
            rhs: vec![chunk],
        });
    }
    if chunk < 2 || chunk % 2 != 0 {
        return Err(Error::invalid(format!("chunk size must be even and >= 2, got {chunk}")));
    }
    let frames = x.shape()[0];
    let n = chunk_count(frames, chunk);
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let r = g.segment(v, chunk, chunk / 2, n)?;
    Ok(ChunkTensor {
        data: g.value(r).clone(),
        pad_info: (n - 1) * (chunk / 2) + chunk - frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Recurrence along the within-chunk axis.
    Intra,
    /// Recurrence along the chunk-index axis.
    Inter,
}

/// Per-channel scale and shift computed from the conditioning vector.
#[derive(Debug, Clone)]
pub struct Film {
    pub scale: Linear,
    pub shift: Linear,
}

impl Film {
    /// Returns `(scale, shift)`, each `[channels]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cond: Var) -> Result<(Var, Var)> {
        let c1 = self.scale.forward(g, store, cond)?;
        let c2 = self.shift.forward(g, store, cond)?;
        Ok((c1, c2))
    }

    /// Zero weights, unit scale bias, zero shift bias: the modulation becomes the identity.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        for lin in [&self.scale, &self.shift] {
            let shape = store.value(lin.weight).shape().to_vec();
            store.set_value(lin.weight, Tensor::zeros(shape))?;
        }
        let n = self.scale.out_dim;
        if let Some(b) = self.scale.bias {
            store.set_value(b, Tensor::ones([n]))?;
        }
        if let Some(b) = self.shift.bias {
            store.set_value(b, Tensor::zeros([n]))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DualPathBlock {
    pub orientation: Orientation,
    pub rnn: BiLstm,
    pub fc: Linear,
    pub film: Option<Film>,
    pub prelu: PRelu,
    pub norm: LayerNorm,
}

impl DualPathBlock {
    /// `r: [chunk, num_chunks, feature]` -> same shape.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, r: Var, cond: Option<Var>) -> Result<Var> {
        let x = match self.orientation {
            Orientation::Intra => r,
            Orientation::Inter => g.permute(r, &[1, 0, 2])?,
        };
        let h = self.rnn.run(g, store, x)?;
        let mut y = self.fc.forward(g, store, h)?;
        if self.orientation == Orientation::Inter {
            y = g.permute(y, &[1, 0, 2])?;
        }
        match (&self.film, cond) {
            (Some(film), Some(c)) => {
                let expected = film.scale.in_dim;
                if g.shape(c) != [expected] {
                    return Err(Error::Shape {
                        op: "film condition",
                        lhs: g.shape(c).to_vec(),
                        rhs: vec![expected],
                    });
                }
                let (c1, c2) = film.forward(g, store, c)?;
                y = g.mul(y, c1)?;
                y = g.add(y, c2)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::invalid("conditioned block called without a speaker filter")),
            (None, Some(_)) => return Err(Error::invalid("unconditioned block called with a speaker filter")),
        }
        let y = self.prelu.forward(g, store, y)?;
        let y = self.norm.forward(g, store, y, 2)?;
        g.add(y, r)
    }
}

/// Graph outputs of one separator pass.
#[derive(Debug, Clone)]
pub struct SeparatorOutput {
    /// Estimated waveforms, each `[len]`.
    pub waveforms: Vec<Var>,
    /// Masks, each `[frames, encoder_filters]`.
    pub masks: Vec<Var>,
}

/// Numeric result of [`Separator::separate`].
#[derive(Debug, Clone)]
pub struct Separation {
    pub waveforms: Vec<Waveform>,
    pub masks: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Separator {
    pub config: SeparatorConfig,
    pub encoder: Conv1d,
    pub input_norm: LayerNorm,
    pub bottleneck: Linear,
    pub blocks: Vec<DualPathBlock>,
    pub out_prelu: PRelu,
    pub mask_fc: Linear,
    pub decoder: ParamId,
}

impl Separator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: SeparatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (e, k, bn) = (config.encoder_filters, config.encoder_kernel, config.bottleneck);
        let encoder = Conv1d::new(store, &format!("{prefix}.encoder"), 1, e, k, config.encoder_stride, false, rng)?;
        let input_norm = LayerNorm::new(store, &format!("{prefix}.input_norm"), e)?;
        let bottleneck = Linear::new(store, &format!("{prefix}.bottleneck"), e, bn, true, rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let name = format!("{prefix}.block{i}");
            let film = if config.mode.is_conditioned() {
                let cd = config.condition_dim();
                let scale = Linear::new(store, &format!("{name}.film_scale"), cd, bn, true, rng)?;
                if let Some(b) = scale.bias {
                    store.set_value(b, Tensor::ones([bn]))?;
                }
                let shift = Linear::new(store, &format!("{name}.film_shift"), cd, bn, true, rng)?;
                Some(Film { scale, shift })
            } else {
                None
            };
            blocks.push(DualPathBlock {
                orientation: if i % 2 == 0 { Orientation::Intra } else { Orientation::Inter },
                rnn: BiLstm::new(store, &format!("{name}.rnn"), bn, config.hidden, rng)?,
                fc: Linear::new(store, &format!("{name}.fc"), 2 * config.hidden, bn, true, rng)?,
                film,
                prelu: PRelu::new(store, &format!("{name}.prelu"), bn)?,
                norm: LayerNorm::new(store, &format!("{name}.norm"), bn)?,
            });
        }
        let out_prelu = PRelu::new(store, &format!("{prefix}.out_prelu"), bn)?;
        let mask_fc = Linear::new(
            store,
            &format!("{prefix}.mask"),
            bn,
            config.outputs_per_pass() * e,
            true,
            rng,
        )?;
        let bound = 1.0 / (e as f64).sqrt();
        let decoder = store.add(format!("{prefix}.decoder.weight"), Tensor::uniform([e, 1, k], bound, rng))?;
        Ok(Self {
            config,
            encoder,
            input_norm,
            bottleneck,
            blocks,
            out_prelu,
            mask_fc,
            decoder,
        })
    }

    /// `x: [1, len]` -> `ReLU(conv(x))`, `[encoder_filters, frames]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let len = g.shape(x).last().copied().unwrap_or(0);
        if len < self.config.encoder_kernel {
            return Err(Error::InputTooShort {
                op: "encode",
                len,
                needed: self.config.encoder_kernel,
            });
        }
        let y = self.encoder.forward(g, store, x)?;
        g.relu(y)
    }

    /// `features: [encoder_filters, frames]` -> `[len]` via the transposed convolution.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let w = g.param(store, self.decoder);
        let y = g.transpose_conv1d(features, w, self.config.encoder_stride)?;
        let n = g.shape(y)[1];
        g.reshape(y, &[n])
    }

    /// Full pass on `mixture: [len]`. `cond` must be present exactly when the
    /// mode is conditioned, with width [`SeparatorConfig::condition_dim`].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mixture: Var, cond: Option<Var>) -> Result<SeparatorOutput> {
        let cfg = &self.config;
        let shape = g.shape(mixture).to_vec();
        if shape.len() != 1 || shape[0] == 0 {
            return Err(Error::Shape {
                op: "separator input",
                lhs: shape,
                rhs: vec![],
            });
        }
        if cond.is_some() != cfg.mode.is_conditioned() {
            return Err(Error::invalid(format!(
                "mode `{}` {} a speaker filter",
                cfg.mode,
                if cfg.mode.is_conditioned() { "requires" } else { "does not take" }
            )));
        }
        let len = shape[0];
        let padded = cfg.padded_len(len);
        let x = g.reshape(mixture, &[1, len])?;
        let x = g.pad(x, 1, 0, padded - len)?;
        let enc = self.encode(g, store, x)?;
        let feats = g.transpose(enc)?;
        let frames = g.shape(feats)[0];

        let normed = self.input_norm.forward(g, store, feats, 1)?;
        let b = self.bottleneck.forward(g, store, normed)?;
        let hop = cfg.chunk_hop();
        let mut r = g.segment(b, cfg.chunk_size, hop, chunk_count(frames, cfg.chunk_size))?;
        for block in &self.blocks {
            r = block.forward(g, store, r, cond)?;
        }
        let r = self.out_prelu.forward(g, store, r)?;
        let r = self.mask_fc.forward(g, store, r)?;
        let m = g.overlap_add(r, hop, frames)?;
        let m = g.sigmoid(m)?;
        let e = cfg.encoder_filters;
        let masks = g.split(m, 1, &vec![e; cfg.outputs_per_pass()])?;

        let mut waveforms = Vec::with_capacity(masks.len());
        for &mask in &masks {
            let masked = g.mul(mask, feats)?;
            let masked = g.transpose(masked)?;
            let y = self.decode(g, store, masked)?;
            waveforms.push(g.narrow(y, 0, 0, len)?);
        }
        Ok(SeparatorOutput { waveforms, masks })
    }

    /// Builds the conditioning vector for one pass from already-computed filter vars.
    pub fn condition(&self, g: &mut Graph, filters: &[Var]) -> Result<Option<Var>> {
        let d = self.config.filter_dim;
        let needed = match self.config.mode {
            ConditioningMode::None => 0,
            ConditioningMode::Target | ConditioningMode::NonTarget => 1,
            ConditioningMode::Both => 2,
        };
        if filters.len() != needed {
            return Err(Error::invalid(format!(
                "mode `{}` takes {needed} filter(s) per pass, got {}",
                self.config.mode,
                filters.len()
            )));
        }
        for &f in filters {
            if g.shape(f) != [d] {
                return Err(Error::Shape {
                    op: "speaker filter",
                    lhs: g.shape(f).to_vec(),
                    rhs: vec![d],
                });
            }
        }
        Ok(match filters.len() {
            0 => None,
            1 => Some(filters[0]),
            _ => Some(g.concat(filters, 0)?),
        })
    }

    /// Inference entry point.
    ///
    /// * `none`: no filters, `num_sources` outputs from one pass.
    /// * `target` / `non-target`: one pass and one output per filter.
    /// * `both`: exactly two filters, two outputs in filter order.
    pub fn separate(&self, store: &ParamStore, mixture: &Waveform, filters: &[SpeakerFilter]) -> Result<Separation> {
        let runs: Vec<Vec<&SpeakerFilter>> = match self.config.mode {
            ConditioningMode::None => {
                if !filters.is_empty() {
                    return Err(Error::invalid("mode `none` takes no speaker filters"));
                }
                vec![vec![]]
            }
            ConditioningMode::Target | ConditioningMode::NonTarget => {
                if filters.is_empty() {
                    return Err(Error::invalid(format!("mode `{}` needs at least one filter", self.config.mode)));
                }
                filters.iter().map(|f| vec![f]).collect()
            }
            ConditioningMode::Both => {
                if filters.len() != 2 {
                    return Err(Error::invalid(format!(
                        "mode `both` needs exactly 2 filters, got {}",
                        filters.len()
                    )));
                }
                vec![filters.iter().collect()]
            }
        };
        let mut out = Separation {
            waveforms: Vec::new(),
            masks: Vec::new(),
        };
        for run in runs {
            let mut g = Graph::inference();
            let x = g.constant(Tensor::from_vec(mixture.samples().to_vec()));
            let fvars: Vec<Var> = run.iter().map(|f| g.constant(f.to_tensor())).collect();
            let cond = self.condition(&mut g, &fvars)?;
            let res = self.forward(&mut g, store, x, cond)?;
            for v in res.waveforms {
                out.waveforms
                    .push(Waveform::new(g.value(v).data().to_vec(), mixture.sample_rate())?);
            }
            out.masks.extend(res.masks.iter().map(|&m| g.value(m).clone()));
        }
        Ok(out)
    }

    pub fn film_blocks(&self) -> impl Iterator<Item = &Film> {
        self.blocks.iter().filter_map(|b| b.film.as_ref())
    }
}
