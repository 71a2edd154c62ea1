//! Parameterized layers built on [`Graph`] operations.
//!
//! Initialization: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero,
//! PReLU slope 0.25, layer-norm gain 1 / bias 0, LSTM forget-gate bias 1.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Fully connected layer, `y = x W^T + b`, over the last axis of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform([out_dim, in_dim], init_bound(in_dim), rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::Shape {
                op: "linear",
                lhs: shape,
                rhs: vec![self.out_dim, self.in_dim],
            });
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, &[rows, self.in_dim])?
        };
        let w = g.param(store, self.weight);
        let mut y = g.matmul_t(flat, w, false, true)?;
        if let Some(b) = self.bias {
            let b = g.param(store, b);
            y = g.add(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

/// 1-D convolution over `[channels, time]` inputs.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: (usize, usize),
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform([out_channels, in_channels, kernel], init_bound(in_channels * kernel), rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([out_channels]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: (0, 0),
        })
    }

    /// Pads so that a stride-1 convolution preserves the time length.
    pub fn same_padding(mut self, kernel: usize) -> Self {
        self.padding = ((kernel - 1) / 2, kernel / 2);
        self
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv1d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones([dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim]))?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, axis: usize) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, axis, self.eps)
    }
}

/// PReLU with one learned slope per channel of the last axis.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            slope: store.add(format!("{name}.slope"), Tensor::full([channels], 0.25))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let slope = g.param(store, self.slope);
        g.prelu(x, slope)
    }
}

/// One LSTM direction. Gate order in the stacked weights: input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = init_bound(hidden);
        let w_ih = store.add(format!("{name}.w_ih"), Tensor::uniform([4 * hidden, input], bound, rng))?;
        let w_hh = store.add(format!("{name}.w_hh"), Tensor::uniform([4 * hidden, hidden], bound, rng))?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{name}.bias"), Tensor::from_vec(b))?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    /// One step for a batch: `x_t: [batch, input]`, `h, c: [batch, hidden]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x_t: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let w_ih = g.param(store, self.w_ih);
        let bias = g.param(store, self.bias);
        let xp = g.matmul_t(x_t, w_ih, false, true)?;
        let xp = g.add(xp, bias)?;
        self.step_projected(g, store, xp, h, c)
    }

    /// Step given the precomputed input projection `x_t W_ih^T + b`.
    fn step_projected(&self, g: &mut Graph, store: &ParamStore, xp: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let w_hh = g.param(store, self.w_hh);
        let hp = g.matmul_t(h, w_hh, false, true)?;
        let gates = g.add(xp, hp)?;
        g.lstm_cell(gates, c)
    }

    /// Runs over `x: [time, batch, input]` from zero state; returns `[time, batch, hidden]`.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input || shape[0] == 0 {
            return Err(Error::Shape {
                op: "lstm",
                lhs: shape,
                rhs: vec![self.input, self.hidden],
            });
        }
        let (t_len, batch) = (shape[0], shape[1]);
        let hd = self.hidden;
        // all input projections in one product
        let flat = g.reshape(x, &[t_len * batch, self.input])?;
        let w_ih = g.param(store, self.w_ih);
        let bias = g.param(store, self.bias);
        let proj = g.matmul_t(flat, w_ih, false, true)?;
        let proj = g.add(proj, bias)?;
        let proj = g.reshape(proj, &[t_len, batch, 4 * hd])?;
        let mut h = g.constant(Tensor::zeros([batch, hd]));
        let mut c = g.constant(Tensor::zeros([batch, hd]));
        let mut outputs = vec![h; t_len];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t_len).rev())
        } else {
            Box::new(0..t_len)
        };
        for t in order {
            let xp = g.narrow(proj, 0, t, 1)?;
            let xp = g.reshape(xp, &[batch, 4 * hd])?;
            (h, c) = self.step_projected(g, store, xp, h, c)?;
            outputs[t] = h;
        }
        g.stack(&outputs)
    }
}

/// Bidirectional LSTM; output is `[forward ; backward]` along the feature axis.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            backward: LstmCell::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    /// `x: [time, batch, input]` -> `[time, batch, 2 * hidden]`; a 2-D `[time, input]`
    /// input is treated as a batch of one and returns `[time, 2 * hidden]`.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let squeeze = shape.len() == 2;
        let x3 = if squeeze {
            g.reshape(x, &[shape[0], 1, shape[1]])?
        } else {
            x
        };
        let fwd = self.forward.run(g, store, x3, false)?;
        let bwd = self.backward.run(g, store, x3, true)?;
        let out = g.concat(&[fwd, bwd], 2)?;
        if squeeze {
            g.reshape(out, &[shape[0], 2 * self.hidden()])
        } else {
            Ok(out)
        }
    }
}
