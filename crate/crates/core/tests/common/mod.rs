//! Shared helpers: the finite-difference catalog of differentiable operations.
#![allow(dead_code)]

use dpfn_core::gradcheck;
use dpfn_core::loss::{self, SiSnrOptions};
use dpfn_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Inputs = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
pub type Objective = fn(&mut Graph, &[Var]) -> Result<Var>;

pub struct GradCase {
    pub name: &'static str,
    /// Polynomial of degree <= 2 in every input, so central differences are exact up to rounding.
    pub linear: bool,
    pub inputs: Inputs,
    pub f: Objective,
}

/// Reduces any output to a scalar with fixed, non-uniform weights.
pub fn weighted(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|k| (1.3 * k as f64 + 0.7).sin()).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn u(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero, for kinks and poles.
fn away(rng: &mut ChaCha8Rng, shape: &[usize], floor: f64) -> Tensor {
    let mut t = u(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (floor + v.abs());
    }
    t
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = u(rng, shape);
    for v in t.data_mut() {
        *v = 0.2 + v.abs();
    }
    t
}

fn two(rng: &mut ChaCha8Rng, a: &[usize], b: &[usize]) -> Vec<Tensor> {
    vec![u(rng, a), u(rng, b)]
}

/// Unrolled LSTM over 4 steps with shared weights: `x [4,2]`, `w_x [2,8]`, `w_h [2,8]`, `b [8]`.
fn lstm_unrolled(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let (x, wx, wh, b) = (v[0], v[1], v[2], v[3]);
    let mut h = g.constant(Tensor::zeros([1, 2]));
    let mut c = g.constant(Tensor::zeros([1, 2]));
    let mut outs = Vec::new();
    for t in 0..4 {
        let xt = g.narrow(x, 0, t, 1)?;
        let a = g.matmul(xt, wx)?;
        let r = g.matmul(h, wh)?;
        let s = g.add(a, r)?;
        let gates = g.add(s, b)?;
        let (h2, c2) = g.lstm_cell(gates, c)?;
        h = h2;
        c = c2;
        outs.push(h);
    }
    let all = g.concat(&outs, 0)?;
    weighted(g, all)
}

pub fn catalog() -> Vec<GradCase> {
    macro_rules! case {
        ($name:expr, $lin:expr, $inputs:expr, $f:expr) => {
            GradCase {
                name: $name,
                linear: $lin,
                inputs: $inputs,
                f: $f,
            }
        };
    }
    vec![
        case!("add", true, |r| two(r, &[3, 4], &[3, 4]), |g, v| {
            let o = g.add(v[0], v[1])?;
            weighted(g, o)
        }),
        case!("add_broadcast", true, |r| two(r, &[2, 3, 4], &[3, 4]), |g, v| {
            let o = g.add(v[0], v[1])?;
            weighted(g, o)
        }),
        case!("sub", true, |r| two(r, &[3, 4], &[4]), |g, v| {
            let o = g.sub(v[0], v[1])?;
            weighted(g, o)
        }),
        case!("mul", true, |r| two(r, &[3, 4], &[4]), |g, v| {
            let o = g.mul(v[0], v[1])?;
            weighted(g, o)
        }),
        case!("div", false, |r| vec![u(r, &[3, 4]), away(r, &[3, 4], 0.5)], |g, v| {
            let o = g.div(v[0], v[1])?;
            weighted(g, o)
        }),
        case!("neg", true, |r| vec![u(r, &[5])], |g, v| {
            let o = g.neg(v[0])?;
            weighted(g, o)
        }),
        case!("scale", true, |r| vec![u(r, &[5])], |g, v| {
            let o = g.scale(v[0], -2.5)?;
            weighted(g, o)
        }),
        case!("add_scalar", true, |r| vec![u(r, &[5])], |g, v| {
            let o = g.add_scalar(v[0], 0.3)?;
            let o = g.mul(o, o)?;
            weighted(g, o)
        }),
        case!("relu", false, |r| vec![away(r, &[3, 4], 0.05)], |g, v| {
            let o = g.relu(v[0])?;
            weighted(g, o)
        }),
        case!("leaky_relu", false, |r| vec![away(r, &[3, 4], 0.05)], |g, v| {
            let o = g.leaky_relu(v[0], 0.1)?;
            weighted(g, o)
        }),
        case!("prelu", false, |r| vec![away(r, &[3, 4], 0.05), u(r, &[4])], |g, v| {
            let o = g.prelu(v[0], v[1])?;
            weighted(g, o)
        }),
        case!("sigmoid", false, |r| vec![u(r, &[3, 4])], |g, v| {
            let o = g.sigmoid(v[0])?;
            weighted(g, o)
        }),
        case!("tanh", false, |r| vec![u(r, &[3, 4])], |g, v| {
            let o = g.tanh(v[0])?;
            weighted(g, o)
        }),
        case!("ln", false, |r| vec![positive(r, &[3, 4])], |g, v| {
            let o = g.ln(v[0])?;
            weighted(g, o)
        }),
        case!("exp", false, |r| vec![u(r, &[3, 4])], |g, v| {
            let o = g.exp(v[0])?;
            weighted(g, o)
        }),
        case!("sum", true, |r| vec![u(r, &[3, 4])], |g, v| {
            let s = g.sum(v[0])?;
            g.mul(s, s)
        }),
        case!("mean", true, |r| vec![u(r, &[3, 4])], |g, v| {
            let s = g.mean(v[0])?;
            g.mul(s, s)
        }),
        case!("dot", true, |r| two(r, &[6], &[6]), |g, v| g.dot(v[0], v[1])),
        case!("mean_axis", true, |r| vec![u(r, &[2, 3, 4])], |g, v| {
            let o = g.mean_axis(v[0], 1)?;
            weighted(g, o)
        }),
        case!("sum_axis", true, |r| vec![u(r, &[2, 3, 4])], |g, v| {
            let o = g.sum_axis(v[0], 2)?;
            weighted(g, o)
        }),
        case!("matmul", true, |r| two(r, &[3, 4], &[4, 2]), |g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted(g, o)
        }),
        case!("matmul_transposed", true, |r| two(r, &[4, 3], &[2, 4]), |g, v| {
            let o = g.matmul_t(v[0], v[1], true, true)?;
            weighted(g, o)
        }),
        case!("conv1d", true, |r| vec![u(r, &[2, 9]), u(r, &[3, 2, 3]), u(r, &[3])], |g, v| {
            let o = g.conv1d(v[0], v[1], Some(v[2]), 2, (1, 2))?;
            weighted(g, o)
        }),
        case!("transpose_conv1d", true, |r| two(r, &[2, 5], &[2, 3, 4]), |g, v| {
            let o = g.transpose_conv1d(v[0], v[1], 2)?;
            weighted(g, o)
        }),
        case!("concat", true, |r| two(r, &[2, 3], &[2, 2]), |g, v| {
            let o = g.concat(&[v[0], v[1]], 1)?;
            weighted(g, o)
        }),
        case!("stack", true, |r| two(r, &[2, 3], &[2, 3]), |g, v| {
            let o = g.stack(&[v[0], v[1]])?;
            weighted(g, o)
        }),
        case!("narrow", true, |r| vec![u(r, &[3, 6])], |g, v| {
            let o = g.narrow(v[0], 1, 2, 3)?;
            weighted(g, o)
        }),
        case!("split", true, |r| vec![u(r, &[4, 5])], |g, v| {
            let parts = g.split(v[0], 1, &[2, 3])?;
            let a = weighted(g, parts[0])?;
            let b = g.mul(parts[1], parts[1])?;
            let b = weighted(g, b)?;
            g.add(a, b)
        }),
        case!("reshape", true, |r| vec![u(r, &[2, 6])], |g, v| {
            let o = g.reshape(v[0], &[3, 4])?;
            weighted(g, o)
        }),
        case!("permute", true, |r| vec![u(r, &[2, 3, 4])], |g, v| {
            let o = g.permute(v[0], &[2, 0, 1])?;
            weighted(g, o)
        }),
        case!("transpose", true, |r| vec![u(r, &[3, 5])], |g, v| {
            let o = g.transpose(v[0])?;
            weighted(g, o)
        }),
        case!("pad", true, |r| vec![u(r, &[3, 4])], |g, v| {
            let o = g.pad(v[0], 1, 2, 1)?;
            weighted(g, o)
        }),
        case!("layer_norm", false, |r| vec![u(r, &[3, 5]), u(r, &[5]), u(r, &[5])], |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1, 1e-8)?;
            weighted(g, o)
        }),
        case!("layer_norm_inner_axis", false, |r| vec![u(r, &[2, 4, 3]), u(r, &[4]), u(r, &[4])], |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1, 1e-8)?;
            weighted(g, o)
        }),
        case!("log_softmax", false, |r| vec![u(r, &[3, 5])], |g, v| {
            let o = g.log_softmax(v[0])?;
            weighted(g, o)
        }),
        case!("segment", true, |r| vec![u(r, &[11, 2])], |g, v| {
            let o = g.segment(v[0], 4, 2, 6)?;
            weighted(g, o)
        }),
        case!("overlap_add", true, |r| vec![u(r, &[4, 6, 2])], |g, v| {
            let o = g.overlap_add(v[0], 2, 11)?;
            weighted(g, o)
        }),
        case!("lstm_cell", false, |r| vec![u(r, &[2, 12]), u(r, &[2, 3])], |g, v| {
            let (h, c) = g.lstm_cell(v[0], v[1])?;
            let a = weighted(g, h)?;
            let c2 = g.scale(c, 0.7)?;
            let b = weighted(g, c2)?;
            g.add(a, b)
        }),
        case!(
            "lstm_bptt",
            false,
            |r| vec![u(r, &[4, 2]), u(r, &[2, 8]), u(r, &[2, 8]), u(r, &[8])],
            lstm_unrolled
        ),
        case!("si_snr", false, |r| two(r, &[16], &[16]), |g, v| {
            loss::si_snr_graph(g, v[0], v[1], SiSnrOptions::default())
        }),
        case!("si_snr_zero_mean", false, |r| two(r, &[16], &[16]), |g, v| {
            loss::si_snr_graph(
                g,
                v[0],
                v[1],
                SiSnrOptions {
                    zero_mean: true,
                    ..SiSnrOptions::default()
                },
            )
        }),
        case!("cross_entropy", false, |r| vec![u(r, &[5])], |g, v| loss::cross_entropy(g, v[0], 2)),
    ]
}

pub struct CaseResult {
    pub name: &'static str,
    pub linear: bool,
    pub worst: f64,
}

impl CaseResult {
    pub fn tolerance(&self) -> f64 {
        if self.linear {
            1e-6
        } else {
            1e-5
        }
    }

    pub fn passed(&self) -> bool {
        self.worst < self.tolerance()
    }
}

/// Runs `trials` random trials of one case; returns the worst relative error.
pub fn run_case(case: &GradCase, trials: u64) -> CaseResult {
    let h = if case.linear { 1e-3 } else { 1e-5 };
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let _ = rng.random::<u32>();
        let inputs = (case.inputs)(&mut rng);
        let report = gradcheck::check(&inputs, h, case.f).unwrap_or_else(|e| panic!("{}: {e}", case.name));
        worst = worst.max(report.max_rel_error());
    }
    CaseResult {
        name: case.name,
        linear: case.linear,
        worst,
    }
}
