//! SI-SNR objective, permutation search and output alignment.
//!
//! With estimate `x` and reference `s`:
//!
//! ```text
//! x~  = (<x, s> / <x, x>) x
//! e   = x~ - s
//! SNR = 10 log10((<x~, x~> + eps) / (<e, e> + eps))
//! ```
//!
//! The projection only depends on the direction of `x`, so the value is
//! invariant to rescaling the estimate. No mean is removed unless asked.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::param::ParamStore;
use crate::signal::Waveform;

pub const DEFAULT_EPS: f64 = 1e-8;

/// Largest source count accepted by the exhaustive permutation search.
pub const MAX_PERMUTATION_SOURCES: usize = 4;

/// Guards the projection denominator of an all-zero estimate. Far below any
/// real signal energy, so it does not disturb scale invariance.
const PROJECTION_FLOOR: f64 = 1e-150;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiSnrOptions {
    pub eps: f64,
    pub zero_mean: bool,
}

impl Default for SiSnrOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            zero_mean: false,
        }
    }
}

fn check_lengths(x: usize, s: usize) -> Result<()> {
    if x != s || x == 0 {
        return Err(Error::Shape {
            op: "si_snr",
            lhs: vec![x],
            rhs: vec![s],
        });
    }
    Ok(())
}

/// SI-SNR in dB of `estimate` against `reference`.
pub fn si_snr(estimate: &[f64], reference: &[f64], opts: SiSnrOptions) -> Result<f64> {
    check_lengths(estimate.len(), reference.len())?;
    if opts.eps <= 0.0 {
        return Err(Error::invalid("si_snr eps must be > 0"));
    }
    let centered = |v: &[f64]| -> Vec<f64> {
        if opts.zero_mean {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| a - m).collect()
        } else {
            v.to_vec()
        }
    };
    let (x, s) = (centered(estimate), centered(reference));
    let xs: f64 = x.iter().zip(&s).map(|(a, b)| a * b).sum();
    let xx: f64 = x.iter().map(|a| a * a).sum();
    let scale = xs / (xx + PROJECTION_FLOOR);
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in x.iter().zip(&s) {
        let p = scale * a;
        num += p * p;
        den += (p - b) * (p - b);
    }
    Ok(10.0 * ((num + opts.eps) / (den + opts.eps)).log10())
}

pub fn si_snr_waveforms(estimate: &Waveform, reference: &Waveform, opts: SiSnrOptions) -> Result<f64> {
    si_snr(estimate.samples(), reference.samples(), opts)
}

/// Differentiable SI-SNR (dB, scalar) of 1-D `estimate` against `reference`.
pub fn si_snr_graph(g: &mut Graph, estimate: Var, reference: Var, opts: SiSnrOptions) -> Result<Var> {
    let (se, sr) = (g.shape(estimate).to_vec(), g.shape(reference).to_vec());
    if se.len() != 1 || sr.len() != 1 {
        return Err(Error::Shape {
            op: "si_snr",
            lhs: se,
            rhs: sr,
        });
    }
    check_lengths(se[0], sr[0])?;
    let (x, s) = if opts.zero_mean {
        let mx = g.mean(estimate)?;
        let ms = g.mean(reference)?;
        (g.sub(estimate, mx)?, g.sub(reference, ms)?)
    } else {
        (estimate, reference)
    };
    let xs = g.dot(x, s)?;
    let xx = g.dot(x, x)?;
    let xx = g.add_scalar(xx, PROJECTION_FLOOR)?;
    let scale = g.div(xs, xx)?;
    let proj = g.mul(x, scale)?;
    let err = g.sub(proj, s)?;
    let num = g.dot(proj, proj)?;
    let num = g.add_scalar(num, opts.eps)?;
    let den = g.dot(err, err)?;
    let den = g.add_scalar(den, opts.eps)?;
    let ratio = g.div(num, den)?;
    let ln = g.ln(ratio)?;
    g.scale(ln, 10.0 / std::f64::consts::LN_10)
}

/// Mean of `-SI-SNR` over pre-aligned `(estimate, reference)` pairs.
pub fn reconstruction_loss(g: &mut Graph, estimates: &[Var], references: &[Var], opts: SiSnrOptions) -> Result<Var> {
    if estimates.is_empty() {
        return Err(Error::invalid("reconstruction loss over zero pairs"));
    }
    if estimates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} estimates vs {} references",
            estimates.len(),
            references.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&e, &r) in estimates.iter().zip(references) {
        let v = si_snr_graph(g, e, r, opts)?;
        total = Some(match total {
            Some(t) => g.add(t, v)?,
            None => v,
        });
    }
    g.scale(total.expect("non-empty"), -1.0 / estimates.len() as f64)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

fn check_counts(n_est: usize, n_ref: usize) -> Result<()> {
    if n_est != n_ref {
        return Err(Error::invalid(format!("{n_est} estimates vs {n_ref} references")));
    }
    if n_est == 0 {
        return Err(Error::invalid("permutation search over zero sources"));
    }
    if n_est > MAX_PERMUTATION_SOURCES {
        return Err(Error::invalid(format!(
            "exhaustive permutation search supports at most {MAX_PERMUTATION_SOURCES} sources, got {n_est}"
        )));
    }
    Ok(())
}

/// PIT loss: the smallest reconstruction loss over every assignment of
/// estimates to references. `perm[i]` is the reference matched to estimate `i`.
pub fn pit_loss(
    g: &mut Graph,
    estimates: &[Var],
    references: &[Var],
    opts: SiSnrOptions,
) -> Result<(Var, Vec<usize>)> {
    let n = estimates.len();
    check_counts(n, references.len())?;
    let mut pair = Vec::with_capacity(n * n);
    for &e in estimates {
        for &r in references {
            pair.push(si_snr_graph(g, e, r, opts)?);
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let total: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| g.value(pair[i * n + j]).data()[0])
            .sum();
        let loss = -total / n as f64;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, perm));
        }
    }
    let (_, perm) = best.expect("at least one permutation");
    let mut total = pair[perm[0]];
    for (i, &j) in perm.iter().enumerate().skip(1) {
        total = g.add(total, pair[i * n + j])?;
    }
    let loss = g.scale(total, -1.0 / n as f64)?;
    Ok((loss, perm))
}

/// Assignment maximizing total SI-SNR; `perm[i]` is the reference matched to estimate `i`.
pub fn best_alignment(estimates: &[&[f64]], references: &[&[f64]], opts: SiSnrOptions) -> Result<Vec<usize>> {
    let n = estimates.len();
    check_counts(n, references.len())?;
    let mut scores = vec![0.0; n * n];
    for (i, e) in estimates.iter().enumerate() {
        for (j, r) in references.iter().enumerate() {
            scores[i * n + j] = si_snr(e, r, opts)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| scores[i * n + j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    Ok(best.expect("at least one permutation").1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub estimate: Waveform,
    pub reference: Waveform,
    pub speaker_label: Option<String>,
    pub estimate_index: usize,
    pub reference_index: usize,
    pub si_snr_db: f64,
}

/// Pairs each estimate with the reference that maximizes total SI-SNR.
/// `labels`, when given, names the speaker of each reference.
pub fn align_outputs(
    estimates: &[Waveform],
    references: &[Waveform],
    labels: Option<&[String]>,
    opts: SiSnrOptions,
) -> Result<Vec<AlignedPair>> {
    if let Some(l) = labels {
        if l.len() != references.len() {
            return Err(Error::invalid("one label per reference required"));
        }
    }
    let est: Vec<&[f64]> = estimates.iter().map(Waveform::samples).collect();
    let refs: Vec<&[f64]> = references.iter().map(Waveform::samples).collect();
    let perm = best_alignment(&est, &refs, opts)?;
    perm.iter()
        .enumerate()
        .map(|(i, &j)| {
            Ok(AlignedPair {
                estimate: estimates[i].clone(),
                reference: references[j].clone(),
                speaker_label: labels.map(|l| l[j].clone()),
                estimate_index: i,
                reference_index: j,
                si_snr_db: si_snr(est[i], refs[j], opts)?,
            })
        })
        .collect()
}

/// Cross-entropy of a linear classifier over a speaker filter `[dim]`.
pub fn identity_loss(
    g: &mut Graph,
    store: &ParamStore,
    filter: Var,
    speaker_index: usize,
    classifier: &Linear,
) -> Result<Var> {
    let num_speakers = classifier.out_dim;
    if speaker_index >= num_speakers {
        return Err(Error::invalid(format!(
            "speaker index {speaker_index} out of range for {num_speakers} classes"
        )));
    }
    let logits = classifier.forward(g, store, filter)?;
    cross_entropy(g, logits, speaker_index)
}

/// `-log softmax(logits)[target]` for 1-D `logits`.
pub fn cross_entropy(g: &mut Graph, logits: Var, target: usize) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 1 || target >= shape[0] {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![target],
        });
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.narrow(logp, 0, target, 1)?;
    let picked = g.reshape(picked, &[])?;
    g.neg(picked)
}
