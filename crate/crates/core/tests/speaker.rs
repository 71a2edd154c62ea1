use dpfn_core::loss::{self, SiSnrOptions};
use dpfn_core::nn::{Conv1d, LayerNorm};
use dpfn_core::separation::{ConditioningMode, Separator, SeparatorConfig};
use dpfn_core::signal::{Spectrogram, Waveform};
use dpfn_core::speaker::{
    EmbeddingProjection, ExternalEmbedding, FilterSource, ResidualBlock, ResidualStack, SpeakerNet, SpeakerNetConfig,
};
use dpfn_core::{Graph, ParamId, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn leaky(x: &Mat, s: f64) -> Mat {
    x.iter()
        .map(|r| r.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Same-padded cross-correlation written as explicit loops.
fn conv(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let t = x[0].len();
    let left = (k - 1) / 2;
    let mut out = vec![vec![0.0; t]; co];
    for o in 0..co {
        for (tt, slot) in out[o].iter_mut().enumerate() {
            let mut acc = b.data()[o];
            for i in 0..ci {
                for kk in 0..k {
                    let src = tt as isize + kk as isize - left as isize;
                    if src >= 0 && (src as usize) < t {
                        acc += w.data()[(o * ci + i) * k + kk] * x[i][src as usize];
                    }
                }
            }
            *slot = acc;
        }
    }
    out
}

/// Normalizes every column over the channel axis.
fn layer_norm(x: &Mat, gain: &Tensor, bias: &Tensor, eps: f64) -> Mat {
    let (c, t) = (x.len(), x[0].len());
    let mut out = vec![vec![0.0; t]; c];
    for tt in 0..t {
        let mean = (0..c).map(|i| x[i][tt]).sum::<f64>() / c as f64;
        let var = (0..c).map(|i| (x[i][tt] - mean).powi(2)).sum::<f64>() / c as f64;
        for i in 0..c {
            out[i][tt] = (x[i][tt] - mean) / (var + eps).sqrt() * gain.data()[i] + bias.data()[i];
        }
    }
    out
}

fn oracle_block(store: &ParamStore, b: &ResidualBlock, y: &Mat) -> Mat {
    let a = leaky(y, b.slope);
    let c = conv(&a, store.value(b.conv.weight), store.value(b.conv.bias.unwrap()));
    layer_norm(&c, store.value(b.norm.gain), store.value(b.norm.bias), b.norm.eps)
}

fn oracle_stack(store: &ParamStore, s: &ResidualStack, x: &Mat) -> Mat {
    let mut y = conv(x, store.value(s.entry.weight), store.value(s.entry.bias.unwrap()));
    let mut skip = y.clone();
    for (j, b) in s.blocks.iter().enumerate() {
        y = oracle_block(store, b, &y);
        if j % 2 == 1 {
            y = add(&y, &skip);
            skip = y.clone();
        }
    }
    leaky(&y, s.slope)
}

fn oracle_net(store: &ParamStore, net: &SpeakerNet, spec: &Mat) -> Vec<f64> {
    let mut x = spec.clone();
    for s in &net.stacks {
        x = oracle_stack(store, s, &x);
    }
    let z = conv(&x, store.value(net.proj.weight), store.value(net.proj.bias.unwrap()));
    let pooled: Vec<f64> = z.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let a: Vec<f64> = pooled.iter().map(|v| v.max(0.0)).collect();
    let w = store.value(net.out.weight);
    let b = store.value(net.out.bias.unwrap());
    (0..net.out.out_dim)
        .map(|o| b.data()[o] + (0..net.out.in_dim).map(|i| w.data()[o * net.out.in_dim + i] * a[i]).sum::<f64>())
        .collect()
}

/// Replaces every parameter (including norm gains and biases) with random values.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::uniform(shape, 0.8, &mut rng)).unwrap();
    }
}

fn block(store: &mut ParamStore, name: &str, ch: usize, k: usize, rng: &mut ChaCha8Rng) -> ResidualBlock {
    ResidualBlock {
        conv: Conv1d::new(store, &format!("{name}.conv"), ch, ch, k, 1, true, rng).unwrap().same_padding(k),
        norm: LayerNorm::new(store, &format!("{name}.norm"), ch).unwrap(),
        slope: 0.01,
    }
}

fn run(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Graph, &ParamStore, Var) -> Var) -> Tensor {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = f(&mut g, store, xv);
    g.value(y).clone()
}

fn close(a: &Mat, b: &Tensor, tol: f64) {
    for (ra, rb) in a.iter().zip(to_mat(b)) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }
}

#[test]
fn residual_block_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let b = block(&mut store, "b", 4, 3, &mut rng);
    randomize(&mut store, 2);
    let y = Tensor::uniform([4, 5], 1.0, &mut rng);
    let got = run(&store, &y, |g, s, v| b.forward(g, s, v).unwrap());
    close(&oracle_block(&store, &b, &to_mat(&y)), &got, 1e-10);
}

#[test]
fn residual_block_keeps_shape_and_passes_gradient() {
    for (ch, k, t) in [(3, 3, 7), (6, 5, 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(ch as u64);
        let mut store = ParamStore::new();
        let b = block(&mut store, "b", ch, k, &mut rng);
        let mut g = Graph::new();
        let y = g.leaf(Tensor::uniform([ch, t], 1.0, &mut rng));
        let out = b.forward(&mut g, &store, y).unwrap();
        assert_eq!(g.shape(out), [ch, t]);
        let w = g.constant(Tensor::uniform([ch, t], 1.0, &mut rng));
        let p = g.mul(out, w).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(y).unwrap().data().iter().any(|v| v.abs() > 1e-8));
    }
}

#[test]
fn residual_block_rejects_wrong_channel_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let b = block(&mut store, "b", 4, 3, &mut rng);
    let mut g = Graph::inference();
    let y = g.constant(Tensor::zeros([3, 5]));
    assert!(b.forward(&mut g, &store, y).is_err());
}

fn two_block_stack(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> ResidualStack {
    ResidualStack {
        entry: Conv1d::new(store, "entry", 5, 3, 1, 1, true, rng).unwrap(),
        blocks: vec![block(store, "b0", 3, 3, rng), block(store, "b1", 3, 3, rng)],
        slope: 0.01,
    }
}

#[test]
fn two_block_stack_is_the_hand_wired_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let s = two_block_stack(&mut store, &mut rng);
    randomize(&mut store, 5);
    let x = Tensor::uniform([5, 6], 1.0, &mut rng);
    let got = run(&store, &x, |g, st, v| s.forward(g, st, v).unwrap());
    let hand = run(&store, &x, |g, st, v| {
        let y0 = s.entry.forward(g, st, v).unwrap();
        let a = s.blocks[0].forward(g, st, y0).unwrap();
        let b = s.blocks[1].forward(g, st, a).unwrap();
        let sum = g.add(b, y0).unwrap();
        g.leaky_relu(sum, 0.01).unwrap()
    });
    assert_eq!(got.shape(), [3, 6]);
    assert!(got.max_abs_diff(&hand) < 1e-14);
    close(&oracle_stack(&store, &s, &to_mat(&x)), &got, 1e-10);
}

#[test]
fn zeroed_block_convolutions_reduce_to_norm_bias_plus_skip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let s = two_block_stack(&mut store, &mut rng);
    randomize(&mut store, 7);
    for b in &s.blocks {
        store.set_value(b.conv.weight, Tensor::zeros([3, 3, 3])).unwrap();
        store.set_value(b.conv.bias.unwrap(), Tensor::zeros([3])).unwrap();
    }
    let x = Tensor::uniform([5, 4], 1.0, &mut rng);
    let got = to_mat(&run(&store, &x, |g, st, v| s.forward(g, st, v).unwrap()));
    let y0 = conv(&to_mat(&x), store.value(s.entry.weight), store.value(s.entry.bias.unwrap()));
    let beta = store.value(s.blocks[1].norm.bias).data().to_vec();
    for c in 0..3 {
        for t in 0..4 {
            let v = beta[c] + y0[c][t];
            let expect = if v > 0.0 { v } else { 0.01 * v };
            assert!((got[c][t] - expect).abs() < 1e-12);
        }
    }
}

fn tiny_net(seed: u64) -> (ParamStore, SpeakerNet) {
    let cfg = SpeakerNetConfig {
        stacks: 1,
        blocks: 2,
        residual_channels: 3,
        out_channels: 5,
        filter_dim: 4,
        frame_len: 16,
        hop: 8,
        ..SpeakerNetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = SpeakerNet::new(&mut store, "spk", cfg, &mut rng).unwrap();
    randomize(&mut store, seed + 100);
    (store, net)
}

#[test]
fn full_forward_matches_straight_line_oracle() {
    let (store, net) = tiny_net(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = Tensor::uniform([9, 7], 1.0, &mut rng);
    let got = run(&store, &spec, |g, s, v| net.forward(g, s, v).unwrap());
    assert_eq!(got.shape(), [4]);
    for (a, b) in oracle_net(&store, &net, &to_mat(&spec)).iter().zip(got.data()) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn filter_width_is_independent_of_length() {
    let (store, net) = tiny_net(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for frames in [1, 5, 11] {
        let spec = Tensor::uniform([9, frames], 1.0, &mut rng);
        let got = run(&store, &spec, |g, s, v| net.forward(g, s, v).unwrap());
        assert_eq!(got.shape(), [4]);
    }
    let mut g = Graph::inference();
    let empty = g.constant(Tensor::zeros([9, 0]));
    assert!(net.forward(&mut g, &store, empty).is_err());
}

#[test]
fn pooling_ignores_duplicated_frames() {
    let (store, net) = tiny_net(12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = Tensor::uniform([5, 6], 1.0, &mut rng);
    let once = run(&store, &z, |g, s, v| net.pool_and_project(g, s, v).unwrap());
    let twice = run(&store, &z, |g, s, v| {
        let d = g.concat(&[v, v], 1).unwrap();
        net.pool_and_project(g, s, d).unwrap()
    });
    assert!(once.max_abs_diff(&twice) < 1e-14);
}

#[test]
fn filters_are_deterministic_and_tagged() {
    let (store, net) = tiny_net(14);
    let w = Waveform::new((0..100).map(|k| (k as f64 * 0.3).sin()).collect(), 8000).unwrap();
    let a = net.filter_from_waveform(&store, &w).unwrap();
    let b = net.filter_from_waveform(&store, &w).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.source, FilterSource::LearnedFromAudio);
    assert!(a.v.iter().all(|v| v.is_finite()));
}

#[test]
fn external_embeddings_parse_and_project() {
    let e = ExternalEmbedding::parse("# x-vector export\ndim 3\nlabel spk07\n0.5, -1.25\n2e-1\n").unwrap();
    assert_eq!(e.label.as_deref(), Some("spk07"));
    assert_eq!(e.values, vec![0.5, -1.25, 0.2]);
    assert_eq!(ExternalEmbedding::parse(&e.to_text()).unwrap(), e);
    assert!(ExternalEmbedding::parse("dim 4\n1 2 3\n").is_err());
    assert!(ExternalEmbedding::parse("1 2 3\n").is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let proj = EmbeddingProjection::new(&mut store, "xvec", 3, 3, &mut rng).unwrap();
    let zero = ExternalEmbedding {
        label: None,
        values: vec![0.0; 3],
    };
    assert!(proj.project(&store, &zero).unwrap().v.iter().all(|&v| v == 0.0));
    proj.set_identity(&mut store).unwrap();
    let f = proj.project(&store, &e).unwrap();
    assert_eq!(f.v, e.values);
    assert_eq!(f.source, FilterSource::ExternalEmbedding);
    assert_eq!(f.speaker_label.as_deref(), Some("spk07"));
    let wrong = ExternalEmbedding {
        label: None,
        values: vec![1.0; 4],
    };
    assert!(proj.project(&store, &wrong).is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.emb");
    e.write(&p).unwrap();
    let loaded = dpfn_core::speaker::load_external_embedding(&p, &proj, &store).unwrap();
    assert_eq!(loaded.v, e.values);
}

/// Central differences on parameter values, independent of the backward rules.
fn param_fd(store: &mut ParamStore, id: ParamId, f: &dyn Fn(&ParamStore) -> f64) -> Vec<f64> {
    let base = store.value(id).clone();
    let h = 1e-6;
    (0..base.len())
        .map(|k| {
            let mut p = base.clone();
            p.data_mut()[k] += h;
            store.set_value(id, p.clone()).unwrap();
            let plus = f(store);
            p.data_mut()[k] -= 2.0 * h;
            store.set_value(id, p).unwrap();
            let minus = f(store);
            store.set_value(id, base.clone()).unwrap();
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[test]
fn projection_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let proj = EmbeddingProjection::new(&mut store, "xvec", 5, 3, &mut rng).unwrap();
    randomize(&mut store, 17);
    let x = Tensor::uniform([5], 1.0, &mut rng);
    let objective = |g: &mut Graph, s: &ParamStore| {
        let xv = g.constant(x.clone());
        let v = proj.forward(g, s, xv).unwrap();
        let t = g.tanh(v).unwrap();
        g.sum(t).unwrap()
    };
    let mut g = Graph::new();
    let l = objective(&mut g, &store);
    g.backward(l).unwrap();
    store.accumulate_grads(&g);
    for id in [proj.linear.weight, proj.linear.bias.unwrap()] {
        let analytic = store.grad(id).unwrap().data().to_vec();
        let numeric = param_fd(&mut store, id, &|s: &ParamStore| {
            let mut g = Graph::inference();
            let l = objective(&mut g, s);
            g.value(l).item().unwrap()
        });
        assert!(dpfn_core::gradcheck::relative_error(&analytic, &numeric) < 1e-7);
    }
}

#[test]
fn every_speaker_parameter_learns_through_the_separator() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut store = ParamStore::new();
    let spk_cfg = SpeakerNetConfig {
        stacks: 2,
        blocks: 2,
        residual_channels: 3,
        out_channels: 3,
        filter_dim: 2,
        frame_len: 16,
        hop: 8,
        ..SpeakerNetConfig::default()
    };
    let net = SpeakerNet::new(&mut store, "spk", spk_cfg, &mut rng).unwrap();
    let sep_cfg = SeparatorConfig {
        encoder_filters: 4,
        encoder_kernel: 4,
        encoder_stride: 2,
        bottleneck: 3,
        chunk_size: 4,
        blocks: 2,
        hidden: 2,
        mode: ConditioningMode::Target,
        filter_dim: 2,
        ..SeparatorConfig::default()
    };
    let sep = Separator::new(&mut store, "sep", sep_cfg, &mut rng).unwrap();
    // Break the symmetric initial state so every weight sees signal.
    randomize(&mut store, 19);
    let mix = Tensor::uniform([60], 1.0, &mut rng);
    let target = Tensor::uniform([60], 1.0, &mut rng);
    let enroll = Waveform::new(Tensor::uniform([40], 1.0, &mut rng).into_data(), 8000).unwrap();
    let mut g = Graph::new();
    let f = net.forward_waveform(&mut g, &store, &enroll).unwrap();
    let m = g.constant(mix);
    let out = sep.forward(&mut g, &store, m, Some(f)).unwrap();
    let r = g.constant(target);
    let l = loss::reconstruction_loss(&mut g, &out.waveforms, &[r], SiSnrOptions::default()).unwrap();
    g.backward(l).unwrap();
    store.accumulate_grads(&g);
    for id in store.ids_with_prefix("spk.") {
        let grad = store.grad(id).unwrap_or_else(|| panic!("{} has no gradient", store.name(id)));
        assert!(grad.data().iter().any(|v| v.abs() > 0.0), "{} gradient is zero", store.name(id));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn filter_dim_holds_for_any_duration(len in 16usize..400) {
        let (store, net) = tiny_net(20);
        let w = Waveform::new((0..len).map(|k| (k as f64 * 0.17).cos()).collect(), 8000).unwrap();
        let spec: Spectrogram = net.spectrogram(&w).unwrap();
        prop_assert_eq!(net.extract_filter(&store, &spec).unwrap().dim(), 4);
    }
}

