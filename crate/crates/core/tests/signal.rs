use dpfn_core::signal::{self, Waveform, SAMPLE_RATE, STFT_FRAME, STFT_HOP};
use dpfn_core::{Error, Graph, Tensor};
use proptest::prelude::*;

/// Direct O(n^2) DFT magnitude of one Hann-windowed frame.
fn dft_mag(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let win: Vec<f64> = (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())
        .collect();
    (0..=n / 2)
        .map(|f| {
            let (mut re, mut im) = (0.0, 0.0);
            for (k, (&x, &w)) in frame.iter().zip(&win).enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (f * k) as f64 / n as f64;
                re += x * w * ang.cos();
                im += x * w * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

fn wave(samples: Vec<f64>) -> Waveform {
    Waveform::new(samples, SAMPLE_RATE).unwrap()
}

#[test]
fn default_analysis_is_160ms_by_80ms() {
    assert_eq!(STFT_FRAME, (0.160 * SAMPLE_RATE as f64) as usize);
    assert_eq!(STFT_HOP, (0.080 * SAMPLE_RATE as f64) as usize);
}

#[test]
fn hann_window_matches_closed_form_and_is_symmetric() {
    let w = signal::hann_window(9).unwrap();
    let expect = [0.0, 0.146446609406726, 0.5, 0.853553390593274, 1.0];
    for (k, e) in expect.iter().enumerate() {
        assert!((w[k] - e).abs() < 1e-12);
        assert_eq!(w[k], w[8 - k]);
    }
    assert!(signal::hann_window(1).is_err());
}

#[test]
fn stft_matches_a_direct_dft() {
    let x: Vec<f64> = (0..40).map(|k| ((k * k) as f64 * 0.13).sin()).collect();
    let spec = signal::stft_mag(&wave(x.clone()), 16, 8).unwrap();
    assert_eq!(spec.frames(), 4);
    assert_eq!(spec.bins(), 9);
    for t in 0..spec.frames() {
        let oracle = dft_mag(&x[t * 8..t * 8 + 16]);
        for (f, o) in oracle.iter().enumerate() {
            assert!((spec.get(f, t) - o).abs() < 1e-10);
        }
    }
}

#[test]
fn a_pure_tone_peaks_in_its_bin() {
    let bin = 160;
    let f0 = bin as f64 * SAMPLE_RATE as f64 / STFT_FRAME as f64;
    let x: Vec<f64> = (0..8000)
        .map(|n| (2.0 * std::f64::consts::PI * f0 * n as f64 / SAMPLE_RATE as f64).sin())
        .collect();
    let spec = signal::stft_mag(&wave(x), STFT_FRAME, STFT_HOP).unwrap();
    for t in 0..spec.frames() {
        let argmax = (0..spec.bins())
            .max_by(|&a, &b| spec.get(a, t).total_cmp(&spec.get(b, t)))
            .unwrap();
        assert_eq!(argmax, bin);
    }
}

#[test]
fn short_signals_are_rejected() {
    let err = signal::stft_mag(&wave(vec![0.1; STFT_FRAME - 1]), STFT_FRAME, STFT_HOP).unwrap_err();
    assert!(matches!(err, Error::InputTooShort { .. }));
}

#[test]
fn malformed_wav_headers_are_format_errors() {
    let good = signal::encode_wav(&wave(vec![0.25, -0.5, 0.0]));
    assert!(matches!(signal::decode_wav(&good[..10]), Err(Error::Format { .. })));
    let mut stereo = good.clone();
    stereo[22] = 2;
    assert!(matches!(signal::decode_wav(&stereo), Err(Error::Format { .. })));
    let mut eight_bit = good.clone();
    eight_bit[34] = 8;
    assert!(matches!(signal::decode_wav(&eight_bit), Err(Error::Format { .. })));
    let mut truncated = good.clone();
    truncated.truncate(good.len() - 1);
    assert!(signal::decode_wav(&truncated).is_err());
}

#[test]
fn wav_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.wav");
    let w = Waveform::new(vec![0.5, -0.25, 0.125, 0.875], 16000).unwrap();
    signal::write_wav(&p, &w).unwrap();
    let back = signal::read_wav(&p).unwrap();
    assert_eq!(back, w);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frame_count_matches_the_stft(len in STFT_FRAME..20_000usize) {
        let spec = signal::stft_mag(&wave(vec![0.01; len]), STFT_FRAME, STFT_HOP).unwrap();
        prop_assert_eq!(spec.frames(), 1 + (len - STFT_FRAME) / STFT_HOP);
        prop_assert_eq!(spec.frames(), signal::frame_count(len, STFT_FRAME, STFT_HOP));
        prop_assert_eq!(spec.bins(), STFT_FRAME / 2 + 1);
    }

    #[test]
    fn magnitude_ignores_sign(x in prop::collection::vec(-1.0f64..1.0, 64..200)) {
        let a = signal::stft_mag(&wave(x.clone()), 32, 16).unwrap();
        let b = signal::stft_mag(&wave(x.iter().map(|v| -v).collect()), 32, 16).unwrap();
        prop_assert_eq!(a.mags(), b.mags());
    }

    #[test]
    fn framing_then_overlap_add_is_identity(
        x in prop::collection::vec(-1.0f64..1.0, 40..300),
        frame in 4usize..32,
        hop_frac in 1usize..=4,
    ) {
        let hop = (frame / hop_frac).max(1);
        let frames = signal::frame_signal(&x, frame, hop).unwrap();
        let y = signal::overlap_add_signal(&frames, hop).unwrap();
        prop_assert!(y.len() <= x.len());
        for (a, b) in y.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn chunking_round_trips(t in 1usize..60, f in 1usize..4, half in 1usize..6) {
        let chunk = 2 * half;
        let hop = half;
        let n = t.div_ceil(hop);
        let x = Tensor::new([t, f], (0..t * f).map(|k| (k as f64 * 0.61).sin()).collect()).unwrap();
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let seg = g.segment(xv, chunk, hop, n).unwrap();
        let back = g.overlap_add(seg, hop, t).unwrap();
        prop_assert!(g.value(back).max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn wav_round_trip_within_one_step(x in prop::collection::vec(-1.0f64..0.99, 1..500)) {
        let w = wave(x.clone());
        let back = signal::decode_wav(&signal::encode_wav(&w)).unwrap();
        prop_assert_eq!(back.sample_rate(), SAMPLE_RATE);
        for (a, b) in back.samples().iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
        let again = signal::decode_wav(&signal::encode_wav(&back)).unwrap();
        prop_assert_eq!(again, back);
    }
}
