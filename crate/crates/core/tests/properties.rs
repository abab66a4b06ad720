use emoavse::data::{measured_snr_db, mix_at_snr, segment_spans, split_sizes};
use emoavse::dsp::{StftParams, StftPlan};
use emoavse::emotion::softmax;
use emoavse::losses::mae_loss;
use emoavse::metrics::{sdi_metric, stoi_metric};
use emoavse::synth::speech_like;
use emoavse::visual::temporal_align;
use emoavse::Waveform64;
use emoavse_tensor::ndarray::{Array1, Array2};
use proptest::prelude::*;

fn signal(len: usize, seed: u64) -> Vec<f64> {
    // xorshift; independent of the crate's generators
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stft_round_trip(len in 800usize..20_000, seed in any::<u64>()) {
        let plan = StftPlan::<f64>::new(StftParams::default()).unwrap();
        let w = Waveform64::new(signal(len, seed), 16_000).unwrap();
        let s = plan.stft(&w).unwrap();
        let y = plan.istft(s.magnitude.view(), s.phase.view(), len).unwrap();
        let err = y.iter().zip(&w.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-6, "{}", err);
    }

    #[test]
    fn mixing_hits_target_snr(snr in -9.0f64..=6.0, seed in any::<u64>(), offset in 0usize..30_000) {
        let clean = Waveform64::new(signal(8_000, seed), 16_000).unwrap();
        let noise = Waveform64::new(signal(12_000, seed ^ 1), 16_000).unwrap();
        let (noisy, _) = mix_at_snr(&clean, &noise, snr, offset).unwrap();
        prop_assert!((measured_snr_db(&clean.samples, &noisy.samples) - snr).abs() <= 1e-4);
    }

    #[test]
    fn sdi_matches_direct_sums(seed in any::<u64>(), gain in 0.0f64..3.0) {
        let x = signal(2_000, seed);
        let n = signal(2_000, seed ^ 7);
        let deg: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + gain * b).collect();
        let oracle = n.iter().map(|v| (gain * v).powi(2)).sum::<f64>() / x.iter().map(|v| v * v).sum::<f64>();
        prop_assert!((sdi_metric(&x, &deg).unwrap() - oracle).abs() <= 1e-9 * oracle.max(1.0));
        prop_assert_eq!(sdi_metric(&x, &x).unwrap(), 0.0);
        let twice: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        prop_assert_eq!(sdi_metric(&x, &twice).unwrap(), 1.0);
    }

    #[test]
    fn sdi_increases_with_noise_gain(seed in any::<u64>()) {
        let x = signal(1_000, seed);
        let n = signal(1_000, seed ^ 3);
        let values: Vec<f64> = (0..10)
            .map(|k| {
                let a = k as f64 * 0.25;
                let deg: Vec<f64> = x.iter().zip(&n).map(|(s, v)| s + a * v).collect();
                sdi_metric(&x, &deg).unwrap()
            })
            .collect();
        prop_assert!(values.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn softmax_is_a_distribution(logits in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
        let p = softmax(Array1::from(logits).view());
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn split_sizes_partition(n in 0usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (a, b) = (a * 0.5, b * 0.5);
        let s = split_sizes(n, [a, b, 1.0 - a - b]);
        prop_assert_eq!(s.iter().sum::<usize>(), n);
    }

    #[test]
    fn segments_tile_without_overlap(len in 1usize..200_000, seg in 1usize..70_000) {
        let spans = segment_spans(len, seg);
        for w in spans.windows(2) {
            prop_assert_eq!(w[0].0 + w[0].1, w[1].0);
        }
        for &(start, n) in &spans {
            prop_assert!(start + n <= len && n <= seg && 2 * n >= seg);
        }
    }

    #[test]
    fn mae_is_nonnegative_and_zero_at_equality(x in proptest::collection::vec(-5.0f64..5.0, 1..64), d in -1.0f64..1.0) {
        let a = Array1::from(x.clone()).into_dyn();
        let b = Array1::from(x.iter().map(|v| v + d).collect::<Vec<_>>()).into_dyn();
        let (l, _) = mae_loss(a.view(), b.view()).unwrap();
        prop_assert!(l.value >= 0.0);
        prop_assert!((l.value - d.abs()).abs() <= 1e-12);
        prop_assert_eq!(mae_loss(a.view(), a.view()).unwrap().0.value, 0.0);
    }

    #[test]
    fn temporal_align_keeps_endpoints(n in 2usize..50, target in 2usize..200) {
        let x = Array2::from_shape_fn((3, n), |(c, t)| (c * 100 + t) as f64);
        let y = temporal_align(&x, target).unwrap();
        prop_assert_eq!(y.dim(), (3, target));
        for c in 0..3 {
            prop_assert!((y[[c, 0]] - x[[c, 0]]).abs() < 1e-12);
            prop_assert!((y[[c, target - 1]] - x[[c, n - 1]]).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn stoi_self_score_is_one(seed in any::<u64>(), seconds in 1.0f64..3.0) {
        let x: Waveform64 = speech_like(seconds, 16_000, seed);
        prop_assert!((stoi_metric(&x, &x).unwrap() - 1.0).abs() <= 1e-6);
    }
}

fn emotion_model() -> &'static emoavse::Model64 {
    static MODEL: std::sync::OnceLock<emoavse::Model64> = std::sync::OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = emoavse::model::ModelConfig { channels: vec![4, 4, 6, 6, 8], use_video: false, ..Default::default() };
        emoavse::Model64::new(cfg).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn posteriors_are_distributions(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let col = Array1::from(signal(emoavse::emotion::EMOTION_DIM, seed)) * scale;
        let p = emoavse::emotion::emotion_posteriors(&emotion_model().params, col.view()).unwrap();
        prop_assert_eq!(p.len(), emoavse::emotion::EMOTION_CLASSES.len());
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.sum() - 1.0).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn temporal_align_stays_within_channel_bounds(n in 1usize..60, target in 1usize..200, seed in any::<u64>()) {
        let x = Array2::from_shape_vec((4, n), signal(4 * n, seed)).unwrap();
        let y = temporal_align(&x, target).unwrap();
        for c in 0..4 {
            let row = x.row(c);
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(y.row(c).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }
}

#[test]
fn frozen_backends_are_not_trainable() {
    let m = emoavse::Model32::new(emoavse::model::ModelConfig { channels: vec![4, 4, 6, 6, 8], ..Default::default() }).unwrap();
    let names = m.params.trainable_names();
    assert!(names.iter().all(|n| !n.starts_with("emotion.front") && !n.starts_with("emotion.head") && !n.starts_with("visual.front")));
    assert!(names.contains(&"emotion.proj.w") && names.iter().any(|n| n.starts_with("visual.tcn")));
    let total: usize = m.params.iter().map(|(_, p)| p.value.len()).sum();
    assert_eq!(m.params.trainable_count() + m.params.frozen_count(), total);
    assert!(m.params.frozen_count() > 0);
}

#[test]
fn visual_features_are_bit_identical_across_runs() {
    use emoavse::visual::{track_and_crop, visual_encode, FaceDetector, StubDetector, VisualFrontKind};
    let m = emoavse::Model32::new(emoavse::model::ModelConfig { channels: vec![4, 4, 6, 6, 8], ..Default::default() }).unwrap();
    let frames = emoavse::synth::talking_face(80, 60, &[0.1, 0.4, 0.8, 0.3, 0.0, 0.6], 4);
    let run = || {
        let d = StubDetector.detect_all(&frames).unwrap();
        let crops = track_and_crop(&frames, &d).unwrap();
        visual_encode(&m.params, VisualFrontKind::Stub, &crops).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.dim(), (8, 6));
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
