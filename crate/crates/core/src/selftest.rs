//! Dataset-free invariant checks behind `emoavse selftest`.

use std::time::Instant;

use emoavse_tensor::ndarray::{Array1, Array3, Axis};
use emoavse_tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{measured_snr_db, mix_at_snr};
use crate::dsp::{StftParams, StftPlan, Waveform};
use crate::emotion::{broadcast_upsample, emotion_posteriors, EMOTION_DIM};
use crate::error::{Error, Result};
use crate::losses::{mae_loss, stoi_loss};
use crate::metrics::{sdi_metric, stoi_metric};
use crate::model::{ablation_modes, enhance, load_checkpoint, prepare_context, save_checkpoint, Checkpoint, Model, ModelConfig, VideoSource};
use crate::synth::{mouth_track, noise, speech_like, talking_face, NoiseKind};

/// Stage shapes (batch of one) for a 4 s, 16 kHz clip with 30 fps video
/// under the default configuration.
pub const SHAPE_LEDGER: [(&str, &[usize]); 10] = [
    ("spectrogram", &[1, 257, 401]),
    ("input", &[1, 1, 256, 400]),
    ("enc5", &[1, 512, 8, 100]),
    ("visual", &[1, 512, 8, 100]),
    ("emotion", &[1, 512, 8, 100]),
    ("fused", &[1, 1536, 8, 100]),
    ("bottleneck", &[1, 512, 8, 100]),
    ("mask", &[1, 1, 256, 400]),
    ("enhanced", &[1, 257, 401]),
    ("waveform", &[64_000]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn() -> Result<String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn stft_round_trip() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let plan = StftPlan::<f64>::new(StftParams::default())?;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let len = rng.random_range(16_000..=64_000);
        let w = Waveform::new(random_signal(&mut rng, len), 16_000)?;
        let s = plan.stft(&w)?;
        let y = plan.istft(s.magnitude.view(), s.phase.view(), len)?;
        worst = y.iter().zip(&w.samples).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure(worst <= 1e-6, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:.2e}"))
}

fn mixture_snr() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let clean: Waveform<f64> = speech_like(0.5, 16_000, i);
        let n: Waveform<f64> = noise(NoiseKind::Babble, 1.0, 16_000, 100 + i);
        let snr = rng.random_range(-9.0..=6.0);
        let (noisy, _) = mix_at_snr(&clean, &n, snr, rng.random_range(0..8_000))?;
        worst = worst.max((measured_snr_db(&clean.samples, &noisy.samples) - snr).abs());
    }
    ensure(worst <= 1e-4, || format!("max deviation {worst:e} dB"))?;
    Ok(format!("max deviation {worst:.2e} dB"))
}

/// Runs the full default pipeline on a synthetic 4 s talking-face clip and
/// returns every recorded stage shape.
pub fn algorithm_shapes() -> Result<Vec<(&'static str, Vec<usize>)>> {
    let model = Model::<f32>::new(ModelConfig::default())?;
    let x: Waveform<f32> = speech_like(4.0, 16_000, 3);
    let frames = talking_face(96, 72, &mouth_track(&x, 30.0), 3);
    let ctx = prepare_context(&model, &VideoSource::Frames(frames), x.duration_secs(), None)?;
    Ok(enhance(&model, &x, &ctx)?.shapes)
}

fn shape_ledger() -> Result<String> {
    let shapes = algorithm_shapes()?;
    for (stage, expected) in SHAPE_LEDGER {
        let got = shapes.iter().find(|(s, _)| *s == stage).map(|(_, v)| v.as_slice());
        ensure(got == Some(expected), || format!("{stage}: expected {expected:?}, got {got:?}"))?;
    }
    Ok(format!("{} stages", SHAPE_LEDGER.len()))
}

fn metric_identities() -> Result<String> {
    for seed in 0..10 {
        let x: Waveform<f64> = speech_like(1.5, 16_000, seed);
        let s = stoi_metric(&x, &x)?;
        ensure((s - 1.0).abs() <= 1e-6, || format!("stoi(x, x) = {s}"))?;
        let two: Vec<f64> = x.samples.iter().map(|v| 2.0 * v).collect();
        ensure(sdi_metric(&x.samples, &x.samples)? == 0.0, || "sdi(x, x) != 0".into())?;
        ensure(sdi_metric(&x.samples, &two)? == 1.0, || "sdi(x, 2x) != 1".into())?;
    }
    let x: Waveform<f64> = speech_like(1.0, 16_000, 11);
    let n: Waveform<f64> = noise(NoiseKind::White, 1.0, 16_000, 12);
    let mut last = -1.0;
    for k in 0..10 {
        let a = k as f64 * 0.1;
        let deg: Vec<f64> = x.samples.iter().zip(&n.samples).map(|(s, v)| s + a * v).collect();
        let d = sdi_metric(&x.samples, &deg)?;
        ensure(d > last, || format!("sdi not increasing at gain {a}"))?;
        last = d;
    }
    Ok("stoi self-score, sdi identities, sdi monotone".into())
}

fn max_relative_error(f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>, x: &[f64], coords: &[usize], h: f64) -> Result<f64> {
    let (_, g) = f(x)?;
    let mut worst = 0.0f64;
    for &i in coords {
        let mut p = x.to_vec();
        p[i] += h;
        let up = f(&p)?.0;
        p[i] -= 2.0 * h;
        let down = f(&p)?.0;
        let fd = (up - down) / (2.0 * h);
        let scale = fd.abs().max(g[i].abs()).max(1e-8);
        worst = worst.max((fd - g[i]).abs() / scale);
    }
    Ok(worst)
}

fn loss_gradients() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reference: Waveform<f64> = speech_like(0.6, 16_000, 5);
    let est: Vec<f64> = reference.samples.iter().map(|v| 0.7 * v + rng.random_range(-0.02..0.02)).collect();
    let coords: Vec<usize> = (0..8).map(|_| rng.random_range(0..est.len())).collect();
    let stoi = max_relative_error(|e| stoi_loss(e, &reference.samples, 16_000).map(|(l, g)| (l.value, g)), &est, &coords, 1e-4)?;
    let m_ref: Vec<f64> = random_signal(&mut rng, 64);
    let m_est: Vec<f64> = m_ref.iter().map(|v| v + 0.3).collect();
    let view = |v: &[f64]| Array1::from(v.to_vec()).into_dyn();
    let mae = max_relative_error(
        |e| mae_loss(view(e).view(), view(&m_ref).view()).map(|(l, g)| (l.value, g.iter().copied().collect())),
        &m_est,
        &[0, 7, 31, 63],
        1e-6,
    )?;
    ensure(stoi <= 1e-3 && mae <= 1e-3, || format!("relative error stoi {stoi:e}, mae {mae:e}"))?;
    Ok(format!("relative error stoi {stoi:.1e}, mae {mae:.1e}"))
}

fn emotion_contracts() -> Result<String> {
    let model = Model::<f64>::new(ModelConfig { use_video: false, ..ModelConfig::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let col = Array1::from(random_signal(&mut rng, EMOTION_DIM));
        let p = emotion_posteriors(&model.params, col.view())?;
        let sum: f64 = p.sum();
        ensure((sum - 1.0).abs() <= 1e-6, || format!("posteriors sum to {sum}"))?;
    }
    let g = Graph::<f64>::inference();
    let p = g.constant(Array3::from_shape_fn((1, 4, 7), |(_, c, t)| (c * 7 + t) as f64).into_dyn());
    let b = g.value(broadcast_upsample(&g, p, 20));
    let first = b.index_axis(Axis(2), 0);
    ensure(b.axis_iter(Axis(2)).all(|s| s == first), || "broadcast slices differ".into())?;
    Ok("posteriors normalised, broadcast slices identical".into())
}

fn ablation_counts() -> Result<String> {
    let counts: Vec<usize> = ablation_modes()
        .into_iter()
        .map(|(_, video, emotion)| {
            Model::<f32>::new(ModelConfig { use_video: video, use_emotion: emotion, ..ModelConfig::default() })
                .map(|m| m.trainable_count())
        })
        .collect::<Result<_>>()?;
    ensure(counts.windows(2).all(|w| w[0] < w[1]), || format!("counts {counts:?}"))?;
    Ok(format!("trainable parameters {counts:?}"))
}

fn checkpoint_determinism() -> Result<String> {
    let cfg = ModelConfig { channels: vec![4, 4, 6, 6, 8], seed: 9, ..ModelConfig::default() };
    let model = Model::<f32>::new(cfg)?;
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(&model))?;
    let back = load_checkpoint::<f32>(&path)?.into_model();
    ensure(back.params == model.params, || "checkpoint round trip changed parameters".into())?;
    let x: Waveform<f32> = speech_like(1.0, 16_000, 10);
    let frames = talking_face(64, 48, &mouth_track(&x, 30.0), 10);
    let run = |m: &Model<f32>| -> Result<Vec<u32>> {
        let ctx = prepare_context(m, &VideoSource::Frames(frames.clone()), 1.0, None)?;
        Ok(enhance(m, &x, &ctx)?.waveform.samples.iter().map(|v| v.to_bits()).collect())
    };
    ensure(run(&model)? == run(&back)?, || "enhancement differs between runs".into())?;
    Ok("bit-identical after reload".into())
}

pub const CHECKS: [(&str, Check); 8] = [
    ("stft_round_trip", stft_round_trip),
    ("mixture_snr", mixture_snr),
    ("shape_ledger", shape_ledger),
    ("metric_identities", metric_identities),
    ("loss_gradients", loss_gradients),
    ("emotion_contracts", emotion_contracts),
    ("ablation_counts", ablation_counts),
    ("checkpoint_determinism", checkpoint_determinism),
];

/// Runs every check, never stopping at the first failure.
pub fn run_selftest(mut progress: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let t = Instant::now();
            let (passed, detail) = match check() {
                Ok(d) => (true, d),
                Err(e) => (false, e.to_string()),
            };
            let r = CheckResult { name, passed, detail, seconds: t.elapsed().as_secs_f64() };
            progress(&r);
            r
        })
        .collect()
}
