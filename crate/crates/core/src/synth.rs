//! Deterministic synthetic fixtures: speech-like signals, noise and talking-face
//! videos. Used by the self-test, the examples in the README and the tests, so
//! that nothing depends on a downloaded corpus.

use emoavse_tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::Waveform;
use crate::visual::FrameSequence;

/// Voiced syllables with a gliding pitch, three formant-weighted harmonic
/// groups, short fricative bursts and pauses between syllables.
pub fn speech_like<T: Scalar>(seconds: f64, sample_rate: u32, seed: u64) -> Waveform<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eec);
    let fs = sample_rate as f64;
    let len = ((seconds * fs).round() as usize).max(1);
    let mut out = vec![0.0f64; len];
    let tau = 2.0 * std::f64::consts::PI;
    let mut t0 = rng.random_range(0.0..0.08) * fs;
    while (t0 as usize) < len {
        let dur = rng.random_range(0.12..0.32) * fs;
        let f0a = rng.random_range(95.0..230.0);
        let f0b = f0a * rng.random_range(0.8..1.25);
        let formants = [
            rng.random_range(300.0..900.0),
            rng.random_range(900.0..2300.0),
            rng.random_range(2300.0..3400.0),
        ];
        let amp = rng.random_range(0.15..0.35);
        let mut phase = 0.0f64;
        let start = t0 as usize;
        let stop = ((t0 + dur) as usize).min(len);
        for (i, slot) in out[start..stop].iter_mut().enumerate() {
            let u = i as f64 / dur;
            let f0 = f0a + (f0b - f0a) * u;
            phase += tau * f0 / fs;
            let env = (std::f64::consts::PI * u).sin().powf(0.7);
            let mut v = 0.0;
            let mut h = 1.0;
            while h * f0 < 4000.0 {
                let f = h * f0;
                let gain: f64 = formants
                    .iter()
                    .map(|fc| 1.0 / (1.0 + ((f - fc) / 120.0).powi(2)))
                    .sum::<f64>()
                    + 0.05 / h;
                v += gain * (h * phase).sin();
                h += 1.0;
            }
            *slot += amp * env * v * 0.25;
        }
        // Occasional fricative tail.
        if rng.random_bool(0.4) {
            let flen = (rng.random_range(0.04..0.09) * fs) as usize;
            let fstart = stop.min(len);
            let fend = (fstart + flen).min(len);
            let mut prev = 0.0;
            for (i, slot) in out[fstart..fend].iter_mut().enumerate() {
                let white = rng.random_range(-1.0..1.0);
                let hp = white - prev;
                prev = white;
                let env = (std::f64::consts::PI * i as f64 / flen as f64).sin();
                *slot += 0.04 * env * hp;
            }
        }
        t0 += dur + rng.random_range(0.03..0.2) * fs;
    }
    Waveform { samples: out.into_iter().map(T::lit).collect(), sample_rate }
}

/// Kinds of synthetic noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    /// First-order low-passed ("brown-ish") noise.
    Rumble,
    /// Overlapping speech-like signals.
    Babble,
    /// Tonal hum plus harmonics.
    Hum,
}

pub fn noise<T: Scalar>(kind: NoiseKind, seconds: f64, sample_rate: u32, seed: u64) -> Waveform<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0153_0153);
    let len = ((seconds * sample_rate as f64).round() as usize).max(1);
    let samples: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| rng.random_range(-0.5..0.5)).collect(),
        NoiseKind::Rumble => {
            let mut s = 0.0;
            (0..len)
                .map(|_| {
                    s = 0.98 * s + 0.1 * rng.random_range(-1.0..1.0);
                    s
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; len];
            for k in 0..4 {
                let w: Waveform<f64> = speech_like(seconds, sample_rate, seed.wrapping_mul(31).wrapping_add(k));
                for (a, b) in acc.iter_mut().zip(&w.samples) {
                    *a += b;
                }
            }
            acc
        }
        NoiseKind::Hum => {
            let f = rng.random_range(50.0..120.0);
            let tau = 2.0 * std::f64::consts::PI;
            (0..len)
                .map(|n| {
                    let t = n as f64 / sample_rate as f64;
                    (1..6).map(|h| (tau * f * h as f64 * t).sin() / h as f64).sum::<f64>() * 0.2
                        + 0.01 * rng.random_range(-1.0..1.0)
                })
                .collect()
        }
    };
    Waveform { samples: samples.into_iter().map(T::lit).collect(), sample_rate }
}

/// A synthetic talking-face clip: a skin-toned ellipse with eyes on a textured
/// background, whose mouth opening follows `mouth` (one value per frame, 0–1).
pub fn talking_face(width: usize, height: usize, mouth: &[f64], seed: u64) -> FrameSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg: [u8; 3] = [rng.random_range(20..90), rng.random_range(20..90), rng.random_range(20..90)];
    let skin: [u8; 3] = [rng.random_range(170..230), rng.random_range(120..170), rng.random_range(90..140)];
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let short = width.min(height) as f64;
    let (rx, ry) = (0.22 * short, 0.3 * short);
    let mut frames = Vec::with_capacity(mouth.len() * width * height * 3);
    for (t, &open) in mouth.iter().enumerate() {
        let jitter = (t as f64 * 0.7).sin() * 0.01 * short;
        for y in 0..height {
            for x in 0..width {
                let (fx, fy) = (x as f64 - cx - jitter, y as f64 - cy);
                let face = (fx / rx).powi(2) + (fy / ry).powi(2) <= 1.0;
                let eye = [(-0.35, -0.25), (0.35, -0.25)]
                    .iter()
                    .any(|(ex, ey)| ((fx - ex * rx) / (0.12 * rx)).powi(2) + ((fy - ey * ry) / (0.06 * ry)).powi(2) <= 1.0);
                let mouth_h = 0.02 + 0.12 * open.clamp(0.0, 1.0);
                let lips = (fx / (0.35 * rx)).powi(2) + ((fy - 0.45 * ry) / (mouth_h * ry)).powi(2) <= 1.0;
                let px = if face && (eye || lips) {
                    [40, 20, 25]
                } else if face {
                    skin
                } else {
                    let tex = (((x / 8) + (y / 8)) % 2) as u8 * 12;
                    [bg[0] + tex, bg[1] + tex, bg[2] + tex]
                };
                frames.extend_from_slice(&px);
            }
        }
    }
    FrameSequence::new(frames, mouth.len(), height, width, 30.0).expect("valid synthetic frames")
}

/// Mouth-opening track derived from a waveform's short-term energy, one value
/// per video frame at `fps`.
pub fn mouth_track<T: Scalar>(w: &Waveform<T>, fps: f64) -> Vec<f64> {
    let n = (w.duration_secs() * fps).round().max(1.0) as usize;
    let per = w.len() as f64 / n as f64;
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let s = (i as f64 * per) as usize;
            let e = (((i + 1) as f64 * per) as usize).min(w.len()).max(s + 1);
            crate::dsp::rms(&w.samples[s..e.min(w.len())]).as_f64()
        })
        .collect();
    let peak = raw.iter().copied().fold(1e-12, f64::max);
    raw.iter().map(|v| v / peak).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speech_like_is_deterministic_and_bounded() {
        let a: Waveform<f64> = speech_like(1.0, 16_000, 3);
        let b: Waveform<f64> = speech_like(1.0, 16_000, 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 16_000);
        assert!(a.peak() < 1.0 && a.rms() > 0.01);
        let c: Waveform<f64> = speech_like(1.0, 16_000, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn noises_have_energy() {
        for kind in [NoiseKind::White, NoiseKind::Rumble, NoiseKind::Babble, NoiseKind::Hum] {
            let n: Waveform<f64> = noise(kind, 0.5, 16_000, 1);
            assert_eq!(n.len(), 8000);
            assert!(n.rms() > 1e-3, "{kind:?}");
        }
    }

    #[test]
    fn talking_face_shape() {
        let f = talking_face(64, 48, &[0.0, 0.5, 1.0], 2);
        assert_eq!((f.len(), f.height, f.width), (3, 48, 64));
        assert_ne!(f.frame(0), f.frame(2));
    }
}
