#![allow(dead_code)]

use std::path::{Path, PathBuf};

use emoavse::dsp::{write_wav, WavEncoding};
use emoavse::synth::{mouth_track, noise, speech_like, talking_face, NoiseKind};
use emoavse::visual::{write_avi, AviCodec};
use emoavse::Waveform64;

pub struct Corpus {
    pub clean: PathBuf,
    pub noise: PathBuf,
}

/// Writes `n_clean` speech clips (each with a sibling AVI when `video`) and
/// `n_noise` noise files of `seconds` each under `root`.
pub fn corpus(root: &Path, n_clean: usize, n_noise: usize, seconds: f64, video: bool) -> Corpus {
    let clean = root.join("clean");
    let noise_dir = root.join("noise");
    std::fs::create_dir_all(&clean).unwrap();
    std::fs::create_dir_all(&noise_dir).unwrap();
    for i in 0..n_clean {
        let w: Waveform64 = speech_like(seconds, 16_000, 1000 + i as u64);
        write_wav(&clean.join(format!("spk{i:02}.wav")), &w, WavEncoding::Pcm16).unwrap();
        if video {
            let frames = talking_face(64, 48, &mouth_track(&w, 30.0), i as u64);
            write_avi(&clean.join(format!("spk{i:02}.avi")), &frames, AviCodec::Mjpeg(90)).unwrap();
        }
    }
    let kinds = [NoiseKind::White, NoiseKind::Babble, NoiseKind::Rumble, NoiseKind::Hum];
    for i in 0..n_noise {
        let w: Waveform64 = noise(kinds[i % kinds.len()], seconds + 1.0, 16_000, 2000 + i as u64);
        write_wav(&noise_dir.join(format!("n{i:02}.wav")), &w, WavEncoding::Pcm16).unwrap();
    }
    Corpus { clean, noise: noise_dir }
}

pub fn tiny_channels() -> Vec<usize> {
    vec![4, 4, 6, 6, 8]
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_emoavse"))
}
