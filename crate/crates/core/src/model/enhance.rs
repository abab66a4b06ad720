//! The end-to-end inference path: noisy audio and face context in, enhanced
//! audio out.

use std::path::{Path, PathBuf};

use emoavse_tensor::ndarray::{Array2, Array3, Ix3};
use emoavse_tensor::{Graph, Scalar};
use serde::{Deserialize, Serialize};

use super::{forward, Model, ModelInput};
use crate::dsp::{mixed_phase_resynthesis, StftPlan, Waveform};
use crate::emotion::{emotion_embed, read_emo1_sidecar, write_emo1};
use crate::error::{Error, Result, StageExt};
use crate::nn::Binder;
use crate::visual::{
    read_crop_sidecar, read_frames, track_and_crop, visual_front, CommandDetector, CropSource, FaceCropSequence, FaceDetector,
    FrameSequence, StubDetector,
};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DetectorConfig {
    #[default]
    Stub,
    /// External detector; see [`CommandDetector`].
    Command {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl DetectorConfig {
    pub fn build(&self) -> Box<dyn FaceDetector> {
        match self {
            DetectorConfig::Stub => Box::new(StubDetector),
            DetectorConfig::Command { program, args } => {
                Box::new(CommandDetector { program: program.clone(), args: args.clone() })
            }
        }
    }
}

/// Where the face context for an utterance comes from.
#[derive(Clone, Debug)]
pub enum VideoSource {
    None,
    /// A video file; frames covering the utterance start at `start_s`.
    File { path: PathBuf, start_s: f64 },
    /// Precomputed 224×224 crops under `<dir>/<clip_id>/`.
    Crops { dir: PathBuf, clip_id: String, fps: f64 },
    Frames(FrameSequence),
}

/// Frozen front-end features for one utterance.
#[derive(Clone, Debug, Default)]
pub struct Context<T> {
    /// `[512, N]` per-frame visual features.
    pub visual: Option<Array2<T>>,
    /// `[1280, N]` per-frame emotion embeddings.
    pub emotion: Option<Array2<T>>,
    pub provenance: Vec<CropSource>,
}

fn crops_for(model_detector: &DetectorConfig, source: &VideoSource, duration_s: f64) -> Result<FaceCropSequence> {
    let frames = match source {
        VideoSource::None => {
            return Err(Error::invalid("this model uses face context but no video or crops were given"));
        }
        VideoSource::Crops { dir, clip_id, fps } => return read_crop_sidecar(dir, clip_id, *fps),
        VideoSource::File { path, start_s } => read_frames(path)?.segment(*start_s, duration_s)?,
        VideoSource::Frames(f) => f.clone(),
    };
    let detections = model_detector.build().detect_all(&frames).stage("detect")?;
    track_and_crop(&frames, &detections)
}

/// Runs frame reading, detection, cropping and the frozen front ends.
/// `emotion_cache` names a directory and clip id for EMO1 sidecar files: an
/// existing file is used as is, a missing one is written after extraction.
pub fn prepare_context<T: Scalar>(
    model: &Model<T>,
    source: &VideoSource,
    duration_s: f64,
    emotion_cache: Option<(&Path, &str)>,
) -> Result<Context<T>> {
    let cfg = &model.config;
    if !cfg.needs_faces() {
        return Ok(Context::default());
    }
    let crops = crops_for(&cfg.detector, source, duration_s).stage("video")?;
    let visual = if cfg.use_video {
        Some(visual_front(&model.params, cfg.visual_front, &crops).stage("visual")?)
    } else {
        None
    };
    let emotion = if cfg.use_emotion {
        let cached = emotion_cache.filter(|(dir, id)| dir.join(format!("{id}.emo1")).is_file());
        let e = match (cached, emotion_cache) {
            (Some((dir, id)), _) => read_emo1_sidecar(dir, id, crops.len()),
            (None, Some((dir, id))) => emotion_embed(&model.params, &cfg.emotion_backend, &crops)
                .and_then(|e| write_emo1(&dir.join(format!("{id}.emo1")), &e).map(|_| e)),
            (None, None) => emotion_embed(&model.params, &cfg.emotion_backend, &crops),
        };
        Some(e.stage("emotion")?)
    } else {
        None
    };
    Ok(Context { visual, emotion, provenance: crops.provenance })
}

fn batch1<T: Scalar>(a: &Option<Array2<T>>) -> Option<Array3<T>> {
    a.as_ref().map(|a| a.clone().insert_axis(emoavse_tensor::ndarray::Axis(0)))
}

/// Enhanced waveform plus the shape of every network stage.
pub struct Enhanced<T> {
    pub waveform: Waveform<T>,
    pub shapes: Vec<(&'static str, Vec<usize>)>,
}

/// Algorithm: STFT → mask network with fused context → noisy-phase resynthesis.
/// The output has exactly as many samples as the input.
pub fn enhance<T: Scalar>(model: &Model<T>, noisy: &Waveform<T>, ctx: &Context<T>) -> Result<Enhanced<T>> {
    noisy.validate()?;
    if noisy.sample_rate != 16_000 {
        return Err(Error::invalid(format!("expected 16 kHz input, got {} Hz", noisy.sample_rate)));
    }
    let plan = StftPlan::<T>::new(model.config.stft).stage("stft")?;
    let spec = plan.stft(noisy).stage("stft")?;
    let input = ModelInput {
        noisy_mag: spec.magnitude.clone().insert_axis(emoavse_tensor::ndarray::Axis(0)),
        visual: batch1(&ctx.visual),
        emotion: batch1(&ctx.emotion),
    };
    let g = Graph::inference();
    let b = Binder::new(&g, &model.params);
    let out = forward(&b, &model.config, &input).stage("model")?;
    let enhanced = g.value(out.enhanced);
    let enhanced = enhanced
        .as_ref()
        .clone()
        .into_dimensionality::<Ix3>()
        .expect("rank 3")
        .index_axis_move(emoavse_tensor::ndarray::Axis(0), 0);
    let mut shapes = out.shapes;
    let waveform = mixed_phase_resynthesis(enhanced.view(), &spec, noisy.len(), noisy.sample_rate).stage("istft")?;
    shapes.push(("waveform", vec![waveform.len()]));
    Ok(Enhanced { waveform, shapes })
}
