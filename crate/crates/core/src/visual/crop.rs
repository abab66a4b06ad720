//! Face tracking and 224×224 crop extraction.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::detect::{FaceDetection, StubDetector};
use super::video::FrameSequence;
use crate::error::{Error, Result};

pub const CROP_SIZE: usize = 224;

/// Where a crop's box came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CropSource {
    Detected(FaceDetection),
    /// No face in this frame; the box of frame `from` was reused.
    Reused { from: usize },
    /// No face detected yet; the centred stub box was used.
    StubFallback,
    /// Loaded from a precomputed crop directory.
    Sidecar,
}

impl CropSource {
    pub fn is_fallback(&self) -> bool {
        matches!(self, CropSource::Reused { .. } | CropSource::StubFallback)
    }
}

/// N crops of 224 × 224 × 3 bytes, plus per-frame provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceCropSequence {
    pub data: Vec<u8>,
    pub provenance: Vec<CropSource>,
    pub fps: f64,
}

impl FaceCropSequence {
    pub const FRAME_BYTES: usize = CROP_SIZE * CROP_SIZE * 3;

    pub fn new(data: Vec<u8>, provenance: Vec<CropSource>, fps: f64) -> Result<Self> {
        if provenance.is_empty() {
            return Err(Error::invalid("crop sequence is empty"));
        }
        if data.len() != provenance.len() * Self::FRAME_BYTES {
            return Err(Error::shape(format!(
                "{} bytes for {} crops of {CROP_SIZE}×{CROP_SIZE}×3",
                data.len(),
                provenance.len()
            )));
        }
        Ok(Self { data, provenance, fps })
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn crop(&self, i: usize) -> &[u8] {
        &self.data[i * Self::FRAME_BYTES..(i + 1) * Self::FRAME_BYTES]
    }

    pub fn crop_image(&self, i: usize) -> RgbImage {
        RgbImage::from_raw(CROP_SIZE as u32, CROP_SIZE as u32, self.crop(i).to_vec()).expect("crop buffer size")
    }

    pub fn fallback_count(&self) -> usize {
        self.provenance.iter().filter(|p| p.is_fallback()).count()
    }
}

fn crop_box(frames: &FrameSequence, i: usize, det: &FaceDetection) -> Vec<u8> {
    let b = det
        .bbox
        .clamp_to(frames.width, frames.height)
        .unwrap_or(StubDetector::detection(frames.width, frames.height, i).bbox);
    let x0 = b.x.floor() as u32;
    let y0 = b.y.floor() as u32;
    let w = ((b.x + b.w).ceil() as u32 - x0).max(1);
    let h = ((b.y + b.h).ceil() as u32 - y0).max(1);
    let img = frames.frame_image(i);
    let sub = imageops::crop_imm(&img, x0, y0, w, h).to_image();
    imageops::resize(&sub, CROP_SIZE as u32, CROP_SIZE as u32, FilterType::Triangle).into_raw()
}

/// One crop per frame. Frames without a detection reuse the most recent
/// detection, or the centred stub box before the first detection.
pub fn track_and_crop(frames: &FrameSequence, detections: &[Option<FaceDetection>]) -> Result<FaceCropSequence> {
    if detections.len() != frames.len() {
        return Err(Error::shape(format!(
            "{} detections for {} frames",
            detections.len(),
            frames.len()
        )));
    }
    let mut data = Vec::with_capacity(frames.len() * FaceCropSequence::FRAME_BYTES);
    let mut provenance = Vec::with_capacity(frames.len());
    let mut last: Option<FaceDetection> = None;
    for (i, det) in detections.iter().enumerate() {
        let (used, source) = match (det, &last) {
            (Some(d), _) => (d.clone(), CropSource::Detected(d.clone())),
            (None, Some(prev)) => (prev.clone(), CropSource::Reused { from: prev.frame_index }),
            (None, None) => (StubDetector::detection(frames.width, frames.height, i), CropSource::StubFallback),
        };
        data.extend(crop_box(frames, i, &used));
        if det.is_some() {
            last = Some(used);
        }
        provenance.push(source);
    }
    FaceCropSequence::new(data, provenance, frames.fps)
}

/// Loads `<dir>/<clip_id>/00000.png, 00001.png, …` until the first gap.
pub fn read_crop_sidecar(dir: &Path, clip_id: &str, fps: f64) -> Result<FaceCropSequence> {
    let clip = dir.join(clip_id);
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    loop {
        let p = clip.join(format!("{:05}.png", provenance.len()));
        if !p.exists() {
            break;
        }
        let img = image::open(&p)?.to_rgb8();
        if img.width() as usize != CROP_SIZE || img.height() as usize != CROP_SIZE {
            return Err(Error::shape(format!(
                "{} is {}×{}, crops must be {CROP_SIZE}×{CROP_SIZE}",
                p.display(),
                img.width(),
                img.height()
            )));
        }
        data.extend(img.into_raw());
        provenance.push(CropSource::Sidecar);
    }
    if provenance.is_empty() {
        return Err(Error::invalid(format!("no crops found under {}", clip.display())));
    }
    FaceCropSequence::new(data, provenance, fps)
}

/// Writes crops in the sidecar layout read by [`read_crop_sidecar`].
pub fn write_crop_sidecar(dir: &Path, clip_id: &str, crops: &FaceCropSequence) -> Result<()> {
    let clip = dir.join(clip_id);
    std::fs::create_dir_all(&clip).map_err(|e| Error::io(&clip, e))?;
    for i in 0..crops.len() {
        crops.crop_image(i).save(clip.join(format!("{i:05}.png")))?;
    }
    Ok(())
}
