//! Face detection backends.

use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::video::FrameSequence;
use crate::error::{Error, Result};

/// Five-point landmark template (eyes, nose, mouth corners) of the common
/// 112×112 aligned-face layout.
pub const LANDMARK_TEMPLATE_112: [[f64; 2]; 5] = [
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
];

/// Axis-aligned box in pixels: top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Intersection with the `width × height` frame; `None` if empty.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        (x1 > x0 && y1 > y0).then_some(BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= width as f64 && self.y + self.h <= height as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceDetection {
    pub bbox: BBox,
    pub landmarks: [[f64; 2]; 5],
    pub confidence: f64,
    pub frame_index: usize,
}

/// Pluggable detector: returns the most confident face in a frame, if any.
pub trait FaceDetector: Send + Sync {
    fn name(&self) -> &str;

    fn detect(&self, frames: &FrameSequence, index: usize) -> Result<Option<FaceDetection>>;

    fn detect_all(&self, frames: &FrameSequence) -> Result<Vec<Option<FaceDetection>>> {
        (0..frames.len()).map(|i| self.detect(frames, i)).collect()
    }
}

/// Deterministic detector: a centred square spanning 60 % of the short side,
/// with landmarks at the template positions scaled into the box.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubDetector;

impl StubDetector {
    pub const SIDE_FRACTION: f64 = 0.6;

    pub fn detection(width: usize, height: usize, frame_index: usize) -> FaceDetection {
        let side = (Self::SIDE_FRACTION * width.min(height) as f64).round();
        let x = ((width as f64 - side) / 2.0).floor();
        let y = ((height as f64 - side) / 2.0).floor();
        let s = side / 112.0;
        let landmarks = LANDMARK_TEMPLATE_112.map(|[lx, ly]| [x + lx * s, y + ly * s]);
        FaceDetection { bbox: BBox { x, y, w: side, h: side }, landmarks, confidence: 1.0, frame_index }
    }
}

impl FaceDetector for StubDetector {
    fn name(&self) -> &str {
        "stub"
    }

    fn detect(&self, frames: &FrameSequence, index: usize) -> Result<Option<FaceDetection>> {
        Ok(Some(Self::detection(frames.width, frames.height, index)))
    }
}

#[derive(Deserialize)]
struct RawDetection {
    bbox: [f64; 4],
    landmarks: [[f64; 2]; 5],
    confidence: f64,
}

/// Runs an external detector (for example an MTCNN wrapper) once per frame.
///
/// The program receives a PNG path as its only argument and prints a JSON
/// array of `{"bbox": [x, y, w, h], "landmarks": [[x, y]; 5], "confidence": c}`
/// objects; an empty array means no face.
#[derive(Clone, Debug)]
pub struct CommandDetector {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl CommandDetector {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self { program: program.into(), args: Vec::new() }
    }

    fn parse(&self, stdout: &str, frames: &FrameSequence, index: usize) -> Result<Option<FaceDetection>> {
        let raw: Vec<RawDetection> = serde_json::from_str(stdout.trim()).map_err(|e| Error::External {
            tool: self.program.display().to_string(),
            reason: format!("unparseable detector output ({e}): {stdout:?}"),
        })?;
        let best = raw
            .into_iter()
            .filter(|d| d.confidence.is_finite())
            .max_by(|a, b| a.confidence.total_cmp(&b.confidence));
        Ok(best.and_then(|d| {
            let bbox = BBox { x: d.bbox[0], y: d.bbox[1], w: d.bbox[2], h: d.bbox[3] }.clamp_to(frames.width, frames.height)?;
            Some(FaceDetection {
                bbox,
                landmarks: d.landmarks,
                confidence: d.confidence.clamp(0.0, 1.0),
                frame_index: index,
            })
        }))
    }
}

impl FaceDetector for CommandDetector {
    fn name(&self) -> &str {
        "command"
    }

    fn detect(&self, frames: &FrameSequence, index: usize) -> Result<Option<FaceDetection>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let png = dir.path().join(format!("{index:05}.png"));
        frames.frame_image(index).save(&png)?;
        let out = Command::new(&self.program).args(&self.args).arg(&png).output().map_err(|e| Error::External {
            tool: self.program.display().to_string(),
            reason: e.to_string(),
        })?;
        if !out.status.success() {
            return Err(Error::External {
                tool: self.program.display().to_string(),
                reason: format!("exit status {}: {}", out.status, String::from_utf8_lossy(&out.stderr)),
            });
        }
        self.parse(&String::from_utf8_lossy(&out.stdout), frames, index)
    }
}
