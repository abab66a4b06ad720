//! Video frames → face crops → per-frame visual features.

pub mod crop;
pub mod detect;
pub mod front;
pub mod video;

pub use crop::{read_crop_sidecar, track_and_crop, write_crop_sidecar, CropSource, FaceCropSequence, CROP_SIZE};
pub use detect::{BBox, CommandDetector, FaceDetection, FaceDetector, StubDetector};
pub use front::{
    init_tcn, init_visual_front, pooled_pixels, tcn_forward, temporal_align, visual_encode, visual_front,
    VisualFrontKind, VISUAL_DIM,
};
pub use video::{read_frames, write_avi, AviCodec, FrameSequence};
