//! Facial emotion embeddings: a frozen 1280-D backbone, an 8-way posterior
//! head kept for reporting, and the trainable projection fed to fusion.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::Command;

use emoavse_tensor::ndarray::{Array1, Array2, ArrayView1, Ix2};
use emoavse_tensor::{ConvGeometry, Graph, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Binder, ParamSet};
use crate::util::write_atomic;
use crate::visual::crop::{write_crop_sidecar, FaceCropSequence};
use crate::visual::front::{init_projection, pooled_pixels, projection, STUB_GRID};

pub const EMOTION_DIM: usize = 1280;
pub const EMOTION_CLASSES: [&str; 8] =
    ["Anger", "Contempt", "Disgust", "Fear", "Happiness", "Neutral", "Sadness", "Surprise"];
/// Frequency slots the projected embedding is replicated over before fusion.
pub const FUSION_SLOTS: usize = 8;
pub const EMO1_MAGIC: &[u8; 4] = b"EMO1";

/// Where embeddings come from. Every backend is frozen.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmotionBackend {
    /// Seeded random projection of 16×16 area-pooled pixels, then tanh.
    #[default]
    Stub,
    /// External program invoked as `program <crop_dir> <out.emo1>`; it must write
    /// an EMO1 file with one 1280-D column per crop.
    Command { program: PathBuf },
}

/// Adds the frozen stub backbone and posterior head.
pub fn init_emotion_front<T: Scalar>(ps: &mut ParamSet<T>, seed: u64) {
    init_projection(ps, "emotion.front.proj", EMOTION_DIM, STUB_GRID * STUB_GRID * 3, seed);
    ps.init_uniform("emotion.head.w", &[EMOTION_CLASSES.len(), EMOTION_DIM], (3.0 / EMOTION_DIM as f64).sqrt(), seed, true);
    ps.init_zeros("emotion.head.b", &[EMOTION_CLASSES.len()], true);
}

/// Per-frame embeddings `[1280, N]`.
pub fn emotion_embed<T: Scalar>(ps: &ParamSet<T>, backend: &EmotionBackend, crops: &FaceCropSequence) -> Result<Array2<T>> {
    match backend {
        EmotionBackend::Stub => {
            let p = projection(ps, "emotion.front.proj")?;
            Ok(p.dot(&pooled_pixels::<T>(crops, STUB_GRID)).mapv(|v| v.tanh()))
        }
        EmotionBackend::Command { program } => {
            let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
            write_crop_sidecar(dir.path(), "clip", crops)?;
            let out = dir.path().join("clip.emo1");
            let tool = program.display().to_string();
            let status = Command::new(program)
                .arg(dir.path().join("clip"))
                .arg(&out)
                .output()
                .map_err(|e| Error::External { tool: tool.clone(), reason: e.to_string() })?;
            if !status.status.success() {
                return Err(Error::External {
                    tool,
                    reason: format!("exit status {}: {}", status.status, String::from_utf8_lossy(&status.stderr)),
                });
            }
            let e = read_emo1(&out)?;
            check_embedding(&e, crops.len())?;
            Ok(e.mapv(|v| T::lit(v as f64)))
        }
    }
}

fn check_embedding<T>(e: &Array2<T>, frames: usize) -> Result<()> {
    if e.nrows() != EMOTION_DIM || e.ncols() != frames {
        return Err(Error::shape(format!(
            "emotion embedding is {}×{}, expected {EMOTION_DIM}×{frames}",
            e.nrows(),
            e.ncols()
        )));
    }
    Ok(())
}

/// Softmax of the frozen linear head over one embedding column.
pub fn emotion_posteriors<T: Scalar>(ps: &ParamSet<T>, column: ArrayView1<T>) -> Result<Array1<T>> {
    let w = projection(ps, "emotion.head.w")?;
    let b = ps.get("emotion.head.b").map(|p| p.value.clone()).ok_or_else(|| Error::invalid("missing emotion head bias"))?;
    if column.len() != w.ncols() {
        return Err(Error::shape(format!("embedding has {} channels, head expects {}", column.len(), w.ncols())));
    }
    let logits = w.dot(&column) + &b.into_dimensionality::<emoavse_tensor::ndarray::Ix1>().map_err(|e| Error::shape(e.to_string()))?;
    Ok(softmax(logits.view()))
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: ArrayView1<T>) -> Array1<T> {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - m).exp());
    let z: T = e.sum();
    e / z
}

/// Trainable affine map 1280 → `width`, applied per time column.
pub fn init_emotion_projection<T: Scalar>(ps: &mut ParamSet<T>, width: usize, seed: u64) {
    ps.init_conv("emotion.proj", width, EMOTION_DIM, &[1], 1.0, seed, false);
}

/// `[B, 1280, N]` → `[B, width, N]`.
pub fn project<T: Scalar>(b: &Binder<T>, e: Var) -> Var {
    b.graph.conv(e, b.var("emotion.proj.w"), Some(b.var("emotion.proj.b")), ConvGeometry::d1(1, 0, 1))
}

/// `[B, C, N]` → `[B, C, 8, target]`: linear resampling in time, then
/// replication over the frequency slots.
pub fn broadcast_upsample<T: Scalar>(g: &Graph<T>, p: Var, target: usize) -> Var {
    let n = g.shape(p)[2];
    let aligned = if n == target { p } else { g.interp_axis(p, 2, target) };
    g.expand(aligned, 2, FUSION_SLOTS)
}

/// Array form of [`project`] for a single `[1280, N]` embedding.
pub fn project_array<T: Scalar>(ps: &ParamSet<T>, e: &Array2<T>) -> Result<Array2<T>> {
    let w = ps.get("emotion.proj.w").ok_or_else(|| Error::invalid("missing emotion projection"))?;
    let c = w.value.shape()[0];
    if e.nrows() != w.value.shape()[1] {
        return Err(Error::shape(format!("embedding has {} channels, projection expects {}", e.nrows(), w.value.shape()[1])));
    }
    let g = Graph::inference();
    let b = Binder::new(&g, ps);
    let n = e.ncols();
    let x = g.constant(e.clone().into_shape_with_order((1, e.nrows(), n)).expect("contiguous").into_dyn());
    let y = g.value(project(&b, x));
    Ok(y.as_ref().clone().into_shape_with_order((c, n)).expect("contiguous").into_dimensionality::<Ix2>().expect("rank 2"))
}

/// Writes `[C, N]` values in the EMO1 layout: magic, N, C (u32 LE), then C×N f32 LE row-major.
pub fn write_emo1<T: Scalar>(path: &Path, e: &Array2<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * e.len());
    bytes.extend_from_slice(EMO1_MAGIC);
    bytes.extend_from_slice(&(e.ncols() as u32).to_le_bytes());
    bytes.extend_from_slice(&(e.nrows() as u32).to_le_bytes());
    for v in e.iter() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_emo1(path: &Path) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::invalid(format!("{}: {reason}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != EMO1_MAGIC {
        return Err(bad("not an EMO1 file".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let c = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 12 + 4 * n * c {
        return Err(bad(format!("{} bytes for {c}×{n} values", bytes.len())));
    }
    let data = bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok(Array2::from_shape_vec((c, n), data).expect("length checked"))
}

/// Loads a cached embedding for `clip_id` from `<dir>/<clip_id>.emo1`.
pub fn read_emo1_sidecar<T: Scalar>(dir: &Path, clip_id: &str, frames: usize) -> Result<Array2<T>> {
    let e = read_emo1(&dir.join(format!("{clip_id}.emo1")))?;
    check_embedding(&e, frames)?;
    Ok(e.mapv(|v| T::lit(v as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::visual::crop::CropSource;
    use emoavse_tensor::ndarray::{s, Axis};

    fn crops(n: usize, same: bool) -> FaceCropSequence {
        let mut data = Vec::new();
        for t in 0..n {
            let t = if same { 0 } else { t };
            data.extend((0..FaceCropSequence::FRAME_BYTES).map(|i| ((i / 7 + t * 13) % 256) as u8));
        }
        FaceCropSequence::new(data, vec![CropSource::Sidecar; n], 30.0).unwrap()
    }

    fn params() -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        init_emotion_front(&mut ps, 11);
        init_emotion_projection(&mut ps, 512, 11);
        ps
    }

    #[test]
    fn stub_embedding_shape_and_statelessness() {
        let ps = params();
        let e = emotion_embed(&ps, &EmotionBackend::Stub, &crops(120, false)).unwrap();
        assert_eq!(e.dim(), (1280, 120));
        let e = emotion_embed(&ps, &EmotionBackend::Stub, &crops(3, true)).unwrap();
        assert_eq!(e.column(0), e.column(1));
        assert_eq!(e, emotion_embed(&ps, &EmotionBackend::Stub, &crops(3, true)).unwrap());
    }

    #[test]
    fn posteriors_are_a_distribution() {
        let ps = params();
        let e = emotion_embed(&ps, &EmotionBackend::Stub, &crops(4, false)).unwrap();
        for col in e.axis_iter(Axis(1)) {
            let p = emotion_posteriors(&ps, col).unwrap();
            assert_eq!(p.len(), 8);
            assert!((p.sum() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
        let mut zero = params();
        zero.get_mut("emotion.head.w").unwrap().value.fill(0.0);
        let p = emotion_posteriors(&zero, e.column(0)).unwrap();
        assert!(p.iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariance() {
        let l = Array1::from(vec![0.3f64, -1.0, 2.0, 0.0, 5.0, -3.0, 1.0, 0.5]);
        let a = softmax(l.view());
        let b = softmax((&l + 123.0).view());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_contracts() {
        let mut ps = params();
        let e = Array2::from_shape_fn((1280, 120), |(c, t)| ((c * 3 + t) as f64 * 0.01).sin());
        let p = project_array(&ps, &e).unwrap();
        assert_eq!(p.dim(), (512, 120));
        // per-column independence: projecting a slice equals slicing the projection
        let part = project_array(&ps, &e.slice(s![.., 10..20]).to_owned()).unwrap();
        assert_eq!(part, p.slice(s![.., 10..20]));
        ps.get_mut("emotion.proj.w").unwrap().value.fill(0.0);
        assert!(project_array(&ps, &e).unwrap().iter().all(|&v| v == 0.0));
        assert!(project_array(&ps, &Array2::zeros((100, 4))).is_err());
    }

    #[test]
    fn broadcast_replicates_slots() {
        let g = Graph::<f64>::inference();
        let p = Array2::from_shape_fn((4, 10), |(c, t)| (c * 10 + t) as f64).into_shape_with_order((1, 4, 10)).unwrap();
        let v = g.constant(p.clone().into_dyn());
        let out = g.value(broadcast_upsample(&g, v, 10));
        assert_eq!(out.shape(), &[1, 4, 8, 10]);
        for k in 0..8 {
            assert_eq!(out.index_axis(Axis(2), k), p.view().into_dyn());
        }
        let out = g.value(broadcast_upsample(&g, v, 7));
        assert_eq!(out.shape(), &[1, 4, 8, 7]);
    }

    #[test]
    fn emo1_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let e = Array2::from_shape_fn((1280, 3), |(c, t)| (c + t) as f32 * 0.5);
        write_emo1(&dir.path().join("a.emo1"), &e).unwrap();
        assert_eq!(read_emo1(&dir.path().join("a.emo1")).unwrap(), e);
        let r: Array2<f64> = read_emo1_sidecar(dir.path(), "a", 3).unwrap();
        assert_eq!(r[[5, 2]], 3.5);
        assert!(read_emo1_sidecar::<f64>(dir.path(), "a", 4).is_err());
        std::fs::write(dir.path().join("b.emo1"), b"EMO2aaaaaaaa").unwrap();
        assert!(read_emo1(&dir.path().join("b.emo1")).is_err());
    }
}
