//! Per-frame visual features: a frozen front end (stub projection or a
//! 3-D conv + residual trunk) followed by a trainable temporal conv network.

use emoavse_tensor::ndarray::{Array2, Array5, ArrayD, Axis, Ix2};
use emoavse_tensor::{ConvGeometry, Graph, Scalar, Var};
use serde::{Deserialize, Serialize};

use super::crop::{FaceCropSequence, CROP_SIZE};
use crate::error::{Error, Result};
use crate::nn::{Binder, ParamSet};

pub const VISUAL_DIM: usize = 512;
/// Side of the pooled pixel grid the stub front ends project from.
pub const STUB_GRID: usize = 16;
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const TCN_DILATIONS: [usize; 4] = [1, 2, 4, 8];
pub const TCN_KERNEL: usize = 3;
const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualFrontKind {
    /// Seeded random projection of 16×16 area-pooled pixels, then tanh.
    #[default]
    Stub,
    /// 3-D conv (64 × 5×7×7, stride 1×2×2) + 18-layer residual trunk.
    Trunk,
}

/// Normalised, area-pooled crops: `[grid·grid·3, N]`, channel-fastest.
pub fn pooled_pixels<T: Scalar>(crops: &FaceCropSequence, grid: usize) -> Array2<T> {
    let cell = CROP_SIZE / grid;
    let inv = 1.0 / (cell * cell) as f64 / 255.0;
    let mut out = Array2::zeros((grid * grid * 3, crops.len()));
    for t in 0..crops.len() {
        let px = crops.crop(t);
        let mut acc = vec![0.0f64; grid * grid * 3];
        for y in 0..grid * cell {
            for x in 0..grid * cell {
                let base = ((y / cell) * grid + x / cell) * 3;
                let p = (y * CROP_SIZE + x) * 3;
                for c in 0..3 {
                    acc[base + c] += px[p + c] as f64;
                }
            }
        }
        for (i, a) in acc.iter().enumerate() {
            let c = i % 3;
            out[[i, t]] = T::lit((a * inv - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
        }
    }
    out
}

/// Frozen projection `[out, in]` with unit-variance outputs for unit-variance inputs.
pub(crate) fn init_projection<T: Scalar>(ps: &mut ParamSet<T>, name: &str, out: usize, inp: usize, seed: u64) {
    ps.init_uniform(name, &[out, inp], (3.0 / inp as f64).sqrt(), seed, true);
}

pub(crate) fn projection<T: Scalar>(ps: &ParamSet<T>, name: &str) -> Result<Array2<T>> {
    let p = ps.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
    p.value.clone().into_dimensionality::<Ix2>().map_err(|e| Error::shape(format!("{name}: {e}")))
}

/// Adds the frozen front-end parameters for `kind`.
pub fn init_visual_front<T: Scalar>(ps: &mut ParamSet<T>, kind: VisualFrontKind, seed: u64) {
    match kind {
        VisualFrontKind::Stub => init_projection(ps, "visual.front.proj", VISUAL_DIM, STUB_GRID * STUB_GRID * 3, seed),
        VisualFrontKind::Trunk => init_trunk(ps, seed),
    }
}

/// Frozen per-frame features `[512, N]`.
pub fn visual_front<T: Scalar>(ps: &ParamSet<T>, kind: VisualFrontKind, crops: &FaceCropSequence) -> Result<Array2<T>> {
    match kind {
        VisualFrontKind::Stub => {
            let p = projection(ps, "visual.front.proj")?;
            Ok(p.dot(&pooled_pixels::<T>(crops, STUB_GRID)).mapv(|v| v.tanh()))
        }
        VisualFrontKind::Trunk => trunk_features(ps, crops),
    }
}

const TRUNK_STAGES: [usize; 4] = [64, 128, 256, 512];
const TRUNK_TEMPORAL: usize = 5;
const TRUNK_CHUNK: usize = 4;

fn init_trunk<T: Scalar>(ps: &mut ParamSet<T>, seed: u64) {
    ps.init_conv("visual.trunk.stem", 64, 3, &[TRUNK_TEMPORAL, 7, 7], 1.0, seed, true);
    let mut cin = 64;
    for (s, &c) in TRUNK_STAGES.iter().enumerate() {
        for b in 0..2 {
            let name = format!("visual.trunk.l{s}.{b}");
            let inp = if b == 0 { cin } else { c };
            ps.init_conv(&format!("{name}.c1"), c, inp, &[3, 3], 1.0, seed, true);
            // residual branches start small so the unnormalised trunk stays bounded
            ps.init_conv(&format!("{name}.c2"), c, c, &[3, 3], 0.5, seed, true);
            if b == 0 && s > 0 {
                ps.init_conv(&format!("{name}.down"), c, inp, &[1, 1], 1.0, seed, true);
            }
        }
        cin = c;
    }
}

fn conv_named<T: Scalar>(b: &Binder<T>, x: Var, name: &str, geom: ConvGeometry) -> Var {
    b.graph.conv(x, b.var(&format!("{name}.w")), Some(b.var(&format!("{name}.b"))), geom)
}

/// `[M, C, H, W]` frames through the residual stages, globally pooled to `[M, 512]`.
fn trunk_2d<T: Scalar>(b: &Binder<T>, mut x: Var) -> Var {
    let g = b.graph;
    for s in 0..TRUNK_STAGES.len() {
        for blk in 0..2 {
            let name = format!("visual.trunk.l{s}.{blk}");
            let stride = if blk == 0 && s > 0 { 2 } else { 1 };
            let h = g.leaky_relu(conv_named(b, x, &format!("{name}.c1"), ConvGeometry::d2((stride, stride), (1, 1))), T::zero());
            let h = conv_named(b, h, &format!("{name}.c2"), ConvGeometry::d2((1, 1), (1, 1)));
            let short = if b.params.contains(&format!("{name}.down.w")) {
                conv_named(b, x, &format!("{name}.down"), ConvGeometry::d2((stride, stride), (0, 0)))
            } else {
                x
            };
            x = g.leaky_relu(g.add(h, short), T::zero());
        }
    }
    g.mean_axes(x, &[2, 3])
}

fn trunk_features<T: Scalar>(ps: &ParamSet<T>, crops: &FaceCropSequence) -> Result<Array2<T>> {
    let n = crops.len();
    let half = TRUNK_TEMPORAL / 2;
    let mut out = Array2::zeros((VISUAL_DIM, n));
    let normalized = |t: usize, c: usize, y: usize, x: usize| -> T {
        let v = crops.crop(t)[(y * CROP_SIZE + x) * 3 + c] as f64 / 255.0;
        T::lit((v - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
    };
    for start in (0..n).step_by(TRUNK_CHUNK) {
        let end = (start + TRUNK_CHUNK).min(n);
        let span = end - start + 2 * half;
        // replicate edge frames so the temporal kernel sees `half` frames of context
        let x = Array5::from_shape_fn((1, 3, span, CROP_SIZE, CROP_SIZE), |(_, c, t, y, x)| {
            let src = (start + t).saturating_sub(half).min(n - 1);
            normalized(src, c, y, x)
        });
        let g = Graph::inference();
        let b = Binder::new(&g, ps);
        let x = g.constant(x.into_dyn());
        let h = conv_named(&b, x, "visual.trunk.stem", ConvGeometry::d3([1, 2, 2], [0, 3, 3]));
        let h = g.leaky_relu(h, T::zero());
        let sh = g.shape(h);
        let (m, c, hh, ww) = (sh[2], sh[1], sh[3], sh[4]);
        let h = g.reshape(g.permute(h, &[0, 2, 1, 3, 4]), &[m, c, hh, ww]);
        let h = g.max_pool2d(h, 3, 2, 1);
        let f = trunk_2d(&b, h);
        let fv = g.value(f);
        for (i, row) in fv.axis_iter(Axis(0)).enumerate() {
            out.column_mut(start + i).assign(&row);
        }
    }
    Ok(out)
}

/// Trainable temporal conv network parameters: residual blocks with dilations
/// 1/2/4/8, plus a 1×1 input projection when `width` differs from 512.
pub fn init_tcn<T: Scalar>(ps: &mut ParamSet<T>, width: usize, seed: u64) {
    if width != VISUAL_DIM {
        ps.init_conv("visual.tcn.in", width, VISUAL_DIM, &[1], 1.0, seed, false);
    }
    for (i, _) in TCN_DILATIONS.iter().enumerate() {
        ps.init_conv(&format!("visual.tcn.{i}.c1"), width, width, &[TCN_KERNEL], 1.0, seed, false);
        ps.init_conv(&format!("visual.tcn.{i}.c2"), width, width, &[TCN_KERNEL], 0.5, seed, false);
    }
}

/// `[B, 512, N]` → `[B, width, N]`. Time is edge-padded before each dilated
/// conv, so the length is preserved and a constant sequence stays constant.
pub fn tcn_forward<T: Scalar>(b: &Binder<T>, x: Var) -> Var {
    let g = b.graph;
    let leak = T::lit(LEAK);
    let mut x = if b.params.contains("visual.tcn.in.w") {
        conv_named(b, x, "visual.tcn.in", ConvGeometry::d1(1, 0, 1))
    } else {
        x
    };
    for (i, &d) in TCN_DILATIONS.iter().enumerate() {
        let pad = d * (TCN_KERNEL - 1) / 2;
        let geom = ConvGeometry::d1(1, 0, d);
        let h = conv_named(b, g.pad_edge_axis(x, 2, pad, pad), &format!("visual.tcn.{i}.c1"), geom);
        let h = g.leaky_relu(h, leak);
        let h = conv_named(b, g.pad_edge_axis(h, 2, pad, pad), &format!("visual.tcn.{i}.c2"), geom);
        x = g.leaky_relu(g.add(x, h), leak);
    }
    x
}

/// Resamples `[C, N]` features onto `target` uniformly spaced time points by
/// linear interpolation; first and last columns map onto each other.
pub fn temporal_align<T: Scalar>(features: &Array2<T>, target: usize) -> Result<Array2<T>> {
    if features.ncols() == 0 || target == 0 {
        return Err(Error::invalid("temporal alignment needs at least one frame on both sides"));
    }
    let out = emoavse_tensor::interp_axis_array(&features.clone().into_dyn(), 1, target);
    Ok(out.into_dimensionality::<Ix2>().expect("rank preserved"))
}

/// Front end plus temporal network on an inference graph: `[width, N]`.
pub fn visual_encode<T: Scalar>(ps: &ParamSet<T>, kind: VisualFrontKind, crops: &FaceCropSequence) -> Result<Array2<T>> {
    let front = visual_front(ps, kind, crops)?;
    let g = Graph::inference();
    let b = Binder::new(&g, ps);
    let n = front.ncols();
    let x = g.constant(front.into_shape_with_order((1, VISUAL_DIM, n)).expect("contiguous").into_dyn());
    let y = g.value(tcn_forward(&b, x));
    let c = y.shape()[1];
    Ok(ArrayD::clone(&y).into_shape_with_order((c, n)).expect("contiguous"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::visual::crop::CropSource;

    fn crops_from(f: impl Fn(usize, usize) -> u8, n: usize) -> FaceCropSequence {
        let mut data = Vec::with_capacity(n * FaceCropSequence::FRAME_BYTES);
        for t in 0..n {
            for i in 0..CROP_SIZE * CROP_SIZE * 3 {
                data.push(f(t, i));
            }
        }
        FaceCropSequence::new(data, vec![CropSource::Sidecar; n], 30.0).unwrap()
    }

    fn stub_params(width: usize) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        init_visual_front(&mut ps, VisualFrontKind::Stub, 3);
        init_tcn(&mut ps, width, 3);
        ps
    }

    #[test]
    fn pooled_pixels_of_uniform_crop() {
        let c = crops_from(|_, i| [124u8, 116, 104][i % 3], 2);
        let p: Array2<f64> = pooled_pixels(&c, 16);
        assert_eq!(p.dim(), (768, 2));
        for (i, v) in p.column(0).iter().enumerate() {
            let c = i % 3;
            let want = ([124.0, 116.0, 104.0][c] / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn stub_encode_shapes() {
        let ps = stub_params(512);
        let c = crops_from(|t, i| ((t * 7 + i) % 251) as u8, 120);
        assert_eq!(visual_encode(&ps, VisualFrontKind::Stub, &c).unwrap().dim(), (512, 120));
        let c = crops_from(|t, i| ((t * 7 + i) % 251) as u8, 5);
        assert_eq!(visual_encode(&ps, VisualFrontKind::Stub, &c).unwrap().dim(), (512, 5));
    }

    #[test]
    fn constant_sequence_gives_constant_columns() {
        let ps = stub_params(512);
        let c = crops_from(|_, i| (i % 253) as u8, 9);
        let v = visual_encode(&ps, VisualFrontKind::Stub, &c).unwrap();
        for t in 1..9 {
            for ch in 0..512 {
                assert!((v[[ch, t]] - v[[ch, 0]]).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn trunk_front_shape_and_time_invariance() {
        let mut ps = ParamSet::<f32>::new();
        init_visual_front(&mut ps, VisualFrontKind::Trunk, 5);
        let c = crops_from(|_, i| ((i * 31) % 256) as u8, 5);
        let f = visual_front(&ps, VisualFrontKind::Trunk, &c).unwrap();
        assert_eq!(f.dim(), (512, 5));
        assert!(f.iter().all(|v| v.is_finite()));
        assert!(f.iter().any(|&v| v != 0.0));
        for t in 1..5 {
            for ch in 0..512 {
                assert!((f[[ch, t]] - f[[ch, 0]]).abs() <= 1e-5 * (1.0 + f[[ch, 0]].abs()));
            }
        }
    }

    #[test]
    fn align_endpoints_and_identity() {
        let f = Array2::from_shape_fn((3, 120), |(c, t)| (c * 1000 + t) as f64);
        let a = temporal_align(&f, 100).unwrap();
        assert_eq!(a.dim(), (3, 100));
        assert_eq!(a.column(0), f.column(0));
        assert_eq!(a.column(99), f.column(119));
        assert_eq!(temporal_align(&f, 120).unwrap(), f);
        assert!(temporal_align(&f, 0).is_err());
    }
}
