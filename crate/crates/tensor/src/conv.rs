//! Strided, padded, dilated convolution over 1, 2 or 3 spatial axes.
//!
//! Tensors are channel-first: `[batch, channels, spatial...]`. Kernels follow the
//! usual layouts, `[out, in, k...]` for convolution and `[in, out, k...]` for the
//! transposed form. Everything lowers to im2col + GEMM, chunked along the
//! outermost spatial axis so the column buffer stays bounded.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

use crate::graph::{Graph, Var};
use crate::Scalar;

/// Upper bound on elements held by one im2col buffer.
const COLS_BUDGET: usize = 1 << 23;

/// Per-axis stride, zero padding and dilation. Arrays are indexed
/// `[depth, height, width]`; lower-rank convolutions use the trailing entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
            dilation: [1; 3],
        }
    }
}

impl ConvGeometry {
    pub fn d1(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride: [1, 1, stride],
            padding: [0, 0, padding],
            dilation: [1, 1, dilation],
        }
    }

    pub fn d2(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self {
            stride: [1, stride.0, stride.1],
            padding: [0, padding.0, padding.1],
            dilation: [1; 3],
        }
    }

    pub fn d3(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            stride,
            padding,
            dilation: [1; 3],
        }
    }

    /// Output extent of a forward convolution along axis `i`.
    pub fn output_len(&self, i: usize, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation[i] * (kernel - 1) + 1;
        let padded = input + 2 * self.padding[i];
        (padded >= span).then(|| (padded - span) / self.stride[i] + 1)
    }

    /// Output extent of a transposed convolution along axis `i`.
    pub fn transposed_len(&self, i: usize, input: usize, kernel: usize) -> Option<usize> {
        let full = (input - 1) * self.stride[i] + self.dilation[i] * (kernel - 1) + 1;
        full.checked_sub(2 * self.padding[i]).filter(|&n| n > 0)
    }
}

fn spatial3(shape: &[usize]) -> [usize; 3] {
    let s = &shape[2..];
    let mut out = [1; 3];
    out[3 - s.len()..].copy_from_slice(s);
    out
}

/// Geometry of one convolution in its "forward" orientation: `img` is the
/// input volume, `out` the output volume.
#[derive(Clone, Copy, Debug)]
struct Lowering {
    ch_img: usize,
    img: [usize; 3],
    ker: [usize; 3],
    out: [usize; 3],
    geom: ConvGeometry,
}

impl Lowering {
    fn img_len(&self) -> usize {
        self.img.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out.iter().product()
    }

    fn ker_len(&self) -> usize {
        self.ker.iter().product()
    }

    fn rows(&self) -> usize {
        self.ch_img * self.ker_len()
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn is_pointwise(&self) -> bool {
        self.ker == [1; 3]
            && self.geom.stride == [1; 3]
            && self.geom.padding == [0; 3]
            && self.img == self.out
    }

    /// Number of output-depth slices per chunk.
    fn chunk(&self) -> usize {
        let per_slice = self.rows() * self.plane();
        (COLS_BUDGET / per_slice.max(1)).clamp(1, self.out[0])
    }

    /// Walks every (row, column, source offset) triple of the column matrix for
    /// output depths `od0..od1`, calling `f(col_index_in_rows_buffer, src)` with
    /// `src = None` for padding taps.
    #[inline]
    fn for_each_tap<F: FnMut(usize, Option<usize>)>(&self, od0: usize, od1: usize, mut f: F) {
        let [id, ih, iw] = self.img;
        let [kd, kh, kw] = self.ker;
        let [_, oh, ow] = self.out;
        let [sd, sh, sw] = self.geom.stride;
        let [pd, ph, pw] = self.geom.padding;
        let [dd, dh, dw] = self.geom.dilation;
        let n = (od1 - od0) * oh * ow;
        let vol = id * ih * iw;
        for c in 0..self.ch_img {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = ((c * kd + a) * kh + b) * kw + e;
                        let mut idx = row * n;
                        for od in od0..od1 {
                            let zd = (od * sd + a * dd) as isize - pd as isize;
                            if zd < 0 || zd >= id as isize {
                                for _ in 0..oh * ow {
                                    f(idx, None);
                                    idx += 1;
                                }
                                continue;
                            }
                            for y in 0..oh {
                                let zy = (y * sh + b * dh) as isize - ph as isize;
                                if zy < 0 || zy >= ih as isize {
                                    for _ in 0..ow {
                                        f(idx, None);
                                        idx += 1;
                                    }
                                    continue;
                                }
                                let base = c * vol + (zd as usize * ih + zy as usize) * iw;
                                for x in 0..ow {
                                    let zx = (x * sw + e * dw) as isize - pw as isize;
                                    if zx < 0 || zx >= iw as isize {
                                        f(idx, None);
                                    } else {
                                        f(idx, Some(base + zx as usize));
                                    }
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, img: &[T], od0: usize, od1: usize, cols: &mut [T]) {
        self.for_each_tap(od0, od1, |i, src| {
            cols[i] = match src {
                Some(s) => img[s],
                None => T::zero(),
            }
        });
    }

    fn col2im<T: Scalar>(&self, cols: &[T], od0: usize, od1: usize, img: &mut [T]) {
        self.for_each_tap(od0, od1, |i, src| {
            if let Some(s) = src {
                img[s] += cols[i];
            }
        });
    }
}

fn view2<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous 2-D view")
}

fn view2_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous 2-D view")
}

fn contiguous<T: Scalar>(a: &ArrayD<T>) -> std::borrow::Cow<'_, [T]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn check_operands(x: &[usize], w: &[usize], transposed: bool) {
    assert!(
        (3..=5).contains(&x.len()),
        "convolution input must be [batch, channels, 1..=3 spatial axes], got {x:?}"
    );
    assert_eq!(x.len(), w.len(), "kernel rank must match input rank");
    let ch = if transposed { w[0] } else { w[1] };
    assert_eq!(x[1], ch, "input channels {} do not match kernel {w:?}", x[1]);
}

/// Forward convolution. `x: [B, C, ...]`, `w: [O, C, k...]`, `bias: [O]`.
pub fn conv_forward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    bias: Option<&ArrayD<T>>,
    geom: ConvGeometry,
) -> ArrayD<T> {
    check_operands(x.shape(), w.shape(), false);
    let batch = x.shape()[0];
    let ch_out = w.shape()[0];
    let img = spatial3(x.shape());
    let ker = spatial3(w.shape());
    let mut out = [0; 3];
    for i in 0..3 {
        out[i] = geom
            .output_len(i, img[i], ker[i])
            .unwrap_or_else(|| panic!("kernel {ker:?} larger than padded input {img:?}"));
    }
    let low = Lowering {
        ch_img: x.shape()[1],
        img,
        ker,
        out,
        geom,
    };
    let mut out_shape = vec![batch, ch_out];
    out_shape.extend_from_slice(&out[3 - (x.ndim() - 2)..]);
    let mut y = ArrayD::<T>::zeros(IxDyn(&out_shape));

    let xs = contiguous(x);
    let ws = contiguous(w);
    let w2 = view2(&ws, ch_out, low.rows());
    let in_stride = low.ch_img * low.img_len();
    let out_stride = ch_out * low.out_len();
    let ys = y.as_slice_mut().expect("fresh array is contiguous");
    let chunk = low.chunk();
    let mut cols = Vec::new();
    for b in 0..batch {
        let xb = &xs[b * in_stride..(b + 1) * in_stride];
        let mut yb = view2_mut(&mut ys[b * out_stride..(b + 1) * out_stride], ch_out, low.out_len());
        if low.is_pointwise() {
            general_mat_mul(T::one(), &w2, &view2(xb, low.ch_img, low.img_len()), T::zero(), &mut yb);
            continue;
        }
        let mut od0 = 0;
        while od0 < out[0] {
            let od1 = (od0 + chunk).min(out[0]);
            let n = (od1 - od0) * low.plane();
            cols.resize(low.rows() * n, T::zero());
            low.im2col(xb, od0, od1, &mut cols);
            let mut dst = yb.slice_mut(ndarray::s![.., od0 * low.plane()..od1 * low.plane()]);
            general_mat_mul(T::one(), &w2, &view2(&cols, low.rows(), n), T::zero(), &mut dst);
            od0 = od1;
        }
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut y, bias);
    }
    y
}

/// Gradients of [`conv_forward`] with respect to input, kernel and bias.
pub fn conv_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    gy: &ArrayD<T>,
    geom: ConvGeometry,
    want_input: bool,
) -> (Option<ArrayD<T>>, ArrayD<T>, ArrayD<T>) {
    let batch = x.shape()[0];
    let ch_out = w.shape()[0];
    let low = Lowering {
        ch_img: x.shape()[1],
        img: spatial3(x.shape()),
        ker: spatial3(w.shape()),
        out: spatial3(gy.shape()),
        geom,
    };
    let xs = contiguous(x);
    let ws = contiguous(w);
    let gys = contiguous(gy);
    let w2 = view2(&ws, ch_out, low.rows());
    let mut gw = ArrayD::<T>::zeros(w.raw_dim());
    let mut gx = want_input.then(|| ArrayD::<T>::zeros(x.raw_dim()));
    let in_stride = low.ch_img * low.img_len();
    let out_stride = ch_out * low.out_len();
    let chunk = low.chunk();
    let mut cols = Vec::new();
    let mut gcols = Vec::new();
    {
        let gws = gw.as_slice_mut().expect("contiguous");
        let mut gw2 = view2_mut(gws, ch_out, low.rows());
        let mut gx_slice = gx.as_mut().map(|g| g.as_slice_mut().expect("contiguous"));
        for b in 0..batch {
            let xb = &xs[b * in_stride..(b + 1) * in_stride];
            let gyb = view2(&gys[b * out_stride..(b + 1) * out_stride], ch_out, low.out_len());
            if low.is_pointwise() {
                let xv = view2(xb, low.ch_img, low.img_len());
                general_mat_mul(T::one(), &gyb, &xv.t(), T::one(), &mut gw2);
                if let Some(gxs) = gx_slice.as_deref_mut() {
                    let mut gxb = view2_mut(&mut gxs[b * in_stride..(b + 1) * in_stride], low.ch_img, low.img_len());
                    general_mat_mul(T::one(), &w2.t(), &gyb, T::zero(), &mut gxb);
                }
                continue;
            }
            let mut od0 = 0;
            while od0 < low.out[0] {
                let od1 = (od0 + chunk).min(low.out[0]);
                let n = (od1 - od0) * low.plane();
                cols.resize(low.rows() * n, T::zero());
                low.im2col(xb, od0, od1, &mut cols);
                let gy_chunk = gyb.slice(ndarray::s![.., od0 * low.plane()..od1 * low.plane()]);
                general_mat_mul(T::one(), &gy_chunk, &view2(&cols, low.rows(), n).t(), T::one(), &mut gw2);
                if let Some(gxs) = gx_slice.as_deref_mut() {
                    gcols.resize(low.rows() * n, T::zero());
                    general_mat_mul(T::one(), &w2.t(), &gy_chunk, T::zero(), &mut view2_mut(&mut gcols, low.rows(), n));
                    low.col2im(&gcols, od0, od1, &mut gxs[b * in_stride..(b + 1) * in_stride]);
                }
                od0 = od1;
            }
        }
    }
    let gb = channel_sum(gy);
    (gx, gw, gb)
}

/// Transposed convolution. `x: [B, Cin, ...]`, `w: [Cin, Cout, k...]`, `bias: [Cout]`.
pub fn conv_transpose_forward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    bias: Option<&ArrayD<T>>,
    geom: ConvGeometry,
) -> ArrayD<T> {
    check_operands(x.shape(), w.shape(), true);
    let batch = x.shape()[0];
    let ch_in = w.shape()[0];
    let ch_out = w.shape()[1];
    let small = spatial3(x.shape());
    let ker = spatial3(w.shape());
    let mut big = [0; 3];
    for i in 0..3 {
        big[i] = geom
            .transposed_len(i, small[i], ker[i])
            .unwrap_or_else(|| panic!("transposed convolution produces an empty axis"));
    }
    let low = Lowering {
        ch_img: ch_out,
        img: big,
        ker,
        out: small,
        geom,
    };
    let mut out_shape = vec![batch, ch_out];
    out_shape.extend_from_slice(&big[3 - (x.ndim() - 2)..]);
    let mut y = ArrayD::<T>::zeros(IxDyn(&out_shape));
    let xs = contiguous(x);
    let ws = contiguous(w);
    let w2 = view2(&ws, ch_in, low.rows());
    let in_stride = ch_in * low.out_len();
    let out_stride = ch_out * low.img_len();
    let ys = y.as_slice_mut().expect("contiguous");
    let chunk = low.chunk();
    let mut gcols = Vec::new();
    for b in 0..batch {
        let xb = view2(&xs[b * in_stride..(b + 1) * in_stride], ch_in, low.out_len());
        let yb = &mut ys[b * out_stride..(b + 1) * out_stride];
        let mut od0 = 0;
        while od0 < small[0] {
            let od1 = (od0 + chunk).min(small[0]);
            let n = (od1 - od0) * low.plane();
            gcols.resize(low.rows() * n, T::zero());
            let x_chunk = xb.slice(ndarray::s![.., od0 * low.plane()..od1 * low.plane()]);
            general_mat_mul(T::one(), &w2.t(), &x_chunk, T::zero(), &mut view2_mut(&mut gcols, low.rows(), n));
            low.col2im(&gcols, od0, od1, yb);
            od0 = od1;
        }
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut y, bias);
    }
    y
}

/// Gradients of [`conv_transpose_forward`].
pub fn conv_transpose_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    gy: &ArrayD<T>,
    geom: ConvGeometry,
    want_input: bool,
) -> (Option<ArrayD<T>>, ArrayD<T>, ArrayD<T>) {
    let batch = x.shape()[0];
    let ch_in = w.shape()[0];
    let ch_out = w.shape()[1];
    let low = Lowering {
        ch_img: ch_out,
        img: spatial3(gy.shape()),
        ker: spatial3(w.shape()),
        out: spatial3(x.shape()),
        geom,
    };
    let xs = contiguous(x);
    let ws = contiguous(w);
    let gys = contiguous(gy);
    let w2 = view2(&ws, ch_in, low.rows());
    let mut gw = ArrayD::<T>::zeros(w.raw_dim());
    let mut gx = want_input.then(|| ArrayD::<T>::zeros(x.raw_dim()));
    let in_stride = ch_in * low.out_len();
    let out_stride = ch_out * low.img_len();
    let chunk = low.chunk();
    let mut cols = Vec::new();
    {
        let mut gw2 = view2_mut(gw.as_slice_mut().expect("contiguous"), ch_in, low.rows());
        let mut gx_slice = gx.as_mut().map(|g| g.as_slice_mut().expect("contiguous"));
        for b in 0..batch {
            let xb = view2(&xs[b * in_stride..(b + 1) * in_stride], ch_in, low.out_len());
            let gyb = &gys[b * out_stride..(b + 1) * out_stride];
            let mut od0 = 0;
            while od0 < low.out[0] {
                let od1 = (od0 + chunk).min(low.out[0]);
                let n = (od1 - od0) * low.plane();
                let span = od0 * low.plane()..od1 * low.plane();
                cols.resize(low.rows() * n, T::zero());
                low.im2col(gyb, od0, od1, &mut cols);
                let cv = view2(&cols, low.rows(), n);
                let x_chunk = xb.slice(ndarray::s![.., span.clone()]);
                general_mat_mul(T::one(), &x_chunk, &cv.t(), T::one(), &mut gw2);
                if let Some(gxs) = gx_slice.as_deref_mut() {
                    let mut gxb = view2_mut(&mut gxs[b * in_stride..(b + 1) * in_stride], ch_in, low.out_len());
                    let mut dst = gxb.slice_mut(ndarray::s![.., span]);
                    general_mat_mul(T::one(), &w2, &cv, T::zero(), &mut dst);
                }
                od0 = od1;
            }
        }
    }
    let gb = channel_sum(gy);
    (gx, gw, gb)
}

fn add_channel_bias<T: Scalar>(y: &mut ArrayD<T>, bias: &ArrayD<T>) {
    assert_eq!(bias.len(), y.shape()[1], "bias length must equal output channels");
    for mut item in y.axis_iter_mut(Axis(0)) {
        for (mut ch, &b) in item.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            ch.mapv_inplace(|v| v + b);
        }
    }
}

fn channel_sum<T: Scalar>(gy: &ArrayD<T>) -> ArrayD<T> {
    let ch = gy.shape()[1];
    let mut out = ArrayD::<T>::zeros(IxDyn(&[ch]));
    for item in gy.axis_iter(Axis(0)) {
        for (o, c) in out.iter_mut().zip(item.axis_iter(Axis(0))) {
            *o += c.sum();
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Convolution over the trailing 1–3 axes of `x`.
    pub fn conv(&self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = bias.map(|b| self.value(b));
        let y = conv_forward(&xv, &wv, bv.as_deref(), geom);
        let mut parents = vec![x, w];
        parents.extend(bias);
        let want_x = self.requires_grad(x);
        self.push(y, &parents, move || {
            Box::new(move |g| {
                let (gx, gw, gb) = conv_backward(&xv, &wv, g, geom, want_x);
                let mut out = vec![gx, Some(gw)];
                if bv.is_some() {
                    out.push(Some(gb));
                }
                out
            })
        })
    }

    /// Transposed convolution over the trailing 1–3 axes of `x`.
    pub fn conv_transpose(&self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = bias.map(|b| self.value(b));
        let y = conv_transpose_forward(&xv, &wv, bv.as_deref(), geom);
        let mut parents = vec![x, w];
        parents.extend(bias);
        let want_x = self.requires_grad(x);
        self.push(y, &parents, move || {
            Box::new(move |g| {
                let (gx, gw, gb) = conv_transpose_backward(&xv, &wv, g, geom, want_x);
                let mut out = vec![gx, Some(gw)];
                if bv.is_some() {
                    out.push(Some(gb));
                }
                out
            })
        })
    }
}
