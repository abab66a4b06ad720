use std::rc::Rc;

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

use crate::graph::{Graph, Var};
use crate::Scalar;

fn same_shape(a: &[usize], b: &[usize], op: &str) {
    assert_eq!(a, b, "{op}: operand shapes differ");
}

impl<T: Scalar> Graph<T> {
    fn unary<F, D>(&self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let xv = self.value(x);
        let y = xv.mapv(f);
        let yv = Rc::new(y.clone());
        self.push(y, &[x], move || {
            Box::new(move |g| {
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx)
                    .and(&*xv)
                    .and(&*yv)
                    .for_each(|gi, &xi, &yi| *gi *= df(xi, yi));
                vec![Some(gx)]
            })
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av.shape(), bv.shape(), "add");
        let y = &*av + &*bv;
        self.push(y, &[a, b], || Box::new(|g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av.shape(), bv.shape(), "sub");
        let y = &*av - &*bv;
        self.push(y, &[a, b], || Box::new(|g| vec![Some(g.clone()), Some(g.mapv(|v| -v))]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av.shape(), bv.shape(), "mul");
        let y = &*av * &*bv;
        self.push(y, &[a, b], move || {
            Box::new(move |g| vec![Some(g * &*bv), Some(g * &*av)])
        })
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        let y = self.value(x).mapv(|v| v * s);
        self.push(y, &[x], move || Box::new(move |g| vec![Some(g.mapv(|v| v * s))]))
    }

    pub fn leaky_relu(&self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v * slope },
            move |xi, _| if xi > T::zero() { T::one() } else { slope },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn log1p(&self, x: Var) -> Var {
        self.unary(x, |v| v.ln_1p(), |xi, _| T::one() / (T::one() + xi))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.raw_dim();
        let y = ArrayD::from_elem(IxDyn(&[1]), xv.sum());
        self.push(y, &[x], move || {
            Box::new(move |g| vec![Some(ArrayD::from_elem(shape.clone(), g[[0]]))])
        })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = T::from_usize_lossy(self.value(x).len());
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    /// Mean over the given axes, which are removed from the shape.
    pub fn mean_axes(&self, x: Var, axes: &[usize]) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut y = (*xv).clone();
        for &a in sorted.iter().rev() {
            y = y.mean_axis(Axis(a)).expect("non-empty axis");
        }
        let count = T::from_usize_lossy(sorted.iter().map(|&a| in_shape[a]).product());
        self.push(y, &[x], move || {
            Box::new(move |g| {
                let mut gx = g.mapv(|v| v / count);
                for &a in &sorted {
                    gx = gx.insert_axis(Axis(a));
                }
                let gx = gx
                    .broadcast(IxDyn(&in_shape))
                    .expect("broadcast back to input")
                    .to_owned();
                vec![Some(gx)]
            })
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let y = xv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        self.push(y, &[x], move || {
            Box::new(move |g| {
                let gx = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape back");
                vec![Some(gx)]
            })
        })
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let xv = self.value(x);
        let y = xv
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(y, &[x], move || {
            Box::new(move |g| {
                let gx = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned();
                vec![Some(gx)]
            })
        })
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let y = concatenate(Axis(axis), &views).expect("concat: shapes agree off-axis");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.push(y, parts, move || {
            Box::new(move |g| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let part = g
                            .slice_axis(Axis(axis), Slice::from(start..start + n))
                            .to_owned();
                        start += n;
                        Some(part)
                    })
                    .collect()
            })
        })
    }

    /// Elements `start..end` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let in_shape = xv.raw_dim();
        let y = xv.slice_axis(Axis(axis), Slice::from(start..end)).to_owned();
        self.push(y, &[x], move || {
            Box::new(move |g| {
                let mut gx = ArrayD::zeros(in_shape.clone());
                gx.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(g);
                vec![Some(gx)]
            })
        })
    }

    /// Inserts a new axis at `axis` and repeats the input `n` times along it.
    pub fn expand(&self, x: Var, axis: usize, n: usize) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        shape.insert(axis, n);
        let y = xv
            .view()
            .insert_axis(Axis(axis))
            .broadcast(IxDyn(&shape))
            .expect("broadcast along new axis")
            .to_owned();
        self.push(y, &[x], move || {
            Box::new(move |g| vec![Some(g.sum_axis(Axis(axis)))])
        })
    }

    /// Pads `axis` by repeating its first and last slices.
    pub fn pad_edge_axis(&self, x: Var, axis: usize, before: usize, after: usize) -> Var {
        let xv = self.value(x);
        let len = xv.shape()[axis];
        assert!(len > 0, "cannot edge-pad an empty axis");
        let first = xv.slice_axis(Axis(axis), Slice::from(0..1));
        let last = xv.slice_axis(Axis(axis), Slice::from(len - 1..len));
        let mut parts = Vec::with_capacity(before + after + 1);
        parts.extend(std::iter::repeat_n(first.view(), before));
        parts.push(xv.view());
        parts.extend(std::iter::repeat_n(last.view(), after));
        let y = concatenate(Axis(axis), &parts).expect("edge padding");
        self.push(y, &[x], move || {
            Box::new(move |g| {
                let mut gx = g
                    .slice_axis(Axis(axis), Slice::from(before..before + len))
                    .to_owned();
                for k in 0..before {
                    let mut head = gx.slice_axis_mut(Axis(axis), Slice::from(0..1));
                    head += &g.slice_axis(Axis(axis), Slice::from(k..k + 1));
                }
                for k in 0..after {
                    let idx = before + len + k;
                    let mut tail = gx.slice_axis_mut(Axis(axis), Slice::from(len - 1..len));
                    tail += &g.slice_axis(Axis(axis), Slice::from(idx..idx + 1));
                }
                vec![Some(gx)]
            })
        })
    }

    /// Averages non-overlapping groups of `factor` elements along `axis`.
    pub fn avg_pool_axis(&self, x: Var, axis: usize, factor: usize) -> Var {
        let xv = self.value(x);
        let len = xv.shape()[axis];
        assert!(len.is_multiple_of(factor), "pooled axis ({len}) must divide by {factor}");
        let inv = T::one() / T::from_usize_lossy(factor);
        let mut y = xv
            .slice_axis(Axis(axis), Slice::new(0, None, factor as isize))
            .to_owned();
        for k in 1..factor {
            y += &xv.slice_axis(Axis(axis), Slice::new(k as isize, None, factor as isize));
        }
        y.mapv_inplace(|v| v * inv);
        let in_shape = xv.raw_dim();
        self.push(y, &[x], move || {
            Box::new(move |g| {
                let mut gx = ArrayD::zeros(in_shape.clone());
                let scaled = g.mapv(|v| v * inv);
                for k in 0..factor {
                    gx.slice_axis_mut(Axis(axis), Slice::new(k as isize, None, factor as isize))
                        .assign(&scaled);
                }
                vec![Some(gx)]
            })
        })
    }

    /// Nearest-neighbour upsampling by `factor` along `axis`.
    pub fn repeat_axis(&self, x: Var, axis: usize, factor: usize) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        shape[axis] *= factor;
        let mut y = ArrayD::zeros(IxDyn(&shape));
        for k in 0..factor {
            y.slice_axis_mut(Axis(axis), Slice::new(k as isize, None, factor as isize))
                .assign(&*xv);
        }
        self.push(y, &[x], move || {
            Box::new(move |g| {
                let mut gx = g
                    .slice_axis(Axis(axis), Slice::new(0, None, factor as isize))
                    .to_owned();
                for k in 1..factor {
                    gx += &g.slice_axis(Axis(axis), Slice::new(k as isize, None, factor as isize));
                }
                vec![Some(gx)]
            })
        })
    }

    /// Linear interpolation along `axis` onto `target` evenly spaced points whose
    /// first and last samples coincide with the input endpoints.
    pub fn interp_axis(&self, x: Var, axis: usize, target: usize) -> Var {
        let xv = self.value(x);
        let taps = linear_taps::<T>(xv.shape()[axis], target);
        let y = apply_taps(&xv, axis, &taps, target);
        let len = xv.shape()[axis];
        self.push(y, &[x], move || {
            Box::new(move |g| vec![Some(apply_taps_adjoint(g, axis, &taps, len))])
        })
    }

    /// Max pooling over the last two axes with a square window.
    pub fn max_pool2d(&self, x: Var, kernel: usize, stride: usize, padding: usize) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let nd = shape.len();
        assert!(nd >= 3, "max_pool2d expects at least [N, H, W]");
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let planes: usize = shape[..nd - 2].iter().product();
        let src = xv.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut out_shape = shape.clone();
        out_shape[nd - 2] = oh;
        out_shape[nd - 1] = ow;
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if src[i] > best || best_i == usize::MAX {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&out_shape), out).expect("pool output shape");
        let total = xv.len();
        self.push(y, &[x], move || {
            Box::new(move |g| {
                let mut gx = vec![T::zero(); total];
                let gs = g.as_standard_layout();
                for (gi, &i) in gs.iter().zip(&argmax) {
                    gx[i] += *gi;
                }
                vec![Some(
                    ArrayD::from_shape_vec(IxDyn(&shape), gx).expect("pool input shape"),
                )]
            })
        })
    }
}

/// Source index pairs and weights for linear resampling of `len` points onto
/// `target` points.
pub fn linear_taps<T: Scalar>(len: usize, target: usize) -> Vec<(usize, usize, T)> {
    assert!(len >= 1 && target >= 1, "interpolation needs non-empty axes");
    (0..target)
        .map(|j| {
            if len == 1 || target == 1 {
                return (0, 0, T::zero());
            }
            let pos = j as f64 * (len - 1) as f64 / (target - 1) as f64;
            let lo = (pos.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, T::lit(pos - lo as f64))
        })
        .collect()
}

fn apply_taps<T: Scalar>(x: &ArrayD<T>, axis: usize, taps: &[(usize, usize, T)], target: usize) -> ArrayD<T> {
    let mut shape = x.shape().to_vec();
    shape[axis] = target;
    let mut y = ArrayD::zeros(IxDyn(&shape));
    for (j, &(lo, hi, frac)) in taps.iter().enumerate() {
        let a = x.index_axis(Axis(axis), lo);
        let b = x.index_axis(Axis(axis), hi);
        let mut dst = y.index_axis_mut(Axis(axis), j);
        ndarray::Zip::from(&mut dst)
            .and(&a)
            .and(&b)
            .for_each(|d, &av, &bv| *d = av + (bv - av) * frac);
    }
    y
}

fn apply_taps_adjoint<T: Scalar>(g: &ArrayD<T>, axis: usize, taps: &[(usize, usize, T)], len: usize) -> ArrayD<T> {
    let mut shape = g.shape().to_vec();
    shape[axis] = len;
    let mut gx = ArrayD::zeros(IxDyn(&shape));
    for (j, &(lo, hi, frac)) in taps.iter().enumerate() {
        let gj = g.index_axis(Axis(axis), j);
        gx.index_axis_mut(Axis(axis), lo)
            .scaled_add(T::one() - frac, &gj);
        gx.index_axis_mut(Axis(axis), hi).scaled_add(frac, &gj);
    }
    gx
}

/// Non-differentiable counterpart of [`Graph::interp_axis`].
pub fn interp_axis_array<T: Scalar>(x: &ArrayD<T>, axis: usize, target: usize) -> ArrayD<T> {
    let taps = linear_taps::<T>(x.shape()[axis], target);
    apply_taps(x, axis, &taps, target)
}
