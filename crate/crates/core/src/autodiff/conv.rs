//! Raw convolution kernels (stride 1, zero padding) via im2col + matmul.
//!
//! Two families: shared-weight `[O,I,kh,kw]` and per-sample weight
//! `[N,O,I,kh,kw]` (the modulated-convolution path). Each has a forward and
//! a weight-gradient kernel; input gradients are expressed by the tape as
//! forward convolutions with flipped kernels.

use crate::num::Scalar;
use ndarray::prelude::*;
use ndarray::Zip;
use rayon::prelude::*;

/// Lay out one sample `[C,H,W]` as a `[C*kh*kw, OH*OW]` patch matrix.
fn im2col<T: Scalar>(x: ArrayView3<T>, kh: usize, kw: usize, pad: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut cols = Array2::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..ow {
                        let ix = ox + kx;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        out_row[oy * ow + ox] = x[[ci, iy, ix - pad]];
                    }
                }
            }
        }
    }
    cols
}

fn as4<T: Scalar>(a: &ArrayD<T>) -> ArrayView4<'_, T> {
    a.view().into_dimensionality::<Ix4>().expect("4-d tensor")
}

fn as5<T: Scalar>(a: &ArrayD<T>) -> ArrayView5<'_, T> {
    a.view().into_dimensionality::<Ix5>().expect("5-d tensor")
}

/// `y[n,o] = w[o,:] * patches(x[n])`, output `[N,O,OH,OW]`.
pub fn conv2d<T: Scalar>(x: &ArrayD<T>, w: &ArrayD<T>, pad: usize) -> ArrayD<T> {
    let x = as4(x);
    let w = as4(w);
    let (n, c, h, wd) = x.dim();
    let (o, i, kh, kw) = w.dim();
    assert_eq!(c, i, "conv2d channel mismatch: input {c} vs weight {i}");
    let oh = h + 2 * pad + 1 - kh;
    let ow = wd + 2 * pad + 1 - kw;
    let wmat = w
        .to_shape((o, i * kh * kw))
        .expect("contiguous weight")
        .to_owned();
    let per: Vec<Array2<T>> = (0..n)
        .into_par_iter()
        .map(|s| wmat.dot(&im2col(x.index_axis(Axis(0), s), kh, kw, pad)))
        .collect();
    let mut out = Array4::zeros((n, o, oh, ow));
    for (s, m) in per.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), s)
            .assign(&m.into_shape_with_order((o, oh, ow)).unwrap());
    }
    out.into_dyn()
}

/// Weight gradient of `conv2d`: `[O,I,kh,kw]` from `x` and the output
/// cotangent `dy`. Per-sample terms are reduced in index order so the
/// result is deterministic.
pub fn conv2d_wgrad<T: Scalar>(
    x: &ArrayD<T>,
    dy: &ArrayD<T>,
    kh: usize,
    kw: usize,
    pad: usize,
) -> ArrayD<T> {
    let x = as4(x);
    let dy = as4(dy);
    let (n, c, _, _) = x.dim();
    let (dn, o, oh, ow) = dy.dim();
    assert_eq!(n, dn);
    let per: Vec<Array2<T>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let cols = im2col(x.index_axis(Axis(0), s), kh, kw, pad);
            let dy2 = dy
                .index_axis(Axis(0), s)
                .to_shape((o, oh * ow))
                .unwrap()
                .to_owned();
            dy2.dot(&cols.t())
        })
        .collect();
    let mut acc = Array2::<T>::zeros((o, c * kh * kw));
    for m in per {
        Zip::from(&mut acc).and(&m).for_each(|a, &b| *a = *a + b);
    }
    acc.into_shape_with_order((o, c, kh, kw))
        .unwrap()
        .into_dyn()
}

/// Per-sample-weight convolution: `w` is `[N,O,I,kh,kw]`.
pub fn conv_ps<T: Scalar>(x: &ArrayD<T>, w: &ArrayD<T>, pad: usize) -> ArrayD<T> {
    let x = as4(x);
    let w = as5(w);
    let (n, c, h, wd) = x.dim();
    let (wn, o, i, kh, kw) = w.dim();
    assert_eq!(n, wn);
    assert_eq!(c, i, "conv_ps channel mismatch: input {c} vs weight {i}");
    let oh = h + 2 * pad + 1 - kh;
    let ow = wd + 2 * pad + 1 - kw;
    let per: Vec<Array2<T>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let cols = im2col(x.index_axis(Axis(0), s), kh, kw, pad);
            let wmat = w
                .index_axis(Axis(0), s)
                .to_shape((o, i * kh * kw))
                .unwrap()
                .to_owned();
            wmat.dot(&cols)
        })
        .collect();
    let mut out = Array4::zeros((n, o, oh, ow));
    for (s, m) in per.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), s)
            .assign(&m.into_shape_with_order((o, oh, ow)).unwrap());
    }
    out.into_dyn()
}

/// Weight gradient of `conv_ps`: `[N,O,I,kh,kw]`, no batch reduction.
pub fn conv_ps_wgrad<T: Scalar>(
    x: &ArrayD<T>,
    dy: &ArrayD<T>,
    kh: usize,
    kw: usize,
    pad: usize,
) -> ArrayD<T> {
    let x = as4(x);
    let dy = as4(dy);
    let (n, c, _, _) = x.dim();
    let (dn, o, oh, ow) = dy.dim();
    assert_eq!(n, dn);
    let per: Vec<Array2<T>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let cols = im2col(x.index_axis(Axis(0), s), kh, kw, pad);
            let dy2 = dy
                .index_axis(Axis(0), s)
                .to_shape((o, oh * ow))
                .unwrap()
                .to_owned();
            dy2.dot(&cols.t())
        })
        .collect();
    let mut out = Array5::zeros((n, o, c, kh, kw));
    for (s, m) in per.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), s)
            .assign(&m.into_shape_with_order((o, c, kh, kw)).unwrap());
    }
    out.into_dyn()
}
