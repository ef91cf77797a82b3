//! im2col-backed NCHW convolution kernels and their two adjoints.
//!
//! The three maps are mutual adjoints of the trilinear form
//! ⟨conv2d(x, w), g⟩ = ⟨conv2d_wgrad(x, g), w⟩ = ⟨conv2d_transpose(g, w), x⟩,
//! which is what lets the graph express each one's gradient in terms of the
//! other two.

use ndarray::{ArrayD, Ix2, Ix4, IxDyn};

pub(crate) fn out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "kernel {k} larger than padded input {}",
        input + 2 * pad
    );
    (input + 2 * pad - k) / stride + 1
}

/// Unfolds one sample (C, H, W) into (C*kh*kw, H'*W') patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = out_len(h, kh, stride, pad);
    let ow = out_len(w, kw, stride, pad);
    let mut cols = vec![0.0; c * kh * kw * oh * ow];
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xbase = (ci * h + iy as usize) * w;
                    let rbase = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[rbase + ox] = x[xbase + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Folds (C*kh*kw, H'*W') patch columns back into one sample, accumulating
/// overlaps. Adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = out_len(h, kh, stride, pad);
    let ow = out_len(w, kw, stride, pad);
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xbase = (ci * h + iy as usize) * w;
                    let rbase = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[xbase + ix as usize] += cols[rbase + ox];
                    }
                }
            }
        }
    }
    x
}

fn as4(a: &ArrayD<f64>, what: &str) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "{what} must be 4-D NCHW/OCHW, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

pub(crate) fn conv2d(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let (n, c, h, wd) = as4(x, "conv2d input");
    let (o, cw, kh, kw) = as4(w, "conv2d kernel");
    assert_eq!(c, cw, "conv2d channel mismatch: input {c}, kernel {cw}");
    let oh = out_len(h, kh, stride, pad);
    let ow = out_len(wd, kw, stride, pad);
    let xs = x.as_slice().expect("conv2d input must be contiguous");
    let wm = w
        .view()
        .into_shape_with_order((o, c * kh * kw))
        .unwrap()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let mut out = ArrayD::zeros(IxDyn(&[n, o, oh, ow]));
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        let cols = im2col(&xs[ni * c * h * wd..(ni + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad);
        let cm = ndarray::ArrayView2::from_shape((c * kh * kw, oh * ow), &cols).unwrap();
        let y = wm.dot(&cm);
        os[ni * o * oh * ow..(ni + 1) * o * oh * ow].copy_from_slice(y.as_slice().unwrap());
    }
    out
}

pub(crate) fn conv2d_transpose(
    y: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> ArrayD<f64> {
    let (n, o, oh, ow) = as4(y, "conv2d_transpose input");
    let (ow_o, c, kh, kw) = as4(w, "conv2d_transpose kernel");
    assert_eq!(o, ow_o, "conv2d_transpose channel mismatch: input {o}, kernel {ow_o}");
    let (h, wd) = out_hw;
    assert_eq!(
        (out_len(h, kh, stride, pad), out_len(wd, kw, stride, pad)),
        (oh, ow),
        "conv2d_transpose: out_hw {out_hw:?} inconsistent with input {:?}",
        y.shape()
    );
    let ys = y.as_slice().expect("conv2d_transpose input must be contiguous");
    let wt = w
        .view()
        .into_shape_with_order((o, c * kh * kw))
        .unwrap()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .t()
        .to_owned();
    let mut out = ArrayD::zeros(IxDyn(&[n, c, h, wd]));
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        let ym = ndarray::ArrayView2::from_shape((o, oh * ow), &ys[ni * o * oh * ow..(ni + 1) * o * oh * ow])
            .unwrap();
        let cols = wt.dot(&ym);
        let xi = col2im(cols.as_slice().unwrap(), c, h, wd, kh, kw, stride, pad);
        os[ni * c * h * wd..(ni + 1) * c * h * wd].copy_from_slice(&xi);
    }
    out
}

pub(crate) fn conv2d_wgrad(
    x: &ArrayD<f64>,
    gy: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    kshape: (usize, usize, usize, usize),
) -> ArrayD<f64> {
    let (n, c, h, wd) = as4(x, "conv2d_wgrad input");
    let (ng, o, oh, ow) = as4(gy, "conv2d_wgrad cotangent");
    assert_eq!(n, ng, "conv2d_wgrad batch mismatch");
    let (ko, kc, kh, kw) = kshape;
    assert_eq!((ko, kc), (o, c), "conv2d_wgrad kshape {kshape:?} inconsistent");
    assert_eq!(
        (out_len(h, kh, stride, pad), out_len(wd, kw, stride, pad)),
        (oh, ow),
        "conv2d_wgrad: cotangent spatial dims inconsistent"
    );
    let xs = x.as_slice().expect("conv2d_wgrad input must be contiguous");
    let gs = gy.as_slice().expect("conv2d_wgrad cotangent must be contiguous");
    let mut acc = ndarray::Array2::<f64>::zeros((o, c * kh * kw));
    for ni in 0..n {
        let cols = im2col(&xs[ni * c * h * wd..(ni + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad);
        let cm = ndarray::ArrayView2::from_shape((c * kh * kw, oh * ow), &cols).unwrap();
        let gm = ndarray::ArrayView2::from_shape((o, oh * ow), &gs[ni * o * oh * ow..(ni + 1) * o * oh * ow])
            .unwrap();
        acc = acc + gm.dot(&cm.t());
    }
    acc.into_shape_with_order((o, c, kh, kw))
        .unwrap()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .into_dyn()
}
