//! Dense compute kernels for the networks: convolution as im2col + sgemm,
//! padding, instance normalization, activations, nearest upsampling.
//!
//! Everything is f32 with f64 accumulation in reductions. All kernels are
//! deterministic: parallelism only splits work across disjoint output
//! slices, never across a reduction.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};

/// How a convolution input is padded before the (always valid) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let j = if i < 0 { -i } else if i >= len { 2 * (len - 1) - i } else { i };
    debug_assert!((0..len).contains(&j));
    j as usize
}

/// Pads H and W by `p` on each side.
pub fn pad(x: ArrayView4<f32>, p: usize, mode: PadMode) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    if p == 0 {
        return x.to_owned();
    }
    if mode == PadMode::Reflect {
        assert!(p < h && p < w, "reflect pad {p} needs input larger than the border");
    }
    let mut out = Array4::zeros((n, c, h + 2 * p, w + 2 * p));
    match mode {
        PadMode::Zero => {
            out.slice_mut(s![.., .., p..p + h, p..p + w]).assign(&x);
        }
        PadMode::Reflect => {
            let rmap: Vec<usize> = (0..h + 2 * p)
                .map(|i| reflect_index(i as isize - p as isize, h))
                .collect();
            let cmap: Vec<usize> = (0..w + 2 * p)
                .map(|j| reflect_index(j as isize - p as isize, w))
                .collect();
            for ni in 0..n {
                for ci in 0..c {
                    let src = x.slice(s![ni, ci, .., ..]);
                    let mut dst = out.slice_mut(s![ni, ci, .., ..]);
                    for (oi, &si) in rmap.iter().enumerate() {
                        for (oj, &sj) in cmap.iter().enumerate() {
                            dst[[oi, oj]] = src[[si, sj]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad`]: folds gradients on padded positions back onto their
/// source pixels.
pub fn pad_adjoint(gp: ArrayView4<f32>, p: usize, mode: PadMode, h: usize, w: usize) -> Array4<f32> {
    let (n, c, hp, wp) = gp.dim();
    if p == 0 {
        return gp.to_owned();
    }
    assert_eq!((hp, wp), (h + 2 * p, w + 2 * p));
    match mode {
        PadMode::Zero => gp.slice(s![.., .., p..p + h, p..p + w]).to_owned(),
        PadMode::Reflect => {
            let rmap: Vec<usize> = (0..hp).map(|i| reflect_index(i as isize - p as isize, h)).collect();
            let cmap: Vec<usize> = (0..wp).map(|j| reflect_index(j as isize - p as isize, w)).collect();
            let mut out = Array4::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let src = gp.slice(s![ni, ci, .., ..]);
                    let mut dst = out.slice_mut(s![ni, ci, .., ..]);
                    for (oi, &si) in rmap.iter().enumerate() {
                        for (oj, &sj) in cmap.iter().enumerate() {
                            dst[[si, sj]] += src[[oi, oj]];
                        }
                    }
                }
            }
            out
        }
    }
}

/// Output spatial size of a valid convolution (trailing pixels dropped).
pub fn conv_out_size(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

fn im2col(x: ArrayView3<f32>, k: usize, stride: usize, oh: usize, ow: usize) -> Array2<f32> {
    let c = x.dim().0;
    let mut col = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = x.slice(s![
                    ci,
                    ki..ki + (oh - 1) * stride + 1; stride,
                    kj..kj + (ow - 1) * stride + 1; stride
                ]);
                let mut dst = col.row_mut(row);
                dst.view_mut()
                    .into_shape_with_order((oh, ow))
                    .expect("row is contiguous")
                    .assign(&src);
            }
        }
    }
    col
}

fn col2im_add(
    dcol: &Array2<f32>,
    c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    mut dx: ndarray::ArrayViewMut3<f32>,
) {
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = dcol
                    .row(row)
                    .into_shape_with_order((oh, ow))
                    .expect("row is contiguous");
                let mut dst = dx.slice_mut(s![
                    ci,
                    ki..ki + (oh - 1) * stride + 1; stride,
                    kj..kj + (ow - 1) * stride + 1; stride
                ]);
                dst += &src;
            }
        }
    }
}

/// Valid convolution. x: (N, C, H, W); w: (OC, C, K, K); b: (OC).
pub fn conv2d_fwd(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    b: ArrayView1<f32>,
    stride: usize,
) -> Array4<f32> {
    let (n, c, h, wd) = x.dim();
    let (oc, wc, kh, kw) = w.dim();
    assert_eq!(kh, kw, "square kernels only");
    assert_eq!(wc, c, "channel mismatch");
    assert!(h >= kh && wd >= kw, "input smaller than kernel");
    assert!(stride >= 1);
    let (oh, ow) = (conv_out_size(h, kh, stride), conv_out_size(wd, kw, stride));
    let w_mat = w.to_shape((oc, c * kh * kw)).expect("weights are contiguous");
    let mut y = Array4::zeros((n, oc, oh, ow));
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ni, mut yn)| {
            let col = im2col(x.index_axis(Axis(0), ni), kh, stride, oh, ow);
            let out = w_mat.dot(&col);
            yn.assign(
                &out.into_shape_with_order((oc, oh, ow))
                    .expect("gemm output is contiguous"),
            );
            for oci in 0..oc {
                let bias = b[oci];
                yn.slice_mut(s![oci, .., ..]).mapv_inplace(|v| v + bias);
            }
        });
    y
}

/// Gradient of a valid convolution w.r.t. its input.
pub fn conv2d_bwd_input(
    gy: ArrayView4<f32>,
    w: ArrayView4<f32>,
    stride: usize,
    in_h: usize,
    in_w: usize,
) -> Array4<f32> {
    let (n, oc, oh, ow) = gy.dim();
    let (woc, c, k, _) = w.dim();
    assert_eq!(woc, oc);
    let w_mat = w.to_shape((oc, c * k * k)).expect("weights are contiguous");
    let mut dx = Array4::zeros((n, c, in_h, in_w));
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ni, dxn)| {
            let dy_mat = gy
                .index_axis(Axis(0), ni)
                .to_shape((oc, oh * ow))
                .expect("gradient is contiguous")
                .to_owned();
            let dcol = w_mat.t().dot(&dy_mat);
            col2im_add(&dcol, c, k, stride, oh, ow, dxn);
        });
    dx
}

/// Gradients of a valid convolution w.r.t. weights and bias.
pub fn conv2d_bwd_weights(
    gy: ArrayView4<f32>,
    x: ArrayView4<f32>,
    stride: usize,
    k: usize,
) -> (Array4<f32>, Array1<f32>) {
    let (n, oc, oh, ow) = gy.dim();
    let c = x.dim().1;
    let partials: Vec<(Array2<f32>, Array1<f32>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let col = im2col(x.index_axis(Axis(0), ni), k, stride, oh, ow);
            let dy_mat = gy
                .index_axis(Axis(0), ni)
                .to_shape((oc, oh * ow))
                .expect("gradient is contiguous")
                .to_owned();
            let dw = dy_mat.dot(&col.t());
            let db = Array1::from_iter(
                dy_mat
                    .axis_iter(Axis(0))
                    .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32),
            );
            (dw, db)
        })
        .collect();
    let mut dw_mat = Array2::<f32>::zeros((oc, c * k * k));
    let mut db = Array1::<f32>::zeros(oc);
    for (dw_n, db_n) in partials {
        dw_mat += &dw_n;
        db += &db_n;
    }
    let dw = dw_mat
        .into_shape_with_order((oc, c, k, k))
        .expect("weight gradient is contiguous");
    (dw, db)
}

/// Per-(sample, channel) normalization statistics from the forward pass,
/// reused by the backward pass.
pub struct NormStats {
    pub mean: Array2<f32>,
    pub inv_std: Array2<f32>,
}

/// Instance normalization: y = gamma * (x - mean) / sqrt(var + eps) + beta,
/// statistics over H x W per sample and channel.
pub fn instance_norm_fwd(
    x: ArrayView4<f32>,
    gamma: ArrayView1<f32>,
    beta: ArrayView1<f32>,
    eps: f32,
) -> (Array4<f32>, NormStats) {
    let (n, c, h, w) = x.dim();
    let m = (h * w) as f64;
    let mut y = Array4::zeros((n, c, h, w));
    let mut mean = Array2::zeros((n, c));
    let mut inv_std = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            let mu = plane.iter().map(|&v| v as f64).sum::<f64>() / m;
            let var = plane.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / m;
            let istd = 1.0 / (var + eps as f64).sqrt();
            mean[[ni, ci]] = mu as f32;
            inv_std[[ni, ci]] = istd as f32;
            let (g, bt) = (gamma[ci] as f64, beta[ci] as f64);
            let mut out = y.slice_mut(s![ni, ci, .., ..]);
            out.assign(&plane.mapv(|v| (g * (v as f64 - mu) * istd + bt) as f32));
        }
    }
    (y, NormStats { mean, inv_std })
}

/// Backward of instance normalization. Returns (dx, dgamma, dbeta).
pub fn instance_norm_bwd(
    gy: ArrayView4<f32>,
    x: ArrayView4<f32>,
    gamma: ArrayView1<f32>,
    stats: &NormStats,
) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
    let (n, c, h, w) = x.dim();
    let m = (h * w) as f64;
    let mut dx = Array4::zeros((n, c, h, w));
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ni in 0..n {
        for ci in 0..c {
            let mu = stats.mean[[ni, ci]] as f64;
            let istd = stats.inv_std[[ni, ci]] as f64;
            let g = gamma[ci] as f64;
            let plane = x.slice(s![ni, ci, .., ..]);
            let gplane = gy.slice(s![ni, ci, .., ..]);
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            let mut sum_gy = 0.0f64;
            let mut sum_gy_xhat = 0.0f64;
            for (&xv, &gv) in plane.iter().zip(gplane.iter()) {
                let xhat = (xv as f64 - mu) * istd;
                let dxhat = gv as f64 * g;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                sum_gy += gv as f64;
                sum_gy_xhat += gv as f64 * xhat;
            }
            dgamma[ci] += sum_gy_xhat as f32;
            dbeta[ci] += sum_gy as f32;
            let mean_dxhat = sum_dxhat / m;
            let mean_dxhat_xhat = sum_dxhat_xhat / m;
            let mut out = dx.slice_mut(s![ni, ci, .., ..]);
            for ((&xv, &gv), o) in plane.iter().zip(gplane.iter()).zip(out.iter_mut()) {
                let xhat = (xv as f64 - mu) * istd;
                let dxhat = gv as f64 * g;
                *o = (istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)) as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn leaky_relu_fwd(x: ArrayView4<f32>, slope: f32) -> Array4<f32> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// Backward from the saved output (sign of y matches sign of x).
pub fn leaky_relu_bwd(gy: ArrayView4<f32>, y: ArrayView4<f32>, slope: f32) -> Array4<f32> {
    let mut dx = gy.to_owned();
    dx.zip_mut_with(&y, |d, &yv| {
        if yv <= 0.0 {
            *d *= slope;
        }
    });
    dx
}

pub fn tanh_fwd(x: ArrayView4<f32>) -> Array4<f32> {
    x.mapv(f32::tanh)
}

pub fn tanh_bwd(gy: ArrayView4<f32>, y: ArrayView4<f32>) -> Array4<f32> {
    let mut dx = gy.to_owned();
    dx.zip_mut_with(&y, |d, &yv| *d *= 1.0 - yv * yv);
    dx
}

/// Probability floor keeping sigmoid outputs strictly inside (0, 1) in f32.
pub const PROB_EPS: f32 = 1e-7;

/// Sigmoid clamped into [PROB_EPS, 1 - PROB_EPS] so saturated activations
/// never round to exactly 0 or 1.
pub fn sigmoid_fwd(x: ArrayView4<f32>) -> Array4<f32> {
    x.mapv(|v| (1.0 / (1.0 + (-v).exp())).clamp(PROB_EPS, 1.0 - PROB_EPS))
}

pub fn sigmoid_bwd(gy: ArrayView4<f32>, y: ArrayView4<f32>) -> Array4<f32> {
    let mut dx = gy.to_owned();
    dx.zip_mut_with(&y, |d, &yv| *d *= yv * (1.0 - yv));
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_fwd(x: ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            let src = x.slice(s![ni, ci, .., ..]);
            let mut dst = y.slice_mut(s![ni, ci, .., ..]);
            for i in 0..h {
                for j in 0..w {
                    let v = src[[i, j]];
                    dst[[2 * i, 2 * j]] = v;
                    dst[[2 * i, 2 * j + 1]] = v;
                    dst[[2 * i + 1, 2 * j]] = v;
                    dst[[2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

/// Adjoint of 2x nearest upsampling: sum over each 2x2 block.
pub fn upsample2_bwd(gy: ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let src = gy.slice(s![ni, ci, .., ..]);
            let mut dst = dx.slice_mut(s![ni, ci, .., ..]);
            for i in 0..h {
                for j in 0..w {
                    dst[[i, j]] = src[[2 * i, 2 * j]]
                        + src[[2 * i, 2 * j + 1]]
                        + src[[2 * i + 1, 2 * j]]
                        + src[[2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    dx
}

/// Mean over channels and space, one scalar per sample.
pub fn sample_mean(x: ArrayView4<f32>) -> Array1<f32> {
    let (n, c, h, w) = x.dim();
    let m = (c * h * w) as f64;
    Array1::from_iter((0..n).map(|ni| {
        (x.index_axis(Axis(0), ni).iter().map(|&v| v as f64).sum::<f64>() / m) as f32
    }))
}
