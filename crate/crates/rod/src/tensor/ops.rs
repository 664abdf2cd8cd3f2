//! Numeric kernels: convolution, normalization, activations, bilinear
//! resampling and their backward passes.
//!
//! Convolutions are im2col + GEMM. Backward passes exist only for the kernels
//! the trainable decoder uses; the frozen encoder never needs one.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView4, Axis, Zip};

use super::{trace, Elem};

/// Valid output side for a square-kernel convolution.
pub fn conv_out_side(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Row range of the output grid touched by kernel offset `kx` (same for y).
/// Returns `(o0, o1, i0)`: output indices `[o0, o1)` read inputs starting at
/// `i0` with step `stride`.
fn kernel_span(input: usize, out: usize, kernel_off: usize, stride: usize, pad: usize) -> (usize, usize, usize) {
    let o0 = if pad > kernel_off {
        (pad - kernel_off).div_ceil(stride)
    } else {
        0
    };
    if input + pad <= kernel_off {
        return (0, 0, 0);
    }
    let o1 = ((input - 1 + pad - kernel_off) / stride + 1).min(out);
    if o0 >= o1 {
        return (0, 0, 0);
    }
    (o0, o1, o0 * stride + kernel_off - pad)
}

/// Unfold one image `(ci, h, w)` into `(ci*k*k, ho*wo)` columns.
fn im2col<T: Elem>(
    x: &ndarray::ArrayView3<'_, T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (ci, h, w) = x.dim();
    let ho = conv_out_side(h, kernel, stride, pad);
    let wo = conv_out_side(w, kernel, stride, pad);
    let mut cols = Array2::<T>::zeros((ci * kernel * kernel, ho * wo));
    for ky in 0..kernel {
        let (oy0, oy1, y0) = kernel_span(h, ho, ky, stride, pad);
        if oy0 >= oy1 {
            continue;
        }
        for kx in 0..kernel {
            let (ox0, ox1, x0) = kernel_span(w, wo, kx, stride, pad);
            if ox0 >= ox1 {
                continue;
            }
            let y_end = (oy1 - 1) * stride + ky + 1 - pad;
            let x_end = (ox1 - 1) * stride + kx + 1 - pad;
            for c in 0..ci {
                let row = (c * kernel + ky) * kernel + kx;
                let src = x.slice(s![c, y0..y_end;stride, x0..x_end;stride]);
                let mut dst = cols.row_mut(row).into_shape_with_order((ho, wo)).unwrap();
                dst.slice_mut(s![oy0..oy1, ox0..ox1]).assign(&src);
            }
        }
    }
    cols
}

/// Fold columns back into an image with accumulation (adjoint of [`im2col`]).
fn col2im_add<T: Elem>(
    cols: &Array2<T>,
    out: &mut ndarray::ArrayViewMut3<'_, T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) {
    let (ci, h, w) = out.dim();
    let ho = conv_out_side(h, kernel, stride, pad);
    let wo = conv_out_side(w, kernel, stride, pad);
    for ky in 0..kernel {
        let (oy0, oy1, y0) = kernel_span(h, ho, ky, stride, pad);
        if oy0 >= oy1 {
            continue;
        }
        for kx in 0..kernel {
            let (ox0, ox1, x0) = kernel_span(w, wo, kx, stride, pad);
            if ox0 >= ox1 {
                continue;
            }
            let y_end = (oy1 - 1) * stride + ky + 1 - pad;
            let x_end = (ox1 - 1) * stride + kx + 1 - pad;
            for c in 0..ci {
                let row = (c * kernel + ky) * kernel + kx;
                let src = cols.row(row).into_shape_with_order((ho, wo)).unwrap();
                let mut dst = out.slice_mut(s![c, y0..y_end;stride, x0..x_end;stride]);
                dst += &src.slice(s![oy0..oy1, ox0..ox1]);
            }
        }
    }
}

/// 2-D convolution over NCHW input. Weight layout `(c_out, c_in, k, k)`.
pub fn conv2d<T: Elem>(
    x: &Array4<T>,
    weight: &ArrayView4<'_, T>,
    bias: Option<&ArrayView1<'_, T>>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    trace::bump("conv2d");
    let x = x.as_standard_layout();
    let (b, ci, h, w) = x.dim();
    let (co, wci, k, _) = weight.dim();
    assert_eq!(ci, wci, "conv2d channel mismatch");
    let ho = conv_out_side(h, k, stride, pad);
    let wo = conv_out_side(w, k, stride, pad);
    let w_mat = weight
        .to_shape((co, ci * k * k))
        .expect("conv weight is standard layout");
    let mut out = Array4::<T>::zeros((b, co, ho, wo));
    for bi in 0..b {
        let cols;
        let cols_view = if k == 1 && stride == 1 && pad == 0 {
            x.index_axis(Axis(0), bi)
                .into_shape_with_order((ci, h * w))
                .expect("contiguous batch item")
        } else {
            cols = im2col(&x.index_axis(Axis(0), bi), k, stride, pad);
            cols.view()
        };
        let mut out_mat = out
            .index_axis_mut(Axis(0), bi)
            .into_shape_with_order((co, ho * wo))
            .unwrap();
        general_mat_mul(T::one(), &w_mat.view(), &cols_view, T::zero(), &mut out_mat);
    }
    if let Some(bias) = bias {
        for c in 0..co {
            let bc = bias[c];
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bc);
        }
    }
    out
}

/// Gradients of [`conv2d`]. Returns `(grad_input, grad_weight, grad_bias)`;
/// `grad_input` is computed only when `need_input_grad` is set (the latent
/// projections sit directly on frozen encoder outputs and never need it).
pub fn conv2d_backward<T: Elem>(
    x: &Array4<T>,
    weight: &ArrayView4<'_, T>,
    grad_out: &Array4<T>,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> (Option<Array4<T>>, Array4<T>, Array1<T>) {
    trace::bump("conv2d_backward");
    let x = x.as_standard_layout();
    let grad_out = grad_out.as_standard_layout();
    let (b, ci, h, w) = x.dim();
    let (co, _, k, _) = weight.dim();
    let (_, _, ho, wo) = grad_out.dim();
    let w_mat = weight.to_shape((co, ci * k * k)).unwrap();

    let grad_bias = grad_out
        .sum_axis(Axis(3))
        .sum_axis(Axis(2))
        .sum_axis(Axis(0));
    let mut grad_w_mat = Array2::<T>::zeros((co, ci * k * k));
    let mut grad_x = need_input_grad.then(|| Array4::<T>::zeros((b, ci, h, w)));

    for bi in 0..b {
        let cols;
        let cols_view = if k == 1 && stride == 1 && pad == 0 {
            x.index_axis(Axis(0), bi)
                .into_shape_with_order((ci, h * w))
                .unwrap()
        } else {
            cols = im2col(&x.index_axis(Axis(0), bi), k, stride, pad);
            cols.view()
        };
        let gout_mat = grad_out
            .index_axis(Axis(0), bi)
            .into_shape_with_order((co, ho * wo))
            .unwrap();
        general_mat_mul(T::one(), &gout_mat, &cols_view.t(), T::one(), &mut grad_w_mat.view_mut());
        if let Some(gx) = grad_x.as_mut() {
            let mut gcols = Array2::<T>::zeros((ci * k * k, ho * wo));
            general_mat_mul(T::one(), &w_mat.t(), &gout_mat, T::zero(), &mut gcols.view_mut());
            if k == 1 && stride == 1 && pad == 0 {
                gx.index_axis_mut(Axis(0), bi)
                    .into_shape_with_order((ci, h * w))
                    .unwrap()
                    .assign(&gcols);
            } else {
                col2im_add(&gcols, &mut gx.index_axis_mut(Axis(0), bi), k, stride, pad);
            }
        }
    }
    let grad_weight = grad_w_mat.into_shape_with_order((co, ci, k, k)).unwrap();
    (grad_x, grad_weight, grad_bias)
}

/// Row-major linear map `y = x W^T + b` with `x (m, c_in)`, `w (c_out, c_in)`.
pub fn linear<T: Elem>(
    x: &ArrayView2<'_, T>,
    w: &ArrayView2<'_, T>,
    b: Option<&ArrayView1<'_, T>>,
) -> Array2<T> {
    trace::bump("linear");
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &b.view().insert_axis(Axis(0));
    }
    y
}

/// Layer normalization over the embedding axis of a token grid
/// `(b, gh, gw, c)` with learned per-channel affine.
pub fn layer_norm_tokens<T: Elem>(
    x: &Array4<T>,
    gamma: &ArrayView1<'_, T>,
    beta: &ArrayView1<'_, T>,
    eps: f64,
) -> Array4<T> {
    trace::bump("layer_norm");
    let mut out = x.clone();
    let eps = T::from_f64(eps);
    let c = x.dim().3;
    let inv_c = T::from_f64(1.0 / c as f64);
    for mut lane in out.lanes_mut(Axis(3)) {
        let mut mean = T::zero();
        for v in lane.iter() {
            mean = mean + *v;
        }
        mean = mean * inv_c;
        let mut var = T::zero();
        for v in lane.iter() {
            let d = *v - mean;
            var = var + d * d;
        }
        var = var * inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        for (v, (g, b)) in lane.iter_mut().zip(gamma.iter().zip(beta.iter())) {
            *v = (*v - mean) * rstd * *g + *b;
        }
    }
    out
}

/// Channel-wise layer normalization over NCHW maps: statistics are taken
/// across channels at each spatial position, affine is per-channel.
/// Returns the output plus the per-position `(mean, rstd)` needed by the
/// backward pass.
pub fn channel_norm<T: Elem>(
    x: &Array4<T>,
    gamma: &ArrayView1<'_, T>,
    beta: &ArrayView1<'_, T>,
    eps: f64,
) -> (Array4<T>, Array3<T>, Array3<T>) {
    trace::bump("channel_norm");
    let (b, c, h, w) = x.dim();
    let eps = T::from_f64(eps);
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut out = Array4::<T>::zeros((b, c, h, w));
    let mut means = Array3::<T>::zeros((b, h, w));
    let mut rstds = Array3::<T>::zeros((b, h, w));
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let lane = x.slice(s![bi, .., y, xx]);
                let mut mean = T::zero();
                for v in lane.iter() {
                    mean = mean + *v;
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for v in lane.iter() {
                    let d = *v - mean;
                    var = var + d * d;
                }
                var = var * inv_c;
                let rstd = T::one() / (var + eps).sqrt();
                means[[bi, y, xx]] = mean;
                rstds[[bi, y, xx]] = rstd;
                let mut dst = out.slice_mut(s![bi, .., y, xx]);
                for ((d, v), (g, be)) in dst
                    .iter_mut()
                    .zip(lane.iter())
                    .zip(gamma.iter().zip(beta.iter()))
                {
                    *d = (*v - mean) * rstd * *g + *be;
                }
            }
        }
    }
    (out, means, rstds)
}

/// Backward pass of [`channel_norm`].
pub fn channel_norm_backward<T: Elem>(
    x: &Array4<T>,
    gamma: &ArrayView1<'_, T>,
    means: &Array3<T>,
    rstds: &Array3<T>,
    grad_out: &Array4<T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    trace::bump("channel_norm_backward");
    let (b, c, h, w) = x.dim();
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut grad_x = Array4::<T>::zeros((b, c, h, w));
    let mut grad_gamma = Array1::<T>::zeros(c);
    let mut grad_beta = Array1::<T>::zeros(c);
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let mean = means[[bi, y, xx]];
                let rstd = rstds[[bi, y, xx]];
                let xs = x.slice(s![bi, .., y, xx]);
                let gs = grad_out.slice(s![bi, .., y, xx]);
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for ((v, g), ga) in xs.iter().zip(gs.iter()).zip(gamma.iter()) {
                    let xhat = (*v - mean) * rstd;
                    let dxhat = *g * *ga;
                    m1 = m1 + dxhat;
                    m2 = m2 + dxhat * xhat;
                }
                m1 = m1 * inv_c;
                m2 = m2 * inv_c;
                let mut dst = grad_x.slice_mut(s![bi, .., y, xx]);
                for (ci, ((d, v), g)) in dst
                    .iter_mut()
                    .zip(xs.iter())
                    .zip(gs.iter())
                    .enumerate()
                {
                    let xhat = (*v - mean) * rstd;
                    let dxhat = *g * gamma[ci];
                    *d = rstd * (dxhat - m1 - xhat * m2);
                    grad_gamma[ci] = grad_gamma[ci] + *g * xhat;
                    grad_beta[ci] = grad_beta[ci] + *g;
                }
            }
        }
    }
    (grad_x, grad_gamma, grad_beta)
}

pub fn relu<T: Elem>(x: &Array4<T>) -> Array4<T> {
    trace::bump("relu");
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of ReLU given the pre-activation input.
pub fn relu_backward<T: Elem>(pre: &Array4<T>, grad_out: &Array4<T>) -> Array4<T> {
    let mut g = grad_out.clone();
    Zip::from(&mut g).and(pre).for_each(|gv, p| {
        if *p <= T::zero() {
            *gv = T::zero();
        }
    });
    g
}

/// GELU, tanh approximation.
pub fn gelu<T: Elem>(v: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
}

/// Numerically stable softmax over the last axis of a 2-D array, in place.
pub fn softmax_rows_inplace<T: Elem>(x: &mut Array2<T>) {
    trace::bump("softmax");
    for mut row in x.rows_mut() {
        let mut max = T::neg_infinity();
        for v in row.iter() {
            if *v > max {
                max = *v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Per-axis source indices and interpolation weight for a bilinear resize
/// with half-pixel centers and edge clamping. Weights are derived in f64 so
/// both precisions agree on the geometry.
pub fn resize_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn lerp<T: Elem>(a: T, b: T, w: T) -> T {
    a + w * (b - a)
}

/// Bilinear resize of NCHW maps to `(out_h, out_w)`, half-pixel convention.
pub fn resize_bilinear<T: Elem>(x: &Array4<T>, out_h: usize, out_w: usize) -> Array4<T> {
    trace::bump("resize");
    let (b, c, h, w) = x.dim();
    if out_h == h && out_w == w {
        return x.clone();
    }
    let ys = resize_axis(h, out_h);
    let xs = resize_axis(w, out_w);
    let mut out = Array4::<T>::zeros((b, c, out_h, out_w));
    for bi in 0..b {
        for ci in 0..c {
            let src = x.slice(s![bi, ci, .., ..]);
            let mut dst = out.slice_mut(s![bi, ci, .., ..]);
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                let wy = T::from_f64(wy);
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let wx = T::from_f64(wx);
                    let top = lerp(src[[y0, x0]], src[[y0, x1]], wx);
                    let bot = lerp(src[[y1, x0]], src[[y1, x1]], wx);
                    dst[[oy, ox]] = lerp(top, bot, wy);
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatters output-space gradients back to
/// the input grid with the same interpolation weights.
pub fn resize_bilinear_backward<T: Elem>(
    grad_out: &Array4<T>,
    in_h: usize,
    in_w: usize,
) -> Array4<T> {
    trace::bump("resize_backward");
    let (b, c, oh, ow) = grad_out.dim();
    if oh == in_h && ow == in_w {
        return grad_out.clone();
    }
    let ys = resize_axis(in_h, oh);
    let xs = resize_axis(in_w, ow);
    let mut out = Array4::<T>::zeros((b, c, in_h, in_w));
    for bi in 0..b {
        for ci in 0..c {
            let src = grad_out.slice(s![bi, ci, .., ..]);
            let mut dst = out.slice_mut(s![bi, ci, .., ..]);
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                let wy = T::from_f64(wy);
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let wx = T::from_f64(wx);
                    let g = src[[oy, ox]];
                    let one = T::one();
                    dst[[y0, x0]] = dst[[y0, x0]] + g * (one - wy) * (one - wx);
                    dst[[y0, x1]] = dst[[y0, x1]] + g * (one - wy) * wx;
                    dst[[y1, x0]] = dst[[y1, x0]] + g * wy * (one - wx);
                    dst[[y1, x1]] = dst[[y1, x1]] + g * wy * wx;
                }
            }
        }
    }
    out
}

/// Argmax over the class axis of `(b, k, h, w)` logits. Ties resolve to the
/// lowest class index, so an all-equal pixel predicts class 0.
pub fn argmax_classes<T: Elem>(logits: &Array4<T>) -> Array3<u8> {
    trace::bump("argmax");
    let (b, k, h, w) = logits.dim();
    let mut out = Array3::<u8>::zeros((b, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = logits[[bi, 0, y, x]];
                for c in 1..k {
                    let v = logits[[bi, c, y, x]];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                out[[bi, y, x]] = best as u8;
            }
        }
    }
    out
}
