//! Convolutional and fully-connected operators with analytic backward
//! passes, including the fixed-offset shifted convolution used by the
//! sub-region attention bank. Stride is always 1; downsampling is done by
//! the explicit 2x2 max pool.
//!
//! All forwards are pure; backwards accumulate parameter gradients into the
//! parameter tensors' grad buffers and return the input gradient.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Largest offset component a shifted convolution accepts.
pub const MAX_OFFSET: i32 = 2;

/// Parameters of a (possibly shifted) 2-D convolution. Kernels are square,
/// 1x1 or 3x3; padding is derived so spatial size is preserved (0 for 1x1,
/// 1 for 3x3). Offsets are (row, col) with +row pointing down; (0, 0) is a
/// standard convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Scalar> {
    pub kernel: Tensor4<T>, // (c_out, c_in, kh, kw)
    pub bias: Tensor4<T>,   // (1, c_out, 1, 1)
    offset: (i32, i32),
    padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernel: Tensor4<T>, bias: Vec<T>) -> Result<ConvParams<T>> {
        ConvParams::with_offset(kernel, bias, (0, 0))
    }

    pub fn with_offset(
        kernel: Tensor4<T>,
        bias: Vec<T>,
        offset: (i32, i32),
    ) -> Result<ConvParams<T>> {
        let ks = kernel.shape();
        if ks.h != ks.w || !(ks.h == 1 || ks.h == 3) {
            return Err(Error::invalid(
                "ConvParams",
                format!("kernel must be square 1x1 or 3x3, got {}x{}", ks.h, ks.w),
            ));
        }
        if bias.len() != ks.n {
            return Err(Error::LengthMismatch {
                context: "ConvParams bias",
                expected: ks.n,
                got: bias.len(),
            });
        }
        if offset.0.abs() > MAX_OFFSET || offset.1.abs() > MAX_OFFSET {
            return Err(Error::invalid(
                "ConvParams",
                format!("offset {offset:?} exceeds design limit |d| <= {MAX_OFFSET}"),
            ));
        }
        let padding = ks.h / 2;
        let bias = Tensor4::from_vec(Shape4::new(1, ks.n, 1, 1), bias)?.with_grad();
        Ok(ConvParams {
            kernel: kernel.with_grad(),
            bias,
            offset,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().c
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape().h
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn offset(&self) -> (i32, i32) {
        self.offset
    }

    pub fn zero_grads(&mut self) {
        self.kernel.zero_grad();
        self.bias.zero_grad();
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Weight (d_out, d_in) and bias (d_out) of a fully-connected layer.
#[derive(Clone, Debug)]
pub struct FcParams<T: Scalar> {
    pub weight: Tensor4<T>, // (d_out, d_in, 1, 1)
    pub bias: Tensor4<T>,   // (1, d_out, 1, 1)
}

impl<T: Scalar> FcParams<T> {
    pub fn new(weight: Tensor4<T>, bias: Vec<T>) -> Result<FcParams<T>> {
        let ws = weight.shape();
        if ws.h != 1 || ws.w != 1 {
            return Err(Error::shape("FcParams", "(d_out, d_in, 1, 1)", ws));
        }
        if bias.len() != ws.n {
            return Err(Error::LengthMismatch {
                context: "FcParams bias",
                expected: ws.n,
                got: bias.len(),
            });
        }
        let bias = Tensor4::from_vec(Shape4::new(1, ws.n, 1, 1), bias)?.with_grad();
        Ok(FcParams {
            weight: weight.with_grad(),
            bias,
        })
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn zero_grads(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Inclusive output-index range such that both the output index i and the
/// sampled input index i + shift stay in bounds.
#[inline]
fn shifted_range(out_len: usize, in_len: usize, shift: isize) -> Option<(usize, usize)> {
    let lo = 0.max(-shift);
    let hi = (out_len as isize - 1).min(in_len as isize - 1 - shift);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

fn conv_forward_impl<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: &[T],
    padding: usize,
    offset: (i32, i32),
) -> Tensor4<T> {
    let xs = x.shape();
    let ks = kernel.shape();
    let (kh, kw) = (ks.h, ks.w);
    let oh = xs.h + 2 * padding + 1 - kh;
    let ow = xs.w + 2 * padding + 1 - kw;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, ks.n, oh, ow));
    for ni in 0..xs.n {
        for co in 0..ks.n {
            let out_plane = out.plane_mut(ni, co);
            out_plane.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..xs.c {
                let x_plane = x.plane(ni, ci);
                for u in 0..kh {
                    let a = u as isize - padding as isize + offset.0 as isize;
                    let Some((ilo, ihi)) = shifted_range(oh, xs.h, a) else {
                        continue;
                    };
                    for v in 0..kw {
                        let b = v as isize - padding as isize + offset.1 as isize;
                        let Some((jlo, jhi)) = shifted_range(ow, xs.w, b) else {
                            continue;
                        };
                        let k = kernel.at(co, ci, u, v);
                        let row_len = jhi - jlo + 1;
                        for i in ilo..=ihi {
                            let si = (i as isize + a) as usize;
                            let sj = (jlo as isize + b) as usize;
                            let orow = &mut out_plane[i * ow + jlo..i * ow + jlo + row_len];
                            let xrow = &x_plane[si * xs.w + sj..si * xs.w + sj + row_len];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o += k * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_impl<T: Scalar>(
    x: &Tensor4<T>,
    kernel_data: &[T],
    kernel_shape: Shape4,
    grad_out: &Tensor4<T>,
    padding: usize,
    offset: (i32, i32),
    grad_x: &mut [T],
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
) {
    let xs = x.shape();
    let ks = kernel_shape;
    let os = grad_out.shape();
    let hw = xs.h * xs.w;
    for ni in 0..xs.n {
        for co in 0..ks.n {
            let gout_plane = grad_out.plane(ni, co);
            let mut bias_sum = T::ZERO;
            for &g in gout_plane {
                bias_sum += g;
            }
            grad_bias[co] += bias_sum;
            for ci in 0..xs.c {
                let x_plane = x.plane(ni, ci);
                let gx_base = (ni * xs.c + ci) * hw;
                for u in 0..ks.h {
                    let a = u as isize - padding as isize + offset.0 as isize;
                    let Some((ilo, ihi)) = shifted_range(os.h, xs.h, a) else {
                        continue;
                    };
                    for v in 0..ks.w {
                        let b = v as isize - padding as isize + offset.1 as isize;
                        let Some((jlo, jhi)) = shifted_range(os.w, xs.w, b) else {
                            continue;
                        };
                        let kidx = ((co * ks.c + ci) * ks.h + u) * ks.w + v;
                        let k = kernel_data[kidx];
                        let row_len = jhi - jlo + 1;
                        let mut k_acc = T::ZERO;
                        for i in ilo..=ihi {
                            let si = (i as isize + a) as usize;
                            let sj = (jlo as isize + b) as usize;
                            let grow = &gout_plane[i * os.w + jlo..i * os.w + jlo + row_len];
                            let xrow = &x_plane[si * xs.w + sj..si * xs.w + sj + row_len];
                            let gxrow = &mut grad_x
                                [gx_base + si * xs.w + sj..gx_base + si * xs.w + sj + row_len];
                            for ((&g, &xv), gx) in grow.iter().zip(xrow).zip(gxrow.iter_mut()) {
                                k_acc += g * xv;
                                *gx += k * g;
                            }
                        }
                        grad_kernel[kidx] += k_acc;
                    }
                }
            }
        }
    }
}

fn check_conv_input<T: Scalar>(
    context: &'static str,
    x: &Tensor4<T>,
    p: &ConvParams<T>,
) -> Result<()> {
    if x.shape().c != p.in_channels() {
        return Err(Error::shape(
            context,
            format!("{} input channels", p.in_channels()),
            x.shape(),
        ));
    }
    Ok(())
}

/// Standard cross-correlation with zero padding, stride 1.
pub fn conv2d<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    check_conv_input("conv2d", x, p)?;
    if p.offset != (0, 0) {
        return Err(Error::invalid(
            "conv2d",
            "nonzero offset; use shifted_conv2d",
        ));
    }
    Ok(conv_forward_impl(
        x,
        &p.kernel,
        p.bias.data(),
        p.padding,
        (0, 0),
    ))
}

/// Convolution whose whole sampling grid is displaced by a fixed integer
/// (row, col) offset shared across all spatial positions; samples that land
/// outside the input are zero.
pub fn shifted_conv2d<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    check_conv_input("shifted_conv2d", x, p)?;
    if p.kernel_size() != 3 {
        return Err(Error::invalid("shifted_conv2d", "kernel must be 3x3"));
    }
    Ok(conv_forward_impl(
        x,
        &p.kernel,
        p.bias.data(),
        p.padding,
        p.offset,
    ))
}

fn conv_backward_checked<T: Scalar>(
    context: &'static str,
    x: &Tensor4<T>,
    p: &mut ConvParams<T>,
    grad_out: &Tensor4<T>,
    offset: (i32, i32),
) -> Result<Tensor4<T>> {
    check_conv_input(context, x, p)?;
    let expected = Shape4::new(x.shape().n, p.out_channels(), x.shape().h, x.shape().w);
    if grad_out.shape() != expected {
        return Err(Error::shape(context, expected, grad_out.shape()));
    }
    let mut grad_x = Tensor4::zeros(x.shape());
    let kernel_shape = p.kernel.shape();
    let padding = p.padding;
    {
        let (kernel_data, kernel_grad) = p.kernel.data_and_grad_mut();
        let bias_grad = p.bias.ensure_grad();
        conv_backward_impl(
            x,
            kernel_data,
            kernel_shape,
            grad_out,
            padding,
            offset,
            grad_x.data_mut(),
            kernel_grad,
            bias_grad,
        );
    }
    Ok(grad_x)
}

/// Backward of `conv2d`: accumulates kernel/bias gradients into `p`,
/// returns the gradient with respect to `x`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    p: &mut ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    if p.offset != (0, 0) {
        return Err(Error::invalid(
            "conv2d_backward",
            "nonzero offset; use shifted_conv2d_backward",
        ));
    }
    conv_backward_checked("conv2d_backward", x, p, grad_out, (0, 0))
}

/// Backward of `shifted_conv2d`: gradients scatter to the shifted sampling
/// positions.
pub fn shifted_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    p: &mut ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    if p.kernel_size() != 3 {
        return Err(Error::invalid(
            "shifted_conv2d_backward",
            "kernel must be 3x3",
        ));
    }
    let offset = p.offset;
    conv_backward_checked("shifted_conv2d_backward", x, p, grad_out, offset)
}

/// out = W x + b on flat vectors.
pub fn fully_connected<T: Scalar>(x: &[T], p: &FcParams<T>) -> Result<Vec<T>> {
    if x.len() != p.d_in() {
        return Err(Error::LengthMismatch {
            context: "fully_connected",
            expected: p.d_in(),
            got: x.len(),
        });
    }
    let d_in = p.d_in();
    let w = p.weight.data();
    let mut out = Vec::with_capacity(p.d_out());
    for o in 0..p.d_out() {
        let row = &w[o * d_in..(o + 1) * d_in];
        let mut acc = p.bias.data()[o];
        for (&wi, &xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Backward of `fully_connected`: accumulates weight/bias gradients into
/// `p`, returns the gradient with respect to `x`.
pub fn fully_connected_backward<T: Scalar>(
    x: &[T],
    p: &mut FcParams<T>,
    grad_out: &[T],
) -> Result<Vec<T>> {
    if x.len() != p.d_in() {
        return Err(Error::LengthMismatch {
            context: "fully_connected_backward",
            expected: p.d_in(),
            got: x.len(),
        });
    }
    if grad_out.len() != p.d_out() {
        return Err(Error::LengthMismatch {
            context: "fully_connected_backward",
            expected: p.d_out(),
            got: grad_out.len(),
        });
    }
    let d_in = p.d_in();
    let mut grad_x = vec![T::ZERO; d_in];
    {
        let (w, gw) = p.weight.data_and_grad_mut();
        for (o, &g) in grad_out.iter().enumerate() {
            let row = &w[o * d_in..(o + 1) * d_in];
            let grow = &mut gw[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                grow[i] += g * x[i];
                grad_x[i] += g * row[i];
            }
        }
    }
    let gb = p.bias.ensure_grad();
    for (o, &g) in grad_out.iter().enumerate() {
        gb[o] += g;
    }
    Ok(grad_x)
}

/// max(0, x). The subgradient at exactly 0 is 0.
pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape("relu_backward", x.shape(), grad_out.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor4::from_vec(x.shape(), data)
}

pub fn relu_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::ZERO { v } else { T::ZERO })
        .collect()
}

pub fn relu_slice_backward<T: Scalar>(x: &[T], grad_out: &[T]) -> Vec<T> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect()
}

/// 2x2, stride-2 max pool used by the toy backbone for downsampling.
/// Returns the pooled tensor and the flat input index of each argmax.
pub fn max_pool2x2<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    let xs = x.shape();
    if xs.h % 2 != 0 || xs.w % 2 != 0 {
        return Err(Error::invalid(
            "max_pool2x2",
            format!("spatial dims must be even, got {}x{}", xs.h, xs.w),
        ));
    }
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let mut out = Tensor4::zeros(Shape4::new(xs.n, xs.c, oh, ow));
    let mut prov = vec![0usize; out.len()];
    let hw = xs.h * xs.w;
    for ni in 0..xs.n {
        for ci in 0..xs.c {
            let base = (ni * xs.c + ci) * hw;
            let x_plane = x.plane(ni, ci);
            let out_plane = out.plane_mut(ni, ci);
            for i in 0..oh {
                for j in 0..ow {
                    let mut best_idx = (2 * i) * xs.w + 2 * j;
                    let mut best = x_plane[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * i + di) * xs.w + 2 * j + dj;
                        if x_plane[idx] > best {
                            best = x_plane[idx];
                            best_idx = idx;
                        }
                    }
                    out_plane[i * ow + j] = best;
                    prov[(ni * xs.c + ci) * (oh * ow) + i * ow + j] = base + best_idx;
                }
            }
        }
    }
    Ok((out, prov))
}

/// Scatter upstream gradients back to the argmax positions.
pub fn max_pool2x2_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    prov: &[usize],
    grad_x: &mut [T],
) -> Result<()> {
    if grad_out.len() != prov.len() {
        return Err(Error::LengthMismatch {
            context: "max_pool2x2_backward",
            expected: prov.len(),
            got: grad_out.len(),
        });
    }
    for (&g, &src) in grad_out.data().iter().zip(prov) {
        grad_x[src] += g;
    }
    Ok(())
}

/// Numerically stabilized softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut m = logits[0];
    for &v in &logits[1..] {
        if v > m {
            m = v;
        }
    }
    let exps: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let mut sum = T::ZERO;
    for &e in &exps {
        sum += e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of softmax(logits) against an integer label. Returns the
/// loss and the probabilities needed by the backward pass.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len() - 1,
        });
    }
    let mut m = logits[0];
    for &v in &logits[1..] {
        if v > m {
            m = v;
        }
    }
    let mut sum = T::ZERO;
    for &v in logits {
        sum += (v - m).exp();
    }
    let loss = sum.ln() - (logits[label] - m);
    Ok((loss, softmax(logits)))
}

/// grad_logits = (probs - onehot(label)) * scale.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &[T], label: usize, scale: T) -> Vec<T> {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let y = if i == label { T::ONE } else { T::ZERO };
            (p - y) * scale
        })
        .collect()
}

/// Smooth L1: per coordinate 0.5 d^2 if |d| < 1 else |d| - 0.5, summed.
pub fn smooth_l1<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            context: "smooth_l1",
            expected: target.len(),
            got: pred.len(),
        });
    }
    let half = T::from_f64(0.5);
    let mut acc = T::ZERO;
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        let a = d.abs();
        acc += if a < T::ONE { half * d * d } else { a - half };
    }
    Ok(acc)
}

/// d(smooth_l1)/d(pred) = clamp(d, -1, 1), scaled.
pub fn smooth_l1_backward<T: Scalar>(pred: &[T], target: &[T], scale: T) -> Result<Vec<T>> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            context: "smooth_l1_backward",
            expected: target.len(),
            got: pred.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            let g = if d.abs() < T::ONE {
                d
            } else if d > T::ZERO {
                T::ONE
            } else {
                -T::ONE
            };
            g * scale
        })
        .collect())
}
