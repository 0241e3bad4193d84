//! Layer kernels with paired analytic backward passes.
//!
//! Every kernel is a pure function of its inputs. Backward passes take the
//! forward input and the upstream gradient and return a [`LayerGrad`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Gradients of one layer: w.r.t. its input and its flat parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub d_input: Tensor4,
    pub d_params: Vec<f64>,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + k - pad` lands in `0..size`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    // need o*stride + k >= pad and o*stride + k - pad < size
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let limit = size + pad; // o*stride + k < limit
    let hi = if limit <= k {
        0
    } else {
        ((limit - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Output shape of a 2-D cross-correlation.
pub fn conv2d_output_shape(input: Shape4, kernel: Shape4, stride: usize, pad: usize) -> Result<Shape4> {
    if kernel.c != input.c {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            expected: format!("input with {} channels (kernel {kernel})", kernel.c),
            found: format!("input {input}"),
        });
    }
    if stride == 0 {
        return Err(invalid("conv2d stride must be at least 1"));
    }
    match (
        conv_out(input.h, kernel.h, stride, pad),
        conv_out(input.w, kernel.w, stride, pad),
    ) {
        (Some(h), Some(w)) if h > 0 && w > 0 => Ok(Shape4::new(input.n, kernel.n, h, w)),
        _ => Err(Error::ShapeMismatch {
            context: "conv2d",
            expected: format!("spatial extent that fits kernel {kernel} with pad {pad}"),
            found: format!("input {input}"),
        }),
    }
}

/// Zero-padded strided cross-correlation. `kernel` is laid out as
/// (out_channels, in_channels, kh, kw); `bias` has one entry per output channel.
pub fn conv2d(input: &Tensor4, kernel: &Tensor4, bias: &[f64], stride: usize, pad: usize) -> Result<Tensor4> {
    let ks = kernel.shape();
    let os = conv2d_output_shape(input.shape(), ks, stride, pad)?;
    if bias.len() != ks.n {
        return Err(Error::ShapeMismatch {
            context: "conv2d bias",
            expected: format!("{} entries", ks.n),
            found: format!("{} entries", bias.len()),
        });
    }
    let mut out = Tensor4::zeros(os);
    conv2d_forward_raw(input, kernel.data(), ks, bias, stride, pad, &mut out);
    Ok(out)
}

pub(crate) fn conv2d_forward_raw(
    input: &Tensor4,
    kernel: &[f64],
    ks: Shape4,
    bias: &[f64],
    stride: usize,
    pad: usize,
    out: &mut Tensor4,
) {
    let is = input.shape();
    let os = out.shape();
    let (ih, iw) = (is.h, is.w);
    let (oh, ow) = (os.h, os.w);
    let inp = input.data();
    let od = out.data_mut();
    for n in 0..is.n {
        for oc in 0..ks.n {
            let obase = (n * os.c + oc) * oh * ow;
            let oplane = &mut od[obase..obase + oh * ow];
            oplane.fill(bias[oc]);
            for ic in 0..is.c {
                let ibase = (n * is.c + ic) * ih * iw;
                let iplane = &inp[ibase..ibase + ih * iw];
                for ky in 0..ks.h {
                    let (oy0, oy1) = valid_range(ky, pad, stride, ih, oh);
                    for kx in 0..ks.w {
                        let wgt = kernel[((oc * ks.c + ic) * ks.h + ky) * ks.w + kx];
                        let (ox0, ox1) = valid_range(kx, pad, stride, iw, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let orow = &mut oplane[oy * ow..oy * ow + ow];
                            let irow = &iplane[iy * iw..iy * iw + iw];
                            if stride == 1 {
                                let ix0 = ox0 + kx - pad;
                                let len = ox1 - ox0;
                                for (o, i) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..ix0 + len]) {
                                    *o += wgt * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wgt * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward pass of [`conv2d`]. `d_params` holds the kernel gradient followed
/// by the bias gradient. With `want_params == false` the parameter gradient is
/// left empty and only `d_input` is computed.
pub fn conv2d_backward(
    input: &Tensor4,
    kernel: &Tensor4,
    stride: usize,
    pad: usize,
    grad_out: &Tensor4,
    want_params: bool,
) -> Result<LayerGrad> {
    let ks = kernel.shape();
    let os = conv2d_output_shape(input.shape(), ks, stride, pad)?;
    if grad_out.shape() != os {
        return Err(Error::ShapeMismatch {
            context: "conv2d backward",
            expected: format!("upstream gradient {os}"),
            found: format!("{}", grad_out.shape()),
        });
    }
    Ok(conv2d_backward_raw(input, kernel.data(), ks, stride, pad, grad_out, want_params))
}

pub(crate) fn conv2d_backward_raw(
    input: &Tensor4,
    kernel: &[f64],
    ks: Shape4,
    stride: usize,
    pad: usize,
    grad_out: &Tensor4,
    want_params: bool,
) -> LayerGrad {
    let is = input.shape();
    let os = grad_out.shape();
    let (ih, iw) = (is.h, is.w);
    let (oh, ow) = (os.h, os.w);
    let inp = input.data();
    let g = grad_out.data();
    let mut d_input = Tensor4::zeros(is);
    let mut d_params = if want_params {
        vec![0.0; ks.len() + ks.n]
    } else {
        Vec::new()
    };
    let kernel_len = ks.len();
    let di = d_input.data_mut();
    for n in 0..is.n {
        for oc in 0..ks.n {
            let gbase = (n * os.c + oc) * oh * ow;
            let gplane = &g[gbase..gbase + oh * ow];
            if want_params {
                d_params[kernel_len + oc] += gplane.iter().sum::<f64>();
            }
            for ic in 0..is.c {
                let ibase = (n * is.c + ic) * ih * iw;
                for ky in 0..ks.h {
                    let (oy0, oy1) = valid_range(ky, pad, stride, ih, oh);
                    for kx in 0..ks.w {
                        let widx = ((oc * ks.c + ic) * ks.h + ky) * ks.w + kx;
                        let wgt = kernel[widx];
                        let (ox0, ox1) = valid_range(kx, pad, stride, iw, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow..oy * ow + ow];
                            let ioff = ibase + iy * iw;
                            if stride == 1 {
                                let ix0 = ox0 + kx - pad;
                                let len = ox1 - ox0;
                                let irow = &inp[ioff + ix0..ioff + ix0 + len];
                                let drow = &mut di[ioff + ix0..ioff + ix0 + len];
                                for ((d, i), gv) in drow.iter_mut().zip(irow).zip(&grow[ox0..ox1]) {
                                    *d += wgt * gv;
                                    acc += gv * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ox * stride + kx - pad;
                                    di[ioff + ix] += wgt * grow[ox];
                                    acc += grow[ox] * inp[ioff + ix];
                                }
                            }
                        }
                        if want_params {
                            d_params[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    LayerGrad { d_input, d_params }
}

/// Elementwise `max(x, 0)`.
pub fn relu(input: &Tensor4) -> Tensor4 {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Passes the upstream gradient only where the forward input was positive.
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    same_shape("relu backward", input.shape(), grad_out.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(input.shape(), data)
}

pub fn maxpool2d_output_shape(input: Shape4, window: usize, stride: usize) -> Result<Shape4> {
    if window == 0 || stride == 0 {
        return Err(invalid("maxpool window and stride must be at least 1"));
    }
    if window > input.h || window > input.w {
        return Err(Error::ShapeMismatch {
            context: "maxpool2d",
            expected: format!("spatial extent of at least {window}x{window}"),
            found: format!("input {input}"),
        });
    }
    // trailing partial windows are dropped
    Ok(Shape4::new(
        input.n,
        input.c,
        (input.h - window) / stride + 1,
        (input.w - window) / stride + 1,
    ))
}

/// Flat input offsets of each window's maximum, first occurrence in
/// row-major order on ties.
fn maxpool_argmax(input: &Tensor4, window: usize, stride: usize, os: Shape4) -> Vec<usize> {
    let is = input.shape();
    let d = input.data();
    let mut arg = Vec::with_capacity(os.len());
    for n in 0..is.n {
        for c in 0..is.c {
            let base = (n * is.c + c) * is.h * is.w;
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = base + oy * stride * is.w + ox * stride;
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = base + (oy * stride + ky) * is.w + ox * stride + kx;
                            if d[i] > d[best] {
                                best = i;
                            }
                        }
                    }
                    arg.push(best);
                }
            }
        }
    }
    arg
}

pub fn maxpool2d(input: &Tensor4, window: usize, stride: usize) -> Result<Tensor4> {
    let os = maxpool2d_output_shape(input.shape(), window, stride)?;
    let d = input.data();
    let data = maxpool_argmax(input, window, stride, os)
        .into_iter()
        .map(|i| d[i])
        .collect();
    Tensor4::from_vec(os, data)
}

/// Routes each upstream gradient entry to its window's argmax.
pub fn maxpool2d_backward(input: &Tensor4, window: usize, stride: usize, grad_out: &Tensor4) -> Result<Tensor4> {
    let os = maxpool2d_output_shape(input.shape(), window, stride)?;
    same_shape("maxpool2d backward", os, grad_out.shape())?;
    let mut d_input = Tensor4::zeros(input.shape());
    let di = d_input.data_mut();
    for (i, g) in maxpool_argmax(input, window, stride, os).into_iter().zip(grad_out.data()) {
        di[i] += g;
    }
    Ok(d_input)
}

/// Affine map on flattened items: `out[n, o] = sum_i w[o, i] x[n, i] + b[o]`.
/// `weights` is row-major (outputs x inputs). The result has shape (n, outputs, 1, 1).
pub fn dense(input: &Tensor4, weights: &[f64], bias: &[f64]) -> Result<Tensor4> {
    let is = input.shape();
    let inputs = is.item_len();
    let outputs = bias.len();
    if weights.len() != outputs * inputs {
        return Err(Error::ShapeMismatch {
            context: "dense",
            expected: format!("{outputs}x{inputs} weights for input {is}"),
            found: format!("{} weights", weights.len()),
        });
    }
    let mut out = Vec::with_capacity(is.n * outputs);
    for n in 0..is.n {
        let x = input.item(n);
        for o in 0..outputs {
            let row = &weights[o * inputs..(o + 1) * inputs];
            out.push(bias[o] + dot(row, x));
        }
    }
    Tensor4::from_vec(Shape4::new(is.n, outputs, 1, 1), out)
}

/// Backward of [`dense`]. `d_params` = weight gradient then bias gradient.
pub fn dense_backward(input: &Tensor4, weights: &[f64], grad_out: &Tensor4, want_params: bool) -> Result<LayerGrad> {
    let is = input.shape();
    let inputs = is.item_len();
    let gs = grad_out.shape();
    let outputs = gs.item_len();
    if gs.n != is.n || weights.len() != outputs * inputs {
        return Err(Error::ShapeMismatch {
            context: "dense backward",
            expected: format!("{outputs}x{inputs} weights and {} upstream rows", is.n),
            found: format!("{} weights, upstream {gs}", weights.len()),
        });
    }
    let mut d_input = Tensor4::zeros(is);
    let mut d_params = if want_params {
        vec![0.0; outputs * inputs + outputs]
    } else {
        Vec::new()
    };
    for n in 0..is.n {
        let x = input.item(n);
        let g = grad_out.item(n);
        let dx = d_input.item_mut(n);
        for o in 0..outputs {
            let go = g[o];
            if go == 0.0 {
                continue;
            }
            let row = &weights[o * inputs..(o + 1) * inputs];
            for (d, w) in dx.iter_mut().zip(row) {
                *d += go * w;
            }
            if want_params {
                let drow = &mut d_params[o * inputs..(o + 1) * inputs];
                for (d, xi) in drow.iter_mut().zip(x) {
                    *d += go * xi;
                }
                d_params[outputs * inputs + o] += go;
            }
        }
    }
    Ok(LayerGrad { d_input, d_params })
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| libm::exp(s - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln softmax(scores)[label]` and its gradient `softmax - one_hot(label)`.
pub fn softmax_cross_entropy(scores: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= scores.len() {
        return Err(invalid(format!("label {label} out of range for {} scores", scores.len())));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|&s| libm::exp(s - max)).sum();
    let log_z = max + libm::log(sum);
    let loss = log_z - scores[label];
    let mut grad: Vec<f64> = scores.iter().map(|&s| libm::exp(s - log_z)).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Classic momentum SGD state for one parameter block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Momentum {
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(len: usize) -> Self {
        Self { velocity: vec![0.0; len] }
    }

    /// `v <- momentum * v - lr * g; p <- p + v`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, momentum: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                context: "sgd update",
                expected: format!("{} gradients", params.len()),
                found: format!("{}", grads.len()),
            });
        }
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = momentum * *v - lr * g;
            *p += *v;
        }
        Ok(())
    }
}

/// One stateless SGD step (fresh momentum buffer).
pub fn sgd_update(params: &[f64], grads: &[f64], lr: f64, momentum: f64) -> Result<Vec<f64>> {
    let mut out = params.to_vec();
    Momentum::new(params.len()).step(&mut out, grads, lr, momentum)?;
    Ok(out)
}

/// Central-difference gradient of a scalar function of a tensor.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor4) -> f64, x: &Tensor4, eps: f64) -> Result<Tensor4> {
    if !(eps > 0.0) {
        return Err(invalid("finite difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor4::zeros(x.shape());
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Central-difference gradient of a scalar function of a flat parameter vector.
pub fn finite_diff_grad_flat(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest elementwise relative error, `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| libm::fabs(x - y) / libm::fabs(*x).max(libm::fabs(*y)).max(floor))
        .fold(0.0, f64::max)
}

fn same_shape(context: &'static str, expected: Shape4, found: Shape4) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("{expected}"),
            found: format!("{found}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: Shape4, rng: &mut Rng) -> Tensor4 {
        let data = (0..shape.len()).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_scaling_identity() {
        let x = Tensor4::filled(Shape4::new(1, 1, 3, 3), 1.0);
        let k = Tensor4::filled(Shape4::new(1, 1, 1, 1), 2.0);
        let y = conv2d(&x, &k, &[0.0], 1, 0).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 3, 3));
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_sum_reduction() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor4::filled(Shape4::new(1, 1, 2, 2), 1.0);
        let y = conv2d(&x, &k, &[0.0], 1, 0).unwrap();
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor4::zeros(Shape4::new(1, 2, 4, 4));
        let k = Tensor4::zeros(Shape4::new(1, 3, 3, 3));
        let err = conv2d(&x, &k, &[0.0], 1, 1).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("1x2x4x4") && msg.contains("1x3x3x3"), "{msg}");
    }

    #[test]
    fn conv_padding_and_stride_against_naive() {
        let mut rng = Rng::new(3);
        let x = random(Shape4::new(2, 2, 7, 6), &mut rng);
        let k = random(Shape4::new(3, 2, 3, 3), &mut rng);
        let b = [0.1, -0.2, 0.3];
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let y = conv2d(&x, &k, &b, stride, pad).unwrap();
            let s = y.shape();
            for n in 0..s.n {
                for oc in 0..s.c {
                    for oy in 0..s.h {
                        for ox in 0..s.w {
                            let mut acc = b[oc];
                            for ic in 0..2 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0 && ix >= 0 && (iy as usize) < 7 && (ix as usize) < 6 {
                                            acc += k.at(oc, ic, ky, kx) * x.at(n, ic, iy as usize, ix as usize);
                                        }
                                    }
                                }
                            }
                            assert!((acc - y.at(n, oc, oy, ox)).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let x = random(Shape4::new(2, 3, 8, 8), &mut rng);
            let k = random(Shape4::new(4, 3, 3, 3), &mut rng);
            let b: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
            let up = random(Shape4::new(2, 4, 8, 8), &mut rng);
            let objective = |x: &Tensor4, k: &Tensor4, b: &[f64]| {
                dot(conv2d(x, k, b, 1, 1).unwrap().data(), up.data())
            };
            let g = conv2d_backward(&x, &k, 1, 1, &up, true).unwrap();
            let fd_x = finite_diff_grad(|t| objective(t, &k, &b), &x, 1e-5).unwrap();
            assert!(max_relative_error(g.d_input.data(), fd_x.data(), 1e-3) < 1e-5);
            let fd_k = finite_diff_grad(|t| objective(&x, t, &b), &k, 1e-5).unwrap();
            let nk = k.shape().len();
            assert!(max_relative_error(&g.d_params[..nk], fd_k.data(), 1e-3) < 1e-5);
            let fd_b = finite_diff_grad_flat(|t| objective(&x, &k, t), &b, 1e-5);
            assert!(max_relative_error(&g.d_params[nk..], &fd_b, 1e-3) < 1e-5);
        }
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut rng = Rng::new(11);
        let x = random(Shape4::new(1, 2, 5, 5), &mut rng);
        let k = random(Shape4::new(2, 2, 3, 3), &mut rng);
        let a = conv2d(&x.scale(2.5), &k, &[0.0, 0.0], 1, 1).unwrap();
        let b = conv2d(&x, &k, &[0.0, 0.0], 1, 1).unwrap().scale(2.5);
        assert!(max_relative_error(a.data(), b.data(), 1e-12) < 1e-12);
    }

    #[test]
    fn relu_examples() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor4::filled(Shape4::new(1, 2, 2, 2), 0.5);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            let x = random(Shape4::new(1, 2, 4, 4), &mut rng).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
            let up = random(x.shape(), &mut rng);
            let g = relu_backward(&x, &up).unwrap();
            let fd = finite_diff_grad(|t| dot(relu(t).data(), up.data()), &x, 1e-6).unwrap();
            assert!(max_relative_error(g.data(), fd.data(), 1e-3) < 1e-6);
        }
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().data(), &[4.0]);

        let c = Tensor4::filled(Shape4::new(1, 1, 4, 4), 3.0);
        let y = maxpool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let g = maxpool2d_backward(&c, 2, 2, &Tensor4::filled(y.shape(), 1.0)).unwrap();
        // first element of each window receives the gradient
        let expected = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g.data(), &expected);
    }

    #[test]
    fn maxpool_truncates_and_rejects_large_windows() {
        let x = Tensor4::zeros(Shape4::new(1, 1, 5, 5));
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().shape(), Shape4::new(1, 1, 2, 2));
        assert!(maxpool2d(&x, 6, 1).is_err());
    }

    #[test]
    fn maxpool_backward_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(200 + seed);
            // a permutation keeps values well separated so small steps never flip the argmax
            let perm = rng.permutation(72);
            let data = perm.iter().map(|&p| p as f64 * 0.1).collect();
            let x = Tensor4::from_vec(Shape4::new(1, 2, 6, 6), data).unwrap();
            let up = random(Shape4::new(1, 2, 3, 3), &mut rng);
            let g = maxpool2d_backward(&x, 2, 2, &up).unwrap();
            let fd = finite_diff_grad(|t| dot(maxpool2d(t, 2, 2).unwrap().data(), up.data()), &x, 1e-6).unwrap();
            assert!(max_relative_error(g.data(), fd.data(), 1e-3) < 1e-6);
        }
    }

    #[test]
    fn dense_identity_and_linear_gradient() {
        let x = Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![1.0, -2.0, 3.0]).unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(dense(&x, &eye, &[0.0; 3]).unwrap().data(), x.data());

        let w = [0.5, -1.5, 2.0];
        let g = dense_backward(&x, &w, &Tensor4::filled(Shape4::new(1, 1, 1, 1), 1.0), false).unwrap();
        assert_eq!(g.d_input.data(), &w);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(300 + seed);
            let x = random(Shape4::new(3, 2, 2, 2), &mut rng);
            let w: Vec<f64> = (0..4 * 8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let up = random(Shape4::new(3, 4, 1, 1), &mut rng);
            let g = dense_backward(&x, &w, &up, true).unwrap();
            let fd_x = finite_diff_grad(|t| dot(dense(t, &w, &b).unwrap().data(), up.data()), &x, 1e-6).unwrap();
            assert!(max_relative_error(g.d_input.data(), fd_x.data(), 1e-3) < 1e-6);
            let mut wb = w.clone();
            wb.extend_from_slice(&b);
            let fd_p = finite_diff_grad_flat(
                |p| dot(dense(&x, &p[..32], &p[32..]).unwrap().data(), up.data()),
                &wb,
                1e-6,
            );
            assert!(max_relative_error(&g.d_params, &fd_p, 1e-3) < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = softmax_cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-15);
        assert!((grad[0] + 0.5).abs() < 1e-15);

        let (loss, grad) = softmax_cross_entropy(&[10.0, -10.0], 0).unwrap();
        assert!(loss < 1e-8);
        assert!(grad[0].abs() < 1e-8);

        assert!(softmax_cross_entropy(&[1.0], 1).is_err());
        let (loss, _) = softmax_cross_entropy(&[1000.0, -1000.0], 1).unwrap();
        assert!((loss - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(400 + seed);
            let s: Vec<f64> = (0..5).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
            let label = rng.int_in(0, 4);
            let (_, grad) = softmax_cross_entropy(&s, label).unwrap();
            let fd = finite_diff_grad_flat(|p| softmax_cross_entropy(p, label).unwrap().0, &s, 1e-6);
            assert!(max_relative_error(&grad, &fd, 1e-3) < 1e-6);
            assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_examples() {
        assert_eq!(sgd_update(&[1.0, 2.0], &[0.0, 0.0], 0.1, 0.9).unwrap(), vec![1.0, 2.0]);
        assert_eq!(sgd_update(&[1.0], &[0.5], 1.0, 0.0).unwrap(), vec![0.5]);
        assert!(sgd_update(&[1.0], &[0.5, 1.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(p) = sum_i a_i (p_i - c_i)^2, minimiser p = c
        let a = [1.0, 2.0, 0.5];
        let c = [3.0, -1.0, 0.25];
        let mut p = vec![0.0; 3];
        let mut opt = Momentum::new(3);
        for _ in 0..100 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (p[i] - c[i])).collect();
            opt.step(&mut p, &g, 0.1, 0.5).unwrap();
        }
        for i in 0..3 {
            assert!((p[i] - c[i]).abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn finite_difference_examples() {
        let x = Tensor4::filled(Shape4::new(1, 1, 2, 3), 0.7);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));

        let x = Tensor4::filled(Shape4::new(1, 1, 1, 1), 3.0);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);

        assert!(finite_diff_grad(|t| t.sum(), &x, 0.0).is_err());
    }
}
