//! 3D convolution and its transpose, lowered to GEMM through im2col.
//!
//! Both directions share one [`ConvGeom`]: `big` is the conv input (and the
//! transposed-conv output), `small` the conv output (transposed-conv input).

use rayon::prelude::*;

use crate::element::{matmul_into, Element, MatRef};
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, BackwardCtx, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub big: [usize; 3],
    pub small: [usize; 3],
}

impl ConvGeom {
    fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    fn kernel_len(&self) -> usize {
        self.k * self.k * self.k
    }

    /// im2col is the identity for 1x1x1 kernels with unit stride and no padding.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output extents of `conv3d`.
pub fn conv3d_output_dims(input: [usize; 3], k: usize, stride: usize, padding: usize) -> Result<[usize; 3]> {
    if stride == 0 || k == 0 {
        return Err(TensorError::invalid("conv3d", "kernel size and stride must be positive"));
    }
    let mut out = [0; 3];
    for (axis, (&n, o)) in input.iter().zip(out.iter_mut()).enumerate() {
        if n + 2 * padding < k {
            return Err(TensorError::shape(
                "conv3d",
                format!("spatial axis {}", axis),
                format!("extent {} with padding {} is smaller than kernel {}", n, padding, k),
            ));
        }
        *o = (n + 2 * padding - k) / stride + 1;
    }
    Ok(out)
}

/// Output extents of `conv_transpose3d`: `(in - 1) * stride + k - 2 * padding`.
pub fn conv_transpose3d_output_dims(
    input: [usize; 3],
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<[usize; 3]> {
    if stride == 0 || k == 0 {
        return Err(TensorError::invalid("conv_transpose3d", "kernel size and stride must be positive"));
    }
    let mut out = [0; 3];
    for (axis, (&n, o)) in input.iter().zip(out.iter_mut()).enumerate() {
        let full = (n - 1) * stride + k;
        if full <= 2 * padding {
            return Err(TensorError::shape(
                "conv_transpose3d",
                format!("spatial axis {}", axis),
                format!("padding {} consumes the whole extent {}", padding, full),
            ));
        }
        *o = full - 2 * padding;
    }
    Ok(out)
}

/// Valid range of output positions `o` with `o * stride + offset - padding` inside `[0, n)`.
#[inline]
fn valid_range(out_len: usize, n: usize, offset: usize, stride: usize, padding: usize) -> (usize, usize) {
    // o*s + offset >= padding  and  o*s + offset - padding < n
    let lo = if offset >= padding { 0 } else { (padding - offset).div_ceil(stride) };
    let hi_excl = if n + padding > offset { (n + padding - offset).div_ceil(stride) } else { 0 };
    (lo.min(out_len), hi_excl.min(out_len).max(lo.min(out_len)))
}

/// Gather `x` (`channels x big`) into `cols` (`channels*k^3 x small`).
pub(crate) fn im2col<T: Element>(x: &[T], channels: usize, g: &ConvGeom, cols: &mut [T]) {
    let [bw, bh, bd] = g.big;
    let [sw, sh, sd] = g.small;
    let (k, s, p) = (g.k, g.stride, g.padding);
    let ssz = g.small_len();
    debug_assert_eq!(cols.len(), channels * g.kernel_len() * ssz);
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * g.big_len()..(c + 1) * g.big_len()];
        for a in 0..k {
            let (w_lo, w_hi) = valid_range(sw, bw, a, s, p);
            for b in 0..k {
                let (h_lo, h_hi) = valid_range(sh, bh, b, s, p);
                for e in 0..k {
                    let (d_lo, d_hi) = valid_range(sd, bd, e, s, p);
                    let dst = &mut cols[row * ssz..(row + 1) * ssz];
                    row += 1;
                    dst.iter_mut().for_each(|v| *v = T::ZERO);
                    for ow in w_lo..w_hi {
                        let iw = ow * s + a - p;
                        for oh in h_lo..h_hi {
                            let ih = oh * s + b - p;
                            let src = &xc[(iw * bh + ih) * bd..(iw * bh + ih + 1) * bd];
                            let d = &mut dst[(ow * sh + oh) * sd..(ow * sh + oh + 1) * sd];
                            if d_lo >= d_hi {
                                continue;
                            }
                            if s == 1 {
                                let start = d_lo + e - p;
                                d[d_lo..d_hi].copy_from_slice(&src[start..start + (d_hi - d_lo)]);
                            } else {
                                for od in d_lo..d_hi {
                                    d[od] = src[od * s + e - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols` (`channels*k^3 x small`) back onto `x` (`channels x big`).
pub(crate) fn col2im<T: Element>(cols: &[T], channels: usize, g: &ConvGeom, x: &mut [T]) {
    let [bw, bh, bd] = g.big;
    let [sw, sh, sd] = g.small;
    let (k, s, p) = (g.k, g.stride, g.padding);
    let ssz = g.small_len();
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * g.big_len()..(c + 1) * g.big_len()];
        for a in 0..k {
            let (w_lo, w_hi) = valid_range(sw, bw, a, s, p);
            for b in 0..k {
                let (h_lo, h_hi) = valid_range(sh, bh, b, s, p);
                for e in 0..k {
                    let (d_lo, d_hi) = valid_range(sd, bd, e, s, p);
                    let src = &cols[row * ssz..(row + 1) * ssz];
                    row += 1;
                    if d_lo >= d_hi {
                        continue;
                    }
                    for ow in w_lo..w_hi {
                        let iw = ow * s + a - p;
                        for oh in h_lo..h_hi {
                            let ih = oh * s + b - p;
                            let dst = &mut xc[(iw * bh + ih) * bd..(iw * bh + ih + 1) * bd];
                            let sv = &src[(ow * sh + oh) * sd..(ow * sh + oh + 1) * sd];
                            for od in d_lo..d_hi {
                                dst[od * s + e - p] += sv[od];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn unfold<'a, T: Element>(x: &'a [T], channels: usize, g: &ConvGeom, scratch: &'a mut Vec<T>) -> &'a [T] {
    if g.is_pointwise() {
        return x;
    }
    scratch.clear();
    scratch.resize(channels * g.kernel_len() * g.small_len(), T::ZERO);
    im2col(x, channels, g, scratch);
    scratch
}

fn check_weight<T: Element>(op: &'static str, weight: &Tensor<T>, cin: usize, cin_axis: usize) -> Result<usize> {
    let ws = weight.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(TensorError::shape(op, "weight", format!("expected a cubic 5-d kernel, got {:?}", ws)));
    }
    if ws[cin_axis] != cin {
        return Err(TensorError::shape(
            op,
            "input channels",
            format!("input has {} channels, weight expects {}", cin, ws[cin_axis]),
        ));
    }
    Ok(ws[2])
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [cout] => Err(TensorError::shape(
            op,
            "bias",
            format!("bias {:?} vs {} output channels", b.shape(), cout),
        )),
        _ => Ok(()),
    }
}

fn add_channel_bias<T: Element>(out: &mut [T], bias: &[T], spatial: usize) {
    for (chunk, &b) in out.chunks_exact_mut(spatial).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Element>(g: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let mut acc = vec![T::ZERO; channels];
    for n in 0..batch {
        for (c, slot) in acc.iter_mut().enumerate() {
            let start = (n * channels + c) * spatial;
            let s: T = g[start..start + spatial].iter().copied().sum();
            *slot += s;
        }
    }
    acc
}

fn sum_in_order<T: Element>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for p in iter {
        acc.iter_mut().zip(&p).for_each(|(a, &b)| *a += b);
    }
    acc
}

struct Conv3dBackward {
    geom: ConvGeom,
    batch: usize,
    cin: usize,
    cout: usize,
}

impl<T: Element> Backward<T> for Conv3dBackward {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let Self { geom, batch, cin, cout } = *self;
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let g = ctx.grad;
        let (in_len, out_len) = (cin * geom.big_len(), cout * geom.small_len());
        let kdim = cin * geom.kernel_len();
        let ssz = geom.small_len();
        let (need_x, need_w) = (ctx.needs(0), ctx.needs(1));

        let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
            .into_par_iter()
            .map(|n| {
                let gy = &g[n * out_len..(n + 1) * out_len];
                let gw = need_w.then(|| {
                    let mut scratch = Vec::new();
                    let cols = unfold(&x[n * in_len..(n + 1) * in_len], cin, &geom, &mut scratch);
                    let mut gw = vec![T::ZERO; cout * kdim];
                    matmul_into(MatRef::new(gy, cout, ssz), MatRef::new(cols, kdim, ssz).t(), &mut gw, false);
                    gw
                });
                let gx = need_x.then(|| {
                    let mut gx = vec![T::ZERO; in_len];
                    if geom.is_pointwise() {
                        matmul_into(MatRef::new(w, cout, kdim).t(), MatRef::new(gy, cout, ssz), &mut gx, false);
                    } else {
                        let mut gcols = vec![T::ZERO; kdim * ssz];
                        matmul_into(MatRef::new(w, cout, kdim).t(), MatRef::new(gy, cout, ssz), &mut gcols, false);
                        col2im(&gcols, cin, &geom, &mut gx);
                    }
                    gx
                });
                (gx, gw)
            })
            .collect();

        let (gxs, gws): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
        let gx = need_x.then(|| gxs.into_iter().flatten().flatten().collect());
        let gw = need_w.then(|| sum_in_order(gws.into_iter().flatten().collect()));
        let mut grads = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs(2).then(|| bias_grad(g, batch, cout, ssz)));
        }
        grads
    }
}

/// 3D convolution over `[B, Cin, W, H, D]` with a `[Cout, Cin, k, k, k]` kernel.
pub fn conv3d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let xs = input.shape();
    if xs.len() != 5 {
        return Err(TensorError::shape("conv3d", "input rank", format!("expected [B,C,W,H,D], got {:?}", xs)));
    }
    let (batch, cin) = (xs[0], xs[1]);
    let k = check_weight("conv3d", weight, cin, 1)?;
    let cout = weight.shape()[0];
    check_bias("conv3d", bias, cout)?;
    let big = [xs[2], xs[3], xs[4]];
    let small = conv3d_output_dims(big, k, stride, padding)?;
    let geom = ConvGeom { k, stride, padding, big, small };
    let (in_len, ssz) = (cin * geom.big_len(), geom.small_len());
    let kdim = cin * geom.kernel_len();

    let mut out = vec![T::ZERO; batch * cout * ssz];
    out.par_chunks_mut(cout * ssz).enumerate().for_each(|(n, y)| {
        let mut scratch = Vec::new();
        let cols = unfold(&input.data()[n * in_len..(n + 1) * in_len], cin, &geom, &mut scratch);
        matmul_into(MatRef::new(weight.data(), cout, kdim), MatRef::new(cols, kdim, ssz), y, false);
    });
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), ssz);
    }
    let shape = vec![batch, cout, small[0], small[1], small[2]];
    let op = Conv3dBackward { geom, batch, cin, cout };
    Ok(match bias {
        Some(b) => Tensor::from_op(out, shape, &[input, weight, b], op),
        None => Tensor::from_op(out, shape, &[input, weight], op),
    })
}

struct ConvTranspose3dBackward {
    geom: ConvGeom,
    batch: usize,
    cin: usize,
    cout: usize,
}

impl<T: Element> Backward<T> for ConvTranspose3dBackward {
    fn name(&self) -> &'static str {
        "conv_transpose3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let Self { geom, batch, cin, cout } = *self;
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let g = ctx.grad;
        let ssz = geom.small_len();
        let (in_len, out_len) = (cin * ssz, cout * geom.big_len());
        let kdim = cout * geom.kernel_len();
        let (need_x, need_w) = (ctx.needs(0), ctx.needs(1));

        let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
            .into_par_iter()
            .map(|n| {
                let mut scratch = Vec::new();
                let gcols = unfold(&g[n * out_len..(n + 1) * out_len], cout, &geom, &mut scratch);
                let xs = &x[n * in_len..(n + 1) * in_len];
                let gx = need_x.then(|| {
                    let mut gx = vec![T::ZERO; in_len];
                    matmul_into(MatRef::new(w, cin, kdim), MatRef::new(gcols, kdim, ssz), &mut gx, false);
                    gx
                });
                let gw = need_w.then(|| {
                    let mut gw = vec![T::ZERO; cin * kdim];
                    matmul_into(MatRef::new(xs, cin, ssz), MatRef::new(gcols, kdim, ssz).t(), &mut gw, false);
                    gw
                });
                (gx, gw)
            })
            .collect();

        let (gxs, gws): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
        let gx = need_x.then(|| gxs.into_iter().flatten().flatten().collect());
        let gw = need_w.then(|| sum_in_order(gws.into_iter().flatten().collect()));
        let mut grads = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs(2).then(|| bias_grad(g, batch, cout, geom.big_len())));
        }
        grads
    }
}

/// Transposed 3D convolution (the adjoint of [`conv3d`] with the same kernel),
/// with a `[Cin, Cout, k, k, k]` kernel.
pub fn conv_transpose3d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let xs = input.shape();
    if xs.len() != 5 {
        return Err(TensorError::shape(
            "conv_transpose3d",
            "input rank",
            format!("expected [B,C,W,H,D], got {:?}", xs),
        ));
    }
    let (batch, cin) = (xs[0], xs[1]);
    let k = check_weight("conv_transpose3d", weight, cin, 0)?;
    let cout = weight.shape()[1];
    check_bias("conv_transpose3d", bias, cout)?;
    let small = [xs[2], xs[3], xs[4]];
    let big = conv_transpose3d_output_dims(small, k, stride, padding)?;
    let geom = ConvGeom { k, stride, padding, big, small };
    let ssz = geom.small_len();
    let kdim = cout * geom.kernel_len();
    let out_len = cout * geom.big_len();

    let mut out = vec![T::ZERO; batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(n, y)| {
        let xn = &input.data()[n * cin * ssz..(n + 1) * cin * ssz];
        if geom.is_pointwise() {
            matmul_into(MatRef::new(weight.data(), cin, kdim).t(), MatRef::new(xn, cin, ssz), y, false);
        } else {
            let mut cols = vec![T::ZERO; kdim * ssz];
            matmul_into(MatRef::new(weight.data(), cin, kdim).t(), MatRef::new(xn, cin, ssz), &mut cols, false);
            col2im(&cols, cout, &geom, y);
        }
    });
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), geom.big_len());
    }
    let shape = vec![batch, cout, big[0], big[1], big[2]];
    let op = ConvTranspose3dBackward { geom, batch, cin, cout };
    Ok(match bias {
        Some(b) => Tensor::from_op(out, shape, &[input, weight, b], op),
        None => Tensor::from_op(out, shape, &[input, weight], op),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for n in 1..7 {
            for k in 1..4 {
                for s in 1..3 {
                    for p in 0..2 {
                        if n + 2 * p < k {
                            continue;
                        }
                        let out = (n + 2 * p - k) / s + 1;
                        for off in 0..k {
                            let (lo, hi) = valid_range(out, n, off, s, p);
                            let expect: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * s + off) as isize - p as isize;
                                    i >= 0 && (i as usize) < n
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, expect, "n={n} k={k} s={s} p={p} off={off}");
                        }
                    }
                }
            }
        }
    }
}
