//! Reshape, axis permutation and concatenation.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{strides_of, Backward, BackwardCtx, Tensor};

struct ReshapeBackward;

impl<T: Element> Backward<T> for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.to_vec())]
    }
}

pub fn reshape<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(TensorError::shape(
            "reshape",
            "element count",
            format!("{:?} -> {:?}", x.shape(), shape),
        ));
    }
    Ok(Tensor::from_op(x.to_vec(), shape.to_vec(), &[x], ReshapeBackward))
}

/// Gather `src` (shape `shape`) into the layout given by `perm`.
fn permute_data<T: Element>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let nd = out_shape.len();
    if nd == 0 {
        out.extend_from_slice(src);
        return (out, out_shape);
    }
    // Odometer over output indices with an innermost contiguous-run fast path.
    let last = nd - 1;
    let inner = out_shape[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| src[base + i * inner_stride]));
        }
        // advance the outer indices
        let mut axis = last;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            idx[axis] += 1;
            base += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    (out, out_shape)
}

struct PermuteBackward {
    inverse: Vec<usize>,
}

impl<T: Element> Backward<T> for PermuteBackward {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (g, _) = permute_data(ctx.grad, ctx.output_shape, &self.inverse);
        vec![Some(g)]
    }
}

/// Reorder axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::invalid(
            "permute",
            format!("{:?} is not a permutation of {} axes", perm, nd),
        ));
    }
    let mut inverse = vec![0; nd];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let (data, shape) = permute_data(x.data(), x.shape(), perm);
    Ok(Tensor::from_op(data, shape, &[x], PermuteBackward { inverse }))
}

struct ConcatBackward {
    outer: usize,
    widths: Vec<usize>,
}

impl<T: Element> Backward<T> for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.widths.len());
        for (i, &w) in self.widths.iter().enumerate() {
            if ctx.needs(i) {
                let mut g = Vec::with_capacity(self.outer * w);
                for o in 0..self.outer {
                    let start = o * total + offset;
                    g.extend_from_slice(&ctx.grad[start..start + w]);
                }
                grads.push(Some(g));
            } else {
                grads.push(None);
            }
            offset += w;
        }
        grads
    }
}

/// Join tensors along `axis`; all other extents must agree.
pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    let shape = first.shape();
    if axis >= shape.len() {
        return Err(TensorError::invalid("concat", format!("axis {} out of range", axis)));
    }
    for p in parts {
        let s = p.shape();
        let ok = s.len() == shape.len()
            && s.iter().zip(shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::shape(
                "concat",
                format!("axes other than {}", axis),
                format!("{:?} vs {:?}", shape, s),
            ));
        }
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for o in 0..outer {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    Ok(Tensor::from_op(data, out_shape, parts, ConcatBackward { outer, widths }))
}
