//! Sums and means.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, BackwardCtx, Tensor};

struct SumBackward<T> {
    scale: T,
}

impl<T: Element> Backward<T> for SumBackward<T> {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad[0] * self.scale;
        vec![Some(vec![g; ctx.inputs[0].numel()])]
    }
}

pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().copied().sum();
    Tensor::from_op(vec![total], vec![], &[x], SumBackward { scale: T::ONE })
}

pub fn mean<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::from_f64(x.numel() as f64);
    let total: T = x.data().iter().copied().sum();
    Tensor::from_op(vec![total / n], vec![], &[x], SumBackward { scale: T::ONE / n })
}

struct SumKeepAxisBackward {
    outer: usize,
    extent: usize,
    inner: usize,
}

impl<T: Element> Backward<T> for SumKeepAxisBackward {
    fn name(&self) -> &'static str {
        "sum_keep_axis"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut g = Vec::with_capacity(self.outer * self.extent * self.inner);
        for _ in 0..self.outer {
            for a in 0..self.extent {
                g.extend(std::iter::repeat_n(ctx.grad[a], self.inner));
            }
        }
        vec![Some(g)]
    }
}

/// Sum over every axis except `axis`, giving a vector of length `shape[axis]`.
pub fn sum_keep_axis<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(TensorError::invalid("sum_keep_axis", format!("axis {} out of range", axis)));
    }
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut acc = vec![T::ZERO; extent];
    let data = x.data();
    for o in 0..outer {
        for (a, slot) in acc.iter_mut().enumerate() {
            let start = (o * extent + a) * inner;
            let s: T = data[start..start + inner].iter().copied().sum();
            *slot += s;
        }
    }
    Ok(Tensor::from_op(acc, vec![extent], &[x], SumKeepAxisBackward { outer, extent, inner }))
}
