use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, BackwardCtx, Tensor};

struct MaxPoolBackward {
    argmax: Vec<u32>,
    input_len: usize,
}

impl<T: Element> Backward<T> for MaxPoolBackward {
    fn name(&self) -> &'static str {
        "maxpool3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::ZERO; self.input_len];
        for (&idx, &gv) in self.argmax.iter().zip(ctx.grad) {
            g[idx as usize] += gv;
        }
        vec![Some(g)]
    }
}

/// Non-overlapping `k`-cube max pooling over `[B, C, W, H, D]`.
///
/// Ties resolve to the lowest linear input index so gradients are deterministic.
pub fn maxpool3d<T: Element>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 5 {
        return Err(TensorError::shape("maxpool3d", "input rank", format!("{:?}", s)));
    }
    if k == 0 {
        return Err(TensorError::invalid("maxpool3d", "window must be positive"));
    }
    for axis in 2..5 {
        if s[axis] % k != 0 {
            return Err(TensorError::Indivisible { op: "maxpool3d", axis, extent: s[axis], divisor: k });
        }
    }
    let (w, h, d) = (s[2], s[3], s[4]);
    let (ow, oh, od) = (w / k, h / k, d / k);
    let planes = s[0] * s[1];
    let x = input.data();
    let mut out = Vec::with_capacity(planes * ow * oh * od);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..planes {
        let base = plane * w * h * d;
        for i in 0..ow {
            for j in 0..oh {
                for l in 0..od {
                    let mut best_idx = base + ((i * k) * h + j * k) * d + l * k;
                    let mut best = x[best_idx];
                    for a in 0..k {
                        for b in 0..k {
                            let row = base + ((i * k + a) * h + j * k + b) * d + l * k;
                            for (e, &v) in x[row..row + k].iter().enumerate() {
                                // strict comparison keeps the earliest index on ties
                                if v > best {
                                    best = v;
                                    best_idx = row + e;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    let shape = vec![s[0], s[1], ow, oh, od];
    Ok(Tensor::from_op(out, shape, &[input], MaxPoolBackward { argmax, input_len: input.numel() }))
}
