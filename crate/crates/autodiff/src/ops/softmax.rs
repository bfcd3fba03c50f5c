use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, BackwardCtx, Tensor};

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct SoftmaxBackward {
    axis: usize,
}

impl<T: Element> Backward<T> for SoftmaxBackward {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (outer, extent, inner) = split(ctx.output_shape, self.axis);
        let (y, g) = (ctx.output, ctx.grad);
        let mut gx = vec![T::ZERO; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut dot = T::ZERO;
                for a in 0..extent {
                    let idx = base + a * inner;
                    dot += g[idx] * y[idx];
                }
                for a in 0..extent {
                    let idx = base + a * inner;
                    gx[idx] = y[idx] * (g[idx] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
pub fn softmax<T: Element>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = input.shape();
    if axis >= shape.len() {
        return Err(TensorError::invalid("softmax", format!("axis {} out of range for {:?}", axis, shape)));
    }
    let (outer, extent, inner) = split(shape, axis);
    let x = input.data();
    let mut y = vec![T::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = x[base];
            for a in 1..extent {
                max = max.max_val(x[base + a * inner]);
            }
            let mut total = T::ZERO;
            for a in 0..extent {
                let e = (x[base + a * inner] - max).exp();
                y[base + a * inner] = e;
                total += e;
            }
            for a in 0..extent {
                y[base + a * inner] = y[base + a * inner] / total;
            }
        }
    }
    Ok(Tensor::from_op(y, shape.to_vec(), &[input], SoftmaxBackward { axis }))
}
