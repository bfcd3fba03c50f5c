//! Matrix products.

use crate::element::{matmul_into, Element, MatRef};
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, BackwardCtx, Tensor};

struct MatmulBackward {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Element> Backward<T> for MatmulBackward {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let Self { batch, m, k, n } = *self;
        let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let ga = ctx.needs(0).then(|| {
            let mut out = vec![T::ZERO; batch * m * k];
            for i in 0..batch {
                matmul_into(
                    MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                    MatRef::new(&b[i * k * n..(i + 1) * k * n], k, n).t(),
                    &mut out[i * m * k..(i + 1) * m * k],
                    false,
                );
            }
            out
        });
        let gb = ctx.needs(1).then(|| {
            let mut out = vec![T::ZERO; batch * k * n];
            for i in 0..batch {
                matmul_into(
                    MatRef::new(&a[i * m * k..(i + 1) * m * k], m, k).t(),
                    MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                    &mut out[i * k * n..(i + 1) * k * n],
                    false,
                );
            }
            out
        });
        vec![ga, gb]
    }
}

/// Batched product `[..., m, k] x [..., k, n] -> [..., m, n]` with equal leading axes.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(TensorError::shape(
            "matmul",
            "leading axes",
            format!("{:?} x {:?}", sa, sb),
        ));
    }
    let nd = sa.len();
    let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
    if sb[nd - 2] != k {
        return Err(TensorError::shape(
            "matmul",
            "inner extent",
            format!("{} vs {}", k, sb[nd - 2]),
        ));
    }
    let batch: usize = sa[..nd - 2].iter().product();
    let mut out = vec![T::ZERO; batch * m * n];
    for i in 0..batch {
        matmul_into(
            MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k),
            MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n),
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    let mut shape = sa[..nd - 2].to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_op(out, shape, &[a, b], MatmulBackward { batch, m, k, n }))
}

struct LinearBackward {
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl<T: Element> Backward<T> for LinearBackward {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let Self { rows, fan_in, fan_out } = *self;
        let (x, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let gx = ctx.needs(0).then(|| {
            let mut out = vec![T::ZERO; rows * fan_in];
            matmul_into(
                MatRef::new(g, rows, fan_out),
                MatRef::new(w, fan_in, fan_out).t(),
                &mut out,
                false,
            );
            out
        });
        let gw = ctx.needs(1).then(|| {
            let mut out = vec![T::ZERO; fan_in * fan_out];
            matmul_into(MatRef::new(x, rows, fan_in).t(), MatRef::new(g, rows, fan_out), &mut out, false);
            out
        });
        let mut grads = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs(2).then(|| {
                let mut acc = vec![T::ZERO; fan_out];
                for row in g.chunks_exact(fan_out) {
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                acc
            }));
        }
        grads
    }
}

/// Affine map over the last axis: `x[..., F] · weight[F, G] + bias[G]`.
pub fn linear<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
        return Err(TensorError::shape(
            "linear",
            "trailing extent",
            format!("input {:?} vs weight {:?}", xs, ws),
        ));
    }
    let (fan_in, fan_out) = (ws[0], ws[1]);
    if let Some(b) = bias {
        if b.shape() != [fan_out] {
            return Err(TensorError::shape(
                "linear",
                "bias extent",
                format!("bias {:?} vs output width {}", b.shape(), fan_out),
            ));
        }
    }
    let rows = x.numel() / fan_in;
    let mut out = vec![T::ZERO; rows * fan_out];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(fan_out) {
            row.copy_from_slice(b.data());
        }
    }
    matmul_into(
        MatRef::new(x.data(), rows, fan_in),
        MatRef::new(weight.data(), fan_in, fan_out),
        &mut out,
        bias.is_some(),
    );
    let mut shape = xs.to_vec();
    *shape.last_mut().unwrap() = fan_out;
    let op = LinearBackward { rows, fan_in, fan_out };
    Ok(match bias {
        Some(b) => Tensor::from_op(out, shape, &[x, weight, b], op),
        None => Tensor::from_op(out, shape, &[x, weight], op),
    })
}
