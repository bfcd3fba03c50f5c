//! Elementwise arithmetic and activations.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, BackwardCtx, Tensor};

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            "operand shape",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryBackward(Binary);

impl<T: Element> Backward<T> for BinaryBackward {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad;
        let ga = ctx.needs(0).then(|| match self.0 {
            Binary::Add | Binary::Sub => g.to_vec(),
            Binary::Mul => g.iter().zip(b).map(|(&g, &b)| g * b).collect(),
            Binary::Div => g.iter().zip(b).map(|(&g, &b)| g / b).collect(),
        });
        let gb = ctx.needs(1).then(|| match self.0 {
            Binary::Add => g.to_vec(),
            Binary::Sub => g.iter().map(|&g| -g).collect(),
            Binary::Mul => g.iter().zip(a).map(|(&g, &a)| g * a).collect(),
            Binary::Div => g
                .iter()
                .zip(a.iter().zip(b))
                .map(|(&g, (&a, &b))| -g * a / (b * b))
                .collect(),
        });
        vec![ga, gb]
    }
}

fn binary<T: Element>(kind: Binary, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let name = <BinaryBackward as Backward<T>>::name(&BinaryBackward(kind));
    same_shape(name, a, b)?;
    let f = |x: T, y: T| match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    };
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_op(data, a.shape().to_vec(), &[a, b], BinaryBackward(kind)))
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(Binary::Add, a, b)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(Binary::Sub, a, b)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(Binary::Mul, a, b)
}

pub fn div<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(Binary::Div, a, b)
}

struct AffineScalarBackward<T> {
    scale: T,
}

impl<T: Element> Backward<T> for AffineScalarBackward<T> {
    fn name(&self) -> &'static str {
        "affine_scalar"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.iter().map(|&g| g * self.scale).collect())]
    }
}

/// `x * scale + offset` with scalar constants.
pub fn affine_scalar<T: Element>(x: &Tensor<T>, scale: T, offset: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * scale + offset).collect();
    Tensor::from_op(data, x.shape().to_vec(), &[x], AffineScalarBackward { scale })
}

pub fn add_scalar<T: Element>(x: &Tensor<T>, c: T) -> Tensor<T> {
    affine_scalar(x, T::ONE, c)
}

pub fn mul_scalar<T: Element>(x: &Tensor<T>, c: T) -> Tensor<T> {
    affine_scalar(x, c, T::ZERO)
}

struct AddTrailingBackward;

impl<T: Element> Backward<T> for AddTrailingBackward {
    fn name(&self) -> &'static str {
        "add_trailing"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let inner = ctx.inputs[1].numel();
        let gb = ctx.needs(1).then(|| {
            let mut acc = vec![T::ZERO; inner];
            for chunk in ctx.grad.chunks_exact(inner) {
                acc.iter_mut().zip(chunk).for_each(|(a, &g)| *a += g);
            }
            acc
        });
        vec![ctx.needs(0).then(|| ctx.grad.to_vec()), gb]
    }
}

/// Add `bias` to every trailing block of `x`; `bias.shape()` must equal the
/// trailing axes of `x` (bias-over-last-axis generalised to several axes).
pub fn add_trailing<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, bs) = (x.shape(), bias.shape());
    if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
        return Err(TensorError::shape(
            "add_trailing",
            "trailing axes",
            format!("bias {:?} does not match the tail of {:?}", bs, xs),
        ));
    }
    let inner = bias.numel();
    let mut data = x.to_vec();
    for chunk in data.chunks_exact_mut(inner) {
        chunk.iter_mut().zip(bias.data()).for_each(|(v, &b)| *v += b);
    }
    Ok(Tensor::from_op(data, xs.to_vec(), &[x, bias], AddTrailingBackward))
}

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Gelu,
    Ln,
    Exp,
}

struct UnaryBackward(Unary);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

impl<T: Element> Backward<T> for UnaryBackward {
    fn name(&self) -> &'static str {
        match self.0 {
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Ln => "ln",
            Unary::Exp => "exp",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0].data();
        let g = ctx.grad;
        let out = match self.0 {
            Unary::Relu => g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
                .collect(),
            Unary::Gelu => g.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x)).collect(),
            Unary::Ln => g.iter().zip(x).map(|(&g, &x)| g / x).collect(),
            Unary::Exp => g.iter().zip(ctx.output).map(|(&g, &y)| g * y).collect(),
        };
        vec![Some(out)]
    }
}

fn unary<T: Element>(kind: Unary, x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| match kind {
            Unary::Relu => v.max_val(T::ZERO),
            Unary::Gelu => gelu(v),
            Unary::Ln => v.ln(),
            Unary::Exp => v.exp(),
        })
        .collect();
    Tensor::from_op(data, x.shape().to_vec(), &[x], UnaryBackward(kind))
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(Unary::Relu, x)
}

/// GELU, tanh approximation.
pub fn gelu_tanh<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(Unary::Gelu, x)
}

pub fn ln<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(Unary::Ln, x)
}

pub fn exp<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(Unary::Exp, x)
}

/// Elementwise activation or fusion applied by [`pointwise`].
pub enum Pointwise<'a, T: Element> {
    Relu,
    Gelu,
    Add(&'a Tensor<T>),
}

pub fn pointwise<T: Element>(x: &Tensor<T>, kind: Pointwise<'_, T>) -> Result<Tensor<T>> {
    match kind {
        Pointwise::Relu => Ok(relu(x)),
        Pointwise::Gelu => Ok(gelu_tanh(x)),
        Pointwise::Add(other) => add(x, other),
    }
}
