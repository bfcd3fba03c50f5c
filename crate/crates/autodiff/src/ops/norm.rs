//! Layer and batch normalisation.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, BackwardCtx, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Normalised values and inverse standard deviations of each group, saved for backward.
struct Saved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Shared VJP for "normalise a group, then scale and shift per feature".
///
/// `group_of(i)` and `feature_of(i)` map a flat index to its statistics group
/// and its gain/shift slot.
fn affine_norm_backward<T: Element>(
    ctx: &BackwardCtx<'_, T>,
    saved: &Saved<T>,
    groups: usize,
    features: usize,
    group_of: impl Fn(usize) -> usize,
    feature_of: impl Fn(usize) -> usize,
    batch_stats: bool,
) -> Vec<Option<Vec<T>>> {
    let g = ctx.grad;
    let gain = ctx.inputs[1].data();
    let n = g.len();
    let count = T::from_f64((n / groups) as f64);

    let gx = ctx.needs(0).then(|| {
        let mut gx = vec![T::ZERO; n];
        if batch_stats {
            let mut sum_d = vec![T::ZERO; groups];
            let mut sum_dx = vec![T::ZERO; groups];
            for i in 0..n {
                let d = g[i] * gain[feature_of(i)];
                sum_d[group_of(i)] += d;
                sum_dx[group_of(i)] += d * saved.xhat[i];
            }
            for i in 0..n {
                let grp = group_of(i);
                let d = g[i] * gain[feature_of(i)];
                gx[i] = saved.inv_std[grp] / count
                    * (count * d - sum_d[grp] - saved.xhat[i] * sum_dx[grp]);
            }
        } else {
            for i in 0..n {
                gx[i] = g[i] * gain[feature_of(i)] * saved.inv_std[group_of(i)];
            }
        }
        gx
    });
    let ggain = ctx.needs(1).then(|| {
        let mut acc = vec![T::ZERO; features];
        for i in 0..n {
            acc[feature_of(i)] += g[i] * saved.xhat[i];
        }
        acc
    });
    let gshift = ctx.needs(2).then(|| {
        let mut acc = vec![T::ZERO; features];
        for i in 0..n {
            acc[feature_of(i)] += g[i];
        }
        acc
    });
    vec![gx, ggain, gshift]
}

struct LayerNormBackward<T> {
    saved: Saved<T>,
    width: usize,
}

impl<T: Element> Backward<T> for LayerNormBackward<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let m = self.width;
        let rows = ctx.grad.len() / m;
        affine_norm_backward(ctx, &self.saved, rows, m, |i| i / m, |i| i % m, true)
    }
}

/// Normalise over the last axis (biased variance, epsilon inside the root), then `gain * x + shift`.
pub fn layer_norm<T: Element>(input: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    let m = *s.last().ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
    if gain.shape() != [m] || shift.shape() != [m] {
        return Err(TensorError::shape(
            "layer_norm",
            "feature axis",
            format!("input width {} vs gain {:?} / shift {:?}", m, gain.shape(), shift.shape()),
        ));
    }
    let x = input.data();
    let rows = x.len() / m;
    let mut xhat = vec![T::ZERO; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let mut out = vec![T::ZERO; x.len()];
    for r in 0..rows {
        let row = &x[r * m..(r + 1) * m];
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / m as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(T::from_f64(inv));
        for j in 0..m {
            let h = T::from_f64((row[j].to_f64() - mean) * inv);
            xhat[r * m + j] = h;
            out[r * m + j] = gain.data()[j] * h + shift.data()[j];
        }
    }
    let op = LayerNormBackward { saved: Saved { xhat, inv_std }, width: m };
    Ok(Tensor::from_op(out, s.to_vec(), &[input, gain, shift], op))
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Element> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::ZERO; channels], var: vec![T::ONE; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// How [`batch_norm3d`] obtains its statistics.
pub enum BatchNormMode<'a, T: Element> {
    /// Normalise with batch statistics and, when given, fold them into the running stats.
    Train(Option<&'a mut RunningStats<T>>),
    /// Normalise with running statistics.
    Eval(&'a RunningStats<T>),
}

struct BatchNormBackward<T> {
    saved: Saved<T>,
    channels: usize,
    spatial: usize,
    batch_stats: bool,
}

impl<T: Element> Backward<T> for BatchNormBackward<T> {
    fn name(&self) -> &'static str {
        "batch_norm3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (c, sp) = (self.channels, self.spatial);
        let channel = move |i: usize| (i / sp) % c;
        affine_norm_backward(ctx, &self.saved, c, c, channel, channel, self.batch_stats)
    }
}

/// Batch normalisation over `[B, C, ...]`: statistics per channel across batch and space.
///
/// Training mode uses the biased batch variance for normalisation and the
/// unbiased one for the running update (momentum [`BN_MOMENTUM`]).
pub fn batch_norm3d<T: Element>(
    input: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    mode: BatchNormMode<'_, T>,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() < 2 {
        return Err(TensorError::shape("batch_norm3d", "input rank", format!("{:?}", s)));
    }
    let (batch, c) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    if gain.shape() != [c] || shift.shape() != [c] {
        return Err(TensorError::shape(
            "batch_norm3d",
            "channel axis",
            format!("{} channels vs gain {:?} / shift {:?}", c, gain.shape(), shift.shape()),
        ));
    }
    let x = input.data();
    let count = batch * spatial;
    let (mean, inv_std, batch_stats): (Vec<f64>, Vec<f64>, bool) = match mode {
        BatchNormMode::Train(running) => {
            if count < 2 {
                return Err(TensorError::DegenerateBatch);
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for n in 0..batch {
                for ch in 0..c {
                    let start = (n * c + ch) * spatial;
                    mean[ch] += x[start..start + spatial].iter().map(|v| v.to_f64()).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for n in 0..batch {
                for ch in 0..c {
                    let start = (n * c + ch) * spatial;
                    var[ch] += x[start..start + spatial]
                        .iter()
                        .map(|v| (v.to_f64() - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            if let Some(rs) = running {
                if rs.channels() != c {
                    return Err(TensorError::shape(
                        "batch_norm3d",
                        "running stats",
                        format!("{} channels vs {} tracked", c, rs.channels()),
                    ));
                }
                let unbias = count as f64 / (count - 1) as f64;
                for ch in 0..c {
                    rs.mean[ch] = T::from_f64((1.0 - BN_MOMENTUM) * rs.mean[ch].to_f64() + BN_MOMENTUM * mean[ch]);
                    rs.var[ch] =
                        T::from_f64((1.0 - BN_MOMENTUM) * rs.var[ch].to_f64() + BN_MOMENTUM * var[ch] * unbias);
                }
            }
            let inv = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            (mean, inv, true)
        }
        BatchNormMode::Eval(rs) => {
            if rs.channels() != c {
                return Err(TensorError::shape(
                    "batch_norm3d",
                    "running stats",
                    format!("{} channels vs {} tracked", c, rs.channels()),
                ));
            }
            let mean = rs.mean.iter().map(|v| v.to_f64()).collect();
            let inv = rs.var.iter().map(|v| 1.0 / (v.to_f64() + NORM_EPS).sqrt()).collect();
            (mean, inv, false)
        }
    };
    let mut xhat = vec![T::ZERO; x.len()];
    let mut out = vec![T::ZERO; x.len()];
    let (gd, sd) = (gain.data(), shift.data());
    for n in 0..batch {
        for ch in 0..c {
            let start = (n * c + ch) * spatial;
            let (m, inv) = (mean[ch], inv_std[ch]);
            let (gch, sch) = (gd[ch], sd[ch]);
            for i in start..start + spatial {
                let h = T::from_f64((x[i].to_f64() - m) * inv);
                xhat[i] = h;
                out[i] = gch * h + sch;
            }
        }
    }
    let saved = Saved { xhat, inv_std: inv_std.into_iter().map(T::from_f64).collect() };
    let op = BatchNormBackward { saved, channels: c, spatial, batch_stats };
    Ok(Tensor::from_op(out, s.to_vec(), &[input, gain, shift], op))
}
