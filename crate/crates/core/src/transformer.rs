//! Transformer path: patch embedding, encoder layers, multi-scale taps and the
//! projection heads that bring taps onto the CNN feature grids.

use cats_autodiff::ops::{add_trailing, conv_transpose3d, gelu_tanh, layer_norm, linear, matmul, mul_scalar, softmax};
use cats_autodiff::{Element, Tensor};

use crate::config::{CatsConfig, TransformerConfig};
use crate::error::{CatsError, Result};
use crate::params::{Init, ModelSpecs, ParamSpec, ParameterSet, Phase};
use crate::unet::{bn, residual_block, residual_block_specs};

/// `[B, C, W, H, D]` to `[B, N, C P^3]`. Rows follow the patch grid in
/// lexicographic order; each row is the patch flattened as `[C, P, P, P]`.
pub fn patchify<T: Element>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(CatsError::Data(format!("patchify expects [B, C, W, H, D], got {:?}", s)));
    }
    let (b, c) = (s[0], s[1]);
    if p == 0 || s[2..].iter().any(|&e| e % p != 0) {
        return Err(CatsError::config(
            "transformer.patch",
            format!("patch {} does not divide extents {:?}", p, &s[2..]),
        ));
    }
    let g = [s[2] / p, s[3] / p, s[4] / p];
    let t = x.reshape(&[b, c, g[0], p, g[1], p, g[2], p])?;
    let t = t.permute(&[0, 2, 4, 6, 1, 3, 5, 7])?;
    Ok(t.reshape(&[b, g[0] * g[1] * g[2], c * p * p * p])?)
}

/// Inverse of [`patchify`] for a patch grid `grid` and `channels` input channels.
pub fn unpatchify<T: Element>(t: &Tensor<T>, p: usize, channels: usize, grid: [usize; 3]) -> Result<Tensor<T>> {
    let b = t.shape()[0];
    let u = t.reshape(&[b, grid[0], grid[1], grid[2], channels, p, p, p])?;
    let u = u.permute(&[0, 4, 1, 5, 2, 6, 3, 7])?;
    Ok(u.reshape(&[b, channels, grid[0] * p, grid[1] * p, grid[2] * p])?)
}

/// `z0 = patches E + E_p`.
pub fn embed<T: Element>(patches: &Tensor<T>, e: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
    let width = patches.shape()[patches.ndim() - 1];
    if e.shape()[0] != width {
        return Err(CatsError::Data(format!(
            "patch width {} does not match embedding input width {}",
            width,
            e.shape()[0]
        )));
    }
    Ok(add_trailing(&linear(patches, e, None)?, pos)?)
}

/// Single-head scaled dot-product attention over `[B, N, F]`.
/// Returns the output `[B, N, G]` and the attention weights `[B, N, N]`.
pub fn self_attention<T: Element>(
    z: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    scale: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let q = linear(z, wq, None)?;
    let k = linear(z, wk, None)?;
    let v = linear(z, wv, None)?;
    let scores = mul_scalar(&matmul(&q, &k.permute(&[0, 2, 1])?)?, T::from_f64(1.0 / scale));
    let weights = softmax(&scores, 2)?;
    Ok((matmul(&weights, &v)?, weights))
}

/// Borrowed weights of one encoder layer.
pub struct EncoderLayer<'a, T: Element> {
    pub norm1: (&'a Tensor<T>, &'a Tensor<T>),
    pub norm2: (&'a Tensor<T>, &'a Tensor<T>),
    pub wq: &'a Tensor<T>,
    pub wk: &'a Tensor<T>,
    pub wv: &'a Tensor<T>,
    pub w_out: &'a Tensor<T>,
    pub b_out: &'a Tensor<T>,
    pub fc1: (&'a Tensor<T>, &'a Tensor<T>),
    pub fc2: (&'a Tensor<T>, &'a Tensor<T>),
    pub heads: usize,
}

impl<'a, T: Element> EncoderLayer<'a, T> {
    pub fn load(params: &'a ParameterSet<T>, index: usize, heads: usize) -> Result<Self> {
        let p = |s: &str| params.get(&format!("transformer.layers.{index}.{s}"));
        Ok(Self {
            norm1: (p("norm1.gain")?, p("norm1.shift")?),
            norm2: (p("norm2.gain")?, p("norm2.shift")?),
            wq: p("attn.q.weight")?,
            wk: p("attn.k.weight")?,
            wv: p("attn.v.weight")?,
            w_out: p("attn.out.weight")?,
            b_out: p("attn.out.bias")?,
            fc1: (p("mlp.fc1.weight")?, p("mlp.fc1.bias")?),
            fc2: (p("mlp.fc2.weight")?, p("mlp.fc2.bias")?),
            heads,
        })
    }
}

/// Multi-head attention: heads are column blocks of the fused `M x M` maps, their
/// outputs concatenated along features and mixed by the output projection.
/// Returns `[B, N, M]` and weights `[B, n, N, N]`.
pub fn msa<T: Element>(z: &Tensor<T>, layer: &EncoderLayer<'_, T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = z.shape();
    let (b, n_tok, m) = (s[0], s[1], s[2]);
    let heads = layer.heads;
    if heads == 0 || m % heads != 0 {
        return Err(CatsError::config("transformer.heads", format!("{} heads do not divide width {}", heads, m)));
    }
    let d = m / heads;
    let split = |t: Tensor<T>, perm: &[usize]| -> Result<Tensor<T>> {
        Ok(t.reshape(&[b, n_tok, heads, d])?.permute(perm)?)
    };
    let q = split(linear(z, layer.wq, None)?, &[0, 2, 1, 3])?;
    let kt = split(linear(z, layer.wk, None)?, &[0, 2, 3, 1])?;
    let v = split(linear(z, layer.wv, None)?, &[0, 2, 1, 3])?;
    let scores = mul_scalar(&matmul(&q, &kt)?, T::from_f64(1.0 / (d as f64).sqrt()));
    let weights = softmax(&scores, 3)?;
    let heads_out = matmul(&weights, &v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n_tok, m])?;
    Ok((linear(&heads_out, layer.w_out, Some(layer.b_out))?, weights))
}

/// `z' = MSA(LN(z)) + z`, `z_out = MLP(LN(z')) + z'`.
pub fn encoder_layer<T: Element>(z: &Tensor<T>, layer: &EncoderLayer<'_, T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (a, weights) = msa(&layer_norm(z, layer.norm1.0, layer.norm1.1)?, layer)?;
    let z_mid = a.add(z)?;
    let h = linear(&layer_norm(&z_mid, layer.norm2.0, layer.norm2.1)?, layer.fc1.0, Some(layer.fc1.1))?;
    let h = linear(&gelu_tanh(&h), layer.fc2.0, Some(layer.fc2.1))?;
    Ok((h.add(&z_mid)?, weights))
}

pub fn transformer_specs(cfg: &TransformerConfig, tokens: usize) -> ModelSpecs {
    let m = cfg.embed_dim;
    let mut specs = ModelSpecs::new();
    specs.push(ParamSpec::new("transformer.embed.weight", &[cfg.patch_width(), m], Init::TruncNormal { std: 0.02 }));
    specs.push(ParamSpec::new("transformer.pos_embed", &[tokens, m], Init::TruncNormal { std: 0.02 }));
    for l in 0..cfg.layers {
        let p = format!("transformer.layers.{l}");
        specs.layer_norm(&format!("{p}.norm1"), m);
        for w in ["q", "k", "v"] {
            specs.linear(&format!("{p}.attn.{w}"), m, m, false);
        }
        specs.linear(&format!("{p}.attn.out"), m, m, true);
        specs.layer_norm(&format!("{p}.norm2"), m);
        specs.linear(&format!("{p}.mlp.fc1"), m, cfg.mlp_hidden, true);
        specs.linear(&format!("{p}.mlp.fc2"), cfg.mlp_hidden, m, true);
    }
    specs
}

/// Everything the transformer path produced for one batch.
pub struct TransformerOutput<T: Element> {
    pub z0: Tensor<T>,
    /// Tokens after each tap layer, `[B, N, M]`, in tap order.
    pub taps: Vec<Tensor<T>>,
    /// Output of every layer, `[B, N, M]`.
    pub layers: Vec<Tensor<T>>,
    /// Attention weights of every layer, `[B, n, N, N]`.
    pub attention: Vec<Tensor<T>>,
    pub grid: [usize; 3],
}

/// Patchify, embed and run all layers, recording the configured taps.
pub fn forward_with_taps<T: Element>(
    cfg: &TransformerConfig,
    params: &ParameterSet<T>,
    x: &Tensor<T>,
    train_grid: [usize; 3],
) -> Result<TransformerOutput<T>> {
    let s = x.shape();
    if s.len() != 5 || s[1] != cfg.in_channels {
        return Err(CatsError::Data(format!(
            "transformer expects [B, {}, W, H, D], got {:?}",
            cfg.in_channels, s
        )));
    }
    let grid = cfg.grid([s[2], s[3], s[4]])?;
    let patches = patchify(x, cfg.patch)?;
    let pos = params.get("transformer.pos_embed")?;
    let pos = if grid == train_grid { pos.clone() } else { resize_position_embedding(pos, train_grid, grid)? };
    let z0 = embed(&patches, params.get("transformer.embed.weight")?, &pos)?;
    let mut out = TransformerOutput { z0: z0.clone(), taps: Vec::new(), layers: Vec::new(), attention: Vec::new(), grid };
    let mut z = z0;
    for l in 0..cfg.layers {
        let layer = EncoderLayer::load(params, l, cfg.heads)?;
        let (next, weights) = encoder_layer(&z, &layer)?;
        z = next;
        if cfg.tap_layers.contains(&(l + 1)) {
            out.taps.push(z.clone());
        }
        out.layers.push(z.clone());
        out.attention.push(weights);
    }
    Ok(out)
}

/// Trilinear resize (corner-aligned) of a `[N, M]` position table laid out on `from`
/// onto `to`. Constant with respect to gradients; used for inference on other sizes.
pub fn resize_position_embedding<T: Element>(pos: &Tensor<T>, from: [usize; 3], to: [usize; 3]) -> Result<Tensor<T>> {
    let m = pos.shape()[1];
    if pos.shape()[0] != from.iter().product::<usize>() {
        return Err(CatsError::Data(format!("position table {:?} does not match grid {:?}", pos.shape(), from)));
    }
    let src = pos.data();
    let coord = |i: usize, axis: usize| -> (usize, usize, f64) {
        if to[axis] == 1 || from[axis] == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (from[axis] - 1) as f64 / (to[axis] - 1) as f64;
        let lo = (x.floor() as usize).min(from[axis] - 1);
        let hi = (lo + 1).min(from[axis] - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(to.iter().product::<usize>() * m);
    for w in 0..to[0] {
        let cw = coord(w, 0);
        for h in 0..to[1] {
            let ch = coord(h, 1);
            for d in 0..to[2] {
                let cd = coord(d, 2);
                for f in 0..m {
                    let mut acc = 0.0;
                    for (iw, fw) in [(cw.0, 1.0 - cw.2), (cw.1, cw.2)] {
                        for (ih, fh) in [(ch.0, 1.0 - ch.2), (ch.1, ch.2)] {
                            for (id, fd) in [(cd.0, 1.0 - cd.2), (cd.1, cd.2)] {
                                let row = (iw * from[1] + ih) * from[2] + id;
                                acc += fw * fh * fd * src[row * m + f].to_f64();
                            }
                        }
                    }
                    out.push(T::from_f64(acc));
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, &[to.iter().product(), m])?)
}

/// Channel widths of the deconvolution chain lifting a tap to `level`:
/// halve from `M` per step, ending exactly at the level width.
pub fn projection_widths(cfg: &CatsConfig, level: usize) -> Vec<usize> {
    let steps = cfg.depth() - level;
    let target = cfg.unet.base_channels << level;
    (1..=steps)
        .map(|j| if j == steps { target } else { (cfg.transformer.embed_dim >> j).max(target) })
        .collect()
}

pub fn projection_specs(cfg: &CatsConfig) -> ModelSpecs {
    let mut specs = ModelSpecs::new();
    let depth = cfg.depth();
    let m = cfg.transformer.embed_dim;
    for level in 1..depth {
        let mut cin = m;
        for (j, cout) in projection_widths(cfg, level).into_iter().enumerate() {
            let p = format!("proj.{level}.up.{j}");
            specs.deconv(&p, cin, cout, 2);
            specs.batch_norm(&format!("{p}.bn"), cout);
            cin = cout;
        }
    }
    let width = cfg.unet.base_channels << depth;
    residual_block_specs(&mut specs, &format!("proj.{depth}.res"), m, width);
    specs.batch_norm(&format!("proj.{depth}.bn"), width);
    specs
}

/// Tokens `[B, N, M]` onto the grid `[B, M, W/P, H/P, D/P]`.
pub fn tokens_to_grid<T: Element>(tap: &Tensor<T>, grid: [usize; 3]) -> Result<Tensor<T>> {
    let s = tap.shape();
    if s.len() != 3 || s[1] != grid.iter().product::<usize>() {
        return Err(CatsError::Data(format!("tap {:?} is inconsistent with patch grid {:?}", s, grid)));
    }
    Ok(tap.reshape(&[s[0], grid[0], grid[1], grid[2], s[2]])?.permute(&[0, 4, 1, 2, 3])?)
}

/// Project one tap onto CNN level `level` (1-based; `depth` is the bottleneck).
pub fn project_tap<T: Element>(
    cfg: &CatsConfig,
    params: &ParameterSet<T>,
    phase: &mut Phase<'_, T>,
    tap: &Tensor<T>,
    grid: [usize; 3],
    level: usize,
) -> Result<Tensor<T>> {
    let depth = cfg.depth();
    if level == 0 || level > depth {
        return Err(CatsError::Data(format!("projection level {} outside 1..={}", level, depth)));
    }
    let mut h = tokens_to_grid(tap, grid)?;
    if level == depth {
        h = residual_block(params, phase, &format!("proj.{depth}.res"), &h)?;
        return Ok(bn(params, phase, &format!("proj.{depth}.bn"), &h)?.relu());
    }
    for j in 0..depth - level {
        let p = format!("proj.{level}.up.{j}");
        h = conv_transpose3d(&h, params.get(&format!("{p}.weight"))?, None, 2, 0)?;
        h = bn(params, phase, &format!("{p}.bn"), &h)?.relu();
    }
    Ok(h)
}
