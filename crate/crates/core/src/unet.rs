//! CNN path: 3D U-Net encoder, decoder with concatenated skips, residual block.

use cats_autodiff::ops::{batch_norm3d, concat, conv3d, conv_transpose3d, maxpool3d, relu};
use cats_autodiff::{Element, Tensor};

use crate::config::UNetConfig;
use crate::error::{CatsError, Result};
use crate::params::{ModelSpecs, ParameterSet, Phase};

/// Batch norm whose gain/shift live at `{name}.gain` / `{name}.shift`.
pub(crate) fn bn<T: Element>(
    params: &ParameterSet<T>,
    phase: &mut Phase<'_, T>,
    name: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let gain = params.get(&format!("{name}.gain"))?;
    let shift = params.get(&format!("{name}.shift"))?;
    Ok(batch_norm3d(x, gain, shift, phase.bn_mode(name)?)?)
}

/// Convolution with weight `{name}.weight` and, when present, bias `{name}.bias`.
pub(crate) fn conv<T: Element>(
    params: &ParameterSet<T>,
    name: &str,
    x: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let bias_name = format!("{name}.bias");
    let bias = if params.contains(&bias_name) { Some(params.get(&bias_name)?) } else { None };
    Ok(conv3d(x, params.get(&format!("{name}.weight"))?, bias, 1, padding)?)
}

pub(crate) fn deconv<T: Element>(params: &ParameterSet<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(conv_transpose3d(x, params.get(&format!("{name}.weight"))?, None, 2, 0)?)
}

/// Two `{conv 3^3, norm, relu}` stages.
pub fn conv_block_specs(specs: &mut ModelSpecs, prefix: &str, cin: usize, width: usize, norm: bool) {
    for (i, c) in [(1, cin), (2, width)] {
        specs.conv(&format!("{prefix}.conv{i}"), c, width, 3, !norm);
        if norm {
            specs.batch_norm(&format!("{prefix}.bn{i}"), width);
        }
    }
}

pub fn conv_block<T: Element>(
    params: &ParameterSet<T>,
    phase: &mut Phase<'_, T>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut h = x.clone();
    for i in 1..=2 {
        h = conv(params, &format!("{prefix}.conv{i}"), &h, 1)?;
        let norm = format!("{prefix}.bn{i}");
        if params.contains(&format!("{norm}.gain")) {
            h = bn(params, phase, &norm, &h)?;
        }
        h = relu(&h);
    }
    Ok(h)
}

/// `relu(norm(conv3(x)) + shortcut(x))`; the shortcut is the identity when widths match
/// and a biased 1^3 convolution otherwise.
pub fn residual_block_specs(specs: &mut ModelSpecs, prefix: &str, cin: usize, cout: usize) {
    specs.conv(&format!("{prefix}.conv"), cin, cout, 3, false);
    specs.batch_norm(&format!("{prefix}.bn"), cout);
    if cin != cout {
        specs.conv(&format!("{prefix}.shortcut"), cin, cout, 1, true);
    }
}

pub fn residual_block<T: Element>(
    params: &ParameterSet<T>,
    phase: &mut Phase<'_, T>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let h = conv(params, &format!("{prefix}.conv"), x, 1)?;
    let h = bn(params, phase, &format!("{prefix}.bn"), &h)?;
    let shortcut = format!("{prefix}.shortcut");
    let skip = if params.contains(&format!("{shortcut}.weight")) {
        conv(params, &shortcut, x, 0)?
    } else {
        x.clone()
    };
    Ok(relu(&h.add(&skip)?))
}

pub fn unet_specs(cfg: &UNetConfig) -> ModelSpecs {
    let mut specs = ModelSpecs::new();
    let ladder = cfg.ladder();
    for (i, &w) in ladder.iter().enumerate() {
        let cin = if i == 0 { cfg.in_channels } else { ladder[i - 1] };
        conv_block_specs(&mut specs, &format!("unet.enc.{i}"), cin, w, cfg.batch_norm);
    }
    for i in (0..cfg.depth).rev() {
        specs.deconv(&format!("unet.dec.{i}.up"), ladder[i + 1], ladder[i], 2);
        conv_block_specs(&mut specs, &format!("unet.dec.{i}"), 2 * ladder[i], ladder[i], cfg.batch_norm);
    }
    specs.conv("unet.head", ladder[0], cfg.num_classes, 1, true);
    specs
}

/// Feature maps at every resolution level; `features[i]` has `2^i F` channels at `1/2^i` scale.
pub fn encoder_forward<T: Element>(
    cfg: &UNetConfig,
    params: &ParameterSet<T>,
    phase: &mut Phase<'_, T>,
    x: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(CatsError::Data(format!("expected [B, C, W, H, D] input, got {:?}", s)));
    }
    cfg.check_extents([s[2], s[3], s[4]])?;
    let mut features = Vec::with_capacity(cfg.depth + 1);
    let mut h = x.clone();
    for i in 0..=cfg.depth {
        if i > 0 {
            h = maxpool3d(&h, 2)?;
        }
        h = conv_block(params, phase, &format!("unet.enc.{i}"), &h)?;
        features.push(h.clone());
    }
    Ok(features)
}

/// Upsample from the bottleneck, concatenating each skip, then project to class logits.
pub fn decoder_forward<T: Element>(
    cfg: &UNetConfig,
    params: &ParameterSet<T>,
    phase: &mut Phase<'_, T>,
    features: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if features.len() != cfg.depth + 1 {
        return Err(CatsError::Data(format!(
            "decoder expects {} feature maps, got {}",
            cfg.depth + 1,
            features.len()
        )));
    }
    let ladder = cfg.ladder();
    let mut h = features[cfg.depth].clone();
    for i in (0..cfg.depth).rev() {
        let skip = &features[i];
        if skip.shape()[1] != ladder[i] {
            return Err(CatsError::Data(format!(
                "skip {} has {} channels, ladder expects {}",
                i,
                skip.shape()[1],
                ladder[i]
            )));
        }
        let up = deconv(params, &format!("unet.dec.{i}.up"), &h)?;
        let joined = concat(&[&up, skip], 1)?;
        h = conv_block(params, phase, &format!("unet.dec.{i}"), &joined)?;
    }
    conv(params, "unet.head", &h, 0)
}
