//! Assembled networks: the dual-encoder model with additive skip fusion, and the
//! CNN-only backbone, behind a common trait and a name registry.

use cats_autodiff::ops::{conv3d_output_dims, conv_transpose3d_output_dims};
use cats_autodiff::{Element, Tensor};

use crate::config::CatsConfig;
use crate::error::{CatsError, Result};
use crate::params::{ModelSpecs, ModelState, ParameterSet, Phase, StatsSet};
use crate::registry::Registry;
use crate::transformer::{forward_with_taps, project_tap, projection_specs, transformer_specs, TransformerOutput};
use crate::unet::{decoder_forward, encoder_forward, unet_specs};

/// Parameter-name prefixes of the transformer path and its projection heads.
pub const TRANSFORMER_PREFIXES: [&str; 2] = ["transformer.", "proj."];

pub trait SegmentationModel<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    fn config(&self) -> &CatsConfig;

    fn specs(&self) -> &ModelSpecs;

    /// Logits `[B, K, W, H, D]` for input `[B, C, W, H, D]`.
    fn forward(&self, params: &ParameterSet<T>, phase: &mut Phase<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn init_state(&self, seed: u64) -> Result<ModelState<T>> {
        let specs = self.specs();
        Ok(ModelState { params: ParameterSet::initialize(&specs.params, seed)?, stats: StatsSet::initialize(&specs.stats) })
    }
}

/// Intermediate tensors of one dual-encoder forward pass.
pub struct CatsForward<T: Element> {
    pub logits: Tensor<T>,
    pub cnn_features: Vec<Tensor<T>>,
    /// Projected taps for levels `1..=depth`.
    pub projected: Vec<Tensor<T>>,
    pub fused: Vec<Tensor<T>>,
    pub transformer: TransformerOutput<T>,
}

pub struct CatsNet {
    config: CatsConfig,
    specs: ModelSpecs,
}

impl CatsNet {
    pub fn new(config: CatsConfig) -> Result<Self> {
        config.validate()?;
        let mut specs = unet_specs(&config.unet);
        specs.extend(transformer_specs(&config.transformer, train_tokens(&config)?));
        specs.extend(projection_specs(&config));
        Ok(Self { config, specs })
    }

    pub fn config(&self) -> &CatsConfig {
        &self.config
    }

    pub fn specs(&self) -> &ModelSpecs {
        &self.specs
    }

    pub fn forward_detailed<T: Element>(
        &self,
        params: &ParameterSet<T>,
        phase: &mut Phase<'_, T>,
        x: &Tensor<T>,
    ) -> Result<CatsForward<T>> {
        let cfg = &self.config;
        let cnn_features = encoder_forward(&cfg.unet, params, phase, x)?;
        let train_grid = cfg.transformer.grid(cfg.input_extents)?;
        let transformer = forward_with_taps(&cfg.transformer, params, x, train_grid)?;
        let mut projected = Vec::with_capacity(cfg.depth());
        let mut fused = vec![cnn_features[0].clone()];
        for (i, tap) in transformer.taps.iter().enumerate() {
            let level = i + 1;
            let p = project_tap(cfg, params, phase, tap, transformer.grid, level)?;
            if p.shape() != cnn_features[level].shape() {
                return Err(CatsError::Data(format!(
                    "projected tap {:?} does not match CNN feature {:?} at level {}",
                    p.shape(),
                    cnn_features[level].shape(),
                    level
                )));
            }
            fused.push(cnn_features[level].add(&p)?);
            projected.push(p);
        }
        let logits = decoder_forward(&cfg.unet, params, phase, &fused)?;
        Ok(CatsForward { logits, cnn_features, projected, fused, transformer })
    }
}

fn train_tokens(cfg: &CatsConfig) -> Result<usize> {
    Ok(cfg.transformer.grid(cfg.input_extents)?.iter().product())
}

impl<T: Element> SegmentationModel<T> for CatsNet {
    fn name(&self) -> &'static str {
        "cats"
    }

    fn config(&self) -> &CatsConfig {
        &self.config
    }

    fn specs(&self) -> &ModelSpecs {
        &self.specs
    }

    fn forward(&self, params: &ParameterSet<T>, phase: &mut Phase<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_detailed(params, phase, x)?.logits)
    }
}

/// The CNN backbone alone; its parameter names are a subset of [`CatsNet`]'s.
pub struct UNet {
    config: CatsConfig,
    specs: ModelSpecs,
}

impl UNet {
    pub fn new(config: CatsConfig) -> Result<Self> {
        config.unet.validate()?;
        config.unet.check_extents(config.input_extents)?;
        let specs = unet_specs(&config.unet);
        Ok(Self { config, specs })
    }
}

impl<T: Element> SegmentationModel<T> for UNet {
    fn name(&self) -> &'static str {
        "unet"
    }

    fn config(&self) -> &CatsConfig {
        &self.config
    }

    fn specs(&self) -> &ModelSpecs {
        &self.specs
    }

    fn forward(&self, params: &ParameterSet<T>, phase: &mut Phase<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let features = encoder_forward(&self.config.unet, params, phase, x)?;
        decoder_forward(&self.config.unet, params, phase, &features)
    }
}

pub type ModelFactory<T> = fn(CatsConfig) -> Result<Box<dyn SegmentationModel<T>>>;

fn boxed_cats<T: Element>(c: CatsConfig) -> Result<Box<dyn SegmentationModel<T>>> {
    Ok(Box::new(CatsNet::new(c)?))
}

fn boxed_unet<T: Element>(c: CatsConfig) -> Result<Box<dyn SegmentationModel<T>>> {
    Ok(Box::new(UNet::new(c)?))
}

pub fn model_registry<T: Element>() -> Registry<ModelFactory<T>> {
    let mut r: Registry<ModelFactory<T>> = Registry::new("model");
    r.register("cats", boxed_cats::<T>).expect("fresh registry");
    r.register("unet", boxed_unet::<T>).expect("fresh registry");
    r
}

pub fn build_model<T: Element>(name: &str, config: CatsConfig) -> Result<Box<dyn SegmentationModel<T>>> {
    (model_registry::<T>().get(name)?)(config)
}

/// Copy with every transformer-path and projection parameter zeroed.
pub fn ablate_transformer<T: Element>(params: &ParameterSet<T>) -> ParameterSet<T> {
    params.zeroed(&TRANSFORMER_PREFIXES)
}

/// Scalar parameter counts by component. `total` excludes the position embedding,
/// whose size depends on the training extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCount {
    pub cnn: usize,
    /// Convolution weights of the CNN path only.
    pub cnn_conv_weights: usize,
    pub transformer: usize,
    pub projection: usize,
    pub position_embedding: usize,
    pub total: usize,
}

pub fn parameter_count(cfg: &CatsConfig) -> Result<ParameterCount> {
    let net = CatsNet::new(cfg.clone())?;
    let mut c = ParameterCount { cnn: 0, cnn_conv_weights: 0, transformer: 0, projection: 0, position_embedding: 0, total: 0 };
    for spec in &net.specs.params {
        let n = spec.numel();
        if spec.name == "transformer.pos_embed" {
            c.position_embedding += n;
            continue;
        }
        if spec.name.starts_with("unet.") {
            c.cnn += n;
            if spec.name.ends_with(".weight") && spec.shape.len() == 5 {
                c.cnn_conv_weights += n;
            }
        } else if spec.name.starts_with("transformer.") {
            c.transformer += n;
        } else {
            c.projection += n;
        }
        c.total += n;
    }
    Ok(c)
}

/// `[B, C, W, H, D]`
pub type Shape5 = [usize; 5];

/// Shapes implied by the parameter layout for a given batch, derived without running the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub cnn: Vec<Shape5>,
    /// `(layer, [B, N, M])` per tap.
    pub taps: Vec<(usize, [usize; 3])>,
    /// Projected taps for levels `1..=depth`.
    pub projected: Vec<Shape5>,
    pub logits: Shape5,
}

fn weight_shape<'a>(specs: &'a ModelSpecs, name: &str) -> Result<&'a [usize]> {
    specs
        .get(&format!("{name}.weight"))
        .map(|s| s.shape.as_slice())
        .ok_or_else(|| CatsError::Data(format!("missing parameter `{name}.weight`")))
}

fn expect_channels(name: &str, weight_in: usize, actual: usize) -> Result<()> {
    if weight_in != actual {
        return Err(CatsError::Data(format!("`{}` expects {} input channels, receives {}", name, weight_in, actual)));
    }
    Ok(())
}

/// Propagate shapes through the parameter layout of the dual-encoder model.
pub fn shape_plan(cfg: &CatsConfig, batch: usize) -> Result<ShapePlan> {
    let net = CatsNet::new(cfg.clone())?;
    let specs = &net.specs;
    let mut dims = cfg.input_extents;
    let mut ch = cfg.unet.in_channels;
    let conv_stage = |name: &str, ch: &mut usize, dims: &mut [usize; 3]| -> Result<()> {
        let w = weight_shape(specs, name)?;
        expect_channels(name, w[1], *ch)?;
        *dims = conv3d_output_dims(*dims, w[2], 1, w[2] / 2)?;
        *ch = w[0];
        Ok(())
    };
    let mut cnn = Vec::new();
    for i in 0..=cfg.depth() {
        if i > 0 {
            dims = dims.map(|e| e / 2);
        }
        for c in 1..=2 {
            conv_stage(&format!("unet.enc.{i}.conv{c}"), &mut ch, &mut dims)?;
        }
        cnn.push([batch, ch, dims[0], dims[1], dims[2]]);
    }

    let t = &cfg.transformer;
    let grid = t.grid(cfg.input_extents)?;
    let tokens: usize = grid.iter().product();
    let embed = weight_shape(specs, "transformer.embed")?;
    expect_channels("transformer.embed", embed[0], t.patch_width())?;
    let taps: Vec<_> = t.tap_layers.iter().map(|&l| (l, [batch, tokens, embed[1]])).collect();

    let mut projected = Vec::new();
    for level in 1..=cfg.depth() {
        let mut ch = embed[1];
        let mut dims = grid;
        if level == cfg.depth() {
            conv_stage(&format!("proj.{level}.res.conv"), &mut ch, &mut dims)?;
        } else {
            for j in 0..cfg.depth() - level {
                let name = format!("proj.{level}.up.{j}");
                let w = weight_shape(specs, &name)?;
                expect_channels(&name, w[0], ch)?;
                dims = conv_transpose3d_output_dims(dims, w[2], 2, 0)?;
                ch = w[1];
            }
        }
        projected.push([batch, ch, dims[0], dims[1], dims[2]]);
    }

    let mut ch = cnn[cfg.depth()][1];
    let mut dims = cfg.input_extents.map(|e| e >> cfg.depth());
    for i in (0..cfg.depth()).rev() {
        let name = format!("unet.dec.{i}.up");
        let w = weight_shape(specs, &name)?;
        expect_channels(&name, w[0], ch)?;
        dims = conv_transpose3d_output_dims(dims, w[2], 2, 0)?;
        ch = w[1] + cnn[i][1];
        for c in 1..=2 {
            conv_stage(&format!("unet.dec.{i}.conv{c}"), &mut ch, &mut dims)?;
        }
    }
    conv_stage("unet.head", &mut ch, &mut dims)?;
    Ok(ShapePlan { cnn, taps, projected, logits: [batch, ch, dims[0], dims[1], dims[2]] })
}
