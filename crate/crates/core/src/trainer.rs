//! Training loop: crop, augment, forward, Dice loss, backward, Adam; with periodic
//! validation, best/last checkpoints and a divergence guard.

use std::path::PathBuf;

use cats_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{CatsError, Result};
use crate::inference::sliding_window;
use crate::metrics::{dice_loss, dice_score};
use crate::model::{ablate_transformer, SegmentationModel, TRANSFORMER_PREFIXES};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{ModelState, Phase};
use crate::preprocess::{crop_or_pad, AugmentConfig, Augmenter, CropMode, PreprocessConfig, Sample};
use crate::volume::Grid3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Validate (and checkpoint) every this many steps; 0 validates only at the end.
    pub val_interval: u64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub crop: CropMode,
    pub augment: AugmentConfig,
    /// Zero the transformer path and its projections and keep them frozen.
    pub ablate_transformer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 2,
            max_steps: 400,
            val_interval: 50,
            seed: 0,
            checkpoint_dir: None,
            crop: CropMode::Random,
            augment: AugmentConfig::default(),
            ablate_transformer: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, batch_norm: bool) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(CatsError::config("train.lr", "must be a finite non-negative number"));
        }
        let min_batch = if batch_norm { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(CatsError::config(
                "train.batch_size",
                format!("must be at least {} (batch statistics need more than one sample)", min_batch),
            ));
        }
        self.augment.validate()
    }
}

/// A preprocessed training or validation case.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub image: Grid3<f32>,
    pub label: Grid3<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub val_dice: Option<f64>,
}

impl LogRecord {
    pub fn to_tsv_line(&self) -> String {
        let val = self.val_dice.map_or_else(|| "-".to_string(), |v| format!("{:.6}", v));
        format!("{}\t{:.9}\t{}\n", self.step, self.loss, val)
    }
}

pub const LOG_HEADER: &str = "step\tloss\tval_dice\n";

/// Which case fills global sample slot `slot`: epochs are seeded permutations of the dataset.
pub fn sample_order(seed: u64, cases: usize, slot: u64) -> usize {
    let epoch = slot / cases as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | epoch);
    let mut perm: Vec<usize> = (0..cases).collect();
    perm.shuffle(&mut rng);
    perm[(slot % cases as u64) as usize]
}

fn sample_rng(seed: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(slot);
    rng
}

pub struct Trainer<'m> {
    model: &'m dyn SegmentationModel<f32>,
    cfg: TrainConfig,
    augmenter: Augmenter,
    pub state: ModelState<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub best_val_dice: Option<f64>,
    /// Recorded in checkpoints so inference can repeat it.
    pub preprocess: Option<PreprocessConfig>,
}

impl<'m> Trainer<'m> {
    /// Fresh parameters initialised from `cfg.seed`.
    pub fn new(model: &'m dyn SegmentationModel<f32>, cfg: TrainConfig) -> Result<Self> {
        let mut state = model.init_state(cfg.seed)?;
        if cfg.ablate_transformer {
            state.params = ablate_transformer(&state.params).with_frozen(&TRANSFORMER_PREFIXES);
        }
        let adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &state.params);
        Self::assemble(model, cfg, state, adam, 0, None)
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(model: &'m dyn SegmentationModel<f32>, cfg: TrainConfig, ckpt: Checkpoint<f32>) -> Result<Self> {
        if ckpt.meta.model != model.name() || &ckpt.meta.config != model.config() {
            return Err(CatsError::config("checkpoint", "checkpoint was written for a different model or config"));
        }
        let adam = ckpt
            .adam
            .ok_or_else(|| CatsError::Data("checkpoint carries no optimizer state".into()))?;
        let mut trainer = Self::assemble(model, cfg, ckpt.state, adam, ckpt.meta.step, ckpt.meta.best_val_dice)?;
        trainer.preprocess = ckpt.meta.preprocess;
        Ok(trainer)
    }

    pub fn with_preprocess(mut self, preprocess: PreprocessConfig) -> Self {
        self.preprocess = Some(preprocess);
        self
    }

    fn assemble(
        model: &'m dyn SegmentationModel<f32>,
        cfg: TrainConfig,
        state: ModelState<f32>,
        adam: AdamState<f32>,
        step: u64,
        best_val_dice: Option<f64>,
    ) -> Result<Self> {
        cfg.validate(model.config().unet.batch_norm)?;
        let augmenter = Augmenter::new(&cfg.augment)?;
        Ok(Self { model, cfg, augmenter, state, adam, step, best_val_dice, preprocess: None })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn batch(&self, cases: &[Case]) -> Result<(Tensor<f32>, Vec<u16>)> {
        let patch = self.model.config().input_extents;
        let b = self.cfg.batch_size;
        let mut images = Vec::with_capacity(b * patch.iter().product::<usize>());
        let mut targets = Vec::with_capacity(images.capacity());
        for j in 0..b as u64 {
            let slot = self.step * b as u64 + j;
            let case = &cases[sample_order(self.cfg.seed, cases.len(), slot)];
            let mut rng = sample_rng(self.cfg.seed, slot);
            let sample = Sample::new(case.image.clone(), case.label.clone())?;
            let sample = crop_or_pad(&sample, patch, self.cfg.crop, &mut rng);
            let sample = self.augmenter.apply(sample, &mut rng);
            images.extend_from_slice(sample.image.data());
            targets.extend_from_slice(sample.label.data());
        }
        let channels = self.model.config().unet.in_channels;
        let x = Tensor::from_vec(images, &[b, channels, patch[0], patch[1], patch[2]])?;
        Ok((x, targets))
    }

    /// One optimisation step; returns the batch loss.
    pub fn train_step(&mut self, cases: &[Case]) -> Result<f64> {
        if cases.is_empty() {
            return Err(CatsError::Data("training set is empty".into()));
        }
        let (x, targets) = self.batch(cases)?;
        let logits = self.model.forward(&self.state.params, &mut Phase::Train(Some(&mut self.state.stats)), &x)?;
        let loss = dice_loss(&logits, &targets)?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(CatsError::Numerical(format!("loss became {} at step {}", value, self.step + 1)));
        }
        loss.backward()?;
        adam_step(&mut self.state.params, &mut self.adam)?;
        self.state.params.zero_grads();
        self.step += 1;
        Ok(value)
    }

    /// Mean foreground Dice over `cases`, predicted tile by tile without overlap.
    pub fn validate(&self, cases: &[Case]) -> Result<f64> {
        let k = self.model.config().num_classes();
        let window = self.model.config().input_extents;
        let mut total = 0.0;
        for case in cases {
            let pred = sliding_window(self.model, &self.state, &case.image, window, 0.0)?;
            for c in 1..k {
                total += dice_score(&pred.labels, &case.label, c as u16)?;
            }
        }
        Ok(total / (cases.len() * (k - 1)).max(1) as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            meta: CheckpointMeta {
                model: self.model.name().to_string(),
                config: self.model.config().clone(),
                step: self.step,
                seed: self.cfg.seed,
                best_val_dice: self.best_val_dice,
                adam: None,
                preprocess: self.preprocess.clone(),
            },
            state: self.state.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    /// Train until `max_steps`, reporting each record to `on_record`.
    pub fn run(
        &mut self,
        train: &[Case],
        val: &[Case],
        mut on_record: impl FnMut(&LogRecord) -> Result<()>,
    ) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        while self.step < self.cfg.max_steps {
            let loss = self.train_step(train)?;
            let due = self.step == self.cfg.max_steps
                || (self.cfg.val_interval > 0 && self.step % self.cfg.val_interval == 0);
            let mut val_dice = None;
            if due && !val.is_empty() {
                let dice = self.validate(val)?;
                val_dice = Some(dice);
                let improved = self.best_val_dice.is_none_or(|b| dice > b);
                if improved {
                    self.best_val_dice = Some(dice);
                }
                if let Some(dir) = &self.cfg.checkpoint_dir {
                    let ckpt = self.checkpoint();
                    if improved {
                        ckpt.save(&dir.join("best.ckpt"))?;
                    }
                    ckpt.save(&dir.join("last.ckpt"))?;
                }
            }
            let record = LogRecord { step: self.step, loss, val_dice };
            on_record(&record)?;
            log.push(record);
        }
        if let Some(dir) = &self.cfg.checkpoint_dir {
            self.checkpoint().save(&dir.join("last.ckpt"))?;
        }
        Ok(log)
    }
}

/// Train from fresh parameters; returns the trainer (holding the final state) and the loss log.
pub fn train<'m>(
    model: &'m dyn SegmentationModel<f32>,
    train: &[Case],
    val: &[Case],
    cfg: TrainConfig,
) -> Result<(Trainer<'m>, Vec<LogRecord>)> {
    let mut trainer = Trainer::new(model, cfg)?;
    let log = trainer.run(train, val, |_| Ok(()))?;
    Ok((trainer, log))
}
