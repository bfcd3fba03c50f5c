//! Command implementations. Each returns the text to print on success.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use cats_core::inference::sliding_window;
use cats_core::metrics::MetricsReport;
use cats_core::nifti::{read_label_volume, read_volume, write_label_volume, write_volume};
use cats_core::phantom::{generate_phantoms, SyntheticPhantomSpec};
use cats_core::preprocess::resample;
use cats_core::trainer::{Trainer, LOG_HEADER};
use cats_core::volume::{Grid3, LabelVolume, Volume};
use cats_core::{build_model, CatsError, Checkpoint, ModelState, Result, SegmentationModel};

use crate::data::{case_name, list_volumes, load_cases, scan};
use crate::run::{RunConfig, RunManifest};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CatsError::io(dir, e))
}

/// Train from a config file; `seed` overrides `train.seed`.
pub fn train(config: &Path, seed: Option<u64>) -> Result<String> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    let cfg = cfg.resolve()?;
    let k = cfg.network().num_classes();

    let mut entries = scan(&cfg.data.train, "train")?;
    let train_cases = load_cases(&entries, k, &cfg.preprocess)?;
    let val_cases = match &cfg.data.val {
        Some(dir) => {
            let val = scan(dir, "val")?;
            let cases = load_cases(&val, k, &cfg.preprocess)?;
            entries.extend(val);
            cases
        }
        None => train_cases.clone(),
    };

    create_dir(&cfg.output_dir)?;
    RunManifest::new(&cfg, entries).write(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join("loss.tsv");
    let mut log = File::create(&log_path).map_err(|e| CatsError::io(&log_path, e))?;
    log.write_all(LOG_HEADER.as_bytes()).map_err(|e| CatsError::io(&log_path, e))?;

    let model = build_model::<f32>(&cfg.model, cfg.network().clone())?;
    let mut trainer = Trainer::new(model.as_ref(), cfg.train.clone())?.with_preprocess(cfg.preprocess.clone());
    trainer.run(&train_cases, &val_cases, |r| {
        log.write_all(r.to_tsv_line().as_bytes()).map_err(|e| CatsError::io(&log_path, e))?;
        if let Some(d) = r.val_dice {
            eprintln!("step {:>6}  loss {:.6}  val dice {:.4}", r.step, r.loss, d);
        }
        Ok(())
    })?;
    Ok(format!(
        "trained {} for {} steps; best validation Dice {}; outputs in {}",
        cfg.model,
        trainer.step,
        trainer.best_val_dice.map_or("n/a".into(), |d| format!("{:.4}", d)),
        cfg.output_dir.display()
    ))
}

/// Every parameter and running-statistics entry the model expects, with matching shapes.
fn check_state(model: &dyn SegmentationModel<f32>, state: &ModelState<f32>) -> Result<()> {
    let specs = model.specs();
    for spec in &specs.params {
        let t = state.params.get(&spec.name).map_err(|_| {
            CatsError::Data(format!("checkpoint lacks parameter `{}` required by {}", spec.name, model.name()))
        })?;
        // The position embedding is sized by the training patch; only its width is fixed.
        let comparable = if spec.name == "transformer.pos_embed" { &spec.shape[1..] } else { &spec.shape[..] };
        let actual = if spec.name == "transformer.pos_embed" { &t.shape()[1..] } else { t.shape() };
        if comparable != actual {
            return Err(CatsError::Data(format!(
                "checkpoint parameter `{}` has shape {:?}, model expects {:?}",
                spec.name,
                t.shape(),
                spec.shape
            )));
        }
    }
    for (name, channels) in &specs.stats {
        if state.stats.get(name).map_or(true, |s| s.channels() != *channels) {
            return Err(CatsError::Data(format!("checkpoint running statistics `{}` are missing or mis-sized", name)));
        }
    }
    if state.params.len() != specs.params.len() {
        return Err(CatsError::Data(format!(
            "checkpoint holds {} parameters, {} expects {}",
            state.params.len(),
            model.name(),
            specs.params.len()
        )));
    }
    Ok(())
}

/// Nearest-neighbour map from a prediction on a resampled grid back onto the input grid.
fn labels_on_grid(labels: &Grid3<u16>, from: [f64; 3], dims: [usize; 3], to: [f64; 3]) -> Grid3<u16> {
    let src = labels.dims();
    let near = |a: usize, i: usize| ((i as f64 * to[a] / from[a]).round() as usize).min(src[a] - 1);
    Grid3::from_fn(dims, |w, h, d| labels.get(near(0, w), near(1, h), near(2, d)))
}

#[derive(Debug, Clone)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    /// Defaults to the training patch.
    pub window: Option<[usize; 3]>,
    pub overlap: f64,
}

pub fn predict(args: &PredictArgs) -> Result<String> {
    let ckpt = Checkpoint::<f32>::load(&args.checkpoint)?;
    let model = build_model::<f32>(&ckpt.meta.model, ckpt.meta.config.clone())?;
    check_state(model.as_ref(), &ckpt.state)?;
    let window = args.window.unwrap_or(ckpt.meta.config.input_extents);

    let input = read_volume(&args.input)?;
    let (image, resampled): (Volume, bool) = match &ckpt.meta.preprocess {
        Some(p) => {
            let (normalized, _) = cats_core::preprocess::PreprocessConfig { target_spacing: None, ..p.clone() }.apply(&input, None)?;
            match p.target_spacing {
                Some(t) if t != input.spacing() => (resample(&normalized, t)?, true),
                _ => (normalized, false),
            }
        }
        None => (input.clone(), false),
    };
    let pred = sliding_window(model.as_ref(), &ckpt.state, &image.data, window, args.overlap)?;
    let labels = if resampled {
        labels_on_grid(&pred.labels, image.spacing(), input.dims(), input.spacing())
    } else {
        pred.labels
    };
    let k = ckpt.meta.config.num_classes();
    let out = LabelVolume::new(labels, k, input.spacing(), *input.affine())?;
    write_label_volume(&out, &args.output)?;
    let counts = out.histogram();
    Ok(format!(
        "wrote {} ({:?} voxels, class counts {:?})",
        args.output.display(),
        out.dims(),
        counts
    ))
}

/// Pair each prediction with the truth file of the same name (in `truth/` or `truth/labels/`).
fn counterpart(truth: &Path, pred: &Path) -> Result<PathBuf> {
    let name = pred.file_name().expect("listed file");
    let base = case_name(pred);
    let candidates = [truth.to_path_buf(), truth.join("labels")];
    for dir in &candidates {
        for file in [dir.join(name), dir.join(format!("{base}.nii.gz")), dir.join(format!("{base}.nii"))] {
            if file.is_file() {
                return Ok(file);
            }
        }
    }
    Err(CatsError::Data(format!("no ground truth for {} under {}", pred.display(), truth.display())))
}

/// Score predictions against ground truth; writes `report` (default `<pred>/metrics.tsv`).
pub fn evaluate(pred: &Path, truth: &Path, classes: &[u16], report_path: Option<&Path>) -> Result<String> {
    for (flag, dir) in [("--pred", pred), ("--truth", truth)] {
        if !dir.is_dir() {
            return Err(CatsError::config(flag, format!("directory {} does not exist", dir.display())));
        }
    }
    if classes.is_empty() {
        return Err(CatsError::config("--classes", "at least one class is required"));
    }
    let files = list_volumes(pred)?;
    if files.is_empty() {
        return Err(CatsError::Data(format!("{} contains no NIfTI predictions", pred.display())));
    }
    let mut report = MetricsReport::new(classes.to_vec());
    for file in &files {
        let truth_file = counterpart(truth, file)?;
        let p = read_label_volume(file, None)?;
        let t = read_label_volume(&truth_file, None)?;
        report
            .add_case(&case_name(file), &p.data, &t.data, t.spacing())
            .map_err(|e| CatsError::Data(format!("{}: {}", case_name(file), e)))?;
    }
    let path = report_path.map_or_else(|| pred.join("metrics.tsv"), Path::to_path_buf);
    std::fs::write(&path, report.to_tsv()).map_err(|e| CatsError::io(&path, e))?;
    Ok(format!("{}report: {}", report.render_table(), path.display()))
}

/// Write synthetic volumes as `<out>/images/*.nii.gz` and `<out>/labels/*.nii.gz`.
pub fn phantoms(spec_path: &Path, out: &Path) -> Result<String> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| CatsError::config("--spec", format!("{}: {}", spec_path.display(), e)))?;
    let spec: SyntheticPhantomSpec =
        toml::from_str(&text).map_err(|e| CatsError::config("spec", e.message().to_string()))?;
    let phantoms = generate_phantoms(&spec)?;
    let (images, labels) = (out.join("images"), out.join("labels"));
    create_dir(&images)?;
    create_dir(&labels)?;
    let mut objects = serde_json::Map::new();
    for p in &phantoms {
        write_volume(&p.image, images.join(format!("{}.nii.gz", p.name)))?;
        write_label_volume(&p.label, labels.join(format!("{}.nii.gz", p.name)))?;
        objects.insert(p.name.clone(), serde_json::to_value(&p.objects).expect("objects serialise"));
    }
    let path = out.join("objects.json");
    let text = serde_json::to_string_pretty(&objects).expect("objects serialise");
    std::fs::write(&path, text + "\n").map_err(|e| CatsError::io(&path, e))?;
    Ok(format!("wrote {} phantoms to {}", phantoms.len(), out.display()))
}
