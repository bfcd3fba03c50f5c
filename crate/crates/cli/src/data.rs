//! Dataset directories: `<dir>/images/<case>.nii[.gz]` paired with `<dir>/labels/<case>.nii[.gz]`.

use std::path::{Path, PathBuf};

use cats_core::nifti::{read_label_volume, read_volume};
use cats_core::preprocess::PreprocessConfig;
use cats_core::trainer::Case;
use cats_core::{CatsError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Case name without the NIfTI extension.
pub fn case_name(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

/// NIfTI files directly inside `dir`, sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CatsError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CatsError::io(dir, e))?.path();
        if path.is_file() && is_nifti(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// One image/label pair on disk.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetEntry {
    pub split: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub image_sha256: String,
    pub label_sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CatsError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Pair every image with its label file.
pub fn scan(dir: &Path, split: &str) -> Result<Vec<DatasetEntry>> {
    let images = list_volumes(&dir.join("images"))?;
    if images.is_empty() {
        return Err(CatsError::Data(format!("{} contains no NIfTI images", dir.join("images").display())));
    }
    images
        .into_iter()
        .map(|image| {
            let label = dir.join("labels").join(image.file_name().expect("listed file"));
            if !label.is_file() {
                return Err(CatsError::Data(format!("no label {} for image {}", label.display(), image.display())));
            }
            Ok(DatasetEntry {
                split: split.into(),
                image_sha256: sha256_file(&image)?,
                label_sha256: sha256_file(&label)?,
                image,
                label,
            })
        })
        .collect()
}

/// Read and preprocess every pair.
pub fn load_cases(entries: &[DatasetEntry], num_classes: usize, preprocess: &PreprocessConfig) -> Result<Vec<Case>> {
    entries
        .iter()
        .map(|e| {
            let image = read_volume(&e.image)?;
            let label = read_label_volume(&e.label, Some(num_classes))?;
            if image.dims() != label.dims() {
                return Err(CatsError::Data(format!(
                    "{}: image extents {:?} differ from label extents {:?}",
                    e.image.display(),
                    image.dims(),
                    label.dims()
                )));
            }
            let (image, label) = preprocess.apply(&image, Some(&label))?;
            Ok(Case { name: case_name(&e.image), image: image.data, label: label.expect("label given").data })
        })
        .collect()
}
