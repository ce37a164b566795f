//! File formats and datasets: ICDAR-style annotations, binary PPM/PGM,
//! checkpoints, synthetic scenes and debug renders.

pub mod annotation;
pub mod checkpoint;
pub mod image;
pub mod render;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelError;

pub use annotation::{parse_annotations, Annotation, LineError};
pub use checkpoint::{checkpoint_bytes, read_checkpoint};
pub use image::{read_pgm, read_ppm, GrayImage, RgbImage};
pub use synth::{synth_sample, ShapeKind, SynthConfig, SynthSample};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
    #[error("image: {msg} at byte {offset}")]
    Format { offset: u64, msg: String },
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint: truncated while reading {what} at byte {offset}")]
    Truncated { offset: u64, what: String },
    #[error("checkpoint: config {key} is {stored} in the file but {model} in the model")]
    ConfigMismatch { key: String, stored: String, model: String },
    #[error("checkpoint: tensor {name}: {msg}")]
    TensorShape { name: String, msg: String },
    #[error("checkpoint: {msg} at byte {offset}")]
    Checkpoint { offset: u64, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("synthesis: {0}")]
    Synth(String),
    #[error("dataset {0}: no images found")]
    EmptyDataset(PathBuf),
    #[error("{path}: {errors} bad annotation line(s), first: {first}")]
    Annotation { path: PathBuf, errors: usize, first: LineError },
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e)
    })
}

/// One image with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub annotation: Annotation,
}

/// Image paths (`*.ppm`) in a directory, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?.path();
        if p.extension().is_some_and(|x| x == "ppm") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads an annotation file, failing on the first bad line.
pub fn read_annotation_file(path: &Path, id: &str) -> Result<Annotation, DataError> {
    let bytes = read_file(path)?;
    let (ann, errors) = parse_annotations(id, &String::from_utf8_lossy(&bytes));
    match errors.first() {
        Some(first) => {
            Err(DataError::Annotation { path: path.to_path_buf(), errors: errors.len(), first: first.clone() })
        }
        None => Ok(ann),
    }
}

/// Loads every `name.ppm` with its `name.txt` annotation.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, DataError> {
    let images = list_images(dir)?;
    if images.is_empty() {
        return Err(DataError::EmptyDataset(dir.to_path_buf()));
    }
    images
        .iter()
        .map(|p| {
            let id = image_id(p);
            let image = read_ppm(&read_file(p)?).map_err(|e| match e {
                DataError::Format { offset, msg } => {
                    DataError::Format { offset, msg: format!("{}: {msg}", p.display()) }
                }
                other => other,
            })?;
            let annotation = read_annotation_file(&p.with_extension("txt"), &id)?;
            Ok(Sample { id, image, annotation })
        })
        .collect()
}

/// Writes `count` synthetic samples as `synth_NNNN.ppm` and `.txt`. Sample
/// `i` uses seed `seed + i`.
pub fn write_synth_dataset(dir: &Path, count: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("synth_{i:04}");
        let s = synth_sample(&id, seed.wrapping_add(i as u64), cfg)?;
        let img_path = dir.join(format!("{id}.ppm"));
        write_atomic(&img_path, &image::ppm_bytes(&s.image))?;
        write_atomic(&dir.join(format!("{id}.txt")), s.annotation.to_text().as_bytes())?;
        written.push(img_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { height: 64, width: 64, ..Default::default() };
        write_synth_dataset(dir.path(), 3, 11, &cfg).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        let fresh = synth_sample("synth_0001", 12, &cfg).unwrap();
        assert_eq!(ds[1].image, fresh.image);
        assert_eq!(ds[1].annotation, fresh.annotation);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
