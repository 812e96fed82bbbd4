//! Directory-per-class image datasets and the synthetic style corpus.

pub mod ppm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Label order of the style classes.
pub const CLASS_NAMES: [&str; 4] = ["fog", "rain", "snow", "sun"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// Set when images were resized while loading.
    pub resized_to: Option<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(H, W)` shared by all images.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.image.shape()[1], s.image.shape()[2]))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            resized_to: self.resized_to,
        }
    }

    /// Seeded shuffle, then split into train/val/test by the given fractions
    /// (the remainder goes to test).
    pub fn split(&self, seed: u64, train: f64, val: f64) -> Result<(Dataset, Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 {
            return Err(Error::config(format!(
                "split fractions {train}/{val} must be in [0, 1] and sum to at most 1"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng_for(seed, "split"));
        let n_train = (self.len() as f64 * train).round() as usize;
        let n_val = ((self.len() as f64 * val).round() as usize).min(self.len() - n_train);
        Ok((
            self.subset(&idx[..n_train]),
            self.subset(&idx[n_train..n_train + n_val]),
            self.subset(&idx[n_train + n_val..]),
        ))
    }

    /// Stack the chosen images into `[N, 3, H, W]` with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let imgs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::stack(&imgs)?, labels))
    }
}

/// Load `root/<class>/<image>.ppm`. Classes are the sorted subdirectory
/// names; items are ordered by class, then by path. All images must share
/// one size.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    load(root, None)
}

/// Like [`load_dataset`] but resizes every image to `size × size`.
pub fn load_dataset_resized(root: &Path, size: usize) -> Result<Dataset> {
    load(root, Some(size))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::data(dir, e.to_string()))?;
    let mut out = Vec::new();
    for entry in rd {
        out.push(entry.map_err(|e| Error::data(dir, e.to_string()))?.path());
    }
    out.sort();
    Ok(out)
}

fn load(root: &Path, size: Option<usize>) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::data(root, "no class subdirectories"));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .expect("directory entry has a name")
                .to_string_lossy()
                .into_owned(),
        );
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file())
            .collect();
        if files.is_empty() {
            return Err(Error::data(dir, "empty class directory"));
        }
        for path in files {
            let mut image = ppm::read(&path)?;
            if let Some(s) = size {
                image = ppm::resize(&image, s, s)?;
            }
            samples.push(Sample { image, label, path });
        }
    }
    let first = samples[0].image.shape().to_vec();
    if let Some(bad) = samples.iter().find(|s| s.image.shape() != first.as_slice()) {
        return Err(Error::data(
            &bad.path,
            format!(
                "image is {:?}, expected {:?} like the first image (load with a resize size)",
                bad.image.shape(),
                first
            ),
        ));
    }
    Ok(Dataset {
        samples,
        class_names,
        resized_to: size,
    })
}
