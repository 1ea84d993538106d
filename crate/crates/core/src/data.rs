//! Procedural blob dataset: grayscale Gaussian bumps at random positions and
//! scales, labeled by scale class. Stands in for a real training corpus at
//! desk scale.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::render_blob;
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

/// Blob sigma range per class label.
pub const CLASS_SIGMAS: [(f64, f64); 3] = [(1.2, 1.8), (2.0, 2.6), (2.8, 3.4)];

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub image_size: usize,
    pub n_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    image_size: usize,
    n_classes: usize,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    label: usize,
}

/// Generates `count` blob images of side `image_size`, deterministically
/// from `seed`.
pub fn generate_blobs(count: usize, image_size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let margin = image_size as f64 / 4.0;
    for _ in 0..count {
        let label = rng.gen_range(0..CLASS_SIGMAS.len());
        let (lo, hi) = CLASS_SIGMAS[label];
        let sigma = rng.gen_range(lo..hi);
        let cx = rng.gen_range(margin..image_size as f64 - margin);
        let cy = rng.gen_range(margin..image_size as f64 - margin);
        images.push(render_blob(image_size, cx, cy, sigma, 1.0));
        labels.push(label);
    }
    Dataset {
        images,
        labels,
        image_size,
        n_classes: CLASS_SIGMAS.len(),
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Writes one TNSR file per sample plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut samples = Vec::with_capacity(self.len());
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            let file = format!("sample_{i:05}.tnsr");
            io::write_tensor(&dir.join(&file), img)?;
            samples.push(ManifestEntry { file, label });
        }
        let manifest = Manifest {
            image_size: self.image_size,
            n_classes: self.n_classes,
            samples,
        };
        let json =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json).map_err(|e| Error::Io {
            path: dir.join("manifest.json"),
            source: e,
        })
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::Io {
            path: manifest_path.clone(),
            source: e,
        })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut images = Vec::with_capacity(manifest.samples.len());
        let mut labels = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let img = io::read_tensor(&dir.join(&entry.file))?;
            if img.shape() != [manifest.image_size, manifest.image_size] {
                return Err(Error::Format(format!(
                    "{}: shape {:?} does not match manifest size {}",
                    entry.file,
                    img.shape(),
                    manifest.image_size
                )));
            }
            if entry.label >= manifest.n_classes {
                return Err(Error::Format(format!(
                    "{}: label {} out of {} classes",
                    entry.file, entry.label, manifest.n_classes
                )));
            }
            images.push(img);
            labels.push(entry.label);
        }
        Ok(Dataset {
            images,
            labels,
            image_size: manifest.image_size,
            n_classes: manifest.n_classes,
        })
    }

    /// Deterministic train/holdout split: every `k`-th sample held out.
    pub fn split_holdout(&self, k: usize) -> (Dataset, Dataset) {
        let mut train = Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            image_size: self.image_size,
            n_classes: self.n_classes,
        };
        let mut held = train.clone();
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            let dst = if i % k == 0 { &mut held } else { &mut train };
            dst.images.push(img.clone());
            dst.labels.push(label);
        }
        (train, held)
    }
}
