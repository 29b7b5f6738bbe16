//! Training batches: JPEG-compress whole images at random quality factors, then
//! take pixel-aligned random crops from the compressed and pristine versions.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;

use image::RgbImage;
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{CorpusManifest, Split};
use super::imageio::load_rgb;
use super::jpeg::jpeg_round_trip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistortionSpec {
    pub codec: String,
    pub qf_min: u32,
    pub qf_max: u32,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        DistortionSpec {
            codec: "jpeg-baseline".into(),
            qf_min: 5,
            qf_max: 95,
        }
    }
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.codec != "jpeg-baseline" {
            return Err(Error::Config(format!("unsupported codec `{}`", self.codec)));
        }
        if !(1 <= self.qf_min && self.qf_min <= self.qf_max && self.qf_max <= 100) {
            return Err(Error::Config(format!(
                "quality range {}..={} must satisfy 1 <= min <= max <= 100",
                self.qf_min, self.qf_max
            )));
        }
        Ok(())
    }

    /// Integer quality factor, uniform on `qf_min..=qf_max`.
    pub fn sample_qf(&self, rng: &mut impl Rng) -> u32 {
        rng.gen_range(self.qf_min..=self.qf_max)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub batch_size: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_size: 96,
            batch_size: 16,
        }
    }
}

/// Decoded training images kept in memory.
#[derive(Clone, Debug)]
pub struct TrainingSource {
    images: Vec<(PathBuf, RgbImage)>,
}

impl TrainingSource {
    /// Loads the train split, skipping (with a warning) images smaller than the patch.
    pub fn from_manifest(manifest: &CorpusManifest, split: Split, patch: &PatchSpec) -> Result<Self> {
        let mut images = Vec::new();
        for path in manifest.paths(split) {
            let img = load_rgb(&path)?;
            images.push((path, img));
        }
        Self::from_images(images, patch)
    }

    pub fn from_images(images: Vec<(PathBuf, RgbImage)>, patch: &PatchSpec) -> Result<Self> {
        let p = patch.patch_size as u32;
        let usable: Vec<_> = images
            .into_iter()
            .filter(|(path, img)| {
                let ok = img.width() >= p && img.height() >= p;
                if !ok {
                    warn!(
                        "skipping {}: {}x{} is smaller than the {p}x{p} patch",
                        path.display(),
                        img.width(),
                        img.height()
                    );
                }
                ok
            })
            .collect();
        if usable.is_empty() {
            return Err(Error::Input("no training image is large enough for the patch size".into()));
        }
        Ok(TrainingSource { images: usable })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &RgbImage {
        &self.images[i].1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub compressed: Tensor,
    pub pristine: Tensor,
    pub qfs: Vec<u32>,
    pub image_indices: Vec<usize>,
    pub offsets: Vec<(usize, usize)>,
}

impl TrainingBatch {
    pub fn describe(&self) -> String {
        let items: Vec<String> = self
            .image_indices
            .iter()
            .zip(&self.qfs)
            .zip(&self.offsets)
            .map(|((i, q), (y, x))| format!("img{i}@qf{q}+({y},{x})"))
            .collect();
        items.join(" ")
    }
}

fn crop_rgb(img: &RgbImage, top: usize, left: usize, size: usize, dst: &mut [f32]) {
    let w = img.width() as usize;
    let raw = img.as_raw();
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let px = &raw[((top + y) * w + left + x) * 3..][..3];
            for c in 0..3 {
                dst[c * plane + y * size + x] = px[c] as f32 / 255.0;
            }
        }
    }
}

/// Draws one batch: image index, quality factor and crop offset per item, in that
/// order, from `rng`.
pub fn sample_training_batch(
    source: &TrainingSource,
    distortion: &DistortionSpec,
    patch: &PatchSpec,
    rng: &mut impl Rng,
) -> Result<TrainingBatch> {
    distortion.validate()?;
    if patch.batch_size == 0 || patch.patch_size == 0 {
        return Err(Error::Config("patch and batch sizes must be positive".into()));
    }
    let (b, p) = (patch.batch_size, patch.patch_size);
    let mut compressed = Tensor::zeros([b, 3, p, p]);
    let mut pristine = Tensor::zeros([b, 3, p, p]);
    let mut qfs = Vec::with_capacity(b);
    let mut image_indices = Vec::with_capacity(b);
    let mut offsets = Vec::with_capacity(b);
    for i in 0..b {
        let idx = rng.gen_range(0..source.len());
        let qf = distortion.sample_qf(rng);
        let img = source.image(idx);
        let top = rng.gen_range(0..=img.height() as usize - p);
        let left = rng.gen_range(0..=img.width() as usize - p);
        let degraded = jpeg_round_trip(img, qf as u8)?;
        crop_rgb(&degraded, top, left, p, compressed.sample_mut(i));
        crop_rgb(img, top, left, p, pristine.sample_mut(i));
        qfs.push(qf);
        image_indices.push(idx);
        offsets.push((top, left));
    }
    Ok(TrainingBatch {
        compressed,
        pristine,
        qfs,
        image_indices,
        offsets,
    })
}

/// Independent generator for batch `index` of a run seeded with `seed`. Batch
/// contents therefore depend only on `(seed, index)`, never on which worker
/// produced them or in what order.
pub fn batch_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Deterministic stream of training batches.
#[derive(Clone, Debug)]
pub struct BatchStream {
    pub source: TrainingSource,
    pub distortion: DistortionSpec,
    pub patch: PatchSpec,
    pub seed: u64,
}

impl BatchStream {
    pub fn batch(&self, index: u64) -> Result<TrainingBatch> {
        sample_training_batch(&self.source, &self.distortion, &self.patch, &mut batch_rng(self.seed, index))
    }

    /// Produces batches `start..end` using `workers` threads. Worker `w` handles
    /// indices congruent to `w` modulo `workers`; results are re-ordered by index.
    pub fn prefetch(&self, start: u64, end: u64, workers: usize) -> Result<Vec<TrainingBatch>> {
        let workers = workers.max(1);
        let (tx, rx) = mpsc::channel();
        thread::scope(|scope| {
            for w in 0..workers as u64 {
                let tx = tx.clone();
                scope.spawn(move || {
                    let mut i = start + w;
                    while i < end {
                        if tx.send((i, self.batch(i))).is_err() {
                            return;
                        }
                        i += workers as u64;
                    }
                });
            }
        });
        drop(tx);
        let mut ordered = BTreeMap::new();
        for (i, b) in rx {
            ordered.insert(i, b?);
        }
        Ok(ordered.into_values().collect())
    }
}
