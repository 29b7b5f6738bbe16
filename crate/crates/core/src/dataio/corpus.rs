//! Pristine-image corpus manifests (JSON).

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::imageio::is_image_file;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    /// Relative entry paths are resolved against this directory.
    pub root: PathBuf,
    pub seed: u64,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn resolve(&self, entry: &CorpusEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn paths(&self, split: Split) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| self.resolve(e))
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut m: CorpusManifest = serde_json::from_str(&text)?;
        if m.root.is_relative() {
            if let Some(parent) = path.parent() {
                m.root = parent.join(&m.root);
            }
        }
        Ok(m)
    }
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if is_image_file(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Number of items per split; any rounding remainder goes to the test split.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = ((fractions.0 * n as f64).round() as usize).min(n);
    let val = ((fractions.1 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Scans `root_dirs` recursively, keeps images that decode, shuffles them with
/// `seed` and assigns train/val/test splits in the given proportions.
pub fn build_corpus_manifest(
    name: &str,
    root_dirs: &[PathBuf],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusManifest> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let root = root_dirs
        .first()
        .cloned()
        .ok_or_else(|| Error::Config("no corpus directories given".into()))?;
    let mut files = Vec::new();
    for dir in root_dirs {
        collect_images(dir, &mut files)?;
    }
    files.sort();
    let mut usable = Vec::with_capacity(files.len());
    for f in files {
        match image::ImageReader::open(&f).and_then(|r| r.with_guessed_format()) {
            Ok(reader) => match reader.decode() {
                Ok(_) => usable.push(f),
                Err(e) => warn!("skipping {}: {e}", f.display()),
            },
            Err(e) => warn!("skipping {}: {e}", f.display()),
        }
    }
    if usable.is_empty() {
        return Err(Error::Input(format!("no decodable images under {root_dirs:?}")));
    }
    usable.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = split_sizes(usable.len(), fractions);
    let entries = usable
        .into_iter()
        .enumerate()
        .map(|(i, path)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            let path = path.strip_prefix(&root).map(Path::to_path_buf).unwrap_or(path);
            CorpusEntry { path, split }
        })
        .collect();
    Ok(CorpusManifest {
        name: name.to_string(),
        root,
        seed,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(10, (0.8, 0.1, 0.1)), (8, 1, 1));
        assert_eq!(split_sizes(3, (1.0, 0.0, 0.0)), (3, 0, 0));
        assert_eq!(split_sizes(7, (0.5, 0.25, 0.25)), (4, 2, 1));
    }

    #[test]
    fn bad_fractions_rejected() {
        let err = build_corpus_manifest("x", &[PathBuf::from(".")], (0.5, 0.2, 0.2), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
