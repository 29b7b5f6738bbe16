//! Subjective-score manifests.
//!
//! CSV, UTF-8, header `path,distortion,level,score,higher_is_better`. `level` may
//! be empty. Relative paths are resolved against the manifest's directory.
//!
//! Distortion vocabulary: `jpeg`, `jpeg2000`, `gaussian_blur`, `white_noise`,
//! `pink_noise`, `fast_fading`, `contrast_change`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionType {
    Jpeg,
    Jpeg2000,
    GaussianBlur,
    WhiteNoise,
    PinkNoise,
    FastFading,
    ContrastChange,
}

impl DistortionType {
    pub const ALL: [DistortionType; 7] = [
        DistortionType::Jpeg,
        DistortionType::Jpeg2000,
        DistortionType::GaussianBlur,
        DistortionType::WhiteNoise,
        DistortionType::PinkNoise,
        DistortionType::FastFading,
        DistortionType::ContrastChange,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionType::Jpeg => "jpeg",
            DistortionType::Jpeg2000 => "jpeg2000",
            DistortionType::GaussianBlur => "gaussian_blur",
            DistortionType::WhiteNoise => "white_noise",
            DistortionType::PinkNoise => "pink_noise",
            DistortionType::FastFading => "fast_fading",
            DistortionType::ContrastChange => "contrast_change",
        }
    }
}

impl fmt::Display for DistortionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistortionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistortionType::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown distortion type `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosRecord {
    pub path: PathBuf,
    pub distortion: DistortionType,
    pub level: Option<f64>,
    pub score: f64,
    pub higher_is_better: bool,
}

impl MosRecord {
    /// Score flipped so that larger always means better quality.
    pub fn oriented_score(&self) -> f64 {
        if self.higher_is_better {
            self.score
        } else {
            -self.score
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MosDatabase {
    pub name: String,
    /// Directory that relative record paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<MosRecord>,
}

#[derive(Debug, Deserialize)]
struct RawRow {
    path: String,
    distortion: String,
    level: String,
    score: String,
    higher_is_better: String,
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl MosDatabase {
    pub fn resolve(&self, record: &MosRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    pub fn filter(&self, distortion: Option<DistortionType>) -> Vec<&MosRecord> {
        self.records
            .iter()
            .filter(|r| distortion.is_none_or(|d| r.distortion == d))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["path", "distortion", "level", "score", "higher_is_better"])?;
        for r in &self.records {
            let level = r.level.map(|l| l.to_string()).unwrap_or_default();
            w.write_record([
                r.path.to_string_lossy().as_ref(),
                r.distortion.as_str(),
                level.as_str(),
                r.score.to_string().as_str(),
                if r.higher_is_better { "true" } else { "false" },
            ])?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Reads and validates a MOS manifest.
pub fn load_mos_manifest(path: &Path) -> Result<MosDatabase> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let expected = ["path", "distortion", "level", "score", "higher_is_better"];
    if headers.iter().map(str::trim).collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must be `{}`", expected.join(",")),
        });
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let parse_err = |message: String| Error::Parse { line, message };
        let raw: RawRow = row.deserialize(Some(&headers)).map_err(|e| parse_err(e.to_string()))?;
        if raw.path.trim().is_empty() {
            return Err(parse_err("missing path".into()));
        }
        let score: f64 = raw
            .score
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("score `{}` is not a number", raw.score)))?;
        if !score.is_finite() {
            return Err(parse_err(format!("score `{}` is not finite", raw.score)));
        }
        let level = match raw.level.trim() {
            "" => None,
            s => Some(
                s.parse::<f64>()
                    .map_err(|_| parse_err(format!("level `{s}` is not a number")))?,
            ),
        };
        let higher_is_better = parse_bool(&raw.higher_is_better)
            .ok_or_else(|| parse_err(format!("higher_is_better `{}` is not a boolean", raw.higher_is_better)))?;
        if raw.distortion.trim().is_empty() {
            return Err(parse_err("missing distortion".into()));
        }
        let distortion: DistortionType = raw.distortion.trim().parse().map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
            e => e,
        })?;
        records.push(MosRecord {
            path: PathBuf::from(raw.path.trim()),
            distortion,
            level,
            score,
            higher_is_better,
        });
    }
    Ok(MosDatabase {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("db.csv");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let db = load_mos_manifest(&write(dir.path(), "path,distortion,level,score,higher_is_better\n")).unwrap();
        assert!(db.records.is_empty());
        assert_eq!(db.name, "db");
    }

    #[test]
    fn non_numeric_score_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "path,distortion,level,score,higher_is_better\na.png,jpeg,10,50.0,true\nb.png,jpeg,,abc,true\n";
        match load_mos_manifest(&write(dir.path(), body)).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_distortion_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let body = "path,distortion,level,score,higher_is_better\na.png,bitcrush,,1,true\n";
        assert!(matches!(load_mos_manifest(&write(dir.path(), body)), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_field_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let body = "path,distortion,level,score,higher_is_better\na.png,jpeg,,1\n";
        assert!(matches!(load_mos_manifest(&write(dir.path(), body)), Err(Error::Parse { line: 2, .. })));
        let body = "path,distortion,level,score,higher_is_better\n,jpeg,,1,true\n";
        assert!(matches!(load_mos_manifest(&write(dir.path(), body)), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn orientation() {
        let r = MosRecord {
            path: "x".into(),
            distortion: DistortionType::Jpeg,
            level: None,
            score: 30.0,
            higher_is_better: false,
        };
        assert_eq!(r.oriented_score(), -30.0);
    }
}
