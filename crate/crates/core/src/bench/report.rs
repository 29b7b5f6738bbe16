//! CSV / JSON / PNG report emission and run provenance records.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plot::scatter_plot;
use super::{IqaReport, IqaRow, RestorationReport, RestorationRow};
use crate::error::{Error, Result};
use crate::metrics::QualityEstimate;

/// Nine significant digits; `inf`, `-inf` and `NaN` for non-finite values.
pub fn format_sig9(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..=15).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("`{s}` is not a number"),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn finish(w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    let mut w = w;
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

const RESTORATION_HEADER: [&str; 8] = [
    "qf",
    "psnr",
    "ssim",
    "psnr_b",
    "baseline_psnr",
    "baseline_ssim",
    "baseline_psnr_b",
    "images",
];

/// Writes `restoration.csv`, `restoration_images.csv` and `restoration.json` into `dir`.
pub fn write_restoration_report(report: &RestorationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let csv_path = dir.join("restoration.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(RESTORATION_HEADER)?;
    for r in &report.rows {
        w.write_record([
            r.qf.to_string(),
            format_sig9(r.psnr),
            format_sig9(r.ssim),
            format_sig9(r.psnr_b),
            format_sig9(r.baseline_psnr),
            format_sig9(r.baseline_ssim),
            format_sig9(r.baseline_psnr_b),
            r.images.to_string(),
        ])?;
    }
    finish(w, &csv_path)?;

    let detail_path = dir.join("restoration_images.csv");
    let mut w = csv::Writer::from_path(&detail_path)?;
    w.write_record([
        "image",
        "qf",
        "psnr",
        "ssim",
        "psnr_b",
        "baseline_psnr",
        "baseline_ssim",
        "baseline_psnr_b",
    ])?;
    for r in &report.per_image {
        w.write_record([
            r.image.clone(),
            r.qf.to_string(),
            format_sig9(r.restored.psnr),
            format_sig9(r.restored.ssim),
            format_sig9(r.restored.psnr_b),
            format_sig9(r.compressed.psnr),
            format_sig9(r.compressed.ssim),
            format_sig9(r.compressed.psnr_b),
        ])?;
    }
    finish(w, &detail_path)?;

    let json_path = dir.join("restoration.json");
    write_json(&json_path, report)?;
    Ok(vec![csv_path, detail_path, json_path])
}

pub fn read_restoration_csv(path: &Path) -> Result<Vec<RestorationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != RESTORATION_HEADER.len() {
            return Err(Error::Parse { line, message: format!("expected {} fields", RESTORATION_HEADER.len()) });
        }
        let f = |k: usize| parse_f64(&rec[k], line);
        rows.push(RestorationRow {
            qf: f(0)? as u32,
            psnr: f(1)?,
            ssim: f(2)?,
            psnr_b: f(3)?,
            baseline_psnr: f(4)?,
            baseline_ssim: f(5)?,
            baseline_psnr_b: f(6)?,
            images: f(7)? as usize,
        });
    }
    Ok(rows)
}

const IQA_HEADER: [&str; 8] = ["database", "distortion", "map_index", "p", "pcc", "srcc", "kcc", "n"];

fn file_stem_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Writes `iqa.csv`, `iqa_samples.csv`, `iqa.json` and one scatter plot of
/// quality versus oriented score per row into `dir`.
pub fn write_iqa_report(report: &IqaReport, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let csv_path = dir.join("iqa.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(IQA_HEADER)?;
    for r in &report.rows {
        w.write_record([
            r.database.clone(),
            r.distortion.clone(),
            r.map_index.to_string(),
            format_sig9(r.p),
            format_sig9(r.pcc),
            format_sig9(r.srcc),
            format_sig9(r.kcc),
            r.n.to_string(),
        ])?;
    }
    finish(w, &csv_path)?;

    let samples_path = dir.join("iqa_samples.csv");
    let mut w = csv::Writer::from_path(&samples_path)?;
    let mut header = vec!["path".to_string(), "distortion".into(), "raw_score".into(), "oriented_score".into()];
    header.extend(report.rows.iter().map(|r| format!("q{}", r.map_index)));
    w.write_record(&header)?;
    for s in &report.samples {
        let mut rec = vec![
            s.path.to_string_lossy().into_owned(),
            s.distortion.as_str().to_string(),
            format_sig9(s.raw_score),
            format_sig9(s.oriented_score),
        ];
        rec.extend(s.q.iter().map(|&q| format_sig9(q)));
        w.write_record(&rec)?;
    }
    finish(w, &samples_path)?;

    let json_path = dir.join("iqa.json");
    write_json(&json_path, report)?;
    let mut out = vec![csv_path, samples_path, json_path];
    let ys: Vec<f64> = report.samples.iter().map(|s| s.oriented_score).collect();
    for (k, row) in report.rows.iter().enumerate() {
        let xs: Vec<f64> = report.samples.iter().map(|s| s.q[k]).collect();
        let path = dir.join(format!(
            "scatter_{}_{}_map{}.png",
            file_stem_safe(&row.database),
            file_stem_safe(&row.distortion),
            row.map_index
        ));
        scatter_plot(&xs, &ys, &path)?;
        out.push(path);
    }
    Ok(out)
}

pub fn read_iqa_csv(path: &Path) -> Result<Vec<IqaRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != IQA_HEADER.len() {
            return Err(Error::Parse { line, message: format!("expected {} fields", IQA_HEADER.len()) });
        }
        let f = |k: usize| parse_f64(&rec[k], line);
        rows.push(IqaRow {
            database: rec[0].to_string(),
            distortion: rec[1].to_string(),
            map_index: f(2)? as usize,
            p: f(3)?,
            pcc: f(4)?,
            srcc: f(5)?,
            kcc: f(6)?,
            n: f(7)? as usize,
        });
    }
    Ok(rows)
}

/// Writes `image,map_index,p,q` rows.
pub fn write_quality_csv(estimates: &[QualityEstimate], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image", "map_index", "p", "q"])?;
    for e in estimates {
        w.write_record([e.image.clone(), e.map_index.to_string(), format_sig9(e.p), format_sig9(e.q)])?;
    }
    finish(w, path)
}

/// Provenance of one tool invocation, written as `run.json` in its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub checkpoint_id: Option<String>,
    pub codec_id: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

pub fn write_run_record(dir: &Path, record: &RunRecord) -> Result<PathBuf> {
    create_dir(dir)?;
    let path = dir.join("run.json");
    write_json(&path, record)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(27.25), "27.25");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(-123456.789012), "-123456.789");
        assert_eq!(format_sig9(f64::INFINITY), "inf");
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.5e-9), "1.50000000e-9");
        for v in [0.803, 26.9, -0.895, 1e-7 / 3.0, 9.9999999999] {
            let back: f64 = format_sig9(v).parse().unwrap();
            assert!(((back - v) / v).abs() <= 5e-9, "{v} -> {back}");
        }
    }
}
