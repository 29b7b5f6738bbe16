//! Evaluation harness: restoration benchmarks per quality factor and
//! no-reference quality correlation against subjective scores.

mod nonfinite;
mod plot;
mod report;
pub mod targets;

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

pub use plot::scatter_plot;
pub use report::{
    format_sig9, read_iqa_csv, read_restoration_csv, write_iqa_report, write_quality_csv, write_restoration_report,
    write_run_record,
    RunRecord,
};

use crate::dataio::{distort_jpeg, load_image, CorpusManifest, DistortionType, MosDatabase, Split, CODEC_ID};
use crate::error::{Error, Result};
use crate::metrics::{
    minkowski_pool, pairwise_mean, psnr_b, psnr_mode, ssim_eval, to_luma, ChannelMode, CorrelationReport, PoolingSpec,
    QualityEstimate,
};
use crate::model::{AttentionMapSet, Model, RestorationOutput};
use crate::tensor::Tensor;

/// Anything that maps a compressed `(1, C, H, W)` image to a restoration plus gate maps.
pub trait Restorer: Sync {
    fn restore(&self, image: &Tensor) -> Result<RestorationOutput>;
    fn num_maps(&self) -> usize;
}

impl Restorer for Model {
    fn restore(&self, image: &Tensor) -> Result<RestorationOutput> {
        self.forward(image)
    }

    fn num_maps(&self) -> usize {
        self.config().num_attention_maps()
    }
}

/// Identity restoration with constant gate maps; the restoration-bypass hook.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bypass {
    pub maps: usize,
    pub gate: f32,
}

impl Restorer for Bypass {
    fn restore(&self, image: &Tensor) -> Result<RestorationOutput> {
        let [n, _, h, w] = image.shape();
        let maps = (0..self.maps)
            .map(|i| Tensor::full([n, 1, h.div_ceil(1 << i), w.div_ceil(1 << i)], self.gate))
            .collect();
        Ok(RestorationOutput {
            restored: image.clone(),
            attention: AttentionMapSet { maps },
        })
    }

    fn num_maps(&self) -> usize {
        self.maps
    }
}

/// Restores an image of any size; the result has the input's size and lies in `[0, 1]`.
pub fn restore_image(model: &dyn Restorer, image: &Tensor) -> Result<Tensor> {
    let out = model.restore(image)?.restored.clamp01();
    out.ensure_same_shape(image, "restored image")?;
    Ok(out)
}

/// Minkowski-pools gate map `spec.map_index` of the model's response to `image`.
pub fn predict_quality(model: &dyn Restorer, image: &Tensor, spec: &PoolingSpec, name: &str) -> Result<QualityEstimate> {
    spec.validate(model.num_maps())?;
    let out = model.restore(image)?;
    pool_map(&out.attention, spec, name)
}

fn pool_map(maps: &AttentionMapSet, spec: &PoolingSpec, name: &str) -> Result<QualityEstimate> {
    let map = maps
        .get(spec.map_index)
        .ok_or_else(|| Error::Config(format!("map index {} not produced by the model", spec.map_index)))?;
    Ok(QualityEstimate {
        q: minkowski_pool(map.data(), spec.p)?,
        map_index: spec.map_index,
        p: spec.p,
        image: name.to_string(),
    })
}

/// Applies `f` to every item on `workers` threads and returns results in input order.
pub fn par_map_ordered<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(usize, &T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let (tx, rx) = mpsc::channel();
    thread::scope(|scope| {
        for w in 0..workers {
            let tx = tx.clone();
            let f = &f;
            scope.spawn(move || {
                for i in (w..items.len()).step_by(workers) {
                    if tx.send((i, f(i, &items[i]))).is_err() {
                        return;
                    }
                }
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    for (i, r) in rx {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}

/// Stable identifier of a set of parameters: FNV-1a over names, shapes and values.
pub fn parameter_fingerprint(model: &Model) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for p in model.parameters().iter() {
        eat(p.name.as_bytes());
        for &d in &p.shape {
            eat(&(d as u64).to_le_bytes());
        }
        for v in &p.data {
            eat(&v.to_le_bytes());
        }
    }
    format!("{h:016x}")
}

/// `<directory name>@<fingerprint>` for a checkpoint loaded from `dir`.
pub fn checkpoint_id(dir: &Path, model: &Model) -> String {
    let name = dir
        .canonicalize()
        .unwrap_or_else(|_| dir.to_path_buf())
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    format!("{name}@{}", parameter_fingerprint(model))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint_id: String,
    pub codec_id: String,
    pub channel_mode: ChannelMode,
}

impl ReportMeta {
    pub fn new(checkpoint_id: impl Into<String>, channel_mode: ChannelMode) -> Self {
        ReportMeta {
            checkpoint_id: checkpoint_id.into(),
            codec_id: CODEC_ID.to_string(),
            channel_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub image: Tensor,
}

/// Loads the entries of one corpus split.
pub fn load_corpus_images(manifest: &CorpusManifest, split: Split) -> Result<Vec<NamedImage>> {
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            Ok(NamedImage {
                name: e.path.to_string_lossy().into_owned(),
                image: load_image(&manifest.resolve(e))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorationOptions {
    pub qfs: Vec<u32>,
    pub channel_mode: ChannelMode,
    pub block_size: usize,
    pub workers: usize,
}

impl Default for RestorationOptions {
    fn default() -> Self {
        RestorationOptions {
            qfs: vec![10, 20, 30, 40],
            channel_mode: ChannelMode::RgbMean,
            block_size: 8,
            workers: 1,
        }
    }
}

/// Fidelity of one image against its pristine reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    #[serde(with = "nonfinite")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(with = "nonfinite")]
    pub psnr_b: f64,
}

impl Fidelity {
    pub fn measure(reference: &Tensor, test: &Tensor, mode: ChannelMode, block_size: usize) -> Result<Self> {
        let psnr_b = match mode {
            ChannelMode::RgbMean => psnr_b(reference, test, block_size, 1.0)?,
            ChannelMode::LumaBt601 => psnr_b(&to_luma(reference)?, &to_luma(test)?, block_size, 1.0)?,
        };
        Ok(Fidelity {
            psnr: psnr_mode(reference, test, 1.0, mode)?,
            ssim: ssim_eval(reference, test, mode)?,
            psnr_b,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRestorationRow {
    pub image: String,
    pub qf: u32,
    pub restored: Fidelity,
    pub compressed: Fidelity,
}

/// Per-QF means; `baseline_*` columns compare the compressed input with the original.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorationRow {
    pub qf: u32,
    #[serde(with = "nonfinite")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(with = "nonfinite")]
    pub psnr_b: f64,
    #[serde(with = "nonfinite")]
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    #[serde(with = "nonfinite")]
    pub baseline_psnr_b: f64,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorationReport {
    pub meta: ReportMeta,
    pub block_size: usize,
    pub rows: Vec<RestorationRow>,
    pub per_image: Vec<ImageRestorationRow>,
}

/// Compresses every image at every QF, restores it and measures both versions
/// against the original. Rows are in QF order, per-image rows in corpus order.
pub fn eval_restoration(
    model: &dyn Restorer,
    images: &[NamedImage],
    options: &RestorationOptions,
    meta: ReportMeta,
) -> Result<RestorationReport> {
    if images.is_empty() {
        return Err(Error::Input("restoration benchmark needs at least one image".into()));
    }
    if options.qfs.is_empty() {
        return Err(Error::Config("no quality factors given".into()));
    }
    if let Some(q) = options.qfs.iter().find(|q| !(1..=100).contains(*q)) {
        return Err(Error::Codec(format!("quality factor {q} outside 1..=100")));
    }
    let mode = options.channel_mode;
    let per_image_qf = par_map_ordered(images, options.workers, |_, item| {
        options
            .qfs
            .iter()
            .map(|&qf| {
                let compressed = distort_jpeg(&item.image, qf)?;
                let restored = restore_image(model, &compressed)?;
                Ok(ImageRestorationRow {
                    image: item.name.clone(),
                    qf,
                    restored: Fidelity::measure(&item.image, &restored, mode, options.block_size)?,
                    compressed: Fidelity::measure(&item.image, &compressed, mode, options.block_size)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = options
        .qfs
        .iter()
        .enumerate()
        .map(|(k, &qf)| {
            let col = |f: &dyn Fn(&ImageRestorationRow) -> f64| -> f64 {
                pairwise_mean(&per_image_qf.iter().map(|r| f(&r[k])).collect::<Vec<_>>())
            };
            RestorationRow {
                qf,
                psnr: col(&|r| r.restored.psnr),
                ssim: col(&|r| r.restored.ssim),
                psnr_b: col(&|r| r.restored.psnr_b),
                baseline_psnr: col(&|r| r.compressed.psnr),
                baseline_ssim: col(&|r| r.compressed.ssim),
                baseline_psnr_b: col(&|r| r.compressed.psnr_b),
                images: images.len(),
            }
        })
        .collect();
    let mut per_image = Vec::new();
    for k in 0..options.qfs.len() {
        per_image.extend(per_image_qf.iter().map(|r| r[k].clone()));
    }
    Ok(RestorationReport {
        meta,
        block_size: options.block_size,
        rows,
        per_image,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqaRow {
    pub database: String,
    pub distortion: String,
    pub map_index: usize,
    pub p: f64,
    pub pcc: f64,
    pub srcc: f64,
    pub kcc: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqaSample {
    pub path: PathBuf,
    pub distortion: DistortionType,
    pub raw_score: f64,
    pub oriented_score: f64,
    /// Pooled quality for each evaluated map, in row order.
    pub q: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqaReport {
    pub meta: ReportMeta,
    pub p: f64,
    /// Map index of the primary estimate (first row).
    pub map_index: usize,
    pub orientation_applied: bool,
    pub orientation_note: String,
    pub rows: Vec<IqaRow>,
    pub samples: Vec<IqaSample>,
}

/// Correlation of `Q_{spec.map_index}` with (oriented) subjective scores.
pub fn eval_iqa(
    model: &dyn Restorer,
    db: &MosDatabase,
    spec: &PoolingSpec,
    filter: Option<DistortionType>,
    meta: ReportMeta,
    workers: usize,
) -> Result<IqaReport> {
    eval_iqa_sweep(model, db, spec.p, &[spec.map_index], filter, meta, workers)
}

/// Like [`eval_iqa`] for several gate maps at once (one row per map, the forward
/// pass is shared).
pub fn eval_iqa_sweep(
    model: &dyn Restorer,
    db: &MosDatabase,
    p: f64,
    map_indices: &[usize],
    filter: Option<DistortionType>,
    meta: ReportMeta,
    workers: usize,
) -> Result<IqaReport> {
    let specs: Vec<PoolingSpec> = map_indices.iter().map(|&m| PoolingSpec { p, map_index: m }).collect();
    if specs.is_empty() {
        return Err(Error::Config("no map index given".into()));
    }
    for s in &specs {
        s.validate(model.num_maps())?;
    }
    let records = db.filter(filter);
    if records.len() < 3 {
        return Err(Error::Input(format!(
            "need at least 3 records after filtering, found {}",
            records.len()
        )));
    }
    let missing: Vec<String> = records
        .iter()
        .map(|r| db.resolve(r))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "{} image file(s) missing: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let samples = par_map_ordered(&records, workers, |_, r| {
        let path = db.resolve(r);
        let image = load_image(&path)?;
        let out = model.restore(&image)?;
        let name = r.path.to_string_lossy();
        let q = specs
            .iter()
            .map(|s| pool_map(&out.attention, s, &name).map(|e| e.q))
            .collect::<Result<Vec<_>>>()?;
        Ok(IqaSample {
            path: r.path.clone(),
            distortion: r.distortion,
            raw_score: r.score,
            oriented_score: r.oriented_score(),
            q,
        })
    })?;
    let oriented: Vec<f64> = samples.iter().map(|s| s.oriented_score).collect();
    let distortion = filter.map(|d| d.as_str().to_string()).unwrap_or_else(|| "all".into());
    let rows = specs
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let q: Vec<f64> = samples.iter().map(|x| x.q[k]).collect();
            let c = CorrelationReport::compute(&q, &oriented)?;
            Ok(IqaRow {
                database: db.name.clone(),
                distortion: distortion.clone(),
                map_index: s.map_index,
                p,
                pcc: c.pcc,
                srcc: c.srcc,
                kcc: c.kcc,
                n: c.n_samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let flipped = records.iter().filter(|r| !r.higher_is_better).count();
    let orientation_note = if flipped == 0 {
        "scores used as given (higher is better)".to_string()
    } else {
        format!("{flipped} of {} scores negated because higher_is_better=false", records.len())
    };
    Ok(IqaReport {
        meta,
        p,
        map_index: specs[0].map_index,
        orientation_applied: flipped > 0,
        orientation_note,
        rows,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_parallel_map() {
        let items: Vec<u32> = (0..17).collect();
        let a = par_map_ordered(&items, 1, |i, v| Ok(i as u32 * 10 + v)).unwrap();
        let b = par_map_ordered(&items, 4, |i, v| Ok(i as u32 * 10 + v)).unwrap();
        assert_eq!(a, b);
        let e = par_map_ordered(&items, 3, |i, _| if i == 5 { Err(Error::Input("x".into())) } else { Ok(i) });
        assert!(e.is_err());
    }

    #[test]
    fn bypass_restores_identity_and_constant_quality() {
        let img = Tensor::from_fn([1, 3, 33, 47], |_, c, y, x| ((c + y + x) % 9) as f32 / 9.0);
        let by = Bypass { maps: 3, gate: 0.5 };
        assert_eq!(restore_image(&by, &img).unwrap(), img);
        let q = predict_quality(&by, &img, &PoolingSpec::default(), "x").unwrap();
        assert_eq!(q.q, 0.5);
        assert!(predict_quality(&by, &img, &PoolingSpec { p: 2.0, map_index: 4 }, "x").is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let by = Bypass { maps: 3, gate: 1.0 };
        let r = eval_restoration(&by, &[], &RestorationOptions::default(), ReportMeta::new("x", ChannelMode::RgbMean));
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
