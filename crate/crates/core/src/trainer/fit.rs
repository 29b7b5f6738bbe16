//! Run orchestration: batch stream, CSV logs, validation and periodic checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::{load_checkpoint, lr_at_step, save_checkpoint, train_step, OptimizerConfig, TrainState};
use crate::dataio::{
    crop_window, distort_jpeg, load_image, BatchStream, CorpusManifest, DistortionSpec, PatchSpec, Split,
    TrainingSource,
};
use crate::error::{Error, Result};
use crate::metrics::{pairwise_mean, psnr};
use crate::model::{Model, ModelConfig};
use crate::objective::{total_loss, SsimParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunDataConfig {
    /// Corpus manifest (JSON); relative to the run config file when loaded from disk.
    pub corpus: PathBuf,
    pub distortion: DistortionSpec,
    pub patch: PatchSpec,
    pub seed: u64,
    /// Threads producing batches; results do not depend on this.
    pub workers: usize,
    pub val_qfs: Vec<u32>,
    pub val_max_images: usize,
    /// Validation images are centre-cropped to at most this size.
    pub val_crop: usize,
}

impl Default for RunDataConfig {
    fn default() -> Self {
        RunDataConfig {
            corpus: PathBuf::from("corpus.json"),
            distortion: DistortionSpec::default(),
            patch: PatchSpec::default(),
            seed: 0,
            workers: 1,
            val_qfs: vec![10, 30],
            val_max_images: 8,
            val_crop: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoggingConfig {
    pub log_interval: u64,
    /// 0 disables periodic checkpoints (a final one is always written).
    pub checkpoint_interval: u64,
    /// 0 disables validation.
    pub val_interval: u64,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        LoggingConfig {
            log_interval: 100,
            checkpoint_interval: 10_000,
            val_interval: 1_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub init_seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: SsimParams,
    pub data: RunDataConfig,
    pub logging: LoggingConfig,
    /// Checkpoint directory to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_dir: PathBuf::from("runs/default"),
            init_seed: 0,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: SsimParams::default(),
            data: RunDataConfig::default(),
            logging: LoggingConfig::default(),
            resume: None,
        }
    }
}

impl RunConfig {
    /// Reads a JSON run config; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.run_dir);
        fix(&mut cfg.data.corpus);
        if let Some(r) = cfg.resume.as_mut() {
            fix(r);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.data.distortion.validate()?;
        if self.logging.log_interval == 0 {
            return Err(Error::Config("log_interval must be at least 1".into()));
        }
        if self.data.patch.patch_size < self.loss.window_size || self.data.patch.batch_size == 0 {
            return Err(Error::Config(format!(
                "patch size {} must cover the SSIM window and batch size must be positive",
                self.data.patch.patch_size
            )));
        }
        if self.data.val_qfs.iter().any(|q| !(1..=100).contains(q)) {
            return Err(Error::Config(format!("validation QFs {:?} outside 1..=100", self.data.val_qfs)));
        }
        Ok(())
    }
}

/// One validation measurement (means over the validation images).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: u64,
    pub qf: u32,
    pub images: usize,
    pub psnr_compressed: f64,
    pub psnr_restored: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub final_step: u64,
    pub steps_run: u64,
    /// Mean training loss over the first logged interval of this invocation.
    pub first_logged_loss: Option<f64>,
    pub last_logged_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub train_log: PathBuf,
    pub val_log: PathBuf,
    pub last_checkpoint: PathBuf,
    pub seconds: f64,
}

pub struct Trainer {
    cfg: RunConfig,
    stream: BatchStream,
    /// Pristine validation images and their compressed versions per validation QF.
    val: Vec<(Tensor, Vec<Tensor>)>,
    state: TrainState,
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating run directory {}", dir.display()), e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"ok").map_err(|e| Error::io(format!("run directory {} is not writable", dir.display()), e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(format!("cleaning {}", probe.display()), e))
}

fn center_crop(img: Tensor, size: usize) -> Tensor {
    let (h, w) = (img.height(), img.width());
    let (ch, cw) = (h.min(size), w.min(size));
    if (ch, cw) == (h, w) {
        return img;
    }
    crop_window(&img, (h - ch) / 2, (w - cw) / 2, ch, cw)
}

impl Trainer {
    /// Loads the corpus named in `cfg` and prepares (or resumes) the training state.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        ensure_writable(&cfg.run_dir)?;
        let manifest = CorpusManifest::load(&cfg.data.corpus)?;
        let source = TrainingSource::from_manifest(&manifest, Split::Train, &cfg.data.patch)?;
        let val = manifest
            .paths(Split::Val)
            .into_iter()
            .take(cfg.data.val_max_images)
            .map(|p| load_image(&p))
            .collect::<Result<Vec<_>>>()?;
        Self::with_source(cfg, source, val)
    }

    /// Like [`Trainer::new`] with in-memory training and validation images.
    pub fn with_source(cfg: RunConfig, source: TrainingSource, val_images: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        ensure_writable(&cfg.run_dir)?;
        let state = match &cfg.resume {
            Some(dir) => {
                let (state, _) = load_checkpoint(dir)?;
                if state.model.config() != &cfg.model {
                    return Err(Error::Config(format!(
                        "checkpoint {} was trained with a different model configuration",
                        dir.display()
                    )));
                }
                if state.data_seed != cfg.data.seed {
                    return Err(Error::Config(format!(
                        "checkpoint data seed {} differs from the configured {}",
                        state.data_seed, cfg.data.seed
                    )));
                }
                info!("resuming from {} at step {}", dir.display(), state.step);
                state
            }
            None => TrainState::new(Model::build(cfg.model.clone(), cfg.init_seed)?, cfg.init_seed, cfg.data.seed),
        };
        let mut val = Vec::with_capacity(val_images.len());
        for img in val_images {
            let img = center_crop(img, cfg.data.val_crop.max(cfg.loss.window_size));
            let compressed = cfg
                .data
                .val_qfs
                .iter()
                .map(|&q| distort_jpeg(&img, q))
                .collect::<Result<Vec<_>>>()?;
            val.push((img, compressed));
        }
        let stream = BatchStream {
            source,
            distortion: cfg.data.distortion.clone(),
            patch: cfg.data.patch.clone(),
            seed: cfg.data.seed,
        };
        Ok(Trainer { cfg, stream, val, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.cfg.run_dir.join("train.csv")
    }

    pub fn val_log_path(&self) -> PathBuf {
        self.cfg.run_dir.join("val.csv")
    }

    pub fn checkpoint_dir(&self, step: u64) -> PathBuf {
        self.cfg.run_dir.join("checkpoints").join(format!("step_{step:08}"))
    }

    /// Restores every validation image at every validation QF with the current model.
    pub fn validate(&self) -> Result<Vec<ValRecord>> {
        let model = &self.state.model;
        let mut out = Vec::new();
        for (qi, &qf) in self.cfg.data.val_qfs.iter().enumerate() {
            let (mut pc, mut pr, mut ls) = (Vec::new(), Vec::new(), Vec::new());
            for (pristine, compressed) in &self.val {
                let restored = model.forward(&compressed[qi])?.restored.clamp01();
                pc.push(psnr(pristine, &compressed[qi], 1.0)?);
                pr.push(psnr(pristine, &restored, 1.0)?);
                ls.push(total_loss(&restored, pristine, &self.cfg.loss)?.total);
            }
            if ls.is_empty() {
                continue;
            }
            out.push(ValRecord {
                step: self.state.step,
                qf,
                images: ls.len(),
                psnr_compressed: pairwise_mean(&pc),
                psnr_restored: pairwise_mean(&pr),
                loss: pairwise_mean(&ls),
            });
        }
        Ok(out)
    }

    fn prepare_logs(&self) -> Result<()> {
        let step = self.state.step;
        let train_path = self.train_log_path();
        let val_path = self.val_log_path();
        let keep = |path: &Path, header: &[&str]| -> Result<()> {
            let mut rows = Vec::new();
            if step > 0 && path.exists() {
                let mut r = csv::Reader::from_path(path)?;
                for rec in r.records() {
                    let rec = rec?;
                    let s: u64 = rec.get(0).and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
                    if s <= step {
                        rows.push(rec);
                    }
                }
            }
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(header)?;
            for r in rows {
                w.write_record(&r)?;
            }
            w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
        };
        keep(&train_path, &["step", "lr", "total", "l1", "ssim_term"])?;
        keep(&val_path, &["step", "qf", "images", "psnr_compressed", "psnr_restored", "loss"])
    }

    fn append(path: &Path, row: &[String]) -> Result<()> {
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(row)?;
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    fn checkpoint(&self) -> Result<PathBuf> {
        let dir = self.checkpoint_dir(self.state.step);
        save_checkpoint(&self.state, &self.cfg.optimizer, &dir)?;
        let latest = self.cfg.run_dir.join("checkpoints").join("latest");
        fs::write(&latest, format!("{}\n", dir.file_name().unwrap().to_string_lossy()))
            .map_err(|e| Error::io(format!("writing {}", latest.display()), e))?;
        Ok(dir)
    }

    /// Trains until `total_steps`.
    pub fn run(&mut self) -> Result<FitSummary> {
        self.run_until(self.cfg.optimizer.total_steps)
    }

    /// Trains until `stop` completed steps (capped at `total_steps`) and writes a
    /// checkpoint there. Training-log rows hold means over each logging interval;
    /// after a resume the first interval covers only the steps run since then.
    pub fn run_until(&mut self, stop: u64) -> Result<FitSummary> {
        let stop = stop.min(self.cfg.optimizer.total_steps);
        let started = Instant::now();
        let start_step = self.state.step;
        self.prepare_logs()?;
        let (log_iv, ckpt_iv, val_iv) = (
            self.cfg.logging.log_interval,
            self.cfg.logging.checkpoint_interval,
            self.cfg.logging.val_interval,
        );
        let workers = self.cfg.data.workers.max(1) as u64;
        let mut acc = [0f64; 3];
        let mut acc_n = 0u64;
        let (mut first, mut last) = (None, None);
        let mut last_checkpoint = None;
        let mut queue = std::collections::VecDeque::new();
        while self.state.step < stop {
            let step = self.state.step;
            if queue.is_empty() {
                let end = (step + workers).min(stop);
                queue.extend(self.stream.prefetch(step, end, workers as usize)?);
            }
            let batch = queue.pop_front().expect("prefetched");
            let label = format!("#{step} [{}]", batch.describe());
            let report = train_step(
                &mut self.state,
                &self.cfg.optimizer,
                &self.cfg.loss,
                &batch.compressed,
                &batch.pristine,
                &label,
            )?;
            acc[0] += report.total;
            acc[1] += report.l1;
            acc[2] += report.ssim_term;
            acc_n += 1;
            let done = self.state.step;
            if done % log_iv == 0 {
                let n = acc_n as f64;
                let mean = [acc[0] / n, acc[1] / n, acc[2] / n];
                Self::append(
                    &self.train_log_path(),
                    &[
                        done.to_string(),
                        lr_at_step(done - 1, &self.cfg.optimizer).to_string(),
                        mean[0].to_string(),
                        mean[1].to_string(),
                        mean[2].to_string(),
                    ],
                )?;
                info!("step {done}: loss {:.5} (l1 {:.5}, 1-ssim {:.5})", mean[0], mean[1], mean[2]);
                first.get_or_insert(mean[0]);
                last = Some(mean[0]);
                acc = [0.0; 3];
                acc_n = 0;
            }
            if val_iv > 0 && done % val_iv == 0 && !self.val.is_empty() {
                let records = self.validate()?;
                for r in &records {
                    Self::append(
                        &self.val_log_path(),
                        &[
                            r.step.to_string(),
                            r.qf.to_string(),
                            r.images.to_string(),
                            r.psnr_compressed.to_string(),
                            r.psnr_restored.to_string(),
                            r.loss.to_string(),
                        ],
                    )?;
                    info!(
                        "validation step {done} qf {}: psnr {:.3} -> {:.3} dB",
                        r.qf, r.psnr_compressed, r.psnr_restored
                    );
                }
                let mean_loss = pairwise_mean(&records.iter().map(|r| r.loss).collect::<Vec<_>>());
                if self.state.best_val_loss.is_none_or(|b| mean_loss < b) {
                    self.state.best_val_loss = Some(mean_loss);
                }
            }
            if ckpt_iv > 0 && done % ckpt_iv == 0 {
                last_checkpoint = Some(self.checkpoint()?);
            }
        }
        let final_step = self.state.step;
        let last_checkpoint = match last_checkpoint {
            Some(d) if final_step % ckpt_iv.max(1) == 0 && ckpt_iv > 0 => d,
            _ => self.checkpoint()?,
        };
        Ok(FitSummary {
            final_step,
            steps_run: final_step - start_step,
            first_logged_loss: first,
            last_logged_loss: last,
            best_val_loss: self.state.best_val_loss,
            train_log: self.train_log_path(),
            val_log: self.val_log_path(),
            last_checkpoint,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Trains a model as described by `cfg` (loading the corpus manifest it names).
pub fn fit(cfg: RunConfig) -> Result<FitSummary> {
    Trainer::new(cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic_image;

    fn run_config(dir: &Path, total: u64) -> RunConfig {
        RunConfig {
            run_dir: dir.to_path_buf(),
            init_seed: 1,
            model: ModelConfig {
                base_channels: 4,
                num_scales: 2,
                res_blocks_per_stage: 1,
                attention_channels: 2,
                attention_depth: 1,
                ..Default::default()
            },
            optimizer: OptimizerConfig { total_steps: total, ..Default::default() },
            loss: SsimParams { window_size: 7, ..Default::default() },
            data: RunDataConfig {
                patch: PatchSpec { patch_size: 16, batch_size: 2 },
                seed: 5,
                val_qfs: vec![10],
                val_crop: 24,
                ..Default::default()
            },
            logging: LoggingConfig { log_interval: 3, checkpoint_interval: 4, val_interval: 5 },
            resume: None,
        }
    }

    fn source(cfg: &RunConfig) -> TrainingSource {
        let imgs = (0..3).map(|i| (PathBuf::from(format!("{i}")), synthetic_image(i, 32, 32))).collect();
        TrainingSource::from_images(imgs, &cfg.data.patch).unwrap()
    }

    fn val() -> Vec<Tensor> {
        vec![crate::dataio::rgb_to_tensor(&synthetic_image(99, 30, 28))]
    }

    #[test]
    fn logs_and_checkpoints() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = run_config(tmp.path(), 10);
        let mut t = Trainer::with_source(cfg.clone(), source(&cfg), val()).unwrap();
        let s = t.run().unwrap();
        assert_eq!(s.final_step, 10);
        let rows = csv::Reader::from_path(&s.train_log).unwrap().records().count();
        assert_eq!(rows, 10 / 3);
        let val_rows = csv::Reader::from_path(&s.val_log).unwrap().records().count();
        assert_eq!(val_rows, 2);
        for step in [4, 8, 10] {
            assert!(t.checkpoint_dir(step).join("meta.json").exists());
        }
        assert_eq!(s.last_checkpoint, t.checkpoint_dir(10));
        assert!(s.best_val_loss.is_some());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg_a = run_config(&tmp.path().join("a"), 9);
        let mut a = Trainer::with_source(cfg_a.clone(), source(&cfg_a), val()).unwrap();
        a.run().unwrap();

        let cfg_b = run_config(&tmp.path().join("b"), 9);
        let mut b = Trainer::with_source(cfg_b.clone(), source(&cfg_b), val()).unwrap();
        let mid = b.run_until(6).unwrap();
        drop(b);
        let cfg_c = RunConfig { resume: Some(mid.last_checkpoint), ..cfg_b.clone() };
        let mut c = Trainer::with_source(cfg_c.clone(), source(&cfg_c), val()).unwrap();
        c.run().unwrap();
        assert!(a.state().bitwise_eq(c.state()));
        let log = |d: &Path| fs::read_to_string(d.join("train.csv")).unwrap();
        assert_eq!(log(&tmp.path().join("a")), log(&tmp.path().join("b")));
    }

    #[test]
    fn unwritable_run_dir_fails_before_training() {
        let tmp = tempfile::tempdir().unwrap();
        let blocker = tmp.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let cfg = run_config(&blocker.join("run"), 5);
        assert!(matches!(Trainer::with_source(cfg.clone(), source(&cfg), val()), Err(Error::Io { .. })));
    }
}
