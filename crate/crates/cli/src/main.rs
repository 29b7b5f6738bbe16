use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use qairn::bench::{
    checkpoint_id, eval_iqa_sweep, eval_restoration, load_corpus_images, predict_quality, restore_image,
    write_iqa_report, write_quality_csv, write_restoration_report, write_run_record, ReportMeta, RestorationOptions, RunRecord,
};
use qairn::dataio::{
    build_corpus_manifest, is_image_file, load_image, load_mos_manifest, save_png, CorpusManifest, DistortionType,
    Split, CODEC_ID,
};
use qairn::metrics::{psnr_b, psnr_mode, ssim_eval, ChannelMode, PoolingSpec};
use qairn::trainer::{load_model, RunConfig, Trainer};
use qairn::Model;

#[derive(Parser)]
#[command(name = "qairn", version, about = "JPEG artifact removal with quality-attention maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to resume from (overrides the config's `resume`).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps (default: the configured total); a
        /// value above the configured total extends the run.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Restore JPEG-compressed images.
    Restore {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Estimate image quality by pooling one gate map.
    Assess {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        map: usize,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        /// Directory for `quality.csv` and `run.json`; results are always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark restoration on a corpus split at several quality factors.
    EvalRestoration {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40")]
        qfs: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "rgb_mean")]
        channel_mode: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Correlate pooled quality with subjective scores.
    EvalIqa {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        mos: PathBuf,
        /// Distortion type to keep, or `all`.
        #[arg(long, default_value = "all")]
        distortion: String,
        #[arg(long)]
        out: PathBuf,
        /// Gate maps to evaluate (the first is the primary estimate).
        #[arg(long, value_delimiter = ',', default_value = "2")]
        map: Vec<usize>,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Full-reference metrics between two images.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "rgb_mean")]
        channel_mode: String,
        #[arg(long, default_value_t = 8)]
        block: usize,
    },
    /// Scan image directories into a corpus manifest with train/val/test splits.
    BuildCorpus {
        #[arg(long, required = true, num_args = 1..)]
        root: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "corpus")]
        name: String,
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Replace every gate with this constant (diagnostics).
    #[arg(long)]
    gate_override: Option<f32>,
}

impl ModelArgs {
    fn load(&self) -> Result<(Model, String)> {
        let model = load_model(&self.ckpt)
            .with_context(|| format!("loading checkpoint {}", self.ckpt.display()))?
            .with_gate_override(self.gate_override)?;
        let id = checkpoint_id(&self.ckpt, &model);
        Ok((model, id))
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn images_in(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut out: Vec<PathBuf> = std::fs::read_dir(input)
            .with_context(|| format!("listing {}", input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        out.sort();
        if out.is_empty() {
            bail!(qairn::Error::Input(format!("no images in {}", input.display())));
        }
        Ok(out)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

fn split_from(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!(qairn::Error::Config(format!("unknown split `{other}`"))),
    })
}

struct Provenance {
    command: &'static str,
    started: u64,
    checkpoint: Option<String>,
}

impl Provenance {
    fn start(command: &'static str) -> Self {
        Provenance { command, started: now(), checkpoint: None }
    }

    fn finish(self, dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        let record = RunRecord {
            tool: "qairn".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            args: std::env::args().skip(1).collect(),
            checkpoint_id: self.checkpoint,
            codec_id: CODEC_ID.into(),
            started_unix: self.started,
            finished_unix: now(),
            outputs,
        };
        write_run_record(dir, &record)?;
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, steps } => {
            let prov = Provenance::start("train");
            let mut cfg = RunConfig::load(&config)?;
            if resume.is_some() {
                cfg.resume = resume;
            }
            if let Some(s) = steps {
                cfg.optimizer.total_steps = cfg.optimizer.total_steps.max(s);
            }
            let run_dir = cfg.run_dir.clone();
            let mut trainer = Trainer::new(cfg)?;
            let summary = match steps {
                Some(s) => trainer.run_until(s)?,
                None => trainer.run()?,
            };
            println!(
                "trained to step {} in {:.1}s; last checkpoint {}",
                summary.final_step,
                summary.seconds,
                summary.last_checkpoint.display()
            );
            prov.finish(&run_dir, vec![summary.train_log, summary.val_log, summary.last_checkpoint])
        }
        Command::Restore { model, input, output } => {
            let mut prov = Provenance::start("restore");
            let (net, id) = model.load()?;
            prov.checkpoint = Some(id);
            std::fs::create_dir_all(&output).with_context(|| format!("creating {}", output.display()))?;
            let mut outputs = Vec::new();
            for path in images_in(&input)? {
                let restored = restore_image(&net, &load_image(&path)?)?;
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let dst = output.join(format!("{stem}.png"));
                save_png(&restored, &dst)?;
                info!("{} -> {}", path.display(), dst.display());
                outputs.push(dst);
            }
            println!("restored {} image(s) into {}", outputs.len(), output.display());
            prov.finish(&output, outputs)
        }
        Command::Assess { model, input, map, p, out } => {
            let mut prov = Provenance::start("assess");
            let (net, id) = model.load()?;
            prov.checkpoint = Some(id);
            let spec = PoolingSpec { p, map_index: map };
            let mut rows = Vec::new();
            for path in images_in(&input)? {
                let est = predict_quality(&net, &load_image(&path)?, &spec, &path.to_string_lossy())?;
                println!("{}\t{}", est.image, qairn::bench::format_sig9(est.q));
                rows.push(est);
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                let path = dir.join("quality.csv");
                write_quality_csv(&rows, &path)?;
                prov.finish(&dir, vec![path])?;
            }
            Ok(())
        }
        Command::EvalRestoration { model, corpus, qfs, out, split, channel_mode, workers } => {
            let mut prov = Provenance::start("eval-restoration");
            let (net, id) = model.load()?;
            prov.checkpoint = Some(id.clone());
            let manifest = CorpusManifest::load(&corpus)?;
            let images = load_corpus_images(&manifest, split_from(&split)?)?;
            let mode: ChannelMode = channel_mode.parse()?;
            let options = RestorationOptions { qfs, channel_mode: mode, workers, ..Default::default() };
            let report = eval_restoration(&net, &images, &options, ReportMeta::new(id, mode))?;
            for r in &report.rows {
                println!(
                    "qf {:>3}: psnr {:.3} (compressed {:.3})  ssim {:.4} ({:.4})  psnr-b {:.3} ({:.3})  n={}",
                    r.qf, r.psnr, r.baseline_psnr, r.ssim, r.baseline_ssim, r.psnr_b, r.baseline_psnr_b, r.images
                );
            }
            let outputs = write_restoration_report(&report, &out)?;
            prov.finish(&out, outputs)
        }
        Command::EvalIqa { model, mos, distortion, out, map, p, workers } => {
            let mut prov = Provenance::start("eval-iqa");
            let (net, id) = model.load()?;
            prov.checkpoint = Some(id.clone());
            let db = load_mos_manifest(&mos)?;
            let filter = match distortion.as_str() {
                "all" => None,
                d => Some(d.parse::<DistortionType>()?),
            };
            let report = eval_iqa_sweep(&net, &db, p, &map, filter, ReportMeta::new(id, ChannelMode::RgbMean), workers)?;
            for r in &report.rows {
                println!(
                    "{} / {} / Q{} (p={}): pcc {:.3} srcc {:.3} kcc {:.3} n={}",
                    r.database, r.distortion, r.map_index, r.p, r.pcc, r.srcc, r.kcc, r.n
                );
            }
            println!("{}", report.orientation_note);
            let outputs = write_iqa_report(&report, &out)?;
            prov.finish(&out, outputs)
        }
        Command::Metrics { reference, test, channel_mode, block } => {
            let mode: ChannelMode = channel_mode.parse()?;
            let (r, t) = (load_image(&reference)?, load_image(&test)?);
            let pb = match mode {
                ChannelMode::RgbMean => psnr_b(&r, &t, block, 1.0)?,
                ChannelMode::LumaBt601 => {
                    psnr_b(&qairn::metrics::to_luma(&r)?, &qairn::metrics::to_luma(&t)?, block, 1.0)?
                }
            };
            let value = serde_json::json!({
                "channel_mode": mode.as_str(),
                "psnr": qairn::bench::format_sig9(psnr_mode(&r, &t, 1.0, mode)?),
                "ssim": qairn::bench::format_sig9(ssim_eval(&r, &t, mode)?),
                "psnr_b": qairn::bench::format_sig9(pb),
            });
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(())
        }
        Command::BuildCorpus { root, out, name, fractions, seed } => {
            if fractions.len() != 3 {
                bail!(qairn::Error::Config("--fractions needs three comma-separated values".into()));
            }
            let mut manifest = build_corpus_manifest(&name, &root, (fractions[0], fractions[1], fractions[2]), seed)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            manifest.root = std::path::absolute(&manifest.root).unwrap_or(manifest.root);
            manifest.save(&out)?;
            println!(
                "{}: {} train / {} val / {} test",
                out.display(),
                manifest.count(Split::Train),
                manifest.count(Split::Val),
                manifest.count(Split::Test)
            );
            Ok(())
        }
    }
}

/// Process exit code for an error category.
fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<qairn::Error>()) else {
        return 1;
    };
    match e.category() {
        "config" => 3,
        "input" => 4,
        "dimension" => 5,
        "codec" => 6,
        "parse" => 7,
        "validation" => 8,
        "statistics" => 9,
        "checkpoint" => 10,
        "training" => 11,
        "io" => 12,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err
                .chain()
                .find_map(|c| c.downcast_ref::<qairn::Error>())
                .map(|e| e.category())
                .unwrap_or("internal");
            eprintln!("error[{category}]: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
