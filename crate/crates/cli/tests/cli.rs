use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qairn::dataio::{jpeg_round_trip, synthetic_image, write_synthetic_corpus};

fn qairn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qairn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn qairn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

fn run_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

/// Builds a corpus, trains a tiny model for a few steps and returns the final checkpoint.
fn trained_checkpoint(root: &Path) -> PathBuf {
    write_synthetic_corpus(&root.join("img"), 8, 40, 40, 3).unwrap();
    let corpus = root.join("corpus.json");
    assert_ok(&qairn(&[
        "build-corpus",
        "--root",
        s(&root.join("img")),
        "--out",
        s(&corpus),
        "--fractions",
        "0.5,0.25,0.25",
    ]));
    let config = serde_json::json!({
        "run_dir": "run",
        "init_seed": 3,
        "model": { "base_channels": 6, "num_scales": 3, "res_blocks_per_stage": 1,
                   "attention_channels": 6, "attention_depth": 1 },
        "optimizer": { "total_steps": 4 },
        "loss": { "window_size": 7 },
        "data": { "corpus": "corpus.json", "patch": { "patch_size": 16, "batch_size": 2 },
                  "val_qfs": [10], "val_crop": 32 },
        "logging": { "log_interval": 2, "checkpoint_interval": 0, "val_interval": 2 }
    });
    let cfg_path = root.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let out = qairn(&["train", "--config", s(&cfg_path)]);
    assert_ok(&out);
    let run = root.join("run");
    assert_eq!(run_json(&run)["command"], "train");
    let latest = fs::read_to_string(run.join("checkpoints/latest")).unwrap();
    run.join("checkpoints").join(latest.trim())
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ckpt = trained_checkpoint(root);
    assert!(ckpt.join("meta.json").is_file());
    assert_eq!(fs::read_to_string(root.join("run/train.csv")).unwrap().lines().count(), 3);

    // restore: directory input, odd sizes preserved.
    let inputs = root.join("jpeg");
    fs::create_dir_all(&inputs).unwrap();
    jpeg_round_trip(&synthetic_image(9, 37, 29), 10).unwrap().save(inputs.join("a.png")).unwrap();
    jpeg_round_trip(&synthetic_image(10, 24, 24), 30).unwrap().save(inputs.join("b.png")).unwrap();
    let restored = root.join("restored");
    assert_ok(&qairn(&["restore", "--ckpt", s(&ckpt), "--input", s(&inputs), "--output", s(&restored)]));
    let a = image::open(restored.join("a.png")).unwrap();
    assert_eq!((a.width(), a.height()), (37, 29));
    assert!(restored.join("b.png").is_file());
    let rec = run_json(&restored);
    assert_eq!(rec["command"], "restore");
    assert!(rec["checkpoint_id"].as_str().unwrap().contains('@'));

    // assess: a constant gate pools to exactly that constant.
    let assessed = root.join("assess");
    let out = qairn(&[
        "assess", "--ckpt", s(&ckpt), "--input", s(&inputs), "--map", "1", "--p", "3",
        "--gate-override", "0.5", "--out", s(&assessed),
    ]);
    assert_ok(&out);
    for line in stdout(&out).lines() {
        assert!(line.ends_with("\t0.5"), "{line}");
    }
    assert_eq!(fs::read_to_string(assessed.join("quality.csv")).unwrap().lines().count(), 3);
    assert_eq!(run_json(&assessed)["command"], "assess");

    // eval-restoration on the test split.
    let bench = root.join("bench");
    assert_ok(&qairn(&[
        "eval-restoration", "--ckpt", s(&ckpt), "--corpus", s(&root.join("corpus.json")),
        "--qfs", "10,40", "--out", s(&bench),
    ]));
    let csv = fs::read_to_string(bench.join("restoration.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(bench.join("restoration.json").is_file());
    assert_eq!(run_json(&bench)["codec_id"], qairn::dataio::CODEC_ID);

    // eval-iqa against scores that simply follow the quality factor.
    let mos_dir = root.join("mos");
    fs::create_dir_all(&mos_dir).unwrap();
    let mut manifest = String::from("path,distortion,level,score,higher_is_better\n");
    for (i, qf) in [5u8, 15, 30, 50, 80].iter().enumerate() {
        let name = format!("m{i}.png");
        jpeg_round_trip(&synthetic_image(20, 48, 40), *qf).unwrap().save(mos_dir.join(&name)).unwrap();
        manifest.push_str(&format!("{name},jpeg,{qf},{},true\n", *qf as f64 / 10.0));
    }
    fs::write(mos_dir.join("mos.csv"), manifest).unwrap();
    let iqa = root.join("iqa");
    assert_ok(&qairn(&[
        "eval-iqa", "--ckpt", s(&ckpt), "--mos", s(&mos_dir.join("mos.csv")), "--distortion", "jpeg",
        "--map", "1,2", "--out", s(&iqa),
    ]));
    let rows = fs::read_to_string(iqa.join("iqa.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3, "{rows}");
    assert!(iqa.join("iqa_samples.csv").is_file());
    assert!(fs::read_dir(&iqa).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("scatter_")));
    assert_eq!(run_json(&iqa)["command"], "eval-iqa");

    // A constant gate makes every Q identical, so the correlation is undefined.
    let out = qairn(&[
        "eval-iqa", "--ckpt", s(&ckpt), "--mos", s(&mos_dir.join("mos.csv")), "--gate-override", "1",
        "--out", s(&root.join("iqa_const")),
    ]);
    assert_eq!(out.status.code(), Some(9), "{}", stderr(&out));
    assert!(stderr(&out).contains("error[statistics]"));

    // Resume from the checkpoint and extend the run.
    let out = qairn(&["train", "--config", s(&root.join("config.json")), "--resume", s(&ckpt), "--steps", "6"]);
    assert_ok(&out);
    assert!(stdout(&out).contains("step 6"));
}

#[test]
fn metrics_prints_json() {
    let tmp = tempfile::tempdir().unwrap();
    let img = synthetic_image(1, 40, 32);
    img.save(tmp.path().join("ref.png")).unwrap();
    jpeg_round_trip(&img, 20).unwrap().save(tmp.path().join("test.png")).unwrap();
    let (r, t) = (tmp.path().join("ref.png"), tmp.path().join("test.png"));

    let out = qairn(&["metrics", "--ref", s(&r), "--test", s(&t)]);
    assert_ok(&out);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let num = |k: &str| v[k].as_str().unwrap().parse::<f64>().unwrap();
    assert!(num("psnr") > 15.0 && num("psnr") < 60.0);
    assert!(num("psnr_b") <= num("psnr"));
    assert!(num("ssim") > 0.0 && num("ssim") < 1.0);

    let out = qairn(&["metrics", "--ref", s(&r), "--test", s(&r), "--channel-mode", "luma_bt601"]);
    assert_ok(&out);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["psnr"], "inf");
    assert_eq!(v["channel_mode"], "luma_bt601");
}

#[test]
fn errors_map_to_categorised_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let img = dir.join("a.png");
    synthetic_image(1, 32, 32).save(&img).unwrap();
    let other = dir.join("b.png");
    synthetic_image(2, 32, 24).save(&other).unwrap();

    let check = |args: &[&str], code: i32, category: &str| {
        let out = qairn(args);
        assert_eq!(out.status.code(), Some(code), "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).contains(&format!("error[{category}]")), "{args:?}: {}", stderr(&out));
    };

    check(&["metrics", "--ref", s(&img), "--test", s(&dir.join("missing.png"))], 12, "io");
    check(&["metrics", "--ref", s(&img), "--test", s(&other)], 5, "dimension");
    check(&["metrics", "--ref", s(&img), "--test", s(&img), "--channel-mode", "cmyk"], 3, "config");

    let garbage = dir.join("garbage.png");
    fs::write(&garbage, b"not an image").unwrap();
    check(&["metrics", "--ref", s(&img), "--test", s(&garbage)], 4, "input");

    let bad_cfg = dir.join("bad.json");
    fs::write(&bad_cfg, r#"{ "model": { "num_scales": 1 } }"#).unwrap();
    check(&["train", "--config", s(&bad_cfg)], 3, "config");

    let ckpt = dir.join("ckpt");
    fs::create_dir_all(&ckpt).unwrap();
    fs::write(ckpt.join("meta.json"), r#"{ "format_version": 99 }"#).unwrap();
    check(&["assess", "--ckpt", s(&ckpt), "--input", s(&img)], 10, "checkpoint");

    let usage = qairn(&["restore"]);
    assert_eq!(usage.status.code(), Some(2));
}
