use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use depthcomp::data::{load_manifest, load_sample, read_depth_png, validity_mask, Sample};
use depthcomp::Pipeline32;

fn depthcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthcomp"))
        .args(args)
        .env("DEPTHCOMP_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[data.synthetic]
train = 2
eval = 2
size = 32

[train]
steps = 3
patch_size = 32
log_every = 1

[train.network]
base_channels = 4
depth_levels = 2
"#;

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn gen(dir: &Path, count: &str, force: bool) -> Output {
    let mut args = vec!["gen-data", "--seed", "7", "--count", count, "--size", "32", "--out", s(dir)];
    if force {
        args.push("--force");
    }
    depthcomp(&args)
}

#[test]
fn gen_data_writes_triplets_and_refuses_to_clobber() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let o = gen(&out, "3", false);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pngs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png").count();
    assert_eq!(pngs, 9);
    let entries = load_manifest(out.join("manifest.tsv")).unwrap();
    assert_eq!(entries.len(), 3);
    assert!(out.join("config.toml").exists());

    for e in &entries {
        let sample: Sample<f64> = load_sample(&e.rgb, &e.raw, &e.gt, None).unwrap();
        sample.check_invariants().unwrap();
        let raw = validity_mask(&sample.raw_depth);
        let gt = validity_mask(&sample.gt_depth);
        assert!(raw.flags.iter().zip(&gt.flags).all(|(&r, &g)| !r || g));
        assert!(sample.gt_depth.values().iter().all(|&v| v > 0.0));
    }

    let before: Vec<Vec<u8>> = entries.iter().map(|e| fs::read(&e.gt).unwrap()).collect();
    let o = gen(&out, "3", false);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"));
    let o = gen(&out, "3", true);
    assert_eq!(code(&o), 0);
    let after: Vec<Vec<u8>> = entries.iter().map(|e| fs::read(&e.gt).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn passthrough_eval_is_perfect_and_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "3", false)), 0);
    let out = tmp.path().join("eval");
    let o = depthcomp(&["eval", "--passthrough", "--manifest", s(&data.join("manifest.tsv")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let text = fs::read_to_string(out.join("metrics.txt")).unwrap();
    let get = |k: &str| -> f64 {
        let line = text.lines().find(|l| l.split(' ').next() == Some(k)).unwrap();
        line.split(' ').nth(1).unwrap().parse().unwrap()
    };
    assert_eq!(get("rmse"), 0.0);
    assert_eq!(get("mean"), 0.0);
    assert_eq!(get("ssim"), 1.0);
    for k in ["delta_1.05", "delta_1.10", "delta_1.25", "delta_1.25^2", "delta_1.25^3"] {
        assert_eq!(get(k), 1.0);
    }

    let table = fs::read_to_string(out.join("per_image.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 4);
    let (images, agg) = rows.split_at(3);
    for col in 2..10 {
        let mean = images.iter().map(|r| r[col].parse::<f64>().unwrap()).sum::<f64>() / 3.0;
        assert!((mean - agg[0][col].parse::<f64>().unwrap()).abs() < 1e-9);
    }
    let pixels: usize = images.iter().map(|r| r[1].parse::<usize>().unwrap()).sum();
    assert_eq!(pixels, agg[0][1].parse::<usize>().unwrap());
    assert!(images.iter().all(|r| r[1].parse::<usize>().unwrap() == 32 * 32));

    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["images"].as_array().unwrap().len(), 3);
    assert_eq!(json["images"][0]["metrics"]["pixel_count"], 1024);
}

#[test]
fn train_complete_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), "");
    let run = tmp.path().join("run");
    let o = depthcomp(&["train", "--config", s(&config), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(run.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "l_sa", "l_s", "l_bc", "l_n", "l_b", "total", "wall_clock_s"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("steps = 3") && resolved.contains("lambda_bc"));

    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "2", false)), 0);
    let ck = run.join("checkpoint.ckpt");
    let out = tmp.path().join("pred").join("0000.png");
    let att = tmp.path().join("att");
    let sobel = tmp.path().join("sobel.png");
    let o = depthcomp(&[
        "complete",
        "--checkpoint",
        s(&ck),
        "--rgb",
        s(&data.join("0000_rgb.png")),
        "--raw",
        s(&data.join("0000_raw.png")),
        "--out",
        s(&out),
        "--dump-attention",
        s(&att),
        "--dump-sobel",
        s(&sobel),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let depth = read_depth_png::<f32>(&out).unwrap();
    assert_eq!(depth.dims(), (32, 32));
    assert!(depth.values().iter().all(|&v| v > 0.0));
    let gated = Pipeline32::load_checkpoint(&ck).unwrap().gated_block_count();
    assert_eq!(fs::read_dir(&att).unwrap().count(), gated);
    assert!(gated > 0);
    assert!(sobel.exists());

    let o = depthcomp(&["eval", "--checkpoint", s(&ck), "--manifest", s(&data.join("manifest.tsv")), "--out", s(&tmp.path().join("ev"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn non_finite_training_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), "");
    let o = depthcomp(&["train", "--config", s(&config), "--out", s(&tmp.path().join("r")), "--learning-rate", "1e30", "--steps", "20"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_names_corrupted_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("gc").join("report.json");
    fs::create_dir_all(report.parent().unwrap()).unwrap();
    let o = depthcomp(&["gradcheck", "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(json["passed"], true);
    assert!(json["max_relative_error"].as_f64().unwrap() < 1e-3);
    assert!(report.exists());

    let o = depthcomp(&["gradcheck", "--corrupt", "repr.enc1a.weight"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("repr.enc1a.weight"), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(json["passed"], false);
}

#[test]
fn ablate_emits_four_rows_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), "");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = depthcomp(&["ablate", "--config", s(&config), "--out", s(&out), "--steps", "2"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let a = run("a");
    let csv = fs::read_to_string(a.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0].split(',').count(), 9);
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["W/O-SA", "SA", "SA+SSIM", "SA+SSIM+BC"]);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 9));
    let b = run("b");
    assert_eq!(fs::read(a.join("ablation.json")).unwrap(), fs::read(b.join("ablation.json")).unwrap());
}

#[test]
fn exit_codes_distinguish_validation_from_io() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.tsv");
    let o = depthcomp(&["eval", "--passthrough", "--manifest", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nstepz = 1\n").unwrap();
    let o = depthcomp(&["train", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stepz"));

    let o = depthcomp(&["train", "--config", s(&tmp.path().join("absent.toml")), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);

    assert_eq!(code(&depthcomp(&["no-such-command"])), 1);

    let garbage = tmp.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = depthcomp(&[
        "complete",
        "--checkpoint",
        s(&garbage),
        "--rgb",
        s(&garbage),
        "--raw",
        s(&garbage),
        "--out",
        s(&tmp.path().join("x.png")),
    ]);
    assert_eq!(code(&o), 2);
}
