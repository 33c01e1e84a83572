use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use depthcomp::checkpoint::Checkpoint;
use depthcomp::data::{
    load_manifest, load_manifest_samples, load_sample, make_synthetic_scene, read_depth_png, read_rgb_png, save_depth, save_gray,
    save_rgb, write_manifest, DepthMap, ManifestEntry, Sample, SceneConfig, DEPTH_SCALE, MAX_DEPTH,
};
use depthcomp::edge::{boundary_overlay, to_gray, DEFAULT_SATURATION};
use depthcomp::metrics::{aggregate, evaluate, MetricsReport, METRIC_HEADERS, METRIC_NAMES};
use depthcomp::trainer::{ablation_suite, gradcheck as run_gradcheck, synthetic_split, write_log, GradcheckReport, Trainer};
use depthcomp::Pipeline32;
use serde::Serialize;

use crate::config::{write_resolved, RunConfig};
use crate::{deterministic, CliError, Precision};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(path, &(text + "\n"))
}

#[derive(Serialize)]
struct GenDataArgs<'a> {
    seed: u64,
    count: usize,
    size: usize,
    scene: &'a SceneConfig,
}

pub fn gen_data(seed: u64, count: usize, size: usize, out: &Path, force: bool, config: Option<&Path>) -> Result<(), CliError> {
    let run = RunConfig::load(config)?;
    if count == 0 {
        return Err(CliError::Validation("--count must be positive".into()));
    }
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| io_err(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Validation(format!(
                "{} exists and is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    create_dir(out)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let sample: Sample<f64> = make_synthetic_scene(seed.wrapping_add(i as u64), size, size, &run.scene)?;
        let names = [format!("{i:04}_rgb.png"), format!("{i:04}_raw.png"), format!("{i:04}_gt.png")];
        save_rgb(&sample.rgb, out.join(&names[0]))?;
        save_depth(&sample.raw_depth, out.join(&names[1]))?;
        save_depth(&sample.gt_depth, out.join(&names[2]))?;
        let [rgb, raw, gt] = names.map(PathBuf::from);
        entries.push(ManifestEntry { rgb, raw, gt });
    }
    write_manifest(out.join("manifest.tsv"), &entries)?;
    write_resolved(
        out,
        &GenDataArgs {
            seed,
            count,
            size,
            scene: &run.scene,
        },
    )?;
    eprintln!("wrote {count} samples to {}", out.display());
    Ok(())
}

pub fn train(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    config.train.validate()?;
    let samples = match &config.data.train_manifest {
        Some(m) => load_manifest_samples::<f32>(m)?,
        None => synthetic_split::<f32>(config.train.seed, config.data.synthetic, &config.scene)?.0,
    };
    create_dir(out)?;
    write_resolved(out, config)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(config.train.clone(), samples, &Checkpoint::read(path)?)?,
        None => Trainer::new(config.train.clone(), samples)?,
    };
    let log_path = out.join("train_log.ndjson");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let every = config.train.log_every;
    while trainer.step_count() < config.train.steps {
        let record = trainer.step()?;
        write_log(&mut log, &[record]).map_err(|e| io_err(&log_path, e))?;
        if record.step % every == 0 || record.step == config.train.steps {
            eprintln!(
                "step {:>6}  total {:>9.5}  l_sa {:>8.5}  l_s {:>7.4}  l_bc {:>7.4}  l_n {:>7.4}  l_b {:>7.4}  {:>7.1}s",
                record.step, record.total, record.l_sa, record.l_s, record.l_bc, record.l_n, record.l_b, record.wall_clock_s
            );
        }
    }
    log.flush().map_err(|e| io_err(&log_path, e))?;
    let ck_path = out.join("checkpoint.ckpt");
    trainer.checkpoint().write(&ck_path)?;
    eprintln!("wrote {}", ck_path.display());
    Ok(())
}

#[derive(Serialize)]
struct ImageRow {
    id: String,
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: Option<PathBuf>,
    manifest: PathBuf,
    aggregate: MetricsReport,
    images: Vec<ImageRow>,
}

fn metric_lines(m: &MetricsReport) -> String {
    let mut s = String::new();
    for (name, v) in METRIC_NAMES.iter().zip(m.values()) {
        s.push_str(&format!("{name} {v}\n"));
    }
    s.push_str(&format!("pixel_count {}\n", m.pixel_count));
    s
}

fn table_row(label: &str, m: &MetricsReport) -> String {
    let vals: Vec<String> = m.values().iter().map(|v| format!("{v}")).collect();
    format!("{label}\t{}\t{}\n", m.pixel_count, vals.join("\t"))
}

pub fn eval(checkpoint: Option<&Path>, manifest: &Path, out: &Path, passthrough: bool) -> Result<(), CliError> {
    let pipeline = match (checkpoint, passthrough) {
        (_, true) => None,
        (Some(path), false) => Some(Pipeline32::load_checkpoint(path)?),
        (None, false) => return Err(CliError::Validation("--checkpoint is required unless --passthrough is given".into())),
    };
    let entries = load_manifest(manifest)?;
    if entries.is_empty() {
        return Err(CliError::Validation(format!("{} lists no samples", manifest.display())));
    }
    let mut rows = Vec::with_capacity(entries.len());
    for e in &entries {
        let s: Sample<f32> = load_sample(&e.rgb, &e.raw, &e.gt, None)?;
        let pred = match &pipeline {
            Some(p) => p.complete(&s.rgb, &s.raw_depth)?,
            None => s.gt_depth.clone(),
        };
        rows.push(ImageRow {
            id: s.id.clone(),
            metrics: evaluate(&pred, &s.gt_depth)?,
        });
    }
    let agg = aggregate(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>())?;
    create_dir(out)?;
    let mut table = format!("id\tpixel_count\t{}\n", METRIC_HEADERS.join("\t"));
    for r in &rows {
        table.push_str(&table_row(&r.id, &r.metrics));
    }
    table.push_str(&table_row("aggregate", &agg));
    write_text(&out.join("per_image.tsv"), &table)?;
    write_text(&out.join("metrics.txt"), &metric_lines(&agg))?;
    let report = EvalReport {
        checkpoint: checkpoint.map(Path::to_path_buf),
        manifest: manifest.to_path_buf(),
        aggregate: agg,
        images: rows,
    };
    write_json(&out.join("metrics.json"), &report)?;
    print!("{}", metric_lines(&agg));
    Ok(())
}

#[derive(Serialize)]
struct CompleteArgs<'a> {
    checkpoint: &'a Path,
    rgb: &'a Path,
    raw: &'a Path,
    out: &'a Path,
    dump_attention: Option<&'a Path>,
    dump_sobel: Option<&'a Path>,
}

pub fn complete(
    checkpoint: &Path,
    rgb_path: &Path,
    raw_path: &Path,
    out: &Path,
    dump_attention: Option<&Path>,
    dump_sobel: Option<&Path>,
) -> Result<(), CliError> {
    let pipeline = Pipeline32::load_checkpoint(checkpoint)?;
    let rgb = read_rgb_png::<f32>(rgb_path)?;
    let raw = read_depth_png::<f32>(raw_path)?;
    let prediction = pipeline.predict(&rgb, &raw)?;
    let (h, w) = raw.dims();
    // keep every pixel representable and nonzero after 16-bit quantization
    let lo = (1.0 / DEPTH_SCALE) as f32;
    let values = prediction.depth.values().iter().map(|v| v.clamp(lo, MAX_DEPTH as f32)).collect();
    let depth = DepthMap::new(h, w, values)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_depth(&depth, out)?;
    if let Some(dir) = dump_attention {
        create_dir(dir)?;
        let maps = pipeline.attention_maps(&rgb, &raw, &prediction.normals, &prediction.boundary)?;
        for (name, t) in &maps {
            let [_, c, mh, mw] = t.shape()[..] else { unreachable!("gating maps are rank 4") };
            let plane = mh * mw;
            let mean: Vec<f32> = (0..plane)
                .map(|p| (0..c).map(|ch| t.data()[ch * plane + p]).sum::<f32>() / c as f32)
                .collect();
            save_gray(&to_gray(&mean, mh, mw), dir.join(format!("{name}.png")))?;
        }
        eprintln!("wrote {} attention maps to {}", maps.len(), dir.display());
    }
    if let Some(path) = dump_sobel {
        save_gray(&boundary_overlay(&depth, DEFAULT_SATURATION)?, path)?;
    }
    let args = CompleteArgs {
        checkpoint,
        rgb: rgb_path,
        raw: raw_path,
        out,
        dump_attention,
        dump_sobel,
    };
    write_text(&out.with_extension("toml"), &toml::to_string_pretty(&args).expect("args serialize"))?;
    Ok(())
}

pub fn gradcheck(config: &RunConfig, precision: Precision, out: Option<&Path>, corrupt: Option<&str>) -> Result<(), CliError> {
    let report: GradcheckReport = match precision {
        Precision::F64 => run_gradcheck::<f64>(&config.gradcheck, corrupt)?,
        Precision::F32 => run_gradcheck::<f32>(&config.gradcheck, corrupt)?,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(path) = out {
        write_text(path, &(json + "\n"))?;
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            write_resolved(dir, &config.gradcheck)?;
        }
    }
    if report.passed {
        eprintln!("gradcheck passed: max relative error {:.3e}", report.max_relative_error);
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "gradcheck failed (max relative error {:.3e}, threshold {:.0e}) for: {}",
            report.max_relative_error,
            report.threshold,
            report.failures.join(", ")
        )))
    }
}

pub fn ablate(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    config.train.validate()?;
    let (train_set, eval_set) = match (&config.data.train_manifest, &config.data.eval_manifest) {
        (Some(t), Some(e)) => (load_manifest_samples::<f32>(t)?, load_manifest_samples::<f32>(e)?),
        (None, None) => synthetic_split::<f32>(config.train.seed, config.data.synthetic, &config.scene)?,
        _ => {
            return Err(CliError::Validation(
                "data.train_manifest and data.eval_manifest must be given together".into(),
            ))
        }
    };
    create_dir(out)?;
    write_resolved(out, config)?;
    let table = ablation_suite(&config.train, &train_set, &eval_set, !deterministic())?;
    write_text(&out.join("ablation.txt"), &table.to_text())?;
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    write_json(&out.join("ablation.json"), &table)?;
    print!("{}", table.to_text());
    Ok(())
}
