use std::fs;
use std::path::{Path, PathBuf};

use manifold_recon::archive::{image_series_from_archive, image_series_to_archive, Archive};
use manifold_recon::evaluation::{compare_runs, history_csv, latents_csv, EvalReport, TimingTable};
use manifold_recon::forward_model::MeasurementSet;
use manifold_recon::phantom::{make_phantom, simulate_acquisition, PhantomSpec, PhantomTruth};
use manifold_recon::trainer::{
    latents_from_archive, reconstruct_with_checkpoints, resume, TrainHistory, TrainMode,
    CKPT_CONFIG, CKPT_HISTORY, CKPT_LATENTS,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{load, to_toml, AcquireConfig, ReconstructConfig, RunManifest};
use crate::error::{require_input, CliError, CliResult};
use crate::plot::{line_chart, Series};

pub const IMAGES_FILE: &str = "images.bin";
pub const HISTORY_CSV: &str = "history.csv";
pub const LATENTS_CSV: &str = "latents.csv";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.json";
pub const TIMING_CSV: &str = "timing.csv";

/// `<out>.<suffix>` next to a single-file output.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn read_archive(path: &Path) -> CliResult<Archive> {
    require_input(path)?;
    Ok(Archive::read(path)?)
}

pub fn read_truth(path: &Path) -> CliResult<PhantomTruth> {
    Ok(PhantomTruth::from_archive(&read_archive(path)?)?)
}

pub fn read_measurements(path: &Path) -> CliResult<MeasurementSet> {
    Ok(MeasurementSet::from_archive(&read_archive(path)?)?)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

pub fn phantom(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut spec: PhantomSpec = load(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let truth = make_phantom(&spec)?;
    ensure_parent(out)?;
    truth.to_archive()?.write(out)?;
    let cfg_path = sidecar(out, "config.toml");
    fs::write(&cfg_path, to_toml(&spec)?)?;
    let mut m = RunManifest::new(
        "phantom",
        serde_json::to_value(&spec)?,
        json!({ "phantom": spec.seed }),
    );
    m.config_path = Some(cfg_path.display().to_string());
    if let Some(c) = config {
        m = m.input(c)?;
    }
    m.output(out)?.write(&sidecar(out, "manifest.json"))?;
    println!(
        "wrote {} ({} frames of {}x{})",
        out.display(),
        spec.num_frames,
        spec.grid_shape.0,
        spec.grid_shape.1
    );
    Ok(())
}

pub fn acquire(
    truth_path: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> CliResult<()> {
    let truth = read_truth(truth_path)?;
    let mut cfg: AcquireConfig = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let sigma = *cfg.noise_sigma.get_or_insert(truth.spec.noise_sigma);
    let mset = simulate_acquisition(&truth, cfg.lines_per_frame, cfg.num_coils, sigma, cfg.seed)?;
    ensure_parent(out)?;
    mset.to_archive()?.write(out)?;
    let cfg_path = sidecar(out, "config.toml");
    fs::write(&cfg_path, to_toml(&cfg)?)?;
    let mut m = RunManifest::new(
        "acquire",
        serde_json::to_value(&cfg)?,
        json!({ "noise": cfg.seed }),
    );
    m.config_path = Some(cfg_path.display().to_string());
    m = m.input(truth_path)?;
    if let Some(c) = config {
        m = m.input(c)?;
    }
    m.output(out)?.write(&sidecar(out, "manifest.json"))?;
    let frac = mset
        .frames
        .iter()
        .map(|f| f.pattern.sampling_fraction())
        .sum::<f64>()
        / mset.num_frames() as f64;
    println!(
        "wrote {} ({} frames, {} coils, mean sampling fraction {frac:.4})",
        out.display(),
        mset.num_frames(),
        mset.num_coils()
    );
    Ok(())
}

pub struct ReconstructArgs<'a> {
    pub measurements: &'a Path,
    pub config: Option<&'a Path>,
    pub out_dir: &'a Path,
    pub mode: Option<TrainMode>,
    pub no_progressive: bool,
    pub reference: Option<&'a Path>,
    pub seed: Option<u64>,
    pub resume: bool,
}

pub fn reconstruct(a: ReconstructArgs) -> CliResult<()> {
    let mset = read_measurements(a.measurements)?;
    let truth = a.reference.map(read_truth).transpose()?;
    let reference = truth.as_ref().map(|t| t.images.view());
    let (h, w) = mset.grid_shape;
    if h != w {
        return Err(CliError::Validation(format!(
            "generator needs a square grid, got {h}x{w}"
        )));
    }
    fs::create_dir_all(a.out_dir)?;

    let resuming = a.resume && a.out_dir.join(CKPT_CONFIG).exists();
    let result = if resuming {
        resume(&mset, reference, a.out_dir)?
    } else {
        let mut cfg: ReconstructConfig = load(a.config)?;
        if let Some(s) = a.seed {
            cfg.train.seed = s;
            cfg.generator.seed = s;
        }
        if let Some(m) = a.mode {
            cfg.train.mode = m;
        }
        if a.no_progressive {
            cfg.train.progressive = false;
        }
        let (resolved, gen, train) = cfg.resolve(mset.num_frames(), h)?;
        fs::write(a.out_dir.join(RESOLVED_CONFIG), to_toml(&resolved)?)?;
        reconstruct_with_checkpoints(&mset, &gen, &train, reference, a.out_dir)?
    };

    let images_path = a.out_dir.join(IMAGES_FILE);
    image_series_to_archive(&result.images)?.write(&images_path)?;
    fs::write(a.out_dir.join(HISTORY_CSV), history_csv(&result.history))?;
    fs::write(
        a.out_dir.join(LATENTS_CSV),
        latents_csv(result.latents.z.view(), truth.as_ref()),
    )?;

    let resolved: ReconstructConfig = load(Some(&a.out_dir.join(RESOLVED_CONFIG)))?;
    let mut m = RunManifest::new(
        "reconstruct",
        serde_json::to_value(&resolved)?,
        json!({ "generator": resolved.generator.seed, "train": resolved.train.seed }),
    );
    m.config_path = Some(a.out_dir.join(RESOLVED_CONFIG).display().to_string());
    m = m.input(a.measurements)?;
    if let Some(r) = a.reference {
        m = m.input(r)?;
    }
    for f in [IMAGES_FILE, CKPT_LATENTS, CKPT_HISTORY] {
        m = m.output(&a.out_dir.join(f))?;
    }
    m.write(&a.out_dir.join(MANIFEST))?;

    let last = result.history.last();
    match last.and_then(|r| r.ser_mag_db) {
        Some(s) => println!(
            "finished {} epochs; final cost {:.6e}; magnitude SER {s:.3} dB",
            last.unwrap().global_epoch,
            last.unwrap().cost.total
        ),
        None => println!(
            "finished; final cost {:.6e}",
            last.map(|r| r.cost.total).unwrap_or(f64::NAN)
        ),
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    pub report: EvalReport,
}

/// Output of the evaluate command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub runs: Vec<NamedReport>,
    pub timing: Option<TimingTable>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Evaluates each run directory against the truth. The timing threshold
/// defaults to the final magnitude SER of the first run.
pub fn evaluate(
    runs: &[PathBuf],
    truth_path: &Path,
    measurements: Option<&Path>,
    threshold: Option<f64>,
    out: &Path,
) -> CliResult<()> {
    if runs.is_empty() {
        return Err(CliError::Validation(
            "at least one --run is required".into(),
        ));
    }
    let truth = read_truth(truth_path)?;
    let zero_filled = measurements
        .map(|p| -> CliResult<_> { Ok(read_measurements(p)?.zero_filled()?) })
        .transpose()?;
    fs::create_dir_all(out)?;

    let mut reports = Vec::new();
    let mut histories = Vec::new();
    for dir in runs {
        let name = run_name(dir);
        let images = image_series_from_archive(&read_archive(&dir.join(IMAGES_FILE))?)?;
        let latents_path = dir.join(CKPT_LATENTS);
        let latents = if latents_path.exists() {
            Some(latents_from_archive(&Archive::read(&latents_path)?)?)
        } else {
            None
        };
        let report = EvalReport::new(
            images.view(),
            &truth,
            latents.as_ref().map(|l| l.z.view()),
            zero_filled.as_ref().map(|z| z.view()),
        )?;
        if let Some(l) = &latents {
            fs::write(
                out.join(format!("{name}.latents.csv")),
                latents_csv(l.z.view(), Some(&truth)),
            )?;
        }
        let hist_path = dir.join(CKPT_HISTORY);
        if hist_path.exists() {
            let h = TrainHistory::read_jsonl(&hist_path)?;
            fs::write(out.join(format!("{name}.history.csv")), history_csv(&h))?;
            histories.push((name.clone(), h));
        }
        println!(
            "{name}: SER {:.3} dB, magnitude SER {:.3} dB",
            report.ser_db, report.ser_mag_db
        );
        reports.push(NamedReport { name, report });
    }

    let threshold = threshold.or_else(|| {
        histories
            .first()
            .and_then(|(_, h)| h.last())
            .and_then(|r| r.ser_mag_db)
    });
    let timing = threshold.filter(|_| !histories.is_empty()).map(|t| {
        let refs: Vec<(&str, &TrainHistory)> =
            histories.iter().map(|(n, h)| (n.as_str(), h)).collect();
        compare_runs(&refs, t)
    });
    if let Some(t) = &timing {
        fs::write(out.join(TIMING_CSV), t.to_csv())?;
        for r in &t.rows {
            match r.wall_seconds {
                Some(s) => println!("{}: reached {:.3} dB after {s:.2} s", r.run, t.threshold_db),
                None => println!("{}: did not reach {:.3} dB", r.run, t.threshold_db),
            }
        }
    }
    let summary = EvaluationSummary {
        runs: reports,
        timing,
    };
    let report_path = out.join(REPORT);
    fs::write(&report_path, serde_json::to_string_pretty(&summary)?)?;

    let mut m = RunManifest::new("evaluate", json!({ "threshold_db": threshold }), json!({}));
    m = m.input(truth_path)?;
    if let Some(p) = measurements {
        m = m.input(p)?;
    }
    for dir in runs {
        m = m.input(&dir.join(IMAGES_FILE))?;
    }
    m.output(&report_path)?.write(&out.join(MANIFEST))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct HistoryRow {
    global_epoch: usize,
    wall_seconds: f64,
    full_data: u8,
    ser_mag_db: Option<f64>,
}

fn read_history_rows(path: &Path) -> CliResult<Vec<HistoryRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    rdr.deserialize()
        .collect::<Result<Vec<HistoryRow>, _>>()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn read_latent_columns(path: &Path) -> CliResult<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Runtime(e.to_string()))?
        .clone();
    let mut cols: Vec<(String, Vec<f64>)> = headers
        .iter()
        .map(|h| (h.to_string(), Vec::new()))
        .collect();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Runtime(e.to_string()))?;
        for (i, field) in rec.iter().enumerate() {
            let v = field
                .parse::<f64>()
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            cols[i].1.push(v);
        }
    }
    Ok(cols)
}

/// Renders SVG figures from the data files written by `evaluate`.
pub fn plot(report_dir: &Path, out: &Path) -> CliResult<()> {
    let report_path = report_dir.join(REPORT);
    require_input(&report_path)?;
    let summary: EvaluationSummary = serde_json::from_str(&fs::read_to_string(&report_path)?)?;
    fs::create_dir_all(out)?;

    let mut by_time = Vec::new();
    let mut by_epoch = Vec::new();
    for r in &summary.runs {
        let path = report_dir.join(format!("{}.history.csv", r.name));
        if !path.exists() {
            continue;
        }
        // skip the duplicate full-data point logged at each stage end
        let rows: Vec<HistoryRow> = read_history_rows(&path)?
            .into_iter()
            .filter(|row| row.full_data == 0 || row.wall_seconds == 0.0)
            .collect();
        let pts = |x: fn(&HistoryRow) -> f64| -> Vec<(f64, f64)> {
            rows.iter()
                .filter_map(|row| row.ser_mag_db.map(|s| (x(row), s)))
                .collect()
        };
        by_time.push(Series {
            name: r.name.clone(),
            points: pts(|row| row.wall_seconds),
        });
        by_epoch.push(Series {
            name: r.name.clone(),
            points: pts(|row| row.global_epoch as f64),
        });
    }
    let mut written = Vec::new();
    if !by_time.is_empty() {
        let f = out.join("ser_vs_time.svg");
        fs::write(
            &f,
            line_chart(
                "SER vs training time",
                "wall seconds",
                "magnitude SER (dB)",
                &by_time,
            ),
        )?;
        written.push(f);
        let f = out.join("ser_vs_epoch.svg");
        fs::write(
            &f,
            line_chart("SER vs epoch", "epoch", "magnitude SER (dB)", &by_epoch),
        )?;
        written.push(f);
    }
    for r in &summary.runs {
        let path = report_dir.join(format!("{}.latents.csv", r.name));
        if !path.exists() {
            continue;
        }
        let cols = read_latent_columns(&path)?;
        let frames = cols.first().map(|c| c.1.clone()).unwrap_or_default();
        let series: Vec<Series> = cols
            .iter()
            .filter(|(n, _)| n.starts_with('z'))
            .map(|(n, v)| Series {
                name: n.clone(),
                points: frames.iter().copied().zip(v.iter().copied()).collect(),
            })
            .collect();
        let f = out.join(format!("latents_{}.svg", r.name));
        fs::write(
            &f,
            line_chart(&format!("latents: {}", r.name), "frame", "value", &series),
        )?;
        written.push(f);
    }
    for f in &written {
        println!("wrote {}", f.display());
    }
    Ok(())
}
