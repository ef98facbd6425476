use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stall_sentinel::background::write_snapshots;
use stall_sentinel::config::PipelineConfig;
use stall_sentinel::error::{Error, Result};
use stall_sentinel::metrics::{
    curve_csv, evaluate, format_predictions, load_ground_truth, load_predictions, precision_delay_curve,
    GroundTruthEvent, OperatingRun, PredictedEvent,
};
use stall_sentinel::pipeline::{
    candidate_series, run_video, select_candidates, sequential_predictions, with_workers, Mode, VideoInputs,
    VideoResult,
};
use stall_sentinel::sequential::{calibrate_gamma, Calibration};
use stall_sentinel::synth::{generate, load_scene_spec, GROUND_TRUTH_FILE};

#[derive(Parser)]
#[command(
    name = "stall-sentinel",
    version,
    about = "Stalled-vehicle detection for fixed-camera video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene (frames, detections, mask, ground truth).
    Generate {
        /// Scene spec file.
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the detection pipeline on one or more video directories.
    Run(RunArgs),
    /// Fit the sequential detector's baseline on training evidence.
    Calibrate(CalibrateArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Video directories (manifest.txt, detections.csv, mask.pgm).
    #[arg(required = true)]
    videos: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Use the CUSUM detector instead of single-threshold backtracking.
    #[arg(long)]
    sequential: bool,
    /// Calibration file for --sequential (overrides the config key).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// With --sequential: `h=<v1>,<v2>,...` writes predictions_h<v>.txt per value.
    #[arg(long)]
    sweep: Option<String>,
    /// Write each candidate's evidence series as CSV.
    #[arg(long)]
    export_series: bool,
    /// Write background snapshots under <out>/backgrounds/<video>/.
    #[arg(long)]
    backgrounds: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Training video directories. Evidence before the first ground-truth
    /// onset (when ground_truth.txt is present) is pooled.
    videos: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Calibration file to write.
    #[arg(long)]
    out: PathBuf,
    /// Read raw scores (one per line) instead of running the pipeline.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions file; with --sweep, a path containing `{h}`.
    #[arg(long)]
    preds: String,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `h=<v1>,<v2>,...` evaluates one predictions file per value and
    /// reports the precision-delay curve and APD.
    #[arg(long)]
    sweep: Option<String>,
    /// Directory for report.txt (and curve.csv with --sweep).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parse_sweep(spec: &str) -> Result<Vec<(String, f64)>> {
    let list = spec
        .strip_prefix("h=")
        .ok_or_else(|| Error::InvalidArgument(format!("sweep `{spec}` must look like h=1,2,3")))?;
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v: f64 = item
            .parse()
            .ok()
            .filter(|v: &f64| *v > 0.0 && v.is_finite())
            .ok_or_else(|| Error::InvalidArgument(format!("sweep value `{item}` is not a positive number")))?;
        out.push((item.to_string(), v));
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("sweep lists no values".into()));
    }
    Ok(out)
}

fn cmd_generate(spec: &Path, out: &Path) -> Result<()> {
    let spec = load_scene_spec(spec)?;
    let g = generate(&spec, out)?;
    if out.file_name().and_then(|n| n.to_str()) != Some(spec.video_id.as_str()) {
        log::warn!(
            "`run` names videos after their directory; rename {} to {} to match the ground truth",
            out.display(),
            spec.video_id
        );
    }
    println!(
        "{}: {} frames, {} detections, {} ground-truth events -> {}",
        spec.video_id,
        g.manifest.len(),
        g.detections.len(),
        g.ground_truth.len(),
        out.display()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let mode = if args.sequential {
        let path = args
            .calibration
            .clone()
            .or_else(|| cfg.calibration.clone())
            .ok_or_else(|| Error::InvalidArgument("--sequential needs --calibration or a `calibration` key".into()))?;
        Mode::Sequential {
            calibration: Calibration::load(&path)?,
        }
    } else {
        Mode::Backtrack
    };
    let sweep = args.sweep.as_deref().map(parse_sweep).transpose()?;
    if sweep.is_some() && !args.sequential {
        return Err(Error::InvalidArgument("--sweep needs --sequential".into()));
    }
    create_dir(&args.out)?;

    let mut results: Vec<VideoResult> = Vec::new();
    let mut summary = String::new();
    for dir in &args.videos {
        let inputs = VideoInputs::from_dir(dir)?;
        let run = with_workers(&cfg, || run_video(&inputs, &cfg, &mode))??;
        if args.backgrounds {
            let bg = args.out.join("backgrounds").join(&inputs.video_id);
            create_dir(&bg)?;
            write_snapshots(&bg, &run.prepared.forward)?;
            write_snapshots(&bg, &run.prepared.backward)?;
            write_snapshots(&bg, &run.prepared.merged)?;
        }
        if args.export_series {
            for i in 0..run.result.candidates.len() {
                let name = format!("series_{}_{i}.csv", inputs.video_id);
                write(&args.out.join(name), &run.result.series_csv(i))?;
            }
        }
        summary.push_str(&run.result.summary());
        results.push(run.result);
    }

    let preds: Vec<PredictedEvent> = results.iter().flat_map(VideoResult::predictions).collect();
    write(&args.out.join("predictions.txt"), &format_predictions(&preds))?;
    if let (Some(sweep), Mode::Sequential { calibration }) = (&sweep, &mode) {
        for (label, h) in sweep {
            let mut swept = Vec::new();
            for r in &results {
                swept.extend(sequential_predictions(r, calibration, *h, cfg.g)?);
            }
            write(
                &args.out.join(format!("predictions_h{label}.txt")),
                &format_predictions(&swept),
            )?;
        }
    }
    write(&args.out.join("report.txt"), &summary)?;
    print!("{summary}");
    println!(
        "{} predicted events -> {}",
        preds.len(),
        args.out.join("predictions.txt").display()
    );
    Ok(())
}

fn first_onset(dir: &Path, video_id: &str) -> Result<Option<f64>> {
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    if !gt_path.exists() {
        return Ok(None);
    }
    let gts: Vec<GroundTruthEvent> = load_ground_truth(&gt_path)?;
    Ok(gts
        .iter()
        .filter(|g| g.video_id == video_id)
        .map(|g| g.start_s)
        .min_by(f64::total_cmp))
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let scores: Vec<f64> = if let Some(path) = &args.scores {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(i, l)| {
                l.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    message: format!("bad score `{}`", l.trim()),
                })
            })
            .collect::<Result<_>>()?
    } else {
        if args.videos.is_empty() {
            return Err(Error::InvalidArgument(
                "give training video directories or --scores".into(),
            ));
        }
        let mut pooled = Vec::new();
        for dir in &args.videos {
            let inputs = VideoInputs::from_dir(dir)?;
            let cutoff = first_onset(dir, &inputs.video_id)?;
            let values = with_workers(&cfg, || -> Result<Vec<f64>> {
                let prepared = stall_sentinel::pipeline::prepare(&inputs.manifest, &cfg)?;
                let dets = stall_sentinel::detections::load_detections(&inputs.detections)?;
                let dims = prepared.merged.first().map(|s| s.frame.dims());
                let mask = stall_sentinel::candidates::load_mask(&inputs.mask, dims)?;
                let (_, regions) = select_candidates(&dets, &mask, &prepared, &cfg)?;
                let mut v = Vec::new();
                for r in &regions {
                    let series = candidate_series(&prepared, r, None, &cfg)?;
                    v.extend(
                        series
                            .samples()
                            .iter()
                            .filter(|s| cutoff.is_none_or(|c| s.timestamp_s < c))
                            .map(|s| s.value),
                    );
                }
                Ok(v)
            })??;
            log::info!("{}: {} training samples", inputs.video_id, values.len());
            pooled.extend(values);
        }
        pooled
    };
    let cal = calibrate_gamma(&scores, cfg.alpha_sig)?;
    cal.write(&args.out)?;
    println!(
        "gamma {} from {} scores (normalised over [{}, {}], alpha {}) -> {}",
        cal.gamma,
        scores.len(),
        cal.norm_min,
        cal.norm_max,
        cal.alpha,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let gts = load_ground_truth(&args.gt)?;
    let mut text = String::new();
    match args.sweep.as_deref().map(parse_sweep).transpose()? {
        None => {
            let preds = load_predictions(&args.preds)?;
            text.push_str(&evaluate(&preds, &gts, cfg.window_s).render(&preds, &gts));
        }
        Some(sweep) => {
            if !args.preds.contains("{h}") {
                return Err(Error::InvalidArgument(
                    "with --sweep, --preds must contain `{h}`".into(),
                ));
            }
            let mut runs = Vec::new();
            for (label, h) in &sweep {
                let path = args.preds.replace("{h}", label);
                let preds = load_predictions(&path)?;
                let r = evaluate(&preds, &gts, cfg.window_s);
                text.push_str(&format!(
                    "h = {label}: TP {} FP {} FN {} F1 {:.4} S4 {:.4}\n",
                    r.tp, r.fp, r.fn_, r.f1, r.s4
                ));
                runs.push(OperatingRun { threshold: *h, preds });
            }
            let curve = precision_delay_curve(&runs, &gts, cfg.window_s, cfg.delay_cap_s)?;
            text.push_str(&format!(
                "\nprecision-delay curve (delay normalised by {} s):\n{}",
                cfg.delay_cap_s,
                curve_csv(&curve)
            ));
            text.push_str(&format!(
                "APD {:.6}\n(the first precision is held back to alpha 0 and the last out to alpha 1)\n",
                curve.apd
            ));
            if let Some(out) = &args.out {
                create_dir(out)?;
                write(&out.join("curve.csv"), &curve_csv(&curve))?;
            }
        }
    }
    print!("{text}");
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join("report.txt"), &text)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { spec, out } => cmd_generate(spec, out),
        Command::Run(a) => cmd_run(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
