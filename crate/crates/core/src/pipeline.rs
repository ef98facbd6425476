//! End-to-end run over one video directory.
//!
//! A video directory holds `manifest.txt`, `detections.csv` and `mask.pgm`
//! (the layout the scene generator writes). Stages run in order: frame
//! filtering, forward and backward background modelling, merge, detection
//! post-processing, candidate selection, and per-candidate evidence with
//! either backtracking or the sequential detector.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::background::{merge, run_both, BackgroundSnapshot};
use crate::candidates::{build_candidates, load_mask, CandidateRegion, SegmentationMask};
use crate::config::PipelineConfig;
use crate::detections::{check_bounds, load_detections, post_process, DetectionRecord};
use crate::error::{Error, Result};
use crate::frame_store::{filter_corrupted, load_manifest, FrameManifest};
use crate::metrics::PredictedEvent;
use crate::sequential::{detect, localize, statistic_trace, AnomalyAlarm, Calibration, CusumConfig};
use crate::similarity::{backtrack_onset, roi_series_with_reference, savgol, Patch, SimilaritySeries};
use crate::synth::{DETECTIONS_FILE, MANIFEST_FILE, MASK_FILE};

/// Environment variable capping the worker count.
pub const WORKERS_ENV: &str = "STALL_SENTINEL_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub struct VideoInputs {
    pub video_id: String,
    pub manifest: PathBuf,
    pub detections: PathBuf,
    pub mask: PathBuf,
}

impl VideoInputs {
    /// Standard layout; the video id is the directory name.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let video_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .filter(|n| !n.is_empty() && !n.contains(char::is_whitespace))
            .ok_or_else(|| Error::invalid(format!("cannot take a video id from `{}`", dir.display())))?
            .to_string();
        Ok(VideoInputs {
            video_id,
            manifest: dir.join(MANIFEST_FILE),
            detections: dir.join(DETECTIONS_FILE),
            mask: dir.join(MASK_FILE),
        })
    }
}

/// Frames and backgrounds: the expensive, detection-independent stages.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub manifest: FrameManifest,
    pub forward: Vec<BackgroundSnapshot>,
    pub backward: Vec<BackgroundSnapshot>,
    pub merged: Vec<BackgroundSnapshot>,
}

pub fn prepare(manifest_path: &Path, cfg: &PipelineConfig) -> Result<Prepared> {
    let manifest = load_manifest(manifest_path).map_err(|e| e.in_stage("load manifest"))?;
    let manifest = filter_corrupted(&manifest, cfg.mean_threshold, cfg.sample_period_s)
        .map_err(|e| e.in_stage("filter corrupted frames"))?;
    if manifest.len() < cfg.snapshot_interval {
        return Err(Error::invalid(format!(
            "{} usable frames is fewer than one snapshot interval ({})",
            manifest.len(),
            cfg.snapshot_interval
        ))
        .in_stage("background"));
    }
    let started = Instant::now();
    let (forward, backward) =
        run_both(&manifest, cfg.snapshot_interval, &cfg.mixture).map_err(|e| e.in_stage("background"))?;
    log::debug!(
        "background models over {} frames: {:?}",
        manifest.len(),
        started.elapsed()
    );
    let merged = merge(&forward, &backward).map_err(|e| e.in_stage("merge backgrounds"))?;
    Ok(Prepared {
        manifest,
        forward,
        backward,
        merged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Backtrack,
    Sequential { calibration: Calibration },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateOutcome {
    pub region: CandidateRegion,
    /// Frame at which the candidate's first background snapshot was taken.
    pub reference_frame: u64,
    pub reference_time_s: f64,
    pub raw: SimilaritySeries,
    pub smoothed: SimilaritySeries,
    /// Backtracked onset (threshold crossing), if any.
    pub onset_s: Option<f64>,
    pub alarm: Option<AnomalyAlarm>,
    pub prediction: Option<PredictedEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoResult {
    pub video_id: String,
    pub detections_kept: usize,
    pub candidates: Vec<CandidateOutcome>,
}

impl VideoResult {
    pub fn predictions(&self) -> Vec<PredictedEvent> {
        self.candidates.iter().filter_map(|c| c.prediction.clone()).collect()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{}: {} detections after filtering, {} candidates",
            self.video_id,
            self.detections_kept,
            self.candidates.len()
        )
        .unwrap();
        for (i, c) in self.candidates.iter().enumerate() {
            let r = &c.region.roi;
            let pred = c
                .prediction
                .as_ref()
                .map_or("none".to_string(), |p| format!("{}", p.predicted_start_s));
            writeln!(
                s,
                "  candidate {i}: centroid ({:.1}, {:.1}) roi ({}, {}, {}, {}) first snapshot {} at {} s, onset {}",
                c.region.centroid.0,
                c.region.centroid.1,
                r.x,
                r.y,
                r.w,
                r.h,
                c.region.first_seen_snapshot,
                c.reference_time_s,
                pred
            )
            .unwrap();
        }
        s
    }

    /// `frame_index,timestamp_s,e_raw,e_smoothed` for one candidate.
    pub fn series_csv(&self, candidate: usize) -> String {
        let c = &self.candidates[candidate];
        let mut s = String::from("frame_index,timestamp_s,e_raw,e_smoothed\n");
        for (a, b) in c.raw.samples().iter().zip(c.smoothed.samples()) {
            writeln!(s, "{},{},{},{}", a.frame_index, a.timestamp_s, a.value, b.value).unwrap();
        }
        s
    }
}

/// Post-processes detections and builds candidate regions.
pub fn select_candidates(
    detections: &[DetectionRecord],
    mask: &SegmentationMask,
    prepared: &Prepared,
    cfg: &PipelineConfig,
) -> Result<(usize, Vec<CandidateRegion>)> {
    if let Some((w, h)) = prepared.merged.first().map(|s| s.frame.dims()) {
        if mask.dims() != (w, h) {
            return Err(Error::DimensionMismatch {
                expected_w: w,
                expected_h: h,
                actual_w: mask.dims().0,
                actual_h: mask.dims().1,
            }
            .in_stage("load mask"));
        }
        check_bounds(detections, w, h).map_err(|e| e.in_stage("load detections"))?;
    }
    let snapshots = prepared.merged.len() as u32;
    if let Some(r) = detections.iter().find(|r| r.snapshot_index >= snapshots) {
        return Err(Error::invalid(format!(
            "detection references snapshot {} but the video has {snapshots}",
            r.snapshot_index
        ))
        .in_stage("load detections"));
    }
    let kept = post_process(detections, &cfg.filters).map_err(|e| e.in_stage("filter detections"))?;
    let regions =
        build_candidates(&kept, mask, &cfg.candidate_params()).map_err(|e| e.in_stage("select candidates"))?;
    Ok((kept.len(), regions))
}

/// Evidence series for one region against its reference background, over
/// frames up to `t_end` (the whole video when `None`).
pub fn candidate_series(
    prepared: &Prepared,
    region: &CandidateRegion,
    t_end: Option<u64>,
    cfg: &PipelineConfig,
) -> Result<SimilaritySeries> {
    let j = region.first_seen_snapshot as usize;
    let reference = Patch::crop(&prepared.merged[j].frame, &region.roi)?;
    roi_series_with_reference(
        &prepared.manifest,
        &region.roi,
        &reference,
        t_end,
        cfg.stride,
        &cfg.ssim_constants(),
    )
}

fn evaluate_candidate(
    video_id: &str,
    prepared: &Prepared,
    region: CandidateRegion,
    cfg: &PipelineConfig,
    mode: &Mode,
) -> Result<CandidateOutcome> {
    // the forward snapshot marks when the vehicle had settled into the
    // background on the natural timeline
    let anchor = &prepared.forward[region.first_seen_snapshot as usize];
    let (reference_frame, reference_time_s) = (anchor.source_frame_index, anchor.frame.timestamp_s);
    let mut outcome = CandidateOutcome {
        region,
        reference_frame,
        reference_time_s,
        raw: SimilaritySeries::default(),
        smoothed: SimilaritySeries::default(),
        onset_s: None,
        alarm: None,
        prediction: None,
    };
    let predict = |t: f64| PredictedEvent {
        video_id: video_id.to_string(),
        predicted_start_s: t,
        score: None,
    };
    match mode {
        Mode::Backtrack => {
            outcome.raw = candidate_series(prepared, &outcome.region, Some(reference_frame), cfg)
                .map_err(|e| e.in_stage("similarity series"))?;
            outcome.smoothed = savgol(&outcome.raw, cfg.savgol_window, cfg.savgol_order, cfg.savgol_edge)
                .map_err(|e| e.in_stage("smoothing"))?
                .series;
            outcome.onset_s = backtrack_onset(&outcome.smoothed, cfg.ssim_threshold, cfg.persistence)
                .map_err(|e| e.in_stage("backtracking"))?;
            if outcome.onset_s.is_none() {
                log::info!("{video_id}: no persistent crossing before {reference_time_s} s; using the snapshot time");
            }
            outcome.prediction = Some(predict(outcome.onset_s.unwrap_or(reference_time_s)));
        }
        Mode::Sequential { calibration } => {
            let raw =
                candidate_series(prepared, &outcome.region, None, cfg).map_err(|e| e.in_stage("similarity series"))?;
            let evidence = calibration
                .normalize_series(&raw)
                .map_err(|e| e.in_stage("sequential"))?;
            let cusum = CusumConfig {
                gamma: calibration.gamma,
                h: cfg.h,
                g: cfg.g.unwrap_or(calibration.gamma),
                alpha_sig: calibration.alpha,
            };
            if let Some(alarm) = detect(&evidence, &cusum).map_err(|e| e.in_stage("sequential"))? {
                let trace = statistic_trace(&evidence.values(), cusum.gamma);
                let located =
                    localize(&evidence, &trace, alarm.sample_index, cusum.g).map_err(|e| e.in_stage("sequential"))?;
                outcome.prediction = Some(predict(alarm.timestamp_s));
                outcome.alarm = Some(located);
            }
            outcome.raw = raw;
            outcome.smoothed = evidence;
        }
    }
    Ok(outcome)
}

/// Runs the candidate stages on prepared backgrounds. Candidates are
/// evaluated in parallel and returned in candidate order.
pub fn run_prepared(
    video_id: &str,
    prepared: &Prepared,
    detections: &[DetectionRecord],
    mask: &SegmentationMask,
    cfg: &PipelineConfig,
    mode: &Mode,
) -> Result<VideoResult> {
    let (detections_kept, regions) = select_candidates(detections, mask, prepared, cfg)?;
    let started = Instant::now();
    let candidates = regions
        .into_par_iter()
        .map(|r| evaluate_candidate(video_id, prepared, r, cfg, mode))
        .collect::<Result<Vec<_>>>()?;
    log::debug!("{} candidates evaluated in {:?}", candidates.len(), started.elapsed());
    Ok(VideoResult {
        video_id: video_id.to_string(),
        detections_kept,
        candidates,
    })
}

pub struct VideoRun {
    pub prepared: Prepared,
    pub result: VideoResult,
}

/// The full pipeline on one video.
pub fn run_video(inputs: &VideoInputs, cfg: &PipelineConfig, mode: &Mode) -> Result<VideoRun> {
    cfg.validate()?;
    let prepared = prepare(&inputs.manifest, cfg)?;
    let detections = load_detections(&inputs.detections).map_err(|e| e.in_stage("load detections"))?;
    let dims = prepared.merged.first().map(|s| s.frame.dims());
    let mask = load_mask(&inputs.mask, dims).map_err(|e| e.in_stage("load mask"))?;
    let result = run_prepared(&inputs.video_id, &prepared, &detections, &mask, cfg, mode)?;
    Ok(VideoRun { prepared, result })
}

/// Worker count from the config (0 = all cores), capped by
/// `STALL_SENTINEL_WORKERS` when set.
pub fn worker_count(cfg: &PipelineConfig) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let wanted = if cfg.workers == 0 { available } else { cfg.workers };
    let cap = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&c| c > 0);
    cap.map_or(wanted, |c| wanted.min(c)).max(1)
}

/// Runs `f` on a dedicated pool sized by [`worker_count`].
pub fn with_workers<T: Send>(cfg: &PipelineConfig, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(cfg))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Re-runs the sequential detector at threshold `h` on evidence already
/// computed by a sequential run (the `smoothed` series holds the
/// normalised evidence there).
pub fn sequential_predictions(
    result: &VideoResult,
    calibration: &Calibration,
    h: f64,
    g: Option<f64>,
) -> Result<Vec<PredictedEvent>> {
    let cusum = CusumConfig {
        gamma: calibration.gamma,
        h,
        g: g.unwrap_or(calibration.gamma),
        alpha_sig: calibration.alpha,
    };
    let mut out = Vec::new();
    for c in &result.candidates {
        if let Some(alarm) = detect(&c.smoothed, &cusum)? {
            out.push(PredictedEvent {
                video_id: result.video_id.clone(),
                predicted_start_s: alarm.timestamp_s,
                score: None,
            });
        }
    }
    Ok(out)
}
