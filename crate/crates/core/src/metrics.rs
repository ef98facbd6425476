//! Event-level scoring: F1, NRMSE, S4 and the average precision delay.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// RMSE cap in seconds; NRMSE is `min(rmse, cap) / cap`.
pub const RMSE_CAP_S: f64 = 300.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthEvent {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedEvent {
    pub video_id: String,
    pub predicted_start_s: f64,
    pub score: Option<f64>,
}

fn parse_events<T>(
    path: &Path,
    mut build: impl FnMut(String, f64, Option<f64>) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 2 or 3 fields, found {}", fields.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, i + 1, format!("bad number `{s}`")))
        };
        let first = num(fields[1])?;
        let second = fields.get(2).map(|s| num(s)).transpose()?;
        out.push(build(fields[0].to_string(), first, second).map_err(|m| Error::parse(path, i + 1, m))?);
    }
    Ok(out)
}

/// Reads `<video_id> <start_s> [end_s]` lines.
pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthEvent>> {
    parse_events(path.as_ref(), |video_id, start_s, end_s| {
        if start_s < 0.0 {
            return Err(format!("start {start_s} is negative"));
        }
        if end_s.is_some_and(|e| e <= start_s) {
            return Err("end must come after start".into());
        }
        Ok(GroundTruthEvent {
            video_id,
            start_s,
            end_s,
        })
    })
}

/// Reads `<video_id> <predicted_start_s> [score]` lines.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictedEvent>> {
    parse_events(path.as_ref(), |video_id, predicted_start_s, score| {
        if predicted_start_s < 0.0 {
            return Err(format!("predicted start {predicted_start_s} is negative"));
        }
        Ok(PredictedEvent {
            video_id,
            predicted_start_s,
            score,
        })
    })
}

pub fn format_predictions(preds: &[PredictedEvent]) -> String {
    let mut s = String::new();
    for p in preds {
        match p.score {
            Some(score) => writeln!(s, "{} {} {}", p.video_id, p.predicted_start_s, score),
            None => writeln!(s, "{} {}", p.video_id, p.predicted_start_s),
        }
        .expect("writing to a String");
    }
    s
}

pub fn write_predictions(path: &Path, preds: &[PredictedEvent]) -> Result<()> {
    fs::write(path, format_predictions(preds)).map_err(|e| Error::io(path, e))
}

pub fn write_ground_truth(path: &Path, gts: &[GroundTruthEvent]) -> Result<()> {
    let mut s = String::new();
    for g in gts {
        match g.end_s {
            Some(end) => writeln!(s, "{} {} {}", g.video_id, g.start_s, end),
            None => writeln!(s, "{} {}", g.video_id, g.start_s),
        }
        .expect("writing to a String");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchPair {
    pub video_id: String,
    pub gt_index: usize,
    pub pred_index: usize,
    /// `predicted_start - gt_start`, negative for early predictions.
    pub delay_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matching {
    pub tp: Vec<MatchPair>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

/// Greedy one-to-one matching within each video, closest pairs first.
/// Pairs farther apart than `window_s` never match.
pub fn match_events(preds: &[PredictedEvent], gts: &[GroundTruthEvent], window_s: f64) -> Matching {
    let mut pairs: Vec<(f64, &str, usize, usize)> = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        for (pi, p) in preds.iter().enumerate() {
            if p.video_id == g.video_id {
                let dt = (p.predicted_start_s - g.start_s).abs();
                if dt <= window_s {
                    pairs.push((dt, &g.video_id, gi, pi));
                }
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1.cmp(b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut gt_used = vec![false; gts.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut tp = Vec::new();
    for (_, video, gi, pi) in pairs {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            tp.push(MatchPair {
                video_id: video.to_string(),
                gt_index: gi,
                pred_index: pi,
                delay_s: preds[pi].predicted_start_s - gts[gi].start_s,
            });
        }
    }
    tp.sort_by_key(|m| m.gt_index);
    Matching {
        tp,
        fp: (0..preds.len()).filter(|&i| !pred_used[i]).collect(),
        fn_: (0..gts.len()).filter(|&i| !gt_used[i]).collect(),
    }
}

pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        log::warn!("F1 of an empty evaluation is taken as 0");
        return 0.0;
    }
    (2 * tp) as f64 / denom as f64
}

pub fn rmse(delays_s: &[f64]) -> Option<f64> {
    if delays_s.is_empty() {
        return None;
    }
    Some((delays_s.iter().map(|d| d * d).sum::<f64>() / delays_s.len() as f64).sqrt())
}

/// `min(rmse, 300) / 300`; an empty delay list scores 1.
pub fn nrmse(delays_s: &[f64]) -> f64 {
    match rmse(delays_s) {
        Some(r) => nrmse_from_rmse(r),
        None => {
            log::warn!("no true positives; NRMSE taken as 1");
            1.0
        }
    }
}

pub fn nrmse_from_rmse(rmse_s: f64) -> f64 {
    rmse_s.min(RMSE_CAP_S) / RMSE_CAP_S
}

pub fn s4(f1_value: f64, nrmse_value: f64) -> f64 {
    f1_value * (1.0 - nrmse_value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub f1: f64,
    pub rmse_s: Option<f64>,
    pub nrmse: f64,
    pub s4: f64,
    pub matching: Matching,
}

pub fn evaluate(preds: &[PredictedEvent], gts: &[GroundTruthEvent], window_s: f64) -> EvalReport {
    let matching = match_events(preds, gts, window_s);
    let delays: Vec<f64> = matching.tp.iter().map(|m| m.delay_s).collect();
    let (tp, fp, fn_) = (matching.tp.len(), matching.fp.len(), matching.fn_.len());
    let f = f1(tp, fp, fn_);
    let n = nrmse(&delays);
    let report = EvalReport {
        tp,
        fp,
        fn_,
        f1: f,
        rmse_s: rmse(&delays),
        nrmse: n,
        s4: s4(f, n),
        matching,
    };
    assert!((report.s4 - report.f1 * (1.0 - report.nrmse)).abs() < 1e-9);
    report
}

impl EvalReport {
    /// Human-readable summary, the per-event table, and a CSV block.
    pub fn render(&self, preds: &[PredictedEvent], gts: &[GroundTruthEvent]) -> String {
        let mut s = String::new();
        let rmse = self.rmse_s.map_or("n/a".to_string(), |r| format!("{r:.4}"));
        writeln!(s, "TP {}  FP {}  FN {}", self.tp, self.fp, self.fn_).unwrap();
        writeln!(s, "F1     {:.4}", self.f1).unwrap();
        writeln!(s, "RMSE   {rmse} s").unwrap();
        writeln!(s, "NRMSE  {:.6}", self.nrmse).unwrap();
        writeln!(s, "S4     {:.4}", self.s4).unwrap();
        writeln!(s).unwrap();
        writeln!(
            s,
            "{:<16} {:>10} {:>12} {:>9}  outcome",
            "video", "gt_start", "pred_start", "delay"
        )
        .unwrap();
        for m in &self.matching.tp {
            writeln!(
                s,
                "{:<16} {:>10.2} {:>12.2} {:>9.2}  TP",
                m.video_id, gts[m.gt_index].start_s, preds[m.pred_index].predicted_start_s, m.delay_s
            )
            .unwrap();
        }
        for &i in &self.matching.fn_ {
            writeln!(
                s,
                "{:<16} {:>10.2} {:>12} {:>9}  FN",
                gts[i].video_id, gts[i].start_s, "-", "-"
            )
            .unwrap();
        }
        for &i in &self.matching.fp {
            writeln!(
                s,
                "{:<16} {:>10} {:>12.2} {:>9}  FP",
                preds[i].video_id, "-", preds[i].predicted_start_s, "-"
            )
            .unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "# csv").unwrap();
        writeln!(s, "tp,fp,fn,f1,rmse_s,nrmse,s4").unwrap();
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            self.tp,
            self.fp,
            self.fn_,
            self.f1,
            self.rmse_s.map_or(String::new(), |r| r.to_string()),
            self.nrmse,
            self.s4
        )
        .unwrap();
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionDelayCurve {
    /// `(alpha_delay, precision)` sorted by alpha, one point per distinct alpha.
    pub points: Vec<(f64, f64)>,
    pub apd: f64,
    pub delay_cap_s: f64,
}

/// One detector operating point: its threshold and the alarms it raised.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingRun {
    pub threshold: f64,
    pub preds: Vec<PredictedEvent>,
}

/// Precision and normalised mean absolute delay of one run, or `None` when
/// it raised no alarms. A run whose alarms are all false gets alpha 1.
pub fn run_point(
    preds: &[PredictedEvent],
    gts: &[GroundTruthEvent],
    window_s: f64,
    delay_cap_s: f64,
) -> Option<(f64, f64)> {
    if preds.is_empty() {
        return None;
    }
    let m = match_events(preds, gts, window_s);
    let precision = m.tp.len() as f64 / preds.len() as f64;
    let alpha = if m.tp.is_empty() {
        1.0
    } else {
        let mean = m.tp.iter().map(|p| p.delay_s.abs()).sum::<f64>() / m.tp.len() as f64;
        mean.min(delay_cap_s) / delay_cap_s
    };
    Some((alpha, precision))
}

pub fn precision_delay_curve(
    runs: &[OperatingRun],
    gts: &[GroundTruthEvent],
    window_s: f64,
    delay_cap_s: f64,
) -> Result<PrecisionDelayCurve> {
    if !(delay_cap_s > 0.0) {
        return Err(Error::invalid(format!("delay_cap_s {delay_cap_s} must be positive")));
    }
    let thresholds: BTreeSet<u64> = runs.iter().map(|r| r.threshold.to_bits()).collect();
    if thresholds.len() < runs.len() {
        return Err(Error::invalid("operating runs repeat a threshold"));
    }
    let mut raw = Vec::new();
    for r in runs {
        match run_point(&r.preds, gts, window_s, delay_cap_s) {
            Some(p) => raw.push(p),
            None => log::warn!("run at threshold {} raised no alarms; no curve point", r.threshold),
        }
    }
    if raw.is_empty() {
        return Err(Error::invalid("no operating run raised an alarm"));
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    raw.dedup_by(|later, kept| later.0 == kept.0);
    let apd = apd(&raw)?;
    Ok(PrecisionDelayCurve {
        points: raw,
        apd,
        delay_cap_s,
    })
}

/// Trapezoidal area under the piecewise-linear curve over [0, 1], holding
/// the first precision back to alpha 0 and the last out to alpha 1.
pub fn apd(points: &[(f64, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("APD of an empty curve"));
    }
    if points
        .windows(2)
        .any(|w| w[1].0.partial_cmp(&w[0].0) != Some(Ordering::Greater))
    {
        return Err(Error::invalid("curve points must have strictly increasing alpha"));
    }
    let (a0, p0) = points[0];
    let (an, pn) = points[points.len() - 1];
    let mut area = a0 * p0 + (1.0 - an) * pn;
    for w in points.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    Ok(area)
}

pub fn curve_csv(curve: &PrecisionDelayCurve) -> String {
    let mut s = String::from("alpha,precision\n");
    for (a, p) in &curve.points {
        writeln!(s, "{a},{p}").unwrap();
    }
    s
}
