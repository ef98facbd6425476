//! Nonparametric CUSUM over the SSIM evidence stream.
//!
//! `s_t = max(0, s_{t-1} + e_t - gamma)`, alarm at the first `t` with
//! `s_t >= h`. `gamma` is a high percentile of normalised training
//! evidence, so ordinary fluctuations drain away while a persistent rise
//! accumulates.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::similarity::{SimilaritySample, SimilaritySeries};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CusumConfig {
    pub gamma: f64,
    pub h: f64,
    pub g: f64,
    pub alpha_sig: f64,
}

impl CusumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::invalid(format!("h {} must be positive", self.h)));
        }
        if !(0.0..=1.0).contains(&self.g) {
            return Err(Error::invalid(format!("g {} outside [0, 1]", self.g)));
        }
        if !(self.alpha_sig > 0.0 && self.alpha_sig < 1.0) {
            return Err(Error::invalid(format!("alpha_sig {} outside (0, 1)", self.alpha_sig)));
        }
        Ok(())
    }
}

/// Calibration artifact: the baseline and the normalisation it was
/// computed under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub gamma: f64,
    pub norm_min: f64,
    pub norm_max: f64,
    pub alpha: f64,
}

impl Calibration {
    pub fn is_degenerate(&self) -> bool {
        self.norm_max <= self.norm_min
    }

    /// Maps raw evidence into [0, 1] with the training min and max.
    pub fn normalize(&self, e: f64) -> f64 {
        if self.is_degenerate() {
            return if e > self.norm_min { 1.0 } else { 0.0 };
        }
        ((e - self.norm_min) / (self.norm_max - self.norm_min)).clamp(0.0, 1.0)
    }

    pub fn normalize_series(&self, series: &SimilaritySeries) -> Result<SimilaritySeries> {
        let values: Vec<f64> = series.samples().iter().map(|s| self.normalize(s.value)).collect();
        series.with_values(&values)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = format!(
            "gamma={}\nnorm_min={}\nnorm_max={}\nalpha={}\n",
            self.gamma, self.norm_min, self.norm_max, self.alpha
        );
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (mut gamma, mut norm_min, mut norm_max, mut alpha) = (None, None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, "expected key=value"))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad number `{}`", value.trim())))?;
            let slot = match key.trim() {
                "gamma" => &mut gamma,
                "norm_min" => &mut norm_min,
                "norm_max" => &mut norm_max,
                "alpha" => &mut alpha,
                other => return Err(Error::parse(path, i + 1, format!("unknown key `{other}`"))),
            };
            *slot = Some(v);
        }
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::parse(path, 0, format!("missing `{name}`")));
        let cal = Calibration {
            gamma: need(gamma, "gamma")?,
            norm_min: need(norm_min, "norm_min")?,
            norm_max: need(norm_max, "norm_max")?,
            alpha: need(alpha, "alpha")?,
        };
        if !(0.0..=1.0).contains(&cal.gamma) || cal.norm_max < cal.norm_min {
            return Err(Error::parse(path, 0, "gamma outside [0, 1] or norm_max below norm_min"));
        }
        Ok(cal)
    }
}

/// Nearest-rank `p`-quantile (`0 < p <= 1`) of an ascending slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Min-max normalises the training evidence, drops exact zeros, and takes
/// the nearest-rank `(1 - alpha_sig)` percentile of what remains.
pub fn calibrate_gamma(training_scores: &[f64], alpha_sig: f64) -> Result<Calibration> {
    if !(alpha_sig > 0.0 && alpha_sig < 1.0) {
        return Err(Error::invalid(format!("alpha_sig {alpha_sig} outside (0, 1)")));
    }
    if training_scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training scores contain a non-finite value"));
    }
    let lo = training_scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = training_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if training_scores.is_empty() || training_scores.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("training scores are empty or all zero"));
    }
    if lo == hi {
        log::warn!("training scores are constant ({lo}); gamma set to 1");
        return Ok(Calibration {
            gamma: 1.0,
            norm_min: lo,
            norm_max: hi,
            alpha: alpha_sig,
        });
    }
    let mut normalized: Vec<f64> = training_scores
        .iter()
        .map(|&v| (v - lo) / (hi - lo))
        .filter(|&v| v != 0.0)
        .collect();
    normalized.sort_by(f64::total_cmp);
    let gamma = nearest_rank(&normalized, 1.0 - alpha_sig);
    if gamma >= 1.0 {
        log::warn!(
            "gamma is the training maximum ({} samples at alpha {alpha_sig}); normalised evidence never exceeds it, so the detector cannot alarm",
            normalized.len()
        );
    }
    Ok(Calibration {
        gamma,
        norm_min: lo,
        norm_max: hi,
        alpha: alpha_sig,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CusumState {
    pub s: f64,
    pub t: u64,
}

pub fn cusum_step(state: CusumState, e_t: f64, gamma: f64) -> CusumState {
    CusumState {
        s: (state.s + e_t - gamma).max(0.0),
        t: state.t + 1,
    }
}

/// Streaming detector holding its own state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cusum {
    gamma: f64,
    h: f64,
    state: CusumState,
}

impl Cusum {
    pub fn new(gamma: f64, h: f64) -> Result<Self> {
        Self::resume(gamma, h, CusumState::default())
    }

    pub fn resume(gamma: f64, h: f64, state: CusumState) -> Result<Self> {
        if !gamma.is_finite() || !(h > 0.0) || state.s < 0.0 {
            return Err(Error::invalid("CUSUM needs finite gamma, h > 0 and s >= 0"));
        }
        Ok(Cusum { gamma, h, state })
    }

    /// Feeds one sample; true once the statistic reaches `h`.
    pub fn push(&mut self, e_t: f64) -> bool {
        self.state = cusum_step(self.state, e_t, self.gamma);
        self.state.s >= self.h
    }

    pub fn state(&self) -> CusumState {
        self.state
    }
}

/// The statistic after every sample, starting from `s = 0`.
pub fn statistic_trace(values: &[f64], gamma: f64) -> Vec<f64> {
    values
        .iter()
        .scan(CusumState::default(), |st, &e| {
            *st = cusum_step(*st, e, gamma);
            Some(st.s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alarm {
    pub sample_index: usize,
    pub timestamp_s: f64,
}

/// First sample at which the statistic reaches `h`.
pub fn detect(series: &SimilaritySeries, config: &CusumConfig) -> Result<Option<Alarm>> {
    config.validate()?;
    let mut c = Cusum::new(config.gamma, config.h)?;
    for (i, s) in series.samples().iter().enumerate() {
        if c.push(s.value) {
            return Ok(Some(Alarm {
                sample_index: i,
                timestamp_s: s.timestamp_s,
            }));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyAlarm {
    pub detection_time_s: f64,
    pub decrease_offset: usize,
    pub localized_frames: Vec<u64>,
}

/// Consecutive strict decreases that mark the end of the rise.
pub const DECREASE_RUN: usize = 2;

/// Finds the peak `T + M` after which the statistic falls for
/// [`DECREASE_RUN`] straight samples (or the series ends), then keeps the
/// frames in `[T, T + M]` whose evidence exceeds `g`.
pub fn localize(series: &SimilaritySeries, trace: &[f64], alarm_index: usize, g: f64) -> Result<AnomalyAlarm> {
    let samples = series.samples();
    if trace.len() != samples.len() {
        return Err(Error::invalid("statistic trace and series differ in length"));
    }
    if alarm_index >= samples.len() {
        return Err(Error::invalid(format!(
            "alarm index {alarm_index} is outside a series of {}",
            samples.len()
        )));
    }
    let last = samples.len() - 1;
    let peak = (alarm_index..=last)
        .find(|&p| p + DECREASE_RUN <= last && (p..p + DECREASE_RUN).all(|i| trace[i + 1] < trace[i]))
        .unwrap_or(last);
    Ok(AnomalyAlarm {
        detection_time_s: samples[alarm_index].timestamp_s,
        decrease_offset: peak - alarm_index,
        localized_frames: samples[alarm_index..=peak]
            .iter()
            .filter(|s| s.value > g)
            .map(|s: &SimilaritySample| s.frame_index)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn series(values: &[f64]) -> SimilaritySeries {
        SimilaritySeries::new(
            values
                .iter()
                .enumerate()
                .map(|(i, &v)| SimilaritySample {
                    frame_index: i as u64,
                    timestamp_s: i as f64,
                    value: v,
                })
                .collect(),
        )
        .unwrap()
    }

    fn cfg(gamma: f64, h: f64) -> CusumConfig {
        CusumConfig {
            gamma,
            h,
            g: gamma,
            alpha_sig: 0.05,
        }
    }

    #[test]
    fn percentile_example() {
        let c = calibrate_gamma(&[0.0, 0.2, 0.4, 0.6, 0.8, 1.0], 0.2).unwrap();
        assert!((c.gamma - 0.8).abs() < 1e-12);
        assert_eq!((c.norm_min, c.norm_max), (0.0, 1.0));
    }

    #[test]
    fn degenerate_and_empty() {
        let c = calibrate_gamma(&[0.3; 10], 0.05).unwrap();
        assert_eq!(c.gamma, 1.0);
        assert!(c.is_degenerate());
        assert!(calibrate_gamma(&[0.0; 4], 0.05).is_err());
        assert!(calibrate_gamma(&[], 0.05).is_err());
        assert!(calibrate_gamma(&[0.1, 0.2], 0.0).is_err());
    }

    #[test]
    fn percentile_matches_sort_oracle() {
        let mut c = Stream::new(3).cursor();
        let scores: Vec<f64> = (0..10_000).map(|_| c.uniform() * 0.7 - 0.1).collect();
        let cal = calibrate_gamma(&scores, 0.05).unwrap();
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s: Vec<f64> = scores
            .iter()
            .map(|v| (v - lo) / (hi - lo))
            .filter(|&v| v != 0.0)
            .collect();
        s.sort_by(f64::total_cmp);
        // 9999 nonzero values: rank ceil(0.95 * 9999) = 9500
        assert_eq!(s.len(), 9999);
        assert_eq!(cal.gamma, s[9499]);
    }

    #[test]
    fn recursion_examples() {
        assert_eq!(statistic_trace(&[0.2, 0.3], 0.5), vec![0.0, 0.0]);
        let t = statistic_trace(&[0.5, 0.1, 0.6], 0.2);
        for (a, b) in t.iter().zip([0.3, 0.2, 0.6]) {
            assert!((a - b).abs() < 1e-12);
        }
        let a = detect(&series(&[0.5, 0.1, 0.6]), &cfg(0.2, 0.5)).unwrap().unwrap();
        assert_eq!(a.sample_index, 2);
        assert_eq!(detect(&series(&[0.2, 0.3]), &cfg(0.5, 0.5)).unwrap(), None);
    }

    #[test]
    fn streaming_equals_batch() {
        let mut c = Stream::new(5).cursor();
        let v: Vec<f64> = (0..5000).map(|_| c.uniform()).collect();
        let batch = statistic_trace(&v, 0.55);
        let mut first = Cusum::new(0.55, 1e9).unwrap();
        v[..2000].iter().for_each(|&e| {
            first.push(e);
        });
        let mut second = Cusum::resume(0.55, 1e9, first.state()).unwrap();
        v[2000..].iter().for_each(|&e| {
            second.push(e);
        });
        assert_eq!(second.state().s, *batch.last().unwrap());
        assert_eq!(second.state().t, 5000);
    }

    #[test]
    fn localize_finds_peak() {
        // alarm at 1; s rises through offset 4 then falls three times
        let e = [0.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.0, 0.0, 0.0];
        let s = series(&e);
        let trace = statistic_trace(&e, 0.3);
        let a = localize(&s, &trace, 1, 0.5).unwrap();
        assert_eq!(a.decrease_offset, 4);
        assert_eq!(a.localized_frames, vec![1, 2, 3, 4, 5]);
        assert!(localize(&s, &trace, 1, 0.95).unwrap().localized_frames.is_empty());
        assert!(localize(&s, &trace, 9, 0.5).is_err());
    }

    #[test]
    fn single_dip_is_not_the_end() {
        let e = [0.9, 0.9, 0.1, 0.9, 0.9, 0.0, 0.0];
        let trace = statistic_trace(&e, 0.3);
        let a = localize(&series(&e), &trace, 0, 0.5).unwrap();
        assert_eq!(a.decrease_offset, 4);
    }

    #[test]
    fn calibration_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cal.txt");
        let c = Calibration {
            gamma: 0.8125,
            norm_min: -0.03,
            norm_max: 0.97,
            alpha: 0.05,
        };
        c.write(&p).unwrap();
        assert_eq!(Calibration::load(&p).unwrap(), c);
        fs::write(&p, "gamma=0.5\nnorm_min=0\n").unwrap();
        assert!(Calibration::load(&p).is_err());
        fs::write(&p, "gamma=x\n").unwrap();
        assert!(matches!(Calibration::load(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn normalisation_clamps() {
        let c = Calibration {
            gamma: 0.5,
            norm_min: 0.2,
            norm_max: 0.6,
            alpha: 0.05,
        };
        assert!((c.normalize(0.4) - 0.5).abs() < 1e-12);
        assert_eq!(c.normalize(0.9), 1.0);
        assert_eq!(c.normalize(-1.0), 0.0);
    }
}
