//! Pipeline configuration: one `key = value` per line, `#` comments.
//! Every key is optional; unknown keys and out-of-range values are
//! rejected with the offending field named.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::background::MixtureParams;
use crate::candidates::{CandidateParams, ElbowParams};
use crate::detections::FilterParams;
use crate::error::{Error, Result};
use crate::similarity::{EdgeMode, SsimConstants};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub mean_threshold: f64,
    pub sample_period_s: f64,
    pub snapshot_interval: usize,
    pub mixture: MixtureParams,
    pub filters: FilterParams,
    pub k_max: usize,
    pub elbow_min_spread_px: f64,
    pub kmeans_max_iters: usize,
    pub kmeans_restarts: usize,
    pub roi_margin: u32,
    pub ssim_window: u32,
    pub savgol_window: usize,
    pub savgol_order: usize,
    pub savgol_edge: EdgeMode,
    pub stride: u64,
    pub persistence: usize,
    /// Static background outside the vehicle keeps SSIM near 0.9, so the
    /// pre-onset level is roughly the share of windows the vehicle misses;
    /// loose ROIs sit near 0.5 before the stall and near 1 after.
    pub ssim_threshold: f64,
    pub alpha_sig: f64,
    pub h: f64,
    /// Localisation threshold; `None` means "use the calibrated gamma".
    pub g: Option<f64>,
    pub window_s: f64,
    pub delay_cap_s: f64,
    pub seed: u64,
    /// 0 means one worker per available core.
    pub workers: usize,
    pub calibration: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let filters = FilterParams::default();
        let elbow = ElbowParams::default();
        PipelineConfig {
            mean_threshold: 5.0,
            sample_period_s: 30.0,
            snapshot_interval: 120,
            mixture: MixtureParams::default(),
            filters,
            k_max: elbow.k_max,
            elbow_min_spread_px: elbow.min_spread_px,
            kmeans_max_iters: elbow.max_iters,
            kmeans_restarts: elbow.n_init,
            roi_margin: 8,
            ssim_window: 8,
            savgol_window: 9,
            savgol_order: 2,
            savgol_edge: EdgeMode::Interp,
            stride: 10,
            persistence: 3,
            ssim_threshold: 0.65,
            alpha_sig: 0.05,
            h: 1.0,
            g: None,
            window_s: 10.0,
            delay_cap_s: 300.0,
            seed: 0,
            workers: 0,
            calibration: None,
        }
    }
}

fn field(name: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: name.to_string(),
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| field(name, format!("cannot parse `{v}`")))
}

fn check(name: &str, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(field(name, format!("must be {what}")))
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `key = value`"))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one field from its textual value (no range check).
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "mean_threshold" => self.mean_threshold = num(key, v)?,
            "sample_period_s" => self.sample_period_s = num(key, v)?,
            "snapshot_interval" => self.snapshot_interval = num(key, v)?,
            "max_components" => self.mixture.max_components = num(key, v)?,
            "learning_rate" => self.mixture.learning_rate = num(key, v)?,
            "var_init" => self.mixture.var_init = num(key, v)?,
            "var_floor" => self.mixture.var_floor = num(key, v)?,
            "match_threshold_sq" => self.mixture.match_threshold_sq = num(key, v)?,
            "background_ratio" => self.mixture.background_ratio = num(key, v)?,
            "prune_weight" => self.mixture.prune_weight = num(key, v)?,
            "iou_thresh" => self.filters.iou_thresh = num(key, v)?,
            "k1" => self.filters.k1 = num(key, v)?,
            "l1" => self.filters.l1 = num(key, v)?,
            "k2" => self.filters.k2 = num(key, v)?,
            "l2" => self.filters.l2 = num(key, v)?,
            "k_max" => self.k_max = num(key, v)?,
            "elbow_min_spread_px" => self.elbow_min_spread_px = num(key, v)?,
            "kmeans_max_iters" => self.kmeans_max_iters = num(key, v)?,
            "kmeans_restarts" => self.kmeans_restarts = num(key, v)?,
            "roi_margin" => self.roi_margin = num(key, v)?,
            "ssim_window" => self.ssim_window = num(key, v)?,
            "savgol_window" => self.savgol_window = num(key, v)?,
            "savgol_order" => self.savgol_order = num(key, v)?,
            "savgol_edge" => self.savgol_edge = v.parse().map_err(|m: String| field(key, m))?,
            "stride" => self.stride = num(key, v)?,
            "persistence" => self.persistence = num(key, v)?,
            "ssim_threshold" => self.ssim_threshold = num(key, v)?,
            "alpha_sig" => self.alpha_sig = num(key, v)?,
            "h" => self.h = num(key, v)?,
            "g" => self.g = Some(num(key, v)?),
            "window_s" => self.window_s = num(key, v)?,
            "delay_cap_s" => self.delay_cap_s = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "workers" => self.workers = num(key, v)?,
            "calibration" => self.calibration = Some(PathBuf::from(v)),
            other => return Err(field(other, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mixture;
        let f = &self.filters;
        let unit_open = |x: f64| x > 0.0 && x < 1.0;
        let pos = |x: f64| x > 0.0 && x.is_finite();
        check(
            "mean_threshold",
            (0.0..=255.0).contains(&self.mean_threshold),
            "in [0, 255]",
        )?;
        check("sample_period_s", pos(self.sample_period_s), "positive")?;
        check("snapshot_interval", self.snapshot_interval >= 1, "at least 1")?;
        check("max_components", (1..=255).contains(&m.max_components), "in [1, 255]")?;
        check("learning_rate", unit_open(m.learning_rate), "in (0, 1)")?;
        check("var_init", pos(m.var_init), "positive")?;
        check("var_floor", pos(m.var_floor), "positive")?;
        check("var_init", m.var_init >= m.var_floor, "at least var_floor")?;
        check("match_threshold_sq", pos(m.match_threshold_sq), "positive")?;
        check("background_ratio", unit_open(m.background_ratio), "in (0, 1)")?;
        check(
            "prune_weight",
            m.prune_weight >= 0.0 && m.prune_weight < m.learning_rate,
            "in [0, learning_rate)",
        )?;
        check("iou_thresh", unit_open(f.iou_thresh), "in (0, 1)")?;
        check("k1", f.k1 >= 1, "at least 1")?;
        check("l1", pos(f.l1), "positive")?;
        check("k2", f.k2 >= 1, "at least 1")?;
        check("l2", pos(f.l2), "positive")?;
        check("k_max", self.k_max >= 1, "at least 1")?;
        check("elbow_min_spread_px", self.elbow_min_spread_px >= 0.0, "nonnegative")?;
        check("kmeans_max_iters", self.kmeans_max_iters >= 1, "at least 1")?;
        check("kmeans_restarts", self.kmeans_restarts >= 1, "at least 1")?;
        check("ssim_window", self.ssim_window >= 4, "at least 4")?;
        check(
            "savgol_window",
            self.savgol_window % 2 == 1 && self.savgol_window >= 3,
            "odd and at least 3",
        )?;
        check(
            "savgol_order",
            self.savgol_order < self.savgol_window,
            "below savgol_window",
        )?;
        check("stride", self.stride >= 1, "at least 1")?;
        check("persistence", self.persistence >= 1, "at least 1")?;
        check(
            "ssim_threshold",
            (-1.0..=1.0).contains(&self.ssim_threshold),
            "in [-1, 1]",
        )?;
        check("alpha_sig", unit_open(self.alpha_sig), "in (0, 1)")?;
        check("h", pos(self.h), "positive")?;
        if let Some(g) = self.g {
            check("g", (0.0..=1.0).contains(&g), "in [0, 1]")?;
        }
        check(
            "window_s",
            self.window_s >= 0.0 && self.window_s.is_finite(),
            "nonnegative",
        )?;
        check("delay_cap_s", pos(self.delay_cap_s), "positive")?;
        Ok(())
    }

    pub fn ssim_constants(&self) -> SsimConstants {
        SsimConstants {
            window: self.ssim_window,
            ..SsimConstants::default()
        }
    }

    pub fn candidate_params(&self) -> CandidateParams {
        CandidateParams {
            elbow: ElbowParams {
                k_max: self.k_max,
                seed: self.seed,
                max_iters: self.kmeans_max_iters,
                n_init: self.kmeans_restarts,
                min_spread_px: self.elbow_min_spread_px,
            },
            roi_margin: self.roi_margin,
        }
    }

    /// The configuration as a loadable file.
    pub fn to_text(&self) -> String {
        let m = &self.mixture;
        let f = &self.filters;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        kv("mean_threshold", self.mean_threshold.to_string());
        kv("sample_period_s", self.sample_period_s.to_string());
        kv("snapshot_interval", self.snapshot_interval.to_string());
        kv("max_components", m.max_components.to_string());
        kv("learning_rate", m.learning_rate.to_string());
        kv("var_init", m.var_init.to_string());
        kv("var_floor", m.var_floor.to_string());
        kv("match_threshold_sq", m.match_threshold_sq.to_string());
        kv("background_ratio", m.background_ratio.to_string());
        kv("prune_weight", m.prune_weight.to_string());
        kv("iou_thresh", f.iou_thresh.to_string());
        kv("k1", f.k1.to_string());
        kv("l1", f.l1.to_string());
        kv("k2", f.k2.to_string());
        kv("l2", f.l2.to_string());
        kv("k_max", self.k_max.to_string());
        kv("elbow_min_spread_px", self.elbow_min_spread_px.to_string());
        kv("kmeans_max_iters", self.kmeans_max_iters.to_string());
        kv("kmeans_restarts", self.kmeans_restarts.to_string());
        kv("roi_margin", self.roi_margin.to_string());
        kv("ssim_window", self.ssim_window.to_string());
        kv("savgol_window", self.savgol_window.to_string());
        kv("savgol_order", self.savgol_order.to_string());
        kv("savgol_edge", self.savgol_edge.to_string());
        kv("stride", self.stride.to_string());
        kv("persistence", self.persistence.to_string());
        kv("ssim_threshold", self.ssim_threshold.to_string());
        kv("alpha_sig", self.alpha_sig.to_string());
        kv("h", self.h.to_string());
        if let Some(g) = self.g {
            kv("g", g.to_string());
        }
        kv("window_s", self.window_s.to_string());
        kv("delay_cap_s", self.delay_cap_s.to_string());
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        if let Some(c) = &self.calibration {
            kv("calibration", c.display().to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PipelineConfig> {
        PipelineConfig::parse(text, Path::new("cfg"))
    }

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(parse(&c.to_text()).unwrap(), c);
        let mut d = c.clone();
        d.g = Some(0.4);
        d.calibration = Some("cal.txt".into());
        d.savgol_edge = EdgeMode::Mirror;
        assert_eq!(parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn comments_and_overrides() {
        let c = parse("# header\nstride = 5   # inline\n\nh=2.5\n").unwrap();
        assert_eq!(c.stride, 5);
        assert_eq!(c.h, 2.5);
    }

    #[test]
    fn out_of_range_fields_named() {
        for (text, name) in [
            ("learning_rate = 1.5", "learning_rate"),
            ("iou_thresh = 0", "iou_thresh"),
            ("savgol_window = 8", "savgol_window"),
            ("savgol_order = 9", "savgol_order"),
            ("stride = 0", "stride"),
            ("alpha_sig = 1", "alpha_sig"),
            ("mean_threshold = 300", "mean_threshold"),
            ("g = 2", "g"),
            ("k1 = x", "k1"),
            ("colour = red", "colour"),
            ("savgol_edge = wrap", "savgol_edge"),
            ("var_floor = 300", "var_init"),
        ] {
            match parse(text) {
                Err(Error::Config { field, .. }) => assert_eq!(field, name, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(parse("stride"), Err(Error::Parse { line: 1, .. })));
    }
}
