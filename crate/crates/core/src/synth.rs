//! Deterministic synthetic scenes with known stall onsets.
//!
//! A scene is a static luminance layer with filled rectangles for vehicles,
//! plus Gaussian pixel noise drawn from counter-addressed random streams.
//! The generator also simulates the vehicle detector on background
//! snapshots and writes the road mask and ground truth. The spec file
//! grammar is in `docs/scene_spec.md`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::candidates::SegmentationMask;
use crate::detections::{write_detections, BBox, ClassId, DetectionRecord};
use crate::error::{Error, Result};
use crate::frame_store::{write_manifest, write_pgm, Frame, FrameManifest, ManifestEntry};
use crate::metrics::{write_ground_truth, GroundTruthEvent};
use crate::rng::Stream;

/// Mean luminance below which the pipeline treats a frame as corrupted.
pub const DARK_MEAN: f64 = 5.0;
/// Sampling period of the corrupted-frame filter, in seconds.
pub const SAMPLE_PERIOD_S: f64 = 30.0;

const NOISE_STREAM: u64 = 1;
const DETECTOR_STREAM: u64 = 2;
const PRESET_STREAM: u64 = 3;
const TEXTURE_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StaticLayer {
    Flat(u8),
    Gradient,
    Stripes,
    Texture,
}

impl FromStr for StaticLayer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gradient" => Ok(StaticLayer::Gradient),
            "stripes" => Ok(StaticLayer::Stripes),
            "texture" => Ok(StaticLayer::Texture),
            _ => match s.strip_prefix("flat:").map(str::parse::<u8>) {
                Some(Ok(l)) => Ok(StaticLayer::Flat(l)),
                _ => Err(format!("unknown static layer `{s}`")),
            },
        }
    }
}

impl std::fmt::Display for StaticLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StaticLayer::Flat(l) => write!(f, "flat:{l}"),
            StaticLayer::Gradient => f.write_str("gradient"),
            StaticLayer::Stripes => f.write_str("stripes"),
            StaticLayer::Texture => f.write_str("texture"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleTrack {
    pub w: f64,
    pub h: f64,
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub vy: f64,
    pub enter_s: f64,
    pub exit_s: f64,
    pub lum: u8,
}

impl VehicleTrack {
    pub fn box_at(&self, t: f64) -> Option<BBox> {
        if t < self.enter_s || t >= self.exit_s {
            return None;
        }
        let dt = t - self.enter_s;
        Some(BBox {
            x: self.x0 + self.vx * dt,
            y: self.y0 + self.vy * dt,
            w: self.w,
            h: self.h,
        })
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

/// A vehicle that stops at `onset_s` and stays until `release_s` (or the
/// end of the video).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StallEvent {
    pub bbox: BBox,
    pub onset_s: f64,
    pub release_s: Option<f64>,
    pub lum: u8,
}

impl StallEvent {
    pub fn active(&self, t: f64) -> bool {
        t >= self.onset_s && self.release_s.is_none_or(|r| t < r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sign {
    pub bbox: BBox,
    pub lum: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorNoise {
    pub miss_rate: f64,
    pub jitter_px: f64,
    pub false_positive_rate: f64,
    pub conf_lo: f64,
    pub conf_hi: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        DetectorNoise {
            miss_rate: 0.0,
            jitter_px: 0.0,
            false_positive_rate: 0.0,
            conf_lo: 0.6,
            conf_hi: 0.99,
        }
    }
}

/// Slowest tracks the simulated detector sees: anything under this speed
/// lingers long enough to bleed into a background snapshot.
pub const DETECTABLE_SPEED_PX_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub duration_s: f64,
    pub fps: f64,
    pub snapshot_interval: u32,
    pub static_layer: StaticLayer,
    pub noise_sigma: f64,
    pub seed: u64,
    pub video_id: String,
    pub roads: Vec<(u32, u32, u32, u32)>,
    pub tracks: Vec<VehicleTrack>,
    /// Anomalies: these go to the ground truth.
    pub stalls: Vec<StallEvent>,
    /// Legitimately stopped vehicles (off-road parking); never ground truth.
    pub parked: Vec<StallEvent>,
    pub signs: Vec<Sign>,
    pub corrupted_windows: Vec<(f64, f64)>,
    pub detector: DetectorNoise,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 48,
            duration_s: 60.0,
            fps: 1.0,
            snapshot_interval: 120,
            static_layer: StaticLayer::Flat(128),
            noise_sigma: 2.0,
            seed: 0,
            video_id: "scene".into(),
            roads: Vec::new(),
            tracks: Vec::new(),
            stalls: Vec::new(),
            parked: Vec::new(),
            signs: Vec::new(),
            corrupted_windows: Vec::new(),
            detector: DetectorNoise::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::invalid(msg)
}

impl SceneSpec {
    pub fn frame_count(&self) -> u64 {
        (self.duration_s * self.fps).round() as u64
    }

    pub fn timestamp(&self, frame_index: u64) -> f64 {
        frame_index as f64 / self.fps
    }

    pub fn snapshot_interval_s(&self) -> f64 {
        self.snapshot_interval as f64 / self.fps
    }

    fn inside(&self, b: &BBox) -> bool {
        const EPS: f64 = 1e-6;
        b.x >= -EPS && b.y >= -EPS && b.right() <= self.width as f64 + EPS && b.bottom() <= self.height as f64 + EPS
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(invalid(format!(
                "scene {}x{} is smaller than 8x8",
                self.width, self.height
            )));
        }
        if !(self.duration_s > 0.0 && self.fps > 0.0) || self.frame_count() == 0 {
            return Err(invalid("duration_s and fps must give at least one frame"));
        }
        if self.snapshot_interval == 0 {
            return Err(invalid("snapshot_interval must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma must be a nonnegative number"));
        }
        if self.video_id.is_empty() || self.video_id.chars().any(char::is_whitespace) {
            return Err(invalid("video_id must be a nonempty word"));
        }
        for &(x, y, w, h) in &self.roads {
            if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
                return Err(invalid(format!("road ({x}, {y}, {w}, {h}) leaves the frame")));
            }
        }
        for t in &self.tracks {
            if !(t.w > 0.0 && t.h > 0.0 && t.enter_s < t.exit_s) {
                return Err(invalid("track needs a positive size and enter_s < exit_s"));
            }
            let dt = t.exit_s - t.enter_s;
            let end = BBox {
                x: t.x0 + t.vx * dt,
                y: t.y0 + t.vy * dt,
                w: t.w,
                h: t.h,
            };
            let start = BBox {
                x: t.x0,
                y: t.y0,
                w: t.w,
                h: t.h,
            };
            if !self.inside(&start) || !self.inside(&end) {
                return Err(invalid(format!("track entering at {} s leaves the frame", t.enter_s)));
            }
        }
        for (what, list) in [("stall", &self.stalls), ("parked", &self.parked)] {
            for s in list {
                if !self.inside(&s.bbox) || s.bbox.w <= 0.0 || s.bbox.h <= 0.0 {
                    return Err(invalid(format!("{what} at onset {} s leaves the frame", s.onset_s)));
                }
                if !(s.onset_s >= 0.0 && s.onset_s < self.duration_s) {
                    return Err(invalid(format!("{what} onset {} s outside the video", s.onset_s)));
                }
                if s.release_s.is_some_and(|r| r <= s.onset_s) {
                    return Err(invalid(format!("{what} released before its onset {} s", s.onset_s)));
                }
            }
        }
        for s in &self.signs {
            if !self.inside(&s.bbox) {
                return Err(invalid("sign leaves the frame"));
            }
        }
        for &(a, b) in &self.corrupted_windows {
            if !(a >= 0.0 && a < b) {
                return Err(invalid(format!("corrupted window [{a}, {b}) is empty or negative")));
            }
        }
        let d = &self.detector;
        let unit = 0.0..=1.0;
        if !unit.contains(&d.miss_rate)
            || !unit.contains(&d.false_positive_rate)
            || !unit.contains(&d.conf_lo)
            || !unit.contains(&d.conf_hi)
            || d.conf_lo > d.conf_hi
            || !(d.jitter_px >= 0.0)
        {
            return Err(invalid(
                "detector rates and confidences must lie in [0, 1] with conf_lo <= conf_hi",
            ));
        }
        Ok(())
    }

    pub fn mask(&self) -> SegmentationMask {
        SegmentationMask::from_rects(self.width, self.height, &self.roads).expect("validated dimensions")
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthEvent> {
        self.stalls
            .iter()
            .map(|s| GroundTruthEvent {
                video_id: self.video_id.clone(),
                start_s: s.onset_s,
                end_s: s.release_s,
            })
            .collect()
    }

    pub fn is_corrupted(&self, t: f64) -> bool {
        self.corrupted_windows.iter().any(|&(a, b)| t >= a && t < b)
    }

    /// The highway preset: 800x410, 900 s at 1 fps, four traffic lanes, a
    /// shoulder where 1-3 vehicles stall, and an off-road parking strip.
    pub fn highway(seed: u64) -> Self {
        let mut c = Stream::new(seed).child(PRESET_STREAM).cursor();
        let (width, height) = (800u32, 410u32);
        let duration_s = 900.0;
        let mut spec = SceneSpec {
            width,
            height,
            duration_s,
            fps: 1.0,
            snapshot_interval: 120,
            static_layer: StaticLayer::Texture,
            noise_sigma: 2.0,
            seed,
            video_id: format!("highway_{seed:03}"),
            roads: vec![(0, 0, width, 345)],
            ..SceneSpec::default()
        };

        for (lane, y) in [30.0, 90.0, 150.0, 210.0].into_iter().enumerate() {
            let mut t = c.range(0.0, 20.0);
            while t < duration_s - 5.0 {
                let w = c.range(36.0, 56.0).round();
                let h = c.range(18.0, 26.0).round();
                let v = c.range(18.0, 32.0);
                let span = (width as f64 - w) / v;
                let lum = c.range(20.0, 90.0) as u8;
                let (x0, vx) = if lane % 2 == 0 {
                    (0.0, v)
                } else {
                    (width as f64 - w, -v)
                };
                spec.tracks.push(VehicleTrack {
                    w,
                    h,
                    x0,
                    y0: y + c.range(0.0, 30.0 - h),
                    vx,
                    vy: 0.0,
                    enter_s: t,
                    exit_s: (t + span).min(duration_s),
                    lum,
                });
                t += c.range(25.0, 70.0);
            }
        }
        if seed % 3 == 1 {
            // a crawler: its detections spread out and must be filtered
            spec.tracks.push(VehicleTrack {
                w: 44.0,
                h: 22.0,
                x0: 40.0,
                y0: 214.0,
                vx: 0.6,
                vy: 0.0,
                enter_s: 60.0,
                exit_s: 840.0,
                lum: 50,
            });
        }

        // Stalls and the off-road parked car each get their own slot across
        // the frame so clusters stay evenly spaced; the elbow rule merges
        // close or lopsided clusters.
        let n = 1 + (seed % 3) as usize;
        let slots = if n < 3 { n + 1 } else { n };
        let slot = width as f64 / slots as f64;
        let distractor = if slots > n { Some(c.below(slots)) } else { None };
        for i in (0..slots).filter(|&i| Some(i) != distractor) {
            let w = c.range(38.0, 50.0).round();
            let h = c.range(18.0, 24.0).round();
            let mid = (i as f64 + 0.5) * slot - w / 2.0;
            let x = (mid + c.range(-30.0, 30.0)).round();
            let y = c.range(292.0, 318.0 - h).round();
            spec.stalls.push(StallEvent {
                bbox: BBox { x, y, w, h },
                onset_s: c.range(150.0, 350.0).round(),
                release_s: None,
                lum: c.range(25.0, 60.0) as u8,
            });
        }
        if let Some(i) = distractor {
            // parked late enough to stay a light cluster next to the stalls
            spec.parked.push(StallEvent {
                bbox: BBox {
                    x: ((i as f64 + 0.5) * slot - 22.0).round(),
                    y: 365.0,
                    w: 44.0,
                    h: 22.0,
                },
                onset_s: c.range(250.0, 450.0).round(),
                release_s: None,
                lum: 40,
            });
        }
        if seed.is_multiple_of(4) {
            spec.corrupted_windows.push((780.0, 810.0));
        }
        spec
    }
}

fn parse_f64(v: &str, key: &str) -> std::result::Result<f64, String> {
    v.trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("`{key}` expects a number, got `{v}`"))
}

fn parse_list(v: &str, key: &str, lens: &[usize]) -> std::result::Result<Vec<f64>, String> {
    let vals: Vec<f64> = v
        .split(',')
        .map(|f| parse_f64(f, key))
        .collect::<std::result::Result<_, _>>()?;
    if !lens.contains(&vals.len()) {
        return Err(format!(
            "`{key}` expects {lens:?} comma-separated values, got {}",
            vals.len()
        ));
    }
    Ok(vals)
}

fn lum(v: f64, key: &str) -> std::result::Result<u8, String> {
    if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
        Ok(v as u8)
    } else {
        Err(format!("`{key}` luminance {v} is not an integer in [0, 255]"))
    }
}

fn stall_from(vals: &[f64], key: &str) -> std::result::Result<StallEvent, String> {
    let release_s = (vals.len() == 7).then(|| vals[5]);
    Ok(StallEvent {
        bbox: BBox {
            x: vals[0],
            y: vals[1],
            w: vals[2],
            h: vals[3],
        },
        onset_s: vals[4],
        release_s,
        lum: lum(vals[vals.len() - 1], key)?,
    })
}

/// Parses a scene spec. A `preset=highway` line starts from the preset
/// (using the file's seed); scalar keys then override it and any repeated
/// key present in the file replaces the preset's list for that key.
pub fn parse_scene_spec(text: &str, path: &Path) -> Result<SceneSpec> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, "expected key=value"))?;
        lines.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    let seed = match lines.iter().rev().find(|l| l.1 == "seed") {
        Some((n, _, v)) => v
            .parse::<u64>()
            .map_err(|_| Error::parse(path, *n, format!("bad seed `{v}`")))?,
        None => 0,
    };
    let mut spec = match lines.iter().find(|l| l.1 == "preset") {
        Some((_, _, v)) if v == "highway" => SceneSpec::highway(seed),
        Some((n, _, v)) => return Err(Error::parse(path, *n, format!("unknown preset `{v}`"))),
        None => SceneSpec::default(),
    };
    let mut replaced = std::collections::HashSet::new();
    for (n, key, v) in &lines {
        let err = |m: String| Error::parse(path, *n, m);
        let k = key.as_str();
        if matches!(k, "road" | "track" | "stall" | "parked" | "sign" | "corrupt") && replaced.insert(k.to_string()) {
            match k {
                "road" => spec.roads.clear(),
                "track" => spec.tracks.clear(),
                "stall" => spec.stalls.clear(),
                "parked" => spec.parked.clear(),
                "sign" => spec.signs.clear(),
                _ => spec.corrupted_windows.clear(),
            }
        }
        match k {
            "preset" | "seed" => {}
            "width" | "height" | "snapshot_interval" => {
                let x: u32 = v
                    .parse()
                    .map_err(|_| err(format!("`{k}` expects an integer, got `{v}`")))?;
                match k {
                    "width" => spec.width = x,
                    "height" => spec.height = x,
                    _ => spec.snapshot_interval = x,
                }
            }
            "duration_s" => spec.duration_s = parse_f64(v, k).map_err(err)?,
            "fps" => spec.fps = parse_f64(v, k).map_err(err)?,
            "noise_sigma" => spec.noise_sigma = parse_f64(v, k).map_err(err)?,
            "static_layer" => spec.static_layer = v.parse().map_err(err)?,
            "video_id" => spec.video_id = v.clone(),
            "road" => {
                let r = parse_list(v, k, &[4]).map_err(err)?;
                if r.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
                    return Err(err("road values must be nonnegative integers".into()));
                }
                spec.roads.push((r[0] as u32, r[1] as u32, r[2] as u32, r[3] as u32));
            }
            "track" => {
                let t = parse_list(v, k, &[9]).map_err(err)?;
                spec.tracks.push(VehicleTrack {
                    w: t[0],
                    h: t[1],
                    x0: t[2],
                    y0: t[3],
                    vx: t[4],
                    vy: t[5],
                    enter_s: t[6],
                    exit_s: t[7],
                    lum: lum(t[8], k).map_err(err)?,
                });
            }
            "stall" | "parked" => {
                let s = stall_from(&parse_list(v, k, &[6, 7]).map_err(err)?, k).map_err(err)?;
                if k == "stall" {
                    spec.stalls.push(s);
                } else {
                    spec.parked.push(s);
                }
            }
            "sign" => {
                let s = parse_list(v, k, &[5]).map_err(err)?;
                spec.signs.push(Sign {
                    bbox: BBox {
                        x: s[0],
                        y: s[1],
                        w: s[2],
                        h: s[3],
                    },
                    lum: lum(s[4], k).map_err(err)?,
                });
            }
            "corrupt" => {
                let c = parse_list(v, k, &[2]).map_err(err)?;
                spec.corrupted_windows.push((c[0], c[1]));
            }
            "detector" => {
                let d = parse_list(v, k, &[5]).map_err(err)?;
                spec.detector = DetectorNoise {
                    miss_rate: d[0],
                    jitter_px: d[1],
                    false_positive_rate: d[2],
                    conf_lo: d[3],
                    conf_hi: d[4],
                };
            }
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }
    spec.seed = seed;
    spec.validate()?;
    Ok(spec)
}

pub fn load_scene_spec(path: impl AsRef<Path>) -> Result<SceneSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene_spec(&text, path)
}

/// `round(sigma * Phi^-1((u + 0.5) / 65536))` for every 16-bit `u`, at
/// unit sigma scaled later. Shared by all scenes.
fn unit_noise_quantiles() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        (0..65536u32)
            .map(|u| n.inverse_cdf((u as f64 + 0.5) / 65536.0))
            .collect()
    })
}

fn noise_table(sigma: f64) -> Vec<i16> {
    unit_noise_quantiles()
        .iter()
        .map(|q| (sigma * q).round() as i16)
        .collect()
}

fn fill_rect(buf: &mut [u8], width: u32, height: u32, b: &BBox, lum: u8) {
    let x0 = (b.x.round().max(0.0) as u32).min(width);
    let y0 = (b.y.round().max(0.0) as u32).min(height);
    let x1 = ((b.x + b.w).round().max(0.0) as u32).min(width);
    let y1 = ((b.y + b.h).round().max(0.0) as u32).min(height);
    for y in y0..y1 {
        let row = (y * width) as usize;
        buf[row + x0 as usize..row + x1 as usize].fill(lum);
    }
}

/// Renders frames of one scene.
pub struct Renderer<'a> {
    spec: &'a SceneSpec,
    base: Vec<u8>,
    noise: Vec<i16>,
}

impl<'a> Renderer<'a> {
    pub fn new(spec: &'a SceneSpec) -> Result<Self> {
        spec.validate()?;
        let (w, h) = (spec.width, spec.height);
        let texture = Stream::new(spec.seed).child(TEXTURE_STREAM);
        let blocks_x = w.div_ceil(16) as u64;
        let mut base: Vec<u8> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| match spec.static_layer {
                StaticLayer::Flat(l) => l,
                StaticLayer::Gradient => (60 + 140 * x / (w - 1).max(1)) as u8,
                StaticLayer::Stripes => {
                    if (x / 16) % 2 == 0 {
                        90
                    } else {
                        160
                    }
                }
                StaticLayer::Texture => {
                    let block = (y / 16) as u64 * blocks_x + (x / 16) as u64;
                    150 + (texture.at(block) % 51) as u8
                }
            })
            .collect();
        for s in &spec.signs {
            fill_rect(&mut base, w, h, &s.bbox, s.lum);
        }
        Ok(Renderer {
            spec,
            base,
            noise: noise_table(spec.noise_sigma),
        })
    }

    /// Static layer with signs, no vehicles, no noise.
    pub fn static_layer(&self) -> &[u8] {
        &self.base
    }

    pub fn frame(&self, frame_index: u64) -> Frame {
        let spec = self.spec;
        let (w, h) = (spec.width, spec.height);
        let t = spec.timestamp(frame_index);
        let npx = (w * h) as usize;
        let lum = if spec.is_corrupted(t) {
            vec![0u8; npx]
        } else {
            let mut buf = self.base.clone();
            for s in spec.parked.iter().chain(&spec.stalls).filter(|s| s.active(t)) {
                fill_rect(&mut buf, w, h, &s.bbox, s.lum);
            }
            for tr in &spec.tracks {
                if let Some(b) = tr.box_at(t) {
                    fill_rect(&mut buf, w, h, &b, tr.lum);
                }
            }
            let stream = Stream::new(spec.seed).child(NOISE_STREAM).child(frame_index);
            for (c, chunk) in buf.chunks_mut(4).enumerate() {
                let bits = stream.at(c as u64);
                for (lane, px) in chunk.iter_mut().enumerate() {
                    let n = self.noise[((bits >> (16 * lane)) & 0xFFFF) as usize];
                    *px = (*px as i16 + n).clamp(0, 255) as u8;
                }
            }
            buf
        };
        Frame::new(w, h, lum, frame_index, t).expect("validated dimensions")
    }
}

/// Frame indices that survive the corrupted-frame filter, given each
/// frame's mean luminance.
fn surviving(spec: &SceneSpec, means: &[f64]) -> Vec<u64> {
    let mut dropped = std::collections::HashSet::new();
    let mut current = None;
    for (i, &m) in means.iter().enumerate() {
        let win = (spec.timestamp(i as u64) / SAMPLE_PERIOD_S).floor() as i64;
        if current != Some(win) {
            current = Some(win);
            if m < DARK_MEAN {
                dropped.insert(win);
            }
        }
    }
    (0..means.len() as u64)
        .filter(|&i| !dropped.contains(&((spec.timestamp(i) / SAMPLE_PERIOD_S).floor() as i64)))
        .collect()
}

/// The surviving frames assuming only the corrupted windows are dark, which
/// holds for any scene whose static layer is brighter than the filter
/// threshold. Lets detections be simulated without rendering.
pub fn nominal_surviving_frames(spec: &SceneSpec) -> Vec<u64> {
    let means: Vec<f64> = (0..spec.frame_count())
        .map(|i| {
            if spec.is_corrupted(spec.timestamp(i)) {
                0.0
            } else {
                255.0
            }
        })
        .collect();
    surviving(spec, &means)
}

/// Simulated detector output on the background snapshots of the filtered
/// timeline. Snapshot `j` sits at the `(j + 1) * interval`-th surviving
/// frame.
pub fn simulate_detections(spec: &SceneSpec, surviving_frames: &[u64]) -> Vec<DetectionRecord> {
    let interval = spec.snapshot_interval as usize;
    let snapshots = surviving_frames.len() / interval;
    let det = &spec.detector;
    let root = Stream::new(spec.seed).child(DETECTOR_STREAM);
    let dwell = spec.snapshot_interval_s();
    let mut out = Vec::new();
    for j in 0..snapshots {
        let t = spec.timestamp(surviving_frames[(j + 1) * interval - 1]);
        let mut truth: Vec<BBox> = Vec::new();
        for s in spec.stalls.iter().chain(&spec.parked) {
            if s.active(t) && t - s.onset_s >= dwell {
                truth.push(s.bbox);
            }
        }
        for tr in &spec.tracks {
            if tr.speed() < DETECTABLE_SPEED_PX_S {
                if let Some(b) = tr.box_at(t) {
                    truth.push(b);
                }
            }
        }
        truth.extend(spec.signs.iter().map(|s| s.bbox));

        let mut c = root.child(j as u64).cursor();
        let (fw, fh) = (spec.width as f64, spec.height as f64);
        for b in truth {
            let missed = c.bernoulli(det.miss_rate);
            let (jx, jy) = (c.normal() * det.jitter_px, c.normal() * det.jitter_px);
            let conf = c.range(det.conf_lo, det.conf_hi);
            if missed {
                continue;
            }
            let x = (b.x + jx).clamp(0.0, fw - b.w);
            let y = (b.y + jy).clamp(0.0, fh - b.h);
            out.push(DetectionRecord {
                snapshot_index: j as u32,
                class_id: ClassId::Car,
                confidence: conf,
                bbox: BBox { x, y, w: b.w, h: b.h },
            });
        }
        if c.bernoulli(det.false_positive_rate) {
            let (w, h) = (40.0, 20.0);
            let x = c.range(0.0, fw - w).round();
            let y = c.range(0.0, fh - h).round();
            let conf = c.range(det.conf_lo, det.conf_hi);
            out.push(DetectionRecord {
                snapshot_index: j as u32,
                class_id: ClassId::Truck,
                confidence: conf,
                bbox: BBox { x, y, w, h },
            });
        }
    }
    crate::detections::sort_records(&mut out);
    out
}

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub manifest: FrameManifest,
    pub detections: Vec<DetectionRecord>,
    pub mask: SegmentationMask,
    pub ground_truth: Vec<GroundTruthEvent>,
    /// Frame indices the corrupted-frame filter will keep.
    pub surviving_frames: Vec<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const DETECTIONS_FILE: &str = "detections.csv";
pub const MASK_FILE: &str = "mask.pgm";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.txt";
pub const FRAMES_DIR: &str = "frames";

/// Frames rendered per parallel batch; bounds memory on long scenes.
const RENDER_BATCH: u64 = 64;

/// Renders and writes the whole scene under `out_dir`.
pub fn generate(spec: &SceneSpec, out_dir: &Path) -> Result<GeneratedScene> {
    let renderer = Renderer::new(spec)?;
    let frames_dir = out_dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let n = spec.frame_count();
    let mut entries = Vec::with_capacity(n as usize);
    let mut means = Vec::with_capacity(n as usize);
    let mut start = 0;
    while start < n {
        let end = (start + RENDER_BATCH).min(n);
        let batch: Vec<(ManifestEntry, f64)> = (start..end)
            .into_par_iter()
            .map(|i| {
                let frame = renderer.frame(i);
                let rel = PathBuf::from(FRAMES_DIR).join(format!("{i:06}.pgm"));
                write_pgm(&out_dir.join(&rel), spec.width, spec.height, frame.luminance())?;
                Ok((
                    ManifestEntry {
                        frame_index: i,
                        timestamp_s: frame.timestamp_s,
                        path: rel,
                    },
                    frame.mean(),
                ))
            })
            .collect::<Result<_>>()?;
        for (e, m) in batch {
            entries.push(e);
            means.push(m);
        }
        start = end;
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &entries)?;
    let manifest = FrameManifest::from_entries(out_dir, entries)?.with_dims(spec.width, spec.height);

    let surviving_frames = surviving(spec, &means);
    let detections = simulate_detections(spec, &surviving_frames);
    write_detections(&out_dir.join(DETECTIONS_FILE), &detections)?;
    let mask = spec.mask();
    mask.write(&out_dir.join(MASK_FILE))?;
    let ground_truth = spec.ground_truth();
    write_ground_truth(&out_dir.join(GROUND_TRUTH_FILE), &ground_truth)?;
    Ok(GeneratedScene {
        manifest,
        detections,
        mask,
        ground_truth,
        surviving_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::{iou, load_detections};
    use crate::frame_store::load_manifest;

    fn small() -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 48,
            duration_s: 40.0,
            snapshot_interval: 10,
            roads: vec![(0, 0, 64, 40)],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn noise_table_is_symmetric_normal() {
        let t = noise_table(2.0);
        assert_eq!(t.len(), 65536);
        assert_eq!(t[0], -t[65535]);
        let mean = t.iter().map(|&v| v as f64).sum::<f64>() / 65536.0;
        let var = t.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 65536.0;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 2.0).abs() < 0.1);
        assert!(noise_table(0.0).iter().all(|&v| v == 0));
    }

    #[test]
    fn empty_scene_is_static_plus_noise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let g = generate(&spec, dir.path()).unwrap();
        assert!(g.detections.is_empty());
        assert!(g.ground_truth.is_empty());
        let f = g.manifest.read_frame(7).unwrap();
        assert!(f.luminance().iter().all(|&v| (120..=136).contains(&v)));
        assert!((f.mean() - 128.0).abs() < 0.5);
        let quiet = SceneSpec {
            noise_sigma: 0.0,
            ..spec
        };
        let r = Renderer::new(&quiet).unwrap();
        assert!(r.frame(3).luminance().iter().all(|&v| v == 128));
    }

    #[test]
    fn stall_detected_after_dwell() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            stalls: vec![StallEvent {
                bbox: BBox {
                    x: 10.0,
                    y: 10.0,
                    w: 20.0,
                    h: 10.0,
                },
                onset_s: 12.0,
                release_s: None,
                lum: 30,
            }],
            ..small()
        };
        let g = generate(&spec, dir.path()).unwrap();
        // snapshots at t = 9, 19, 29, 39; the stall has dwelt 10 s by t = 29
        let snaps: Vec<u32> = g.detections.iter().map(|d| d.snapshot_index).collect();
        assert_eq!(snaps, vec![2, 3]);
        assert!(g.detections.iter().all(|d| iou(&d.bbox, &spec.stalls[0].bbox) >= 0.9));
        assert_eq!(g.ground_truth.len(), 1);
        assert_eq!(g.ground_truth[0].start_s, 12.0);
        assert_eq!(load_detections(dir.path().join(DETECTIONS_FILE)).unwrap(), g.detections);
    }

    #[test]
    fn written_frames_match_renderer() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            static_layer: StaticLayer::Texture,
            tracks: vec![VehicleTrack {
                w: 10.0,
                h: 8.0,
                x0: 0.0,
                y0: 5.0,
                vx: 1.5,
                vy: 0.0,
                enter_s: 2.0,
                exit_s: 30.0,
                lum: 20,
            }],
            ..small()
        };
        let g = generate(&spec, dir.path()).unwrap();
        let r = Renderer::new(&spec).unwrap();
        for i in [0, 5, 17, 39] {
            assert_eq!(g.manifest.read_frame(i).unwrap(), r.frame(i));
        }
        let loaded = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.entries(), g.manifest.entries());
    }

    #[test]
    fn corrupted_windows_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            duration_s: 150.0,
            corrupted_windows: vec![(30.0, 60.0), (90.0, 120.0)],
            ..small()
        };
        let g = generate(&spec, dir.path()).unwrap();
        assert_eq!(g.surviving_frames.len(), 90);
        assert!(g.manifest.read_frame(45).unwrap().luminance().iter().all(|&v| v == 0));
        let kept = crate::frame_store::filter_corrupted(&g.manifest, DARK_MEAN, SAMPLE_PERIOD_S).unwrap();
        let idx: Vec<u64> = kept.entries().iter().map(|e| e.frame_index).collect();
        assert_eq!(idx, g.surviving_frames);
    }

    #[test]
    fn spec_parse_and_errors() {
        let text = "width=100\nheight=60\nduration_s=30\nsnapshot_interval=10\nstatic_layer=flat:90\n\
                    road=0,0,100,50\nstall=10,10,20,10,5,25,40\ntrack=10,8,0,30,2,0,0,20,50\n\
                    parked=60,50,20,8,3,40\nsign=90,2,5,5,250\ncorrupt=10,12\ndetector=0.1,3,0.05,0.5,0.9\nseed=4\n";
        let s = parse_scene_spec(text, Path::new("x")).unwrap();
        assert_eq!(s.stalls[0].release_s, Some(25.0));
        assert_eq!(s.parked[0].release_s, None);
        assert_eq!(s.static_layer, StaticLayer::Flat(90));
        assert_eq!(s.detector.jitter_px, 3.0);
        assert_eq!(s.seed, 4);

        for (bad, line) in [("width=1x\n", 1), ("\nbogus=1\n", 2), ("stall=1,2,3\n", 1)] {
            match parse_scene_spec(bad, Path::new("x")) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line),
                other => panic!("{bad}: {other:?}"),
            }
        }
        assert!(parse_scene_spec("stall=60,10,20,10,5,40\n", Path::new("x")).is_err());
    }

    #[test]
    fn preset_overrides() {
        let s = parse_scene_spec("preset=highway\nseed=5\nduration_s=600\n", Path::new("x")).unwrap();
        assert_eq!(s.duration_s, 600.0);
        assert_eq!(s.stalls, SceneSpec::highway(5).stalls);
        let s = parse_scene_spec("preset=highway\nstall=100,300,40,20,200,40\n", Path::new("x")).unwrap();
        assert_eq!(s.stalls.len(), 1);
        assert!(!s.tracks.is_empty());
    }

    #[test]
    fn highway_presets_are_valid() {
        for seed in 0..20 {
            let s = SceneSpec::highway(seed);
            s.validate().unwrap();
            assert_eq!(s.stalls.len(), 1 + (seed % 3) as usize);
            let mask = s.mask();
            for st in &s.stalls {
                let (cx, cy) = st.bbox.centroid();
                assert!(mask.is_road_at(cx, cy));
            }
            for p in &s.parked {
                let (cx, cy) = p.bbox.centroid();
                assert!(!mask.is_road_at(cx, cy));
            }
        }
    }
}
