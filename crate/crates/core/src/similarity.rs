//! SSIM evidence over a candidate region, its smoothing, and the backtracking
//! search for the anomaly onset.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::detections::BBox;
use crate::error::{Error, Result};
use crate::frame_store::{Frame, FrameManifest, ManifestEntry};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConstants {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub window: u32,
}

impl Default for SsimConstants {
    fn default() -> Self {
        SsimConstants {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
            window: 8,
        }
    }
}

impl SsimConstants {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 4 {
            return Err(Error::invalid(format!("SSIM window {} is below 4", self.window)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::invalid("SSIM constants must be positive"));
        }
        Ok(())
    }
}

/// Owned rectangular luminance crop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Patch {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "patch buffer of {} bytes does not fit {width}x{height}",
                data.len()
            )));
        }
        Ok(Patch { width, height, data })
    }

    /// Crops `roi` out of `frame`. The ROI must have integral coordinates
    /// and lie inside the frame.
    pub fn crop(frame: &Frame, roi: &BBox) -> Result<Self> {
        let (fw, fh) = frame.dims();
        let integral = [roi.x, roi.y, roi.w, roi.h].iter().all(|v| v.fract() == 0.0);
        if !integral || roi.x < 0.0 || roi.y < 0.0 || roi.right() > fw as f64 || roi.bottom() > fh as f64 {
            return Err(Error::invalid(format!(
                "roi ({}, {}, {}, {}) is not an integral box inside the {fw}x{fh} frame",
                roi.x, roi.y, roi.w, roi.h
            )));
        }
        let (x, y, w, h) = (roi.x as usize, roi.y as usize, roi.w as usize, roi.h as usize);
        let lum = frame.luminance();
        let mut data = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * fw as usize + x;
            data.extend_from_slice(&lum[start..start + w]);
        }
        Ok(Patch {
            width: w as u32,
            height: h as u32,
            data,
        })
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Summed-area tables of x, y, x², y² and xy over a patch pair. All sums are
/// exact integers.
struct Integrals {
    stride: usize,
    tables: [Vec<i64>; 5],
}

impl Integrals {
    fn new(a: &Patch, b: &Patch) -> Self {
        let (w, h) = (a.width as usize, a.height as usize);
        let stride = w + 1;
        let mut tables: [Vec<i64>; 5] = std::array::from_fn(|_| vec![0i64; stride * (h + 1)]);
        for y in 0..h {
            let mut row = [0i64; 5];
            for x in 0..w {
                let p = a.data[y * w + x] as i64;
                let q = b.data[y * w + x] as i64;
                let v = [p, q, p * p, q * q, p * q];
                for (t, (r, vi)) in tables.iter_mut().zip(row.iter_mut().zip(v)) {
                    *r += vi;
                    t[(y + 1) * stride + x + 1] = t[y * stride + x + 1] + *r;
                }
            }
        }
        Integrals { stride, tables }
    }

    fn window(&self, x: usize, y: usize, n: usize) -> [i64; 5] {
        let s = self.stride;
        std::array::from_fn(|i| {
            let t = &self.tables[i];
            t[(y + n) * s + x + n] - t[y * s + x + n] - t[(y + n) * s + x] + t[y * s + x]
        })
    }
}

/// Mean SSIM over every window position (stride 1) with uniform window
/// statistics and population (1/N) moments.
pub fn ssim(a: &Patch, b: &Patch, consts: &SsimConstants) -> Result<f64> {
    consts.validate()?;
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected_w: a.width,
            expected_h: a.height,
            actual_w: b.width,
            actual_h: b.height,
        });
    }
    let n = consts.window as usize;
    if (a.width as usize) < n || (a.height as usize) < n {
        return Err(Error::invalid(format!(
            "patch {}x{} is smaller than the {n}x{n} window",
            a.width, a.height
        )));
    }
    let ints = Integrals::new(a, b);
    let (c1, c2) = (consts.c1(), consts.c2());
    let nn = (n * n) as i64;
    let nn2 = (nn * nn) as f64;
    let (px, py) = (a.width as usize - n + 1, a.height as usize - n + 1);
    let mut total = 0.0;
    for y in 0..py {
        for x in 0..px {
            let [sa, sb, saa, sbb, sab] = ints.window(x, y, n);
            // every moment is an exact integer over N² before the division
            let mu_ab2 = (2 * sa * sb) as f64 / nn2;
            let mu_sq = (sa * sa + sb * sb) as f64 / nn2;
            let cov2 = (2 * (nn * sab - sa * sb)) as f64 / nn2;
            let var_sum = (nn * saa - sa * sa + nn * sbb - sb * sb) as f64 / nn2;
            total += ((mu_ab2 + c1) * (cov2 + c2)) / ((mu_sq + c1) * (var_sum + c2));
        }
    }
    Ok(total / (px * py) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilaritySample {
    pub frame_index: u64,
    pub timestamp_s: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimilaritySeries {
    samples: Vec<SimilaritySample>,
}

impl SimilaritySeries {
    pub fn new(samples: Vec<SimilaritySample>) -> Result<Self> {
        for w in samples.windows(2) {
            if w[1].frame_index <= w[0].frame_index {
                return Err(Error::invalid(format!(
                    "series frame indices not increasing ({} then {})",
                    w[0].frame_index, w[1].frame_index
                )));
            }
        }
        if let Some(s) = samples.iter().find(|s| !(-1.0..=1.0).contains(&s.value)) {
            return Err(Error::invalid(format!("series value {} outside [-1, 1]", s.value)));
        }
        Ok(SimilaritySeries { samples })
    }

    pub fn samples(&self) -> &[SimilaritySample] {
        &self.samples
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.value).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same timeline, new values (clamped to [-1, 1]).
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.samples.len() {
            return Err(Error::invalid("replacement values differ in length from the series"));
        }
        Ok(SimilaritySeries {
            samples: self
                .samples
                .iter()
                .zip(values)
                .map(|(s, &v)| SimilaritySample {
                    value: v.clamp(-1.0, 1.0),
                    ..*s
                })
                .collect(),
        })
    }
}

/// Manifest entries at frame indices `0, stride, 2*stride, ...` up to and
/// including `t_end`. Indices missing from the manifest (filtered frames)
/// are skipped.
pub fn sample_entries(manifest: &FrameManifest, t_end: Option<u64>, stride: u64) -> Result<Vec<&ManifestEntry>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    Ok(manifest
        .entries()
        .iter()
        .filter(|e| e.frame_index % stride == 0 && t_end.is_none_or(|t| e.frame_index <= t))
        .collect())
}

/// `e_t = ssim(roi of frame t, reference)` over the sampled frames.
pub fn roi_series_with_reference(
    manifest: &FrameManifest,
    roi: &BBox,
    reference: &Patch,
    t_end: Option<u64>,
    stride: u64,
    consts: &SsimConstants,
) -> Result<SimilaritySeries> {
    let mut samples = Vec::new();
    for entry in sample_entries(manifest, t_end, stride)? {
        let frame = manifest.read_entry(entry)?;
        let patch = Patch::crop(&frame, roi)?;
        samples.push(SimilaritySample {
            frame_index: entry.frame_index,
            timestamp_s: entry.timestamp_s,
            value: ssim(&patch, reference, consts)?.clamp(-1.0, 1.0),
        });
    }
    SimilaritySeries::new(samples)
}

/// Series against the ROI of the manifest frame at `reference_index`,
/// sampled up to that frame.
pub fn roi_series(
    manifest: &FrameManifest,
    roi: &BBox,
    reference_index: u64,
    stride: u64,
    consts: &SsimConstants,
) -> Result<SimilaritySeries> {
    let reference = Patch::crop(&manifest.read_frame(reference_index)?, roi)?;
    roi_series_with_reference(manifest, roi, &reference, Some(reference_index), stride, consts)
}

/// How the filter treats the first and last `window / 2` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeMode {
    /// Evaluate the polynomial fitted to the first (last) full window.
    #[default]
    Interp,
    /// Reflect the series about its end samples (`x[-i] = x[i]`).
    Mirror,
}

impl FromStr for EdgeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "interp" => Ok(EdgeMode::Interp),
            "mirror" => Ok(EdgeMode::Mirror),
            other => Err(format!("unknown edge mode `{other}` (expected interp or mirror)")),
        }
    }
}

impl fmt::Display for EdgeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeMode::Interp => "interp",
            EdgeMode::Mirror => "mirror",
        })
    }
}

fn check_window(window: usize, order: usize) -> Result<()> {
    if window.is_multiple_of(2) || window <= order || window < 3 {
        return Err(Error::invalid(format!(
            "Savitzky-Golay window {window} must be odd, at least 3 and above the order {order}"
        )));
    }
    Ok(())
}

/// Row `r` holds the weights that evaluate, at window position `r`, the
/// least-squares polynomial fitted to the whole window.
pub fn savgol_coefficients(window: usize, order: usize) -> Result<DMatrix<f64>> {
    check_window(window, order)?;
    let half = (window / 2) as f64;
    let v = DMatrix::from_fn(window, order + 1, |i, j| ((i as f64 - half) / half).powi(j as i32));
    let q = v.qr().q();
    Ok(&q * q.transpose())
}

/// Smooths `values`. Inputs shorter than the window are an error here;
/// see [`savgol`] for the lenient series form.
pub fn savgol_filter(values: &[f64], window: usize, order: usize, edge: EdgeMode) -> Result<Vec<f64>> {
    let h = savgol_coefficients(window, order)?;
    let n = values.len();
    if n < window {
        return Err(Error::InsufficientPoints {
            needed: window,
            available: n,
        });
    }
    let half = window / 2;
    let apply = |row: usize, start: usize| -> f64 { (0..window).map(|i| h[(row, i)] * values[start + i]).sum() };
    let mut out = vec![0.0; n];
    for (t, o) in out.iter_mut().enumerate().take(n - half).skip(half) {
        *o = apply(half, t - half);
    }
    match edge {
        EdgeMode::Interp => {
            for t in 0..half {
                out[t] = apply(t, 0);
                out[n - 1 - t] = apply(window - 1 - t, n - window);
            }
        }
        EdgeMode::Mirror => {
            let at = |i: isize| -> f64 {
                let last = n as isize - 1;
                let j = if i < 0 {
                    -i
                } else if i > last {
                    2 * last - i
                } else {
                    i
                };
                values[j.clamp(0, last) as usize]
            };
            for t in (0..half).chain(n - half..n) {
                out[t] = (0..window)
                    .map(|i| h[(half, i)] * at(t as isize + i as isize - half as isize))
                    .sum();
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub series: SimilaritySeries,
    /// False when the series was shorter than the window and came back as is.
    pub applied: bool,
}

/// Savitzky-Golay smoothing of a series, clamped to [-1, 1].
pub fn savgol(series: &SimilaritySeries, window: usize, order: usize, edge: EdgeMode) -> Result<Smoothed> {
    check_window(window, order)?;
    if series.len() < window {
        log::warn!(
            "series of {} samples is shorter than the smoothing window {window}; left unsmoothed",
            series.len()
        );
        return Ok(Smoothed {
            series: series.clone(),
            applied: false,
        });
    }
    let smoothed = savgol_filter(&series.values(), window, order, edge)?;
    Ok(Smoothed {
        series: series.with_values(&smoothed)?,
        applied: true,
    })
}

/// Timestamp of the first sample that starts a run of at least
/// `persistence` consecutive samples above `threshold`.
pub fn backtrack_onset(series: &SimilaritySeries, threshold: f64, persistence: usize) -> Result<Option<f64>> {
    if persistence == 0 {
        return Err(Error::invalid("persistence must be at least 1"));
    }
    let mut run = 0;
    for (i, s) in series.samples().iter().enumerate() {
        if s.value > threshold {
            run += 1;
            if run == persistence {
                return Ok(Some(series.samples()[i + 1 - persistence].timestamp_s));
            }
        } else {
            run = 0;
        }
    }
    Ok(None)
}
