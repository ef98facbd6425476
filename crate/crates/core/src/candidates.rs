//! Candidate stall regions: cluster the surviving detection centroids,
//! gate the clusters by the road mask, and build a region of interest
//! around each.

use std::path::Path;

use crate::detections::{BBox, DetectionRecord};
use crate::error::{Error, Result};
use crate::frame_store::{read_pnm_luma, write_pgm};
use crate::rng::Stream;

/// Binary road mask. `true` marks pixels where a stalled vehicle counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    width: u32,
    height: u32,
    road: Vec<bool>,
}

impl SegmentationMask {
    pub fn new(width: u32, height: u32, road: Vec<bool>) -> Result<Self> {
        if road.len() != width as usize * height as usize || width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "mask buffer of {} cells does not fit {width}x{height}",
                road.len()
            )));
        }
        Ok(SegmentationMask { width, height, road })
    }

    pub fn filled(width: u32, height: u32, road: bool) -> Result<Self> {
        Self::new(width, height, vec![road; width as usize * height as usize])
    }

    /// Mask that is road inside any of `rects` (clipped to the frame).
    pub fn from_rects(width: u32, height: u32, rects: &[(u32, u32, u32, u32)]) -> Result<Self> {
        let mut m = Self::filled(width, height, false)?;
        for &(x, y, w, h) in rects {
            for yy in y.min(height)..(y.saturating_add(h)).min(height) {
                let row = yy as usize * width as usize;
                m.road[row + x.min(width) as usize..row + x.saturating_add(w).min(width) as usize].fill(true);
            }
        }
        Ok(m)
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn is_road(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.road[y as usize * self.width as usize + x as usize]
    }

    /// Looks up the pixel containing the real-valued point `(x, y)`.
    pub fn is_road_at(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && self.is_road(x.floor() as u32, y.floor() as u32)
    }

    pub fn to_luminance(&self) -> Vec<u8> {
        self.road.iter().map(|&r| if r { 255 } else { 0 }).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_pgm(path, self.width, self.height, &self.to_luminance())
    }
}

/// Reads a 0/255 PGM mask. `expected` checks the dimensions against the video.
pub fn load_mask(path: impl AsRef<Path>, expected: Option<(u32, u32)>) -> Result<SegmentationMask> {
    let path = path.as_ref();
    let (w, h, lum) = read_pnm_luma(path)?;
    if let Some((ew, eh)) = expected {
        if (ew, eh) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected_w: ew,
                expected_h: eh,
                actual_w: w,
                actual_h: h,
            });
        }
    }
    let mut road = Vec::with_capacity(lum.len());
    for (i, v) in lum.into_iter().enumerate() {
        road.push(match v {
            0 => false,
            255 => true,
            other => {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    message: format!(
                        "mask value {other} at ({}, {}) is not 0 or 255",
                        i % w as usize,
                        i / w as usize
                    ),
                })
            }
        });
    }
    SegmentationMask::new(w, h, road)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<(f64, f64)>,
    pub assignment: Vec<usize>,
    pub wcss: f64,
    /// Within-cluster sum of squares after every centroid update.
    pub trace: Vec<f64>,
}

fn d2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

fn nearest(p: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, d2(p, centroids[0]));
    for (i, &c) in centroids.iter().enumerate().skip(1) {
        let d = d2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(points: &[(f64, f64)], k: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut cur = Stream::new(seed).cursor();
    let mut centroids = vec![points[cur.below(points.len())]];
    let mut dist: Vec<f64> = points.iter().map(|&p| d2(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = cur.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 {
                    chosen = Some(i);
                    acc += d;
                    if acc > target {
                        break;
                    }
                }
            }
            chosen.expect("positive total implies a positive entry")
        } else {
            cur.below(points.len())
        };
        let c = points[pick];
        centroids.push(c);
        for (d, &p) in dist.iter_mut().zip(points) {
            *d = d.min(d2(p, c));
        }
    }
    centroids
}

/// Lloyd's algorithm from a seeded k-means++ start. Stops at an assignment
/// fixpoint or after `max_iters` updates. An emptied cluster keeps its
/// previous centroid.
pub fn kmeans(points: &[(f64, f64)], k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::invalid("kmeans needs k >= 1"));
    }
    if k > points.len() {
        return Err(Error::InsufficientPoints {
            needed: k,
            available: points.len(),
        });
    }
    let mut centroids = plus_plus_init(points, k, seed);
    let mut assignment: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids).0).collect();
    let mut trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&p, &a) in points.iter().zip(&assignment) {
            sums[a].0 += p.0;
            sums[a].1 += p.1;
            sums[a].2 += 1;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
        trace.push(wcss_of(points, &centroids, &assignment));
        let next: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let wcss = wcss_of(points, &centroids, &assignment);
    Ok(KMeansResult {
        centroids,
        assignment,
        wcss,
        trace,
    })
}

fn wcss_of(points: &[(f64, f64)], centroids: &[(f64, f64)], assignment: &[usize]) -> f64 {
    points.iter().zip(assignment).map(|(&p, &a)| d2(p, centroids[a])).sum()
}

/// Best of `n_init` k-means runs (lowest wcss, earliest run on ties). Run
/// `r` uses seed `child(seed, r)`.
pub fn kmeans_best_of(
    points: &[(f64, f64)],
    k: usize,
    max_iters: usize,
    seed: u64,
    n_init: usize,
) -> Result<KMeansResult> {
    let root = Stream::new(seed);
    let mut best: Option<KMeansResult> = None;
    for r in 0..n_init.max(1) {
        let run = kmeans(points, k, max_iters, root.child(r as u64).key())?;
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElbowParams {
    pub k_max: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub n_init: usize,
    /// A cloud whose root-mean-square spread around its mean is at most
    /// this many pixels is one cluster, whatever the curve says.
    pub min_spread_px: f64,
}

impl Default for ElbowParams {
    fn default() -> Self {
        ElbowParams {
            k_max: 8,
            seed: 0,
            max_iters: 100,
            n_init: 8,
            min_spread_px: 12.0,
        }
    }
}

/// Picks K at the wcss point farthest from the chord joining the curve's
/// end points. Ties go to the smaller K.
pub fn select_k_elbow(points: &[(f64, f64)], params: &ElbowParams) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::invalid("elbow selection on an empty point set"));
    }
    if params.k_max == 0 {
        return Err(Error::invalid("k_max must be at least 1"));
    }
    let kmax = params.k_max.min(points.len());
    if points.len() <= 2 || kmax == 1 {
        return Ok(1);
    }
    let curve: Vec<f64> = (1..=kmax)
        .map(|k| kmeans_best_of(points, k, params.max_iters, params.seed, params.n_init).map(|r| r.wcss))
        .collect::<Result<_>>()?;
    if (curve[0] / points.len() as f64).sqrt() <= params.min_spread_px {
        return Ok(1);
    }
    Ok(chord_elbow(&curve))
}

/// Index (1-based K) of the curve point farthest from the end-point chord.
pub fn chord_elbow(curve: &[f64]) -> usize {
    let n = curve.len();
    if n <= 2 {
        return 1;
    }
    let (x0, y0) = (1.0, curve[0]);
    let (x1, y1) = (n as f64, curve[n - 1]);
    let norm = ((y1 - y0).powi(2) + (x1 - x0).powi(2)).sqrt();
    let mut best = (1, 0.0);
    for (i, &y) in curve.iter().enumerate() {
        let x = (i + 1) as f64;
        let d = ((y1 - y0) * x - (x1 - x0) * y + x1 * y0 - y1 * x0).abs() / norm;
        if d > best.1 {
            best = (i + 1, d);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRegion {
    pub centroid: (f64, f64),
    pub roi: BBox,
    pub first_seen_snapshot: u32,
    pub members: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateParams {
    pub elbow: ElbowParams,
    pub roi_margin: u32,
}

impl Default for CandidateParams {
    fn default() -> Self {
        CandidateParams {
            elbow: ElbowParams::default(),
            roi_margin: 8,
        }
    }
}

/// Clusters the record centroids, drops clusters whose centroid is off
/// road, and returns the rest ordered by (first seen, x, y).
pub fn build_candidates(
    records: &[DetectionRecord],
    mask: &SegmentationMask,
    params: &CandidateParams,
) -> Result<Vec<CandidateRegion>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let points: Vec<(f64, f64)> = records.iter().map(DetectionRecord::centroid).collect();
    let e = &params.elbow;
    let k = select_k_elbow(&points, e)?;
    let fit = kmeans_best_of(&points, k, e.max_iters, e.seed, e.n_init)?;
    let (fw, fh) = mask.dims();
    let margin = params.roi_margin as f64;

    let mut out = Vec::new();
    for c in 0..k {
        let members: Vec<DetectionRecord> = records
            .iter()
            .zip(&fit.assignment)
            .filter(|(_, &a)| a == c)
            .map(|(r, _)| r.clone())
            .collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let centroid = members.iter().fold((0.0, 0.0), |acc, r| {
            let (x, y) = r.centroid();
            (acc.0 + x / n, acc.1 + y / n)
        });
        if !mask.is_road_at(centroid.0, centroid.1) {
            continue;
        }
        let hull = members[1..].iter().fold(members[0].bbox, |acc, r| acc.union(&r.bbox));
        let x0 = (hull.x - margin).max(0.0).floor();
        let y0 = (hull.y - margin).max(0.0).floor();
        let x1 = (hull.right() + margin).min(fw as f64).ceil();
        let y1 = (hull.bottom() + margin).min(fh as f64).ceil();
        let roi = BBox::new(x0, y0, x1 - x0, y1 - y0)?;
        let first_seen_snapshot = members.iter().map(|r| r.snapshot_index).min().expect("nonempty");
        out.push(CandidateRegion {
            centroid,
            roi,
            first_seen_snapshot,
            members,
        });
    }
    out.sort_by(|a, b| {
        a.first_seen_snapshot
            .cmp(&b.first_seen_snapshot)
            .then(a.centroid.0.total_cmp(&b.centroid.0))
            .then(a.centroid.1.total_cmp(&b.centroid.1))
    });
    Ok(out)
}
