//! Ingested vehicle detections and their geometric post-processing.
//!
//! Detection files hold one `<snapshot_index>,<class_id>,<confidence>,<x>,<y>,<w>,<h>`
//! record per line (`class_id` is `car` or `truck`, `#` starts a comment).
//!
//! Two filters prune the whole-video centroid cloud, where `d(k)` is the
//! distance from a centroid to its k-th nearest neighbour (itself excluded):
//!
//! * misclassified static objects: `d(k1) <= l1` (the same spot fires in
//!   nearly every snapshot);
//! * slow movers: `d(k2) >= l2` (consecutive detections spread out).

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::invalid(format!("degenerate box ({x}, {y}, {w}, {h})")));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn centroid(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.right() && py >= self.y && py <= self.bottom()
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BBox) -> BBox {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        BBox {
            x,
            y,
            w: self.right().max(other.right()) - x,
            h: self.bottom().max(other.bottom()) - y,
        }
    }

    fn lex_cmp(&self, other: &BBox) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// `1 - IoU`, the box-to-box distance used for anchor clustering.
pub fn iou_distance(a: &BBox, b: &BBox) -> f64 {
    1.0 - iou(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassId {
    Car,
    Truck,
}

impl FromStr for ClassId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "car" => Ok(ClassId::Car),
            "truck" => Ok(ClassId::Truck),
            other => Err(format!("unknown class `{other}`")),
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassId::Car => "car",
            ClassId::Truck => "truck",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub snapshot_index: u32,
    pub class_id: ClassId,
    pub confidence: f64,
    pub bbox: BBox,
}

impl DetectionRecord {
    pub fn new(snapshot_index: u32, class_id: ClassId, confidence: f64, bbox: BBox) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(DetectionRecord {
            snapshot_index,
            class_id,
            confidence,
            bbox,
        })
    }

    pub fn centroid(&self) -> (f64, f64) {
        self.bbox.centroid()
    }

    /// Deterministic processing order: snapshot, confidence descending,
    /// then box coordinates.
    fn order(&self, other: &Self) -> Ordering {
        self.snapshot_index
            .cmp(&other.snapshot_index)
            .then(other.confidence.total_cmp(&self.confidence))
            .then(self.bbox.lex_cmp(&other.bbox))
            .then(self.class_id.cmp(&other.class_id))
    }
}

pub fn sort_records(records: &mut [DetectionRecord]) {
    records.sort_by(DetectionRecord::order);
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 7 fields, found {}", fields.len()),
            ));
        }
        let num = |i: usize, name: &str| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, lineno, format!("bad {name} `{}`", fields[i])))
        };
        let snapshot_index: u32 = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad snapshot index `{}`", fields[0])))?;
        let class_id: ClassId = fields[1].parse().map_err(|m: String| Error::parse(path, lineno, m))?;
        let confidence = num(2, "confidence")?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::parse(
                path,
                lineno,
                format!("confidence {confidence} outside [0, 1]"),
            ));
        }
        let bbox = BBox::new(num(3, "x")?, num(4, "y")?, num(5, "w")?, num(6, "h")?)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        records.push(DetectionRecord {
            snapshot_index,
            class_id,
            confidence,
            bbox,
        });
    }
    sort_records(&mut records);
    Ok(records)
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "# snapshot_index,class_id,confidence,x,y,w,h").map_err(io)?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.snapshot_index, r.class_id, r.confidence, r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Rejects records whose centroid falls outside a `width` x `height` frame.
pub fn check_bounds(records: &[DetectionRecord], width: u32, height: u32) -> Result<()> {
    for r in records {
        let (cx, cy) = r.centroid();
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::invalid(format!(
                "snapshot {} detection centroid ({cx}, {cy}) lies outside the {width}x{height} frame",
                r.snapshot_index
            )));
        }
    }
    Ok(())
}

/// Greedy per-snapshot non-maximum suppression. Output is in processing
/// order (snapshot, confidence descending, box).
pub fn nms(records: &[DetectionRecord], iou_thresh: f64) -> Result<Vec<DetectionRecord>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::invalid(format!("iou_thresh {iou_thresh} outside (0, 1)")));
    }
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut kept: Vec<DetectionRecord> = Vec::with_capacity(sorted.len());
    let mut snapshot_start = 0;
    for r in sorted {
        if kept.last().map(|k| k.snapshot_index) != Some(r.snapshot_index) {
            snapshot_start = kept.len();
        }
        if kept[snapshot_start..]
            .iter()
            .all(|k| iou(&k.bbox, &r.bbox) <= iou_thresh)
        {
            kept.push(r);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CentroidCloud {
    points: Vec<(f64, f64, u32)>,
}

impl CentroidCloud {
    pub fn from_records(records: &[DetectionRecord]) -> Self {
        CentroidCloud {
            points: records
                .iter()
                .map(|r| {
                    let (x, y) = r.centroid();
                    (x, y, r.snapshot_index)
                })
                .collect(),
        }
    }

    pub fn from_points(points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        CentroidCloud {
            points: points.into_iter().map(|(x, y)| (x, y, 0)).collect(),
        }
    }

    pub fn points(&self) -> &[(f64, f64, u32)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Distance from `query` to its k-th nearest neighbour in `cloud`.
///
/// If the query coincides with a cloud point, exactly one such point is
/// treated as the query itself and skipped; other coincident points still
/// count as neighbours at distance zero.
pub fn knn_distance(cloud: &CentroidCloud, query: (f64, f64), k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut d2: Vec<f64> = cloud
        .points
        .iter()
        .map(|&(x, y, _)| (x - query.0).powi(2) + (y - query.1).powi(2))
        .collect();
    if let Some(i) = cloud.points.iter().position(|&(x, y, _)| x == query.0 && y == query.1) {
        d2.swap_remove(i);
    }
    if d2.len() < k {
        return Err(Error::InsufficientPoints {
            needed: k,
            available: d2.len(),
        });
    }
    let (_, kth, _) = d2.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(kth.sqrt())
}

/// Drops records whose centroid has `d(k1) <= l1` over `cloud`. Records
/// without `k1` neighbours are kept.
pub fn filter_misclassified(
    records: &[DetectionRecord],
    cloud: &CentroidCloud,
    k1: usize,
    l1: f64,
) -> Result<Vec<DetectionRecord>> {
    if k1 == 0 || !(l1 > 0.0) {
        return Err(Error::invalid("filter_misclassified needs k1 >= 1 and l1 > 0"));
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match knn_distance(cloud, r.centroid(), k1) {
            Ok(d) if d <= l1 => {}
            Ok(_) | Err(Error::InsufficientPoints { .. }) => out.push(r.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Drops records whose centroid has `d(k2) >= l2` over `cloud`. Records
/// without `k2` neighbours are dropped as well: an isolated point is a
/// trail of something moving.
pub fn filter_slow(
    records: &[DetectionRecord],
    cloud: &CentroidCloud,
    k2: usize,
    l2: f64,
) -> Result<Vec<DetectionRecord>> {
    if k2 == 0 || !(l2 > 0.0) {
        return Err(Error::invalid("filter_slow needs k2 >= 1 and l2 > 0"));
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match knn_distance(cloud, r.centroid(), k2) {
            Ok(d) if d < l2 => out.push(r.clone()),
            Ok(_) | Err(Error::InsufficientPoints { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub iou_thresh: f64,
    pub k1: usize,
    pub l1: f64,
    pub k2: usize,
    pub l2: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            iou_thresh: 0.5,
            k1: 20,
            l1: 5.0,
            k2: 2,
            l2: 20.0,
        }
    }
}

/// NMS followed by both kNN filters over one cloud built from the NMS
/// survivors.
pub fn post_process(records: &[DetectionRecord], params: &FilterParams) -> Result<Vec<DetectionRecord>> {
    let kept = nms(records, params.iou_thresh)?;
    let cloud = CentroidCloud::from_records(&kept);
    let kept = filter_misclassified(&kept, &cloud, params.k1, params.l1)?;
    filter_slow(&kept, &cloud, params.k2, params.l2)
}
