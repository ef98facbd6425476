//! On-disk frame sequences: manifest parsing, PNM decoding and the
//! corrupted-frame pre-filter.
//!
//! A manifest is a text file with one `<frame_index> <timestamp_s> <path>`
//! entry per line; paths are relative to the manifest's directory. Frames
//! are binary PGM (P5, maxval 255). Binary PPM (P6) is accepted and reduced
//! to luminance with integer BT.601 weights.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};

/// Smallest accepted frame side; the SSIM window must fit.
pub const MIN_SIDE: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: u32,
    height: u32,
    luminance: Vec<u8>,
    pub frame_index: u64,
    pub timestamp_s: f64,
}

impl Frame {
    pub fn new(width: u32, height: u32, luminance: Vec<u8>, frame_index: u64, timestamp_s: f64) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::invalid(format!(
                "frame {width}x{height} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if luminance.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "frame buffer holds {} bytes, expected {}",
                luminance.len(),
                width as usize * height as usize
            )));
        }
        Ok(Frame {
            width,
            height,
            luminance,
            frame_index,
            timestamp_s,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self> {
        Frame::new(width, height, vec![value; width as usize * height as usize], 0, 0.0)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn luminance(&self) -> &[u8] {
        &self.luminance
    }

    pub fn into_luminance(self) -> Vec<u8> {
        self.luminance
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.luminance[y as usize * self.width as usize + x as usize]
    }

    pub fn mean(&self) -> f64 {
        let sum: u64 = self.luminance.iter().map(|&v| v as u64).sum();
        sum as f64 / self.luminance.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub frame_index: u64,
    pub timestamp_s: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    effective_fps: f64,
    dims: Option<(u32, u32)>,
}

impl FrameManifest {
    /// Builds a manifest from entries already in memory. Entries are sorted
    /// by frame index; duplicates and non-increasing timestamps are rejected.
    pub fn from_entries(root: impl Into<PathBuf>, mut entries: Vec<ManifestEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.frame_index);
        for pair in entries.windows(2) {
            if pair[0].frame_index == pair[1].frame_index {
                return Err(Error::invalid(format!("duplicate frame index {}", pair[1].frame_index)));
            }
            if pair[1].timestamp_s <= pair[0].timestamp_s {
                return Err(Error::invalid(format!(
                    "timestamp of frame {} does not increase",
                    pair[1].frame_index
                )));
            }
        }
        let effective_fps = infer_fps(&entries);
        Ok(FrameManifest {
            root: root.into(),
            entries,
            effective_fps,
            dims: None,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn effective_fps(&self) -> f64 {
        self.effective_fps
    }

    pub fn dims(&self) -> Option<(u32, u32)> {
        self.dims
    }

    /// Declares the frame size every entry must decode to.
    pub fn with_dims(mut self, width: u32, height: u32) -> Self {
        self.dims = Some((width, height));
        self
    }

    pub fn entry(&self, frame_index: u64) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by_key(&frame_index, |e| e.frame_index)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn path_of(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn read_frame(&self, frame_index: u64) -> Result<Frame> {
        let entry = self.entry(frame_index).ok_or(Error::IndexAbsent(frame_index))?;
        self.read_entry(entry)
    }

    pub fn read_entry(&self, entry: &ManifestEntry) -> Result<Frame> {
        let path = self.path_of(entry);
        let (w, h, luma) = read_pnm_luma(&path)?;
        if let Some((ew, eh)) = self.dims {
            if (w, h) != (ew, eh) {
                return Err(Error::DimensionMismatch {
                    expected_w: ew,
                    expected_h: eh,
                    actual_w: w,
                    actual_h: h,
                });
            }
        }
        Frame::new(w, h, luma, entry.frame_index, entry.timestamp_s)
    }

    /// Keeps only the entries accepted by `keep`, preserving order.
    pub fn retain(&self, mut keep: impl FnMut(&ManifestEntry) -> bool) -> FrameManifest {
        let entries: Vec<_> = self.entries.iter().filter(|e| keep(e)).cloned().collect();
        FrameManifest {
            root: self.root.clone(),
            entries,
            effective_fps: self.effective_fps,
            dims: self.dims,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_manifest(path, &self.entries)
    }
}

fn infer_fps(entries: &[ManifestEntry]) -> f64 {
    match (entries.first(), entries.last()) {
        (Some(a), Some(b)) if b.timestamp_s > a.timestamp_s => {
            (b.frame_index - a.frame_index) as f64 / (b.timestamp_s - a.timestamp_s)
        }
        _ => 1.0,
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<FrameManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut parsed: Vec<(usize, ManifestEntry)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, char::is_whitespace);
        let (Some(idx), Some(ts), Some(rel)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(
                path,
                lineno,
                "expected `<frame_index> <timestamp_s> <path>`",
            ));
        };
        let frame_index: u64 = idx
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad frame index `{idx}`")))?;
        let timestamp_s: f64 = ts
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite() && *t >= 0.0)
            .ok_or_else(|| Error::parse(path, lineno, format!("bad timestamp `{ts}`")))?;
        let rel = rel.trim();
        if rel.is_empty() {
            return Err(Error::parse(path, lineno, "missing frame path"));
        }
        parsed.push((
            lineno,
            ManifestEntry {
                frame_index,
                timestamp_s,
                path: PathBuf::from(rel),
            },
        ));
    }

    parsed.sort_by_key(|(_, e)| e.frame_index);
    for pair in parsed.windows(2) {
        let (_, prev) = &pair[0];
        let (line, cur) = &pair[1];
        if cur.frame_index == prev.frame_index {
            return Err(Error::parse(
                path,
                *line,
                format!("duplicate frame index {}", cur.frame_index),
            ));
        }
        if cur.timestamp_s <= prev.timestamp_s {
            return Err(Error::parse(
                path,
                *line,
                format!(
                    "timestamp {} is not after frame {}'s",
                    cur.timestamp_s, prev.frame_index
                ),
            ));
        }
    }

    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let entries: Vec<_> = parsed.into_iter().map(|(_, e)| e).collect();
    FrameManifest::from_entries(root, entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "# frame_index timestamp_s path").map_err(io)?;
    for e in entries {
        writeln!(out, "{} {} {}", e.frame_index, e.timestamp_s, e.path.display()).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Drops every sampling window whose first frame is (nearly) black.
///
/// Windows are anchored at t = 0: window `w` holds the frames with
/// `floor(timestamp / sample_period_s) == w`, and its first surviving frame
/// is the sample. Anchoring to absolute time makes the filter idempotent.
pub fn filter_corrupted(manifest: &FrameManifest, mean_threshold: f64, sample_period_s: f64) -> Result<FrameManifest> {
    if !(0.0..=255.0).contains(&mean_threshold) {
        return Err(Error::invalid(format!(
            "mean_threshold {mean_threshold} outside [0, 255]"
        )));
    }
    if !(sample_period_s > 0.0) {
        return Err(Error::invalid("sample_period_s must be positive"));
    }
    let window_of = |e: &ManifestEntry| (e.timestamp_s / sample_period_s).floor() as i64;

    let mut dropped = std::collections::HashSet::new();
    let mut current = None;
    for entry in manifest.entries() {
        let w = window_of(entry);
        if current == Some(w) {
            continue;
        }
        current = Some(w);
        let frame = manifest.read_entry(entry)?;
        if frame.mean() < mean_threshold {
            log::debug!("dropping corrupted window {w} sampled at frame {}", entry.frame_index);
            dropped.insert(w);
        }
    }
    Ok(manifest.retain(|e| !dropped.contains(&window_of(e))))
}

pub fn read_pnm_luma(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width(), img.height());
    let luma = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageRgb8(buf) => buf
            .into_raw()
            .chunks_exact(3)
            .map(|p| rgb_to_luma(p[0], p[1], p[2]))
            .collect(),
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: format!("unsupported sample layout {:?}, need 8-bit gray or RGB", other.color()),
            })
        }
    };
    Ok((w, h, luma))
}

/// Integer BT.601 luma, rounded to nearest.
#[inline]
pub fn rgb_to_luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

pub fn write_pgm(path: &Path, width: u32, height: u32, luminance: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(luminance, width, height, ExtendedColorType::L8)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    write_pgm(path, frame.width, frame.height, &frame.luminance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn uniform_scene(dir: &Path, means: &[u8]) -> FrameManifest {
        let mut entries = Vec::new();
        for (i, &m) in means.iter().enumerate() {
            let rel = format!("f{i:04}.pgm");
            write_pgm(&dir.join(&rel), 16, 16, &[m; 256]).unwrap();
            entries.push(ManifestEntry {
                frame_index: i as u64,
                timestamp_s: i as f64,
                path: rel.into(),
            });
        }
        FrameManifest::from_entries(dir, entries).unwrap()
    }

    #[test]
    fn parses_three_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.txt",
            "# header\n0 0.0 a.pgm\n1 1.0 b.pgm\n\n2 2.0 c.pgm\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(
            m.entries().iter().map(|e| e.frame_index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert_eq!(m.effective_fps(), 1.0);
        assert_eq!(m.root(), dir.path());
    }

    #[test]
    fn sorts_out_of_order_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.txt", "2 2.0 c.pgm\n0 0.0 a.pgm\n1 1.0 b.pgm\n");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.entries()[0].path, PathBuf::from("a.pgm"));
    }

    #[test]
    fn duplicate_index_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.txt", "4 4.0 a.pgm\n5 5.0 b.pgm\n5 6.0 c.pgm\n");
        match load_manifest(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.txt", "0 5.0 a.pgm\n1 4.0 b.pgm\n");
        assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.txt", "0 0.0 a.pgm\nnot-a-number 1.0 b.pgm\n");
        assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 2, .. })));
        let p = write(dir.path(), "n.txt", "0 0.0\n");
        assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        assert!(matches!(load_manifest("/nonexistent/m.txt"), Err(Error::Io { .. })));
    }

    #[test]
    fn reads_uniform_frame() {
        let dir = tempfile::tempdir().unwrap();
        let m = uniform_scene(dir.path(), &[128]);
        let f = m.read_frame(0).unwrap();
        assert_eq!(f.dims(), (16, 16));
        assert!(f.luminance().iter().all(|&v| v == 128));
        assert_eq!(f, m.read_frame(0).unwrap());
        assert!(matches!(m.read_frame(7), Err(Error::IndexAbsent(7))));
    }

    #[test]
    fn declared_dims_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let m = uniform_scene(dir.path(), &[10]).with_dims(32, 16);
        assert!(matches!(m.read_frame(0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn ppm_is_reduced_to_luma() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let mut bytes = b"P6\n8 8\n255\n".to_vec();
        for _ in 0..64 {
            bytes.extend_from_slice(&[200, 100, 50]);
        }
        fs::write(&p, bytes).unwrap();
        let (w, h, luma) = read_pnm_luma(&p).unwrap();
        assert_eq!((w, h), (8, 8));
        // 0.299*200 + 0.587*100 + 0.114*50 = 124.2
        assert!(luma.iter().all(|&v| v == 124));
    }

    #[test]
    fn luma_rounds_to_nearest() {
        assert_eq!(rgb_to_luma(255, 255, 255), 255);
        assert_eq!(rgb_to_luma(0, 0, 0), 0);
        assert_eq!(rgb_to_luma(1, 1, 1), 1);
        assert_eq!(rgb_to_luma(0, 1, 0), 1);
        assert_eq!(rgb_to_luma(0, 0, 4), 0);
        assert_eq!(rgb_to_luma(0, 0, 5), 1);
    }

    #[test]
    fn tiny_frames_rejected() {
        assert!(Frame::new(7, 8, vec![0; 56], 0, 0.0).is_err());
        assert!(Frame::new(8, 8, vec![0; 63], 0, 0.0).is_err());
    }

    #[test]
    fn black_window_removed() {
        let dir = tempfile::tempdir().unwrap();
        // windows of 2 s: frames {0,1} {2,3} {4,5}
        let m = uniform_scene(dir.path(), &[120, 120, 0, 0, 120, 120]);
        let f = filter_corrupted(&m, 5.0, 2.0).unwrap();
        let kept: Vec<_> = f.entries().iter().map(|e| e.frame_index).collect();
        assert_eq!(kept, vec![0, 1, 4, 5]);
        assert_eq!(m.len(), 6);
    }

    #[test]
    fn bright_manifest_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let m = uniform_scene(dir.path(), &[120; 5]);
        assert_eq!(filter_corrupted(&m, 5.0, 30.0).unwrap(), m);
    }

    #[test]
    fn filter_is_idempotent_and_order_preserving() {
        let dir = tempfile::tempdir().unwrap();
        let m = uniform_scene(dir.path(), &[0, 120, 120, 0, 3, 120, 50, 200, 9]);
        let once = filter_corrupted(&m, 5.0, 3.0).unwrap();
        let twice = filter_corrupted(&once, 5.0, 3.0).unwrap();
        assert_eq!(once, twice);
        let idx: Vec<_> = once.entries().iter().map(|e| e.frame_index).collect();
        assert_eq!(idx, vec![6, 7, 8]);
        assert!(idx.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn filter_rejects_bad_arguments() {
        let dir = tempfile::tempdir().unwrap();
        let m = uniform_scene(dir.path(), &[1]);
        assert!(filter_corrupted(&m, 300.0, 30.0).is_err());
        assert!(filter_corrupted(&m, 5.0, 0.0).is_err());
    }
}
