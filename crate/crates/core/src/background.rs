//! Per-pixel Gaussian mixture background model (MOG2 style), run forward and
//! backward over a frame sequence.
//!
//! Update rules, applied independently at every pixel with learning rate `a`:
//!
//! ```text
//! match:    (x - mu)^2 < match_threshold_sq * var     (heaviest match wins)
//! weights:  w <- (1 - a) w + a * [matched]
//! matched:  rho = a / w;  mu <- mu + rho (x - mu);  var <- var + rho ((x - mu_old)^2 - var)
//! no match: spawn (w = a, mu = x, var = var_init), evicting the lightest
//!           component when the pixel is full
//! prune:    drop unmatched components with w < prune_weight
//! ```
//!
//! after which components are kept sorted by `w / sigma`. Weights sum to one:
//! the matched or spawned component takes one minus the other decayed
//! weights (equal to the rule above, without accumulating rounding), and
//! the pixel is renormalised after an eviction or a prune.
//! The rendered background at a pixel is the weight-averaged mean of the
//! shortest prefix whose cumulative weight exceeds `background_ratio`.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame_store::{write_frame, Frame, FrameManifest};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureParams {
    pub max_components: usize,
    pub learning_rate: f64,
    pub var_init: f64,
    pub var_floor: f64,
    pub match_threshold_sq: f64,
    pub background_ratio: f64,
    /// Components decayed below this weight are dropped; 0 keeps them all.
    pub prune_weight: f64,
}

impl Default for MixtureParams {
    fn default() -> Self {
        MixtureParams {
            max_components: 5,
            learning_rate: 0.05,
            var_init: 225.0,
            var_floor: 4.0,
            match_threshold_sq: 9.0,
            background_ratio: 0.9,
            prune_weight: 1e-3,
        }
    }
}

impl MixtureParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!("mixture parameter {what}")))
            }
        };
        check(
            (1..=u8::MAX as usize).contains(&self.max_components),
            "max_components must be in 1..=255",
        )?;
        check(
            self.learning_rate > 0.0 && self.learning_rate < 1.0,
            "learning_rate must be in (0, 1)",
        )?;
        check(self.var_floor > 0.0, "var_floor must be positive")?;
        check(self.var_init >= self.var_floor, "var_init must be >= var_floor")?;
        check(self.match_threshold_sq > 0.0, "match_threshold_sq must be positive")?;
        check(
            self.background_ratio > 0.0 && self.background_ratio < 1.0,
            "background_ratio must be in (0, 1)",
        )?;
        check(
            self.prune_weight >= 0.0 && self.prune_weight < self.learning_rate,
            "prune_weight must be in [0, learning_rate)",
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianComponent {
    pub weight: f32,
    pub mean: f32,
    pub variance: f32,
}

/// Single-precision copy of the parameters used in the per-pixel loop.
#[derive(Clone, Copy)]
struct Kernel {
    max_k: usize,
    lr: f32,
    var_init: f32,
    var_floor: f32,
    match_sq: f32,
    ratio: f32,
    prune: f32,
}

impl From<&MixtureParams> for Kernel {
    fn from(p: &MixtureParams) -> Self {
        Kernel {
            max_k: p.max_components,
            lr: p.learning_rate as f32,
            var_init: p.var_init as f32,
            var_floor: p.var_floor as f32,
            match_sq: p.match_threshold_sq as f32,
            ratio: p.background_ratio as f32,
            prune: p.prune_weight as f32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixtureModel {
    width: u32,
    height: u32,
    params: MixtureParams,
    counts: Vec<u8>,
    components: Vec<GaussianComponent>,
}

const ROWS_PER_TASK: usize = 16;

impl MixtureModel {
    pub fn new(width: u32, height: u32, params: MixtureParams) -> Result<Self> {
        params.validate()?;
        let n = width as usize * height as usize;
        if n == 0 {
            return Err(Error::invalid("empty model"));
        }
        Ok(MixtureModel {
            width,
            height,
            params,
            counts: vec![0; n],
            components: vec![GaussianComponent::default(); n * params.max_components],
        })
    }

    /// Builds a model from explicit per-pixel components (row-major). Weights
    /// are renormalised and components sorted.
    pub fn from_components(
        width: u32,
        height: u32,
        params: MixtureParams,
        pixels: Vec<Vec<GaussianComponent>>,
    ) -> Result<Self> {
        let mut model = MixtureModel::new(width, height, params)?;
        if pixels.len() != model.counts.len() {
            return Err(Error::invalid("one component list per pixel required"));
        }
        let k = params.max_components;
        for (p, comps) in pixels.into_iter().enumerate() {
            if comps.is_empty() || comps.len() > k {
                return Err(Error::invalid(format!("pixel {p} has {} components", comps.len())));
            }
            let sum: f32 = comps.iter().map(|c| c.weight).sum();
            if comps
                .iter()
                .any(|c| !(c.weight >= 0.0) || !(c.variance >= params.var_floor as f32))
                || !(sum > 0.0)
            {
                return Err(Error::invalid(format!("pixel {p} has invalid components")));
            }
            let slot = &mut model.components[p * k..p * k + comps.len()];
            for (dst, c) in slot.iter_mut().zip(&comps) {
                *dst = GaussianComponent {
                    weight: c.weight / sum,
                    ..*c
                };
            }
            sort_components(slot);
            model.counts[p] = comps.len() as u8;
        }
        Ok(model)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn params(&self) -> &MixtureParams {
        &self.params
    }

    pub fn is_initialized(&self) -> bool {
        self.counts.iter().all(|&c| c > 0)
    }

    pub fn components(&self, x: u32, y: u32) -> &[GaussianComponent] {
        let p = y as usize * self.width as usize + x as usize;
        let k = self.params.max_components;
        &self.components[p * k..p * k + self.counts[p] as usize]
    }

    pub fn update(&mut self, frame: &Frame) -> Result<()> {
        self.update_many(std::slice::from_ref(frame))
    }

    /// Feeds `frames` in order. Equivalent to calling [`update`](Self::update)
    /// once per frame, but walks the frames tile by tile so each tile's
    /// mixture state stays in cache.
    pub fn update_many(&mut self, frames: &[Frame]) -> Result<()> {
        for frame in frames {
            if frame.dims() != (self.width, self.height) {
                return Err(Error::DimensionMismatch {
                    expected_w: self.width,
                    expected_h: self.height,
                    actual_w: frame.width(),
                    actual_h: frame.height(),
                });
            }
        }
        let kernel = Kernel::from(&self.params);
        let k = kernel.max_k;
        let tile = self.width as usize * ROWS_PER_TASK;
        self.components
            .par_chunks_mut(tile * k)
            .zip(self.counts.par_chunks_mut(tile))
            .enumerate()
            .for_each(|(t, (comps, counts))| {
                let start = t * tile;
                for frame in frames {
                    let pixels = &frame.luminance()[start..start + counts.len()];
                    for ((c, n), &x) in comps.chunks_exact_mut(k).zip(counts.iter_mut()).zip(pixels) {
                        update_pixel(c, n, x as f32, &kernel);
                    }
                }
            });
        Ok(())
    }

    pub fn render(&self) -> Frame {
        let kernel = Kernel::from(&self.params);
        let k = kernel.max_k;
        let luma: Vec<u8> = self
            .components
            .chunks_exact(k)
            .zip(&self.counts)
            .map(|(c, &n)| render_pixel(&c[..n as usize], kernel.ratio))
            .collect();
        Frame::new(self.width, self.height, luma, 0, 0.0).expect("model dimensions are validated at construction")
    }
}

/// Weight above which a component outweighs all others combined, with
/// slack for rounding in the weight sum.
const DOMINANT: f32 = 0.5 + 1e-4;

#[inline]
fn update_pixel(c: &mut [GaussianComponent], n: &mut u8, x: f32, k: &Kernel) {
    let mut count = *n as usize;
    if count == 0 {
        c[0] = GaussianComponent {
            weight: 1.0,
            mean: x,
            variance: k.var_init,
        };
        *n = 1;
        return;
    }

    let decay = 1.0 - k.lr;

    // A matching component holding over half the weight is necessarily the
    // heaviest match, so the common case skips the search.
    let d0 = x - c[0].mean;
    if c[0].weight > DOMINANT && d0 * d0 < k.match_sq * c[0].variance {
        let mut lightest_w = f32::INFINITY;
        let mut rest = 0.0f32;
        for g in &mut c[1..count] {
            g.weight *= decay;
            rest += g.weight;
            lightest_w = lightest_w.min(g.weight);
        }
        let g = &mut c[0];
        g.weight = 1.0 - rest;
        let rho = k.lr / g.weight;
        g.mean += rho * d0;
        g.variance = (g.variance + rho * (d0 * d0 - g.variance)).max(k.var_floor);
        if count > 1 {
            reposition(&mut c[..count], 0);
            if lightest_w < k.prune {
                *n = prune(&mut c[..count], k.prune) as u8;
            }
        }
        return;
    }

    let mut matched = usize::MAX;
    let mut matched_w = -1.0f32;
    let mut lightest_w = f32::INFINITY;
    let mut total = 0.0f32;
    for (i, g) in c[..count].iter_mut().enumerate() {
        let d = x - g.mean;
        if d * d < k.match_sq * g.variance && g.weight > matched_w {
            matched = i;
            matched_w = g.weight;
        }
        g.weight *= decay;
        total += g.weight;
        lightest_w = lightest_w.min(g.weight);
    }

    // Decay scales every rank key by the same factor, so only the touched
    // component can be out of order. The touched component takes up the
    // slack `1 - total`, which is the learning rate when the weights summed
    // to one before the update.
    if matched != usize::MAX {
        let g = &mut c[matched];
        g.weight += 1.0 - total;
        let rho = k.lr / g.weight;
        let d = x - g.mean;
        g.mean += rho * d;
        g.variance = (g.variance + rho * (d * d - g.variance)).max(k.var_floor);
        reposition(&mut c[..count], matched);
    } else {
        if count < k.max_k {
            c[count] = GaussianComponent {
                weight: 1.0 - total,
                mean: x,
                variance: k.var_init,
            };
            count += 1;
            reposition(&mut c[..count], count - 1);
        } else {
            let mut lightest = 0;
            for i in 1..count {
                if c[i].weight < c[lightest].weight {
                    lightest = i;
                }
            }
            c[lightest] = GaussianComponent {
                weight: k.lr,
                mean: x,
                variance: k.var_init,
            };
            let sum: f32 = c[..count].iter().map(|g| g.weight).sum();
            let inv = 1.0 / sum;
            for g in &mut c[..count] {
                g.weight *= inv;
            }
            sort_components(&mut c[..count]);
        }
    }
    // the matched or spawned component is never below the floor
    if lightest_w < k.prune && c[..count].iter().any(|g| g.weight < k.prune) {
        count = prune(&mut c[..count], k.prune);
    }
    *n = count as u8;
}

/// Removes components lighter than `floor`, keeping order, and renormalises.
/// Returns the new count.
fn prune(c: &mut [GaussianComponent], floor: f32) -> usize {
    let mut kept = 0;
    for i in 0..c.len() {
        if c[i].weight >= floor {
            c[kept] = c[i];
            kept += 1;
        }
    }
    let inv = 1.0 / c[..kept].iter().map(|g| g.weight).sum::<f32>();
    for g in &mut c[..kept] {
        g.weight *= inv;
    }
    kept
}

/// `a` ranks strictly above `b` (larger `w / sigma`).
#[inline]
fn ranks_above(a: &GaussianComponent, b: &GaussianComponent) -> bool {
    a.weight * a.weight * b.variance > b.weight * b.weight * a.variance
}

#[inline]
fn reposition(c: &mut [GaussianComponent], mut i: usize) {
    while i > 0 && ranks_above(&c[i], &c[i - 1]) {
        c.swap(i, i - 1);
        i -= 1;
    }
    while i + 1 < c.len() && ranks_above(&c[i + 1], &c[i]) {
        c.swap(i, i + 1);
        i += 1;
    }
}

#[inline]
fn sort_components(c: &mut [GaussianComponent]) {
    for i in 1..c.len() {
        let mut j = i;
        while j > 0 && ranks_above(&c[j], &c[j - 1]) {
            c.swap(j, j - 1);
            j -= 1;
        }
    }
}

#[inline]
fn render_pixel(c: &[GaussianComponent], ratio: f32) -> u8 {
    let mut acc_w = 0.0f32;
    let mut acc = 0.0f32;
    for g in c {
        acc_w += g.weight;
        acc += g.weight * g.mean;
        if acc_w > ratio {
            break;
        }
    }
    if acc_w <= 0.0 {
        return 0;
    }
    (acc / acc_w).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
    Merged,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::Merged => "merged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSnapshot {
    pub frame: Frame,
    /// Position on the original (forward) snapshot timeline.
    pub snapshot_index: u32,
    pub source_frame_index: u64,
    pub direction: Direction,
}

/// Feeds the manifest through a fresh model, in frame order or reversed,
/// emitting a snapshot after every `snapshot_interval` frames.
///
/// The result is ordered by `snapshot_index`. Backward snapshots are indexed
/// from the end of the timeline, so the k-th emission of a backward run over
/// `J` snapshots gets index `J - 1 - k`.
pub fn run_direction(
    manifest: &FrameManifest,
    direction: Direction,
    snapshot_interval: usize,
    params: &MixtureParams,
) -> Result<Vec<BackgroundSnapshot>> {
    if manifest.is_empty() {
        return Err(Error::invalid("manifest has no frames"));
    }
    if snapshot_interval == 0 {
        return Err(Error::invalid("snapshot_interval must be at least 1"));
    }
    let entries: Vec<_> = match direction {
        Direction::Forward => manifest.entries().iter().collect(),
        Direction::Backward => manifest.entries().iter().rev().collect(),
        Direction::Merged => return Err(Error::invalid("cannot run a merged direction")),
    };
    let total = (entries.len() / snapshot_interval) as u32;

    // Frames after the last emission cannot influence any snapshot.
    let mut model: Option<MixtureModel> = None;
    let mut snapshots = Vec::with_capacity(total as usize);
    for chunk in entries.chunks_exact(snapshot_interval) {
        let frames = chunk
            .iter()
            .map(|e| manifest.read_entry(e))
            .collect::<Result<Vec<_>>>()?;
        let m = match &mut model {
            Some(m) => m,
            None => model.insert(MixtureModel::new(frames[0].width(), frames[0].height(), *params)?),
        };
        m.update_many(&frames)?;
        let last = chunk[chunk.len() - 1];
        let k = snapshots.len() as u32;
        let mut bg = m.render();
        bg.frame_index = last.frame_index;
        bg.timestamp_s = last.timestamp_s;
        snapshots.push(BackgroundSnapshot {
            frame: bg,
            snapshot_index: match direction {
                Direction::Forward => k,
                _ => total - 1 - k,
            },
            source_frame_index: last.frame_index,
            direction,
        });
    }
    snapshots.sort_by_key(|s| s.snapshot_index);
    Ok(snapshots)
}

/// Runs the forward and backward passes concurrently.
pub fn run_both(
    manifest: &FrameManifest,
    snapshot_interval: usize,
    params: &MixtureParams,
) -> Result<(Vec<BackgroundSnapshot>, Vec<BackgroundSnapshot>)> {
    let (fwd, bwd) = rayon::join(
        || run_direction(manifest, Direction::Forward, snapshot_interval, params),
        || run_direction(manifest, Direction::Backward, snapshot_interval, params),
    );
    Ok((fwd?, bwd?))
}

/// Takes the backward snapshot for `j < J / 2` (integer division) and the
/// forward snapshot for the rest, so a single snapshot is the forward one: early forward snapshots still carry
/// vehicles from the opening frames, late backward ones from the closing
/// frames.
pub fn merge(forward: &[BackgroundSnapshot], backward: &[BackgroundSnapshot]) -> Result<Vec<BackgroundSnapshot>> {
    if forward.len() != backward.len() {
        return Err(Error::invalid(format!(
            "snapshot lists differ in length ({} forward, {} backward)",
            forward.len(),
            backward.len()
        )));
    }
    let total = forward.len();
    forward
        .iter()
        .zip(backward)
        .enumerate()
        .map(|(j, (f, b))| {
            if f.snapshot_index != b.snapshot_index || f.snapshot_index as usize != j {
                return Err(Error::invalid(format!(
                    "snapshot {j} misaligned (forward {}, backward {})",
                    f.snapshot_index, b.snapshot_index
                )));
            }
            let pick = if j < total / 2 { b } else { f };
            Ok(BackgroundSnapshot {
                direction: Direction::Merged,
                ..pick.clone()
            })
        })
        .collect()
}

pub fn write_snapshots(dir: &Path, snapshots: &[BackgroundSnapshot]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in snapshots {
        let name = format!("bg_{}_{}.pgm", s.direction.as_str(), s.snapshot_index);
        write_frame(&dir.join(name), &s.frame)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame_store::{write_pgm, ManifestEntry};

    fn frame(w: u32, h: u32, v: u8) -> Frame {
        Frame::filled(w, h, v).unwrap()
    }

    fn comp(weight: f32, mean: f32, variance: f32) -> GaussianComponent {
        GaussianComponent { weight, mean, variance }
    }

    #[test]
    fn first_frame_initialises() {
        let mut m = MixtureModel::new(8, 8, MixtureParams::default()).unwrap();
        assert!(!m.is_initialized());
        m.update(&frame(8, 8, 77)).unwrap();
        assert!(m.is_initialized());
        assert_eq!(m.components(3, 4), &[comp(1.0, 77.0, 225.0)]);
    }

    #[test]
    fn render_weighted_prefix() {
        let p = MixtureParams::default();
        let single = MixtureModel::from_components(8, 8, p, vec![vec![comp(1.0, 100.0, 9.0)]; 64]).unwrap();
        assert!(single.render().luminance().iter().all(|&v| v == 100));

        let two = vec![comp(0.8, 10.0, 9.0), comp(0.2, 200.0, 9.0)];
        let m = MixtureModel::from_components(8, 8, p, vec![two; 64]).unwrap();
        // (10*0.8 + 200*0.2) / 1.0
        assert!(m.render().luminance().iter().all(|&v| v == 48));
    }

    #[test]
    fn constant_scene_follows_closed_form() {
        let p = MixtureParams::default();
        let mut m = MixtureModel::new(8, 8, p).unwrap();
        for n in 0..50 {
            m.update(&frame(8, 8, 100)).unwrap();
            let g = m.components(0, 0);
            assert_eq!(g.len(), 1);
            // n matched updates at rho = a: var_n = max(floor, var_init (1-a)^n)
            let expect = (p.var_init * (1.0 - p.learning_rate).powi(n)).max(p.var_floor);
            assert!((g[0].variance as f64 - expect).abs() < 1e-3 * expect, "n={n}");
            assert!((g[0].mean - 100.0).abs() <= 0.5);
            assert!(g[0].weight as f64 > p.background_ratio);
        }
        assert!(m.render().luminance().iter().all(|&v| v == 100));
    }

    /// Scalar double-precision restatement of the update rules, used as an
    /// oracle for the single-precision kernel.
    fn scalar_oracle(values: &[f64], p: &MixtureParams) -> Vec<(f64, f64, f64)> {
        let a = p.learning_rate;
        let mut g: Vec<(f64, f64, f64)> = Vec::new();
        for &x in values {
            if g.is_empty() {
                g.push((1.0, x, p.var_init));
                continue;
            }
            let m = g
                .iter()
                .enumerate()
                .filter(|(_, c)| (x - c.1).powi(2) < p.match_threshold_sq * c.2)
                .max_by(|l, r| l.1 .0.partial_cmp(&r.1 .0).unwrap())
                .map(|(i, _)| i);
            for c in g.iter_mut() {
                c.0 *= 1.0 - a;
            }
            match m {
                Some(i) => {
                    let c = &mut g[i];
                    c.0 += a;
                    let rho = a / c.0;
                    let d = x - c.1;
                    c.1 += rho * d;
                    c.2 = (c.2 + rho * (d * d - c.2)).max(p.var_floor);
                }
                None if g.len() < p.max_components => g.push((a, x, p.var_init)),
                None => {
                    let i = (0..g.len())
                        .min_by(|&l, &r| g[l].0.partial_cmp(&g[r].0).unwrap())
                        .unwrap();
                    g[i] = (a, x, p.var_init);
                }
            }
            let s: f64 = g.iter().map(|c| c.0).sum();
            g.iter_mut().for_each(|c| c.0 /= s);
            g.retain(|c| c.0 >= p.prune_weight);
            let s: f64 = g.iter().map(|c| c.0).sum();
            g.iter_mut().for_each(|c| c.0 /= s);
            g.sort_by(|l, r| (r.0 / r.2.sqrt()).partial_cmp(&(l.0 / l.2.sqrt())).unwrap());
        }
        g
    }

    #[test]
    fn alternating_scene_splits_into_two_modes() {
        let p = MixtureParams::default();
        let mut m = MixtureModel::new(8, 8, p).unwrap();
        let values: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 0.0 } else { 255.0 }).collect();
        for &v in &values {
            m.update(&frame(8, 8, v as u8)).unwrap();
        }
        let oracle = scalar_oracle(&values, &p);
        let got = m.components(5, 5);
        assert_eq!(got.len(), 2);
        assert_eq!(oracle.len(), 2);
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g.weight as f64 - o.0).abs() < 1e-4);
            assert!((g.mean as f64 - o.1).abs() < 1e-2);
            assert!((g.weight - 0.5).abs() <= 0.05);
        }
        let mut means: Vec<f32> = got.iter().map(|g| g.mean).collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(means[0].abs() < 1.0 && (means[1] - 255.0).abs() < 1.0);
    }

    #[test]
    fn noisy_sequence_tracks_scalar_oracle() {
        let p = MixtureParams::default();
        let mut m = MixtureModel::new(8, 8, p).unwrap();
        let mut c = crate::rng::Stream::new(5).cursor();
        let values: Vec<f64> = (0..300)
            .map(|i| {
                let base = if (i / 40) % 3 == 0 { 60.0 } else { 180.0 };
                (base + 4.0 * c.normal()).round().clamp(0.0, 255.0)
            })
            .collect();
        for &v in &values {
            m.update(&frame(8, 8, v as u8)).unwrap();
        }
        let oracle = scalar_oracle(&values, &p);
        let got = m.components(0, 0);
        assert_eq!(got.len(), oracle.len());
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g.weight as f64 - o.0).abs() < 1e-3);
            assert!((g.mean as f64 - o.1).abs() < 0.05);
        }
    }

    #[test]
    fn batched_updates_match_single_frames() {
        // 40 rows spans several tiles, including a short last one.
        let (w, h) = (13, 40);
        let mut c = crate::rng::Stream::new(11).cursor();
        let frames: Vec<Frame> = (0..90)
            .map(|i| {
                let lum = (0..w * h)
                    .map(|p| {
                        let base = if (p + i / 30) % 3 == 0 { 70.0 } else { 170.0 };
                        (base + 6.0 * c.normal()).round().clamp(0.0, 255.0) as u8
                    })
                    .collect();
                Frame::new(w, h, lum, i as u64, i as f64).unwrap()
            })
            .collect();
        let p = MixtureParams::default();
        let mut one = MixtureModel::new(w, h, p).unwrap();
        for f in &frames {
            one.update(f).unwrap();
        }
        let mut many = MixtureModel::new(w, h, p).unwrap();
        for chunk in frames.chunks(37) {
            many.update_many(chunk).unwrap();
        }
        for y in 0..h {
            for x in 0..w {
                assert_eq!(one.components(x, y), many.components(x, y));
            }
        }
    }

    #[test]
    fn full_pixel_evicts_lightest() {
        let p = MixtureParams {
            max_components: 2,
            ..MixtureParams::default()
        };
        let mut m = MixtureModel::new(8, 8, p).unwrap();
        for v in [10u8, 10, 10, 120, 250] {
            m.update(&frame(8, 8, v)).unwrap();
        }
        let g = m.components(0, 0);
        assert_eq!(g.len(), 2);
        assert!(g.iter().any(|c| c.mean == 250.0));
        assert!(g.iter().any(|c| (c.mean - 10.0).abs() < 1e-3));
        let s: f32 = g.iter().map(|c| c.weight).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut m = MixtureModel::new(8, 8, MixtureParams::default()).unwrap();
        assert!(matches!(
            m.update(&frame(9, 8, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = MixtureParams {
            background_ratio: 1.0,
            ..MixtureParams::default()
        };
        assert!(MixtureModel::new(8, 8, bad).is_err());
        let bad = MixtureParams {
            var_floor: 0.0,
            ..MixtureParams::default()
        };
        assert!(bad.validate().is_err());
    }

    fn sequence_on_disk(dir: &Path, values: &[u8]) -> FrameManifest {
        let entries = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let rel = format!("{i:05}.pgm");
                write_pgm(&dir.join(&rel), 8, 8, &[v; 64]).unwrap();
                ManifestEntry {
                    frame_index: i as u64,
                    timestamp_s: i as f64,
                    path: rel.into(),
                }
            })
            .collect();
        FrameManifest::from_entries(dir, entries).unwrap()
    }

    #[test]
    fn snapshot_counting_and_reindexing() {
        let dir = tempfile::tempdir().unwrap();
        let m = sequence_on_disk(dir.path(), &[90; 240]);
        let p = MixtureParams::default();
        let fwd = run_direction(&m, Direction::Forward, 120, &p).unwrap();
        assert_eq!(
            fwd.iter()
                .map(|s| (s.snapshot_index, s.source_frame_index))
                .collect::<Vec<_>>(),
            vec![(0, 119), (1, 239)]
        );
        let bwd = run_direction(&m, Direction::Backward, 120, &p).unwrap();
        // emission order: source 120 first, then 0
        assert_eq!(
            bwd.iter()
                .map(|s| (s.snapshot_index, s.source_frame_index))
                .collect::<Vec<_>>(),
            vec![(0, 0), (1, 120)]
        );
        assert_eq!(fwd[1].frame.frame_index, 239);
        assert!(run_direction(&m, Direction::Forward, 0, &p).is_err());
        let empty = m.retain(|_| false);
        assert!(run_direction(&empty, Direction::Forward, 10, &p).is_err());
    }

    #[test]
    fn palindrome_runs_agree() {
        let dir = tempfile::tempdir().unwrap();
        let half: Vec<u8> = (0..30).map(|i| (i * 37 % 256) as u8).collect();
        let mut values = half.clone();
        values.extend(half.iter().rev());
        let m = sequence_on_disk(dir.path(), &values);
        let p = MixtureParams::default();
        let (fwd, bwd) = run_both(&m, 7, &p).unwrap();
        assert_eq!(fwd.len(), bwd.len());
        let j = fwd.len();
        for (i, f) in fwd.iter().enumerate() {
            assert_eq!(f.frame.luminance(), bwd[j - 1 - i].frame.luminance());
        }
    }

    fn snap(idx: u32, dir: Direction, v: u8) -> BackgroundSnapshot {
        BackgroundSnapshot {
            frame: frame(8, 8, v),
            snapshot_index: idx,
            source_frame_index: idx as u64,
            direction: dir,
        }
    }

    #[test]
    fn merge_splits_at_half() {
        let f: Vec<_> = (0..4).map(|i| snap(i, Direction::Forward, 10 + i as u8)).collect();
        let b: Vec<_> = (0..4).map(|i| snap(i, Direction::Backward, 100 + i as u8)).collect();
        let merged = merge(&f, &b).unwrap();
        let picks: Vec<u8> = merged.iter().map(|s| s.frame.get(0, 0)).collect();
        assert_eq!(picks, vec![100, 101, 12, 13]);
        assert!(merged.iter().all(|s| s.direction == Direction::Merged));

        let one = merge(&f[..1], &b[..1]).unwrap();
        assert_eq!(one[0].frame.get(0, 0), 10);

        assert!(merge(&f[..3], &b).is_err());
        let shifted: Vec<_> = (1..5).map(|i| snap(i, Direction::Backward, 0)).collect();
        assert!(merge(&f, &shifted).is_err());
    }

    #[test]
    fn snapshots_written_with_direction_names() {
        let dir = tempfile::tempdir().unwrap();
        write_snapshots(dir.path(), &[snap(3, Direction::Merged, 5)]).unwrap();
        assert!(dir.path().join("bg_merged_3.pgm").exists());
    }
}
