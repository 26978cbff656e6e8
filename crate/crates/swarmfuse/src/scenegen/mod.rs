//! Procedural multi-view dataset generation.
//!
//! One sample is a set of synchronized agent views into a shared procedural
//! world: per-agent RGB crops and clean label masks, a rectangular noise
//! degradation on the primary agent, and exact ground-truth cell
//! correspondences between the primary agent and every auxiliary agent.
//!
//! Rotations are restricted to the 90-degree group and view origins snap to
//! the feature stride, so every feature cell of one agent maps to exactly
//! one feature cell of another (or to none). That exactness is what makes
//! cell-level correspondence labels usable as an oracle.

mod io;

pub use io::{file_size_bytes, read_dataset, sample_record_bytes, write_dataset};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Amplitude of the per-texel uniform texture noise around class colors.
pub const TEXTURE_NOISE_AMP: f32 = 0.15;

/// Procedural world: a semantic grid plus an RGB texture, both `size x size`.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub size: usize,
    pub num_classes: usize,
    /// Class id per texel, row-major.
    grid: Vec<u8>,
    /// RGB texture, plane-major `[3, size, size]`, values in [0, 1].
    texture: Vec<f32>,
}

impl World {
    pub fn class_at(&self, row: usize, col: usize) -> u8 {
        self.grid[row * self.size + col]
    }

    pub fn texel(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.texture[(channel * self.size + row) * self.size + col]
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }
}

/// Base color per class; classes beyond the built-in palette get a
/// hash-derived color so any `num_classes` works.
pub fn class_color(class: u8) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 5] = [
        [0.45, 0.45, 0.45], // road-like background
        [0.65, 0.35, 0.25], // building
        [0.85, 0.75, 0.20], // bus
        [0.25, 0.40, 0.75], // car
        [0.30, 0.60, 0.35], // truck
    ];
    if (class as usize) < PALETTE.len() {
        return PALETTE[class as usize];
    }
    let mut h = class as u64;
    h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    [
        0.2 + 0.6 * ((h >> 8) & 0xff) as f32 / 255.0,
        0.2 + 0.6 * ((h >> 24) & 0xff) as f32 / 255.0,
        0.2 + 0.6 * ((h >> 40) & 0xff) as f32 / 255.0,
    ]
}

/// Generate a world: background class 0 overlaid with `num_shapes` random
/// axis-aligned rectangles of classes `1..num_classes`, then a textured
/// rendering of the class map. Deterministic in `seed`.
pub fn generate_world(seed: u64, size: usize, num_classes: usize, num_shapes: usize) -> Result<World> {
    if num_classes < 2 || num_classes > 256 {
        return Err(Error::Config(format!("num_classes must be in [2, 256], got {num_classes}")));
    }
    if size < 8 {
        return Err(Error::Config(format!("world size {size} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![0u8; size * size];
    for _ in 0..num_shapes {
        let class = rng.gen_range(1..num_classes) as u8;
        let sh = rng.gen_range(size / 16..=size / 4).max(1);
        let sw = rng.gen_range(size / 16..=size / 4).max(1);
        let top = rng.gen_range(0..=size - sh);
        let left = rng.gen_range(0..=size - sw);
        for r in top..top + sh {
            grid[r * size + left..r * size + left + sw].fill(class);
        }
    }
    let mut texture = vec![0.0f32; 3 * size * size];
    for r in 0..size {
        for c in 0..size {
            let base = class_color(grid[r * size + c]);
            for (ch, &b) in base.iter().enumerate() {
                let noise = rng.gen_range(-TEXTURE_NOISE_AMP..TEXTURE_NOISE_AMP);
                texture[(ch * size + r) * size + c] = (b + noise).clamp(0.0, 1.0);
            }
        }
    }
    Ok(World { seed, size, num_classes, grid, texture })
}

/// Rotation of a view relative to world axes, in 90-degree steps
/// counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn index(self) -> usize {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }

    pub fn from_index(i: usize) -> Rotation {
        Rotation::ALL[i % 4]
    }

    fn odd(self) -> bool {
        matches!(self, Rotation::R90 | Rotation::R270)
    }
}

/// A rectangular, rotated window into a world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Viewport {
    /// Top-left world texel of the covered rectangle; multiples of stride.
    pub origin: (usize, usize),
    pub rotation: Rotation,
    /// View extent in pixels (rows, cols).
    pub extent: (usize, usize),
}

impl Viewport {
    pub fn new(
        origin: (usize, usize),
        rotation: Rotation,
        extent: (usize, usize),
        stride: usize,
        world_size: usize,
    ) -> Result<Viewport> {
        let vp = Viewport { origin, rotation, extent };
        vp.validate(stride, world_size)?;
        Ok(vp)
    }

    pub fn validate(&self, stride: usize, world_size: usize) -> Result<()> {
        let (h, w) = self.extent;
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Config(format!(
                "extent {:?} not divisible by stride {stride}",
                self.extent
            )));
        }
        if self.origin.0 % stride != 0 || self.origin.1 % stride != 0 {
            return Err(Error::Config(format!(
                "origin {:?} not aligned to stride {stride}",
                self.origin
            )));
        }
        let (a, b) = self.covered();
        if self.origin.0 + a > world_size || self.origin.1 + b > world_size {
            return Err(Error::Config(format!(
                "viewport at {:?} covering {a}x{b} exceeds world size {world_size}",
                self.origin
            )));
        }
        Ok(())
    }

    /// Rows and columns of the covered world rectangle (extent transposed
    /// for odd rotations).
    pub fn covered(&self) -> (usize, usize) {
        let (h, w) = self.extent;
        if self.rotation.odd() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// World texel seen by view pixel `(r, c)`.
    pub fn view_to_world(&self, r: usize, c: usize) -> (usize, usize) {
        let (h, w) = self.extent;
        debug_assert!(r < h && c < w);
        let (u, v) = match self.rotation {
            Rotation::R0 => (r, c),
            Rotation::R90 => (c, h - 1 - r),
            Rotation::R180 => (h - 1 - r, w - 1 - c),
            Rotation::R270 => (w - 1 - c, r),
        };
        (self.origin.0 + u, self.origin.1 + v)
    }

    /// View pixel observing a world texel, or `None` if outside this view.
    pub fn world_to_view(&self, world_row: usize, world_col: usize) -> Option<(usize, usize)> {
        let (a, b) = self.covered();
        let u = world_row.checked_sub(self.origin.0)?;
        let v = world_col.checked_sub(self.origin.1)?;
        if u >= a || v >= b {
            return None;
        }
        let (h, w) = self.extent;
        let (r, c) = match self.rotation {
            Rotation::R0 => (u, v),
            Rotation::R90 => (h - 1 - v, u),
            Rotation::R180 => (h - 1 - u, w - 1 - v),
            Rotation::R270 => (v, w - 1 - u),
        };
        Some((r, c))
    }
}

/// One synchronized multi-agent observation.
#[derive(Debug)]
pub struct SceneSample {
    pub frame_id: u64,
    /// Per-agent RGB image, plane-major `[3, h, w]`, agent 0 degraded.
    pub images: Vec<Vec<f32>>,
    /// Per-agent clean class masks `[h, w]`.
    pub labels: Vec<Vec<u8>>,
    /// Degradation mask of agent 0, `[h, w]`, 1 inside the noise rectangle.
    pub degradation: Vec<u8>,
    /// Ground-truth cell correspondences for pairs `0 -> j`, `j = 1..n`.
    /// Entry values are channel labels in `[0, cells]`, the last meaning
    /// no-match.
    corr: Vec<Vec<u16>>,
    corr_reads: AtomicU64,
}

impl SceneSample {
    pub fn new(
        frame_id: u64,
        images: Vec<Vec<f32>>,
        labels: Vec<Vec<u8>>,
        degradation: Vec<u8>,
        corr: Vec<Vec<u16>>,
    ) -> Self {
        SceneSample { frame_id, images, labels, degradation, corr, corr_reads: AtomicU64::new(0) }
    }

    pub fn n_agents(&self) -> usize {
        self.images.len()
    }

    /// Correspondence labels for the pair `0 -> aux`. Reads are counted so
    /// tests can assert that correspondence-free baselines never touch them.
    pub fn gt_corr(&self, aux: usize) -> &[u16] {
        self.corr_reads.fetch_add(1, Ordering::Relaxed);
        &self.corr[aux - 1]
    }

    pub fn corr_reads(&self) -> u64 {
        self.corr_reads.load(Ordering::Relaxed)
    }

    pub(crate) fn corr_raw(&self) -> &[Vec<u16>] {
        &self.corr
    }
}

impl Clone for SceneSample {
    fn clone(&self) -> Self {
        SceneSample {
            frame_id: self.frame_id,
            images: self.images.clone(),
            labels: self.labels.clone(),
            degradation: self.degradation.clone(),
            corr: self.corr.clone(),
            corr_reads: AtomicU64::new(0),
        }
    }
}

impl PartialEq for SceneSample {
    fn eq(&self, other: &Self) -> bool {
        self.frame_id == other.frame_id
            && self.images == other.images
            && self.labels == other.labels
            && self.degradation == other.degradation
            && self.corr == other.corr
    }
}

/// Static geometry shared by every sample of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetConfig {
    pub n_agents: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub num_classes: usize,
}

impl DatasetConfig {
    pub fn cells(&self) -> usize {
        (self.height / self.stride) * (self.width / self.stride)
    }

    /// Channel index reserved for "no corresponding cell".
    pub fn no_match_channel(&self) -> usize {
        self.cells()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("n_agents must be >= 1".into()));
        }
        if self.stride == 0 || self.height % self.stride != 0 || self.width % self.stride != 0 {
            return Err(Error::Config(format!(
                "stride {} must divide image extent {}x{}",
                self.stride, self.height, self.width
            )));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config(format!("num_classes {} out of range", self.num_classes)));
        }
        if self.cells() + 1 > u16::MAX as usize {
            return Err(Error::Config("cell grid too large for u16 correspondence labels".into()));
        }
        Ok(())
    }
}

/// A generated or loaded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    /// Split off the trailing fraction as a validation set (at least one
    /// sample on each side when possible).
    pub fn split_tail(mut self, fraction: f64) -> (Dataset, Dataset) {
        let n = self.samples.len();
        let tail = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
        let val_samples = self.samples.split_off(n - tail);
        let val = Dataset { config: self.config, samples: val_samples };
        (self, val)
    }
}

// ── View placement ────────────────────────────────────────────────────────

fn random_viewport(
    world: &World,
    extent: (usize, usize),
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Viewport {
    let rotation = Rotation::from_index(rng.gen_range(0..4usize));
    let vp_probe = Viewport { origin: (0, 0), rotation, extent };
    let (a, b) = vp_probe.covered();
    let max_r = (world.size - a) / stride;
    let max_c = (world.size - b) / stride;
    Viewport {
        origin: (rng.gen_range(0..=max_r) * stride, rng.gen_range(0..=max_c) * stride),
        rotation,
        extent,
    }
}

fn random_viewport_near(
    world: &World,
    anchor: &Viewport,
    extent: (usize, usize),
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Viewport {
    let rotation = Rotation::from_index(rng.gen_range(0..4usize));
    let probe = Viewport { origin: (0, 0), rotation, extent };
    let (a, b) = probe.covered();
    let (a0, b0) = anchor.covered();
    let mut pick = |origin0: usize, cand_span: usize, anchor_span: usize, limit: usize| {
        let lo = origin0.saturating_sub(cand_span);
        let hi = (origin0 + anchor_span).min(limit - cand_span);
        let lo_cell = lo.div_ceil(stride);
        let hi_cell = hi / stride;
        rng.gen_range(lo_cell..=hi_cell.max(lo_cell)) * stride
    };
    Viewport {
        origin: (
            pick(anchor.origin.0, a, a0, world.size),
            pick(anchor.origin.1, b, b0, world.size),
        ),
        rotation,
        extent,
    }
}

/// Fraction of `a`'s cells that are visible in `b`.
pub fn overlap_fraction(a: &Viewport, b: &Viewport, stride: usize) -> f64 {
    let labels = ground_truth_correspondence(a, b, stride);
    let cells = labels.len();
    let no_match = cells as u16;
    let matched = labels.iter().filter(|&&l| l != no_match).count();
    matched as f64 / cells as f64
}

/// Place `n_agents` viewports. Agent 0 lands uniformly at random; each
/// later agent either becomes fully disjoint (probability `disjoint_prob`)
/// or is rejection-sampled until the fraction of agent-0 cells it sees
/// falls inside `[overlap_min, overlap_max]`. `overlap_min >= 1` pins the
/// agent to agent 0's exact view.
#[allow(clippy::too_many_arguments)]
pub fn sample_views(
    world: &World,
    n_agents: usize,
    extent: (usize, usize),
    overlap_min: f64,
    overlap_max: f64,
    disjoint_prob: f64,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Viewport>> {
    if n_agents < 1 {
        return Err(Error::Config("need at least one agent".into()));
    }
    Viewport::new((0, 0), Rotation::R0, extent, stride, world.size)?;
    let mut views = vec![random_viewport(world, extent, stride, rng)];
    for _ in 1..n_agents {
        if overlap_min >= 1.0 {
            views.push(Viewport { origin: views[0].origin, rotation: views[0].rotation, extent });
            continue;
        }
        let want_disjoint = rng.gen_range(0.0..1.0) < disjoint_prob;
        let mut placed = None;
        for _ in 0..1000 {
            // Disjoint placements come from anywhere; overlapping ones are
            // proposed inside the window where the covered rectangles can
            // intersect at all, otherwise tight overlap bands are
            // unreachable by uniform rejection.
            let cand = if want_disjoint {
                random_viewport(world, extent, stride, rng)
            } else {
                random_viewport_near(world, &views[0], extent, stride, rng)
            };
            let frac = overlap_fraction(&views[0], &cand, stride);
            let ok = if want_disjoint {
                frac == 0.0
            } else {
                frac >= overlap_min && frac <= overlap_max
            };
            if ok {
                placed = Some(cand);
                break;
            }
        }
        views.push(placed.ok_or_else(|| {
            Error::Placement(format!(
                "no viewport with overlap in [{overlap_min}, {overlap_max}] (disjoint: {want_disjoint}) after 1000 samples"
            ))
        })?);
    }
    Ok(views)
}

/// Small stride-aligned shifts around agent 0's view, same rotation:
/// consecutive-frame style placement with high overlap.
pub fn place_sequence(
    world: &World,
    n_agents: usize,
    extent: (usize, usize),
    stride: usize,
    max_shift_cells: i64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Viewport>> {
    Viewport::new((0, 0), Rotation::R0, extent, stride, world.size)?;
    let mut views = vec![random_viewport(world, extent, stride, rng)];
    let (a, b) = views[0].covered();
    let max_r = world.size - a;
    let max_c = world.size - b;
    for _ in 1..n_agents {
        let (mut dr, mut dc) = (0i64, 0i64);
        for _ in 0..1000 {
            dr = rng.gen_range(-max_shift_cells..=max_shift_cells) * stride as i64;
            dc = rng.gen_range(-max_shift_cells..=max_shift_cells) * stride as i64;
            let nr = views[0].origin.0 as i64 + dr;
            let nc = views[0].origin.1 as i64 + dc;
            if nr >= 0 && nc >= 0 && nr as usize <= max_r && nc as usize <= max_c {
                break;
            }
        }
        let nr = (views[0].origin.0 as i64 + dr).clamp(0, max_r as i64) as usize;
        let nc = (views[0].origin.1 as i64 + dc).clamp(0, max_c as i64) as usize;
        views.push(Viewport { origin: (nr, nc), rotation: views[0].rotation, extent });
    }
    Ok(views)
}

// ── Ground-truth correspondence ───────────────────────────────────────────

/// For each feature cell of `view_a`, the channel label of the `view_b`
/// cell observing the same world region, or the no-match channel.
///
/// Cells are `stride x stride` pixel blocks; because origins are
/// stride-aligned and rotations are in the 90-degree group, a block of A
/// maps onto exactly one block of B whenever it is visible at all, so one
/// representative texel decides the whole cell.
pub fn ground_truth_correspondence(view_a: &Viewport, view_b: &Viewport, stride: usize) -> Vec<u16> {
    let (h, w) = view_a.extent;
    let (hs, ws) = (h / stride, w / stride);
    let (hb, wb) = (view_b.extent.0 / stride, view_b.extent.1 / stride);
    let no_match = (hb * wb) as u16;
    let mut labels = Vec::with_capacity(hs * ws);
    for ci in 0..hs {
        for cj in 0..ws {
            let (wr, wc) = view_a.view_to_world(ci * stride, cj * stride);
            let label = match view_b.world_to_view(wr, wc) {
                Some((r, c)) => ((r / stride) * wb + c / stride) as u16,
                None => no_match,
            };
            labels.push(label);
        }
    }
    labels
}

// ── Degradation ───────────────────────────────────────────────────────────

/// Replace one random axis-aligned rectangle of the image with uniform
/// noise. The rectangle's area fraction lies in `[min_frac, max_frac]`.
/// Returns the mask marking exactly the noised pixels.
pub fn apply_degradation(
    image: &mut [f32],
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
    min_frac: f64,
    max_frac: f64,
) -> Result<Vec<u8>> {
    if !(min_frac > 0.0 && min_frac <= max_frac && max_frac <= 1.0) {
        return Err(Error::Config(format!(
            "degradation fractions must satisfy 0 < min <= max <= 1, got [{min_frac}, {max_frac}]"
        )));
    }
    let total = (height * width) as f64;
    let area_lo = (min_frac * total).ceil() as usize;
    let area_hi = (max_frac * total).floor() as usize;
    let mut rect = None;
    for _ in 0..10_000 {
        let rh = rng.gen_range(1..=height);
        let lo_w = area_lo.div_ceil(rh).max(1);
        let hi_w = (area_hi / rh).min(width);
        if lo_w > hi_w {
            continue;
        }
        let rw = rng.gen_range(lo_w..=hi_w);
        if rh * rw >= area_lo && rh * rw <= area_hi {
            rect = Some((rh, rw));
            break;
        }
    }
    let (rh, rw) = rect.ok_or_else(|| {
        Error::Config(format!(
            "no integer rectangle has area fraction in [{min_frac}, {max_frac}] at {height}x{width}"
        ))
    })?;
    let top = rng.gen_range(0..=height - rh);
    let left = rng.gen_range(0..=width - rw);
    let mut mask = vec![0u8; height * width];
    for y in top..top + rh {
        for x in left..left + rw {
            mask[y * width + x] = 1;
            for ch in 0..3 {
                image[(ch * height + y) * width + x] = rng.gen_range(0.0..1.0);
            }
        }
    }
    Ok(mask)
}

// ── Sample assembly ───────────────────────────────────────────────────────

/// Render the crop a viewport sees: plane-major RGB plus the clean labels.
pub fn render_view(world: &World, vp: &Viewport) -> (Vec<f32>, Vec<u8>) {
    let (h, w) = vp.extent;
    let mut image = vec![0.0f32; 3 * h * w];
    let mut labels = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let (wr, wc) = vp.view_to_world(r, c);
            labels[r * w + c] = world.class_at(wr, wc);
            for ch in 0..3 {
                image[(ch * h + r) * w + c] = world.texel(ch, wr, wc);
            }
        }
    }
    (image, labels)
}

/// Which preset geometry a generated dataset follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Consecutive-frame pairs: same rotation, small shifts, high overlap.
    Sequence,
    /// Independent viewpoints with moderate-to-zero overlap.
    Cross,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preset> {
        match s {
            "sequence" => Ok(Preset::Sequence),
            "cross" => Ok(Preset::Cross),
            other => Err(Error::Config(format!("unknown preset `{other}` (sequence|cross)"))),
        }
    }
}

/// Everything that determines a generated dataset, bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub preset: Preset,
    pub seed: u64,
    pub n_samples: usize,
    pub n_agents: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub num_classes: usize,
    pub world_size: usize,
    pub num_shapes: usize,
    pub degradation_min: f64,
    pub degradation_max: f64,
    /// Cross preset: chance that an auxiliary view is fully disjoint.
    pub disjoint_prob: f64,
    /// Cross preset: accepted overlap band for non-disjoint views.
    pub overlap_min: f64,
    pub overlap_max: f64,
    /// Sequence preset: maximum shift in feature cells per axis.
    pub max_shift_cells: i64,
}

impl GenConfig {
    pub fn preset_defaults(preset: Preset, seed: u64, n_samples: usize, n_agents: usize) -> GenConfig {
        GenConfig {
            preset,
            seed,
            n_samples,
            n_agents,
            height: 32,
            width: 32,
            stride: 4,
            num_classes: 5,
            world_size: 128,
            num_shapes: 12,
            degradation_min: 0.1,
            degradation_max: 0.3,
            disjoint_prob: match preset {
                Preset::Sequence => 0.0,
                Preset::Cross => 0.25,
            },
            overlap_min: 0.3,
            overlap_max: 0.8,
            max_shift_cells: 2,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_agents: self.n_agents,
            height: self.height,
            width: self.width,
            stride: self.stride,
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_config().validate()?;
        if self.world_size < 4 * self.height.max(self.width) {
            return Err(Error::Config(format!(
                "world size {} must be at least 4x the view extent {}x{}",
                self.world_size, self.height, self.width
            )));
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over (seed, index) for independent per-sample streams.
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generate one sample: a fresh world, placed views, rendered crops, the
/// primary-agent degradation, and the ground-truth correspondences.
pub fn generate_sample(cfg: &GenConfig, index: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index));
    let world_seed = rng.gen::<u64>();
    let world = generate_world(world_seed, cfg.world_size, cfg.num_classes, cfg.num_shapes)?;
    let extent = (cfg.height, cfg.width);
    let views = match cfg.preset {
        Preset::Sequence => {
            place_sequence(&world, cfg.n_agents, extent, cfg.stride, cfg.max_shift_cells, &mut rng)?
        }
        Preset::Cross => sample_views(
            &world,
            cfg.n_agents,
            extent,
            cfg.overlap_min,
            cfg.overlap_max,
            cfg.disjoint_prob,
            cfg.stride,
            &mut rng,
        )?,
    };
    let mut images = Vec::with_capacity(cfg.n_agents);
    let mut labels = Vec::with_capacity(cfg.n_agents);
    for vp in &views {
        let (img, lab) = render_view(&world, vp);
        images.push(img);
        labels.push(lab);
    }
    let degradation = apply_degradation(
        &mut images[0],
        cfg.height,
        cfg.width,
        &mut rng,
        cfg.degradation_min,
        cfg.degradation_max,
    )?;
    let corr = views[1..]
        .iter()
        .map(|vb| ground_truth_correspondence(&views[0], vb, cfg.stride))
        .collect();
    Ok(SceneSample::new(index, images, labels, degradation, corr))
}

/// Generate a full dataset. Samples own independent RNG streams derived
/// from `(seed, index)`, so generation parallelizes without changing bytes.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    use rayon::prelude::*;
    let samples: Vec<SceneSample> = (0..cfg.n_samples as u64)
        .into_par_iter()
        .map(|i| generate_sample(cfg, i))
        .collect::<Result<_>>()?;
    Ok(Dataset { config: cfg.dataset_config(), samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn world_regeneration_is_bit_identical() {
        let a = generate_world(7, 64, 5, 12).unwrap();
        let b = generate_world(7, 64, 5, 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_shapes_leaves_background_only() {
        let world = generate_world(3, 32, 4, 0).unwrap();
        assert!(world.grid().iter().all(|&c| c == 0));
    }

    #[test]
    fn every_class_appears_across_seeds() {
        // Brute-force histogram over 100 generated worlds.
        let mut histogram = vec![0u64; 5];
        for seed in 1..=100 {
            let world = generate_world(seed, 256, 5, 12).unwrap();
            for &c in world.grid() {
                histogram[c as usize] += 1;
            }
        }
        for (class, &count) in histogram.iter().enumerate() {
            assert!(count > 0, "class {class} never appeared");
        }
    }

    #[test]
    fn world_too_small_is_config_error() {
        assert!(matches!(generate_world(0, 4, 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn view_world_mapping_is_a_bijection_for_all_rotations() {
        for rot in Rotation::ALL {
            let vp = Viewport { origin: (8, 4), rotation: rot, extent: (8, 12) };
            let mut seen = std::collections::HashSet::new();
            for r in 0..8 {
                for c in 0..12 {
                    let (wr, wc) = vp.view_to_world(r, c);
                    assert!(seen.insert((wr, wc)), "texel hit twice under {rot:?}");
                    assert_eq!(vp.world_to_view(wr, wc), Some((r, c)), "inverse failed under {rot:?}");
                }
            }
            let (a, b) = vp.covered();
            assert_eq!(seen.len(), a * b);
        }
    }

    #[test]
    fn identical_viewports_give_identity_correspondence() {
        let vp = Viewport { origin: (4, 4), rotation: Rotation::R0, extent: (8, 8) };
        let labels = ground_truth_correspondence(&vp, &vp, 4);
        assert_eq!(labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn shift_by_stride_moves_cells_one_column() {
        // B sits one stride to the right: A's cell (0,1) lands on B's (0,0);
        // A's left column falls off B entirely.
        let a = Viewport { origin: (0, 0), rotation: Rotation::R0, extent: (8, 8) };
        let b = Viewport { origin: (0, 4), rotation: Rotation::R0, extent: (8, 8) };
        let labels = ground_truth_correspondence(&a, &b, 4);
        // Cells row-major: (0,0) (0,1) / (1,0) (1,1); no-match channel is 4.
        assert_eq!(labels, vec![4, 0, 4, 2]);
    }

    #[test]
    fn full_disjoint_views_are_all_no_match() {
        let a = Viewport { origin: (0, 0), rotation: Rotation::R0, extent: (8, 8) };
        let b = Viewport { origin: (32, 32), rotation: Rotation::R0, extent: (8, 8) };
        let labels = ground_truth_correspondence(&a, &b, 4);
        assert!(labels.iter().all(|&l| l == 4));
    }

    // Per-texel oracle: a cell corresponds only if every one of its texels
    // reprojects into the same cell of the other view.
    fn brute_force_correspondence(a: &Viewport, b: &Viewport, stride: usize) -> Vec<u16> {
        let (h, w) = a.extent;
        let wb = b.extent.1 / stride;
        let no_match = ((b.extent.0 / stride) * wb) as u16;
        let mut out = Vec::new();
        for ci in 0..h / stride {
            for cj in 0..w / stride {
                let mut cell = None;
                let mut consistent = true;
                for dr in 0..stride {
                    for dc in 0..stride {
                        let (wr, wc) = a.view_to_world(ci * stride + dr, cj * stride + dc);
                        let mapped = b
                            .world_to_view(wr, wc)
                            .map(|(r, c)| ((r / stride) * wb + c / stride) as u16);
                        match (cell, mapped) {
                            (None, m) => cell = Some(m),
                            (Some(prev), m) if prev != m => consistent = false,
                            _ => {}
                        }
                    }
                }
                assert!(consistent, "cell straddles blocks: blocks are not aligned");
                out.push(cell.unwrap().unwrap_or(no_match));
            }
        }
        out
    }

    #[test]
    fn correspondence_agrees_with_per_texel_oracle() {
        let mut r = rng(42);
        let world = generate_world(1, 128, 5, 8).unwrap();
        for _ in 0..50 {
            let a = random_viewport(&world, (16, 16), 4, &mut r);
            let b = random_viewport(&world, (16, 16), 4, &mut r);
            assert_eq!(
                ground_truth_correspondence(&a, &b, 4),
                brute_force_correspondence(&a, &b, 4),
                "mismatch for {a:?} vs {b:?}"
            );
        }
    }

    #[test]
    fn correspondence_is_symmetric_on_matches() {
        let mut r = rng(9);
        let world = generate_world(2, 128, 5, 8).unwrap();
        for _ in 0..50 {
            let a = random_viewport(&world, (16, 16), 4, &mut r);
            let b = random_viewport(&world, (16, 16), 4, &mut r);
            let ab = ground_truth_correspondence(&a, &b, 4);
            let ba = ground_truth_correspondence(&b, &a, 4);
            let cells = ab.len() as u16;
            for (p, &q) in ab.iter().enumerate() {
                if q != cells {
                    assert_eq!(ba[q as usize], p as u16);
                }
            }
        }
    }

    #[test]
    fn full_overlap_pins_to_agent_zero() {
        let world = generate_world(5, 128, 5, 8).unwrap();
        let mut r = rng(1);
        let views = sample_views(&world, 3, (16, 16), 1.0, 1.0, 0.0, 4, &mut r).unwrap();
        for v in &views[1..] {
            assert_eq!(v.origin, views[0].origin);
            assert_eq!(v.rotation, views[0].rotation);
            let corr = ground_truth_correspondence(&views[0], v, 4);
            let expect: Vec<u16> = (0..16).collect();
            assert_eq!(corr, expect);
        }
    }

    #[test]
    fn forced_disjoint_views_share_nothing() {
        let world = generate_world(6, 128, 5, 8).unwrap();
        let mut r = rng(2);
        let views = sample_views(&world, 2, (16, 16), 0.0, 1.0, 1.0, 4, &mut r).unwrap();
        assert_eq!(overlap_fraction(&views[0], &views[1], 4), 0.0);
    }

    #[test]
    fn overlap_bound_holds_over_many_placements() {
        let world = generate_world(8, 128, 5, 8).unwrap();
        let mut r = rng(3);
        let mut total = 0.0;
        let n = 200;
        for _ in 0..n {
            let views = sample_views(&world, 2, (16, 16), 0.5, 1.0, 0.0, 4, &mut r).unwrap();
            let f = overlap_fraction(&views[0], &views[1], 4);
            assert!(f >= 0.5, "overlap {f} below bound");
            total += f;
        }
        let mean = total / n as f64;
        assert!((0.5..=1.0).contains(&mean), "mean overlap {mean}");
    }

    #[test]
    fn degradation_full_frame_and_locality() {
        let (h, w) = (16, 16);
        let mut image: Vec<f32> = (0..3 * h * w).map(|i| (i % 97) as f32 / 97.0).collect();
        let original = image.clone();
        let mask = apply_degradation(&mut image, h, w, &mut rng(4), 1.0, 1.0).unwrap();
        assert!(mask.iter().all(|&m| m == 1));

        let mut image2 = original.clone();
        let mask2 = apply_degradation(&mut image2, h, w, &mut rng(5), 0.1, 0.3).unwrap();
        let area: usize = mask2.iter().map(|&m| m as usize).sum();
        let frac = area as f64 / (h * w) as f64;
        assert!((0.1..=0.3).contains(&frac), "area fraction {frac}");
        for y in 0..h {
            for x in 0..w {
                if mask2[y * w + x] == 0 {
                    for ch in 0..3 {
                        let i = (ch * h + y) * w + x;
                        assert_eq!(image2[i].to_bits(), original[i].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn degradation_noise_statistics_look_uniform() {
        let (h, w) = (128, 128);
        let mut image = vec![0.5f32; 3 * h * w];
        let mask = apply_degradation(&mut image, h, w, &mut rng(6), 0.9, 1.0).unwrap();
        let masked: usize = mask.iter().map(|&m| m as usize).sum();
        assert!(masked >= 10_000);
        for ch in 0..3 {
            let mut sum = 0.0f64;
            let mut lo = f32::MAX;
            let mut hi = f32::MIN;
            for y in 0..h {
                for x in 0..w {
                    if mask[y * w + x] == 1 {
                        let v = image[(ch * h + y) * w + x];
                        sum += v as f64;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let mean = sum / masked as f64;
            assert!((0.48..=0.52).contains(&mean), "channel {ch} mean {mean}");
            assert!(lo >= 0.0 && hi <= 1.0);
        }
    }

    #[test]
    fn degradation_rejects_bad_fractions() {
        let mut image = vec![0.0f32; 3 * 16 * 16];
        assert!(apply_degradation(&mut image, 16, 16, &mut rng(0), 0.0, 0.5).is_err());
        assert!(apply_degradation(&mut image, 16, 16, &mut rng(0), 0.5, 0.4).is_err());
        assert!(apply_degradation(&mut image, 16, 16, &mut rng(0), 0.5, 1.5).is_err());
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let cfg = GenConfig::preset_defaults(Preset::Cross, 11, 4, 3);
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 4);
        assert_eq!(a.samples[0].n_agents(), 3);
    }

    #[test]
    fn no_match_fraction_decreases_with_overlap() {
        let world = generate_world(12, 128, 5, 8).unwrap();
        let mut fractions = Vec::new();
        for (i, overlap) in [0.2, 0.5, 0.8].iter().enumerate() {
            let mut r = rng(100 + i as u64);
            let mut no_match_total = 0usize;
            let mut cells_total = 0usize;
            for _ in 0..100 {
                let views = sample_views(&world, 2, (16, 16), *overlap, 1.0, 0.0, 4, &mut r).unwrap();
                let corr = ground_truth_correspondence(&views[0], &views[1], 4);
                let nm = corr.len() as u16;
                no_match_total += corr.iter().filter(|&&l| l == nm).count();
                cells_total += corr.len();
            }
            fractions.push(no_match_total as f64 / cells_total as f64);
        }
        assert!(fractions[0] >= fractions[1] && fractions[1] >= fractions[2], "{fractions:?}");
    }

    #[test]
    fn labels_are_clean_under_degradation() {
        let cfg = GenConfig::preset_defaults(Preset::Sequence, 21, 2, 2);
        let ds = generate_dataset(&cfg).unwrap();
        for sample in &ds.samples {
            // Re-render the world for agent 0 and confirm labels ignore the
            // degradation rectangle entirely: labels come from the clean
            // class grid by construction, so they must stay in range and the
            // degraded pixels must still carry the original class.
            assert!(sample.labels[0].iter().all(|&c| (c as usize) < cfg.num_classes));
            let masked: usize = sample.degradation.iter().map(|&m| m as usize).sum();
            assert!(masked > 0);
        }
    }
}
