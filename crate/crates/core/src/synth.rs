//! Synthetic two-domain instance benchmark.
//!
//! An instance is a class shape (its coarse silhouette) carrying
//! part-level attributes: a marker glyph placed in one quadrant and a
//! stripe count. The same geometry renders into two domains — `filled`
//! (anti-aliased solid shading at a per-instance palette intensity, plus
//! pixel noise) and `contour` (thin strokes along the geometry's edges
//! with per-vertex jitter and no palette). Many instances share a class
//! shape, so telling them apart requires the part attributes, not the
//! silhouette.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassShape {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ClassShape {
    pub const ALL: [ClassShape; 4] = [
        ClassShape::Disk,
        ClassShape::Square,
        ClassShape::Triangle,
        ClassShape::Cross,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerGlyph {
    Dot,
    Bar,
    Notch,
}

impl MarkerGlyph {
    pub const ALL: [MarkerGlyph; 3] = [MarkerGlyph::Dot, MarkerGlyph::Bar, MarkerGlyph::Notch];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    Ne,
    Nw,
    Se,
    Sw,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::Ne, Quadrant::Nw, Quadrant::Se, Quadrant::Sw];

    /// Marker anchor in the object frame (y grows downward).
    fn anchor(self) -> (f32, f32) {
        match self {
            Quadrant::Ne => (4.0, -4.0),
            Quadrant::Nw => (-4.0, -4.0),
            Quadrant::Se => (4.0, 4.0),
            Quadrant::Sw => (-4.0, 4.0),
        }
    }
}

pub const MAX_STRIPES: u8 = 3;

/// Size of the discrete attribute space: 4 shapes x 3 glyphs x
/// 4 quadrants x 4 stripe counts.
pub const ATTRIBUTE_COMBINATIONS: usize = 4 * 3 * 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub id: usize,
    pub shape: ClassShape,
    pub glyph: MarkerGlyph,
    pub quadrant: Quadrant,
    pub stripes: u8,
    /// Palette intensity in the filled domain; the contour domain never
    /// reads it.
    pub fill: f32,
}

impl InstanceSpec {
    fn attribute_key(&self) -> (u8, u8, u8, u8) {
        let s = ClassShape::ALL.iter().position(|&x| x == self.shape).unwrap() as u8;
        let g = MarkerGlyph::ALL.iter().position(|&x| x == self.glyph).unwrap() as u8;
        let q = Quadrant::ALL.iter().position(|&x| x == self.quadrant).unwrap() as u8;
        (s, g, q, self.stripes)
    }
}

/// Draw `n` instances with distinct attribute tuples. At least two
/// instances always share a class shape, so the silhouette alone cannot
/// identify every instance.
pub fn generate_instances(n: usize, seed: u64) -> Result<Vec<InstanceSpec>> {
    if n < 2 {
        return Err(Error::config(format!("need at least 2 instances, got {n}")));
    }
    if n > ATTRIBUTE_COMBINATIONS {
        return Err(Error::config(format!(
            "at most {ATTRIBUTE_COMBINATIONS} distinct instances exist, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = BTreeSet::new();
    let mut out: Vec<InstanceSpec> = Vec::with_capacity(n);
    while out.len() < n {
        let spec = InstanceSpec {
            id: out.len(),
            shape: ClassShape::ALL[rng.random_range(0..4)],
            glyph: MarkerGlyph::ALL[rng.random_range(0..3)],
            quadrant: Quadrant::ALL[rng.random_range(0..4)],
            stripes: rng.random_range(0..=MAX_STRIPES),
            fill: 0.0,
        };
        if taken.insert(spec.attribute_key()) {
            out.push(spec);
        }
    }
    // Force a shared silhouette when a small draw happened to avoid one.
    let shared_shape = out
        .iter()
        .any(|a| out.iter().filter(|b| b.shape == a.shape).count() >= 2);
    if !shared_shape {
        taken.remove(&out[1].attribute_key());
        out[1].shape = out[0].shape;
        while !taken.insert(out[1].attribute_key()) {
            out[1].stripes = (out[1].stripes + 1) % (MAX_STRIPES + 1);
        }
    }
    for spec in out.iter_mut() {
        spec.fill = 0.45 + 0.5 * rng.random_range(0.0f32..1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Filled,
    Contour,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::Filled, Domain::Contour];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Filled => "filled",
            Domain::Contour => "contour",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Canonical pose in both domains.
    Aligned,
    /// Independent random pose per render.
    Perturbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub domain: Domain,
    pub size: usize,
    pub channels: usize,
    pub mode: AlignMode,
    /// Translation bound in pixels; shrunk per instance so the object
    /// stays fully inside the frame.
    pub max_translation: f32,
    pub max_rotation_deg: f32,
    pub flip_probability: f64,
    /// Std of the per-vertex Gaussian displacement in the contour
    /// domain, clamped at 2.5 sigma.
    pub contour_jitter: f32,
    /// Std of per-pixel Gaussian noise in the filled domain.
    pub noise_std: f32,
}

impl RenderConfig {
    pub fn aligned(domain: Domain, channels: usize) -> Self {
        RenderConfig {
            domain,
            size: 32,
            channels,
            mode: AlignMode::Aligned,
            max_translation: 0.0,
            max_rotation_deg: 0.0,
            flip_probability: 0.0,
            contour_jitter: 1.0,
            noise_std: 0.02,
        }
    }

    pub fn perturbed(domain: Domain, channels: usize) -> Self {
        RenderConfig {
            domain,
            size: 32,
            channels,
            mode: AlignMode::Perturbed,
            max_translation: 4.0,
            max_rotation_deg: 25.0,
            flip_probability: 0.0,
            contour_jitter: 1.0,
            noise_std: 0.02,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::config(format!(
                "render size must be at least 16, got {}",
                self.size
            )));
        }
        if self.channels == 0 {
            return Err(Error::config("render channels must be positive"));
        }
        if self.max_translation < 0.0 || self.max_rotation_deg < 0.0 {
            return Err(Error::config("perturbation ranges must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config("flip probability must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Rigid pose applied to the object geometry: horizontal flip about the
/// object center, then rotation, then translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub dx: f32,
    pub dy: f32,
    pub rotation_deg: f32,
    pub flip: bool,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            dx: 0.0,
            dy: 0.0,
            rotation_deg: 0.0,
            flip: false,
        }
    }
}

const STROKE_HALF_WIDTH: f32 = 0.55;
const JITTER_CLAMP_SIGMA: f32 = 2.5;
const FRAME_SAFETY: f32 = 0.5;
/// Subsamples per pixel axis for coverage anti-aliasing.
const SUPERSAMPLE: usize = 4;

/// Draw a pose for one render. The translation bound is the configured
/// maximum shrunk so that the geometry (including stroke width and the
/// clamped contour jitter) cannot leave the frame.
pub fn sample_pose<R: Rng>(spec: &InstanceSpec, cfg: &RenderConfig, rng: &mut R) -> Pose {
    if cfg.mode == AlignMode::Aligned {
        return Pose::identity();
    }
    let half = cfg.size as f32 / 2.0;
    let allowance = match cfg.domain {
        Domain::Filled => FRAME_SAFETY,
        Domain::Contour => {
            FRAME_SAFETY + STROKE_HALF_WIDTH + JITTER_CLAMP_SIGMA * cfg.contour_jitter
        }
    };
    let limit = (half - instance_extent(spec) - allowance).max(0.0);
    let t = cfg.max_translation.min(limit);
    let dx = if t > 0.0 { rng.random_range(-t..t) } else { 0.0 };
    let dy = if t > 0.0 { rng.random_range(-t..t) } else { 0.0 };
    let r = cfg.max_rotation_deg;
    let rotation_deg = if r > 0.0 { rng.random_range(-r..r) } else { 0.0 };
    let flip = rng.random_bool(cfg.flip_probability);
    Pose {
        dx,
        dy,
        rotation_deg,
        flip,
    }
}

/// Render with a pose drawn from the config (identity when aligned).
pub fn render<R: Rng>(spec: &InstanceSpec, cfg: &RenderConfig, rng: &mut R) -> Result<Tensor> {
    let pose = sample_pose(spec, cfg, rng);
    render_with_pose(spec, cfg, &pose, rng)
}

/// Render under an explicit pose. `rng` drives only the contour vertex
/// jitter and the filled-domain pixel noise.
pub fn render_with_pose<R: Rng>(
    spec: &InstanceSpec,
    cfg: &RenderConfig,
    pose: &Pose,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    let size = cfg.size;
    let intensity = match cfg.domain {
        Domain::Filled => rasterize_filled(spec, cfg, pose),
        Domain::Contour => rasterize_contour(spec, cfg, pose, rng),
    };

    let mut data = vec![0.0 as Real; size * size * cfg.channels];
    if cfg.domain == Domain::Filled && cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0f64, cfg.noise_std as f64).expect("positive std");
        for (px, &v) in intensity.iter().enumerate() {
            for ch in 0..cfg.channels {
                data[px * cfg.channels + ch] = (v as f64 + noise.sample(rng)) as Real;
            }
        }
    } else {
        for (px, &v) in intensity.iter().enumerate() {
            for ch in 0..cfg.channels {
                data[px * cfg.channels + ch] = v as Real;
            }
        }
    }
    Tensor::new(vec![size, size, cfg.channels], data)
}

/// Binary mask of the marker glyph's footprint under a pose; used to
/// check that mid-layer activation maps respond where the part actually
/// is.
pub fn render_part_mask(spec: &InstanceSpec, cfg: &RenderConfig, pose: &Pose) -> Result<Tensor> {
    cfg.validate()?;
    let size = cfg.size;
    let glyph = glyph_polygon(spec.glyph, spec.quadrant);
    let center = size as f32 / 2.0;
    let mut data = vec![0.0 as Real; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let q = subsample_point(px, py, sx, sy);
                    let o = inverse_pose(q, pose, center);
                    if point_in_polygon(o, &glyph) {
                        hits += 1;
                    }
                }
            }
            if hits * 2 >= SUPERSAMPLE * SUPERSAMPLE {
                data[py * size + px] = 1.0;
            }
        }
    }
    Tensor::new(vec![size, size, 1], data)
}

// ---------------------------------------------------------------------
// Geometry

fn shape_polygon(shape: ClassShape) -> Vec<(f32, f32)> {
    match shape {
        ClassShape::Disk => regular_polygon(24, 8.0, (0.0, 0.0)),
        ClassShape::Square => vec![(-7.0, -7.0), (7.0, -7.0), (7.0, 7.0), (-7.0, 7.0)],
        ClassShape::Triangle => {
            // Apex up (negative y), circumradius 8.5.
            let r = 8.5f32;
            [-90.0f32, 30.0, 150.0]
                .iter()
                .map(|deg| {
                    let a = deg.to_radians();
                    (r * a.cos(), r * a.sin())
                })
                .collect()
        }
        ClassShape::Cross => vec![
            (-7.5, -2.5),
            (-2.5, -2.5),
            (-2.5, -7.5),
            (2.5, -7.5),
            (2.5, -2.5),
            (7.5, -2.5),
            (7.5, 2.5),
            (2.5, 2.5),
            (2.5, 7.5),
            (-2.5, 7.5),
            (-2.5, 2.5),
            (-7.5, 2.5),
        ],
    }
}

fn glyph_polygon(glyph: MarkerGlyph, quadrant: Quadrant) -> Vec<(f32, f32)> {
    let (cx, cy) = quadrant.anchor();
    match glyph {
        MarkerGlyph::Dot => regular_polygon(12, 1.8, (cx, cy)),
        MarkerGlyph::Bar => vec![
            (cx - 2.4, cy - 0.9),
            (cx + 2.4, cy - 0.9),
            (cx + 2.4, cy + 0.9),
            (cx - 2.4, cy + 0.9),
        ],
        MarkerGlyph::Notch => vec![
            (cx - 1.5, cy - 1.5),
            (cx + 1.5, cy - 1.5),
            (cx + 1.5, cy + 1.5),
            (cx - 1.5, cy + 1.5),
        ],
    }
}

fn regular_polygon(sides: usize, radius: f32, center: (f32, f32)) -> Vec<(f32, f32)> {
    (0..sides)
        .map(|i| {
            let a = (i as f32) / (sides as f32) * std::f32::consts::TAU;
            (center.0 + radius * a.cos(), center.1 + radius * a.sin())
        })
        .collect()
}

fn stripe_offsets(stripes: u8) -> &'static [f32] {
    match stripes {
        0 => &[],
        1 => &[0.0],
        2 => &[-3.0, 3.0],
        _ => &[-4.0, 0.0, 4.0],
    }
}

const STRIPE_HALF_HEIGHT: f32 = 0.8;

/// Farthest vertex of the canonical geometry from the object center.
fn instance_extent(spec: &InstanceSpec) -> f32 {
    shape_polygon(spec.shape)
        .iter()
        .chain(glyph_polygon(spec.glyph, spec.quadrant).iter())
        .map(|&(x, y)| (x * x + y * y).sqrt())
        .fold(0.0, f32::max)
}

fn subsample_point(px: usize, py: usize, sx: usize, sy: usize) -> (f32, f32) {
    let step = 1.0 / SUPERSAMPLE as f32;
    (
        px as f32 + (sx as f32 + 0.5) * step,
        py as f32 + (sy as f32 + 0.5) * step,
    )
}

/// Map a canvas point into the object frame (undo translate, rotate,
/// flip).
fn inverse_pose(q: (f32, f32), pose: &Pose, center: f32) -> (f32, f32) {
    let x = q.0 - center - pose.dx;
    let y = q.1 - center - pose.dy;
    let a = -pose.rotation_deg.to_radians();
    let (sin, cos) = a.sin_cos();
    let rx = x * cos - y * sin;
    let ry = x * sin + y * cos;
    if pose.flip {
        (-rx, ry)
    } else {
        (rx, ry)
    }
}

fn point_in_polygon(p: (f32, f32), poly: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > p.1) != (yj > p.1) {
            let x_cross = xi + (p.1 - yi) * (xj - xi) / (yj - yi);
            if p.0 < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// x-intervals where the horizontal line `y` lies inside the polygon
/// (even-odd rule).
fn horizontal_intersections(poly: &[(f32, f32)], y: f32) -> Vec<(f32, f32)> {
    let mut xs = Vec::new();
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) {
            xs.push(xi + (y - yi) * (xj - xi) / (yj - yi));
        }
        j = i;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

fn dist_point_segment(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn rasterize_filled(spec: &InstanceSpec, cfg: &RenderConfig, pose: &Pose) -> Vec<f32> {
    let size = cfg.size;
    let center = size as f32 / 2.0;
    let shape = shape_polygon(spec.shape);
    let glyph = glyph_polygon(spec.glyph, spec.quadrant);
    let offsets = stripe_offsets(spec.stripes);

    let body = spec.fill;
    let stripe = spec.fill * 0.55;
    let glyph_level = match spec.glyph {
        MarkerGlyph::Notch => spec.fill * 0.3,
        MarkerGlyph::Dot | MarkerGlyph::Bar => spec.fill + 0.35,
    };

    let sub_weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    let mut out = vec![0.0f32; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut acc = 0.0f32;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let o = inverse_pose(subsample_point(px, py, sx, sy), pose, center);
                    let v = if point_in_polygon(o, &glyph) {
                        glyph_level
                    } else if point_in_polygon(o, &shape) {
                        if offsets
                            .iter()
                            .any(|&c| (o.1 - c).abs() <= STRIPE_HALF_HEIGHT)
                        {
                            stripe
                        } else {
                            body
                        }
                    } else {
                        0.0
                    };
                    acc += v;
                }
            }
            out[py * size + px] = acc * sub_weight;
        }
    }
    out
}

fn rasterize_contour<R: Rng>(
    spec: &InstanceSpec,
    cfg: &RenderConfig,
    pose: &Pose,
    rng: &mut R,
) -> Vec<f32> {
    let size = cfg.size;
    let center = size as f32 / 2.0;

    let jitter = |rng: &mut R| -> f32 {
        if cfg.contour_jitter > 0.0 {
            let normal = Normal::new(0.0f64, cfg.contour_jitter as f64).expect("positive std");
            let clamp = JITTER_CLAMP_SIGMA * cfg.contour_jitter;
            (normal.sample(rng) as f32).clamp(-clamp, clamp)
        } else {
            0.0
        }
    };
    let jitter_poly = |poly: Vec<(f32, f32)>, rng: &mut R| -> Vec<(f32, f32)> {
        poly.into_iter()
            .map(|(x, y)| (x + jitter(rng), y + jitter(rng)))
            .collect()
    };

    let shape = jitter_poly(shape_polygon(spec.shape), rng);
    let glyph = jitter_poly(glyph_polygon(spec.glyph, spec.quadrant), rng);

    // Strokes: polygon outlines plus stripe chords across the (already
    // jittered) silhouette.
    let mut segments: Vec<((f32, f32), (f32, f32))> = Vec::new();
    for poly in [&shape, &glyph] {
        for i in 0..poly.len() {
            segments.push((poly[i], poly[(i + 1) % poly.len()]));
        }
    }
    for &offset in stripe_offsets(spec.stripes) {
        for (x0, x1) in horizontal_intersections(&shape, offset) {
            let a = (x0 + jitter(rng), offset + jitter(rng));
            let b = (x1 + jitter(rng), offset + jitter(rng));
            segments.push((a, b));
        }
    }

    let sub_weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    let mut out = vec![0.0f32; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut acc = 0.0f32;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let o = inverse_pose(subsample_point(px, py, sx, sy), pose, center);
                    let on_stroke = segments
                        .iter()
                        .any(|&(a, b)| dist_point_segment(o, a, b) <= STROKE_HALF_WIDTH);
                    if on_stroke {
                        acc += 1.0;
                    }
                }
            }
            out[py * size + px] = acc * sub_weight;
        }
    }
    out
}

// ---------------------------------------------------------------------
// Dataset on disk

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub path: String,
    pub instance: usize,
    pub domain: Domain,
    pub view: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub items: Vec<ManifestItem>,
    pub mode: AlignMode,
    pub seed: u64,
}

impl Manifest {
    /// Indices of items matching a split and domain, in manifest order.
    pub fn select(&self, split: Split, domain: Domain) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.split == split && it.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sorted unique instance ids in a split.
    pub fn instance_ids(&self, split: Split) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .items
            .iter()
            .filter(|it| it.split == split)
            .map(|it| it.instance)
            .collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub mode: AlignMode,
    /// Total instance count; the first `train_instances` of the
    /// generated order form the train split, the rest the test split.
    pub instances: usize,
    pub train_instances: usize,
    pub renders_per_domain: usize,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f32,
    #[serde(default = "default_contour_jitter")]
    pub contour_jitter: f32,
    #[serde(default)]
    pub flip_probability: f64,
}

fn default_image_size() -> usize {
    32
}
fn default_channels() -> usize {
    1
}
fn default_noise_std() -> f32 {
    0.02
}
fn default_contour_jitter() -> f32 {
    1.0
}

impl DatasetConfig {
    /// Grayscale pose-aligned benchmark.
    pub fn aligned(instances: usize, train_instances: usize, seed: u64) -> Self {
        DatasetConfig {
            mode: AlignMode::Aligned,
            instances,
            train_instances,
            renders_per_domain: 1,
            seed,
            image_size: 32,
            channels: 1,
            noise_std: 0.02,
            contour_jitter: 1.0,
            flip_probability: 0.0,
        }
    }

    /// 3-channel pose-varying benchmark with several views per domain.
    pub fn perturbed(
        instances: usize,
        train_instances: usize,
        renders_per_domain: usize,
        seed: u64,
    ) -> Self {
        DatasetConfig {
            mode: AlignMode::Perturbed,
            instances,
            train_instances,
            renders_per_domain,
            seed,
            image_size: 32,
            channels: 3,
            noise_std: 0.02,
            contour_jitter: 1.0,
            flip_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_instances < 2 {
            return Err(Error::config("need at least 2 training instances"));
        }
        if self.instances < self.train_instances + 2 {
            return Err(Error::config(format!(
                "need at least 2 test instances: {} total, {} train",
                self.instances, self.train_instances
            )));
        }
        if self.renders_per_domain == 0 {
            return Err(Error::config("renders_per_domain must be positive"));
        }
        Ok(())
    }

    fn render_config(&self, domain: Domain) -> RenderConfig {
        let mut cfg = match self.mode {
            AlignMode::Aligned => RenderConfig::aligned(domain, self.channels),
            AlignMode::Perturbed => RenderConfig::perturbed(domain, self.channels),
        };
        cfg.size = self.image_size;
        cfg.noise_std = self.noise_std;
        cfg.contour_jitter = self.contour_jitter;
        cfg.flip_probability = if self.mode == AlignMode::Perturbed {
            self.flip_probability
        } else {
            0.0
        };
        cfg
    }
}

/// Default train-split size when a caller gives only a total: two
/// thirds, keeping at least two instances on each side. Totals under 4
/// cannot satisfy both sides; the returned value then fails
/// [`DatasetConfig::validate`] with a clear message.
pub fn default_train_instances(total: usize) -> usize {
    if total < 4 {
        return 2;
    }
    (total * 2 / 3).clamp(2, total - 2)
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// The test split must contain two instances sharing a class shape —
/// the pair a silhouette-only model cannot separate. Small test splits
/// occasionally miss one; move a shared-shape pair (one always exists)
/// to the end of the order and renumber, so the pair lands in test.
fn ensure_shared_shape_in_test(specs: &mut Vec<InstanceSpec>, train_instances: usize) {
    let test = &specs[train_instances..];
    if test
        .iter()
        .any(|a| test.iter().filter(|b| b.shape == a.shape).count() >= 2)
    {
        return;
    }
    let (mut i, mut j) = (0, 0);
    'outer: for a in 0..specs.len() {
        for b in a + 1..specs.len() {
            if specs[a].shape == specs[b].shape {
                (i, j) = (a, b);
                break 'outer;
            }
        }
    }
    let second = specs.remove(j);
    let first = specs.remove(i);
    specs.push(first);
    specs.push(second);
    for (id, spec) in specs.iter_mut().enumerate() {
        spec.id = id;
    }
}

/// Render the full dataset under `out_dir` (images as CDTF tensors under
/// `images/`, plus `manifest.json`) and return the manifest. Each item
/// renders from its own rng stream derived from the dataset seed, so the
/// output is byte-identical across runs.
pub fn make_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut specs = generate_instances(cfg.instances, cfg.seed)?;
    ensure_shared_shape_in_test(&mut specs, cfg.train_instances);
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut items = Vec::new();
    let mut stream = 0u64;
    for spec in &specs {
        let split = if spec.id < cfg.train_instances {
            Split::Train
        } else {
            Split::Test
        };
        for domain in Domain::BOTH {
            let render_cfg = cfg.render_config(domain);
            for view in 0..cfg.renders_per_domain {
                stream += 1;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream);
                let image = render(spec, &render_cfg, &mut rng)?;
                let name = format!("img_{:03}_{}_{:02}.cdtf", spec.id, domain.as_str(), view);
                write_tensor(&images_dir.join(&name), &image)?;
                items.push(ManifestItem {
                    path: format!("images/{name}"),
                    instance: spec.id,
                    domain,
                    view,
                    split,
                });
            }
        }
    }
    let manifest = Manifest {
        items,
        mode: cfg.mode,
        seed: cfg.seed,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A manifest plus its images loaded into memory, index-aligned with
/// `manifest.items`.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub images: Vec<Tensor>,
    pub root: PathBuf,
}

impl LoadedDataset {
    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }
}

/// Load a dataset directory produced by [`make_dataset`].
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let path = dir.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.items.is_empty() {
        return Err(Error::format(&path, "manifest lists no items"));
    }
    let mut images = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        images.push(read_tensor(&dir.join(&item.path))?);
    }
    let first = images[0].shape().to_vec();
    for (item, image) in manifest.items.iter().zip(&images) {
        if image.shape() != first {
            return Err(Error::format(
                dir.join(&item.path),
                format!("image shape {:?} differs from {:?}", image.shape(), first),
            ));
        }
    }
    Ok(LoadedDataset {
        manifest,
        images,
        root: dir.to_path_buf(),
    })
}
