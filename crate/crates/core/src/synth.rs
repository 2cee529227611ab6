//! Procedural composite objects built from surface-sampled primitives.
//!
//! Coordinates: `y` is up, `z` is depth. Condition images are orthographic
//! projections along `+z`, so the template families keep their parts spread
//! over the `x`/`y` plane.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, Aabb};
use crate::nn::stream_rng;

pub type Point = [f32; 3];

/// Parts per object never reach this count.
pub const PART_COUNT_LIMIT: usize = 16;
/// Default maximum pairwise part IoU admitted by [`filter_object`].
pub const DEFAULT_IOU_CAP: f64 = 0.1;
/// Half-width of the cube the assembled object is scaled into.
const FIT_HALF_EXTENT: f64 = 0.45;

/// Surface primitive vocabulary; the discriminant is the part type id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Primitive {
    Box = 0,
    Sphere = 1,
    Cylinder = 2,
    Cone = 3,
}

pub const NUM_PART_TYPES: usize = 4;

impl Primitive {
    pub fn type_id(self) -> usize {
        self as usize
    }

    fn from_index(i: usize) -> Self {
        match i % NUM_PART_TYPES {
            0 => Primitive::Box,
            1 => Primitive::Sphere,
            2 => Primitive::Cylinder,
            _ => Primitive::Cone,
        }
    }
}

/// Template families the generator draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Box top over a row of cylinder legs.
    Table,
    /// Seat, backrest and a row of legs.
    Chair,
    /// Vertical stack of mixed primitives.
    Tower,
    /// Plank carrying a row of small items.
    Shelf,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Table, Family::Chair, Family::Tower, Family::Shelf];

    pub fn tag(self) -> &'static str {
        match self {
            Family::Table => "table",
            Family::Chair => "chair",
            Family::Tower => "tower",
            Family::Shelf => "shelf",
        }
    }

    fn min_parts(self) -> usize {
        match self {
            Family::Tower => 1,
            Family::Table | Family::Shelf => 2,
            Family::Chair => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartPointCloud {
    pub points: Vec<Point>,
    pub type_id: usize,
    pub part_index: usize,
}

impl PartPointCloud {
    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a] as f64;
            }
        }
        c.map(|v| v / self.points.len().max(1) as f64)
    }
}

impl AsRef<[Point]> for PartPointCloud {
    fn as_ref(&self) -> &[Point] {
        &self.points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeObject {
    pub object_id: String,
    pub category_tag: String,
    pub parts: Vec<PartPointCloud>,
}

impl CompositeObject {
    /// Canonical part count.
    pub fn n_obj(&self) -> usize {
        self.parts.len()
    }

    /// All part points concatenated in canonical order.
    pub fn assembled(&self) -> Vec<Point> {
        self.parts.iter().flat_map(|p| p.points.iter().copied()).collect()
    }
}

/// Single-view condition image, row-major with row 0 at the top (`+y`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionImage {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub camera_tag: String,
}

impl ConditionImage {
    pub fn lit_pixels(&self) -> usize {
        self.pixels.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub min_parts: usize,
    pub max_parts: usize,
    pub p_max: usize,
    pub points_per_part: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            min_parts: 2,
            max_parts: 6,
            p_max: 8,
            points_per_part: 256,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_parts < 1 {
            return Err(Error::Config("min_parts must be at least 1".into()));
        }
        if self.max_parts < self.min_parts {
            return Err(Error::Config(format!(
                "max_parts ({}) is below min_parts ({})",
                self.max_parts, self.min_parts
            )));
        }
        if self.max_parts > self.p_max {
            return Err(Error::Config(format!(
                "max_parts ({}) exceeds the slot capacity p_max ({})",
                self.max_parts, self.p_max
            )));
        }
        if self.points_per_part == 0 {
            return Err(Error::Config("points_per_part must be positive".into()));
        }
        Ok(())
    }
}

/// An analytically placed primitive before point sampling.
#[derive(Debug, Clone, Copy)]
struct Placed {
    kind: Primitive,
    center: [f64; 3],
    /// Box: half extents. Sphere: (r, r, r). Cylinder/cone: (r, half height, r).
    half: [f64; 3],
}

impl Placed {
    fn boxed(center: [f64; 3], half: [f64; 3]) -> Self {
        Self { kind: Primitive::Box, center, half }
    }

    fn round(kind: Primitive, center: [f64; 3], radius: f64, half_height: f64) -> Self {
        let half = match kind {
            Primitive::Sphere => [radius; 3],
            _ => [radius, half_height, radius],
        };
        Self { kind, center, half }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Evenly spaced positions across `[-span/2, span/2]`.
fn row_positions(n: usize, span: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -span / 2.0 + span * i as f64 / (n - 1) as f64).collect()
}

const GAP: f64 = 0.08;
/// Vertical clearance between stacked tower parts, wide enough to stay
/// visible in the silhouette after fitting the tower into the unit cube.
const TOWER_GAP: f64 = 0.2;

fn build_table(n: usize, rng: &mut impl Rng) -> Vec<Placed> {
    let legs = n - 1;
    let width = uniform(rng, 0.9, 1.2);
    let thick = uniform(rng, 0.08, 0.12);
    let leg_h = uniform(rng, 0.5, 0.8);
    let r = uniform(rng, 0.03, 0.045);
    let mut parts = vec![Placed::boxed([0.0, thick / 2.0, 0.0], [width / 2.0, thick / 2.0, width * 0.25])];
    for x in row_positions(legs, width - 2.0 * r - 0.06) {
        parts.push(Placed::round(Primitive::Cylinder, [x, -GAP - leg_h / 2.0, 0.0], r, leg_h / 2.0));
    }
    parts
}

fn build_chair(n: usize, rng: &mut impl Rng) -> Vec<Placed> {
    let legs = n - 2;
    let width = uniform(rng, 0.6, 0.8);
    let depth = width * 0.8;
    let thick = uniform(rng, 0.07, 0.1);
    let back_h = uniform(rng, 0.4, 0.6);
    let leg_h = uniform(rng, 0.4, 0.6);
    let r = uniform(rng, 0.035, 0.05);
    let mut parts = vec![
        Placed::boxed([0.0, thick / 2.0, 0.0], [width / 2.0, thick / 2.0, depth / 2.0]),
        Placed::boxed(
            [0.0, thick + GAP + back_h / 2.0, -depth / 2.0 + 0.04],
            [width / 2.0, back_h / 2.0, 0.03],
        ),
    ];
    for x in row_positions(legs, width - 2.0 * r - 0.04) {
        parts.push(Placed::round(Primitive::Cylinder, [x, -GAP - leg_h / 2.0, 0.0], r, leg_h / 2.0));
    }
    parts
}

fn build_tower(n: usize, rng: &mut impl Rng) -> Vec<Placed> {
    let mut parts = Vec::with_capacity(n);
    let base = uniform(rng, 0.1, 0.14);
    let mut y = 0.0;
    for _ in 0..n {
        let kind = Primitive::from_index(rng.random_range(0..NUM_PART_TYPES));
        let half_h = base * uniform(rng, 0.9, 1.1);
        let radius = match kind {
            Primitive::Sphere => half_h,
            _ => uniform(rng, 0.15, 0.3),
        };
        let placed = match kind {
            Primitive::Box => Placed::boxed([0.0, y + half_h, 0.0], [radius, half_h, radius * 0.8]),
            _ => Placed::round(kind, [0.0, y + half_h, 0.0], radius, half_h),
        };
        parts.push(placed);
        y += 2.0 * half_h + TOWER_GAP;
    }
    parts
}

fn build_shelf(n: usize, rng: &mut impl Rng) -> Vec<Placed> {
    let items = n - 1;
    let width = uniform(rng, 1.0, 1.3);
    let thick = uniform(rng, 0.07, 0.1);
    let mut parts = vec![Placed::boxed([0.0, thick / 2.0, 0.0], [width / 2.0, thick / 2.0, 0.15])];
    let span = width * 0.8;
    let pitch = if items > 1 { span / (items - 1) as f64 } else { width };
    let radius_cap = (pitch / 2.0 - GAP / 2.0).min(0.12);
    let kind = [Primitive::Sphere, Primitive::Cylinder, Primitive::Cone][rng.random_range(0..3)];
    let radius = uniform(rng, 0.6 * radius_cap, radius_cap);
    let half_h = match kind {
        Primitive::Sphere => radius,
        _ => uniform(rng, 0.1, 0.18),
    };
    for x in row_positions(items, span) {
        parts.push(Placed::round(kind, [x, thick + GAP + half_h, 0.0], radius, half_h));
    }
    parts
}

/// Uniform surface samples of a placed primitive.
fn sample_surface(p: &Placed, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let [cx, cy, cz] = p.center;
    let mut out = Vec::with_capacity(n);
    match p.kind {
        Primitive::Box => {
            let [ex, ey, ez] = p.half;
            let areas = [ey * ez, ex * ez, ex * ey];
            let total: f64 = areas.iter().sum();
            for _ in 0..n {
                let u = rng.random::<f64>() * total;
                let axis = if u < areas[0] {
                    0
                } else if u < areas[0] + areas[1] {
                    1
                } else {
                    2
                };
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut q = [
                    uniform(rng, -ex, ex),
                    uniform(rng, -ey, ey),
                    uniform(rng, -ez, ez),
                ];
                q[axis] = sign * p.half[axis];
                out.push([cx + q[0], cy + q[1], cz + q[2]]);
            }
        }
        Primitive::Sphere => {
            let r = p.half[0];
            for _ in 0..n {
                let z = uniform(rng, -1.0, 1.0);
                let phi = uniform(rng, 0.0, 2.0 * PI);
                let s = (1.0 - z * z).sqrt();
                out.push([cx + r * s * phi.cos(), cy + r * z, cz + r * s * phi.sin()]);
            }
        }
        Primitive::Cylinder => {
            let r = p.half[0];
            let hh = p.half[1];
            let side = 2.0 * PI * r * 2.0 * hh;
            let cap = PI * r * r;
            for _ in 0..n {
                let u = rng.random::<f64>() * (side + 2.0 * cap);
                let phi = uniform(rng, 0.0, 2.0 * PI);
                if u < side {
                    let y = uniform(rng, -hh, hh);
                    out.push([cx + r * phi.cos(), cy + y, cz + r * phi.sin()]);
                } else {
                    let rr = r * rng.random::<f64>().sqrt();
                    let y = if u < side + cap { hh } else { -hh };
                    out.push([cx + rr * phi.cos(), cy + y, cz + rr * phi.sin()]);
                }
            }
        }
        Primitive::Cone => {
            let r = p.half[0];
            let h = 2.0 * p.half[1];
            let slant = (r * r + h * h).sqrt();
            let lateral = PI * r * slant;
            let base = PI * r * r;
            for _ in 0..n {
                let u = rng.random::<f64>() * (lateral + base);
                let phi = uniform(rng, 0.0, 2.0 * PI);
                if u < lateral {
                    // Fraction of the way from apex to base; area grows linearly with it.
                    let s = rng.random::<f64>().sqrt();
                    let y = p.half[1] - s * h;
                    out.push([cx + s * r * phi.cos(), cy + y, cz + s * r * phi.sin()]);
                } else {
                    let rr = r * rng.random::<f64>().sqrt();
                    out.push([cx + rr * phi.cos(), cy - p.half[1], cz + rr * phi.sin()]);
                }
            }
        }
    }
    out
}

/// Canonical part order: type id, then centre `z`, `y`, `x`, all ascending.
/// Centres are the analytic primitive centres, so parts that share a
/// coordinate by construction tie exactly rather than by sampling noise.
fn canonical_order(parts: &[Placed]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..parts.len()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (&parts[a], &parts[b]);
        pa.kind
            .type_id()
            .cmp(&pb.kind.type_id())
            .then(pa.center[2].total_cmp(&pb.center[2]))
            .then(pa.center[1].total_cmp(&pb.center[1]))
            .then(pa.center[0].total_cmp(&pb.center[0]))
    });
    idx
}

/// Generates one object; a pure function of `(spec, seed)`.
pub fn gen_object(spec: &GeneratorSpec, seed: u64) -> Result<CompositeObject> {
    spec.validate()?;
    let mut rng = stream_rng(seed, 0);
    let n = rng.random_range(spec.min_parts..=spec.max_parts);
    let eligible: Vec<Family> = Family::ALL.iter().copied().filter(|f| f.min_parts() <= n).collect();
    let family = eligible[rng.random_range(0..eligible.len())];
    let placed = match family {
        Family::Table => build_table(n, &mut rng),
        Family::Chair => build_chair(n, &mut rng),
        Family::Tower => build_tower(n, &mut rng),
        Family::Shelf => build_shelf(n, &mut rng),
    };
    debug_assert_eq!(placed.len(), n);

    let raw: Vec<Vec<[f64; 3]>> = placed
        .iter()
        .map(|p| sample_surface(p, spec.points_per_part, &mut rng))
        .collect();

    // Centre the assembled bounding box and scale it into the fit cube.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for q in raw.iter().flatten() {
        for a in 0..3 {
            lo[a] = lo[a].min(q[a]);
            hi[a] = hi[a].max(q[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max).max(1e-9);
    let scale = 2.0 * FIT_HALF_EXTENT / extent;
    let mid = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));

    let parts = canonical_order(&placed)
        .into_iter()
        .enumerate()
        .map(|(slot, src)| PartPointCloud {
            points: raw[src]
                .iter()
                .map(|q| [0, 1, 2].map(|a| ((q[a] - mid[a]) * scale) as f32))
                .collect(),
            type_id: placed[src].kind.type_id(),
            part_index: slot,
        })
        .collect();

    Ok(CompositeObject {
        object_id: format!("seed{seed}"),
        category_tag: family.tag().to_string(),
        parts,
    })
}

/// Dataset admission rule: fewer than 16 parts and maximum pairwise part IoU
/// on the 64^3 grid strictly below `iou_cap`.
pub fn filter_object(obj: &CompositeObject, iou_cap: f64) -> bool {
    if obj.n_obj() >= PART_COUNT_LIMIT || obj.parts.is_empty() {
        return false;
    }
    match metrics::max_pairwise_iou(&obj.parts, metrics::DEFAULT_IOU_RESOLUTION, &Aabb::unit_cube()) {
        Ok(max_iou) => max_iou < iou_cap,
        Err(_) => false,
    }
}

/// Orthographic silhouette along `+z`: a pixel is lit when any point projects into it.
pub fn render_silhouette(obj: &CompositeObject, size: usize) -> ConditionImage {
    let mut pixels = vec![0.0f32; size * size];
    let s = size as f64;
    for p in obj.parts.iter().flat_map(|p| p.points.iter()) {
        let col = ((p[0] as f64 + 0.5) * s).floor().clamp(0.0, s - 1.0) as usize;
        let row = ((0.5 - p[1] as f64) * s).floor().clamp(0.0, s - 1.0) as usize;
        pixels[row * size + col] = 1.0;
    }
    ConditionImage {
        size,
        pixels,
        camera_tag: "ortho+z".to_string(),
    }
}

/// Generates `count` admitted objects. Object `i` is the first seed in its
/// private candidate sequence that passes [`filter_object`], so the result
/// does not depend on `jobs`.
pub fn gen_objects(
    spec: &GeneratorSpec,
    base_seed: u64,
    stream: u64,
    count: usize,
    iou_cap: f64,
    jobs: usize,
) -> Result<Vec<CompositeObject>> {
    use rayon::prelude::*;
    spec.validate()?;
    let one = |i: usize| -> Result<CompositeObject> {
        let mut seeds = stream_rng(base_seed ^ (stream << 40), i as u64);
        for _attempt in 0..1000 {
            let seed: u64 = seeds.random::<u64>() >> 1;
            let mut obj = gen_object(spec, seed)?;
            if filter_object(&obj, iou_cap) {
                obj.object_id = format!("obj{i:05}");
                return Ok(obj);
            }
        }
        Err(Error::Config(format!("no admissible object found for index {i}")))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..count).into_par_iter().map(one).collect())
}
