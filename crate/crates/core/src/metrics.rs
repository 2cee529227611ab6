//! Geometric evaluation: L2 Chamfer distance, F-score and part-overlap IoU.
//!
//! Nearest-neighbour queries go through a uniform bucket grid built over the
//! joint bounding box of both clouds. All distances are accumulated in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Point;

/// Default F-score threshold in the normalised canonical cube.
pub const DEFAULT_FSCORE_TAU: f64 = 0.1;
/// Default voxel resolution for part-overlap IoU.
pub const DEFAULT_IOU_RESOLUTION: usize = 64;
/// Version tag of the serialized [`MetricsReport`] schema.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// The normalisation cube `[-0.5, 0.5]^3`.
    pub fn unit_cube() -> Self {
        Self {
            min: [-0.5; 3],
            max: [0.5; 3],
        }
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|a| !(self.max[a] > self.min[a]))
    }

    fn enclosing<'a>(clouds: impl IntoIterator<Item = &'a [Point]>) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for cloud in clouds {
            for p in cloud {
                for a in 0..3 {
                    min[a] = min[a].min(p[a] as f64);
                    max[a] = max[a].max(p[a] as f64);
                }
            }
        }
        Self { min, max }
    }
}

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

fn check_cloud(name: &str, pts: &[Point]) -> Result<()> {
    if pts.is_empty() {
        return Err(Error::Argument(format!("{name} point set is empty")));
    }
    if pts.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::Argument(format!("{name} point set has non-finite coordinates")));
    }
    Ok(())
}

/// Uniform bucket grid for exact nearest-neighbour and radius queries.
struct NeighborGrid<'a> {
    points: &'a [Point],
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NeighborGrid<'a> {
    /// `bounds` must contain every point that will be inserted or queried.
    fn build(points: &'a [Point], bounds: &Aabb) -> Self {
        let extent = (0..3)
            .map(|a| bounds.max[a] - bounds.min[a])
            .fold(0.0f64, f64::max)
            .max(1e-9);
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 64);
        let cell = extent / per_axis as f64;
        let mut dims = [1usize; 3];
        for a in 0..3 {
            dims[a] = (((bounds.max[a] - bounds.min[a]) / cell).floor() as usize + 1).max(1);
        }
        let mut grid = Self {
            points,
            origin: bounds.min,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; n_cells + 1];
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0usize; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: &Point) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] as f64 - self.origin[a]) / self.cell).floor();
            c[a] = (f.max(0.0) as usize).min(self.dims[a] - 1);
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn bucket(&self, c: [usize; 3]) -> &[usize] {
        let f = self.flat(c);
        &self.order[self.starts[f]..self.starts[f + 1]]
    }

    /// Visits cells on the Chebyshev shell of radius `r` around `center`.
    fn for_shell(&self, center: [usize; 3], r: usize, mut visit: impl FnMut([usize; 3])) {
        let lo = |a: usize| center[a].saturating_sub(r);
        let hi = |a: usize| (center[a] + r).min(self.dims[a] - 1);
        for x in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for z in lo(2)..=hi(2) {
                    let on_shell = x.abs_diff(center[0]) == r
                        || y.abs_diff(center[1]) == r
                        || z.abs_diff(center[2]) == r;
                    if on_shell {
                        visit([x, y, z]);
                    }
                }
            }
        }
    }

    /// Squared distance from `q` to its nearest indexed point.
    fn nearest_dist2(&self, q: &Point) -> f64 {
        let center = self.cell_of(q);
        let max_r = self.dims.iter().copied().max().unwrap_or(1);
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            self.for_shell(center, r, |c| {
                for &i in self.bucket(c) {
                    let d = dist2(q, &self.points[i]);
                    if d < best {
                        best = d;
                    }
                }
            });
            // Unvisited cells are at least r cells away from q's own cell.
            let bound = r as f64 * self.cell;
            if best <= bound * bound {
                break;
            }
        }
        best
    }

    /// Whether any indexed point lies within squared distance `r2` of `q`.
    fn any_within(&self, q: &Point, r2: f64) -> bool {
        let reach = (r2.sqrt() / self.cell).ceil() as usize + 1;
        let center = self.cell_of(q);
        for r in 0..=reach {
            let mut found = false;
            self.for_shell(center, r, |c| {
                if !found {
                    found = self.bucket(c).iter().any(|&i| dist2(q, &self.points[i]) <= r2);
                }
            });
            if found {
                return true;
            }
        }
        false
    }
}

fn mean_nearest(from: &[Point], grid: &NeighborGrid<'_>) -> f64 {
    let total: f64 = from.iter().map(|q| grid.nearest_dist2(q)).sum();
    total / from.len() as f64
}

/// Symmetric L2 Chamfer distance: sum of the two mean squared
/// nearest-neighbour distances.
pub fn chamfer_l2(a: &[Point], b: &[Point]) -> Result<f64> {
    check_cloud("first", a)?;
    check_cloud("second", b)?;
    let bounds = Aabb::enclosing([a, b]);
    let grid_b = NeighborGrid::build(b, &bounds);
    let grid_a = NeighborGrid::build(a, &bounds);
    Ok(mean_nearest(a, &grid_b) + mean_nearest(b, &grid_a))
}

/// Precision, recall and F-score at distance threshold `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

pub fn fscore_detail(pred: &[Point], gt: &[Point], tau: f64) -> Result<FScore> {
    check_cloud("predicted", pred)?;
    check_cloud("ground-truth", gt)?;
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("F-score threshold must be positive, got {tau}")));
    }
    let r2 = tau * tau;
    let bounds = Aabb::enclosing([pred, gt]);
    let grid_gt = NeighborGrid::build(gt, &bounds);
    let grid_pred = NeighborGrid::build(pred, &bounds);
    let hits_p = pred.iter().filter(|q| grid_gt.any_within(q, r2)).count();
    let hits_r = gt.iter().filter(|q| grid_pred.any_within(q, r2)).count();
    let precision = hits_p as f64 / pred.len() as f64;
    let recall = hits_r as f64 / gt.len() as f64;
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(FScore {
        precision,
        recall,
        fscore,
    })
}

/// F-score (harmonic mean of precision and recall) at threshold `tau`.
pub fn fscore(pred: &[Point], gt: &[Point], tau: f64) -> Result<f64> {
    Ok(fscore_detail(pred, gt, tau)?.fscore)
}

/// Dense occupancy bitset over a cubic lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub bounds: Aabb,
    bits: Vec<u64>,
    /// Points that fell outside `bounds` and were clamped into the edge cells.
    pub clamped: usize,
}

impl OccupancyGrid {
    fn empty(resolution: usize, bounds: Aabb) -> Self {
        let cells = resolution * resolution * resolution;
        Self {
            resolution,
            bounds,
            bits: vec![0u64; cells.div_ceil(64)],
            clamped: 0,
        }
    }

    fn set(&mut self, idx: usize) {
        self.bits[idx / 64] |= 1u64 << (idx % 64);
    }

    pub fn is_occupied(&self, cell: [usize; 3]) -> bool {
        let r = self.resolution;
        let idx = (cell[0] * r + cell[1]) * r + cell[2];
        self.bits[idx / 64] >> (idx % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.bits.iter().zip(&other.bits).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }

    pub fn union_count(&self, other: &Self) -> usize {
        self.bits.iter().zip(&other.bits).map(|(a, b)| (a | b).count_ones() as usize).sum()
    }

    /// Intersection over union of two grids on the same lattice.
    pub fn iou(&self, other: &Self) -> f64 {
        let union = self.union_count(other);
        if union == 0 {
            0.0
        } else {
            self.intersection_count(other) as f64 / union as f64
        }
    }
}

/// Marks every half-open cell that contains at least one point. Points on the
/// upper boundary land in the last cell; points outside are clamped.
pub fn voxelize(points: &[Point], resolution: usize, bounds: &Aabb) -> Result<OccupancyGrid> {
    if resolution == 0 {
        return Err(Error::Argument("voxel resolution must be at least 1".into()));
    }
    if bounds.is_degenerate() {
        return Err(Error::Argument(format!("degenerate voxel bounds {bounds:?}")));
    }
    let mut grid = OccupancyGrid::empty(resolution, *bounds);
    let r = resolution;
    for p in points {
        let mut cell = [0usize; 3];
        let mut outside = false;
        for a in 0..3 {
            let v = p[a] as f64;
            if v < bounds.min[a] || v > bounds.max[a] {
                outside = true;
            }
            let f = ((v - bounds.min[a]) / (bounds.max[a] - bounds.min[a]) * r as f64).floor();
            cell[a] = if f.is_nan() || f < 0.0 { 0 } else { (f as usize).min(r - 1) };
        }
        if outside {
            grid.clamped += 1;
        }
        grid.set((cell[0] * r + cell[1]) * r + cell[2]);
    }
    Ok(grid)
}

/// Mean IoU over all unordered pairs of part occupancy grids; 0 when fewer
/// than two parts are given.
pub fn mean_pairwise_iou<P: AsRef<[Point]>>(parts: &[P], resolution: usize, bounds: &Aabb) -> Result<f64> {
    if parts.len() < 2 {
        return Ok(0.0);
    }
    let grids = parts
        .iter()
        .map(|p| voxelize(p.as_ref(), resolution, bounds))
        .collect::<Result<Vec<_>>>()?;
    let (total, pairs) = pairwise_ious(&grids).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    Ok(total / pairs as f64)
}

/// Maximum IoU over all unordered pairs; 0 when fewer than two parts.
pub fn max_pairwise_iou<P: AsRef<[Point]>>(parts: &[P], resolution: usize, bounds: &Aabb) -> Result<f64> {
    let grids = parts
        .iter()
        .map(|p| voxelize(p.as_ref(), resolution, bounds))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_ious(&grids).fold(0.0, f64::max))
}

fn pairwise_ious(grids: &[OccupancyGrid]) -> impl Iterator<Item = f64> + '_ {
    (0..grids.len()).flat_map(move |i| ((i + 1)..grids.len()).map(move |j| grids[i].iou(&grids[j])))
}

/// Evaluation summary over a held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub num_objects: usize,
    pub chamfer_l2: f64,
    pub fscore: f64,
    pub mean_pair_iou: f64,
    pub gate_count_accuracy: f64,
    pub gate_count_mae: f64,
}

impl MetricsReport {
    /// Fixed-order plain-text table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<22}{:>12}\n", "metric", "value"));
        for (name, v) in [
            ("chamfer_l2", self.chamfer_l2),
            ("fscore@0.1", self.fscore),
            ("mean_pair_iou@64", self.mean_pair_iou),
            ("gate_count_accuracy", self.gate_count_accuracy),
            ("gate_count_mae", self.gate_count_mae),
        ] {
            s.push_str(&format!("{name:<22}{v:>12.6}\n"));
        }
        s.push_str(&format!("{:<22}{:>12}\n", "objects", self.num_objects));
        s
    }
}
