//! Baseline samplers: random, Poisson-disk, voxel-grid and farthest-point.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

/// Ids of the points a sampler kept, plus the budget it was asked for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleResult {
    pub selected_ids: Vec<usize>,
    pub budget: usize,
}

impl SampleResult {
    pub fn len(&self) -> usize {
        self.selected_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_ids.is_empty()
    }
}

/// Centroid cloud plus, for each output point, the ids of its voxel members.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridResult {
    pub centroids: PointCloud,
    pub members: Vec<Vec<usize>>,
}

fn check_budget(budget: usize, n: usize) -> Result<()> {
    if budget == 0 || budget > n {
        return Err(Error::InvalidBudget {
            budget,
            available: n,
        });
    }
    Ok(())
}

/// Point count for a budget given as a fraction of `n`, clamped to `1..=n`.
pub fn budget_from_fraction(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("budget fraction must be in (0, 1], got {fraction}")));
    }
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    Ok(((n as f64 * fraction).round() as usize).clamp(1, n))
}

/// Uniform sample without replacement; ids returned in ascending order.
pub fn random_sample(cloud: &PointCloud, budget: usize, seed: u64) -> Result<SampleResult> {
    check_budget(budget, cloud.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = rand::seq::index::sample(&mut rng, cloud.len(), budget).into_vec();
    ids.sort_unstable();
    Ok(SampleResult {
        selected_ids: ids,
        budget,
    })
}

type CellKey = (i64, i64, i64);

fn cell_of(p: &Vec3, size: f64) -> CellKey {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

fn poisson_disk(cloud: &PointCloud, min_distance: f64, cap: usize) -> Vec<usize> {
    let mut grid: HashMap<CellKey, Vec<usize>> = HashMap::new();
    let mut accepted = Vec::new();
    let r2 = min_distance * min_distance;
    for (id, p) in cloud.points().iter().enumerate() {
        if accepted.len() >= cap {
            break;
        }
        let (cx, cy, cz) = cell_of(p, min_distance);
        let mut blocked = false;
        'scan: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        if ids.iter().any(|&j| (cloud.point(j) - p).norm_squared() < r2) {
                            blocked = true;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if !blocked {
            grid.entry((cx, cy, cz)).or_default().push(id);
            accepted.push(id);
        }
    }
    accepted
}

/// Greedy dart throwing in id order: a point is kept iff no kept point lies
/// closer than `min_distance`. Stops once `budget` points are kept.
pub fn poisson_disk_sample(cloud: &PointCloud, min_distance: f64, budget: usize) -> Result<SampleResult> {
    if !(min_distance > 0.0 && min_distance.is_finite()) {
        return Err(Error::invalid(format!("min_distance must be > 0, got {min_distance}")));
    }
    Ok(SampleResult {
        selected_ids: poisson_disk(cloud, min_distance, budget),
        budget,
    })
}

/// Replaces the points of each occupied voxel by their centroid. Voxels are
/// keyed by `floor(coord / voxel_size)` and emitted in key order.
pub fn voxel_grid_sample(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGridResult> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::invalid(format!("voxel_size must be > 0, got {voxel_size}")));
    }
    let mut voxels: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
    for (id, p) in cloud.points().iter().enumerate() {
        voxels.entry(cell_of(p, voxel_size)).or_default().push(id);
    }
    let mut centroids = Vec::with_capacity(voxels.len());
    let mut members = Vec::with_capacity(voxels.len());
    for ids in voxels.into_values() {
        let sum = ids.iter().fold(Vec3::zeros(), |acc, &i| acc + cloud.point(i));
        centroids.push(sum / ids.len() as f64);
        members.push(ids);
    }
    Ok(VoxelGridResult {
        centroids: PointCloud::new(centroids)?,
        members,
    })
}

/// Greedy max-min selection from `start_id`; ties go to the lower id.
/// Ids are returned in pick order.
pub fn farthest_point_sample(cloud: &PointCloud, budget: usize, start_id: usize) -> Result<SampleResult> {
    let n = cloud.len();
    check_budget(budget, n)?;
    if start_id >= n {
        return Err(Error::invalid(format!("start_id {start_id} out of range ({n})")));
    }
    let pts = cloud.points();
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut selected = Vec::with_capacity(budget);
    let mut current = start_id;
    loop {
        selected.push(current);
        min_d2[current] = f64::NEG_INFINITY;
        if selected.len() == budget {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, d) in min_d2.iter_mut().enumerate() {
            if *d == f64::NEG_INFINITY {
                continue;
            }
            let d2 = (pts[i] - c).norm_squared();
            if d2 < *d {
                *d = d2;
            }
            if *d > best_d2 {
                best_d2 = *d;
                best = i;
            }
        }
        current = best;
    }
    Ok(SampleResult {
        selected_ids: selected,
        budget,
    })
}

fn diagonal(cloud: &PointCloud) -> f64 {
    cloud
        .bounds()
        .map(|(lo, hi)| (hi - lo).norm())
        .unwrap_or(0.0)
}

const BISECTION_STEPS: usize = 60;

/// Poisson-disk sample of exactly `budget` points when possible: bisects for
/// the largest `min_distance` whose uncapped greedy pass still keeps
/// `budget` points. Returns the sample and the distance used.
pub fn poisson_disk_for_budget(cloud: &PointCloud, budget: usize) -> Result<(SampleResult, f64)> {
    check_budget(budget, cloud.len())?;
    let diag = diagonal(cloud);
    if diag <= 0.0 {
        return Ok((poisson_disk_sample(cloud, 1.0, budget)?, 1.0));
    }
    let count = |d: f64| poisson_disk(cloud, d, usize::MAX).len();
    let (mut lo, mut hi) = (diag * 1e-9, diag * 2.0);
    if count(lo) < budget {
        // duplicate points: even a tiny disk cannot reach the budget
        return Ok((poisson_disk_sample(cloud, lo, budget)?, lo));
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if count(mid) >= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((poisson_disk_sample(cloud, lo, budget)?, lo))
}

/// Voxel-grid sample with at most `budget` centroids: bisects for the
/// smallest voxel size whose occupied-voxel count fits in the budget.
pub fn voxel_grid_for_budget(cloud: &PointCloud, budget: usize) -> Result<(VoxelGridResult, f64)> {
    check_budget(budget, cloud.len())?;
    let diag = diagonal(cloud).max(1e-9);
    let count = |s: f64| -> Result<usize> { Ok(voxel_grid_sample(cloud, s)?.members.len()) };
    let (mut lo, mut hi) = (diag * 1e-9, diag * 2.0);
    let mut best = (hi, count(hi)?);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let c = count(mid)?;
        if c <= budget {
            hi = mid;
            if c >= best.1 {
                best = (mid, c);
            }
            if c == budget {
                break;
            }
        } else {
            lo = mid;
        }
    }
    Ok((voxel_grid_sample(cloud, best.0)?, best.0))
}
