//! Synthetic scene pairs with known transform and controllable overlap.
//!
//! A scene surface (room shell, round room or a cluster of primitives) is
//! sampled uniformly by area. Points are ranked by azimuth around the scene
//! center and each view keeps a contiguous window of `n` ranks, like a
//! scanner sweeping part of the room. The target window is shifted by a
//! number of ranks chosen by bisection so the measured overlap ratio hits
//! the request. The target view is then moved by a random rigid transform.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ground_truth_overlap, PointCloud, RigidTransform, Vec3, DEFAULT_OVERLAP_RADIUS};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    /// Rectangular floor and walls with furniture-like primitives.
    Room,
    /// Round room: cylindrical wall, disk floor, primitives.
    RoundRoom,
    /// Primitives on a ground disk, no walls.
    Composite,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Room, ShapeKind::RoundRoom, ShapeKind::Composite];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Room => "room",
            ShapeKind::RoundRoom => "round_room",
            ShapeKind::Composite => "composite",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape kind '{s}'")))
    }
}

/// Overlap regimes of the evaluation: ordinary pairs and low-overlap pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    Match,
    LoMatch,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Match => "match",
            Regime::LoMatch => "lomatch",
        }
    }

    /// Range the requested overlap is drawn from.
    pub fn overlap_range(self) -> (f64, f64) {
        match self {
            Regime::Match => (0.35, 0.8),
            Regime::LoMatch => (0.12, 0.28),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match" => Ok(Regime::Match),
            "lomatch" => Ok(Regime::LoMatch),
            _ => Err(Error::invalid(format!("unknown regime '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub shape: ShapeKind,
    pub points_per_cloud: usize,
    pub target_overlap: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Surface samples per view point; a view covers `1/base_factor` of the
    /// azimuth ranks.
    pub base_factor: f64,
    pub max_translation: f64,
    /// Linear scale applied to the scene; 1 gives rooms about 2 m across.
    pub scale: f64,
    /// Radius used to measure the achieved overlap.
    pub overlap_radius: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            shape: ShapeKind::Room,
            points_per_cloud: 1000,
            target_overlap: 0.5,
            noise_sigma: 0.005,
            seed: 0,
            base_factor: 2.5,
            max_translation: 1.0,
            scale: 0.5,
            overlap_radius: DEFAULT_OVERLAP_RADIUS,
        }
    }
}

/// Maximum distance between requested and achieved overlap.
pub const OVERLAP_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub src: PointCloud,
    pub tgt: PointCloud,
    /// Maps `src` coordinates into the `tgt` frame.
    pub t_true: RigidTransform,
    /// Fraction of `src` points labelled overlapping.
    pub overlap_ratio: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum Surface {
    Rect { origin: Vec3, u: Vec3, v: Vec3 },
    /// Vertical cylinder side standing on `base`.
    CylinderSide { base: Vec3, radius: f64, height: f64 },
    /// Horizontal disk.
    Disk { center: Vec3, radius: f64 },
    Sphere { center: Vec3, radius: f64 },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Rect { u, v, .. } => u.cross(&v).norm(),
            Surface::CylinderSide { radius, height, .. } => 2.0 * PI * radius * height,
            Surface::Disk { radius, .. } => PI * radius * radius,
            Surface::Sphere { radius, .. } => 4.0 * PI * radius * radius,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match *self {
            Surface::Rect { origin, u, v } => origin + u * rng.random::<f64>() + v * rng.random::<f64>(),
            Surface::CylinderSide { base, radius, height } => {
                let a = rng.random::<f64>() * 2.0 * PI;
                base + Vec3::new(radius * a.cos(), radius * a.sin(), height * rng.random::<f64>())
            }
            Surface::Disk { center, radius } => {
                let a = rng.random::<f64>() * 2.0 * PI;
                let r = radius * rng.random::<f64>().sqrt();
                center + Vec3::new(r * a.cos(), r * a.sin(), 0.0)
            }
            Surface::Sphere { center, radius } => {
                let d = loop {
                    let g = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
                    let n = g.norm();
                    if n > 1e-12 {
                        break g / n;
                    }
                };
                center + d * radius
            }
        }
    }
}

fn rect(origin: Vec3, u: Vec3, v: Vec3) -> Surface {
    Surface::Rect { origin, u, v }
}

/// Open-bottom box standing on the floor at `(x, y)`.
fn push_box(out: &mut Vec<Surface>, x: f64, y: f64, w: f64, d: f64, h: f64) {
    let o = Vec3::new(x - w / 2.0, y - d / 2.0, 0.0);
    let (ex, ey, ez) = (Vec3::new(w, 0.0, 0.0), Vec3::new(0.0, d, 0.0), Vec3::new(0.0, 0.0, h));
    out.push(rect(o + ez, ex, ey));
    out.push(rect(o, ex, ez));
    out.push(rect(o + ey, ex, ez));
    out.push(rect(o, ey, ez));
    out.push(rect(o + ex, ey, ez));
}

fn push_objects<R: Rng>(out: &mut Vec<Surface>, rng: &mut R, count: usize, half_x: f64, half_y: f64, round: bool) {
    for _ in 0..count {
        let (x, y) = loop {
            let x = rng.random_range(-half_x..half_x);
            let y = rng.random_range(-half_y..half_y);
            if !round || x * x + y * y < half_x * half_x {
                break (x, y);
            }
        };
        match rng.random_range(0..3) {
            0 => {
                let w = rng.random_range(0.15..0.5);
                let d = rng.random_range(0.15..0.5);
                let h = rng.random_range(0.15..0.6);
                push_box(out, x, y, w, d, h);
            }
            1 => {
                let radius = rng.random_range(0.06..0.2);
                let height = rng.random_range(0.2..0.6);
                out.push(Surface::CylinderSide {
                    base: Vec3::new(x, y, 0.0),
                    radius,
                    height,
                });
                out.push(Surface::Disk {
                    center: Vec3::new(x, y, height),
                    radius,
                });
            }
            _ => {
                let radius = rng.random_range(0.07..0.18);
                out.push(Surface::Sphere {
                    center: Vec3::new(x, y, radius + rng.random_range(0.0..0.3)),
                    radius,
                });
            }
        }
    }
}

fn scene_surfaces<R: Rng>(shape: ShapeKind, rng: &mut R) -> Vec<Surface> {
    let mut s = Vec::new();
    match shape {
        ShapeKind::Room => {
            let w = rng.random_range(1.6..2.4);
            let d = rng.random_range(1.4..2.0);
            let h = rng.random_range(0.6..1.0);
            let o = Vec3::new(-w / 2.0, -d / 2.0, 0.0);
            let (ex, ey, ez) = (Vec3::new(w, 0.0, 0.0), Vec3::new(0.0, d, 0.0), Vec3::new(0.0, 0.0, h));
            s.push(rect(o, ex, ey));
            s.push(rect(o, ex, ez));
            s.push(rect(o + ey, ex, ez));
            s.push(rect(o, ey, ez));
            s.push(rect(o + ex, ey, ez));
            let n = rng.random_range(4..=7);
            push_objects(&mut s, rng, n, w / 2.0 - 0.3, d / 2.0 - 0.3, false);
        }
        ShapeKind::RoundRoom => {
            let r = rng.random_range(0.9..1.2);
            let h = rng.random_range(0.6..1.0);
            s.push(Surface::Disk {
                center: Vec3::zeros(),
                radius: r,
            });
            s.push(Surface::CylinderSide {
                base: Vec3::zeros(),
                radius: r,
                height: h,
            });
            let n = rng.random_range(4..=7);
            push_objects(&mut s, rng, n, r - 0.3, r - 0.3, true);
        }
        ShapeKind::Composite => {
            let r = rng.random_range(0.9..1.2);
            s.push(Surface::Disk {
                center: Vec3::zeros(),
                radius: r,
            });
            let n = rng.random_range(8..=12);
            push_objects(&mut s, rng, n, r - 0.15, r - 0.15, true);
        }
    }
    s
}

fn sample_surfaces<R: Rng>(surfaces: &[Surface], count: usize, rng: &mut R) -> Vec<Vec3> {
    let mut cumulative = Vec::with_capacity(surfaces.len());
    let mut total = 0.0;
    for s in surfaces {
        total += s.area();
        cumulative.push(total);
    }
    (0..count)
        .map(|_| {
            let t = rng.random::<f64>() * total;
            let i = cumulative.partition_point(|&c| c <= t).min(surfaces.len() - 1);
            surfaces[i].sample(rng)
        })
        .collect()
}

struct Views {
    base: Vec<Vec3>,
    /// Base ids ordered by azimuth.
    by_azimuth: Vec<usize>,
    start: usize,
    n: usize,
    noise_src: Vec<Vec3>,
    noise_tgt: Vec<Vec3>,
    t_true: RigidTransform,
}

impl Views {
    /// Base ids of the window starting `shift` ranks after the source
    /// window, in base order.
    fn window(&self, shift: usize) -> Vec<usize> {
        let total = self.by_azimuth.len();
        let mut ids: Vec<usize> = (0..self.n)
            .map(|r| self.by_azimuth[(self.start + shift + r) % total])
            .collect();
        ids.sort_unstable();
        ids
    }

    fn src(&self) -> Result<PointCloud> {
        PointCloud::new(self.window(0).into_iter().map(|i| self.base[i] + self.noise_src[i]).collect())
    }

    fn tgt(&self, shift: usize) -> Result<PointCloud> {
        PointCloud::new(
            self.window(shift)
                .into_iter()
                .map(|i| self.t_true.apply(&(self.base[i] + self.noise_tgt[i])))
                .collect(),
        )
    }
}

/// Generates one pair whose measured overlap ratio is within
/// [`OVERLAP_TOLERANCE`] of `cfg.target_overlap`.
pub fn generate_pair(cfg: &SceneConfig) -> Result<ScenePair> {
    if !(cfg.target_overlap > 0.0 && cfg.target_overlap <= 1.0) {
        return Err(Error::invalid(format!(
            "target overlap must be in (0, 1], got {}",
            cfg.target_overlap
        )));
    }
    if cfg.points_per_cloud < 3 {
        return Err(Error::InfeasibleScene("need at least 3 points per cloud".into()));
    }
    if !(cfg.base_factor >= 1.0 && cfg.noise_sigma >= 0.0 && cfg.overlap_radius > 0.0 && cfg.scale > 0.0) {
        return Err(Error::invalid("base_factor must be ≥ 1, noise ≥ 0, overlap radius and scale > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.points_per_cloud;
    let total = ((n as f64) * cfg.base_factor).ceil() as usize;
    let surfaces = scene_surfaces(cfg.shape, &mut rng);
    let base: Vec<Vec3> = sample_surfaces(&surfaces, total, &mut rng)
        .into_iter()
        .map(|p| p * cfg.scale)
        .collect();
    let azimuth: Vec<f64> = base.iter().map(|p| p.y.atan2(p.x)).collect();
    let mut by_azimuth: Vec<usize> = (0..total).collect();
    by_azimuth.sort_by(|&a, &b| azimuth[a].total_cmp(&azimuth[b]).then(a.cmp(&b)));
    let start = rng.random_range(0..total);
    let noise = |rng: &mut ChaCha8Rng| -> Vec<Vec3> {
        (0..total)
            .map(|_| Vec3::from_fn(|_, _| cfg.noise_sigma * Distribution::<f64>::sample(&StandardNormal, rng)))
            .collect()
    };
    let noise_src = noise(&mut rng);
    let noise_tgt = noise(&mut rng);
    let t_true = RigidTransform::random(&mut rng, cfg.max_translation);
    let views = Views {
        base,
        by_azimuth,
        start,
        n,
        noise_src,
        noise_tgt,
        t_true,
    };
    let src = views.src()?;
    let measure = |shift: usize| -> Result<(f64, PointCloud)> {
        let tgt = views.tgt(shift)?;
        let (labels, _) = ground_truth_overlap(&src, &tgt, &t_true, cfg.overlap_radius)?;
        Ok((labels.fraction(), tgt))
    };

    // smallest shift whose overlap drops to the target or below
    let (mut lo, mut hi) = (0usize, total - n);
    let (hi_ratio, _) = measure(hi)?;
    if hi_ratio > cfg.target_overlap + OVERLAP_TOLERANCE {
        return Err(Error::InfeasibleScene(format!(
            "views cannot overlap less than {hi_ratio:.3} with base_factor {}",
            cfg.base_factor
        )));
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if measure(mid)?.0 <= cfg.target_overlap {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut best = measure(lo)?;
    if lo > 0 {
        let prev = measure(lo - 1)?;
        if (prev.0 - cfg.target_overlap).abs() < (best.0 - cfg.target_overlap).abs() {
            best = prev;
        }
    }
    let (ratio, tgt) = best;
    if (ratio - cfg.target_overlap).abs() > OVERLAP_TOLERANCE {
        return Err(Error::InfeasibleScene(format!(
            "closest achievable overlap {ratio:.3} is too far from {}",
            cfg.target_overlap
        )));
    }
    Ok(ScenePair {
        src,
        tgt,
        t_true,
        overlap_ratio: ratio,
        noise_sigma: cfg.noise_sigma,
        seed: cfg.seed,
    })
}

/// Draws the requested overlap uniformly from the regime's range and
/// generates the pair.
pub fn generate_regime_pair(regime: Regime, base: &SceneConfig) -> Result<ScenePair> {
    let (lo, hi) = regime.overlap_range();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base.seed, 7, 0));
    let cfg = SceneConfig {
        target_overlap: rng.random_range(lo..hi),
        ..base.clone()
    };
    generate_pair(&cfg)
}

/// `count` pairs of one regime. Pair `i` uses seed `derive_seed(seed, regime, i)`;
/// with `shape = None` the shape kind cycles through all kinds.
pub fn generate_set(
    regime: Regime,
    count: usize,
    shape: Option<ShapeKind>,
    template: &SceneConfig,
) -> Result<Vec<ScenePair>> {
    (0..count)
        .map(|i| {
            let cfg = SceneConfig {
                shape: shape.unwrap_or(ShapeKind::ALL[i % ShapeKind::ALL.len()]),
                seed: derive_seed(template.seed, regime as u64 + 1, i as u64),
                ..template.clone()
            };
            generate_regime_pair(regime, &cfg)
        })
        .collect()
}
