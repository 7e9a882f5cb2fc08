//! End-to-end pair pipeline: sample both clouds to a budget, describe and
//! match the kept points, estimate the transform with RANSAC, and account
//! for memory per stage.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{infer_pair, prepare, EstimatorModel, ModelConfig, ScoredCloud};
use crate::geometry::{
    kabsch_align, registration_rmse, Correspondence, PointCloud, RigidTransform, Vec3, DEFAULT_RECALL_RMSE,
};
use crate::samplers::{
    budget_from_fraction, farthest_point_sample, poisson_disk_for_budget, random_sample, voxel_grid_for_budget,
    SampleResult,
};
use crate::seed::derive_seed;
use crate::spatial::SpatialIndex;
use crate::tensor::Tensor;

/// Sampled points each original point averages its score over.
pub const PROPAGATION_NEIGHBORS: usize = 5;

const F64: usize = 8;
const POINT_BYTES: usize = 3 * F64;
const ID_BYTES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreSource {
    /// `s = o·m`
    Combined,
    OverlapOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub source: ScoreSource,
    /// Sampled points keep their own predicted score instead of the 5-NN mean.
    pub keep_raw_on_sampled: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            source: ScoreSource::Combined,
            keep_raw_on_sampled: false,
        }
    }
}

/// One score per original point.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedScores {
    pub scores: Vec<f64>,
}

/// Every original point gets the mean score of its
/// [`PROPAGATION_NEIGHBORS`] nearest sampled points (all of them when fewer
/// were sampled).
pub fn propagate_scores(full: &PointCloud, scored: &ScoredCloud, cfg: &PropagationConfig) -> Result<PropagatedScores> {
    if scored.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let values = match cfg.source {
        ScoreSource::Combined => &scored.combined,
        ScoreSource::OverlapOnly => &scored.overlap,
    };
    if values.len() != scored.len() || scored.positions.len() != scored.len() {
        return Err(Error::ShapeMismatch {
            op: "propagate_scores",
            detail: "scored cloud fields have different lengths".into(),
        });
    }
    if let Some(&bad) = scored.sampled_ids.iter().find(|&&id| id >= full.len()) {
        return Err(Error::invalid(format!("sampled id {bad} outside the full cloud")));
    }
    let index = SpatialIndex::from_points(&scored.positions);
    let k = PROPAGATION_NEIGHBORS.min(scored.len());
    let mut scores = full
        .points()
        .iter()
        .map(|p| {
            let nn = index.knn(p, k)?;
            Ok(nn.iter().map(|n| values[n.id]).sum::<f64>() / k as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    if cfg.keep_raw_on_sampled {
        for (i, &id) in scored.sampled_ids.iter().enumerate() {
            scores[id] = values[i];
        }
    }
    Ok(PropagatedScores { scores })
}

/// The `budget` highest-scoring ids (ties to the lower id), sorted by id.
pub fn overlap_aware_select(full: &PointCloud, scores: &PropagatedScores, budget: usize) -> Result<SampleResult> {
    let n = full.len();
    if scores.scores.len() != n {
        return Err(Error::ShapeMismatch {
            op: "overlap_aware_select",
            detail: format!("{} scores for {n} points", scores.scores.len()),
        });
    }
    if budget == 0 || budget > n {
        return Err(Error::InvalidBudget { budget, available: n });
    }
    let s = &scores.scores;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    ids.truncate(budget);
    ids.sort_unstable();
    Ok(SampleResult {
        selected_ids: ids,
        budget,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Sampling,
    Registration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEvent {
    pub stage: Stage,
    pub label: String,
    pub bytes: usize,
    /// `false` for a release.
    pub alloc: bool,
}

/// Handle to a live buffer in a [`MemoryLedger`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Allocation(usize);

/// Analytic memory accounting: every buffer a stage creates is logged with
/// its byte size; a stage's peak is the largest sum of its live buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryLedger {
    events: Vec<MemoryEvent>,
    live: [usize; 2],
    peak: [usize; 2],
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(stage: Stage) -> usize {
        match stage {
            Stage::Sampling => 0,
            Stage::Registration => 1,
        }
    }

    pub fn alloc(&mut self, stage: Stage, label: &str, bytes: usize) -> Allocation {
        let s = Self::slot(stage);
        self.live[s] += bytes;
        self.peak[s] = self.peak[s].max(self.live[s]);
        self.events.push(MemoryEvent {
            stage,
            label: label.to_string(),
            bytes,
            alloc: true,
        });
        Allocation(self.events.len() - 1)
    }

    pub fn free(&mut self, a: Allocation) {
        let e = &self.events[a.0];
        let (stage, bytes, label) = (e.stage, e.bytes, e.label.clone());
        let s = Self::slot(stage);
        self.live[s] -= bytes;
        self.events.push(MemoryEvent {
            stage,
            label,
            bytes,
            alloc: false,
        });
    }

    pub fn events(&self) -> &[MemoryEvent] {
        &self.events
    }

    pub fn sampling_peak(&self) -> usize {
        self.peak[0]
    }

    pub fn registration_peak(&self) -> usize {
        self.peak[1]
    }

    pub fn reported(&self) -> usize {
        self.sampling_peak().max(self.registration_peak())
    }

    /// Live bytes at the end of the run, per stage.
    pub fn live(&self, stage: Stage) -> usize {
        self.live[Self::slot(stage)]
    }
}

/// Per-stage peaks recomputed from an event log.
pub fn replay_peaks(events: &[MemoryEvent]) -> (usize, usize) {
    let (mut live, mut peak) = ([0i128; 2], [0i128; 2]);
    for e in events {
        let s = MemoryLedger::slot(e.stage);
        if e.alloc {
            live[s] += e.bytes as i128;
        } else {
            live[s] -= e.bytes as i128;
        }
        peak[s] = peak[s].max(live[s]);
    }
    (peak[0] as usize, peak[1] as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DescriptorKind {
    /// Histograms of normal/offset angles, smoothed over neighbors.
    Handcrafted,
    /// Local features of the estimator's kNN encoder.
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub iterations: usize,
    pub inlier_radius: f64,
    pub sample_size: usize,
    pub descriptor: DescriptorKind,
    pub descriptor_neighbors: usize,
    pub histogram_bins: usize,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_radius: 0.05,
            sample_size: 3,
            descriptor: DescriptorKind::Handcrafted,
            descriptor_neighbors: 32,
            histogram_bins: 5,
            seed: 0,
        }
    }
}

/// Unit normal of each point's neighborhood plus the neighborhood table.
fn normals(points: &[Vec3], k: usize) -> Result<(Vec<Vec3>, Vec<Vec<usize>>, Vec<[f64; 3]>)> {
    let index = SpatialIndex::from_points(points);
    let mut out = Vec::with_capacity(points.len());
    let mut tables = Vec::with_capacity(points.len());
    let mut spectra = Vec::with_capacity(points.len());
    for p in points {
        let nn: Vec<usize> = index.knn(p, k)?.into_iter().map(|n| n.id).collect();
        let mean = nn.iter().map(|&j| points[j]).sum::<Vec3>() / nn.len() as f64;
        let mut cov = Matrix3::zeros();
        for &j in &nn {
            let d = points[j] - mean;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        out.push(eig.eigenvectors.column(order[2]).into_owned());
        spectra.push(order.map(|i| eig.eigenvalues[i].max(0.0)));
        tables.push(nn);
    }
    Ok((out, tables, spectra))
}

/// Rotation-invariant point descriptors computed from `points` alone.
///
/// For each point, histograms of `|n_p·n_q|`, `|n_p·u|` and `|n_q·u|` over
/// its neighbors `q` (`u` the unit offset) plus two eigenvalue ratios; the
/// final descriptor adds the neighbors' mean and is L2-normalised.
pub fn handcrafted_descriptors(points: &[Vec3], neighbors: usize, bins: usize) -> Result<Tensor> {
    if points.len() < 2 {
        return Err(Error::DegenerateGeometry("need at least two points for descriptors".into()));
    }
    if bins == 0 {
        return Err(Error::invalid("histogram_bins must be positive"));
    }
    let k = neighbors.clamp(2, points.len());
    let (nrm, tables, spectra) = normals(points, k)?;
    let width = 3 * bins + 2;
    let bin = |v: f64| ((v.abs().min(1.0) * bins as f64) as usize).min(bins - 1);
    let mut own = vec![0.0; points.len() * width];
    for (i, nn) in tables.iter().enumerate() {
        let row = &mut own[i * width..(i + 1) * width];
        let mut count = 0.0;
        for &j in nn {
            let d = points[j] - points[i];
            let len = d.norm();
            if j == i || len <= 0.0 {
                continue;
            }
            let u = d / len;
            row[bin(nrm[i].dot(&nrm[j]))] += 1.0;
            row[bins + bin(nrm[i].dot(&u))] += 1.0;
            row[2 * bins + bin(nrm[j].dot(&u))] += 1.0;
            count += 1.0;
        }
        if count > 0.0 {
            row[..3 * bins].iter_mut().for_each(|v| *v /= count);
        }
        let l = spectra[i];
        if l[0] > 0.0 {
            row[3 * bins] = l[1] / l[0];
            row[3 * bins + 1] = l[2] / l[0];
        }
    }
    let mut data = vec![0.0; points.len() * width];
    for (i, nn) in tables.iter().enumerate() {
        let row = &mut data[i * width..(i + 1) * width];
        for &j in nn {
            for (r, v) in row.iter_mut().zip(&own[j * width..(j + 1) * width]) {
                *r += v / nn.len() as f64;
            }
        }
        for (r, v) in row.iter_mut().zip(&own[i * width..(i + 1) * width]) {
            *r += v;
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Tensor::new(points.len(), width, data)
}

/// Encoder features of every point of `points` (rate 1), L2-normalised.
pub fn encoder_descriptors(points: &[Vec3], model: &EstimatorModel) -> Result<Tensor> {
    let cloud = PointCloud::new(points.to_vec())?;
    let cfg = ModelConfig {
        rate: 1.0,
        neighbors: model.config.neighbors.min(points.len()),
        ..model.config.clone()
    };
    let input = prepare(&cloud, &cfg, 0)?;
    let compressed = crate::estimator::compress_input(input, model)?;
    let f = compressed.local_features;
    let mut data = f.data().to_vec();
    for row in data.chunks_mut(f.cols()) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Tensor::new(f.rows(), f.cols(), data)
}

/// Outcome of feature matching plus robust estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// `None` when fewer than three matches were found or every minimal
    /// sample was degenerate.
    pub transform: Option<RigidTransform>,
    /// `(src index, tgt index)` mutual nearest neighbors in feature space.
    pub matches: Vec<(usize, usize)>,
    /// Indices into `matches`.
    pub inliers: Vec<usize>,
}

/// Mutual nearest neighbors under squared Euclidean feature distance,
/// computed from the full distance matrix. Ties go to the lower index.
pub fn mutual_matches(src: &Tensor, tgt: &Tensor) -> Result<Vec<(usize, usize)>> {
    if src.cols() != tgt.cols() {
        return Err(Error::ShapeMismatch {
            op: "mutual_matches",
            detail: format!("feature widths {} and {}", src.cols(), tgt.cols()),
        });
    }
    let (n, m) = (src.rows(), tgt.rows());
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    let mut dist = vec![0.0; n * m];
    for i in 0..n {
        let a = src.row(i);
        for j in 0..m {
            dist[i * m + j] = a.iter().zip(tgt.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    let argmin = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        it.fold((usize::MAX, f64::INFINITY), |best, (j, d)| if d < best.1 { (j, d) } else { best })
            .0
    };
    let best_tgt: Vec<usize> = (0..n)
        .map(|i| argmin(&mut (0..m).map(|j| (j, dist[i * m + j]))))
        .collect();
    let best_src: Vec<usize> = (0..m)
        .map(|j| argmin(&mut (0..n).map(|i| (i, dist[i * m + j]))))
        .collect();
    Ok((0..n)
        .filter(|&i| best_src[best_tgt[i]] == i)
        .map(|i| (i, best_tgt[i]))
        .collect())
}

/// RANSAC over point correspondences: minimal samples of `sample_size`,
/// Kabsch per sample, keep the transform with most inliers (first wins on
/// ties), then refit on its inliers.
pub fn ransac(pairs: &[(Vec3, Vec3)], cfg: &RegistrationConfig) -> Option<(RigidTransform, Vec<usize>)> {
    let s = cfg.sample_size.max(3);
    if pairs.len() < s {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r2 = cfg.inlier_radius * cfg.inlier_radius;
    let inliers_of = |t: &RigidTransform| -> Vec<usize> {
        pairs
            .iter()
            .enumerate()
            .filter(|(_, (p, q))| (t.apply(p) - q).norm_squared() < r2)
            .map(|(i, _)| i)
            .collect()
    };
    let mut best: Option<(RigidTransform, Vec<usize>)> = None;
    for _ in 0..cfg.iterations {
        let idx = rand::seq::index::sample(&mut rng, pairs.len(), s);
        let sample: Vec<Correspondence> = idx.iter().map(|i| Correspondence::new(pairs[i].0, pairs[i].1)).collect();
        let Ok(t) = kabsch_align(&sample) else { continue };
        let inl = inliers_of(&t);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((t, inl));
        }
    }
    let (t, inl) = best?;
    let refit: Vec<Correspondence> = inl.iter().map(|&i| Correspondence::new(pairs[i].0, pairs[i].1)).collect();
    match kabsch_align(&refit) {
        Ok(t2) => {
            let inl2 = inliers_of(&t2);
            Some((t2, inl2))
        }
        Err(_) => Some((t, inl)),
    }
}

/// Mutual-NN feature matching followed by [`ransac`].
pub fn match_and_register(
    src: &[Vec3],
    src_features: &Tensor,
    tgt: &[Vec3],
    tgt_features: &Tensor,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    if src.len() < 3 || tgt.len() < 3 {
        return Err(Error::DegenerateGeometry("registration needs at least 3 points per side".into()));
    }
    if src_features.rows() != src.len() || tgt_features.rows() != tgt.len() {
        return Err(Error::ShapeMismatch {
            op: "match_and_register",
            detail: "one feature row per point expected".into(),
        });
    }
    let matches = mutual_matches(src_features, tgt_features)?;
    let pairs: Vec<(Vec3, Vec3)> = matches.iter().map(|&(i, j)| (src[i], tgt[j])).collect();
    let (transform, inliers) = match ransac(&pairs, cfg) {
        Some((t, inl)) => (Some(t), inl),
        None => (None, Vec::new()),
    };
    Ok(RegistrationResult {
        transform,
        matches,
        inliers,
    })
}

/// Sampling methods compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Random,
    PoissonDisk,
    VoxelGrid,
    Fps,
    /// Estimator on the pre-sampled (compressed) clouds.
    Overlap,
    /// Estimator on every input point.
    OverlapUncompressed,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Random,
        Method::PoissonDisk,
        Method::VoxelGrid,
        Method::Fps,
        Method::Overlap,
        Method::OverlapUncompressed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::PoissonDisk => "poisson",
            Method::VoxelGrid => "voxel",
            Method::Fps => "fps",
            Method::Overlap => "overlap",
            Method::OverlapUncompressed => "overlap_uncompressed",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::Overlap | Method::OverlapUncompressed)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown sampler '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub registration: RegistrationConfig,
    pub propagation: PropagationConfig,
    /// Registration counts as successful below this RMSE over the source cloud.
    pub recall_rmse: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            propagation: PropagationConfig::default(),
            recall_rmse: DEFAULT_RECALL_RMSE,
        }
    }
}

/// Points kept by a sampler; `ids` is `None` for samplers that synthesise
/// new points (voxel centroids).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCloud {
    pub points: PointCloud,
    pub ids: Option<Vec<usize>>,
}

/// Estimator outputs of an overlap-aware run.
#[derive(Debug, Clone)]
pub struct OverlapScores {
    pub src: ScoredCloud,
    pub tgt: ScoredCloud,
    pub src_propagated: PropagatedScores,
    pub tgt_propagated: PropagatedScores,
}

#[derive(Debug, Clone)]
pub struct PairRun {
    pub src: SampledCloud,
    pub tgt: SampledCloud,
    pub registration: RegistrationResult,
    pub ledger: MemoryLedger,
    pub scores: Option<OverlapScores>,
}

impl PairRun {
    /// RMSE of the estimate over `src_full`; `None` if registration failed.
    pub fn rmse(&self, src_full: &PointCloud, t_true: &RigidTransform) -> Result<Option<f64>> {
        match &self.registration.transform {
            Some(t) => Ok(Some(registration_rmse(t, t_true, src_full)?)),
            None => Ok(None),
        }
    }
}

fn take(cloud: &PointCloud, r: SampleResult) -> Result<SampledCloud> {
    Ok(SampledCloud {
        points: cloud.subset(&r.selected_ids)?,
        ids: Some(r.selected_ids),
    })
}

/// Baseline sampler run on one cloud, with its working buffers accounted.
fn baseline(
    cloud: &PointCloud,
    method: Method,
    budget: usize,
    seed: u64,
    ledger: &mut MemoryLedger,
) -> Result<SampledCloud> {
    let n = cloud.len();
    let st = Stage::Sampling;
    let out = match method {
        Method::Random => {
            let a = ledger.alloc(st, "random.ids", budget * ID_BYTES);
            let r = take(cloud, random_sample(cloud, budget, seed)?)?;
            ledger.free(a);
            r
        }
        Method::Fps => {
            let a = ledger.alloc(st, "fps.min_distance", n * F64);
            let b = ledger.alloc(st, "fps.ids", budget * ID_BYTES);
            let start = (seed % n as u64) as usize;
            let r = take(cloud, farthest_point_sample(cloud, budget, start)?)?;
            ledger.free(a);
            ledger.free(b);
            r
        }
        Method::PoissonDisk => {
            let a = ledger.alloc(st, "poisson.grid", n * ID_BYTES);
            let b = ledger.alloc(st, "poisson.ids", budget * ID_BYTES);
            let (r, _) = poisson_disk_for_budget(cloud, budget)?;
            let r = take(cloud, r)?;
            ledger.free(a);
            ledger.free(b);
            r
        }
        Method::VoxelGrid => {
            let a = ledger.alloc(st, "voxel.members", n * ID_BYTES);
            let b = ledger.alloc(st, "voxel.centroids", budget * POINT_BYTES);
            let (r, _) = voxel_grid_for_budget(cloud, budget)?;
            ledger.free(a);
            ledger.free(b);
            SampledCloud {
                points: r.centroids,
                ids: None,
            }
        }
        Method::Overlap | Method::OverlapUncompressed => unreachable!("handled by the estimator path"),
    };
    Ok(out)
}

fn overlap_path(
    src: &PointCloud,
    tgt: &PointCloud,
    model: &EstimatorModel,
    rate: f64,
    budgets: (usize, usize),
    cfg: &PipelineConfig,
    seed: u64,
    ledger: &mut MemoryLedger,
) -> Result<(SampledCloud, SampledCloud, OverlapScores)> {
    let st = Stage::Sampling;
    let mcfg = ModelConfig {
        rate,
        ..model.config.clone()
    };
    let p = prepare(src, &mcfg, derive_seed(seed, 0, 0))?;
    let q = prepare(tgt, &mcfg, derive_seed(seed, 0, 1))?;
    let mut prep_allocs = Vec::new();
    for c in [&p, &q] {
        prep_allocs.push(ledger.alloc(st, "presample.ids", c.len() * ID_BYTES));
        prep_allocs.push(ledger.alloc(st, "presample.points", c.len() * POINT_BYTES));
        prep_allocs.push(ledger.alloc(st, "knn.table", c.neighbor_table.len() * ID_BYTES));
        prep_allocs.push(ledger.alloc(st, "context.table", c.context_table.len() * ID_BYTES));
    }
    let inference = infer_pair(model, &p, &q)?;
    let graph: Vec<_> = inference
        .buffers
        .iter()
        .map(|(label, bytes)| ledger.alloc(st, label, *bytes))
        .collect();
    // the tape is released once scores are read out
    for a in graph {
        ledger.free(a);
    }
    let mut select = |full: &PointCloud, scored: &ScoredCloud, budget: usize| -> Result<(SampledCloud, PropagatedScores)> {
        let tree = ledger.alloc(st, "propagation.index", scored.len() * (POINT_BYTES + ID_BYTES));
        let knn = ledger.alloc(st, "propagation.knn", full.len() * PROPAGATION_NEIGHBORS * ID_BYTES);
        let scores = ledger.alloc(st, "propagation.scores", full.len() * F64);
        let order = ledger.alloc(st, "selection.order", full.len() * ID_BYTES);
        let prop = propagate_scores(full, scored, &cfg.propagation)?;
        let sel = overlap_aware_select(full, &prop, budget)?;
        for a in [tree, knn, scores, order] {
            ledger.free(a);
        }
        Ok((take(full, sel)?, prop))
    };
    let (s_src, prop_src) = select(src, &inference.src, budgets.0)?;
    let (s_tgt, prop_tgt) = select(tgt, &inference.tgt, budgets.1)?;
    for a in prep_allocs {
        ledger.free(a);
    }
    Ok((
        s_src,
        s_tgt,
        OverlapScores {
            src: inference.src,
            tgt: inference.tgt,
            src_propagated: prop_src,
            tgt_propagated: prop_tgt,
        },
    ))
}

/// Baseline sampling of a single cloud; estimator methods need a pair.
pub fn sample_cloud(cloud: &PointCloud, method: Method, budget_fraction: f64, seed: u64) -> Result<SampledCloud> {
    if method.needs_model() {
        return Err(Error::invalid(format!("method {method} samples pairs, not single clouds")));
    }
    let budget = budget_from_fraction(cloud.len(), budget_fraction)?;
    baseline(cloud, method, budget, seed, &mut MemoryLedger::new())
}

/// Samples both clouds with `method` to `budget_fraction` of their size.
/// The full input clouds are held for the whole sampling stage.
pub fn sample_pair(
    src: &PointCloud,
    tgt: &PointCloud,
    method: Method,
    budget_fraction: f64,
    model: Option<&EstimatorModel>,
    cfg: &PipelineConfig,
    seed: u64,
    ledger: &mut MemoryLedger,
) -> Result<(SampledCloud, SampledCloud, Option<OverlapScores>)> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let budgets = (
        budget_from_fraction(src.len(), budget_fraction)?,
        budget_from_fraction(tgt.len(), budget_fraction)?,
    );
    let inputs = [
        ledger.alloc(Stage::Sampling, "input.src", src.len() * POINT_BYTES),
        ledger.alloc(Stage::Sampling, "input.tgt", tgt.len() * POINT_BYTES),
    ];
    let out = match method {
        Method::Overlap | Method::OverlapUncompressed => {
            let model = model.ok_or_else(|| Error::invalid(format!("method {method} needs a trained model")))?;
            let rate = if method == Method::Overlap { model.config.rate } else { 1.0 };
            let (a, b, s) = overlap_path(src, tgt, model, rate, budgets, cfg, seed, ledger)?;
            (a, b, Some(s))
        }
        _ => {
            let a = baseline(src, method, budgets.0, derive_seed(seed, 4, 0), ledger)?;
            let b = baseline(tgt, method, budgets.1, derive_seed(seed, 4, 1), ledger)?;
            (a, b, None)
        }
    };
    for a in inputs {
        ledger.free(a);
    }
    Ok(out)
}

/// Describes, matches and registers two sampled clouds, accounting the
/// registration stage.
pub fn register_sampled(
    src: &SampledCloud,
    tgt: &SampledCloud,
    model: Option<&EstimatorModel>,
    cfg: &RegistrationConfig,
    ledger: &mut MemoryLedger,
) -> Result<RegistrationResult> {
    let st = Stage::Registration;
    let (ps, pt) = (src.points.points(), tgt.points.points());
    if ps.len() < 3 || pt.len() < 3 {
        return Ok(RegistrationResult {
            transform: None,
            matches: Vec::new(),
            inliers: Vec::new(),
        });
    }
    let mut live = vec![
        ledger.alloc(st, "points.src", ps.len() * POINT_BYTES),
        ledger.alloc(st, "points.tgt", pt.len() * POINT_BYTES),
    ];
    let describe = |pts: &[Vec3], ledger: &mut MemoryLedger| -> Result<(Tensor, crate::pipeline::Allocation)> {
        let k = cfg.descriptor_neighbors.clamp(2, pts.len());
        let table = ledger.alloc(st, "descriptor.knn", pts.len() * k * ID_BYTES);
        let f = match cfg.descriptor {
            DescriptorKind::Handcrafted => {
                let tmp = ledger.alloc(st, "descriptor.normals", pts.len() * POINT_BYTES);
                let own = ledger.alloc(st, "descriptor.histograms", pts.len() * (3 * cfg.histogram_bins + 2) * F64);
                let f = handcrafted_descriptors(pts, cfg.descriptor_neighbors, cfg.histogram_bins)?;
                ledger.free(tmp);
                ledger.free(own);
                f
            }
            DescriptorKind::Encoder => {
                let model = model.ok_or_else(|| Error::invalid("encoder descriptors need a model"))?;
                let hidden = ledger.alloc(st, "descriptor.encoder", 2 * pts.len() * k * model.config.width * F64);
                let f = encoder_descriptors(pts, model)?;
                ledger.free(hidden);
                f
            }
        };
        ledger.free(table);
        let a = ledger.alloc(st, "descriptor.features", f.rows() * f.cols() * F64);
        Ok((f, a))
    };
    let (fs, a) = describe(ps, ledger)?;
    live.push(a);
    let (ft, a) = describe(pt, ledger)?;
    live.push(a);
    let dist = ledger.alloc(st, "matching.distance", ps.len() * pt.len() * F64);
    let result = match_and_register(ps, &fs, pt, &ft, cfg)?;
    ledger.free(dist);
    let m = result.matches.len();
    let buffers = [
        ledger.alloc(st, "ransac.matches", m * 2 * ID_BYTES),
        ledger.alloc(st, "ransac.inlier_mask", m),
        ledger.alloc(st, "ransac.best_inliers", m * ID_BYTES),
    ];
    for a in buffers.into_iter().chain(live) {
        ledger.free(a);
    }
    Ok(result)
}

/// Full pipeline for one pair.
pub fn run_pair(
    src: &PointCloud,
    tgt: &PointCloud,
    method: Method,
    budget_fraction: f64,
    model: Option<&EstimatorModel>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<PairRun> {
    let mut ledger = MemoryLedger::new();
    let (s, t, scores) = sample_pair(src, tgt, method, budget_fraction, model, cfg, seed, &mut ledger)?;
    let reg_cfg = RegistrationConfig {
        seed: derive_seed(seed, 5, 0),
        ..cfg.registration
    };
    let registration = register_sampled(&s, &t, model, &reg_cfg, &mut ledger)?;
    Ok(PairRun {
        src: s,
        tgt: t,
        registration,
        ledger,
        scores,
    })
}
