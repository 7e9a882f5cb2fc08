//! Overlap estimator.
//!
//! Each cloud is randomly pre-sampled and every kept point is encoded from
//! the offsets of its k nearest original points (expressed in a local
//! reference frame, so the encoding is invariant to rigid motion). The two
//! compressed clouds exchange information through single-head
//! cross-attention with a residual connection, and three heads predict an
//! overlap probability `o`, a matchability probability `m` and a unit-norm
//! descriptor for every sampled point. The combined score is `s = o·m`.
//!
//! Training minimises `ω_c·L_c + ω_o·L_o + ω_m·L_m`, each term averaged over
//! the source and target halves.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::geometry::{ground_truth_overlap, OverlapLabels, PointCloud, RigidTransform, Vec3};
use crate::samplers::random_sample;
pub use crate::seed::derive_seed;
use crate::spatial::SpatialIndex;
use crate::tensor::{
    adam_step, cross_attention, mlp_forward, AdamConfig, AdamState, AttentionWeights, Checkpoint,
    CircleAnchor, CircleTerms, Graph, ParamStore, Tensor, Var,
};

/// Per-neighbor input width: three local-frame offset coordinates, the
/// offset length and two eigenvalue ratios of the neighborhood.
pub const INPUT_WIDTH: usize = 6;

/// Per-context-neighbor geometry width: local-frame offset magnitudes and length.
pub const CONTEXT_GEOMETRY_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Pre-sampling rate of the compression stage.
    pub rate: f64,
    /// Neighbors per sampled point in the kNN encoder.
    pub neighbors: usize,
    pub width: usize,
    pub descriptor_width: usize,
    /// Sampled-point neighbors aggregated by each context layer.
    pub context_neighbors: usize,
    /// Context layers after the kNN encoder; 0 disables them.
    pub context_layers: usize,
    /// Length that normalises context offsets (meters).
    pub context_scale: f64,
    /// Length that normalises neighbor offsets (meters).
    pub offset_scale: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rate: 0.2,
            neighbors: 32,
            width: 64,
            descriptor_width: 32,
            context_neighbors: 16,
            context_layers: 2,
            context_scale: 0.2,
            offset_scale: 0.05,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Config(format!("rate must be in (0, 1], got {}", self.rate)));
        }
        if self.neighbors == 0 || self.width == 0 || self.descriptor_width == 0 {
            return Err(Error::Config("neighbors and widths must be positive".into()));
        }
        if !(self.offset_scale > 0.0 && self.context_scale > 0.0) {
            return Err(Error::Config("offset_scale and context_scale must be positive".into()));
        }
        Ok(())
    }

    fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("rate".into(), format!("{:?}", self.rate)),
            ("neighbors".into(), self.neighbors.to_string()),
            ("width".into(), self.width.to_string()),
            ("descriptor_width".into(), self.descriptor_width.to_string()),
            ("context_neighbors".into(), self.context_neighbors.to_string()),
            ("context_layers".into(), self.context_layers.to_string()),
            ("context_scale".into(), format!("{:?}", self.context_scale)),
            ("offset_scale".into(), format!("{:?}", self.offset_scale)),
            ("init_seed".into(), self.init_seed.to_string()),
        ]
    }

    fn from_meta(meta: &std::collections::BTreeMap<String, String>) -> Result<Self> {
        fn field<T: std::str::FromStr>(
            meta: &std::collections::BTreeMap<String, String>,
            key: &str,
        ) -> Result<T> {
            meta.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing model field {key}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad model field {key}")))
        }
        Ok(Self {
            rate: field(meta, "rate")?,
            neighbors: field(meta, "neighbors")?,
            width: field(meta, "width")?,
            descriptor_width: field(meta, "descriptor_width")?,
            context_neighbors: field(meta, "context_neighbors")?,
            context_layers: field(meta, "context_layers")?,
            context_scale: field(meta, "context_scale")?,
            offset_scale: field(meta, "offset_scale")?,
            init_seed: field(meta, "init_seed")?,
        })
    }
}

/// Number of points kept by pre-sampling at `rate`: `ceil(rate·n)`, at least 1.
pub fn presample_count(n: usize, rate: f64) -> usize {
    // the epsilon absorbs representation error such as 0.2·1000 = 200.00000000000003
    (((n as f64) * rate - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Everything the encoder needs about one cloud, before any learned weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionInput {
    pub sampled_ids: Vec<usize>,
    pub positions: Vec<Vec3>,
    /// `neighbors` original ids per sampled point, flattened.
    pub neighbor_table: Vec<usize>,
    pub neighbors: usize,
    /// `[m·neighbors, INPUT_WIDTH]`
    pub inputs: Tensor,
    /// Context neighbors (indices into the sampled set), flattened.
    pub context_table: Vec<usize>,
    pub context_neighbors: usize,
    /// `[m·context_neighbors, CONTEXT_GEOMETRY_WIDTH]`
    pub context_geometry: Tensor,
}

impl CompressionInput {
    pub fn len(&self) -> usize {
        self.sampled_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sampled_ids.is_empty()
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbor_table[i * self.neighbors..(i + 1) * self.neighbors]
    }
}

/// Local reference frame of a neighborhood from its offset covariance.
/// Axes are sorted by decreasing eigenvalue; the first and third axes point
/// toward the majority of offsets and the second completes a right-handed frame.
fn local_frame(offsets: &[Vec3]) -> (Matrix3<f64>, [f64; 3]) {
    let mut cov = Matrix3::zeros();
    for v in offsets {
        cov += v * v.transpose();
    }
    cov /= offsets.len().max(1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let lambda = [
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]].max(0.0),
        eig.eigenvalues[order[2]].max(0.0),
    ];
    let orient = |axis: Vec3| {
        let s: f64 = offsets.iter().map(|v| v.dot(&axis)).sum();
        if s < 0.0 {
            -axis
        } else {
            axis
        }
    };
    let e1 = orient(eig.eigenvectors.column(order[0]).into_owned());
    let e3 = orient(eig.eigenvectors.column(order[2]).into_owned());
    let e2 = e3.cross(&e1);
    (Matrix3::from_rows(&[e1.transpose(), e2.transpose(), e3.transpose()]), lambda)
}

/// Local-frame coordinates are taken in absolute value: on flat or
/// symmetric patches the axis signs are decided by noise and would differ
/// between two scans of the same surface.
fn frame_row(frame: &Matrix3<f64>, v: &Vec3, scale: f64) -> [f64; 4] {
    let local = frame * v;
    [local.x.abs() / scale, local.y.abs() / scale, local.z.abs() / scale, v.norm() / scale]
}

fn neighborhood_rows(cloud: &PointCloud, center: &Vec3, ids: &[usize], scale: f64, out: &mut Vec<f64>) -> Matrix3<f64> {
    let offsets: Vec<Vec3> = ids.iter().map(|&j| cloud.point(j) - center).collect();
    let (frame, lambda) = local_frame(&offsets);
    let (r2, r3) = if lambda[0] > 1e-300 {
        (lambda[1] / lambda[0], lambda[2] / lambda[0])
    } else {
        (0.0, 0.0)
    };
    for v in &offsets {
        out.extend_from_slice(&frame_row(&frame, v, scale));
        out.extend_from_slice(&[r2, r3]);
    }
    frame
}

/// Random pre-sample of `ceil(rate·n)` points followed by kNN gathering.
pub fn prepare(cloud: &PointCloud, cfg: &ModelConfig, seed: u64) -> Result<CompressionInput> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let count = presample_count(cloud.len(), cfg.rate);
    let ids = random_sample(cloud, count, seed)?.selected_ids;
    prepare_with_ids(cloud, ids, cfg)
}

/// Same as [`prepare`] with an explicit pre-sample.
pub fn prepare_with_ids(cloud: &PointCloud, sampled_ids: Vec<usize>, cfg: &ModelConfig) -> Result<CompressionInput> {
    cfg.validate()?;
    if sampled_ids.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let k = cfg.neighbors;
    if k > cloud.len() {
        return Err(Error::TooManyNeighbors {
            requested: k,
            available: cloud.len(),
        });
    }
    let index = SpatialIndex::build(cloud);
    let mut neighbor_table = Vec::with_capacity(sampled_ids.len() * k);
    let mut rows = Vec::with_capacity(sampled_ids.len() * k * INPUT_WIDTH);
    let mut positions = Vec::with_capacity(sampled_ids.len());
    let mut frames = Vec::with_capacity(sampled_ids.len());
    for &id in &sampled_ids {
        if id >= cloud.len() {
            return Err(Error::invalid(format!("sampled id {id} out of range")));
        }
        let center = *cloud.point(id);
        let nbrs: Vec<usize> = index.knn(&center, k)?.into_iter().map(|n| n.id).collect();
        frames.push(neighborhood_rows(cloud, &center, &nbrs, cfg.offset_scale, &mut rows));
        neighbor_table.extend_from_slice(&nbrs);
        positions.push(center);
    }
    let m = sampled_ids.len();
    let kc = if cfg.context_layers > 0 { cfg.context_neighbors.min(m) } else { 0 };
    let mut context_table = Vec::with_capacity(m * kc);
    let mut geometry = Vec::with_capacity(m * kc * CONTEXT_GEOMETRY_WIDTH);
    if kc > 0 {
        let sampled_index = SpatialIndex::from_points(&positions);
        for (i, p) in positions.iter().enumerate() {
            for n in sampled_index.knn(p, kc)? {
                geometry.extend_from_slice(&frame_row(&frames[i], &(positions[n.id] - p), cfg.context_scale));
                context_table.push(n.id);
            }
        }
    }
    Ok(CompressionInput {
        sampled_ids,
        positions,
        neighbor_table,
        neighbors: k,
        inputs: Tensor::new(m * k, INPUT_WIDTH, rows)?,
        context_table,
        context_neighbors: kc,
        context_geometry: Tensor::new(m * kc, CONTEXT_GEOMETRY_WIDTH, geometry)?,
    })
}

/// Trainable parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Graph handles of one side's head outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub overlap: Var,
    pub matchability: Var,
    pub descriptor: Var,
}

/// Graph handles of a full pair forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    pub local_src: Var,
    pub local_tgt: Var,
    pub fused_src: Var,
    pub fused_tgt: Var,
    pub src: HeadVars,
    pub tgt: HeadVars,
}

impl EstimatorModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.width;
        let mut params = ParamStore::new();
        let mut dense = |params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| -> Result<()> {
            params.add(name, Tensor::glorot(fan_in, fan_out, &mut rng))?;
            Ok(())
        };
        let mut layer = |params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| -> Result<()> {
            dense(params, &format!("{name}.w"), fan_in, fan_out)?;
            params.add(&format!("{name}.b"), Tensor::zeros(1, fan_out))?;
            Ok(())
        };
        layer(&mut params, "enc.0", INPUT_WIDTH, d)?;
        layer(&mut params, "enc.1", d, d)?;
        for l in 0..config.context_layers {
            layer(&mut params, &format!("ctx.{l}"), d, d)?;
        }
        layer(&mut params, "head.o.0", d, d)?;
        layer(&mut params, "head.o.1", d, 1)?;
        layer(&mut params, "head.m.0", d, d)?;
        layer(&mut params, "head.m.1", d, 1)?;
        layer(&mut params, "head.f.0", d, d)?;
        layer(&mut params, "head.f.1", d, config.descriptor_width)?;
        drop(layer);
        for l in 0..config.context_layers {
            dense(&mut params, &format!("ctx.{l}.geo.w"), CONTEXT_GEOMETRY_WIDTH, d)?;
        }
        for name in ["attn.q", "attn.k", "attn.v"] {
            dense(&mut params, name, d, d)?;
        }
        Ok(Self { config, params })
    }

    /// Sets every element of the named parameters to `value`.
    pub fn fill(&mut self, names: &[&str], value: f64) -> Result<()> {
        for name in names {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            self.params
                .get_mut(id)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = value);
        }
        Ok(())
    }

    fn layer(&self, g: &mut Graph, name: &str) -> Result<(Var, Var)> {
        Ok((
            g.param_by_name(&self.params, &format!("{name}.w"))?,
            g.param_by_name(&self.params, &format!("{name}.b"))?,
        ))
    }

    /// kNN encoder followed by the context layers: `[m, width]`.
    ///
    /// A context layer lets every sampled point pool over its nearest
    /// sampled neighbors, each contributing its feature and its offset in
    /// the center's local frame; the pooled vector is added residually.
    pub fn encode(&self, g: &mut Graph, input: &CompressionInput) -> Result<Var> {
        let x = g.constant(input.inputs.clone())?;
        g.set_label(x, "neighbor_inputs");
        let layers = [self.layer(g, "enc.0")?, self.layer(g, "enc.1")?];
        let h = mlp_forward(g, x, &layers)?;
        let mut local = g.group_max(h, input.neighbors)?;
        g.set_label(local, "local_features");
        if input.context_neighbors > 0 {
            let geometry = g.constant(input.context_geometry.clone())?;
            for l in 0..self.config.context_layers {
                let (wf, b) = self.layer(g, &format!("ctx.{l}"))?;
                let wg = g.param_by_name(&self.params, &format!("ctx.{l}.geo.w"))?;
                let gathered = g.gather_rows(local, input.context_table.clone())?;
                let zf = g.matmul(gathered, wf)?;
                let zg = g.matmul(geometry, wg)?;
                let z = g.add(zf, zg)?;
                let z = g.add_bias(z, b)?;
                let z = g.relu(z)?;
                let pooled = g.group_max(z, input.context_neighbors)?;
                local = g.add(local, pooled)?;
            }
        }
        Ok(local)
    }

    fn attention_weights(&self, g: &mut Graph) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            query: g.param_by_name(&self.params, "attn.q")?,
            key: g.param_by_name(&self.params, "attn.k")?,
            value: g.param_by_name(&self.params, "attn.v")?,
        })
    }

    /// `F^{P←Q} = F^P + attn(F^P, F^Q)` and the symmetric target pass.
    pub fn attend_vars(&self, g: &mut Graph, src: Var, tgt: Var) -> Result<(Var, Var)> {
        let w = self.attention_weights(g)?;
        let a = cross_attention(g, src, tgt, w)?;
        let fused_src = g.add(src, a)?;
        let b = cross_attention(g, tgt, src, w)?;
        let fused_tgt = g.add(tgt, b)?;
        Ok((fused_src, fused_tgt))
    }

    pub fn heads(&self, g: &mut Graph, features: Var) -> Result<HeadVars> {
        let o_layers = [self.layer(g, "head.o.0")?, self.layer(g, "head.o.1")?];
        let o = mlp_forward(g, features, &o_layers)?;
        let overlap = g.sigmoid(o)?;
        let m_layers = [self.layer(g, "head.m.0")?, self.layer(g, "head.m.1")?];
        let m = mlp_forward(g, features, &m_layers)?;
        let matchability = g.sigmoid(m)?;
        let f_layers = [self.layer(g, "head.f.0")?, self.layer(g, "head.f.1")?];
        let f = mlp_forward(g, features, &f_layers)?;
        let descriptor = g.l2_normalize_rows(f)?;
        Ok(HeadVars {
            overlap,
            matchability,
            descriptor,
        })
    }

    pub fn forward_pair(&self, g: &mut Graph, src: &CompressionInput, tgt: &CompressionInput) -> Result<PairVars> {
        let local_src = self.encode(g, src)?;
        let local_tgt = self.encode(g, tgt)?;
        let (fused_src, fused_tgt) = self.attend_vars(g, local_src, local_tgt)?;
        let src_heads = self.heads(g, fused_src)?;
        let tgt_heads = self.heads(g, fused_tgt)?;
        Ok(PairVars {
            local_src,
            local_tgt,
            fused_src,
            fused_tgt,
            src: src_heads,
            tgt: tgt_heads,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.params.to_checkpoint();
        ck.meta.extend(self.config.to_meta());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_meta(&ck.meta)?;
        let loaded = ParamStore::from_checkpoint(ck)?;
        let reference = EstimatorModel::new(config.clone())?;
        if loaded.len() != reference.params.len() {
            return Err(Error::Checkpoint("unexpected parameter set".into()));
        }
        // rebuild in construction order so the layout never depends on the file
        let mut params = ParamStore::new();
        for p in reference.params.iter() {
            let got = loaded
                .by_name(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("parameter {} has wrong shape", p.name)));
            }
            params.add(&p.name, got.value.clone())?;
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Pre-sampled cloud with its learned local features.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCloud {
    pub input: CompressionInput,
    pub local_features: Tensor,
}

impl CompressedCloud {
    pub fn sampled_ids(&self) -> &[usize] {
        &self.input.sampled_ids
    }
}

/// Pre-samples `ceil(rate·n)` points with `seed` and encodes their
/// `k`-neighborhoods.
pub fn compress(cloud: &PointCloud, rate: f64, k: usize, model: &EstimatorModel, seed: u64) -> Result<CompressedCloud> {
    let cfg = ModelConfig {
        rate,
        neighbors: k,
        ..model.config.clone()
    };
    let input = prepare(cloud, &cfg, seed)?;
    compress_input(input, model)
}

pub fn compress_input(input: CompressionInput, model: &EstimatorModel) -> Result<CompressedCloud> {
    let mut g = Graph::new();
    let local = model.encode(&mut g, &input)?;
    Ok(CompressedCloud {
        local_features: g.value(local).clone(),
        input,
    })
}

/// Cross-attention in both directions over already-compressed clouds.
pub fn attend(src: &CompressedCloud, tgt: &CompressedCloud, model: &EstimatorModel) -> Result<(Tensor, Tensor)> {
    if src.local_features.rows() == 0 || tgt.local_features.rows() == 0 {
        return Err(Error::EmptyCloud);
    }
    if src.local_features.cols() != tgt.local_features.cols() {
        return Err(Error::ShapeMismatch {
            op: "attend",
            detail: "feature widths differ".into(),
        });
    }
    let mut g = Graph::new();
    let a = g.constant(src.local_features.clone())?;
    let b = g.constant(tgt.local_features.clone())?;
    let (fa, fb) = model.attend_vars(&mut g, a, b)?;
    Ok((g.value(fa).clone(), g.value(fb).clone()))
}

/// Per-point head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub overlap: Vec<f64>,
    pub matchability: Vec<f64>,
    pub combined: Vec<f64>,
    pub descriptor: Tensor,
}

fn head_output(g: &Graph, h: &HeadVars) -> HeadOutput {
    let overlap = g.value(h.overlap).data().to_vec();
    let matchability = g.value(h.matchability).data().to_vec();
    let combined = overlap.iter().zip(&matchability).map(|(o, m)| o * m).collect();
    HeadOutput {
        overlap,
        matchability,
        combined,
        descriptor: g.value(h.descriptor).clone(),
    }
}

pub fn score_heads(features: &Tensor, model: &EstimatorModel) -> Result<HeadOutput> {
    let mut g = Graph::new();
    let f = g.constant(features.clone())?;
    let h = model.heads(&mut g, f)?;
    Ok(head_output(&g, &h))
}

/// Sampled points of one cloud with their predicted scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCloud {
    pub sampled_ids: Vec<usize>,
    pub positions: Vec<Vec3>,
    pub overlap: Vec<f64>,
    pub matchability: Vec<f64>,
    /// `overlap[i] · matchability[i]`
    pub combined: Vec<f64>,
    pub descriptor: Tensor,
}

impl ScoredCloud {
    fn from_parts(input: &CompressionInput, h: HeadOutput) -> Self {
        Self {
            sampled_ids: input.sampled_ids.clone(),
            positions: input.positions.clone(),
            overlap: h.overlap,
            matchability: h.matchability,
            combined: h.combined,
            descriptor: h.descriptor,
        }
    }

    pub fn len(&self) -> usize {
        self.sampled_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sampled_ids.is_empty()
    }
}

/// Result of running the estimator on a pair, with the tape's buffer sizes
/// for memory accounting.
#[derive(Debug, Clone)]
pub struct PairInference {
    pub src: ScoredCloud,
    pub tgt: ScoredCloud,
    pub buffers: Vec<(&'static str, usize)>,
}

pub fn infer_pair(model: &EstimatorModel, src: &CompressionInput, tgt: &CompressionInput) -> Result<PairInference> {
    let mut g = Graph::new();
    let vars = model.forward_pair(&mut g, src, tgt)?;
    Ok(PairInference {
        src: ScoredCloud::from_parts(src, head_output(&g, &vars.src)),
        tgt: ScoredCloud::from_parts(tgt, head_output(&g, &vars.tgt)),
        buffers: g.buffers().collect(),
    })
}

/// Pre-samples both clouds (seeds derived from `seed`) and scores them.
pub fn score_pair(model: &EstimatorModel, src: &PointCloud, tgt: &PointCloud, seed: u64) -> Result<PairInference> {
    let p = prepare(src, &model.config, derive_seed(seed, 0, 0))?;
    let q = prepare(tgt, &model.config, derive_seed(seed, 0, 1))?;
    infer_pair(model, &p, &q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub circle: f64,
    pub overlap: f64,
    pub matchability: f64,
}

impl LossWeights {
    pub fn new(circle: f64, overlap: f64, matchability: f64) -> Result<Self> {
        if [circle, overlap, matchability]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(Self {
            circle,
            overlap,
            matchability,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleLossParams {
    pub pos_margin: f64,
    pub neg_margin: f64,
    pub pos_scale: f64,
    pub neg_scale: f64,
    /// Real-space radius behind the matchability ground truth.
    pub matchability_radius: f64,
}

impl Default for CircleLossParams {
    fn default() -> Self {
        Self {
            pos_margin: 0.1,
            neg_margin: 1.4,
            pos_scale: 10.0,
            neg_scale: 10.0,
            matchability_radius: 0.05,
        }
    }
}

impl CircleLossParams {
    pub fn terms(&self) -> CircleTerms {
        CircleTerms {
            pos_margin: self.pos_margin,
            neg_margin: self.neg_margin,
            pos_scale: self.pos_scale,
            neg_scale: self.neg_scale,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.pos_scale > 0.0 && self.neg_scale > 0.0 && self.matchability_radius > 0.0) {
            return Err(Error::Config("circle scales and matchability radius must be positive".into()));
        }
        Ok(())
    }
}

/// Each component already averaged over the source and target halves.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub circle: f64,
    pub overlap: f64,
    pub matchability: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.circle * c.circle + w.overlap * c.overlap + w.matchability * c.matchability
}

/// Mean clamped binary cross-entropy of overlap probabilities.
pub fn overlap_loss(o: &[f64], y: &OverlapLabels) -> Result<f64> {
    bce_value(o, &y.as_f64())
}

/// Mean clamped binary cross-entropy of matchability probabilities
/// against [`matchability_labels`].
pub fn matchability_loss(m: &[f64], labels: &[bool]) -> Result<f64> {
    bce_value(m, &bools_to_f64(labels))
}

fn bce_value(p: &[f64], labels: &[f64]) -> Result<f64> {
    if p.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "bce",
            detail: format!("{} probabilities vs {} labels", p.len(), labels.len()),
        });
    }
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(p.len(), 1, p.to_vec())?)?;
    let l = g.bce(v, labels.to_vec())?;
    Ok(g.value(l).data()[0])
}

/// For each anchor `i` of `src_pos`: positives are the `tgt_pos` rows within
/// `corr_radius` of `t_true·src_pos[i]`, negatives a random subset (at most
/// `max_negatives`) of the remaining rows.
pub fn circle_anchors(
    src_pos: &[Vec3],
    tgt_pos: &[Vec3],
    t_true: &RigidTransform,
    corr_radius: f64,
    max_negatives: usize,
    seed: u64,
) -> Vec<CircleAnchor> {
    let index = SpatialIndex::from_points(tgt_pos);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    src_pos
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let positives = index.radius_query(&t_true.apply(p), corr_radius);
            let mut rest: Vec<usize> = (0..tgt_pos.len())
                .filter(|j| positives.binary_search(j).is_err())
                .collect();
            if rest.len() > max_negatives {
                let (chosen, _) = rest.partial_shuffle(&mut rng, max_negatives);
                let mut chosen = chosen.to_vec();
                chosen.sort_unstable();
                rest = chosen;
            }
            CircleAnchor {
                anchor: i,
                positives,
                negatives: rest,
            }
        })
        .collect()
}

fn circle_half(a: &Tensor, b: &Tensor, anchors: Vec<CircleAnchor>, params: &CircleLossParams) -> Result<f64> {
    let mut g = Graph::new();
    let va = g.constant(a.clone())?;
    let vb = g.constant(b.clone())?;
    let l = g.circle_loss(va, vb, anchors, params.terms(), a.rows().max(1))?;
    Ok(g.value(l).data()[0])
}

/// `½(L_c^P + L_c^Q)` on scored clouds with freshly drawn negative subsets.
pub fn circle_loss(
    src: &ScoredCloud,
    tgt: &ScoredCloud,
    t_true: &RigidTransform,
    params: &CircleLossParams,
    corr_radius: f64,
    max_negatives: usize,
    seed: u64,
) -> Result<f64> {
    params.validate()?;
    let ap = circle_anchors(&src.positions, &tgt.positions, t_true, corr_radius, max_negatives, derive_seed(seed, 1, 0));
    let aq = circle_anchors(
        &tgt.positions,
        &src.positions,
        &t_true.inverse(),
        corr_radius,
        max_negatives,
        derive_seed(seed, 1, 1),
    );
    let lp = circle_half(&src.descriptor, &tgt.descriptor, ap, params)?;
    let lq = circle_half(&tgt.descriptor, &src.descriptor, aq, params)?;
    Ok(0.5 * (lp + lq))
}

/// Row index of the nearest `b` row (Euclidean) for every `a` row; ties
/// go to the lower index.
pub fn feature_nearest(a: &Tensor, b: &Tensor) -> Vec<usize> {
    (0..a.rows())
        .map(|i| {
            let x = a.row(i);
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..b.rows() {
                let d2: f64 = x.iter().zip(b.row(j)).map(|(u, v)| (u - v) * (u - v)).sum();
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            best.1
        })
        .collect()
}

fn matchability_from_parts(
    src_pos: &[Vec3],
    src_desc: &Tensor,
    tgt_pos: &[Vec3],
    tgt_desc: &Tensor,
    t_true: &RigidTransform,
    radius: f64,
) -> Vec<bool> {
    if tgt_pos.is_empty() {
        return vec![false; src_pos.len()];
    }
    feature_nearest(src_desc, tgt_desc)
        .into_iter()
        .zip(src_pos)
        .map(|(j, p)| (t_true.apply(p) - tgt_pos[j]).norm() < radius)
        .collect()
}

/// `m̄(p_i) = 1` iff the target point nearest to `p_i` in descriptor space
/// lies within `r_m` of `t_true·p_i` in real space.
pub fn matchability_labels(src: &ScoredCloud, tgt: &ScoredCloud, t_true: &RigidTransform, r_m: f64) -> Vec<bool> {
    matchability_from_parts(&src.positions, &src.descriptor, &tgt.positions, &tgt.descriptor, t_true, r_m)
}

fn bools_to_f64(v: &[bool]) -> Vec<f64> {
    v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

fn fraction_true(v: &[bool]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainPair {
    pub src: PointCloud,
    pub tgt: PointCloud,
    pub t_true: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub model: ModelConfig,
    pub overlap_radius: f64,
    /// Radius defining circle-loss positives and matching inliers.
    pub corr_radius: f64,
    pub circle: CircleLossParams,
    pub max_negatives: usize,
    /// Weights of the descriptor and overlap terms.
    pub circle_weight: f64,
    pub overlap_weight: f64,
    /// Matching accuracy at which the matchability term is switched on.
    pub matchability_trigger: f64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            adam: AdamConfig::default(),
            seed: 0,
            model: ModelConfig::default(),
            overlap_radius: crate::geometry::DEFAULT_OVERLAP_RADIUS,
            corr_radius: 0.05,
            circle: CircleLossParams::default(),
            max_negatives: 32,
            circle_weight: 1.0,
            overlap_weight: 1.0,
            matchability_trigger: 0.3,
            shuffle: true,
        }
    }
}

pub const TRAIN_CONFIG_KEYS: &[&str] = &[
    "epochs",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "rate",
    "k",
    "width",
    "descriptor_width",
    "context_k",
    "context_layers",
    "context_scale",
    "offset_scale",
    "overlap_radius",
    "corr_radius",
    "pos_margin",
    "neg_margin",
    "pos_scale",
    "neg_scale",
    "matchability_radius",
    "max_negatives",
    "circle_weight",
    "overlap_weight",
    "matchability_trigger",
    "shuffle",
];

impl TrainConfig {
    /// Applies the recognised keys of `kv` on top of `self`. Keys belonging
    /// to other subsystems are ignored.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        kv.read_into("epochs", &mut self.epochs)?;
        kv.read_into("lr", &mut self.adam.lr)?;
        kv.read_into("beta1", &mut self.adam.beta1)?;
        kv.read_into("beta2", &mut self.adam.beta2)?;
        kv.read_into("adam_eps", &mut self.adam.eps)?;
        kv.read_into("seed", &mut self.seed)?;
        kv.read_into("rate", &mut self.model.rate)?;
        kv.read_into("k", &mut self.model.neighbors)?;
        kv.read_into("width", &mut self.model.width)?;
        kv.read_into("descriptor_width", &mut self.model.descriptor_width)?;
        kv.read_into("context_k", &mut self.model.context_neighbors)?;
        kv.read_into("context_layers", &mut self.model.context_layers)?;
        kv.read_into("context_scale", &mut self.model.context_scale)?;
        kv.read_into("offset_scale", &mut self.model.offset_scale)?;
        kv.read_into("overlap_radius", &mut self.overlap_radius)?;
        kv.read_into("corr_radius", &mut self.corr_radius)?;
        kv.read_into("pos_margin", &mut self.circle.pos_margin)?;
        kv.read_into("neg_margin", &mut self.circle.neg_margin)?;
        kv.read_into("pos_scale", &mut self.circle.pos_scale)?;
        kv.read_into("neg_scale", &mut self.circle.neg_scale)?;
        self.circle.matchability_radius = self.corr_radius;
        kv.read_into("matchability_radius", &mut self.circle.matchability_radius)?;
        kv.read_into("max_negatives", &mut self.max_negatives)?;
        kv.read_into("circle_weight", &mut self.circle_weight)?;
        kv.read_into("overlap_weight", &mut self.overlap_weight)?;
        kv.read_into("matchability_trigger", &mut self.matchability_trigger)?;
        kv.read_into("shuffle", &mut self.shuffle)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.circle.validate()?;
        if !(self.overlap_radius > 0.0 && self.corr_radius > 0.0) {
            return Err(Error::Config("radii must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub components: LossComponents,
    /// Measured before the epoch's updates.
    pub matching_accuracy: f64,
    pub weights: LossWeights,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EstimatorModel,
    pub log: Vec<EpochLog>,
}

/// Pre-sampling, labels and circle anchors of one training pair. Fixed for
/// the whole run so every epoch sees the same objective.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub src: CompressionInput,
    pub tgt: CompressionInput,
    pub overlap_src: Vec<f64>,
    pub overlap_tgt: Vec<f64>,
    pub anchors_src: Vec<CircleAnchor>,
    pub anchors_tgt: Vec<CircleAnchor>,
    pub t_true: RigidTransform,
}

pub fn prepare_pair(pair: &TrainPair, cfg: &TrainConfig, pair_seed: u64) -> Result<PreparedPair> {
    let src = prepare(&pair.src, &cfg.model, derive_seed(pair_seed, 0, 0))?;
    let tgt = prepare(&pair.tgt, &cfg.model, derive_seed(pair_seed, 0, 1))?;
    let (ls, lt) = ground_truth_overlap(&pair.src, &pair.tgt, &pair.t_true, cfg.overlap_radius)?;
    let pick = |labels: &OverlapLabels, ids: &[usize]| -> Vec<f64> {
        ids.iter().map(|&i| if labels.labels[i] { 1.0 } else { 0.0 }).collect()
    };
    let anchors_src = circle_anchors(
        &src.positions,
        &tgt.positions,
        &pair.t_true,
        cfg.corr_radius,
        cfg.max_negatives,
        derive_seed(pair_seed, 1, 0),
    );
    let anchors_tgt = circle_anchors(
        &tgt.positions,
        &src.positions,
        &pair.t_true.inverse(),
        cfg.corr_radius,
        cfg.max_negatives,
        derive_seed(pair_seed, 1, 1),
    );
    Ok(PreparedPair {
        overlap_src: pick(&ls, &src.sampled_ids),
        overlap_tgt: pick(&lt, &tgt.sampled_ids),
        src,
        tgt,
        anchors_src,
        anchors_tgt,
        t_true: pair.t_true,
    })
}

/// Loss graph of one prepared pair.
pub struct PairLoss {
    pub total: Var,
    pub components: LossComponents,
    /// Fraction of sampled source points whose descriptor-space neighbor is a
    /// true match within the correspondence radius.
    pub matching_accuracy: f64,
}

pub fn pair_loss(
    model: &EstimatorModel,
    g: &mut Graph,
    prep: &PreparedPair,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<PairLoss> {
    let vars = model.forward_pair(g, &prep.src, &prep.tgt)?;
    let terms = cfg.circle.terms();
    let lc_p = g.circle_loss(
        vars.src.descriptor,
        vars.tgt.descriptor,
        prep.anchors_src.clone(),
        terms,
        prep.src.len(),
    )?;
    let lc_q = g.circle_loss(
        vars.tgt.descriptor,
        vars.src.descriptor,
        prep.anchors_tgt.clone(),
        terms,
        prep.tgt.len(),
    )?;
    let lo_p = g.bce(vars.src.overlap, prep.overlap_src.clone())?;
    let lo_q = g.bce(vars.tgt.overlap, prep.overlap_tgt.clone())?;

    let (dp, dq) = (g.value(vars.src.descriptor).clone(), g.value(vars.tgt.descriptor).clone());
    let r_m = cfg.circle.matchability_radius;
    let mbar_p = matchability_from_parts(&prep.src.positions, &dp, &prep.tgt.positions, &dq, &prep.t_true, r_m);
    let mbar_q = matchability_from_parts(
        &prep.tgt.positions,
        &dq,
        &prep.src.positions,
        &dp,
        &prep.t_true.inverse(),
        r_m,
    );
    let accuracy = if (r_m - cfg.corr_radius).abs() == 0.0 {
        fraction_true(&mbar_p)
    } else {
        fraction_true(&matchability_from_parts(
            &prep.src.positions,
            &dp,
            &prep.tgt.positions,
            &dq,
            &prep.t_true,
            cfg.corr_radius,
        ))
    };
    let lm_p = g.bce(vars.src.matchability, bools_to_f64(&mbar_p))?;
    let lm_q = g.bce(vars.tgt.matchability, bools_to_f64(&mbar_q))?;

    let half = |w: f64| 0.5 * w;
    let total = g.weighted_sum(&[
        (lc_p, half(weights.circle)),
        (lc_q, half(weights.circle)),
        (lo_p, half(weights.overlap)),
        (lo_q, half(weights.overlap)),
        (lm_p, half(weights.matchability)),
        (lm_q, half(weights.matchability)),
    ])?;
    let val = |g: &Graph, v: Var| g.value(v).data()[0];
    Ok(PairLoss {
        total,
        components: LossComponents {
            circle: 0.5 * (val(g, lc_p) + val(g, lc_q)),
            overlap: 0.5 * (val(g, lo_p) + val(g, lo_q)),
            matchability: 0.5 * (val(g, lm_p) + val(g, lm_q)),
        },
        matching_accuracy: accuracy,
    })
}

fn matching_accuracy(model: &EstimatorModel, prepared: &[PreparedPair], cfg: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for prep in prepared {
        let inf = infer_pair(model, &prep.src, &prep.tgt)?;
        let labels = matchability_labels(&inf.src, &inf.tgt, &prep.t_true, cfg.corr_radius);
        sum += fraction_true(&labels);
    }
    Ok(sum / prepared.len() as f64)
}

/// Adam over the pairs, one step per pair. The matchability weight starts
/// at 0 and is set to 1 for good from the first epoch whose matching
/// accuracy (measured before that epoch's updates) reaches the trigger.
pub fn train(pairs: &[TrainPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(pairs, cfg, |_| {})
}

pub fn train_with_progress(
    pairs: &[TrainPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    cfg.validate()?;
    let mut model = EstimatorModel::new(cfg.model.clone())?;
    let prepared = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| prepare_pair(p, cfg, derive_seed(cfg.seed, 2, i as u64)))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = AdamState::new(&model.params);
    let mut weights = LossWeights::new(cfg.circle_weight, cfg.overlap_weight, 0.0)?;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let accuracy = matching_accuracy(&model, &prepared, cfg).map_err(|e| Error::Divergence {
            epoch,
            pair: 0,
            detail: e.to_string(),
        })?;
        if accuracy >= cfg.matchability_trigger {
            weights.matchability = 1.0;
        }
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, epoch as u64));
            order.shuffle(&mut rng);
        }
        let mut sum_total = 0.0;
        let mut sum = LossComponents::default();
        for &i in &order {
            let mut g = Graph::new();
            let diverged = |e: Error| Error::Divergence {
                epoch,
                pair: i,
                detail: e.to_string(),
            };
            let pl = pair_loss(&model, &mut g, &prepared[i], cfg, &weights).map_err(diverged)?;
            let total = g.value(pl.total).data()[0];
            if !total.is_finite() {
                return Err(diverged(Error::NonFiniteTensor("total_loss")));
            }
            g.backward(pl.total).map_err(diverged)?;
            model.params.zero_grad();
            g.accumulate_param_grads(&mut model.params);
            adam_step(&mut model.params, &mut adam, &cfg.adam)?;
            sum_total += total;
            sum.circle += pl.components.circle;
            sum.overlap += pl.components.overlap;
            sum.matchability += pl.components.matchability;
        }
        let n = prepared.len() as f64;
        let entry = EpochLog {
            epoch,
            total: sum_total / n,
            components: LossComponents {
                circle: sum.circle / n,
                overlap: sum.overlap / n,
                matchability: sum.matchability / n,
            },
            matching_accuracy: accuracy,
            weights,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (c {:.4} o {:.4} m {:.4}) acc {:.3} w_m {}",
            entry.total,
            entry.components.circle,
            entry.components.overlap,
            entry.components.matchability,
            accuracy,
            weights.matchability
        );
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
