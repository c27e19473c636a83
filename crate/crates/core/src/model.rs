//! End-to-end network: voxel encoder, vote head, foreground point
//! generator, pillar encoder, logit-query encoder and detection head,
//! with a hand-chained backward pass and the training loop.
//!
//! Gradient flow: the detection loss reaches the dense cloud through the
//! pillar slot feature and logit channels and through the neighbour
//! aggregation. A virtual point passes its feature gradient to its KNN
//! neighbours through the (fixed) interpolation weights and its logit
//! gradient to its source point. Positions, neighbour selection, ball-query
//! membership, the foreground filter and the confidence fed to the
//! aggregator carry no gradient.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{crop_to_bounds, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{
    classification_accuracy, densify_tally, detection_metrics, DensifyTally, EvalRegion, MetricReport,
};
use crate::fpg::{densify_votes, filter_foreground, foreground_confidence, softmax_rows, vote_forward_cached};
use crate::fpg::{DenseCloud, ForegroundSet, Provenance, VoteOutput};
use crate::lqe::{
    adaptive_radius, aggregate_backward, aggregate_neighbors_cached, ball_query, class_counts, fuse_backward,
    fuse_cached, Aggregation, BallQuery, Fusion, RadiusAssignment,
};
use crate::nn::{det_loss, seg_loss, sgd_step, total_loss, vote_loss, Activation, BoxTarget, DetLossParams};
use crate::nn::{ForwardCache, Gradients, LossReport, Mlp};
use crate::pillars::{
    active_cells, decode_detections, encode_box, head_input, head_input_backward, head_output_width,
    pillar_encode_backward, pillar_encode_cached, pillar_of, pillarize, pillarize_backward, scatter_bev, BevMap,
    ChannelLayout, Detection, HeadInput, PillarEncoding, PillarGrid,
};
use crate::synth::{scene_rng, SyntheticScene};
use crate::tensor::Matrix;
use crate::types::{ClassId, ObjectBox, PointCloud};
use crate::voxel::{
    project_points, project_points_backward, voxel_encode_backward, voxel_encode_channels, voxelize,
    PointProjection, VoxelEncoding, VoxelGrid,
};

/// One value per trainable head, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSet<T> {
    pub voxel_enc: T,
    pub point_proj: T,
    pub vote_head: T,
    pub pillar_enc: T,
    pub lqe_agg: T,
    pub lqe_fusion: T,
    pub det_head: T,
}

pub const HEAD_NAMES: [&str; 7] = [
    "voxel_enc",
    "point_proj",
    "vote_head",
    "pillar_enc",
    "lqe_agg",
    "lqe_fusion",
    "det_head",
];

impl<T> HeadSet<T> {
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [
            &self.voxel_enc,
            &self.point_proj,
            &self.vote_head,
            &self.pillar_enc,
            &self.lqe_agg,
            &self.lqe_fusion,
            &self.det_head,
        ]
        .into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        [
            &mut self.voxel_enc,
            &mut self.point_proj,
            &mut self.vote_head,
            &mut self.pillar_enc,
            &mut self.lqe_agg,
            &mut self.lqe_fusion,
            &mut self.det_head,
        ]
        .into_iter()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> HeadSet<U> {
        HeadSet {
            voxel_enc: f(&self.voxel_enc),
            point_proj: f(&self.point_proj),
            vote_head: f(&self.vote_head),
            pillar_enc: f(&self.pillar_enc),
            lqe_agg: f(&self.lqe_agg),
            lqe_fusion: f(&self.lqe_fusion),
            det_head: f(&self.det_head),
        }
    }

    pub fn from_vec(v: Vec<T>) -> Option<Self> {
        let mut it = v.into_iter();
        let s = HeadSet {
            voxel_enc: it.next()?,
            point_proj: it.next()?,
            vote_head: it.next()?,
            pillar_enc: it.next()?,
            lqe_agg: it.next()?,
            lqe_fusion: it.next()?,
            det_head: it.next()?,
        };
        it.next().is_none().then_some(s)
    }

    pub fn get(&self, name: &str) -> Option<&T> {
        let i = HEAD_NAMES.iter().position(|&n| n == name)?;
        self.iter().nth(i)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut T> {
        let i = HEAD_NAMES.iter().position(|&n| n == name)?;
        self.iter_mut().nth(i)
    }
}

pub type Heads = HeadSet<Mlp>;
pub type HeadGrads = HeadSet<Gradients>;

impl HeadGrads {
    pub fn zeros(heads: &Heads) -> Self {
        heads.map(Gradients::zeros_like)
    }

    pub fn add_assign(&mut self, o: &HeadGrads) {
        for (a, b) in self.iter_mut().zip(o.iter()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|g| g.scale(s));
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(Gradients::is_finite)
    }
}

/// Objectness bias so that an untrained head starts near this score.
const OBJECTNESS_PRIOR: f64 = 0.01;

/// Layer widths and activations of every head for a configuration.
pub fn head_shapes(cfg: &PipelineConfig) -> HeadSet<(Vec<usize>, Vec<Activation>)> {
    use Activation::{Identity, Relu};
    let (d, h, c, k) = (cfg.feature_dim, cfg.hidden_dim, cfg.pillar_channels, cfg.num_classes);
    let slot = ChannelLayout {
        feat_dim: d,
        num_classes: k,
    }
    .width();
    HeadSet {
        voxel_enc: (vec![cfg.raw_channels(), h, d], vec![Relu, Relu]),
        point_proj: (vec![d + 3, d], vec![Relu]),
        vote_head: (vec![d, h, 4 * k], vec![Relu, Identity]),
        pillar_enc: (vec![slot, c], vec![Relu]),
        lqe_agg: (vec![d + 1, c], vec![Relu]),
        lqe_fusion: (vec![2 * c, c], vec![Relu]),
        det_head: (vec![c, h, head_output_width(k)], vec![Relu, Identity]),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sd4rModel {
    pub heads: Heads,
}

impl Sd4rModel {
    /// Glorot-uniform weights from `seed`, zero biases except the
    /// objectness bias.
    pub fn init(cfg: &PipelineConfig, seed: u64) -> Self {
        let mut rng = scene_rng(seed, u64::MAX);
        let shapes = head_shapes(cfg);
        let mut heads = shapes.map(|(w, a)| Mlp::init(w, a, &mut rng));
        let last = heads.det_head.layers_mut().last_mut().expect("det head has layers");
        last.bias[0] = -((1.0 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR).ln();
        Self { heads }
    }

    pub fn from_heads(heads: Heads, cfg: &PipelineConfig) -> Result<Self> {
        let m = Self { heads };
        m.check(cfg)?;
        Ok(m)
    }

    /// Verifies head widths against the configuration.
    pub fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        let shapes = head_shapes(cfg);
        for ((name, mlp), (w, _)) in HEAD_NAMES.iter().zip(self.heads.iter()).zip(shapes.iter()) {
            let got = mlp.widths();
            let ok = if *name == "vote_head" {
                got.first() == w.first() && {
                    let out = mlp.out_width();
                    out == 4 * cfg.num_classes || out == 4 * cfg.num_classes + cfg.feature_dim
                }
            } else {
                got.first() == w.first() && got.last() == w.last()
            };
            if !ok {
                return Err(Error::Checkpoint(format!(
                    "{name} widths {got:?} do not fit the configuration (expected {w:?})"
                )));
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().map(Mlp::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(Mlp::is_finite)
    }
}

/// Normalised per-point encoder inputs: positions to `[-1, 1]`, rcs and
/// radial velocity divided by their scales, aux channels unchanged.
pub fn input_channels(cloud: &PointCloud, cfg: &PipelineConfig) -> Matrix {
    let (lo, hi) = (cfg.mins(), cfg.maxs());
    let w = cfg.raw_channels();
    let mut m = Matrix::zeros(cloud.len(), w);
    for (i, p) in cloud.points.iter().enumerate() {
        let row = m.row_mut(i);
        let pos = p.position();
        for k in 0..3 {
            row[k] = 2.0 * (pos[k] - lo[k]) / (hi[k] - lo[k]) - 1.0;
        }
        row[3] = p.rcs / cfg.rcs_scale;
        row[4] = p.v_r / cfg.velocity_scale;
        for (a, &v) in row[5..].iter_mut().zip(&p.aux) {
            *a = v;
        }
    }
    m
}

/// Logit-query encoder state of one forward pass.
#[derive(Clone, Debug)]
pub struct LqeTrace {
    pub radii: RadiusAssignment,
    pub query: BallQuery,
    pub confidence: Vec<f64>,
    agg: Aggregation,
    fusion: Fusion,
}

/// Everything one forward pass produced, kept for the backward pass and
/// for inspection.
#[derive(Clone, Debug)]
pub struct Trace {
    pub grid: VoxelGrid,
    venc: VoxelEncoding,
    proj: PointProjection,
    pub vote: VoteOutput,
    vote_cache: ForwardCache,
    pub probs: Matrix,
    pub foreground: ForegroundSet,
    pub dense: DenseCloud,
    pub pillars: PillarGrid,
    penc: PillarEncoding,
    pub lqe: Option<LqeTrace>,
    /// Final pillar features, `P x C`.
    pub fused: Matrix,
    pub bev: BevMap,
}

impl Trace {
    /// Discrete choices made by the pass (relu patterns, pooling winners,
    /// selections); equal signatures mean the same smooth branch.
    pub fn signature(&self, heads: &Heads) -> Vec<u64> {
        let mut s = Vec::new();
        let mut bits = |v: Vec<bool>| {
            s.push(v.len() as u64);
            s.extend(v.chunks(64).map(|c| c.iter().enumerate().fold(0u64, |a, (i, &b)| a | (b as u64) << i)));
        };
        bits(self.venc_cache().relu_pattern(&heads.voxel_enc));
        bits(self.proj_cache().relu_pattern(&heads.point_proj));
        bits(self.vote_cache.relu_pattern(&heads.vote_head));
        bits(self.penc.cache().relu_pattern(&heads.pillar_enc));
        s.extend(self.foreground.indices.iter().map(|&i| i as u64));
        s.extend(self.foreground.classes.iter().map(|c| c.0 as u64));
        for p in &self.dense.provenance {
            if let Provenance::Virtual { neighbors, .. } = p {
                s.extend(neighbors.iter().map(|&j| j as u64));
            }
        }
        s.extend(self.pillars.coords.iter().flat_map(|c| [c[0] as u64, c[1] as u64]));
        s.extend(self.penc.argmax().iter().flatten().map(|&r| r as u64));
        if let Some(l) = &self.lqe {
            s.extend(l.query.neighbors.iter().flat_map(|q| std::iter::once(q.len() as u64).chain(q.iter().map(|&j| j as u64))));
            s.extend(l.agg.argmax().iter().flatten().map(|&r| r as u64));
            let mut b = Vec::new();
            b.extend(l.agg.cache().relu_pattern(&heads.lqe_agg));
            b.extend(l.fusion.cache().relu_pattern(&heads.lqe_fusion));
            s.push(b.len() as u64);
            s.extend(b.chunks(64).map(|c| c.iter().enumerate().fold(0u64, |a, (i, &v)| a | (v as u64) << i)));
        }
        s
    }

    fn venc_cache(&self) -> &ForwardCache {
        self.venc.cache()
    }

    fn proj_cache(&self) -> &ForwardCache {
        self.proj.cache()
    }
}

/// Forward pass up to the BEV map.
pub fn forward(model: &Sd4rModel, cloud: &PointCloud, cfg: &PipelineConfig) -> Result<Trace> {
    forward_impl(model, cloud, cfg, None)
}

/// Forward pass that reuses every detached quantity of `base` (dense
/// positions, neighbour weights, foreground set, aggregation confidence),
/// so that its loss is exactly the function the backward pass
/// differentiates.
pub fn forward_detached(model: &Sd4rModel, cloud: &PointCloud, cfg: &PipelineConfig, base: &Trace) -> Result<Trace> {
    forward_impl(model, cloud, cfg, Some(base))
}

fn forward_impl(model: &Sd4rModel, cloud: &PointCloud, cfg: &PipelineConfig, base: Option<&Trace>) -> Result<Trace> {
    let h = &model.heads;
    let channels = input_channels(cloud, cfg);
    let grid = voxelize(cloud, cfg)?;
    let venc = voxel_encode_channels(&grid, &channels, &h.voxel_enc)?;
    let proj = project_points(&grid, &venc.features, cloud, &h.point_proj)?;
    let (vote, vote_cache) = vote_forward_cached(&proj.features, &h.vote_head, cfg.num_classes)?;
    let (probs, foreground, dense) = if let Some(b) = base {
        (softmax_rows(&vote.logits), b.foreground.clone(), b.dense.rebuild(&vote))
    } else if cfg.use_fpg {
        let d = densify_votes(cloud, &vote, cfg)?;
        (d.probs, d.foreground, d.dense)
    } else {
        let probs = softmax_rows(&vote.logits);
        let fg = filter_foreground(&probs, &foreground_confidence(&probs), cfg.tau);
        (probs, fg, DenseCloud::passthrough(cloud, &vote))
    };
    let pillars = pillarize(&dense, cfg, cfg.max_points_per_pillar)?;
    let penc = pillar_encode_cached(&pillars, &h.pillar_enc)?;
    let (lqe, fused) = if cfg.use_lqe && !pillars.is_empty() {
        let radii = adaptive_radius(&class_counts(&pillars), &cfg.radius_weights, cfg.default_radius);
        let query = ball_query(&pillars.centers(cfg), &dense, &radii.radii, &pillars.point_pillar);
        let confidence = match base.and_then(|b| b.lqe.as_ref()) {
            Some(l) => l.confidence.clone(),
            None => dense.confidence(),
        };
        let agg = aggregate_neighbors_cached(&query, &dense.features, &confidence, &h.lqe_agg)?;
        let fusion = fuse_cached(&agg.features, &penc.features, &h.lqe_fusion)?;
        let fused = fusion.features.clone();
        (
            Some(LqeTrace {
                radii,
                query,
                confidence,
                agg,
                fusion,
            }),
            fused,
        )
    } else {
        (None, penc.features.clone())
    };
    let bev = scatter_bev(&fused, &pillars.coords, cfg.bev_dims())?;
    Ok(Trace {
        grid,
        venc,
        proj,
        vote,
        vote_cache,
        probs,
        foreground,
        dense,
        pillars,
        penc,
        lqe,
        fused,
        bev,
    })
}

/// Detection-head rows used by the loss: active cells plus positive cells,
/// then one zero-input row standing for every remaining empty cell.
#[derive(Clone, Debug)]
pub struct DetRows {
    pub head_in: HeadInput,
    pub targets: Vec<Option<BoxTarget>>,
    pub multiplicity: Vec<f64>,
}

pub fn det_rows(bev: &BevMap, boxes: &[ObjectBox], cfg: &PipelineConfig) -> DetRows {
    let (h, w) = bev.dims;
    let mut positives: Vec<([usize; 2], BoxTarget)> = Vec::new();
    for b in boxes {
        let Some(cell) = pillar_of(b.center[0], b.center[1], cfg) else { continue };
        if positives.iter().any(|(c, _)| *c == cell) {
            continue;
        }
        positives.push((
            cell,
            BoxTarget {
                class: b.class.index(),
                residuals: encode_box(b, cell, cfg),
            },
        ));
    }
    let mut cells = active_cells(bev, cfg.context_pool);
    cells.extend(positives.iter().map(|p| p.0));
    cells.sort_unstable_by_key(|c| c[0] * w + c[1]);
    cells.dedup();
    let mut targets: Vec<Option<BoxTarget>> = cells
        .iter()
        .map(|c| positives.iter().find(|p| p.0 == *c).map(|p| p.1))
        .collect();
    let mut head_in = head_input(bev, &cells, cfg.context_pool);
    let rest = (h * w - cells.len()) as f64;
    let mut multiplicity = vec![1.0; cells.len()];
    head_in.input.push_row(&vec![0.0; bev.channels()]);
    targets.push(None);
    multiplicity.push(rest);
    DetRows {
        head_in,
        targets,
        multiplicity,
    }
}

/// Supervision for one scene.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub labels: &'a [ClassId],
    pub centers: &'a [Option<[f64; 3]>],
    pub boxes: &'a [ObjectBox],
}

impl<'a> From<&'a SyntheticScene> for Targets<'a> {
    fn from(s: &'a SyntheticScene) -> Self {
        Targets {
            labels: s.labels(),
            centers: &s.center_targets,
            boxes: &s.boxes,
        }
    }
}

/// Loss of one scene (no gradients).
pub fn scene_loss(model: &Sd4rModel, cloud: &PointCloud, t: Targets, cfg: &PipelineConfig) -> Result<(LossReport, Trace)> {
    let tr = forward(model, cloud, cfg)?;
    loss_of_trace(model, cloud, t, cfg, tr)
}

/// Loss with the detached quantities taken from `base`.
pub fn scene_loss_detached(
    model: &Sd4rModel,
    cloud: &PointCloud,
    t: Targets,
    cfg: &PipelineConfig,
    base: &Trace,
) -> Result<(LossReport, Trace)> {
    let tr = forward_detached(model, cloud, cfg, base)?;
    loss_of_trace(model, cloud, t, cfg, tr)
}

fn loss_of_trace(
    model: &Sd4rModel,
    cloud: &PointCloud,
    t: Targets,
    cfg: &PipelineConfig,
    tr: Trace,
) -> Result<(LossReport, Trace)> {
    let rows = det_rows(&tr.bev, t.boxes, cfg);
    let out = model.heads.det_head.forward(&rows.head_in.input)?;
    let (det, _) = det_loss(&out, &rows.targets, &rows.multiplicity, DetLossParams::default())?;
    let (seg, _) = seg_loss(&tr.vote.logits, t.labels)?;
    let (vote, _) = vote_loss(&cloud.positions(), &tr.vote.offsets, t.labels, t.centers, 1.0)?;
    Ok((total_loss(det, seg, vote, cfg.lambda), tr))
}

/// Loss and parameter gradients of one scene.
pub fn scene_gradients(
    model: &Sd4rModel,
    cloud: &PointCloud,
    t: Targets,
    cfg: &PipelineConfig,
) -> Result<(LossReport, HeadGrads)> {

    let h = &model.heads;
    let tr = forward(model, cloud, cfg)?;
    let n = cloud.len();
    let (d, k) = (tr.vote.feats.cols(), cfg.num_classes);

    // detection head
    let rows = det_rows(&tr.bev, t.boxes, cfg);
    let (out, cache) = h.det_head.forward_cached(&rows.head_in.input)?;
    let (det, d_out) = det_loss(&out, &rows.targets, &rows.multiplicity, DetLossParams::default())?;
    let (g_det, d_in) = h.det_head.backward(&cache, &d_out)?;
    let cells = rows.head_in.cells.len();
    let d_cells = Matrix::from_vec(cells, d_in.cols(), d_in.as_slice()[..cells * d_in.cols()].to_vec())?;
    let d_bev = head_input_backward(&tr.bev, &rows.head_in, &d_cells);
    let mut d_fused = Matrix::zeros(tr.pillars.len(), tr.fused.cols());
    for (p, &c) in tr.pillars.coords.iter().enumerate() {
        if let Some(r) = tr.bev.slot(c) {
            d_fused.row_mut(p).copy_from_slice(d_bev.row(r));
        }
    }

    // logit-query encoder and pillar encoder
    let mut g_agg = Gradients::zeros_like(&h.lqe_agg);
    let mut g_fus = Gradients::zeros_like(&h.lqe_fusion);
    let mut d_dense_feat = Matrix::zeros(tr.dense.len(), d);
    let d_pillar = if let Some(l) = &tr.lqe {
        let (gf, d_point, d_pillar) = fuse_backward(&h.lqe_fusion, &l.fusion, &d_fused)?;
        let (ga, d_nb) = aggregate_backward(&h.lqe_agg, &l.agg, &d_point, tr.dense.len())?;
        g_fus = gf;
        g_agg = ga;
        d_dense_feat.add_assign(&d_nb);
        d_pillar
    } else {
        d_fused
    };
    let (g_penc, d_tensor) = pillar_encode_backward(&tr.pillars, &h.pillar_enc, &tr.penc, &d_pillar)?;
    let (d_slot_feat, d_slot_logit) = pillarize_backward(&tr.pillars, &d_tensor, tr.dense.len());
    d_dense_feat.add_assign(&d_slot_feat);

    // dense cloud back onto the raw points
    let mut d_feat = Matrix::zeros(n, d);
    let mut d_logits = Matrix::zeros(n, k);
    for (r, prov) in tr.dense.provenance.iter().enumerate() {
        match prov {
            Provenance::Original(i) => {
                add_row(&mut d_feat, *i, d_dense_feat.row(r), 1.0);
                add_row(&mut d_logits, *i, d_slot_logit.row(r), 1.0);
            }
            Provenance::Virtual {
                source,
                neighbors,
                weights,
            } => {
                for (&j, &w) in neighbors.iter().zip(weights) {
                    add_row(&mut d_feat, j, d_dense_feat.row(r), w);
                }
                add_row(&mut d_logits, *source, d_slot_logit.row(r), 1.0);
            }
            Provenance::External => {}
        }
    }

    // segmentation and vote losses on the vote head
    let (seg, d_seg) = seg_loss(&tr.vote.logits, t.labels)?;
    let (vote, mut d_off) = vote_loss(&cloud.positions(), &tr.vote.offsets, t.labels, t.centers, 1.0)?;
    let mut d_seg = d_seg;
    d_seg.scale(cfg.lambda);
    d_off.scale(cfg.lambda);
    d_logits.add_assign(&d_seg);
    let feats_from_head = h.vote_head.out_width() == 4 * k + d;
    let mut d_head_out = d_logits.hstack(&d_off)?;
    if feats_from_head {
        d_head_out = d_head_out.hstack(&d_feat)?;
    }
    let (g_vote, d_pf_head) = h.vote_head.backward(&tr.vote_cache, &d_head_out)?;
    let mut d_pf = d_pf_head;
    if !feats_from_head {
        d_pf.add_assign(&d_feat);
    }

    // point projection and voxel encoder
    let (g_proj, d_vox) = project_points_backward(&tr.grid, &h.point_proj, &tr.proj, &d_pf)?;
    let g_venc = voxel_encode_backward(&h.voxel_enc, &tr.venc, &d_vox)?;

    let report = total_loss(det, seg, vote, cfg.lambda);
    let grads = HeadSet {
        voxel_enc: g_venc,
        point_proj: g_proj,
        vote_head: g_vote,
        pillar_enc: g_penc,
        lqe_agg: g_agg,
        lqe_fusion: g_fus,
        det_head: g_det,
    };
    Ok((report, grads))
}

fn add_row(m: &mut Matrix, i: usize, src: &[f64], w: f64) {
    for (a, &v) in m.row_mut(i).iter_mut().zip(src) {
        *a += w * v;
    }
}

/// Model plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Sd4rModel,
    pub velocity: HeadGrads,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean over the epoch's scenes.
    pub loss: LossReport,
}

/// Salt separating the shuffle streams from the scene streams.
const SHUFFLE_SEED: u64 = 0x5eed_5eed;

impl Trainer {
    pub fn new(model: Sd4rModel) -> Self {
        let velocity = HeadGrads::zeros(&model.heads);
        Self {
            model,
            velocity,
            epoch: 0,
        }
    }

    /// One SGD step on the mean gradient of `batch`. Per-scene passes run
    /// in parallel; their results are summed in batch order.
    pub fn step(&mut self, batch: &[&SyntheticScene], cfg: &PipelineConfig) -> Result<LossReport> {
        let results: Vec<Result<(LossReport, HeadGrads)>> = batch
            .par_iter()
            .map(|s| scene_gradients(&self.model, &s.cloud, Targets::from(*s), cfg))
            .collect();
        let mut grads = HeadGrads::zeros(&self.model.heads);
        let mut loss = LossReport::default();
        for r in results {
            let (l, g) = r?;
            loss.accumulate(&l);
            grads.add_assign(&g);
        }
        let s = 1.0 / batch.len() as f64;
        grads.scale(s);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("loss or gradient at epoch {}", self.epoch)));
        }
        for (m, (g, v)) in self
            .model
            .heads
            .iter_mut()
            .zip(grads.iter().zip(self.velocity.iter_mut()))
        {
            sgd_step(m, g, v, cfg.learning_rate, cfg.momentum)?;
        }
        Ok(loss)
    }

    /// One pass over `scenes` in an order fixed by `(seed, epoch)`.
    pub fn run_epoch(&mut self, scenes: &[SyntheticScene], cfg: &PipelineConfig) -> Result<EpochReport> {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut scene_rng(cfg.seed ^ SHUFFLE_SEED, self.epoch as u64));
        let mut total = LossReport::default();
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&SyntheticScene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let l = self.step(&batch, cfg)?;
            total.accumulate(&l);
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch: self.epoch,
            loss: total.scaled(1.0 / scenes.len().max(1) as f64),
        })
    }

    /// Runs until `epochs` epochs are complete in total.
    pub fn train_until(
        &mut self,
        scenes: &[SyntheticScene],
        cfg: &PipelineConfig,
        epochs: usize,
        mut on_epoch: impl FnMut(&EpochReport),
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while self.epoch < epochs {
            let r = self.run_epoch(scenes, cfg)?;
            on_epoch(&r);
            reports.push(r);
        }
        Ok(reports)
    }
}

/// Inference result for one cloud.
#[derive(Clone, Debug)]
pub struct Inference {
    pub trace: Trace,
    pub detections: Vec<Detection>,
}

/// Crops to the bounds, runs the network and decodes detections.
pub fn infer(model: &Sd4rModel, cloud: &PointCloud, cfg: &PipelineConfig) -> Result<Inference> {
    let cropped = crop_to_bounds(cloud, cfg);
    let trace = forward(model, &cropped, cfg)?;
    let detections = detect_from_bev(model, &trace.bev, cfg)?;
    Ok(Inference { trace, detections })
}

pub fn detect_from_bev(model: &Sd4rModel, bev: &BevMap, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    let cells = active_cells(bev, cfg.context_pool);
    let hi = head_input(bev, &cells, cfg.context_pool);
    let out = model.heads.det_head.forward(&hi.input)?;
    Ok(decode_detections(&out, &cells, cfg))
}

/// Pillar-path detection on an already densified cloud.
pub fn detect_dense(model: &Sd4rModel, dense: &DenseCloud, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    let h = &model.heads;
    let pillars = pillarize(dense, cfg, cfg.max_points_per_pillar)?;
    let penc = pillar_encode_cached(&pillars, &h.pillar_enc)?;
    let fused = if cfg.use_lqe && !pillars.is_empty() {
        let radii = adaptive_radius(&class_counts(&pillars), &cfg.radius_weights, cfg.default_radius);
        let query = ball_query(&pillars.centers(cfg), dense, &radii.radii, &pillars.point_pillar);
        let agg = aggregate_neighbors_cached(&query, &dense.features, &dense.confidence(), &h.lqe_agg)?;
        fuse_cached(&agg.features, &penc.features, &h.lqe_fusion)?.features
    } else {
        penc.features
    };
    let bev = scatter_bev(&fused, &pillars.coords, cfg.bev_dims())?;
    detect_from_bev(model, &bev, cfg)
}

/// Per-scene evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub index: u64,
    pub detections: usize,
    pub gt_boxes: usize,
    pub dense_points: usize,
    pub virtual_points: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Per-point argmax accuracy over all `K` classes.
    pub accuracy: f64,
    pub scenes: Vec<SceneEval>,
}

/// Runs the model over labelled scenes and scores everything.
pub fn evaluate_model(
    model: &Sd4rModel,
    scenes: &[SyntheticScene],
    cfg: &PipelineConfig,
    region: EvalRegion,
) -> Result<Evaluation> {
    type PerScene = (Vec<Detection>, DensifyTally, usize, usize, SceneEval);
    let per: Vec<Result<PerScene>> = scenes
        .par_iter()
        .map(|s| {
            let inf = infer(model, &s.cloud, cfg)?;
            let tally = densify_tally(&inf.trace.dense, &s.cloud, &s.boxes, cfg.num_classes);
            let labels = s.labels();
            let acc = classification_accuracy(&inf.trace.vote.logits, labels);
            let hits = (acc * labels.len() as f64).round() as usize;
            let rec = SceneEval {
                index: s.index,
                detections: inf.detections.len(),
                gt_boxes: s.boxes.len(),
                dense_points: inf.trace.dense.len(),
                virtual_points: inf.trace.dense.virtual_count(),
                accuracy: acc,
            };
            Ok((inf.detections, tally, hits, labels.len(), rec))
        })
        .collect();
    let mut pairs = Vec::with_capacity(scenes.len());
    let mut tally = DensifyTally::default();
    let (mut hits, mut total) = (0, 0);
    let mut recs = Vec::with_capacity(scenes.len());
    for (r, s) in per.into_iter().zip(scenes) {
        let (dets, t, h, n, rec) = r?;
        pairs.push((dets, s.boxes.clone()));
        tally.add(&t);
        hits += h;
        total += n;
        recs.push(rec);
    }
    let det = detection_metrics(&pairs, region, cfg.num_classes);
    Ok(Evaluation {
        report: MetricReport::new(det, region, Some(tally.finish())),
        accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        scenes: recs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// (pedestrian, cyclist, car) radii.
    pub weights: Vec<f64>,
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// The ten radius triples of the reference ablation.
pub const RADIUS_GRID: [[f64; 3]; 10] = [
    [0.2, 0.2, 0.2],
    [0.3, 0.3, 0.3],
    [0.4, 0.4, 0.4],
    [0.1, 0.3, 0.3],
    [0.2, 0.3, 0.3],
    [0.3, 0.2, 0.3],
    [0.3, 0.4, 0.3],
    [0.3, 0.3, 0.4],
    [0.3, 0.3, 0.5],
    [0.2, 0.3, 0.4],
];

/// Re-evaluates a trained model with each radius triple in turn.
pub fn ablate_radius(
    model: &Sd4rModel,
    scenes: &[SyntheticScene],
    cfg: &PipelineConfig,
    grid: &[Vec<f64>],
    region: EvalRegion,
) -> Result<Vec<AblationRow>> {
    grid.iter()
        .map(|w| {
            let mut c = cfg.clone();
            c.radius_weights = w.clone();
            let e = evaluate_model(model, scenes, &c, region)?;
            Ok(AblationRow {
                weights: w.clone(),
                per_class: e.report.per_class.iter().map(|a| a.ap).collect(),
                map: e.report.map,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneParams};

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            feature_dim: 6,
            hidden_dim: 8,
            pillar_channels: 6,
            ..Default::default()
        }
    }

    #[test]
    fn head_shapes_chain() {
        let cfg = small_cfg();
        let m = Sd4rModel::init(&cfg, 1);
        m.check(&cfg).unwrap();
        assert_eq!(m.heads.pillar_enc.in_width(), 3 + 6 + 4 + 5);
        assert_eq!(m.heads.det_head.out_width(), 12);
        let mut other = cfg.clone();
        other.feature_dim = 7;
        assert!(m.check(&other).is_err());
    }

    #[test]
    fn headset_round_trips_through_vec() {
        let m = Sd4rModel::init(&small_cfg(), 2);
        let v: Vec<Mlp> = m.heads.iter().cloned().collect();
        assert_eq!(HeadSet::from_vec(v).unwrap(), m.heads);
        assert_eq!(m.heads.get("det_head"), Some(&m.heads.det_head));
    }

    #[test]
    fn forward_runs_on_a_scene() {
        let cfg = small_cfg();
        let s = generate_scene(&SceneParams::default(), &cfg, 0).unwrap();
        let m = Sd4rModel::init(&cfg, 3);
        let (loss, tr) = scene_loss(&m, &s.cloud, Targets::from(&s), &cfg).unwrap();
        assert!(loss.is_finite() && loss.total > 0.0);
        assert_eq!(tr.vote.logits.rows(), s.cloud.len());
        let (l2, g) = scene_gradients(&m, &s.cloud, Targets::from(&s), &cfg).unwrap();
        assert_eq!(loss, l2);
        assert!(g.is_finite());
        assert!(g.det_head.sq_norm() > 0.0 && g.voxel_enc.sq_norm() > 0.0);
    }

    #[test]
    fn baseline_passes_every_point() {
        let mut cfg = small_cfg();
        cfg.use_fpg = false;
        cfg.use_lqe = false;
        let s = generate_scene(&SceneParams::default(), &cfg, 1).unwrap();
        let m = Sd4rModel::init(&cfg, 3);
        let tr = forward(&m, &s.cloud, &cfg).unwrap();
        assert_eq!(tr.dense.len(), s.cloud.len());
        assert!(tr.lqe.is_none());
        assert_eq!(tr.fused, tr.penc.features);
    }

    #[test]
    fn det_rows_cover_every_cell_once() {
        let cfg = small_cfg();
        let s = generate_scene(&SceneParams::default(), &cfg, 2).unwrap();
        let m = Sd4rModel::init(&cfg, 3);
        let tr = forward(&m, &s.cloud, &cfg).unwrap();
        let rows = det_rows(&tr.bev, &s.boxes, &cfg);
        let (h, w) = cfg.bev_dims();
        assert_eq!(rows.multiplicity.iter().sum::<f64>(), (h * w) as f64);
        assert_eq!(rows.targets.iter().filter(|t| t.is_some()).count(), s.boxes.len());
    }
}
