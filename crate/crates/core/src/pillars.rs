//! Logits-aware pillarization, pillar encoding, BEV scatter and the
//! per-cell detection head.
//!
//! Pillar slot channels, in order: normalised `x, y, z`, the `d` point
//! features, the `K` logits, the offset from the pillar centre (`dx, dy`,
//! in pillar units) and the offset from the pillar point-mean
//! (`dx, dy` in pillar units, `dz` over half the z extent).

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::bev_iou;
use crate::fpg::DenseCloud;
use crate::nn::{sigmoid, ForwardCache, Gradients, Mlp};
use crate::tensor::Matrix;
use crate::types::{ClassId, ObjectBox};

/// Column layout of a pillar slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelLayout {
    pub feat_dim: usize,
    pub num_classes: usize,
}

impl ChannelLayout {
    pub const GEOMETRY: usize = 5;

    pub fn width(&self) -> usize {
        3 + self.feat_dim + self.num_classes + Self::GEOMETRY
    }

    pub fn features(&self) -> Range<usize> {
        3..3 + self.feat_dim
    }

    pub fn logits(&self) -> Range<usize> {
        3 + self.feat_dim..3 + self.feat_dim + self.num_classes
    }

    pub fn geometry(&self) -> Range<usize> {
        let s = 3 + self.feat_dim + self.num_classes;
        s..s + Self::GEOMETRY
    }
}

/// Non-empty pillars with a zero-padded `P x N x D` slot tensor, stored as
/// `P * N` rows of width `D` (row `p * N + s` is slot `s` of pillar `p`).
#[derive(Clone, Debug, PartialEq)]
pub struct PillarGrid {
    pub layout: ChannelLayout,
    /// Slot capacity `N`.
    pub cap: usize,
    pub tensor: Matrix,
    /// `(ix, iy)` per pillar, ascending in `ix * W + iy`.
    pub coords: Vec<[usize; 2]>,
    /// Kept dense-point indices per pillar, in input order.
    pub members: Vec<Vec<usize>>,
    /// Pillar whose cell contains each dense point (including dropped ones).
    pub point_pillar: Vec<usize>,
    /// Points dropped by the slot cap, over all pillars.
    pub dropped: usize,
    pub bev_dims: (usize, usize),
}

impl PillarGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Slot row of pillar `p`, slot `s`.
    pub fn slot(&self, p: usize, s: usize) -> &[f64] {
        self.tensor.row(p * self.cap + s)
    }

    /// Geometric BEV centre of every pillar.
    pub fn centers(&self, cfg: &PipelineConfig) -> Vec<[f64; 2]> {
        self.coords.iter().map(|&c| pillar_center(c, cfg)).collect()
    }
}

pub fn pillar_center(c: [usize; 2], cfg: &PipelineConfig) -> [f64; 2] {
    [
        cfg.x_min + (c[0] as f64 + 0.5) * cfg.pillar_size,
        cfg.y_min + (c[1] as f64 + 0.5) * cfg.pillar_size,
    ]
}

/// BEV cell of a position; half-open cells, clamped at the far edge.
pub fn pillar_of(x: f64, y: f64, cfg: &PipelineConfig) -> Option<[usize; 2]> {
    let (h, w) = cfg.bev_dims();
    let fx = ((x - cfg.x_min) / cfg.pillar_size).floor();
    let fy = ((y - cfg.y_min) / cfg.pillar_size).floor();
    if !(fx >= 0.0 && fy >= 0.0) || x >= cfg.x_max || y >= cfg.y_max {
        return None;
    }
    Some([(fx as usize).min(h - 1), (fy as usize).min(w - 1)])
}

/// Groups the dense cloud into pillars and builds slot channels.
pub fn pillarize(dense: &DenseCloud, cfg: &PipelineConfig, cap: usize) -> Result<PillarGrid> {
    let layout = ChannelLayout {
        feat_dim: dense.features.cols(),
        num_classes: dense.logits.cols(),
    };
    let (h, w) = cfg.bev_dims();
    let mut cell_of = Vec::with_capacity(dense.len());
    for (i, p) in dense.points.iter().enumerate() {
        if !(p.z >= cfg.z_min && p.z < cfg.z_max) {
            return Err(Error::OutOfBounds { index: i, x: p.x, y: p.y, z: p.z });
        }
        let c = pillar_of(p.x, p.y, cfg).ok_or(Error::OutOfBounds { index: i, x: p.x, y: p.y, z: p.z })?;
        cell_of.push(c[0] * w + c[1]);
    }
    let mut keys: Vec<usize> = cell_of.clone();
    keys.sort_unstable();
    keys.dedup();
    let slot_of: HashMap<usize, usize> = keys.iter().enumerate().map(|(s, &k)| (k, s)).collect();
    let coords: Vec<[usize; 2]> = keys.iter().map(|&k| [k / w, k % w]).collect();

    let mut members = vec![Vec::new(); keys.len()];
    let mut point_pillar = Vec::with_capacity(dense.len());
    let mut dropped = 0;
    for (i, k) in cell_of.iter().enumerate() {
        let p = slot_of[k];
        point_pillar.push(p);
        if members[p].len() < cap {
            members[p].push(i);
        } else {
            dropped += 1;
        }
    }

    let d_w = layout.width();
    let mut tensor = Matrix::zeros(keys.len() * cap, d_w);
    let span = [cfg.x_max - cfg.x_min, cfg.y_max - cfg.y_min, cfg.z_max - cfg.z_min];
    let mins = cfg.mins();
    for (p, m) in members.iter().enumerate() {
        let n = m.len() as f64;
        let mut mean = [0.0; 3];
        for &i in m {
            let pos = dense.points[i].position();
            for k in 0..3 {
                mean[k] += pos[k];
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let centre = pillar_center(coords[p], cfg);
        for (s, &i) in m.iter().enumerate() {
            let pos = dense.points[i].position();
            let row = tensor.row_mut(p * cap + s);
            for k in 0..3 {
                row[k] = 2.0 * (pos[k] - mins[k]) / span[k] - 1.0;
            }
            row[layout.features()].copy_from_slice(dense.features.row(i));
            row[layout.logits()].copy_from_slice(dense.logits.row(i));
            let g = layout.geometry().start;
            row[g] = (pos[0] - centre[0]) / cfg.pillar_size;
            row[g + 1] = (pos[1] - centre[1]) / cfg.pillar_size;
            row[g + 2] = (pos[0] - mean[0]) / cfg.pillar_size;
            row[g + 3] = (pos[1] - mean[1]) / cfg.pillar_size;
            row[g + 4] = 2.0 * (pos[2] - mean[2]) / span[2];
        }
    }
    Ok(PillarGrid {
        layout,
        cap,
        tensor,
        coords,
        members,
        point_pillar,
        dropped,
        bev_dims: (h, w),
    })
}

/// Routes `dL/d(slot tensor)` back to the dense feature and logit rows.
pub fn pillarize_backward(grid: &PillarGrid, d_tensor: &Matrix, num_dense: usize) -> (Matrix, Matrix) {
    let l = grid.layout;
    let mut d_feat = Matrix::zeros(num_dense, l.feat_dim);
    let mut d_logit = Matrix::zeros(num_dense, l.num_classes);
    for (p, m) in grid.members.iter().enumerate() {
        for (s, &i) in m.iter().enumerate() {
            let row = d_tensor.row(p * grid.cap + s);
            for (a, &g) in d_feat.row_mut(i).iter_mut().zip(&row[l.features()]) {
                *a += g;
            }
            for (a, &g) in d_logit.row_mut(i).iter_mut().zip(&row[l.logits()]) {
                *a += g;
            }
        }
    }
    (d_feat, d_logit)
}

/// Encoded pillars plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct PillarEncoding {
    /// `P x C`.
    pub features: Matrix,
    /// Occupied slot rows, in pillar-major order.
    rows: Vec<usize>,
    /// For each pillar and channel, the index into `rows` that won the max.
    argmax: Vec<Vec<usize>>,
    cache: ForwardCache,
}

impl PillarEncoding {
    /// Which slot won the max-pool, per pillar and channel.
    pub fn argmax(&self) -> &[Vec<usize>] {
        &self.argmax
    }

    pub fn cache(&self) -> &ForwardCache {
        &self.cache
    }
}

/// Per-point perceptron then masked max-pool over the slot axis.
pub fn pillar_encode(grid: &PillarGrid, enc: &Mlp) -> Result<Matrix> {
    Ok(pillar_encode_cached(grid, enc)?.features)
}

pub fn pillar_encode_cached(grid: &PillarGrid, enc: &Mlp) -> Result<PillarEncoding> {
    if enc.in_width() != grid.layout.width() {
        return Err(Error::WidthMismatch {
            context: "pillar encoder input",
            expected: enc.in_width(),
            got: grid.layout.width(),
        });
    }
    let rows: Vec<usize> = grid
        .members
        .iter()
        .enumerate()
        .flat_map(|(p, m)| (0..m.len()).map(move |s| p * grid.cap + s))
        .collect();
    let input = grid.tensor.select_rows(&rows);
    let (out, cache) = enc.forward_cached(&input)?;
    let (features, argmax) = segment_max(&out, grid.members.iter().map(Vec::len));
    Ok(PillarEncoding {
        features,
        rows,
        argmax,
        cache,
    })
}

/// Max over consecutive row segments; ties keep the first row. Empty
/// segments pool to zero with no winner.
pub(crate) fn segment_max(out: &Matrix, lens: impl Iterator<Item = usize>) -> (Matrix, Vec<Vec<usize>>) {
    let lens: Vec<usize> = lens.collect();
    let c = out.cols();
    let mut pooled = Matrix::zeros(lens.len(), c);
    let mut argmax = Vec::with_capacity(lens.len());
    let mut start = 0;
    for (p, &n) in lens.iter().enumerate() {
        if n == 0 {
            argmax.push(Vec::new());
            continue;
        }
        let mut best = vec![start; c];
        for r in start + 1..start + n {
            let row = out.row(r);
            for ch in 0..c {
                if row[ch] > out[(best[ch], ch)] {
                    best[ch] = r;
                }
            }
        }
        for ch in 0..c {
            pooled[(p, ch)] = out[(best[ch], ch)];
        }
        argmax.push(best);
        start += n;
    }
    (pooled, argmax)
}

/// Scatters `dL/dpooled` to the winning rows of [`segment_max`].
pub(crate) fn segment_max_backward(argmax: &[Vec<usize>], d_pooled: &Matrix, rows: usize) -> Matrix {
    let mut d = Matrix::zeros(rows, d_pooled.cols());
    for (p, best) in argmax.iter().enumerate() {
        for (ch, &r) in best.iter().enumerate() {
            d[(r, ch)] += d_pooled[(p, ch)];
        }
    }
    d
}

/// Encoder gradients and `dL/d(slot tensor)` for `dL/d(pillar features)`.
pub fn pillar_encode_backward(
    grid: &PillarGrid,
    enc: &Mlp,
    encoding: &PillarEncoding,
    d_features: &Matrix,
) -> Result<(Gradients, Matrix)> {
    let d_out = segment_max_backward(&encoding.argmax, d_features, encoding.rows.len());
    let (g, d_in) = enc.backward(&encoding.cache, &d_out)?;
    let mut d_tensor = Matrix::zeros(grid.tensor.rows(), grid.tensor.cols());
    for (k, &r) in encoding.rows.iter().enumerate() {
        d_tensor.row_mut(r).copy_from_slice(d_in.row(k));
    }
    Ok((g, d_tensor))
}

/// Sparse `C x H x W` BEV map; unoccupied cells read as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BevMap {
    pub dims: (usize, usize),
    /// Occupied cells, ascending by linear index.
    pub cells: Vec<[usize; 2]>,
    /// `P x C`, row `i` belongs to `cells[i]`.
    pub values: Matrix,
    lookup: HashMap<usize, usize>,
}

impl BevMap {
    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn linear(&self, c: [usize; 2]) -> usize {
        c[0] * self.dims.1 + c[1]
    }

    pub fn get(&self, c: [usize; 2]) -> Option<&[f64]> {
        self.lookup.get(&self.linear(c)).map(|&r| self.values.row(r))
    }

    pub fn value(&self, c: [usize; 2], ch: usize) -> f64 {
        self.get(c).map_or(0.0, |r| r[ch])
    }

    /// Row of `values` that holds cell `c`.
    pub fn slot(&self, c: [usize; 2]) -> Option<usize> {
        self.lookup.get(&self.linear(c)).copied()
    }

    pub fn nonzero_cells(&self) -> usize {
        self.values.iter_rows().filter(|r| r.iter().any(|&v| v != 0.0)).count()
    }
}

/// Places pillar `i`'s feature vector at cell `coords[i]`.
pub fn scatter_bev(feats: &Matrix, coords: &[[usize; 2]], dims: (usize, usize)) -> Result<BevMap> {
    if feats.rows() != coords.len() {
        return Err(Error::Shape(format!("{} feature rows for {} coords", feats.rows(), coords.len())));
    }
    let mut order: Vec<usize> = (0..coords.len()).collect();
    for (i, c) in coords.iter().enumerate() {
        if c[0] >= dims.0 || c[1] >= dims.1 {
            return Err(Error::Shape(format!("pillar {i} at {c:?} outside {dims:?}")));
        }
    }
    order.sort_by_key(|&i| coords[i][0] * dims.1 + coords[i][1]);
    for w in order.windows(2) {
        if coords[w[0]] == coords[w[1]] {
            return Err(Error::DuplicateCoords(w[0].min(w[1]), w[0].max(w[1])));
        }
    }
    let cells: Vec<[usize; 2]> = order.iter().map(|&i| coords[i]).collect();
    let values = feats.select_rows(&order);
    let lookup = cells.iter().enumerate().map(|(r, c)| (c[0] * dims.1 + c[1], r)).collect();
    Ok(BevMap {
        dims,
        cells,
        values,
        lookup,
    })
}

/// Reads the feature vectors at `coords` (zero for empty cells).
pub fn gather_bev(bev: &BevMap, coords: &[[usize; 2]]) -> Matrix {
    let mut out = Matrix::zeros(coords.len(), bev.channels());
    for (i, &c) in coords.iter().enumerate() {
        if let Some(r) = bev.get(c) {
            out.row_mut(i).copy_from_slice(r);
        }
    }
    out
}

/// Per-cell head inputs for a chosen set of cells.
#[derive(Clone, Debug)]
pub struct HeadInput {
    pub cells: Vec<[usize; 2]>,
    /// `cells.len() x C`.
    pub input: Matrix,
    pub context_pool: bool,
}

/// Cells whose head input can be non-zero: occupied cells, plus their
/// 3x3 neighbourhood when context pooling is on. Ascending linear order.
pub fn active_cells(bev: &BevMap, context_pool: bool) -> Vec<[usize; 2]> {
    if !context_pool {
        return bev.cells.clone();
    }
    let (h, w) = bev.dims;
    let mut keys: Vec<usize> = Vec::with_capacity(bev.cells.len() * 9);
    for c in &bev.cells {
        for x in c[0].saturating_sub(1)..=(c[0] + 1).min(h - 1) {
            for y in c[1].saturating_sub(1)..=(c[1] + 1).min(w - 1) {
                keys.push(x * w + y);
            }
        }
    }
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter().map(|k| [k / w, k % w]).collect()
}

/// Head input rows: the cell feature, or its zero-padded 3x3 mean.
pub fn head_input(bev: &BevMap, cells: &[[usize; 2]], context_pool: bool) -> HeadInput {
    let c = bev.channels();
    let mut input = Matrix::zeros(cells.len(), c);
    for (i, &cell) in cells.iter().enumerate() {
        if context_pool {
            let row = input.row_mut(i);
            for_neighbourhood(bev.dims, cell, |n| {
                if let Some(src) = bev.get(n) {
                    for (a, &v) in row.iter_mut().zip(src) {
                        *a += v;
                    }
                }
            });
            row.iter_mut().for_each(|a| *a /= 9.0);
        } else if let Some(src) = bev.get(cell) {
            input.row_mut(i).copy_from_slice(src);
        }
    }
    HeadInput {
        cells: cells.to_vec(),
        input,
        context_pool,
    }
}

/// `dL/d(bev values)` from `dL/d(head input)`.
pub fn head_input_backward(bev: &BevMap, hi: &HeadInput, d_input: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(bev.values.rows(), bev.channels());
    for (i, &cell) in hi.cells.iter().enumerate() {
        let g = d_input.row(i);
        if hi.context_pool {
            for_neighbourhood(bev.dims, cell, |n| {
                if let Some(r) = bev.slot(n) {
                    for (a, &v) in d.row_mut(r).iter_mut().zip(g) {
                        *a += v / 9.0;
                    }
                }
            });
        } else if let Some(r) = bev.slot(cell) {
            for (a, &v) in d.row_mut(r).iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    d
}

fn for_neighbourhood(dims: (usize, usize), c: [usize; 2], mut f: impl FnMut([usize; 2])) {
    for x in c[0].saturating_sub(1)..=(c[0] + 1).min(dims.0 - 1) {
        for y in c[1].saturating_sub(1)..=(c[1] + 1).min(dims.1 - 1) {
            f([x, y]);
        }
    }
}

/// Head output width for `num_classes` (background included).
pub fn head_output_width(num_classes: usize) -> usize {
    1 + (num_classes - 1) + 8
}

/// Encodes a box as residuals against the centre of `cell`.
pub fn encode_box(b: &ObjectBox, cell: [usize; 2], cfg: &PipelineConfig) -> [f64; 8] {
    let c = pillar_center(cell, cfg);
    [
        (b.center[0] - c[0]) / cfg.pillar_size,
        (b.center[1] - c[1]) / cfg.pillar_size,
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// Inverse of [`encode_box`]; `(sin, cos)` is renormalised through atan2.
pub fn decode_box(res: &[f64], cell: [usize; 2], class: ClassId, cfg: &PipelineConfig) -> ObjectBox {
    let c = pillar_center(cell, cfg);
    // log sizes clamped so a wild head cannot produce infinite boxes
    let size = |v: f64| v.clamp(-6.0, 4.0).exp();
    ObjectBox::new(
        [c[0] + res[0] * cfg.pillar_size, c[1] + res[1] * cfg.pillar_size, res[2]],
        [size(res[3]), size(res[4]), size(res[5])],
        res[6].atan2(res[7]),
        class,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub object: ObjectBox,
    pub score: f64,
}

/// Decodes head outputs for `cells` into scored boxes above the threshold,
/// then applies greedy BEV NMS.
pub fn decode_detections(outputs: &Matrix, cells: &[[usize; 2]], cfg: &PipelineConfig) -> Vec<Detection> {
    let k = cfg.num_classes;
    let w = cfg.bev_dims().1;
    let mut cand: Vec<(usize, Detection)> = Vec::new();
    for (row, &cell) in outputs.iter_rows().zip(cells) {
        let score = sigmoid(row[0]);
        if !(score > cfg.score_threshold) {
            continue;
        }
        let cls = &row[1..k];
        let mut best = 0;
        for c in 1..cls.len() {
            if cls[c] > cls[best] {
                best = c;
            }
        }
        let object = decode_box(&row[k..k + 8], cell, ClassId(best), cfg);
        cand.push((cell[0] * w + cell[1], Detection { object, score }));
    }
    cand.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    nms(cand.into_iter().map(|c| c.1).collect(), cfg.nms_iou, cfg.max_detections)
}

/// Greedy class-agnostic NMS over detections already in priority order.
pub fn nms(sorted: Vec<Detection>, iou: f64, max_keep: usize) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.len() >= max_keep {
            break;
        }
        if kept.iter().all(|k| bev_iou(&k.object, &d.object) <= iou) {
            kept.push(d);
        }
    }
    kept
}

/// Runs the head over the active cells of `bev` and decodes detections.
pub fn detect_head(bev: &BevMap, head: &Mlp, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    if head.out_width() != head_output_width(cfg.num_classes) {
        return Err(Error::WidthMismatch {
            context: "detection head output",
            expected: head_output_width(cfg.num_classes),
            got: head.out_width(),
        });
    }
    if head.in_width() != bev.channels() {
        return Err(Error::WidthMismatch {
            context: "detection head input",
            expected: head.in_width(),
            got: bev.channels(),
        });
    }
    let cells = active_cells(bev, cfg.context_pool);
    let hi = head_input(bev, &cells, cfg.context_pool);
    let out = head.forward(&hi.input)?;
    Ok(decode_detections(&out, &cells, cfg))
}
