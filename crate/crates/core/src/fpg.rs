//! Foreground point generator.
//!
//! Per point the vote head predicts `K` class logits and `3K` class-wise
//! centre offsets. Points whose foreground confidence `1 - P(background)`
//! exceeds `tau` are kept; each kept point spawns one virtual point at
//! `p + offset[class]`, whose feature is an inverse-distance blend of the
//! features of its `k` nearest raw points. The dense cloud is the kept
//! originals followed by their virtual points.

use crate::config::{KnnPool, PipelineConfig};
use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, ForwardCache, Mlp};
use crate::spatial::{knn_grid, Neighbors};
use crate::tensor::Matrix;
use crate::types::{ClassId, PointCloud, RadarPoint};
use crate::voxel::PointFeatures;

#[derive(Clone, Debug, PartialEq)]
pub struct VoteOutput {
    /// `N x K`.
    pub logits: Matrix,
    /// `N x 3K`, metres, three columns per class.
    pub offsets: Matrix,
    /// `N x d` point-wise features carried alongside the votes.
    pub feats: Matrix,
}

impl VoteOutput {
    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.rows() == 0
    }

    /// Offset slice of `class` for point `i`.
    pub fn offset(&self, i: usize, class: ClassId) -> [f64; 3] {
        let b = 3 * class.index();
        [self.offsets[(i, b)], self.offsets[(i, b + 1)], self.offsets[(i, b + 2)]]
    }
}

/// Runs the vote head. Its output is `K` logits then `3K` offsets,
/// optionally followed by `d` replacement features; otherwise the input
/// features are passed through.
pub fn vote_forward(feats: &PointFeatures, head: &Mlp, num_classes: usize) -> Result<VoteOutput> {
    Ok(vote_forward_cached(feats, head, num_classes)?.0)
}

pub fn vote_forward_cached(
    feats: &PointFeatures,
    head: &Mlp,
    num_classes: usize,
) -> Result<(VoteOutput, ForwardCache)> {
    let k = num_classes;
    let d = feats.0.cols();
    let out_w = head.out_width();
    if out_w != 4 * k && out_w != 4 * k + d {
        return Err(Error::WidthMismatch {
            context: "vote head output",
            expected: 4 * k,
            got: out_w,
        });
    }
    let (out, cache) = head.forward_cached(&feats.0)?;
    let logits = out.columns(0, k);
    let offsets = out.columns(k, 4 * k);
    let feats = if out_w == 4 * k {
        feats.0.clone()
    } else {
        out.columns(4 * k, out_w)
    };
    Ok((
        VoteOutput {
            logits,
            offsets,
            feats,
        },
        cache,
    ))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        softmax_in_place(p.row_mut(i));
    }
    p
}

/// `pi_i = 1 - P(background)`, background being the last column.
pub fn foreground_confidence(probs: &Matrix) -> Vec<f64> {
    let bg = probs.cols() - 1;
    probs.iter_rows().map(|r| (1.0 - r[bg]).clamp(0.0, 1.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ForegroundSet {
    pub indices: Vec<usize>,
    pub classes: Vec<ClassId>,
    pub confidence: Vec<f64>,
}

impl ForegroundSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Most likely non-background class; ties go to the lower index.
pub fn argmax_foreground(row: &[f64]) -> ClassId {
    let mut best = 0;
    for c in 1..row.len() - 1 {
        if row[c] > row[best] {
            best = c;
        }
    }
    ClassId(best)
}

/// Keeps point `i` iff `pi_i > tau` (strict).
pub fn filter_foreground(probs: &Matrix, confidence: &[f64], tau: f64) -> ForegroundSet {
    let mut fg = ForegroundSet::default();
    for (i, &pi) in confidence.iter().enumerate() {
        if pi > tau {
            fg.indices.push(i);
            fg.classes.push(argmax_foreground(probs.row(i)));
            fg.confidence.push(pi);
        }
    }
    fg
}

/// One virtual position per foreground point: `p_i` plus the offset slice
/// of its chosen class, clamped into the scene bounds.
pub fn generate_virtual(
    positions: &[[f64; 3]],
    fg: &ForegroundSet,
    offsets: &Matrix,
    cfg: &PipelineConfig,
) -> Vec<([f64; 3], usize)> {
    fg.indices
        .iter()
        .zip(&fg.classes)
        .map(|(&i, &c)| {
            let b = 3 * c.index();
            let p = positions[i];
            let v = [
                p[0] + offsets[(i, b)],
                p[1] + offsets[(i, b + 1)],
                p[2] + offsets[(i, b + 2)],
            ];
            (cfg.clamp(v), i)
        })
        .collect()
}

/// Exact k nearest base points for every query (grid accelerated).
pub fn knn(queries: &[[f64; 3]], base: &PointCloud, k: usize) -> Result<Neighbors> {
    knn_grid(queries, &base.positions(), k)
}

/// `w = 1 / (D + eps)`, normalised per row.
pub fn interp_weights(distances: &[Vec<f64>], epsilon: f64) -> Vec<Vec<f64>> {
    distances
        .iter()
        .map(|row| {
            let w: Vec<f64> = row.iter().map(|&d| 1.0 / (d + epsilon)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// `F_i = sum_k w_ik F_{j_k}` for each query; `neighbor_feats[i]` is `k x d`.
pub fn interp_features(weights: &[Vec<f64>], neighbor_feats: &[Matrix]) -> Result<Matrix> {
    if weights.len() != neighbor_feats.len() {
        return Err(Error::Shape(format!(
            "{} weight rows for {} neighbour sets",
            weights.len(),
            neighbor_feats.len()
        )));
    }
    let d = neighbor_feats.first().map_or(0, Matrix::cols);
    let mut out = Matrix::zeros(weights.len(), d);
    for (i, (w, nf)) in weights.iter().zip(neighbor_feats).enumerate() {
        if nf.rows() != w.len() || nf.cols() != d {
            return Err(Error::Shape(format!(
                "query {i}: {} weights for a {}x{} neighbour block",
                w.len(),
                nf.rows(),
                nf.cols()
            )));
        }
        let row = out.row_mut(i);
        for (wk, f) in w.iter().zip(nf.iter_rows()) {
            for (o, &fv) in row.iter_mut().zip(f) {
                *o += wk * fv;
            }
        }
    }
    Ok(out)
}

/// Where a dense-cloud point came from.
#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    /// A kept original point (index into the raw cloud).
    Original(usize),
    /// A virtual point spawned by raw point `source`, with its feature
    /// blended from raw points `neighbors` by `weights`.
    Virtual {
        source: usize,
        neighbors: Vec<usize>,
        weights: Vec<f64>,
    },
    /// Loaded from disk; no link back to a raw cloud.
    External,
}

/// Dense cloud with per-point feature and logit channels.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DenseCloud {
    /// Coordinates; rcs, v_r and aux are copied from the spawning point.
    pub points: Vec<RadarPoint>,
    /// `M x d`.
    pub features: Matrix,
    /// `M x K`.
    pub logits: Matrix,
    pub is_virtual: Vec<bool>,
    pub provenance: Vec<Provenance>,
    /// Set when the filter kept nothing.
    pub no_foreground: bool,
}

impl DenseCloud {
    pub fn empty(d: usize, k: usize) -> Self {
        Self {
            features: Matrix::zeros(0, d),
            logits: Matrix::zeros(0, k),
            no_foreground: true,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(RadarPoint::position).collect()
    }

    pub fn virtual_count(&self) -> usize {
        self.is_virtual.iter().filter(|&&v| v).count()
    }

    /// Foreground confidence recomputed from the stored logits.
    pub fn confidence(&self) -> Vec<f64> {
        foreground_confidence(&softmax_rows(&self.logits))
    }

    /// Every raw point as an original (no filtering, no virtual points).
    pub fn passthrough(cloud: &PointCloud, vote: &VoteOutput) -> Self {
        Self {
            points: cloud.points.clone(),
            features: vote.feats.clone(),
            logits: vote.logits.clone(),
            is_virtual: vec![false; cloud.len()],
            provenance: (0..cloud.len()).map(Provenance::Original).collect(),
            no_foreground: false,
        }
    }

    /// Same points and provenance, with features and logits recomputed from
    /// new votes of the same raw cloud.
    pub fn rebuild(&self, vote: &VoteOutput) -> Self {
        let mut out = self.clone();
        out.features = Matrix::zeros(self.len(), vote.feats.cols());
        out.logits = Matrix::zeros(self.len(), vote.logits.cols());
        for (r, prov) in self.provenance.iter().enumerate() {
            match prov {
                Provenance::Original(i) => {
                    out.features.row_mut(r).copy_from_slice(vote.feats.row(*i));
                    out.logits.row_mut(r).copy_from_slice(vote.logits.row(*i));
                }
                Provenance::Virtual {
                    source,
                    neighbors,
                    weights,
                } => {
                    let row = out.features.row_mut(r);
                    for (&wk, &j) in weights.iter().zip(neighbors) {
                        for (o, &f) in row.iter_mut().zip(vote.feats.row(j)) {
                            *o += wk * f;
                        }
                    }
                    out.logits.row_mut(r).copy_from_slice(vote.logits.row(*source));
                }
                Provenance::External => {
                    out.features.row_mut(r).copy_from_slice(self.features.row(r));
                    out.logits.row_mut(r).copy_from_slice(self.logits.row(r));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Densified {
    pub probs: Matrix,
    pub foreground: ForegroundSet,
    pub dense: DenseCloud,
}

/// Full generator: vote head, filtering, virtual points, interpolation.
pub fn densify(cloud: &PointCloud, feats: &PointFeatures, head: &Mlp, cfg: &PipelineConfig) -> Result<Densified> {
    let vote = vote_forward(feats, head, cfg.num_classes)?;
    densify_votes(cloud, &vote, cfg)
}

/// Densification given precomputed votes.
pub fn densify_votes(cloud: &PointCloud, vote: &VoteOutput, cfg: &PipelineConfig) -> Result<Densified> {
    if vote.len() != cloud.len() {
        return Err(Error::Shape("vote rows differ from cloud size".into()));
    }
    let probs = softmax_rows(&vote.logits);
    let pi = foreground_confidence(&probs);
    let fg = filter_foreground(&probs, &pi, cfg.tau);
    let d = vote.feats.cols();
    let k = vote.logits.cols();
    if fg.is_empty() {
        return Ok(Densified {
            probs,
            foreground: fg,
            dense: DenseCloud::empty(d, k),
        });
    }
    let positions = cloud.positions();
    let virt = generate_virtual(&positions, &fg, &vote.offsets, cfg);
    let queries: Vec<[f64; 3]> = virt.iter().map(|v| v.0).collect();
    // neighbour pool: raw cloud, or only the kept points mapped back
    let (base, base_map): (Vec<[f64; 3]>, Vec<usize>) = match cfg.knn_pool {
        KnnPool::Raw => (positions.clone(), (0..cloud.len()).collect()),
        KnnPool::Foreground => (fg.indices.iter().map(|&i| positions[i]).collect(), fg.indices.clone()),
    };
    let nb = knn_grid(&queries, &base, cfg.knn_k)?;
    let weights = interp_weights(&nb.distances, cfg.epsilon);

    let total = 2 * fg.len();
    let mut dense = DenseCloud {
        points: Vec::with_capacity(total),
        features: Matrix::zeros(total, d),
        logits: Matrix::zeros(total, k),
        is_virtual: Vec::with_capacity(total),
        provenance: Vec::with_capacity(total),
        no_foreground: false,
    };
    for (slot, &i) in fg.indices.iter().enumerate() {
        dense.points.push(cloud.points[i].clone());
        dense.features.row_mut(slot).copy_from_slice(vote.feats.row(i));
        dense.logits.row_mut(slot).copy_from_slice(vote.logits.row(i));
        dense.is_virtual.push(false);
        dense.provenance.push(Provenance::Original(i));
    }
    for (n, ((v, src), w)) in virt.iter().zip(&weights).enumerate() {
        let slot = fg.len() + n;
        let neighbors: Vec<usize> = nb.indices[n].iter().map(|&j| base_map[j]).collect();
        let row = dense.features.row_mut(slot);
        // fixed neighbour order (ascending distance, then index)
        for (&wk, &j) in w.iter().zip(&neighbors) {
            for (o, &f) in row.iter_mut().zip(vote.feats.row(j)) {
                *o += wk * f;
            }
        }
        dense.logits.row_mut(slot).copy_from_slice(vote.logits.row(*src));
        let s = &cloud.points[*src];
        dense.points.push(RadarPoint {
            x: v[0],
            y: v[1],
            z: v[2],
            rcs: s.rcs,
            v_r: s.v_r,
            aux: s.aux.clone(),
        });
        dense.is_virtual.push(true);
        dense.provenance.push(Provenance::Virtual {
            source: *src,
            neighbors,
            weights: w.clone(),
        });
    }
    Ok(Densified {
        probs,
        foreground: fg,
        dense,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_gives_zero_votes() {
        let head = Mlp::zeros(&[3, 16], &[Activation::Identity]);
        let feats = PointFeatures(Matrix::from_vec(2, 3, vec![1., 2., 3., -4., 5., 6.]).unwrap());
        let v = vote_forward(&feats, &head, 4).unwrap();
        assert!(v.logits.as_slice().iter().all(|&x| x == 0.0));
        assert!(v.offsets.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(v.feats, feats.0);
    }

    #[test]
    fn single_layer_head_by_hand() {
        // K = 2: output width 8 from a 2-wide feature
        let mut head = Mlp::zeros(&[2, 8], &[Activation::Identity]);
        let w: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        head.layers_mut()[0].weight = Matrix::from_vec(8, 2, w.clone()).unwrap();
        head.layers_mut()[0].bias = (0..8).map(|i| i as f64).collect();
        let feats = PointFeatures(Matrix::from_vec(1, 2, vec![2.0, -1.0]).unwrap());
        let v = vote_forward(&feats, &head, 2).unwrap();
        let expect = |o: usize| o as f64 + w[2 * o] * 2.0 + -w[2 * o + 1];
        assert_eq!(v.logits.row(0), &[expect(0), expect(1)]);
        assert_eq!(v.offsets.row(0), &(2..8).map(expect).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn vote_head_width_checked() {
        let head = Mlp::zeros(&[3, 10], &[Activation::Identity]);
        let feats = PointFeatures(Matrix::zeros(1, 3));
        assert!(vote_forward(&feats, &head, 4).is_err());
    }

    #[test]
    fn softmax_examples() {
        let l = Matrix::from_vec(2, 4, vec![0., 0., 0., 0., 1000., 0., 0., 0.]).unwrap();
        let p = softmax_rows(&l);
        assert_eq!(p.row(0), &[0.25; 4]);
        assert_eq!(p[(1, 0)], 1.0);
        assert!(p.row(1)[1..].iter().all(|&v| (0.0..1e-300).contains(&v)));
    }

    #[test]
    fn confidence_examples() {
        let p = Matrix::from_vec(3, 4, vec![0.25, 0.25, 0.25, 0.25, 0., 0., 0., 1., 1., 0., 0., 0.]).unwrap();
        assert_eq!(foreground_confidence(&p), vec![0.75, 0.0, 1.0]);
    }

    #[test]
    fn filter_strict_and_class_choice() {
        let p = Matrix::from_vec(2, 4, vec![0.4, 0.3, 0.2, 0.1, 0.2, 0.2, 0.1, 0.5]).unwrap();
        let pi = foreground_confidence(&p);
        let fg = filter_foreground(&p, &pi, 0.5);
        assert_eq!(fg.indices, vec![0]);
        assert_eq!(fg.classes, vec![ClassId::PEDESTRIAN]);
        // pi exactly tau: dropped
        assert!(filter_foreground(&p, &[0.5, 0.5], 0.5).is_empty());
        // tie between pedestrian and cyclist resolves to the lower index
        assert_eq!(argmax_foreground(&[0.3, 0.3, 0.1, 0.3]), ClassId(0));
    }

    #[test]
    fn filter_matches_row_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Matrix::from_vec(200, 4, (0..800).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let p = softmax_rows(&logits);
        let pi = foreground_confidence(&p);
        let fg = filter_foreground(&p, &pi, 0.6);
        let mut expect = Vec::new();
        for i in 0..200 {
            let r = p.row(i);
            if 1.0 - r[3] > 0.6 {
                let mut c = 0;
                if r[1] > r[c] {
                    c = 1;
                }
                if r[2] > r[c] {
                    c = 2;
                }
                expect.push((i, c));
            }
        }
        let got: Vec<(usize, usize)> = fg.indices.iter().zip(&fg.classes).map(|(&i, c)| (i, c.0)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn virtual_positions() {
        let cfg = PipelineConfig::default();
        let pos = [[1.0, 2.0, 0.0]];
        let fg = ForegroundSet {
            indices: vec![0],
            classes: vec![ClassId::CAR],
            confidence: vec![0.9],
        };
        let mut off = Matrix::zeros(1, 12);
        assert_eq!(generate_virtual(&pos, &fg, &off, &cfg), vec![([1.0, 2.0, 0.0], 0)]);
        off.row_mut(0)[6..9].copy_from_slice(&[0.5, -0.5, 0.1]);
        assert_eq!(generate_virtual(&pos, &fg, &off, &cfg), vec![([1.5, 1.5, 0.1], 0)]);
        // out-of-range votes are clamped into bounds
        off.row_mut(0)[6..9].copy_from_slice(&[-5.0, 0.0, 0.0]);
        let v = generate_virtual(&pos, &fg, &off, &cfg);
        assert_eq!(v[0].0, [0.0, 2.0, 0.0]);
    }

    #[test]
    fn virtual_batch_matches_index_arithmetic() {
        let cfg = PipelineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 50;
        let pos: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random_range(5.0..40.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..1.0)])
            .collect();
        let off = Matrix::from_vec(n, 12, (0..n * 12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fg = ForegroundSet {
            indices: (0..n).step_by(2).collect(),
            classes: (0..n).step_by(2).map(|i| ClassId(i % 3)).collect(),
            confidence: vec![1.0; n / 2],
        };
        let got = generate_virtual(&pos, &fg, &off, &cfg);
        for (slot, &i) in fg.indices.iter().enumerate() {
            let flat = off.as_slice();
            let c = i % 3;
            let expect: [f64; 3] = std::array::from_fn(|a| pos[i][a] + flat[i * 12 + c * 3 + a]);
            assert_eq!(got[slot], (expect, i));
        }
    }

    #[test]
    fn weights_examples() {
        let w = interp_weights(&[vec![1.0, 1.0, 1.0]], 1e-8);
        for v in &w[0] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = interp_weights(&[vec![0.0, 1.0, 2.0]], 1e-8);
        assert!(w[0][0] > 1.0 - 1e-7);
        assert!((w[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // (1/1) / (1/1 + 1/3) = 0.75 in the eps -> 0 limit
        let w = interp_weights(&[vec![1.0, 3.0]], 1e-15);
        assert!((w[0][0] - 0.75).abs() < 1e-12);
        assert!((w[0][1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn interp_examples() {
        let f = Matrix::from_vec(3, 2, vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap();
        let out = interp_features(&[vec![0.2, 0.3, 0.5]], &[f]).unwrap();
        assert!((out[(0, 0)] - 1.5).abs() < 1e-15 && (out[(0, 1)] + 2.0).abs() < 1e-15);
        let f = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = interp_features(&[vec![1.0, 0.0]], std::slice::from_ref(&f)).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
        assert!(interp_features(&[vec![1.0]], &[f]).is_err());
    }

    #[test]
    fn interp_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (m, k, d) = (20, 3, 5);
        let dist: Vec<Vec<f64>> = (0..m).map(|_| (0..k).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
        let w = interp_weights(&dist, 1e-8);
        let blocks: Vec<Matrix> = (0..m)
            .map(|_| Matrix::from_vec(k, d, (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let out = interp_features(&w, &blocks).unwrap();
        for i in 0..m {
            for c in 0..d {
                let mut s = 0.0;
                for j in 0..k {
                    s += w[i][j] * blocks[i][(j, c)];
                }
                assert!((out[(i, c)] - s).abs() < 1e-12);
            }
        }
    }
}
