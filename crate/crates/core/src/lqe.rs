//! Logit-query encoder.
//!
//! Each pillar gets an absorption radius from the class mix of its points,
//! gathers the dense-cloud points within that BEV radius that lie outside
//! the pillar, encodes every neighbour's `(feature, pi)` and max-pools the
//! result. The pooled vector is fused back into the pillar feature as
//! `F_point + F_pillar + fusion([F_point, F_pillar])`.

use crate::error::{Error, Result};
use crate::fpg::{argmax_foreground, DenseCloud};
use crate::nn::{ForwardCache, Gradients, Mlp};
use crate::pillars::{segment_max, segment_max_backward, PillarGrid};
use crate::spatial::ball_query_grid;
use crate::tensor::Matrix;

/// Per-pillar class tallies over the non-background classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCounts {
    /// `P x (K - 1)`.
    pub per_class: Vec<Vec<usize>>,
    pub fore: Vec<usize>,
}

/// Counts each kept point under its most likely non-background class.
pub fn class_counts(grid: &PillarGrid) -> ClassCounts {
    let l = grid.layout;
    let classes = l.num_classes - 1;
    let mut per_class = Vec::with_capacity(grid.len());
    let mut fore = Vec::with_capacity(grid.len());
    for (p, m) in grid.members.iter().enumerate() {
        let mut tally = vec![0usize; classes];
        for s in 0..m.len() {
            // softmax is monotone, so the logit argmax is the probability argmax
            let c = argmax_foreground(&grid.slot(p, s)[l.logits()]);
            tally[c.index()] += 1;
        }
        fore.push(tally.iter().sum());
        per_class.push(tally);
    }
    ClassCounts { per_class, fore }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadiusAssignment {
    /// Metres, one per pillar.
    pub radii: Vec<f64>,
    pub fore: Vec<usize>,
    pub counts: Vec<Vec<usize>>,
}

impl RadiusAssignment {
    /// Class ratios `N_c / N_fore` of pillar `i` (all zero when empty).
    pub fn ratios(&self, i: usize) -> Vec<f64> {
        let n = self.fore[i];
        self.counts[i]
            .iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect()
    }
}

/// `R_i = sum_c (N_c / N_fore) W_c`, or `default_radius` when the pillar
/// holds no foreground point.
pub fn adaptive_radius(counts: &ClassCounts, weights: &[f64], default_radius: f64) -> RadiusAssignment {
    let radii = counts
        .per_class
        .iter()
        .zip(&counts.fore)
        .map(|(tally, &n)| {
            if n == 0 {
                default_radius
            } else {
                tally
                    .iter()
                    .zip(weights)
                    .map(|(&c, &w)| (c as f64 / n as f64) * w)
                    .sum()
            }
        })
        .collect();
    RadiusAssignment {
        radii,
        fore: counts.fore.clone(),
        counts: counts.per_class.clone(),
    }
}

/// Neighbour sets and the effective mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BallQuery {
    /// Dense-point indices per pillar, ascending.
    pub neighbors: Vec<Vec<usize>>,
    pub mask: Vec<bool>,
}

impl BallQuery {
    pub fn total(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

/// Points within BEV distance `radii[i]` (inclusive) of pillar centre `i`,
/// excluding points whose own pillar is `i` (`owner`).
pub fn ball_query(centers: &[[f64; 2]], dense: &DenseCloud, radii: &[f64], owner: &[usize]) -> BallQuery {
    let pts: Vec<[f64; 2]> = dense.points.iter().map(|p| [p.x, p.y]).collect();
    let neighbors = ball_query_grid(centers, radii, &pts, owner);
    let mask = neighbors.iter().map(|q| !q.is_empty()).collect();
    BallQuery { neighbors, mask }
}

/// Aggregated neighbour features and backward state.
#[derive(Clone, Debug)]
pub struct Aggregation {
    /// `P x C`; zero rows where the mask is false.
    pub features: Matrix,
    /// Dense-point index behind every encoded row.
    sources: Vec<usize>,
    argmax: Vec<Vec<usize>>,
    cache: ForwardCache,
}

impl Aggregation {
    /// Winning encoded row per pillar and channel.
    pub fn argmax(&self) -> &[Vec<usize>] {
        &self.argmax
    }

    pub fn cache(&self) -> &ForwardCache {
        &self.cache
    }
}

/// Per-neighbour perceptron over `[feature, pi]`, then max-pool per pillar.
pub fn aggregate_neighbors(q: &BallQuery, feats: &Matrix, pi: &[f64], agg: &Mlp) -> Result<Matrix> {
    Ok(aggregate_neighbors_cached(q, feats, pi, agg)?.features)
}

pub fn aggregate_neighbors_cached(q: &BallQuery, feats: &Matrix, pi: &[f64], agg: &Mlp) -> Result<Aggregation> {
    let d = feats.cols();
    if agg.in_width() != d + 1 {
        return Err(Error::WidthMismatch {
            context: "neighbour aggregation input",
            expected: agg.in_width(),
            got: d + 1,
        });
    }
    if pi.len() != feats.rows() {
        return Err(Error::Shape("confidence length differs from feature rows".into()));
    }
    let sources: Vec<usize> = q.neighbors.iter().flatten().copied().collect();
    let mut input = Matrix::zeros(sources.len(), d + 1);
    for (r, &j) in sources.iter().enumerate() {
        let row = input.row_mut(r);
        row[..d].copy_from_slice(feats.row(j));
        row[d] = pi[j];
    }
    let (out, cache) = agg.forward_cached(&input)?;
    let (features, argmax) = segment_max(&out, q.neighbors.iter().map(Vec::len));
    Ok(Aggregation {
        features,
        sources,
        argmax,
        cache,
    })
}

/// Aggregator gradients and `dL/d(dense features)`; `pi` is treated as a
/// constant input.
pub fn aggregate_backward(
    agg: &Mlp,
    aggregation: &Aggregation,
    d_features: &Matrix,
    num_points: usize,
) -> Result<(Gradients, Matrix)> {
    let d_out = segment_max_backward(&aggregation.argmax, d_features, aggregation.sources.len());
    let (g, d_in) = agg.backward(&aggregation.cache, &d_out)?;
    let d = agg.in_width() - 1;
    let mut d_feats = Matrix::zeros(num_points, d);
    for (r, &j) in aggregation.sources.iter().enumerate() {
        for (a, &v) in d_feats.row_mut(j).iter_mut().zip(&d_in.row(r)[..d]) {
            *a += v;
        }
    }
    Ok((g, d_feats))
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub features: Matrix,
    cache: ForwardCache,
}

impl Fusion {
    pub fn cache(&self) -> &ForwardCache {
        &self.cache
    }
}

/// `F' = F_point + F_pillar + fusion([F_point, F_pillar])`.
pub fn fuse(f_point: &Matrix, f_pillar: &Matrix, fusion: &Mlp) -> Result<Matrix> {
    Ok(fuse_cached(f_point, f_pillar, fusion)?.features)
}

pub fn fuse_cached(f_point: &Matrix, f_pillar: &Matrix, fusion: &Mlp) -> Result<Fusion> {
    let c = f_pillar.cols();
    if f_point.cols() != c || f_point.rows() != f_pillar.rows() {
        return Err(Error::Shape(format!(
            "point features {}x{} vs pillar features {}x{}",
            f_point.rows(),
            f_point.cols(),
            f_pillar.rows(),
            c
        )));
    }
    if fusion.in_width() != 2 * c || fusion.out_width() != c {
        return Err(Error::WidthMismatch {
            context: "fusion perceptron",
            expected: 2 * c,
            got: fusion.in_width(),
        });
    }
    let (mut out, cache) = fusion.forward_cached(&f_point.hstack(f_pillar)?)?;
    out.add_assign(f_point);
    out.add_assign(f_pillar);
    Ok(Fusion { features: out, cache })
}

/// Fusion gradients plus `dL/dF_point` and `dL/dF_pillar`.
pub fn fuse_backward(fusion: &Mlp, state: &Fusion, d_out: &Matrix) -> Result<(Gradients, Matrix, Matrix)> {
    let (g, d_in) = fusion.backward(&state.cache, d_out)?;
    let c = d_out.cols();
    let mut d_point = d_in.columns(0, c);
    let mut d_pillar = d_in.columns(c, 2 * c);
    d_point.add_assign(d_out);
    d_pillar.add_assign(d_out);
    Ok((g, d_point, d_pillar))
}
