//! Training losses. Each returns the scalar and its gradient with respect to
//! the network outputs it consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::types::ClassId;

/// Numerically stable softmax of one row (max subtraction).
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Smooth-L1 with transition `beta`: value and derivative.
#[inline]
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Neumaier-compensated running sum, so loss values over many rows stay
/// accurate to a few ulps.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean cross-entropy over points. Gradient is `(softmax - onehot) / N`.
pub fn seg_loss(logits: &Matrix, labels: &[ClassId]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::Data("segmentation loss over zero points".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    let k = logits.cols();
    let mut grad = logits.clone();
    let mut total = CompensatedSum::default();
    for (i, label) in labels.iter().enumerate() {
        let c = label.index();
        if c >= k {
            return Err(Error::Data(format!("label {c} outside {k} classes")));
        }
        total.add(log_sum_exp(logits.row(i)) - logits[(i, c)]);
        let g = grad.row_mut(i);
        softmax_in_place(g);
        g[c] -= 1.0;
        g.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok((total.value() / n as f64, grad))
}

/// Smooth-L1 between voted centre `p + o[class]` and the ground-truth centre,
/// summed over the three axes and averaged over the points that have a
/// target. Returns zero (and a zero gradient) when no point has one.
pub fn vote_loss(
    positions: &[[f64; 3]],
    offsets: &Matrix,
    classes: &[ClassId],
    centers: &[Option<[f64; 3]>],
    beta: f64,
) -> Result<(f64, Matrix)> {
    let n = positions.len();
    if offsets.rows() != n || classes.len() != n || centers.len() != n {
        return Err(Error::Shape("vote loss inputs disagree in length".into()));
    }
    if !offsets.cols().is_multiple_of(3) {
        return Err(Error::Shape("offset width must be a multiple of 3".into()));
    }
    let mut grad = Matrix::zeros(n, offsets.cols());
    let count = centers.iter().filter(|c| c.is_some()).count();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let mut total = CompensatedSum::default();
    for i in 0..n {
        let Some(center) = centers[i] else { continue };
        let base = 3 * classes[i].index();
        if base + 3 > offsets.cols() {
            return Err(Error::Data(format!("class {} has no offset slice", classes[i])));
        }
        for a in 0..3 {
            let r = positions[i][a] + offsets[(i, base + a)] - center[a];
            let (v, d) = smooth_l1(r, beta);
            total.add(v);
            grad[(i, base + a)] = d / count as f64;
        }
    }
    Ok((total.value() / count as f64, grad))
}

/// Sigmoid focal loss for one logit and a binary target: value and
/// derivative with respect to the logit.
pub fn focal_loss(logit: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = super::sigmoid(logit);
    if positive {
        // log p = -softplus(-x)
        let log_p = -softplus(-logit);
        let q = 1.0 - p;
        let value = -alpha * q.powf(gamma) * log_p;
        let grad = alpha * q.powf(gamma) * (gamma * p * log_p - q);
        (value, grad)
    } else {
        let log_q = -softplus(logit);
        let q = 1.0 - p;
        let value = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let grad = (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * log_q);
        (value, grad)
    }
}

/// Regression and class target of a positive detection cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTarget {
    /// Object class in `0..K-1`.
    pub class: usize,
    /// `dx, dy, z, ln l, ln w, ln h, sin yaw, cos yaw`.
    pub residuals: [f64; 8],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetLossParams {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for DetLossParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            beta: 1.0,
        }
    }
}

/// Detection loss over head output rows laid out as
/// `[objectness, class_0..class_{K-2}, 8 box residuals]`.
///
/// Focal objectness over every row (weighted by `multiplicity`, so one row
/// can stand for many identical empty cells), plus smooth-L1 residuals and
/// class cross-entropy on positive rows. Normalised by `max(1, positives)`.
pub fn det_loss(
    outputs: &Matrix,
    targets: &[Option<BoxTarget>],
    multiplicity: &[f64],
    params: DetLossParams,
) -> Result<(f64, Matrix)> {
    let rows = outputs.rows();
    if targets.len() != rows || multiplicity.len() != rows {
        return Err(Error::Shape("detection targets disagree with output rows".into()));
    }
    let width = outputs.cols();
    if width < 10 {
        return Err(Error::Shape(format!("detection output width {width} < 10")));
    }
    let n_cls = width - 9;
    let positives = targets.iter().filter(|t| t.is_some()).count();
    let norm = positives.max(1) as f64;
    let mut grad = Matrix::zeros(rows, width);
    let mut total = CompensatedSum::default();
    for r in 0..rows {
        let out = outputs.row(r);
        let m = multiplicity[r];
        let (fv, fg) = focal_loss(out[0], targets[r].is_some(), params.alpha, params.gamma);
        total.add(m * fv);
        grad[(r, 0)] = m * fg / norm;
        if let Some(t) = targets[r] {
            if t.class >= n_cls {
                return Err(Error::Data(format!("box class {} out of range", t.class)));
            }
            let cls = &out[1..1 + n_cls];
            total.add(log_sum_exp(cls) - cls[t.class]);
            let mut p = cls.to_vec();
            softmax_in_place(&mut p);
            p[t.class] -= 1.0;
            for (c, pc) in p.iter().enumerate() {
                grad[(r, 1 + c)] = pc / norm;
            }
            for (j, &target) in t.residuals.iter().enumerate() {
                let (v, d) = smooth_l1(out[1 + n_cls + j] - target, params.beta);
                total.add(v);
                grad[(r, 1 + n_cls + j)] = d / norm;
            }
        }
    }
    Ok((total.value() / norm, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub det: f64,
    pub seg: f64,
    pub vote: f64,
    pub total: f64,
}

/// `total = det + lambda * (seg + vote)`.
pub fn total_loss(det: f64, seg: f64, vote: f64, lambda: f64) -> LossReport {
    LossReport {
        det,
        seg,
        vote,
        total: det + lambda * (seg + vote),
    }
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.det.is_finite() && self.seg.is_finite() && self.vote.is_finite() && self.total.is_finite()
    }

    pub fn accumulate(&mut self, other: &LossReport) {
        self.det += other.det;
        self.seg += other.seg;
        self.vote += other.vote;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossReport {
        LossReport {
            det: self.det * s,
            seg: self.seg * s,
            vote: self.vote * s,
            total: self.total * s,
        }
    }
}
