//! Detection and densification metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::fpg::{DenseCloud, Provenance};
use crate::pillars::Detection;
use crate::spatial::dist3;
use crate::tensor::Matrix;
use crate::types::{ClassId, ObjectBox, PointCloud};

/// Intersection over union of the BEV footprints of two rotated boxes.
pub fn bev_iou(a: &ObjectBox, b: &ObjectBox) -> f64 {
    // clip in a canonical argument order so the result is exactly symmetric
    let key = |o: &ObjectBox| [o.center[0], o.center[1], o.size[0], o.size[1], o.yaw];
    let (a, b) = if key(a).iter().zip(key(b)).map(|(x, y)| x.total_cmp(&y)).find(|o| o.is_ne())
        == Some(std::cmp::Ordering::Greater)
    {
        (b, a)
    } else {
        (a, b)
    };
    let pa = a.bev_corners();
    let pb = b.bev_corners();
    let inter = polygon_area(&clip_convex(&pa, &pb));
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Sutherland-Hodgman: `subject` clipped by the convex CCW polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        s += a[0] * b[1] - a[1] * b[0];
    }
    (0.5 * s).abs()
}

/// IoU needed for a match: 0.5 for cars, 0.25 otherwise.
pub fn iou_threshold(class: ClassId) -> f64 {
    if class == ClassId::CAR {
        0.5
    } else {
        0.25
    }
}

/// Scored detections of one scene matched against its ground truth.
/// Returns `(score, is_true_positive)` in descending score order (stable,
/// so equal scores keep detection order).
pub fn match_detections(dets: &[(f64, ObjectBox)], gts: &[ObjectBox], iou_thresh: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].0.total_cmp(&dets[a].0));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = bev_iou(&dets[i].1, gt);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (dets[i].0, best.is_some())
        })
        .collect()
}

/// 40-point interpolated AP from pooled matches.
pub fn ap_from_matches(matches: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 || matches.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..matches.len()).collect();
    order.sort_by(|&a, &b| matches[b].0.total_cmp(&matches[a].0));
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(matches.len());
    for (rank, &i) in order.iter().enumerate() {
        if matches[i].1 {
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // precision envelope: best precision at any recall >= r
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 1..=40 {
        let r = k as f64 / 40.0;
        while j < curve.len() && curve[j].0 < r - 1e-12 {
            j += 1;
        }
        if j < curve.len() {
            sum += curve[j].1;
        }
    }
    sum / 40.0
}

/// AP of one scene's detections of a single class.
pub fn average_precision(dets: &[(f64, ObjectBox)], gts: &[ObjectBox], iou_thresh: f64) -> f64 {
    ap_from_matches(&match_detections(dets, gts, iou_thresh), gts.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalRegion {
    Entire,
    Corridor,
}

impl std::str::FromStr for EvalRegion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "entire" => Ok(Self::Entire),
            "corridor" => Ok(Self::Corridor),
            _ => Err(format!("unknown region '{s}' (entire|corridor)")),
        }
    }
}

impl EvalRegion {
    /// Region predicate on a centre in the evaluation frame.
    pub fn contains(self, c: [f64; 3]) -> bool {
        match self {
            Self::Entire => true,
            Self::Corridor => c[0] > -4.0 && c[0] < 4.0 && c[2] < 25.0,
        }
    }
}

/// Sensor frame (x forward, y left, z up) to the camera-style evaluation
/// frame (x right, y down, z forward).
pub fn sensor_to_eval(c: [f64; 3]) -> [f64; 3] {
    [-c[1], -c[2], c[0]]
}

pub trait HasCenter {
    fn center(&self) -> [f64; 3];
}

impl HasCenter for ObjectBox {
    fn center(&self) -> [f64; 3] {
        self.center
    }
}

impl HasCenter for Detection {
    fn center(&self) -> [f64; 3] {
        self.object.center
    }
}

/// Keeps objects whose centre satisfies the region predicate.
pub fn region_filter<T: HasCenter + Clone>(objs: &[T], region: EvalRegion) -> Vec<T> {
    objs.iter().filter(|o| region.contains(o.center())).cloned().collect()
}

/// [`region_filter`] for objects given in the sensor frame.
pub fn region_filter_sensor<T: HasCenter + Clone>(objs: &[T], region: EvalRegion) -> Vec<T> {
    objs.iter()
        .filter(|o| region.contains(sensor_to_eval(o.center())))
        .cloned()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    /// Absent when the class has no ground truth in the evaluated set.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub per_class: Vec<ClassAp>,
    /// Mean over classes with ground truth.
    pub map: f64,
}

/// Per-class AP over many scenes, with detections and ground truth in the
/// sensor frame and the region applied in the evaluation frame.
pub fn detection_metrics(
    scenes: &[(Vec<Detection>, Vec<ObjectBox>)],
    region: EvalRegion,
    num_classes: usize,
) -> DetectionMetrics {
    let mut per_class = Vec::new();
    let mut aps = Vec::new();
    for c in 0..num_classes - 1 {
        let class = ClassId(c);
        let thresh = iou_threshold(class);
        let mut matches = Vec::new();
        let (mut num_gt, mut num_det) = (0, 0);
        for (dets, gts) in scenes {
            let d: Vec<(f64, ObjectBox)> = region_filter_sensor(dets, region)
                .into_iter()
                .filter(|d| d.object.class == class)
                .map(|d| (d.score, d.object))
                .collect();
            let g: Vec<ObjectBox> = region_filter_sensor(gts, region)
                .into_iter()
                .filter(|b| b.class == class)
                .collect();
            num_gt += g.len();
            num_det += d.len();
            matches.extend(match_detections(&d, &g, thresh));
        }
        let ap = (num_gt > 0).then(|| ap_from_matches(&matches, num_gt));
        if let Some(v) = ap {
            aps.push(v);
        }
        per_class.push(ClassAp {
            class: class.name(num_classes).to_string(),
            ap,
            num_gt,
            num_det,
        });
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    DetectionMetrics { per_class, map }
}

/// Raw tallies behind the densification metrics; add scenes together
/// before calling [`DensifyTally::finish`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyTally {
    pub retained: usize,
    pub retained_fg: usize,
    pub gt_fg: usize,
    pub dense: usize,
    pub virtual_points: usize,
    pub distance_sum: f64,
}

impl DensifyTally {
    pub fn add(&mut self, o: &DensifyTally) {
        self.retained += o.retained;
        self.retained_fg += o.retained_fg;
        self.gt_fg += o.gt_fg;
        self.dense += o.dense;
        self.virtual_points += o.virtual_points;
        self.distance_sum += o.distance_sum;
    }

    pub fn finish(&self) -> DensifyMetrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        DensifyMetrics {
            precision: ratio(self.retained_fg, self.retained),
            recall: ratio(self.retained_fg, self.gt_fg),
            vote_distance: (self.virtual_points > 0).then(|| self.distance_sum / self.virtual_points as f64),
            densification_ratio: ratio(self.dense, self.gt_fg),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyMetrics {
    /// Fraction of kept original points that are ground-truth foreground
    /// (0 when nothing was kept).
    pub precision: f64,
    pub recall: f64,
    /// Mean distance from a virtual point to the nearest ground-truth centre.
    pub vote_distance: Option<f64>,
    pub densification_ratio: f64,
}

/// Tallies one scene. Kept originals are resolved through provenance, or
/// by exact coordinates for clouds loaded from disk.
pub fn densify_tally(dense: &DenseCloud, raw: &PointCloud, boxes: &[ObjectBox], num_classes: usize) -> DensifyTally {
    let labels = raw.labels.as_deref().unwrap_or(&[]);
    let is_fg = |i: usize| labels.get(i).is_some_and(|c| !c.is_background(num_classes));
    let by_coords: HashMap<[u64; 3], usize> = raw
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.position().map(f64::to_bits), i))
        .collect();
    let mut t = DensifyTally {
        gt_fg: (0..raw.len()).filter(|&i| is_fg(i)).count(),
        dense: dense.len(),
        ..Default::default()
    };
    for (k, p) in dense.points.iter().enumerate() {
        if dense.is_virtual[k] {
            if let Some(d) = boxes
                .iter()
                .map(|b| dist3(p.position(), b.center))
                .min_by(f64::total_cmp)
            {
                t.virtual_points += 1;
                t.distance_sum += d;
            }
            continue;
        }
        t.retained += 1;
        let src = match dense.provenance.get(k) {
            Some(Provenance::Original(i)) => Some(*i),
            _ => by_coords.get(&p.position().map(f64::to_bits)).copied(),
        };
        if src.is_some_and(is_fg) {
            t.retained_fg += 1;
        }
    }
    t
}

pub fn densify_metrics(dense: &DenseCloud, raw: &PointCloud, boxes: &[ObjectBox], num_classes: usize) -> DensifyMetrics {
    densify_tally(dense, raw, boxes, num_classes).finish()
}

/// Fraction of points whose logit argmax equals the label.
pub fn classification_accuracy(logits: &Matrix, labels: &[ClassId]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, l)| {
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == l.index()
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub region: EvalRegion,
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub foreground_precision: Option<f64>,
    pub foreground_recall: Option<f64>,
    pub vote_distance: Option<f64>,
    pub densification_ratio: Option<f64>,
}

impl MetricReport {
    pub fn new(det: DetectionMetrics, region: EvalRegion, dens: Option<DensifyMetrics>) -> Self {
        Self {
            region,
            per_class: det.per_class,
            map: det.map,
            foreground_precision: dens.map(|d| d.precision),
            foreground_recall: dens.map(|d| d.recall),
            vote_distance: dens.and_then(|d| d.vote_distance),
            densification_ratio: dens.map(|d| d.densification_ratio),
        }
    }
}
