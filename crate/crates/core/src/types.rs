//! Radar points, clouds, class ids and boxes.
//!
//! Coordinates are in the sensor frame: x forward, y left, z up, in metres.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Radar cross-section in dBsm.
    pub rcs: f64,
    /// Radial (Doppler) velocity in m/s.
    pub v_r: f64,
    /// Extra per-point channels.
    pub aux: Vec<f64>,
}

impl RadarPoint {
    pub fn new(x: f64, y: f64, z: f64, rcs: f64, v_r: f64) -> Self {
        Self {
            x,
            y,
            z,
            rcs,
            v_r,
            aux: Vec::new(),
        }
    }

    #[inline]
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Raw channel vector `x, y, z, rcs, v_r, aux..`.
    pub fn channels(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(5 + self.aux.len());
        c.extend_from_slice(&[self.x, self.y, self.z, self.rcs, self.v_r]);
        c.extend_from_slice(&self.aux);
        c
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Class index in `0..K`. Index `K - 1` is the background / noise class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl ClassId {
    pub const PEDESTRIAN: ClassId = ClassId(0);
    pub const CYCLIST: ClassId = ClassId(1);
    pub const CAR: ClassId = ClassId(2);

    pub fn background(num_classes: usize) -> ClassId {
        ClassId(num_classes - 1)
    }

    pub fn is_background(self, num_classes: usize) -> bool {
        self.0 == num_classes - 1
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0
    }

    pub fn name(self, num_classes: usize) -> &'static str {
        if self.is_background(num_classes) {
            return "background";
        }
        match self.0 {
            0 => "pedestrian",
            1 => "cyclist",
            2 => "car",
            _ => "object",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<RadarPoint>,
    pub labels: Option<Vec<ClassId>>,
    /// Optional learned features, one row per point.
    pub features: Option<Matrix>,
}

impl PointCloud {
    pub fn new(points: Vec<RadarPoint>) -> Self {
        Self {
            points,
            labels: None,
            features: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<ClassId>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_features(mut self, features: Matrix) -> Result<Self> {
        if features.rows() != self.points.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} points",
                features.rows(),
                self.points.len()
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of aux channels, taken from the first point.
    pub fn aux_len(&self) -> usize {
        self.points.first().map_or(0, |p| p.aux.len())
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(RadarPoint::position).collect()
    }

    /// Checks finiteness and the length invariants of labels and features.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("coordinates of point {i}")));
        }
        let aux = self.aux_len();
        if self.points.iter().any(|p| p.aux.len() != aux) {
            return Err(Error::Data("inconsistent aux channel count".into()));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::Shape("label count differs from point count".into()));
            }
        }
        if let Some(f) = &self.features {
            if f.rows() != self.len() {
                return Err(Error::Shape("feature rows differ from point count".into()));
            }
        }
        Ok(())
    }

    /// Keeps the points at `indices` (in that order), carrying labels and
    /// features along.
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            features: self.features.as_ref().map(|f| f.select_rows(indices)),
        }
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w -= 2.0 * PI;
    }
    w
}

/// Oriented 3D box. `size` is (length along heading, width, height).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: ClassId,
}

impl ObjectBox {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class: ClassId) -> Self {
        Self {
            center,
            size,
            yaw: wrap_angle(yaw),
            class,
        }
    }

    pub fn is_valid(&self, num_classes: usize) -> bool {
        self.size.iter().all(|&s| s > 0.0 && s.is_finite())
            && self.center.iter().all(|c| c.is_finite())
            && (-PI..PI).contains(&self.yaw)
            && !self.class.is_background(num_classes)
            && self.class.0 < num_classes
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.size[0] / 2.0;
        let hw = self.size[1] / 2.0;
        let [cx, cy, _] = self.center;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [cx + u * c - v * s, cy + u * s + v * c])
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    /// Expresses a world-frame BEV point in the box frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [dx * c + dy * s, -dx * s + dy * c, p[2] - self.center[2]]
    }

    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|k| l[k].abs() <= self.size[k] / 2.0 + margin)
    }
}
