//! Pipeline configuration, validation and range cropping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::PointCloud;

/// Which points the virtual-point KNN draws its neighbours from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KnnPool {
    /// Every cropped input point, background included.
    #[default]
    Raw,
    /// Only the points kept by the foreground filter.
    Foreground,
}

/// Flat configuration shared by every stage. Serialized as a flat JSON
/// object; missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Pillar edge length in x and y.
    pub pillar_size: f64,
    pub voxel_size_x: f64,
    pub voxel_size_y: f64,
    pub voxel_size_z: f64,
    /// Class count K, background included as the last class.
    pub num_classes: usize,
    /// Foreground confidence threshold.
    pub tau: f64,
    pub knn_k: usize,
    pub knn_pool: KnnPool,
    /// Guard added to KNN distances before inversion.
    pub epsilon: f64,
    /// Per-class absorption radii (pedestrian, cyclist, car), metres.
    pub radius_weights: Vec<f64>,
    /// Radius of pillars without foreground points.
    pub default_radius: f64,
    /// Weight of the segmentation and vote losses.
    pub lambda: f64,
    pub feature_dim: usize,
    pub aux_channels: usize,
    pub hidden_dim: usize,
    pub pillar_channels: usize,
    pub max_points_per_pillar: usize,
    pub use_fpg: bool,
    pub use_lqe: bool,
    pub context_pool: bool,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Divisors applied to rcs and radial velocity before the voxel encoder.
    pub rcs_scale: f64,
    pub velocity_scale: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 51.2,
            y_min: -25.6,
            y_max: 25.6,
            z_min: -3.0,
            z_max: 2.0,
            pillar_size: 0.16,
            voxel_size_x: 0.16,
            voxel_size_y: 0.16,
            voxel_size_z: 0.24,
            num_classes: 4,
            tau: 0.5,
            knn_k: 3,
            knn_pool: KnnPool::Raw,
            epsilon: 1e-8,
            radius_weights: vec![0.2, 0.3, 0.4],
            default_radius: 0.2,
            lambda: 1.0,
            feature_dim: 16,
            aux_channels: 0,
            hidden_dim: 32,
            pillar_channels: 16,
            max_points_per_pillar: 32,
            use_fpg: true,
            use_lqe: true,
            context_pool: true,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 4,
            rcs_scale: 10.0,
            velocity_scale: 10.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn mins(&self) -> [f64; 3] {
        [self.x_min, self.y_min, self.z_min]
    }

    pub fn maxs(&self) -> [f64; 3] {
        [self.x_max, self.y_max, self.z_max]
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        [self.voxel_size_x, self.voxel_size_y, self.voxel_size_z]
    }

    /// Number of cells along each axis for a given cell size (partial last
    /// cells are counted).
    pub fn cells(&self, size: [f64; 3]) -> [usize; 3] {
        let (lo, hi) = (self.mins(), self.maxs());
        std::array::from_fn(|k| cell_count(hi[k] - lo[k], size[k]))
    }

    /// BEV grid extent in pillars: (rows along x, columns along y).
    pub fn bev_dims(&self) -> (usize, usize) {
        (
            cell_count(self.x_max - self.x_min, self.pillar_size),
            cell_count(self.y_max - self.y_min, self.pillar_size),
        )
    }

    /// Half-open containment `[min, max)` on all three axes.
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (self.x_min..self.x_max).contains(&p[0])
            && (self.y_min..self.y_max).contains(&p[1])
            && (self.z_min..self.z_max).contains(&p[2])
    }

    /// Clamps a position into the half-open bounds.
    pub fn clamp(&self, p: [f64; 3]) -> [f64; 3] {
        let (lo, hi) = (self.mins(), self.maxs());
        std::array::from_fn(|k| {
            if p[k] < lo[k] {
                lo[k]
            } else if p[k] >= hi[k] {
                // largest representable value strictly below the max
                prev_float(hi[k])
            } else {
                p[k]
            }
        })
    }

    pub fn raw_channels(&self) -> usize {
        5 + self.aux_channels
    }

    pub fn background(&self) -> usize {
        self.num_classes - 1
    }
}

fn cell_count(extent: f64, size: f64) -> usize {
    let q = extent / size;
    let r = q.round();
    if (q - r).abs() < 1e-9 {
        r as usize
    } else {
        q.ceil() as usize
    }
}

fn divides(extent: f64, size: f64) -> bool {
    let q = extent / size;
    (q - q.round()).abs() < 1e-9 && q.round() >= 1.0
}

pub(crate) fn prev_float(v: f64) -> f64 {
    if v > 0.0 {
        f64::from_bits(v.to_bits() - 1)
    } else if v < 0.0 {
        f64::from_bits(v.to_bits() + 1)
    } else {
        -f64::from_bits(1)
    }
}

/// Returns every violated invariant. Total: never fails on its own.
///
/// The z extent is exempt from the divisibility rule: the stock voxel
/// height (0.24 m) does not divide the stock 5 m z range, and the grid
/// simply rounds the last layer up.
pub fn validate_config(cfg: &PipelineConfig) -> std::result::Result<(), Vec<String>> {
    let mut errs = Vec::new();
    let mut check = |ok: bool, msg: String| {
        if !ok {
            errs.push(msg);
        }
    };
    let all = [
        cfg.x_min,
        cfg.x_max,
        cfg.y_min,
        cfg.y_max,
        cfg.z_min,
        cfg.z_max,
        cfg.pillar_size,
        cfg.voxel_size_x,
        cfg.voxel_size_y,
        cfg.voxel_size_z,
    ];
    check(all.iter().all(|v| v.is_finite()), "bounds and sizes must be finite".into());
    check(cfg.x_min < cfg.x_max, "x bounds empty".into());
    check(cfg.y_min < cfg.y_max, "y bounds empty".into());
    check(cfg.z_min < cfg.z_max, "z bounds empty".into());
    check(cfg.pillar_size > 0.0, "pillar_size must be positive".into());
    check(
        cfg.voxel_size().iter().all(|&v| v > 0.0),
        "voxel sizes must be positive".into(),
    );
    if cfg.pillar_size > 0.0 {
        check(
            divides(cfg.x_max - cfg.x_min, cfg.pillar_size)
                && divides(cfg.y_max - cfg.y_min, cfg.pillar_size),
            "pillar_size does not divide extent".into(),
        );
    }
    if cfg.voxel_size_x > 0.0 && cfg.voxel_size_y > 0.0 {
        check(
            divides(cfg.x_max - cfg.x_min, cfg.voxel_size_x)
                && divides(cfg.y_max - cfg.y_min, cfg.voxel_size_y),
            "voxel_size does not divide extent".into(),
        );
    }
    check(cfg.num_classes >= 2, "num_classes must be at least 2".into());
    check(
        cfg.tau > 0.0 && cfg.tau < 1.0,
        "tau out of (0,1)".into(),
    );
    check(cfg.knn_k >= 1, "knn_k must be positive".into());
    check(
        cfg.epsilon > 0.0 && cfg.epsilon.is_finite(),
        "epsilon must be positive".into(),
    );
    check(
        cfg.radius_weights.len() + 1 == cfg.num_classes,
        format!(
            "radius_weights needs {} entries, has {}",
            cfg.num_classes.saturating_sub(1),
            cfg.radius_weights.len()
        ),
    );
    check(
        cfg.radius_weights.iter().all(|&w| w > 0.0 && w.is_finite()),
        "radius_weights must all be positive".into(),
    );
    check(cfg.default_radius >= 0.0, "default_radius must be non-negative".into());
    check(cfg.lambda >= 0.0, "lambda must be non-negative".into());
    check(cfg.feature_dim >= 1, "feature_dim must be positive".into());
    check(cfg.hidden_dim >= 1, "hidden_dim must be positive".into());
    check(cfg.pillar_channels >= 1, "pillar_channels must be positive".into());
    check(cfg.max_points_per_pillar >= 1, "max_points_per_pillar must be positive".into());
    check(
        (0.0..=1.0).contains(&cfg.score_threshold),
        "score_threshold out of [0,1]".into(),
    );
    check((0.0..=1.0).contains(&cfg.nms_iou), "nms_iou out of [0,1]".into());
    check(cfg.learning_rate > 0.0, "learning_rate must be positive".into());
    check((0.0..1.0).contains(&cfg.momentum), "momentum out of [0,1)".into());
    check(cfg.batch_size >= 1, "batch_size must be positive".into());
    check(
        cfg.rcs_scale > 0.0 && cfg.velocity_scale > 0.0,
        "channel scales must be positive".into(),
    );
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

/// Keeps the points inside `[min, max)` on every axis, in input order.
pub fn crop_to_bounds(cloud: &PointCloud, cfg: &PipelineConfig) -> PointCloud {
    let keep: Vec<usize> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| cfg.contains(p.position()))
        .map(|(i, _)| i)
        .collect();
    cloud.subset(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::RadarPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stock_config_is_valid() {
        assert_eq!(validate_config(&PipelineConfig::default()), Ok(()));
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.bev_dims(), (320, 320));
        assert_eq!(cfg.cells(cfg.voxel_size()), [320, 320, 21]);
    }

    #[test]
    fn tau_out_of_range() {
        let cfg = PipelineConfig {
            tau: 1.5,
            ..Default::default()
        };
        let errs = validate_config(&cfg).unwrap_err();
        assert_eq!(errs, vec!["tau out of (0,1)".to_string()]);
    }

    #[test]
    fn pillar_size_must_divide() {
        let cfg = PipelineConfig {
            pillar_size: 0.15,
            ..Default::default()
        };
        let errs = validate_config(&cfg).unwrap_err();
        assert!(errs.contains(&"pillar_size does not divide extent".to_string()));
    }

    #[test]
    fn collects_every_violation() {
        let cfg = PipelineConfig {
            tau: 0.0,
            epsilon: 0.0,
            radius_weights: vec![0.2, -0.3, 0.4],
            ..Default::default()
        };
        assert_eq!(validate_config(&cfg).unwrap_err().len(), 3);
    }

    #[test]
    fn crop_examples() {
        let cfg = PipelineConfig::default();
        let cloud = PointCloud::new(vec![
            RadarPoint::new(60.0, 0.0, 0.0, 0.0, 0.0),
            RadarPoint::new(0.0, -25.6, 0.0, 0.0, 0.0),
            RadarPoint::new(51.2, 0.0, 0.0, 0.0, 0.0),
        ]);
        let out = crop_to_bounds(&cloud, &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out.points[0].y, -25.6);
    }

    #[test]
    fn crop_matches_per_point_count() {
        let cfg = PipelineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<RadarPoint> = (0..100)
            .map(|_| {
                // box twice the size of the bounds, same centre
                RadarPoint::new(
                    rng.random_range(-25.6..76.8),
                    rng.random_range(-51.2..51.2),
                    rng.random_range(-5.5..4.5),
                    0.0,
                    0.0,
                )
            })
            .collect();
        let expected = pts
            .iter()
            .filter(|p| {
                p.x >= 0.0 && p.x < 51.2 && p.y >= -25.6 && p.y < 25.6 && p.z >= -3.0 && p.z < 2.0
            })
            .count();
        let out = crop_to_bounds(&PointCloud::new(pts), &cfg);
        assert_eq!(out.len(), expected);
    }

    #[test]
    fn clamp_stays_inside() {
        let cfg = PipelineConfig::default();
        let c = cfg.clamp([60.0, -30.0, 2.0]);
        assert!(cfg.contains(c));
        assert_eq!(c[1], -25.6);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = PipelineConfig {
            knn_pool: KnnPool::Foreground,
            ..Default::default()
        };
        let back: PipelineConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"tau": 0.7}"#).unwrap();
        assert_eq!(partial.tau, 0.7);
        assert_eq!(partial.pillar_size, 0.16);
    }
}
