//! Deterministic synthetic radar scenes with ground truth.
//!
//! Objects are non-overlapping boxes standing on a flat ground plane.
//! Their returns are sampled on the vertical faces that face the sensor
//! (at the origin), jittered, and carry a class-specific rcs band and the
//! radial component of the object's velocity. Clutter is uniform over the
//! scene bounds with its own rcs band.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::bev_iou;
use crate::io::{quantize, read_boxes, read_cloud_csv, read_json, write_boxes, write_cloud_csv, write_json};
use crate::types::{ClassId, ObjectBox, PointCloud, RadarPoint};

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    /// Inclusive object-count range.
    pub objects: [usize; 2],
    /// Inclusive foreground points per object.
    pub points_per_object: [usize; 2],
    /// Inclusive clutter-point range.
    pub clutter: [usize; 2],
    /// (length, width, height) per class, metres.
    pub sizes: [[f64; 3]; 3],
    /// rcs band per class, then one for clutter.
    pub rcs_bands: [[f64; 2]; 4],
    /// Heading range, radians.
    pub yaw: [f64; 2],
    /// Speed range per class, m/s.
    pub speeds: [[f64; 2]; 3],
    /// Clutter radial-velocity band.
    pub clutter_velocity: [f64; 2],
    /// Gaussian position jitter, metres.
    pub sigma: f64,
    pub ground_z: f64,
    /// Keep-out distance from the sensor, metres along x.
    pub min_range: f64,
    /// Extra BEV clearance between boxes.
    pub clearance: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            objects: [1, 8],
            points_per_object: [2, 12],
            clutter: [20, 80],
            sizes: [[0.6, 0.6, 1.7], [1.8, 0.6, 1.7], [4.0, 1.8, 1.5]],
            rcs_bands: [[-4.0, 0.0], [2.0, 6.0], [9.0, 15.0], [-15.0, -7.0]],
            yaw: [-PI, PI],
            speeds: [[0.5, 2.0], [2.0, 6.0], [3.0, 15.0]],
            clutter_velocity: [-0.5, 0.5],
            sigma: 0.05,
            ground_z: -1.0,
            min_range: 2.0,
            clearance: 0.5,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, r) in [
            ("objects", self.objects),
            ("points_per_object", self.points_per_object),
            ("clutter", self.clutter),
        ] {
            if r[0] > r[1] {
                errs.push(format!("{name} range is empty"));
            }
        }
        if self.points_per_object[0] == 0 {
            errs.push("objects need at least one point".into());
        }
        if self.sizes.iter().flatten().any(|&s| !(s > 0.0)) {
            errs.push("box sizes must be positive".into());
        }
        if self.rcs_bands.iter().chain(&self.speeds).any(|b| !(b[0] <= b[1])) {
            errs.push("rcs / speed bands must be ordered".into());
        }
        if !(self.yaw[0] < self.yaw[1]) {
            errs.push("yaw range is empty".into());
        }
        if !(self.sigma >= 0.0) || !(self.clearance >= 0.0) {
            errs.push("sigma and clearance must be non-negative".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    /// Upper bound on points per scene.
    pub fn max_points(&self) -> usize {
        self.objects[1] * self.points_per_object[1] + self.clutter[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub index: u64,
    pub boxes: Vec<ObjectBox>,
    /// Labelled cloud; foreground points first, grouped by box.
    pub cloud: PointCloud,
    /// Centre of the generating box for every foreground point.
    pub center_targets: Vec<Option<[f64; 3]>>,
}

impl SyntheticScene {
    pub fn labels(&self) -> &[ClassId] {
        self.cloud.labels.as_deref().unwrap_or(&[])
    }
}

/// Independent RNG stream for scene `index` under `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn uniform<R: Rng>(rng: &mut R, band: [f64; 2]) -> f64 {
    if band[0] == band[1] {
        band[0]
    } else {
        rng.random_range(band[0]..band[1])
    }
}

fn count<R: Rng>(rng: &mut R, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

/// Generates scene `index`; all randomness comes from `(params.seed, index)`.
pub fn generate_scene(params: &SceneParams, cfg: &PipelineConfig, index: u64) -> Result<SyntheticScene> {
    params.validate()?;
    let mut rng = scene_rng(params.seed, index);
    let noise = Normal::new(0.0, params.sigma).map_err(|e| Error::InvalidConfig(vec![e.to_string()]))?;
    let n_obj = count(&mut rng, params.objects);
    let bg = ClassId::background(cfg.num_classes);

    let mut boxes: Vec<ObjectBox> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class = ClassId(rng.random_range(0..3));
        let size = params.sizes[class.index()];
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let yaw = rng.random_range(params.yaw[0]..params.yaw[1]);
            let r = 0.5 * size[0].hypot(size[1]);
            let (x_lo, x_hi) = ((cfg.x_min + r).max(params.min_range + r), cfg.x_max - r);
            let (y_lo, y_hi) = (cfg.y_min + r, cfg.y_max - r);
            if x_lo >= x_hi || y_lo >= y_hi {
                break;
            }
            let c = [
                rng.random_range(x_lo..x_hi),
                rng.random_range(y_lo..y_hi),
                params.ground_z + size[2] / 2.0,
            ];
            let cand = ObjectBox::new(c, size, yaw, class);
            let grow = |b: &ObjectBox| {
                let mut g = *b;
                g.size[0] += 2.0 * params.clearance;
                g.size[1] += 2.0 * params.clearance;
                g
            };
            if boxes.iter().all(|b| bev_iou(&grow(b), &grow(&cand)) == 0.0) {
                placed = Some(cand);
                break;
            }
        }
        boxes.push(placed.ok_or(Error::Placement {
            objects: n_obj,
            attempts: MAX_ATTEMPTS,
        })?);
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut centers = Vec::new();
    for b in &boxes {
        let speed = uniform(&mut rng, params.speeds[b.class.index()]);
        let vel = [speed * b.yaw.cos(), speed * b.yaw.sin(), 0.0];
        let faces = visible_faces(b);
        let total: f64 = faces.iter().map(|f| f.2).sum();
        for _ in 0..count(&mut rng, params.points_per_object) {
            // face chosen in proportion to its length
            let mut pick = rng.random_range(0.0..total);
            let mut face = faces[faces.len() - 1];
            for f in &faces {
                if pick < f.2 {
                    face = *f;
                    break;
                }
                pick -= f.2;
            }
            let t: f64 = rng.random_range(0.0..1.0);
            let h: f64 = rng.random_range(0.0..b.size[2]);
            let mut p = [
                face.0[0] + t * (face.1[0] - face.0[0]),
                face.0[1] + t * (face.1[1] - face.0[1]),
                b.center[2] - b.size[2] / 2.0 + h,
            ];
            for v in &mut p {
                *v += noise.sample(&mut rng);
            }
            let p = cfg.clamp(p);
            let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-9);
            let v_r = (vel[0] * p[0] + vel[1] * p[1] + vel[2] * p[2]) / range;
            let rcs = uniform(&mut rng, params.rcs_bands[b.class.index()]);
            points.push(quantized(p, rcs, v_r));
            labels.push(b.class);
            centers.push(Some(b.center));
        }
    }
    for _ in 0..count(&mut rng, params.clutter) {
        let p = [
            rng.random_range(cfg.x_min..cfg.x_max),
            rng.random_range(cfg.y_min..cfg.y_max),
            rng.random_range(cfg.z_min..cfg.z_max),
        ];
        let rcs = uniform(&mut rng, params.rcs_bands[3]);
        let v_r = uniform(&mut rng, params.clutter_velocity);
        points.push(quantized(p, rcs, v_r));
        labels.push(bg);
        centers.push(None);
    }
    let cloud = PointCloud::new(points).with_labels(labels)?;
    Ok(SyntheticScene {
        index,
        boxes,
        cloud,
        center_targets: centers,
    })
}

fn quantized(p: [f64; 3], rcs: f64, v_r: f64) -> RadarPoint {
    RadarPoint::new(quantize(p[0]), quantize(p[1]), quantize(p[2]), quantize(rcs), quantize(v_r))
}

/// Vertical faces whose outward normal points towards the sensor, as
/// (start corner, end corner, length).
fn visible_faces(b: &ObjectBox) -> Vec<([f64; 2], [f64; 2], f64)> {
    let c = b.bev_corners();
    let mut faces = Vec::with_capacity(2);
    for i in 0..4 {
        let (a, e) = (c[i], c[(i + 1) % 4]);
        // CCW corners: outward normal of edge a->e is (dy, -dx)
        let n = [e[1] - a[1], a[0] - e[0]];
        let mid = [(a[0] + e[0]) / 2.0, (a[1] + e[1]) / 2.0];
        if n[0] * mid[0] + n[1] * mid[1] < 0.0 {
            faces.push((a, e, (n[0] * n[0] + n[1] * n[1]).sqrt()));
        }
    }
    if faces.is_empty() {
        faces.push((c[0], c[1], b.size[1]));
    }
    faces
}

/// Per-point (label, offset to the generating box centre).
pub fn gt_targets(scene: &SyntheticScene) -> Vec<(ClassId, Option<[f64; 3]>)> {
    scene
        .cloud
        .points
        .iter()
        .zip(scene.labels())
        .zip(&scene.center_targets)
        .map(|((p, &l), c)| (l, c.map(|c| [c[0] - p.x, c[1] - p.y, c[2] - p.z])))
        .collect()
}

/// Recovers centre targets from labels and boxes: each foreground point
/// goes to the box of its own class whose BEV footprint it is closest to.
pub fn center_targets_from_boxes(cloud: &PointCloud, boxes: &[ObjectBox], num_classes: usize) -> Vec<Option<[f64; 3]>> {
    let labels = cloud.labels.as_deref().unwrap_or(&[]);
    // how far a point sits outside a footprint (negative inside)
    let excess = |b: &ObjectBox, p: [f64; 3]| {
        let l = b.to_local(p);
        (l[0].abs() - b.size[0] / 2.0).max(l[1].abs() - b.size[1] / 2.0)
    };
    cloud
        .points
        .iter()
        .zip(labels)
        .map(|(p, &l)| {
            if l.is_background(num_classes) {
                return None;
            }
            boxes
                .iter()
                .filter(|b| b.class == l)
                .min_by(|a, b| excess(a, p.position()).total_cmp(&excess(b, p.position())))
                .map(|b| b.center)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: u64,
    pub cloud: String,
    pub boxes: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub params: SceneParams,
    pub scenes: Vec<SceneEntry>,
    /// Scenes `[0, train)` are for training, the rest held out.
    pub train: usize,
}

pub fn scene_stem(index: u64) -> String {
    format!("scene_{index:04}")
}

/// Writes `n` scenes plus `manifest.json` into `dir`.
pub fn write_dataset(params: &SceneParams, cfg: &PipelineConfig, n: usize, dir: &Path) -> Result<DatasetManifest> {
    use rayon::prelude::*;
    let scenes: Vec<SyntheticScene> = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_scene(params, cfg, i))
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(n);
    for s in &scenes {
        let stem = scene_stem(s.index);
        let cloud = format!("{stem}.csv");
        let boxes = format!("{stem}.json");
        write_cloud_csv(&dir.join(&cloud), &s.cloud)?;
        write_boxes(&dir.join(&boxes), &s.boxes)?;
        entries.push(SceneEntry {
            index: s.index,
            cloud,
            boxes,
        });
    }
    let manifest = DatasetManifest {
        seed: params.seed,
        params: params.clone(),
        scenes: entries,
        train: split_point(n),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// First 80% of scenes train, the rest test.
pub fn split_point(n: usize) -> usize {
    n * 4 / 5
}

/// In-memory scenes in manifest order.
pub fn generate_dataset(params: &SceneParams, cfg: &PipelineConfig, n: usize) -> Result<Vec<SyntheticScene>> {
    use rayon::prelude::*;
    (0..n as u64)
        .into_par_iter()
        .map(|i| generate_scene(params, cfg, i))
        .collect()
}

pub fn read_dataset(dir: &Path, num_classes: usize) -> Result<(DatasetManifest, Vec<SyntheticScene>)> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for e in &manifest.scenes {
        let cloud = read_cloud_csv(&dir.join(&e.cloud))?;
        if cloud.labels.is_none() {
            return Err(Error::Data(format!("{}: scene cloud has no labels", e.cloud)));
        }
        let boxes = read_boxes(&dir.join(&e.boxes))?;
        let center_targets = center_targets_from_boxes(&cloud, &boxes, num_classes);
        scenes.push(SyntheticScene {
            index: e.index,
            boxes,
            cloud,
            center_targets,
        });
    }
    Ok((manifest, scenes))
}

pub fn scene_paths(dir: &Path, e: &SceneEntry) -> (PathBuf, PathBuf) {
    (dir.join(&e.cloud), dir.join(&e.boxes))
}
