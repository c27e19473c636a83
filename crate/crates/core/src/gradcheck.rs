//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check perturbs one coordinate by `±h`, re-evaluates the loss and
//! compares `(f(x+h) - f(x-h)) / 2h` with the analytic gradient. A
//! coordinate is skipped when either perturbation changes a discrete
//! choice of the forward pass (relu sign, pooling winner, smooth-L1 branch),
//! because the function is not differentiable across that switch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::{det_rows, forward, scene_gradients, scene_loss_detached, Sd4rModel, Targets, Trace, HEAD_NAMES};
use crate::nn::{det_loss, seg_loss, vote_loss, BoxTarget, DetLossParams, Mlp};
use crate::synth::{generate_scene, SceneParams};
use crate::tensor::Matrix;
use crate::types::{ClassId, PointCloud};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Denominator floor of the relative error, so gradients that are
/// numerically zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }
}

/// Evenly strided subset of `0..n` with at most `max` entries.
pub fn sample_coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Compares `analytic` with central differences of `eval` at the given
/// coordinates of `x0`. `eval` returns the loss and a signature of the
/// discrete choices it made.
pub fn check_coordinates<S: PartialEq>(
    name: &str,
    x0: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    tol: f64,
    mut eval: impl FnMut(&[f64]) -> Result<(f64, S)>,
) -> Result<CheckResult> {
    let (_, base) = eval(x0)?;
    let mut x = x0.to_vec();
    let mut res = CheckResult {
        name: name.to_string(),
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        tolerance: tol,
    };
    for &i in coords {
        x[i] = x0[i] + h;
        let (fp, sp) = eval(&x)?;
        x[i] = x0[i] - h;
        let (fm, sm) = eval(&x)?;
        x[i] = x0[i];
        if sp != base || sm != base {
            res.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        res.max_rel_error = res.max_rel_error.max(rel_error(analytic[i], numeric));
        res.checked += 1;
    }
    Ok(res)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes agree")
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Checks an MLP's parameter and input gradients under the loss
/// `sum(R * mlp(x))` for a fixed random `R`. Returns the larger error.
pub fn grad_check_mlp(mlp: &Mlp, x: &Matrix, h: f64, tol: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_matrix(x.rows(), mlp.out_width(), &mut rng);
    let (_, cache) = mlp.forward_cached(x)?;
    let (g, dx) = mlp.backward(&cache, &r)?;
    let p0 = mlp.params();
    let mut probe = mlp.clone();
    let params = check_coordinates("params", &p0, &g.flat(), &sample_coords(p0.len(), 400), h, tol, |p| {
        probe.set_params(p)?;
        let (y, c) = probe.forward_cached(x)?;
        Ok((dot(&y, &r), c.relu_pattern(&probe)))
    })?;
    let inputs = check_coordinates(
        "inputs",
        x.as_slice(),
        dx.as_slice(),
        &sample_coords(x.as_slice().len(), 400),
        h,
        tol,
        |v| {
            let xm = Matrix::from_vec(x.rows(), x.cols(), v.to_vec())?;
            let (y, c) = mlp.forward_cached(&xm)?;
            Ok((dot(&y, &r), c.relu_pattern(mlp)))
        },
    )?;
    Ok(CheckResult {
        name: "mlp".into(),
        max_rel_error: params.max_rel_error.max(inputs.max_rel_error),
        checked: params.checked + inputs.checked,
        skipped: params.skipped + inputs.skipped,
        tolerance: tol,
    })
}

pub fn grad_check_seg_loss(logits: &Matrix, labels: &[ClassId], h: f64, tol: f64) -> Result<CheckResult> {
    let (_, g) = seg_loss(logits, labels)?;
    let coords: Vec<usize> = (0..g.as_slice().len()).collect();
    check_coordinates("seg_loss", logits.as_slice(), g.as_slice(), &coords, h, tol, |v| {
        let m = Matrix::from_vec(logits.rows(), logits.cols(), v.to_vec())?;
        Ok((seg_loss(&m, labels)?.0, ()))
    })
}

pub fn grad_check_vote_loss(
    positions: &[[f64; 3]],
    offsets: &Matrix,
    labels: &[ClassId],
    centers: &[Option<[f64; 3]>],
    h: f64,
    tol: f64,
) -> Result<CheckResult> {
    let (_, g) = vote_loss(positions, offsets, labels, centers, 1.0)?;
    let coords: Vec<usize> = (0..g.as_slice().len()).collect();
    check_coordinates("vote_loss", offsets.as_slice(), g.as_slice(), &coords, h, tol, |v| {
        let m = Matrix::from_vec(offsets.rows(), offsets.cols(), v.to_vec())?;
        Ok((vote_loss(positions, &m, labels, centers, 1.0)?.0, vote_branches(positions, &m, labels, centers)))
    })
}

/// Which side of the smooth-L1 switch every supervised offset lies on.
fn vote_branches(
    positions: &[[f64; 3]],
    offsets: &Matrix,
    labels: &[ClassId],
    centers: &[Option<[f64; 3]>],
) -> Vec<bool> {
    let mut b = Vec::new();
    for (i, c) in centers.iter().enumerate() {
        let Some(c) = c else { continue };
        let k = labels[i].0;
        for a in 0..3 {
            b.push((positions[i][a] + offsets.row(i)[3 * k + a] - c[a]).abs() < 1.0);
        }
    }
    b
}

fn det_branches(out: &Matrix, targets: &[Option<BoxTarget>]) -> Vec<bool> {
    let w = out.cols();
    let mut b = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let row = out.row(i);
            for (j, r) in t.residuals.iter().enumerate() {
                b.push((row[w - 8 + j] - r).abs() < 1.0);
            }
        }
    }
    b
}

pub fn grad_check_det_loss(
    outputs: &Matrix,
    targets: &[Option<BoxTarget>],
    multiplicity: &[f64],
    h: f64,
    tol: f64,
) -> Result<CheckResult> {
    let p = DetLossParams::default();
    let (_, g) = det_loss(outputs, targets, multiplicity, p)?;
    let coords: Vec<usize> = (0..g.as_slice().len()).collect();
    check_coordinates("det_loss", outputs.as_slice(), g.as_slice(), &coords, h, tol, |v| {
        let m = Matrix::from_vec(outputs.rows(), outputs.cols(), v.to_vec())?;
        Ok((det_loss(&m, targets, multiplicity, p)?.0, det_branches(&m, targets)))
    })
}

/// Discrete state of a full scene evaluation.
fn scene_signature(model: &Sd4rModel, cloud: &PointCloud, t: Targets, cfg: &PipelineConfig, tr: &Trace) -> Result<Vec<u64>> {
    let mut sig = tr.signature(&model.heads);
    let rows = det_rows(&tr.bev, t.boxes, cfg);
    let (out, cache) = model.heads.det_head.forward_cached(&rows.head_in.input)?;
    let flags = cache
        .relu_pattern(&model.heads.det_head)
        .into_iter()
        .chain(det_branches(&out, &rows.targets))
        .chain(vote_branches(&cloud.positions(), &tr.vote.offsets, t.labels, t.centers));
    sig.extend(flags.map(u64::from));
    Ok(sig)
}

/// End-to-end check of every head on one scene: the total loss is
/// differentiated through the whole network with the detached quantities
/// held at their values in the unperturbed pass.
pub fn grad_check_scene(
    model: &Sd4rModel,
    cloud: &PointCloud,
    t: Targets,
    cfg: &PipelineConfig,
    h: f64,
    tol: f64,
    max_per_head: usize,
) -> Result<Vec<CheckResult>> {
    let base = forward(model, cloud, cfg)?;
    let (_, grads) = scene_gradients(model, cloud, t, cfg)?;
    let mut out = Vec::new();
    for (name, g) in HEAD_NAMES.iter().zip(grads.iter()) {
        let head = model.heads.get(name).expect("known head");
        let p0 = head.params();
        let mut probe = model.clone();
        let coords = sample_coords(p0.len(), max_per_head);
        let r = check_coordinates(name, &p0, &g.flat(), &coords, h, tol, |p| {
            probe.heads.get_mut(name).expect("known head").set_params(p)?;
            let (loss, tr) = scene_loss_detached(&probe, cloud, t, cfg, &base)?;
            Ok((loss.total, scene_signature(&probe, cloud, t, cfg, &tr)?))
        })?;
        out.push(r);
    }
    Ok(out)
}

/// Moves every bias off zero so that no relu starts exactly at its kink.
pub fn jitter_biases(model: &mut Sd4rModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for head in model.heads.iter_mut() {
        for l in head.layers_mut() {
            for b in &mut l.bias {
                *b += rng.random_range(-0.1..0.1);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

/// Every head in isolation, every loss, and every head end to end on a
/// synthetic scene. Uses `model` when given, else a fresh one from `seed`.
pub fn run_all(cfg: &PipelineConfig, model: Option<&Sd4rModel>, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let model = match model {
        Some(m) => m.clone(),
        None => {
            let mut m = Sd4rModel::init(cfg, seed);
            jitter_biases(&mut m, seed);
            m
        }
    };
    let scene = (0..16)
        .map(|i| generate_scene(&SceneParams::default(), cfg, seed.wrapping_add(i)))
        .find(|s| s.as_ref().is_ok_and(|s| !s.cloud.is_empty()))
        .unwrap_or_else(|| Err(Error::Data("no usable scene".into())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    for (name, mlp) in HEAD_NAMES.iter().zip(model.heads.iter()) {
        let x = random_matrix(6, mlp.in_width(), &mut rng);
        let mut r = grad_check_mlp(mlp, &x, h, tol, rng.random())?;
        r.name = format!("{name} (isolated)");
        results.push(r);
    }

    let tr = forward(&model, &scene.cloud, cfg)?;
    let labels = scene.labels();
    let mut r = grad_check_seg_loss(&tr.vote.logits, labels, h, tol)?;
    r.name = "seg_loss".into();
    results.push(r);
    results.push(grad_check_vote_loss(
        &scene.cloud.positions(),
        &tr.vote.offsets,
        labels,
        &scene.center_targets,
        h,
        tol,
    )?);
    let rows = det_rows(&tr.bev, &scene.boxes, cfg);
    let out = model.heads.det_head.forward(&rows.head_in.input)?;
    results.push(grad_check_det_loss(&out, &rows.targets, &rows.multiplicity, h, tol)?);

    for mut r in grad_check_scene(&model, &scene.cloud, Targets::from(&scene), cfg, h, tol, 48)? {
        r.name = format!("{} (end to end)", r.name);
        results.push(r);
    }
    Ok(GradCheckReport {
        step: h,
        tolerance: tol,
        results,
    })
}
