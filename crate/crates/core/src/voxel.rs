//! Voxel front end: bin the cloud into voxels, encode each voxel, then map
//! voxel features back to points together with each point's offset from its
//! voxel centroid.

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::nn::{ForwardCache, Gradients, Mlp};
use crate::tensor::Matrix;
use crate::types::PointCloud;

#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub index: [usize; 3],
    /// Member point indices, ascending.
    pub points: Vec<usize>,
    /// Arithmetic mean of the member positions.
    pub centroid: [f64; 3],
}

/// Non-empty voxels sorted by linear index (x fastest varying last).
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub origin: [f64; 3],
    pub voxels: Vec<Voxel>,
    /// Slot in `voxels` of every point.
    pub point_voxel: Vec<usize>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    /// Slot of the voxel with the given integer index, if occupied.
    pub fn slot(&self, idx: [usize; 3]) -> Option<usize> {
        let key = self.linear(idx);
        self.voxels
            .binary_search_by_key(&key, |v| self.linear(v.index))
            .ok()
    }
}

/// Integer cell of `p` on a grid, or `None` when outside it.
pub(crate) fn cell_of(p: [f64; 3], origin: [f64; 3], size: [f64; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut idx = [0usize; 3];
    for k in 0..3 {
        let q = ((p[k] - origin[k]) / size[k]).floor();
        if !(q >= 0.0) {
            return None;
        }
        // rounding can push a coordinate just below the max onto the edge
        idx[k] = (q as usize).min(dims[k] - 1);
    }
    Some(idx)
}

/// Assigns every point to `floor((p - origin) / voxel_size)`. The cloud must
/// already be cropped.
pub fn voxelize(cloud: &PointCloud, cfg: &PipelineConfig) -> Result<VoxelGrid> {
    let origin = cfg.mins();
    let size = cfg.voxel_size();
    let dims = cfg.cells(size);
    let mut keyed: Vec<(usize, [usize; 3], usize)> = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        let pos = p.position();
        if !cfg.contains(pos) {
            return Err(Error::OutOfBounds {
                index: i,
                x: p.x,
                y: p.y,
                z: p.z,
            });
        }
        let idx = cell_of(pos, origin, size, dims).expect("in-bounds point has a cell");
        let key = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2];
        keyed.push((key, idx, i));
    }
    keyed.sort_unstable();
    let mut voxels: Vec<Voxel> = Vec::new();
    let mut point_voxel = vec![0; cloud.len()];
    let mut last_key = usize::MAX;
    for (key, idx, i) in keyed {
        if key != last_key {
            voxels.push(Voxel {
                index: idx,
                points: Vec::new(),
                centroid: [0.0; 3],
            });
            last_key = key;
        }
        point_voxel[i] = voxels.len() - 1;
        voxels.last_mut().unwrap().points.push(i);
    }
    for v in &mut voxels {
        let mut c = [0.0; 3];
        for &i in &v.points {
            let p = cloud.points[i].position();
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        v.centroid = c.map(|s| s / v.points.len() as f64);
    }
    Ok(VoxelGrid {
        dims,
        voxel_size: size,
        origin,
        voxels,
        point_voxel,
    })
}

/// Per-point learned features, one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFeatures(pub Matrix);

impl PointFeatures {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Voxel encoding plus what its backward pass needs.
#[derive(Clone, Debug)]
pub struct VoxelEncoding {
    /// `V x d`, one row per non-empty voxel.
    pub features: Matrix,
    /// Mean-pooled channels fed to the encoder.
    pub pooled: Matrix,
    cache: ForwardCache,
}

impl VoxelEncoding {
    pub fn cache(&self) -> &ForwardCache {
        &self.cache
    }
}

/// Mean-pools raw channels (`x, y, z, rcs, v_r, aux..`) per voxel and runs
/// `enc` on the pooled rows.
pub fn voxel_encode(grid: &VoxelGrid, cloud: &PointCloud, enc: &Mlp) -> Result<Matrix> {
    let channels = Matrix::from_rows(
        5 + cloud.aux_len(),
        cloud.points.iter().map(|p| p.channels()),
    )?;
    Ok(voxel_encode_channels(grid, &channels, enc)?.features)
}

/// [`voxel_encode`] over an explicit per-point channel matrix.
pub fn voxel_encode_channels(grid: &VoxelGrid, channels: &Matrix, enc: &Mlp) -> Result<VoxelEncoding> {
    if channels.cols() != enc.in_width() {
        return Err(Error::WidthMismatch {
            context: "voxel encoder input",
            expected: enc.in_width(),
            got: channels.cols(),
        });
    }
    if channels.rows() != grid.point_voxel.len() {
        return Err(Error::Shape("channel rows differ from voxelized point count".into()));
    }
    let w = channels.cols();
    let mut pooled = Matrix::zeros(grid.len(), w);
    for (slot, v) in grid.voxels.iter().enumerate() {
        let row = pooled.row_mut(slot);
        // index-sorted accumulation keeps the reduction order fixed
        for &i in &v.points {
            for (acc, &c) in row.iter_mut().zip(channels.row(i)) {
                *acc += c;
            }
        }
        let n = v.points.len() as f64;
        row.iter_mut().for_each(|a| *a /= n);
    }
    let (features, cache) = enc.forward_cached(&pooled)?;
    Ok(VoxelEncoding {
        features,
        pooled,
        cache,
    })
}

/// Parameter gradients of the voxel encoder for `dL/d(voxel features)`.
pub fn voxel_encode_backward(enc: &Mlp, enc_out: &VoxelEncoding, d_features: &Matrix) -> Result<Gradients> {
    Ok(enc.backward(&enc_out.cache, d_features)?.0)
}

#[derive(Clone, Debug)]
pub struct PointProjection {
    pub features: PointFeatures,
    cache: ForwardCache,
}

impl PointProjection {
    pub fn cache(&self) -> &ForwardCache {
        &self.cache
    }
}

/// `proj(concat(voxel feature, p - voxel centroid))` for every point.
pub fn voxel_to_point_features(
    grid: &VoxelGrid,
    voxel_feats: &Matrix,
    cloud: &PointCloud,
    proj: &Mlp,
) -> Result<PointFeatures> {
    Ok(project_points(grid, voxel_feats, cloud, proj)?.features)
}

pub fn project_points(
    grid: &VoxelGrid,
    voxel_feats: &Matrix,
    cloud: &PointCloud,
    proj: &Mlp,
) -> Result<PointProjection> {
    let d = voxel_feats.cols();
    if proj.in_width() != d + 3 {
        return Err(Error::WidthMismatch {
            context: "point projection input",
            expected: proj.in_width(),
            got: d + 3,
        });
    }
    if voxel_feats.rows() != grid.len() || cloud.len() != grid.point_voxel.len() {
        return Err(Error::Shape("voxel features, grid and cloud disagree".into()));
    }
    let input = point_projection_input(grid, voxel_feats, cloud);
    let (out, cache) = proj.forward_cached(&input)?;
    Ok(PointProjection {
        features: PointFeatures(out),
        cache,
    })
}

/// Rows `[voxel feature | p - centroid]`, one per point.
pub fn point_projection_input(grid: &VoxelGrid, voxel_feats: &Matrix, cloud: &PointCloud) -> Matrix {
    let d = voxel_feats.cols();
    let mut input = Matrix::zeros(cloud.len(), d + 3);
    for (i, p) in cloud.points.iter().enumerate() {
        let slot = grid.point_voxel[i];
        let c = grid.voxels[slot].centroid;
        let row = input.row_mut(i);
        row[..d].copy_from_slice(voxel_feats.row(slot));
        row[d] = p.x - c[0];
        row[d + 1] = p.y - c[1];
        row[d + 2] = p.z - c[2];
    }
    input
}

/// Backward of [`project_points`]: projection gradients and
/// `dL/d(voxel features)` summed over each voxel's members.
pub fn project_points_backward(
    grid: &VoxelGrid,
    proj: &Mlp,
    projection: &PointProjection,
    d_point: &Matrix,
) -> Result<(Gradients, Matrix)> {
    let (g, d_in) = proj.backward(&projection.cache, d_point)?;
    let d = proj.in_width() - 3;
    let mut d_vox = Matrix::zeros(grid.len(), d);
    for (slot, v) in grid.voxels.iter().enumerate() {
        let row = d_vox.row_mut(slot);
        for &i in &v.points {
            for (acc, &gv) in row.iter_mut().zip(&d_in.row(i)[..d]) {
                *acc += gv;
            }
        }
    }
    Ok((g, d_vox))
}
