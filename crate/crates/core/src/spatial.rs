//! Exact neighbour queries over small point sets.
//!
//! Both the k-nearest-neighbour search (3D) and the ball query (BEV, 2D)
//! come in two flavours: a brute-force scan and a uniform-grid index. The
//! grid versions must return exactly what the scans return, ties included,
//! so they share the distance and ordering helpers below.

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[inline]
pub fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[inline]
pub fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Ascending distance, ties broken by lower index.
#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// `M x k` neighbour table; `k` is truncated to the base size.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Neighbors {
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

impl Neighbors {
    fn from_rows(rows: Vec<Vec<(f64, usize)>>) -> Self {
        let mut out = Neighbors::default();
        for row in rows {
            out.distances.push(row.iter().map(|e| e.0).collect());
            out.indices.push(row.iter().map(|e| e.1).collect());
        }
        out
    }
}

/// O(M·N) reference search.
pub fn knn_brute(queries: &[[f64; 3]], base: &[[f64; 3]], k: usize) -> Result<Neighbors> {
    if base.is_empty() {
        return Err(Error::EmptyBase);
    }
    let k = k.min(base.len());
    let rows = queries
        .iter()
        .map(|&q| {
            let mut all: Vec<(f64, usize)> =
                base.iter().enumerate().map(|(j, &p)| (dist3(q, p), j)).collect();
            all.sort_by(by_distance_then_index);
            all.truncate(k);
            all
        })
        .collect();
    Ok(Neighbors::from_rows(rows))
}

/// Dense uniform grid over the bounding box of a 3D point set, stored in
/// compressed (cell-sorted) form.
#[derive(Clone, Debug)]
pub struct UniformGrid3 {
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    starts: Vec<usize>,
    members: Vec<usize>,
}

impl UniformGrid3 {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if points.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims: [i64; 3] = std::array::from_fn(|k| ((hi[k] - lo[k]) / cell).floor() as i64 + 1);
        let n_cells = (dims[0] * dims[1] * dims[2]) as usize;
        let cell_ids: Vec<usize> = points
            .iter()
            .map(|&p| {
                let c = Self::cell_coords(lo, cell, dims, p);
                Self::flat(dims, c)
            })
            .collect();
        let mut starts = vec![0usize; n_cells + 1];
        for &c in &cell_ids {
            starts[c + 1] += 1;
        }
        for i in 0..n_cells {
            starts[i + 1] += starts[i];
        }
        let mut fill = starts.clone();
        let mut members = vec![0usize; points.len()];
        for (j, &c) in cell_ids.iter().enumerate() {
            members[fill[c]] = j;
            fill[c] += 1;
        }
        Self {
            origin: lo,
            cell,
            dims,
            starts,
            members,
        }
    }

    fn cell_coords(origin: [f64; 3], cell: f64, dims: [i64; 3], p: [f64; 3]) -> [i64; 3] {
        std::array::from_fn(|k| (((p[k] - origin[k]) / cell).floor() as i64).clamp(0, dims[k] - 1))
    }

    /// Unclamped cell coordinate of an arbitrary query position.
    fn query_cell(&self, p: [f64; 3]) -> [i64; 3] {
        std::array::from_fn(|k| ((p[k] - self.origin[k]) / self.cell).floor() as i64)
    }

    #[inline]
    fn flat(dims: [i64; 3], c: [i64; 3]) -> usize {
        ((c[0] * dims[1] + c[1]) * dims[2] + c[2]) as usize
    }

    fn cell_members(&self, c: [i64; 3]) -> &[usize] {
        let f = Self::flat(self.dims, c);
        &self.members[self.starts[f]..self.starts[f + 1]]
    }

    /// Visits every cell at Chebyshev distance exactly `r` from `center`
    /// that lies inside the grid. Returns false when the whole ring is
    /// outside the grid.
    fn visit_ring(&self, center: [i64; 3], r: i64, mut f: impl FnMut(&[usize])) -> bool {
        let lo: [i64; 3] = std::array::from_fn(|k| (center[k] - r).max(0));
        let hi: [i64; 3] = std::array::from_fn(|k| (center[k] + r).min(self.dims[k] - 1));
        if (0..3).any(|k| lo[k] > hi[k]) {
            return false;
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let on_ring = (x - center[0]).abs() == r
                        || (y - center[1]).abs() == r
                        || (z - center[2]).abs() == r;
                    if on_ring {
                        f(self.cell_members([x, y, z]));
                    }
                }
            }
        }
        true
    }

    /// True when the block of rings `0..=r` around `center` covers the grid.
    fn covers_grid(&self, center: [i64; 3], r: i64) -> bool {
        (0..3).all(|k| center[k] - r <= 0 && center[k] + r >= self.dims[k] - 1)
    }

    /// Lower bound on the distance from `q` to any point in a cell outside
    /// the block of rings `0..=r`.
    fn outside_bound(&self, q: [f64; 3], center: [i64; 3], r: i64) -> f64 {
        let mut b = f64::INFINITY;
        for k in 0..3 {
            let lo_face = self.origin[k] + (center[k] - r) as f64 * self.cell;
            let hi_face = self.origin[k] + (center[k] + r + 1) as f64 * self.cell;
            if center[k] - r > 0 {
                b = b.min(q[k] - lo_face);
            }
            if center[k] + r < self.dims[k] - 1 {
                b = b.min(hi_face - q[k]);
            }
        }
        // cell assignment rounds; stay conservative by a relative hair
        b - 1e-9 * (1.0 + self.cell)
    }
}

/// Grid-accelerated exact KNN. Returns the same table as [`knn_brute`].
pub fn knn_grid(queries: &[[f64; 3]], base: &[[f64; 3]], k: usize) -> Result<Neighbors> {
    if base.is_empty() {
        return Err(Error::EmptyBase);
    }
    let k = k.min(base.len());
    let grid = UniformGrid3::new(base);
    let rows = queries.iter().map(|&q| knn_one(&grid, base, q, k)).collect();
    Ok(Neighbors::from_rows(rows))
}

fn knn_one(grid: &UniformGrid3, base: &[[f64; 3]], q: [f64; 3], k: usize) -> Vec<(f64, usize)> {
    let center = grid.query_cell(q);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    // rings entirely outside the grid contribute nothing; skip straight to
    // the first ring that can intersect it
    let start = (0..3)
        .map(|a| {
            if center[a] < 0 {
                -center[a]
            } else if center[a] >= grid.dims[a] {
                center[a] - grid.dims[a] + 1
            } else {
                0
            }
        })
        .max()
        .unwrap();
    let mut r = start;
    loop {
        grid.visit_ring(center, r, |members| {
            cand.extend(members.iter().map(|&j| (dist3(q, base[j]), j)));
        });
        if grid.covers_grid(center, r) {
            break;
        }
        if cand.len() >= k {
            cand.sort_by(by_distance_then_index);
            cand.truncate(k);
            if cand[k - 1].0 < grid.outside_bound(q, center, r) {
                break;
            }
        }
        r += 1;
    }
    cand.sort_by(by_distance_then_index);
    cand.truncate(k);
    cand
}

/// Reference ball query in BEV: for every centre `i`, all points `j` with
/// `dist2(centers[i], points[j]) <= radii[i]` whose owner differs from `i`,
/// ascending by index. `owner[j] == usize::MAX` means "no owner".
pub fn ball_query_brute(
    centers: &[[f64; 2]],
    radii: &[f64],
    points: &[[f64; 2]],
    owner: &[usize],
) -> Vec<Vec<usize>> {
    centers
        .iter()
        .zip(radii)
        .enumerate()
        .map(|(i, (&c, &r))| {
            (0..points.len())
                .filter(|&j| owner[j] != i && dist2(c, points[j]) <= r)
                .collect()
        })
        .collect()
}

/// Uniform 2D grid over a point set for radius queries.
#[derive(Clone, Debug)]
pub struct UniformGrid2 {
    origin: [f64; 2],
    cell: f64,
    dims: [i64; 2],
    starts: Vec<usize>,
    members: Vec<usize>,
}

impl UniformGrid2 {
    pub fn new(points: &[[f64; 2]], cell: f64) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if points.is_empty() {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        // keep the cell table bounded for tiny radii over wide scenes
        let min_cell = extent / 1024.0;
        let cell = if cell > min_cell && cell > 0.0 {
            cell
        } else if min_cell > 0.0 {
            min_cell
        } else {
            1.0
        };
        let dims: [i64; 2] = std::array::from_fn(|k| ((hi[k] - lo[k]) / cell).floor() as i64 + 1);
        let n_cells = (dims[0] * dims[1]) as usize;
        let ids: Vec<usize> = points
            .iter()
            .map(|&p| {
                let c: [i64; 2] =
                    std::array::from_fn(|k| (((p[k] - lo[k]) / cell).floor() as i64).clamp(0, dims[k] - 1));
                (c[0] * dims[1] + c[1]) as usize
            })
            .collect();
        let mut starts = vec![0usize; n_cells + 1];
        for &c in &ids {
            starts[c + 1] += 1;
        }
        for i in 0..n_cells {
            starts[i + 1] += starts[i];
        }
        let mut fill = starts.clone();
        let mut members = vec![0usize; points.len()];
        for (j, &c) in ids.iter().enumerate() {
            members[fill[c]] = j;
            fill[c] += 1;
        }
        Self {
            origin: lo,
            cell,
            dims,
            starts,
            members,
        }
    }

    /// Visits candidate members of every cell overlapping the square
    /// `[c - r, c + r]^2`, padded by one cell against rounding.
    fn candidates(&self, c: [f64; 2], r: f64, mut f: impl FnMut(usize)) {
        let lo: [i64; 2] = std::array::from_fn(|k| {
            (((c[k] - r - self.origin[k]) / self.cell).floor() as i64 - 1).max(0)
        });
        let hi: [i64; 2] = std::array::from_fn(|k| {
            (((c[k] + r - self.origin[k]) / self.cell).floor() as i64 + 1).min(self.dims[k] - 1)
        });
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                let cell = (x * self.dims[1] + y) as usize;
                for &j in &self.members[self.starts[cell]..self.starts[cell + 1]] {
                    f(j);
                }
            }
        }
    }
}

/// Grid-accelerated ball query; identical output to [`ball_query_brute`].
pub fn ball_query_grid(
    centers: &[[f64; 2]],
    radii: &[f64],
    points: &[[f64; 2]],
    owner: &[usize],
) -> Vec<Vec<usize>> {
    let max_r = radii.iter().copied().fold(0.0, f64::max);
    let grid = UniformGrid2::new(points, max_r);
    centers
        .iter()
        .zip(radii)
        .enumerate()
        .map(|(i, (&c, &r))| {
            let mut hits = Vec::new();
            if r >= 0.0 {
                grid.candidates(c, r, |j| {
                    if owner[j] != i && dist2(c, points[j]) <= r {
                        hits.push(j);
                    }
                });
            }
            hits.sort_unstable();
            hits
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn knn_self_distance_zero() {
        let base = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let n = knn_grid(&[[4.0, 5.0, 6.0]], &base, 1).unwrap();
        assert_eq!(n.indices[0], vec![1]);
        assert_eq!(n.distances[0], vec![0.0]);
    }

    #[test]
    fn knn_collinear_order() {
        let base = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        for f in [knn_brute, knn_grid] {
            let n = f(&[[0.9, 0.0, 0.0]], &base, 2).unwrap();
            assert_eq!(n.indices[0], vec![1, 0]);
        }
    }

    #[test]
    fn knn_truncates_k_and_rejects_empty_base() {
        let base = [[0.0; 3], [1.0, 0.0, 0.0]];
        let n = knn_grid(&[[5.0, 5.0, 5.0]], &base, 10).unwrap();
        assert_eq!(n.indices[0].len(), 2);
        assert!(matches!(knn_grid(&[[0.0; 3]], &[], 1), Err(Error::EmptyBase)));
        assert!(matches!(knn_brute(&[[0.0; 3]], &[], 1), Err(Error::EmptyBase)));
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let base = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        let n = knn_grid(&[[0.0; 3]], &base, 3).unwrap();
        assert_eq!(n.indices[0], vec![0, 1, 2]);
    }

    #[test]
    fn knn_grid_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let base: Vec<[f64; 3]> = (0..256)
            .map(|_| [rng.random_range(0.0..50.0), rng.random_range(-25.0..25.0), rng.random_range(-3.0..2.0)])
            .collect();
        // queries both inside and well outside the base bounding box
        let queries: Vec<[f64; 3]> = (0..1000)
            .map(|_| [rng.random_range(-10.0..60.0), rng.random_range(-30.0..30.0), rng.random_range(-5.0..5.0)])
            .collect();
        assert_eq!(knn_grid(&queries, &base, 4).unwrap(), knn_brute(&queries, &base, 4).unwrap());
    }

    #[test]
    fn ball_query_inclusive_boundary() {
        let centers = [[0.08, 0.08]];
        let points = [[0.08 + 0.25, 0.08], [0.08 + 0.25 + 1e-9, 0.08]];
        let owner = [usize::MAX; 2];
        for f in [ball_query_brute, ball_query_grid] {
            assert_eq!(f(&centers, &[0.25], &points, &owner), vec![vec![0]]);
        }
    }

    #[test]
    fn ball_query_excludes_owner() {
        let centers = [[0.0, 0.0]];
        let points = [[0.0, 0.0], [0.1, 0.0]];
        let owner = [0, usize::MAX];
        assert_eq!(ball_query_grid(&centers, &[0.5], &points, &owner), vec![vec![1]]);
        assert_eq!(ball_query_grid(&centers, &[0.0], &points, &owner), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn ball_grid_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<[f64; 2]> = (0..500).map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
        let centers: Vec<[f64; 2]> = (0..64).map(|_| [rng.random_range(-1.0..11.0), rng.random_range(-1.0..11.0)]).collect();
        let radii: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.5)).collect();
        let owner: Vec<usize> = (0..500).map(|_| rng.random_range(0..80)).collect();
        assert_eq!(
            ball_query_grid(&centers, &radii, &pts, &owner),
            ball_query_brute(&centers, &radii, &pts, &owner)
        );
    }
}
