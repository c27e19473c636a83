//! Property-based checks of the structural invariants of every stage.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sd4r::checkpoint::{self, Checkpoint};
use sd4r::eval::{ap_from_matches, bev_iou, region_filter_sensor, EvalRegion};
use sd4r::fpg::{
    densify_votes, filter_foreground, foreground_confidence, generate_virtual, interp_features, interp_weights,
    softmax_rows, ForegroundSet, VoteOutput,
};
use sd4r::lqe::{adaptive_radius, aggregate_neighbors, ball_query, fuse, ClassCounts};
use sd4r::model::{head_shapes, HeadGrads, Sd4rModel, Trainer};
use sd4r::nn::loss::{seg_loss, total_loss, vote_loss};
use sd4r::nn::Mlp;
use sd4r::pillars::{gather_bev, nms, pillar_encode, pillar_of, pillarize, scatter_bev, Detection};
use sd4r::spatial::{knn_brute, knn_grid};
use sd4r::synth::{generate_dataset, generate_scene, SceneParams};
use sd4r::voxel::{voxel_encode, voxel_to_point_features, voxelize};
use sd4r::{crop_to_bounds, validate_config, ClassId, Matrix, ObjectBox, PipelineConfig, PointCloud, RadarPoint};

fn point_in(cfg: &PipelineConfig) -> impl Strategy<Value = RadarPoint> {
    (
        cfg.x_min..cfg.x_max,
        cfg.y_min..cfg.y_max,
        cfg.z_min..cfg.z_max,
        -20.0..20.0f64,
        -15.0..15.0f64,
    )
        .prop_map(|(x, y, z, rcs, v)| RadarPoint::new(x, y, z, rcs, v))
}

fn cloud_in(cfg: &PipelineConfig, max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(point_in(cfg), 1..max).prop_map(PointCloud::new)
}

/// Points clustered into a small region so pillars and voxels are shared.
fn clustered_cloud(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec((10.0..12.0f64, -1.0..1.0f64, -1.0..1.0f64, -5.0..5.0f64), 1..max)
        .prop_map(|v| PointCloud::new(v.into_iter().map(|(x, y, z, r)| RadarPoint::new(x, y, z, r, 0.0)).collect()))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn vote_output(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize, offset_scale: f64) -> VoteOutput {
    VoteOutput {
        logits: random_matrix(rng, n, k, 4.0),
        offsets: if offset_scale == 0.0 {
            Matrix::zeros(n, 3 * k)
        } else {
            random_matrix(rng, n, 3 * k, offset_scale)
        },
        feats: random_matrix(rng, n, d, 1.0),
    }
}

fn small_cfg() -> PipelineConfig {
    PipelineConfig {
        feature_dim: 4,
        hidden_dim: 6,
        pillar_channels: 5,
        ..Default::default()
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

#[test]
fn default_config_is_valid() {
    assert!(validate_config(&PipelineConfig::default()).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crop_is_idempotent_and_order_preserving(
        pts in prop::collection::vec((-10.0..60.0f64, -30.0..30.0f64, -5.0..5.0f64), 0..80)
    ) {
        let cfg = PipelineConfig::default();
        let cloud = PointCloud::new(pts.iter().map(|&(x, y, z)| RadarPoint::new(x, y, z, 0.0, 0.0)).collect());
        let once = crop_to_bounds(&cloud, &cfg);
        prop_assert_eq!(&crop_to_bounds(&once, &cfg), &once);
        let expected: Vec<&RadarPoint> = cloud.points.iter().filter(|p| cfg.contains(p.position())).collect();
        prop_assert_eq!(once.points.iter().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn voxels_partition_the_cloud(cloud in cloud_in(&PipelineConfig::default(), 200)) {
        let grid = voxelize(&cloud, &PipelineConfig::default()).unwrap();
        let total: usize = grid.voxels.iter().map(|v| v.points.len()).sum();
        prop_assert_eq!(total, cloud.len());
        let mut seen = vec![0; cloud.len()];
        for (vi, v) in grid.voxels.iter().enumerate() {
            for &p in &v.points {
                seen[p] += 1;
                prop_assert_eq!(grid.point_voxel[p], vi);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn voxel_groupings_survive_lattice_translation(
        pts in prop::collection::vec((0..256i32, -128..128i32, -64..64i32), 1..60),
        shift in (0..8i32, -8..8i32, 0..4i32),
    ) {
        // dyadic voxel size and coordinates keep every boundary test exact
        let cfg = PipelineConfig {
            x_min: 0.0, x_max: 64.0, y_min: -32.0, y_max: 32.0, z_min: -4.0, z_max: 4.0,
            voxel_size_x: 0.25, voxel_size_y: 0.25, voxel_size_z: 0.5, pillar_size: 0.25,
            ..Default::default()
        };
        let mk = |dx: f64, dy: f64, dz: f64| PointCloud::new(
            pts.iter().map(|&(x, y, z)| RadarPoint::new(
                x as f64 / 8.0 + dx, y as f64 / 8.0 + dy, z as f64 / 32.0 + dz, 0.0, 0.0,
            )).collect(),
        );
        let a = voxelize(&mk(0.0, 0.0, 0.0), &cfg).unwrap();
        let (sx, sy, sz) = (shift.0 as f64 * 0.25, shift.1 as f64 * 0.25, shift.2 as f64 * 0.5);
        let b = voxelize(&mk(sx, sy, sz), &cfg).unwrap();
        let groups = |g: &sd4r::voxel::VoxelGrid| {
            let mut v: Vec<Vec<usize>> = g.voxels.iter().map(|v| v.points.clone()).collect();
            v.sort();
            v
        };
        prop_assert_eq!(groups(&a), groups(&b));
        for (va, vb) in a.voxels.iter().zip(&b.voxels) {
            prop_assert_eq!(vb.index[0] as i64 - va.index[0] as i64, shift.0 as i64);
            prop_assert_eq!(vb.index[1] as i64 - va.index[1] as i64, shift.1 as i64);
            prop_assert_eq!(vb.index[2] as i64 - va.index[2] as i64, shift.2 as i64);
        }
    }

    #[test]
    fn point_features_are_permutation_equivariant(cloud in clustered_cloud(60), seed in any::<u64>()) {
        let cfg = small_cfg();
        let model = Sd4rModel::init(&cfg, seed);
        let run = |c: &PointCloud| {
            let grid = voxelize(c, &cfg).unwrap();
            let vf = voxel_encode(&grid, c, &model.heads.voxel_enc).unwrap();
            voxel_to_point_features(&grid, &vf, c, &model.heads.point_proj).unwrap().0
        };
        let perm = permutation(cloud.len(), seed);
        let permuted = cloud.subset(&perm);
        let (a, b) = (run(&cloud), run(&permuted));
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in a.row(old).iter().zip(b.row(new)) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn softmax_and_confidence_ranges(seed in any::<u64>(), n in 1..50usize, k in 2..6usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = softmax_rows(&random_matrix(&mut rng, n, k, 200.0));
        for r in probs.iter_rows() {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(foreground_confidence(&probs).iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn raising_tau_never_adds_points(seed in any::<u64>(), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = softmax_rows(&random_matrix(&mut rng, 40, 4, 3.0));
        let pi = foreground_confidence(&probs);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = filter_foreground(&probs, &pi, lo);
        let b = filter_foreground(&probs, &pi, hi);
        prop_assert!(b.indices.iter().all(|i| a.indices.contains(i)));
    }

    #[test]
    fn knn_ignores_base_order(
        base in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 1..100),
        queries in prop::collection::vec((-6.0..6.0f64, -6.0..6.0f64, -6.0..6.0f64), 1..20),
        k in 1..6usize,
        seed in any::<u64>(),
    ) {
        let base: Vec<[f64; 3]> = base.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        let queries: Vec<[f64; 3]> = queries.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        let a = knn_grid(&queries, &base, k).unwrap();
        prop_assert_eq!(&a, &knn_brute(&queries, &base, k).unwrap());
        let perm = permutation(base.len(), seed);
        let shuffled: Vec<[f64; 3]> = perm.iter().map(|&i| base[i]).collect();
        let b = knn_grid(&queries, &shuffled, k).unwrap();
        prop_assert_eq!(&a.distances, &b.distances);
        // same distances; every returned index really sits at its distance
        for (q, (row, drow)) in queries.iter().zip(b.indices.iter().zip(&b.distances)) {
            for (&j, &dj) in row.iter().zip(drow) {
                prop_assert_eq!(sd4r::spatial::dist3(*q, shuffled[j]), dj);
            }
        }
        // with no tie at the cut-off the neighbour sets map onto each other
        for (qi, q) in queries.iter().enumerate() {
            let mut all: Vec<f64> = base.iter().map(|&p| sd4r::spatial::dist3(*q, p)).collect();
            all.sort_by(f64::total_cmp);
            let kk = a.indices[qi].len();
            if kk == all.len() || all[kk - 1] < all[kk] {
                let mut pa: Vec<usize> = a.indices[qi].clone();
                let mut pb: Vec<usize> = b.indices[qi].iter().map(|&j| perm[j]).collect();
                pa.sort();
                pb.sort();
                prop_assert_eq!(pa, pb);
            }
        }
    }

    #[test]
    fn interpolation_stays_inside_the_neighbour_envelope(seed in any::<u64>(), m in 1..20usize, k in 1..6usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist: Vec<Vec<f64>> = (0..m).map(|_| (0..k).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let w = interp_weights(&dist, 1e-8);
        let nf: Vec<Matrix> = (0..m).map(|_| random_matrix(&mut rng, k, 5, 3.0)).collect();
        let out = interp_features(&w, &nf).unwrap();
        for (i, row) in w.iter().enumerate() {
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for c in 0..5 {
                let col: Vec<f64> = (0..k).map(|j| nf[i][(j, c)]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[(i, c)] >= lo - 1e-12 && out[(i, c)] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn zero_offsets_reproduce_positions(cloud in cloud_in(&PipelineConfig::default(), 60), seed in any::<u64>()) {
        let cfg = PipelineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cloud.len();
        let fg = ForegroundSet {
            indices: (0..n).collect(),
            classes: (0..n).map(|_| ClassId(rng.random_range(0..3))).collect(),
            confidence: vec![1.0; n],
        };
        let pos = cloud.positions();
        let v = generate_virtual(&pos, &fg, &Matrix::zeros(n, 12), &cfg);
        for (i, (p, src)) in v.iter().enumerate() {
            prop_assert_eq!(*src, i);
            prop_assert_eq!(*p, pos[i]);
        }
    }

    #[test]
    fn dense_cloud_doubles_the_foreground(cloud in clustered_cloud(60), seed in any::<u64>()) {
        let cfg = PipelineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vote = vote_output(&mut rng, cloud.len(), 4, 3, 0.5);
        let d = densify_votes(&cloud, &vote, &cfg).unwrap();
        prop_assert_eq!(d.dense.len(), 2 * d.foreground.len());
        prop_assert_eq!(d.dense.virtual_count(), d.foreground.len());
    }

    #[test]
    fn virtual_points_translate_with_the_cloud(
        cloud in clustered_cloud(40),
        seed in any::<u64>(),
        t in (-5.0..5.0f64, -5.0..5.0f64, -0.5..0.5f64),
    ) {
        let cfg = PipelineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // the vote head sees no absolute position, so its output is fixed
        let vote = vote_output(&mut rng, cloud.len(), 4, 3, 0.3);
        let moved = PointCloud::new(
            cloud.points.iter().map(|p| RadarPoint::new(p.x + t.0, p.y + t.1, p.z + t.2, p.rcs, p.v_r)).collect(),
        );
        let a = densify_votes(&cloud, &vote, &cfg).unwrap().dense;
        let b = densify_votes(&moved, &vote, &cfg).unwrap().dense;
        prop_assert_eq!(a.len(), b.len());
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert!((q.x - p.x - t.0).abs() < 1e-9);
            prop_assert!((q.y - p.y - t.1).abs() < 1e-9);
            prop_assert!((q.z - p.z - t.2).abs() < 1e-9);
        }
    }

    #[test]
    fn pillars_partition_and_count_drops(cloud in clustered_cloud(120), cap in 1..8usize, seed in any::<u64>()) {
        let cfg = PipelineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vote = vote_output(&mut rng, cloud.len(), 4, 3, 0.0);
        let d = densify_votes(&cloud, &vote, &cfg).unwrap().dense;
        prop_assume!(!d.is_empty());
        let grid = pillarize(&d, &cfg, cap).unwrap();
        let kept: usize = grid.members.iter().map(Vec::len).sum();
        prop_assert_eq!(kept + grid.dropped, d.len());
        prop_assert_eq!(grid.point_pillar.len(), d.len());
        let mut per_cell = vec![0usize; grid.len()];
        for &p in &grid.point_pillar {
            per_cell[p] += 1;
        }
        let drops: usize = per_cell.iter().map(|&n| n.saturating_sub(cap)).sum();
        prop_assert_eq!(grid.dropped, drops);
        for (p, m) in grid.members.iter().enumerate() {
            prop_assert_eq!(m.len(), per_cell[p].min(cap));
            for &i in m {
                prop_assert_eq!(grid.point_pillar[i], p);
                prop_assert!(pillar_of(d.points[i].x, d.points[i].y, &cfg) == Some(grid.coords[p]));
            }
        }
    }

    #[test]
    fn pillar_encoding_ignores_point_order(cloud in clustered_cloud(60), seed in any::<u64>()) {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vote = vote_output(&mut rng, cloud.len(), 4, cfg.feature_dim, 0.0);
        let perm = permutation(cloud.len(), seed ^ 1);
        let permuted_vote = VoteOutput {
            logits: vote.logits.select_rows(&perm),
            offsets: vote.offsets.select_rows(&perm),
            feats: vote.feats.select_rows(&perm),
        };
        let model = Sd4rModel::init(&cfg, seed);
        let enc = |c: &PointCloud, v: &VoteOutput| {
            let d = densify_votes(c, v, &cfg).unwrap().dense;
            let grid = pillarize(&d, &cfg, 1000).unwrap();
            let f = pillar_encode(&grid, &model.heads.pillar_enc).unwrap();
            let mut rows: Vec<([usize; 2], Vec<f64>)> =
                grid.coords.iter().enumerate().map(|(p, &c)| (c, f.row(p).to_vec())).collect();
            rows.sort_by_key(|a| a.0);
            rows
        };
        let a = enc(&cloud, &vote);
        let b = enc(&cloud.subset(&perm), &permuted_vote);
        prop_assert_eq!(a.len(), b.len());
        for ((ca, fa), (cb, fb)) in a.iter().zip(&b) {
            prop_assert_eq!(ca, cb);
            for (x, y) in fa.iter().zip(fb) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn scatter_then_gather_is_identity(
        cells in prop::collection::btree_set((0..20usize, 0..30usize), 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[usize; 2]> = cells.into_iter().map(|(a, b)| [a, b]).collect();
        let f = random_matrix(&mut rng, coords.len(), 3, 5.0);
        let bev = scatter_bev(&f, &coords, (20, 30)).unwrap();
        prop_assert_eq!(gather_bev(&bev, &coords), f);
    }

    #[test]
    fn nms_output_is_an_antichain(
        boxes in prop::collection::vec((0.0..10.0f64, 0.0..10.0f64, 0.5..4.0f64, 0.5..4.0f64, -3.2..3.2f64, 0.0..1.0f64), 0..40)
    ) {
        let mut dets: Vec<Detection> = boxes
            .into_iter()
            .map(|(x, y, l, w, yaw, s)| Detection {
                object: ObjectBox::new([x, y, 0.0], [l, w, 1.5], yaw, ClassId::CAR),
                score: s,
            })
            .collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let kept = nms(dets, 0.5, 100);
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                prop_assert!(bev_iou(&kept[i].object, &kept[j].object) <= 0.5);
            }
        }
    }

    #[test]
    fn radius_is_a_convex_combination_and_scales(
        counts in prop::collection::vec((0..10usize, 0..10usize, 0..10usize), 1..30),
        s in 0.1..10.0f64,
    ) {
        let w = [0.2, 0.3, 0.4];
        let cc = ClassCounts {
            per_class: counts.iter().map(|&(a, b, c)| vec![a, b, c]).collect(),
            fore: counts.iter().map(|&(a, b, c)| a + b + c).collect(),
        };
        let r = adaptive_radius(&cc, &w, 0.2);
        let scaled = adaptive_radius(&cc, &w.map(|x| x * s), 0.2);
        for i in 0..counts.len() {
            if cc.fore[i] == 0 {
                prop_assert_eq!(r.radii[i], 0.2);
                prop_assert_eq!(scaled.radii[i], 0.2);
            } else {
                prop_assert!(r.radii[i] >= 0.2 - 1e-15 && r.radii[i] <= 0.4 + 1e-15);
                prop_assert!((scaled.radii[i] - s * r.radii[i]).abs() <= 1e-12 * s);
            }
        }
    }

    #[test]
    fn ball_query_grows_with_the_radius(cloud in clustered_cloud(80), seed in any::<u64>()) {
        let cfg = PipelineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vote = vote_output(&mut rng, cloud.len(), 4, 3, 0.2);
        let d = densify_votes(&cloud, &vote, &cfg).unwrap().dense;
        prop_assume!(!d.is_empty());
        let grid = pillarize(&d, &cfg, 32).unwrap();
        let centers: Vec<[f64; 2]> = grid.coords.iter().map(|&c| sd4r::pillars::pillar_center(c, &cfg)).collect();
        let r1: Vec<f64> = centers.iter().map(|_| rng.random_range(0.0..0.5)).collect();
        let r2: Vec<f64> = r1.iter().map(|&r| r + rng.random_range(0.0..0.5)).collect();
        let a = ball_query(&centers, &d, &r1, &grid.point_pillar);
        let b = ball_query(&centers, &d, &r2, &grid.point_pillar);
        for (qa, qb) in a.neighbors.iter().zip(&b.neighbors) {
            prop_assert!(qa.iter().all(|j| qb.contains(j)));
        }
    }

    #[test]
    fn aggregation_ignores_neighbour_order(cloud in clustered_cloud(60), seed in any::<u64>()) {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vote = vote_output(&mut rng, cloud.len(), 4, cfg.feature_dim, 0.2);
        let d = densify_votes(&cloud, &vote, &cfg).unwrap().dense;
        prop_assume!(!d.is_empty());
        let grid = pillarize(&d, &cfg, 32).unwrap();
        let centers: Vec<[f64; 2]> = grid.coords.iter().map(|&c| sd4r::pillars::pillar_center(c, &cfg)).collect();
        let radii = vec![0.6; centers.len()];
        let q = ball_query(&centers, &d, &radii, &grid.point_pillar);
        let mut shuffled = q.clone();
        for (i, n) in shuffled.neighbors.iter_mut().enumerate() {
            let p = permutation(n.len(), seed ^ i as u64);
            *n = p.iter().map(|&j| n[j]).collect();
        }
        let pi: Vec<f64> = (0..d.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let model = Sd4rModel::init(&cfg, seed);
        let a = aggregate_neighbors(&q, &d.features, &pi, &model.heads.lqe_agg).unwrap();
        let b = aggregate_neighbors(&shuffled, &d.features, &pi, &model.heads.lqe_agg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn zero_fusion_reduces_to_addition(seed in any::<u64>(), p in 1..20usize) {
        let cfg = small_cfg();
        let (widths, acts) = head_shapes(&cfg).lqe_fusion;
        let zero = Mlp::zeros(&widths, &acts);
        let c = cfg.pillar_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fp = random_matrix(&mut rng, p, c, 3.0);
        let fq = random_matrix(&mut rng, p, c, 3.0);
        let out = fuse(&fp, &fq, &zero).unwrap();
        for i in 0..p {
            for j in 0..c {
                prop_assert_eq!(out[(i, j)], fp[(i, j)] + fq[(i, j)]);
            }
        }
    }

    #[test]
    fn losses_are_nonnegative_and_minimal_at_targets(seed in any::<u64>(), n in 1..30usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_matrix(&mut rng, n, 4, 5.0);
        let labels: Vec<ClassId> = (0..n).map(|_| ClassId(rng.random_range(0..4))).collect();
        let (l, _) = seg_loss(&logits, &labels).unwrap();
        prop_assert!(l >= 0.0);
        let mut onehot = Matrix::zeros(n, 4);
        for (i, c) in labels.iter().enumerate() {
            onehot[(i, c.index())] = 40.0;
        }
        let (best, _) = seg_loss(&onehot, &labels).unwrap();
        prop_assert!(best <= l && best < 1e-15);

        let pos: Vec<[f64; 3]> = (0..n).map(|_| [rng.random_range(0.0..10.0), 0.0, 0.0]).collect();
        let classes: Vec<ClassId> = (0..n).map(|_| ClassId(rng.random_range(0..3))).collect();
        let centers: Vec<Option<[f64; 3]>> = pos.iter().map(|p| Some([p[0] + 1.0, 0.5, -0.25])).collect();
        let mut exact = Matrix::zeros(n, 12);
        for i in 0..n {
            let b = 3 * classes[i].index();
            exact[(i, b)] = 1.0;
            exact[(i, b + 1)] = 0.5;
            exact[(i, b + 2)] = -0.25;
        }
        let (hit, _) = vote_loss(&pos, &exact, &classes, &centers, 1.0).unwrap();
        prop_assert_eq!(hit, 0.0);
        exact[(0, 3 * classes[0].index())] += 0.01;
        let (miss, _) = vote_loss(&pos, &exact, &classes, &centers, 1.0).unwrap();
        prop_assert!(miss > 0.0);
    }

    #[test]
    fn total_loss_is_the_plain_weighted_sum(det in 0.0..10.0f64, seg in 0.0..10.0f64, vote in 0.0..10.0f64, lambda in 0.0..5.0f64) {
        let r = total_loss(det, seg, vote, lambda);
        prop_assert_eq!(r.total, det + lambda * (seg + vote));
        prop_assert_eq!((r.det, r.seg, r.vote), (det, seg, vote));
    }

    #[test]
    fn removing_a_false_positive_never_lowers_ap(
        m in prop::collection::vec((0.0..1.0f64, any::<bool>()), 1..30),
        extra_gt in 0..5usize,
    ) {
        let tp = m.iter().filter(|x| x.1).count();
        let num_gt = tp + extra_gt;
        prop_assume!(num_gt > 0);
        let mut sorted = m.clone();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let ap = ap_from_matches(&sorted, num_gt);
        prop_assert!((0.0..=1.0).contains(&ap));
        if let Some(fp) = sorted.iter().position(|x| !x.1) {
            let mut fewer = sorted.clone();
            fewer.remove(fp);
            prop_assert!(ap_from_matches(&fewer, num_gt) >= ap - 1e-15);
        }
    }

    #[test]
    fn iou_symmetry_identity_and_rotation(
        a in (-5.0..5.0f64, -5.0..5.0f64, 0.5..4.0f64, 0.5..4.0f64, -3.2..3.2f64),
        b in (-5.0..5.0f64, -5.0..5.0f64, 0.5..4.0f64, 0.5..4.0f64, -3.2..3.2f64),
        theta in -3.2..3.2f64,
    ) {
        let mk = |t: (f64, f64, f64, f64, f64)| ObjectBox::new([t.0, t.1, 0.0], [t.2, t.3, 1.0], t.4, ClassId::CAR);
        let rot = |t: (f64, f64, f64, f64, f64)| {
            let (s, c) = theta.sin_cos();
            mk((c * t.0 - s * t.1, s * t.0 + c * t.1, t.2, t.3, t.4 + theta))
        };
        let (ba, bb) = (mk(a), mk(b));
        let iou = bev_iou(&ba, &bb);
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert_eq!(iou, bev_iou(&bb, &ba));
        prop_assert!((bev_iou(&ba, &ba) - 1.0).abs() <= 1e-12);
        prop_assert!((bev_iou(&rot(a), &rot(b)) - iou).abs() <= 1e-9);
    }

    #[test]
    fn corridor_filter_is_idempotent(
        centers in prop::collection::vec((0.0..50.0f64, -25.0..25.0f64, -2.0..2.0f64), 0..50)
    ) {
        let boxes: Vec<ObjectBox> = centers
            .into_iter()
            .map(|(x, y, z)| ObjectBox::new([x, y, z], [1.0, 1.0, 1.0], 0.0, ClassId::PEDESTRIAN))
            .collect();
        let once = region_filter_sensor(&boxes, EvalRegion::Corridor);
        prop_assert_eq!(region_filter_sensor(&once, EvalRegion::Corridor), once.clone());
        prop_assert_eq!(region_filter_sensor(&boxes, EvalRegion::Entire), boxes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), epoch in 0..10_000usize) {
        let cfg = small_cfg();
        let model = Sd4rModel::init(&cfg, seed);
        let mut velocity = HeadGrads::zeros(&model.heads);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in velocity.iter_mut() {
            let n = g.flat().len();
            g.set_flat(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        }
        let ck = Checkpoint { model, velocity: Some(velocity), epoch };
        prop_assert_eq!(checkpoint::decode(&checkpoint::encode(&ck)).unwrap(), ck);
    }

    #[test]
    fn scenes_are_determined_by_seed_and_labels_fit_boxes(seed in any::<u64>(), index in 0..1000u64) {
        let cfg = PipelineConfig::default();
        let params = SceneParams { seed, ..Default::default() };
        let a = generate_scene(&params, &cfg, index).unwrap();
        prop_assert_eq!(&a, &generate_scene(&params, &cfg, index).unwrap());
        let exact = SceneParams { seed, sigma: 1e-12, ..Default::default() };
        let s = generate_scene(&exact, &cfg, index).unwrap();
        let labels = s.cloud.labels.as_ref().unwrap();
        for (i, t) in s.center_targets.iter().enumerate() {
            if let Some(c) = t {
                let b = s.boxes.iter().find(|b| b.center == *c).unwrap();
                prop_assert_eq!(b.class, labels[i]);
                prop_assert!(b.contains(s.cloud.points[i].position(), 1e-4));
            } else {
                prop_assert!(labels[i].is_background(cfg.num_classes));
            }
        }
    }
}

#[test]
fn every_class_appears_across_a_hundred_scenes() {
    let cfg = PipelineConfig::default();
    let scenes = generate_dataset(&SceneParams::default(), &cfg, 100).unwrap();
    for c in 0..cfg.num_classes {
        assert!(
            scenes.iter().any(|s| s.cloud.labels.as_ref().unwrap().contains(&ClassId(c))),
            "class {c} never appears"
        );
    }
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = PipelineConfig {
        batch_size: 2,
        ..small_cfg()
    };
    let scenes = generate_dataset(&SceneParams::default(), &cfg, 6).unwrap();
    let run = || {
        let mut t = Trainer::new(Sd4rModel::init(&cfg, 3));
        let log = t.train_until(&scenes, &cfg, 3, |_| {}).unwrap();
        (t.model, log.iter().map(|r| r.loss.total.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
