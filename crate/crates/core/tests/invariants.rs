//! Property tests for geometry, schedules and the reverse step.

use pointdiff::geometry::{
    dist_sq, extract_patches, farthest_point_sample, norm, stitch_patches, CoverageMode, NeighborIndex, Point3,
    PointCloud,
};
use pointdiff::io::{format_xyz, parse_xyz};
use pointdiff::sampler::reverse_step;
use pointdiff::schedule::{estimate_noise_variance, AdaptiveSchedule, Calibration, DiffusionSchedule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn point(range: f64) -> impl Strategy<Value = Point3> {
    [-range..range, -range..range, -range..range]
}

/// Points on a small integer grid, so equal distances are common.
fn grid_point() -> impl Strategy<Value = Point3> {
    [-3i32..=3, -3i32..=3, -3i32..=3].prop_map(|p| p.map(f64::from))
}

fn cloud(min: usize, max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop_oneof![
        prop::collection::vec(point(2.0), min..max),
        prop::collection::vec(grid_point(), min..max),
    ]
}

fn brute_knn(points: &[Point3], q: Point3, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| dist_sq(points[a], q).total_cmp(&dist_sq(points[b], q)).then(a.cmp(&b)));
    order.truncate(k);
    order
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_sorted_scan(pts in cloud(1, 200), q in point(3.0), k in 1usize..30) {
        let k = k.min(pts.len());
        let index = NeighborIndex::from_points(pts.clone());
        prop_assert_eq!(index.knn(q, k).unwrap(), brute_knn(&pts, q, k));
    }

    #[test]
    fn fps_picks_distinct_points_starting_at_seed(pts in cloud(1, 150), m in 1usize..40, seed in 0usize..150) {
        let seed = seed % pts.len();
        let m = m.min(pts.len());
        let picked = farthest_point_sample(&PointCloud::new(pts.clone()).unwrap(), m, seed).unwrap();
        prop_assert_eq!(picked.len(), m);
        prop_assert_eq!(picked[0], seed);
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m);
    }

    #[test]
    fn patches_cover_and_stitch_back(pts in cloud(1, 300), size in 1usize..64) {
        let cloud = PointCloud::new(pts).unwrap();
        let index = NeighborIndex::new(&cloud);
        let patches = extract_patches(&cloud, &index, size, CoverageMode::Full).unwrap();
        for p in &patches {
            prop_assert_eq!(p.indices[0], p.center_index);
            prop_assert_eq!(p.len(), size.min(cloud.len()));
        }
        let identity: Vec<_> = patches
            .iter()
            .map(|p| (p.clone(), p.indices.iter().map(|&i| cloud.points()[i]).collect()))
            .collect();
        prop_assert_eq!(stitch_patches(&cloud, &identity).unwrap(), cloud);
    }

    #[test]
    fn normalization_round_trips(pts in prop::collection::vec(point(50.0), 2..100)) {
        let cloud = PointCloud::new(pts).unwrap();
        let (unit, norm_map) = cloud.normalize_unit_sphere();
        let radius = unit.points().iter().map(|&p| norm(p)).fold(0.0, f64::max);
        prop_assert!(radius <= 1.0 + 1e-12);
        for (a, b) in cloud.points().iter().zip(norm_map.invert(&unit).points()) {
            prop_assert!(dist_sq(*a, *b).sqrt() <= 1e-12 * (1.0 + norm(*a)));
        }
    }

    #[test]
    fn schedule_is_monotone_and_self_matching(steps in 2usize..1500, beta_max in 1e-7f64..1e-2) {
        let s = DiffusionSchedule::linear(steps, beta_max).unwrap();
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.sigma_bar_sq(t) > s.sigma_bar_sq(t - 1));
        }
        let t = steps / 2;
        prop_assert_eq!(s.match_timestep(s.sigma_bar_sq(t)), t);
        prop_assert_eq!(s.match_timestep(-1.0), 0);
        prop_assert_eq!(s.match_timestep(2.0 * s.sigma_bar_sq(steps)), steps);
    }

    #[test]
    fn interpolated_schedule_spans_zero_to_tau(tau in 0usize..=1000, levels in 1usize..20) {
        let a = AdaptiveSchedule::interpolate(&DiffusionSchedule::default(), tau, levels).unwrap();
        prop_assert_eq!(a.taus()[0], 0);
        prop_assert_eq!(a.tau_hat(), tau);
        prop_assert!(a.num_iterations() <= levels);
        prop_assert!(a.taus().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_score_deterministic_step_is_identity(
        pts in prop::collection::vec(point(1.0), 1..50),
        t in 1usize..=1000,
        back in 1usize..=1000,
    ) {
        let prev = t.saturating_sub(back);
        let zeros = vec![[0.0; 3]; pts.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = reverse_step(&DiffusionSchedule::default(), &pts, &zeros, t, prev, 0.0, &mut rng).unwrap();
        prop_assert_eq!(out, pts);
    }

    #[test]
    fn noise_estimate_scales_quadratically(scores in prop::collection::vec(point(1.0), 2..100), k in 0.01f64..100.0) {
        let base = estimate_noise_variance(&scores, Calibration::Chi3).unwrap();
        let scaled: Vec<Point3> = scores.iter().map(|s| s.map(|v| v * k)).collect();
        let est = estimate_noise_variance(&scaled, Calibration::Chi3).unwrap();
        prop_assert!((est.sigma_bar_sq - k * k * base.sigma_bar_sq).abs() <= 1e-9 * k * k * (base.sigma_bar_sq + 1e-300));
    }

    #[test]
    fn xyz_text_round_trips(pts in prop::collection::vec(point(1e3), 1..50)) {
        let cloud = PointCloud::new(pts).unwrap();
        let back = parse_xyz(&format_xyz(&cloud, &["note".into()]), Path::new("mem")).unwrap();
        for (a, b) in cloud.points().iter().zip(back.points()) {
            for i in 0..3 {
                prop_assert!((a[i] - b[i]).abs() <= 5e-9 * a[i].abs());
            }
        }
    }
}
