mod common;

use proptest::prelude::*;
use trav_core::mapping::{
    bilinear, fit_ground_plane, reduce_to_elevation, ElevationMap, PlaneModel, ReduceParams,
    ScoredPoint, UpdateRule, Voxel, VoxelMap,
};
use trav_core::synthworld::Pose;
use trav_core::Error;

#[test]
fn ema_converges_to_a_constant_score() {
    let mut vm = VoxelMap::new(0.25, UpdateRule::Ema(0.2)).unwrap();
    let origin = Pose::new(0.0, 0.0, 0.0, 0.0);
    vm.integrate(
        &[ScoredPoint {
            x: 0.1,
            y: 0.1,
            z: 0.0,
            score: 0.0,
        }],
        &origin,
    )
    .unwrap();
    for _ in 0..100 {
        vm.integrate(
            &[ScoredPoint {
                x: 0.1,
                y: 0.1,
                z: 0.0,
                score: 0.7,
            }],
            &origin,
        )
        .unwrap();
    }
    let v = vm.voxels[&(0, 0, 0)];
    assert!((v.traversability - 0.7).abs() < 1e-6);
    assert_eq!(v.weight, 101.0);
}

#[test]
fn two_scores_average_under_the_mean_rule() {
    let mut vm = VoxelMap::new(0.25, UpdateRule::Mean).unwrap();
    let pose = Pose::new(0.0, 1.0, 2.0, 0.0);
    let pts = [
        ScoredPoint {
            x: 0.05,
            y: 0.05,
            z: 0.0,
            score: 0.2,
        },
        ScoredPoint {
            x: 0.06,
            y: 0.07,
            z: 0.0,
            score: 0.8,
        },
    ];
    vm.integrate(&pts, &pose).unwrap();
    assert_eq!(vm.len(), 1);
    let (key, v) = vm.voxels.iter().next().unwrap();
    assert_eq!(*key, (4, 8, 0));
    assert!((v.traversability - 0.5).abs() < 1e-15);
}

#[test]
fn integration_rotates_points_into_the_world() {
    let mut vm = VoxelMap::new(1.0, UpdateRule::Mean).unwrap();
    // a quarter turn left: sensor +x points along world +y
    let pose = Pose::new(0.0, 10.0, 10.0, std::f64::consts::FRAC_PI_2);
    vm.integrate(
        &[ScoredPoint {
            x: 3.5,
            y: 0.0,
            z: 0.2,
            score: 1.0,
        }],
        &pose,
    )
    .unwrap();
    assert!(vm.voxels.contains_key(&(10, 13, 0)));
    assert!(vm
        .integrate(&[], &Pose::new(0.0, f64::NAN, 0.0, 0.0))
        .is_err());
}

#[test]
fn ransac_ignores_one_percent_outliers() {
    let mut r = common::rng(4);
    for seed in 0..5 {
        let pts = common::plane_with_outliers(2000, 0.01, 8.0, &mut r);
        let p = fit_ground_plane(&pts, 100, 0.05, seed).unwrap();
        assert!(
            p.normal[0].abs() < 1e-6
                && p.normal[1].abs() < 1e-6
                && (p.normal[2] - 1.0).abs() < 1e-6,
            "{p:?}"
        );
        assert!(p.offset.abs() < 1e-6);
        assert!((p.inlier_fraction - 0.99).abs() < 1e-12);
    }
}

#[test]
fn ransac_recovers_a_tilted_plane() {
    let mut r = common::rng(6);
    let n = [0.1f64, -0.2, 1.0];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    let pts: Vec<[f64; 3]> = common::plane_with_outliers(500, 0.0, 5.0, &mut r)
        .into_iter()
        .map(|[x, y, _]| [x, y, 0.3 - (n[0] * x + n[1] * y) / n[2]])
        .collect();
    let p = fit_ground_plane(&pts, 50, 0.01, 1).unwrap();
    for k in 0..3 {
        assert!((p.normal[k] - n[k] / len).abs() < 1e-9);
    }
    assert!(p.signed_distance([0.0, 0.0, 0.3]).abs() < 1e-9);
    let line: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
    assert!(matches!(
        fit_ground_plane(&line, 10, 0.1, 1),
        Err(Error::DegenerateGeometry(_))
    ));
    assert!(matches!(
        fit_ground_plane(&line[..2], 10, 0.1, 1),
        Err(Error::DegenerateGeometry(_))
    ));
}

#[test]
fn flat_world_round_trip_reproduces_the_scores() {
    let world = common::flat_world(32, 32, 3, 11);
    let rt = common::oracle_round_trip(&world, UpdateRule::Ema(0.2), 2, 11);
    assert!(
        rt.checked > 100,
        "only {} interior cells checked",
        rt.checked
    );
    assert!(rt.max_error < 1e-6, "max error {}", rt.max_error);
    assert!(rt
        .map
        .observed
        .iter()
        .zip(&rt.map.height)
        .all(|(o, h)| !o || *h == 0.0));
    assert!(rt.map.n_observed() > world.rows * world.cols * 3 / 4);
}

#[test]
fn reduction_is_idempotent_and_respects_h_max() {
    let ground = PlaneModel {
        normal: [0.0, 0.0, 1.0],
        offset: 0.0,
        inlier_fraction: 1.0,
    };
    let mut vm = VoxelMap::new(0.5, UpdateRule::Mean).unwrap();
    vm.voxels.insert(
        (1, 2, 0),
        Voxel {
            traversability: 0.4,
            weight: 3.0,
            height: 0.1,
        },
    );
    vm.voxels.insert(
        (1, 2, 1),
        Voxel {
            traversability: 0.9,
            weight: 1.0,
            height: 0.6,
        },
    );
    vm.voxels.insert(
        (3, 0, 6),
        Voxel {
            traversability: 0.5,
            weight: 1.0,
            height: 3.0,
        },
    );
    vm.voxels.insert(
        (-1, 0, 0),
        Voxel {
            traversability: 0.5,
            weight: 1.0,
            height: 0.0,
        },
    );
    let params = ReduceParams {
        h_max: 1.0,
        ground_tol: 0.05,
    };
    let a = reduce_to_elevation(&vm, &ground, 4, 4, params).unwrap();
    let b = reduce_to_elevation(&vm, &ground, 4, 4, params).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_observed(), 1);
    let k = a.idx(2, 1);
    assert_eq!(a.height[k], 0.6);
    assert!((a.traversability[k] - (3.0 * 0.4 + 0.9) / 4.0).abs() < 1e-15);
    assert!(reduce_to_elevation(
        &vm,
        &ground,
        4,
        4,
        ReduceParams {
            h_max: 0.0,
            ground_tol: 0.0
        }
    )
    .is_err());
}

#[test]
fn elevation_map_survives_disk() {
    let mut r = common::rng(2);
    let m = common::random_map(5, 7, 1.0, 0.3, &mut r);
    let dir = tempfile::tempdir().unwrap();
    m.write(dir.path()).unwrap();
    assert_eq!(ElevationMap::read(dir.path()).unwrap(), m);
}

proptest! {
    #[test]
    fn bilinear_matches_the_weighted_sum(seed in 0u64..100_000, rows in 1usize..6, cols in 1usize..6, row in -1.0f64..7.0, col in -1.0f64..7.0) {
        let mut r = common::rng(seed);
        let values: Vec<f64> = common::random_cloud(rows * cols, 1, &mut r).into_iter().map(|v| v[0]).collect();
        let got = bilinear(&values, rows, cols, row, col);
        prop_assert!((got - common::bilinear_reference(&values, rows, cols, row, col)).abs() < 1e-12);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
    }
}
