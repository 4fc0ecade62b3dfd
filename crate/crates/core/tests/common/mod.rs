//! Reference implementations written independently of the library, plus
//! fixtures shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trav_core::mapping::{
    fit_ground_plane, project_points, reduce_to_elevation, ElevationMap, PlaneModel, ReduceParams,
    UpdateRule, VoxelMap,
};
use trav_core::synthworld::{
    gen_sweep, gen_world, render_patch_features, sample_lidar, AffineCamera, FeatureParams,
    SensorLayout, SignatureParams, TerrainSpec, WorldMap, WorldSpec,
};
use trav_core::vismodel::PredictionMap;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random map: heights in `[-h, h]`, traversability uniform, each cell
/// unobserved with probability `p_hole`.
pub fn random_map(
    rows: usize,
    cols: usize,
    h: f64,
    p_hole: f64,
    r: &mut ChaCha8Rng,
) -> ElevationMap {
    let mut m = ElevationMap::empty(rows, cols, 0.25, (0.0, 0.0));
    for k in 0..rows * cols {
        m.height[k] = r.random_range(-h..=h);
        m.traversability[k] = r.random_range(0.0..=1.0);
        m.observed[k] = !r.random_bool(p_hole);
    }
    m
}

/// Edge cost written from the definition: 3D segment length scaled by
/// `1 + (1 − mean traversability) · w`.
pub fn oracle_edge(m: &ElevationMap, a: (usize, usize), b: (usize, usize), w: f64) -> f64 {
    let (ia, ib) = (a.0 * m.cols + a.1, b.0 * m.cols + b.1);
    let diagonal = a.0 != b.0 && a.1 != b.1;
    let l = if diagonal {
        m.resolution * 2f64.sqrt()
    } else {
        m.resolution
    };
    let dz = m.height[ia] - m.height[ib];
    let t = (m.traversability[ia] + m.traversability[ib]) / 2.0;
    (l * l + dz * dz).sqrt() * (1.0 + (1.0 - t) * w)
}

/// Array-scan Dijkstra over observed 8-neighbors. Returns the cost to
/// `goal`, or `None` when it is unreachable.
pub fn dijkstra(
    m: &ElevationMap,
    start: (usize, usize),
    goal: (usize, usize),
    w: f64,
) -> Option<f64> {
    let n = m.rows * m.cols;
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    if !m.observed[start.0 * m.cols + start.1] || !m.observed[goal.0 * m.cols + goal.1] {
        return None;
    }
    dist[start.0 * m.cols + start.1] = 0.0;
    loop {
        let mut u = None;
        for i in 0..n {
            if !done[i] && dist[i].is_finite() && u.is_none_or(|j: usize| dist[i] < dist[j]) {
                u = Some(i);
            }
        }
        let u = u?;
        if u == goal.0 * m.cols + goal.1 {
            return Some(dist[u]);
        }
        done[u] = true;
        let (ur, uc) = (u / m.cols, u % m.cols);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (vr, vc) = (ur as i64 + dr, uc as i64 + dc);
                if (dr, dc) == (0, 0)
                    || vr < 0
                    || vc < 0
                    || vr >= m.rows as i64
                    || vc >= m.cols as i64
                {
                    continue;
                }
                let v = vr as usize * m.cols + vc as usize;
                if !m.observed[v] || done[v] {
                    continue;
                }
                let d = dist[u] + oracle_edge(m, (ur, uc), (vr as usize, vc as usize), w);
                if d < dist[v] {
                    dist[v] = d;
                }
            }
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Greedy farthest-point selection by brute force: every round rescans all
/// selected points for every candidate.
pub fn fps_reference(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let centroid: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / points.len() as f64)
        .collect();
    let pick = |score: &dyn Fn(usize) -> Option<f64>| {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for i in 0..points.len() {
            if let Some(s) = score(i) {
                if s > best.1 {
                    best = (i, s);
                }
            }
        }
        best.0
    };
    let mut chosen = vec![pick(&|i| Some(euclid(&points[i], &centroid)))];
    while chosen.len() < k {
        let next = pick(&|i| {
            if chosen.contains(&i) {
                return None;
            }
            Some(
                chosen
                    .iter()
                    .map(|&j| euclid(&points[i], &points[j]))
                    .fold(f64::INFINITY, f64::min),
            )
        });
        chosen.push(next);
    }
    chosen
}

pub fn min_pairwise(points: &[Vec<f64>], idx: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            best = best.min(euclid(&points[i], &points[j]));
        }
    }
    best
}

pub fn random_cloud(n: usize, dim: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Bilinear sample as a weighted sum over every grid center: each center
/// contributes `max(0, 1 − |Δrow|) · max(0, 1 − |Δcol|)`.
pub fn bilinear_reference(values: &[f64], rows: usize, cols: usize, row: f64, col: f64) -> f64 {
    let (y, x) = (
        row.clamp(0.0, (rows - 1) as f64),
        col.clamp(0.0, (cols - 1) as f64),
    );
    let mut acc = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let w = (1.0 - (y - r as f64).abs()).max(0.0) * (1.0 - (x - c as f64).abs()).max(0.0);
            acc += w * values[r * cols + c];
        }
    }
    acc
}

/// Sample Pearson correlation from the textbook formula.
pub fn pearson_reference(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let (sxx, syy) = (
        x.iter().map(|a| a * a).sum::<f64>(),
        y.iter().map(|b| b * b).sum::<f64>(),
    );
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn flat_world(rows: usize, cols: usize, terrains: usize, seed: u64) -> WorldMap {
    let catalog = TerrainSpec::catalog(
        terrains,
        &SensorLayout::default(),
        SignatureParams::default(),
        seed,
    );
    let spec = WorldSpec {
        rows,
        cols,
        resolution: 0.25,
        elevation_amplitude: 0.0,
    };
    gen_world(&spec, &catalog, terrains, seed).unwrap()
}

pub struct RoundTrip {
    pub map: ElevationMap,
    pub plane: PlaneModel,
    /// Largest |traversability − (1 − u)| over the checked cells.
    pub max_error: f64,
    pub checked: usize,
}

/// Maps `world` with a sweep whose predictions are the ground-truth
/// `1 − u` of every patch, then compares each observed cell whose
/// `(2·margin + 1)²` neighborhood holds a single terrain against its score.
pub fn oracle_round_trip(
    world: &WorldMap,
    rule: UpdateRule,
    margin: usize,
    seed: u64,
) -> RoundTrip {
    let camera = AffineCamera::default();
    let ease = |t: usize| 1.0 - world.terrain(t).unwrap().effort_u;
    let mut voxels = VoxelMap::new(world.resolution, rule).unwrap();
    let mut ground = Vec::new();
    for pose in gen_sweep(world, 0.5, 1.0, world.resolution) {
        let img = render_patch_features(
            world,
            &camera,
            FeatureParams { dim: 8, noise: 0.0 },
            &pose,
            seed,
        )
        .unwrap();
        let values: Vec<f64> = img.terrain_gt.iter().map(|&t| ease(t)).collect();
        let pred = PredictionMap {
            rows: img.rows,
            cols: img.cols,
            raw: values.clone(),
            degenerate: vec![false; values.len()],
            values,
        };
        let cloud = sample_lidar(world, &pose, 300, 4.0, seed).unwrap();
        voxels
            .integrate(&project_points(&cloud, &pred, &camera).unwrap(), &pose)
            .unwrap();
        ground.extend(cloud.points.iter().map(|p| {
            let (x, y) = pose.to_world(p.x, p.y);
            [x, y, p.z]
        }));
    }
    let plane = fit_ground_plane(&ground, 100, 0.05, seed).unwrap();
    let map = reduce_to_elevation(
        &voxels,
        &plane,
        world.rows,
        world.cols,
        ReduceParams::default(),
    )
    .unwrap();
    let (mut max_error, mut checked) = (0.0f64, 0);
    for r in margin..world.rows - margin {
        for c in margin..world.cols - margin {
            let t = world.terrain_at_cell(r, c);
            let uniform = (r - margin..=r + margin)
                .all(|rr| (c - margin..=c + margin).all(|cc| world.terrain_at_cell(rr, cc) == t));
            if uniform && map.is_observed(r, c) {
                max_error = max_error.max((map.traversability[map.idx(r, c)] - ease(t)).abs());
                checked += 1;
            }
        }
    }
    RoundTrip {
        map,
        plane,
        max_error,
        checked,
    }
}

/// Points on `z = 0` over `[0, extent]²` plus a fraction of points lifted
/// well off the plane.
pub fn plane_with_outliers(
    n: usize,
    outlier_fraction: f64,
    extent: f64,
    r: &mut ChaCha8Rng,
) -> Vec<[f64; 3]> {
    let n_out = (n as f64 * outlier_fraction).round() as usize;
    (0..n)
        .map(|i| {
            let (x, y) = (r.random_range(0.0..extent), r.random_range(0.0..extent));
            let z = if i < n_out {
                r.random_range(0.3..2.0)
            } else {
                0.0
            };
            [x, y, z]
        })
        .collect()
}
