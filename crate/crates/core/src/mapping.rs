//! Fuses per-image predictions with point clouds into a voxel map, fits the
//! ground plane and reduces the voxels to a 2.5D elevation map.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthworld::{AffineCamera, PointCloud, Pose};
use crate::vismodel::PredictionMap;

/// Point in the sensor frame annotated with a predicted score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub score: f64,
}

/// Bilinear sample of a `rows × cols` grid at continuous pixel coordinates
/// (centers at integers), clamped to the outer centers.
pub fn bilinear(values: &[f64], rows: usize, cols: usize, row: f64, col: f64) -> f64 {
    let y = row.clamp(0.0, (rows - 1) as f64);
    let x = col.clamp(0.0, (cols - 1) as f64);
    let (r0, c0) = (y.floor() as usize, x.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(rows - 1), (c0 + 1).min(cols - 1));
    let (fy, fx) = (y - r0 as f64, x - c0 as f64);
    let v = |r: usize, c: usize| values[r * cols + c];
    let top = v(r0, c0) * (1.0 - fx) + v(r0, c1) * fx;
    let bottom = v(r1, c0) * (1.0 - fx) + v(r1, c1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Scores every point that falls inside the camera window by bilinear
/// interpolation of the prediction; other points are dropped.
pub fn project_points(
    cloud: &PointCloud,
    prediction: &PredictionMap,
    camera: &AffineCamera,
) -> Result<Vec<ScoredPoint>> {
    if prediction.rows != camera.rows || prediction.cols != camera.cols {
        return Err(Error::invalid(
            "prediction grid does not match the camera window",
        ));
    }
    Ok(cloud
        .points
        .iter()
        .filter_map(|p| {
            let (row, col) = camera.to_image(p.x, p.y);
            camera.patch_of(row, col)?;
            Some(ScoredPoint {
                x: p.x,
                y: p.y,
                z: p.z,
                score: bilinear(
                    &prediction.values,
                    prediction.rows,
                    prediction.cols,
                    row,
                    col,
                ),
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `v ← (1 − λ)·v + λ·s`
    Ema(f64),
    /// Count-weighted running mean.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Voxel {
    pub traversability: f64,
    /// Number of updates.
    pub weight: f64,
    /// Running mean height of the points binned here (m).
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelMap {
    pub resolution: f64,
    pub rule: UpdateRule,
    pub voxels: BTreeMap<(i64, i64, i64), Voxel>,
}

impl VoxelMap {
    pub fn new(resolution: f64, rule: UpdateRule) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::config("voxel resolution must be > 0"));
        }
        if let UpdateRule::Ema(l) = rule {
            if !(l > 0.0 && l <= 1.0) {
                return Err(Error::config("moving-average weight must be in (0, 1]"));
            }
        }
        Ok(Self {
            resolution,
            rule,
            voxels: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn key(&self, x: f64, y: f64, z: f64) -> (i64, i64, i64) {
        let f = |v: f64| (v / self.resolution).floor() as i64;
        (f(x), f(y), f(z))
    }

    /// Moves sensor-frame points to the world frame and folds their scores
    /// into the voxels they land in.
    pub fn integrate(&mut self, points: &[ScoredPoint], pose: &Pose) -> Result<()> {
        if ![pose.x, pose.y, pose.yaw].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose is not finite"));
        }
        for p in points {
            let (wx, wy) = pose.to_world(p.x, p.y);
            let key = self.key(wx, wy, p.z);
            match self.voxels.get_mut(&key) {
                None => {
                    self.voxels.insert(
                        key,
                        Voxel {
                            traversability: p.score,
                            weight: 1.0,
                            height: p.z,
                        },
                    );
                }
                Some(v) => {
                    v.weight += 1.0;
                    v.height += (p.z - v.height) / v.weight;
                    v.traversability = match self.rule {
                        UpdateRule::Ema(l) => (1.0 - l) * v.traversability + l * p.score,
                        UpdateRule::Mean => {
                            v.traversability + (p.score - v.traversability) / v.weight
                        }
                    };
                }
            }
        }
        Ok(())
    }
}

/// Plane `normal · p + offset = 0`, normal pointing up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneModel {
    pub normal: [f64; 3],
    pub offset: f64,
    pub inlier_fraction: f64,
}

impl PlaneModel {
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        self.normal[0] * p[0] + self.normal[1] * p[1] + self.normal[2] * p[2] + self.offset
    }
}

fn oriented(n: Vector3<f64>, through: Vector3<f64>) -> Option<([f64; 3], f64)> {
    let len = n.norm();
    if len < 1e-12 {
        return None;
    }
    let n = if n.z < 0.0 { -n / len } else { n / len };
    Some(([n.x, n.y, n.z], -n.dot(&through)))
}

/// Total-least-squares plane through `pts`: centroid plus the eigenvector
/// of the smallest covariance eigenvalue. Also returns the eigenvalues in
/// ascending order.
fn tls_plane(pts: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>, [f64; 3]) {
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let cov = pts
        .iter()
        .map(|p| (p - c) * (p - c).transpose())
        .sum::<Matrix3<f64>>()
        / pts.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let n = eig.eigenvectors.column(order[0]).into_owned();
    (c, n, order.map(|i| eig.eigenvalues[i]))
}

/// RANSAC over 3-point hypotheses scored by inlier count (first best wins),
/// refined by a least-squares fit over the winner's inliers.
pub fn fit_ground_plane(
    points: &[[f64; 3]],
    iterations: usize,
    inlier_tol: f64,
    seed: u64,
) -> Result<PlaneModel> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{} points, need at least 3",
            points.len()
        )));
    }
    if iterations == 0 || !(inlier_tol > 0.0) {
        return Err(Error::invalid(
            "RANSAC needs iterations >= 1 and inlier_tol > 0",
        ));
    }
    let pts: Vec<Vector3<f64>> = points
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .collect();
    let (_, _, ev) = tls_plane(&pts);
    let scale = ev[2].max(f64::MIN_POSITIVE);
    if ev[1] <= 1e-12 * scale {
        return Err(Error::DegenerateGeometry("points are collinear".into()));
    }
    let mut r = rng::stream(seed, "ransac", 0);
    let mut best: Option<(usize, [f64; 3], f64)> = None;
    for _ in 0..iterations {
        let idx = sample(&mut r, pts.len(), 3);
        let (a, b, c) = (pts[idx.index(0)], pts[idx.index(1)], pts[idx.index(2)]);
        let Some((normal, offset)) = oriented((b - a).cross(&(c - a)), a) else {
            continue;
        };
        let hyp = PlaneModel {
            normal,
            offset,
            inlier_fraction: 0.0,
        };
        let count = points
            .iter()
            .filter(|p| hyp.signed_distance(**p).abs() <= inlier_tol)
            .count();
        if best.is_none_or(|(n, _, _)| count > n) {
            best = Some((count, normal, offset));
        }
    }
    let Some((_, normal, offset)) = best else {
        return Err(Error::DegenerateGeometry(
            "no non-degenerate sample found".into(),
        ));
    };
    let hyp = PlaneModel {
        normal,
        offset,
        inlier_fraction: 0.0,
    };
    let inliers: Vec<Vector3<f64>> = pts
        .iter()
        .zip(points)
        .filter(|(_, p)| hyp.signed_distance(**p).abs() <= inlier_tol)
        .map(|(v, _)| *v)
        .collect();
    let (normal, offset) = if inliers.len() >= 3 {
        let (c, n, _) = tls_plane(&inliers);
        oriented(n, c).unwrap_or((normal, offset))
    } else {
        (normal, offset)
    };
    let refined = PlaneModel {
        normal,
        offset,
        inlier_fraction: 0.0,
    };
    let count = points
        .iter()
        .filter(|p| refined.signed_distance(**p).abs() <= inlier_tol)
        .count();
    Ok(PlaneModel {
        inlier_fraction: count as f64 / points.len() as f64,
        ..refined
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElevationMap {
    pub rows: usize,
    pub cols: usize,
    pub resolution: f64,
    /// World coordinates of the grid corner at row 0, col 0.
    pub origin: (f64, f64),
    pub height: Vec<f64>,
    pub traversability: Vec<f64>,
    pub observed: Vec<bool>,
}

impl ElevationMap {
    pub fn empty(rows: usize, cols: usize, resolution: f64, origin: (f64, f64)) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            resolution,
            origin,
            height: vec![0.0; n],
            traversability: vec![0.0; n],
            observed: vec![false; n],
        }
    }

    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        row < self.rows && col < self.cols && self.observed[self.idx(row, col)]
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Writes `height.csv`, `traversability.csv`, `observed.csv` and the
    /// `elevation.json` header into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let grid = |name: &str, cell: &dyn Fn(usize) -> String| -> Result<()> {
            let mut f = fs::File::create(dir.join(name))?;
            for r in 0..self.rows {
                let line: Vec<String> = (0..self.cols).map(|c| cell(self.idx(r, c))).collect();
                writeln!(f, "{}", line.join(","))?;
            }
            Ok(())
        };
        grid("height.csv", &|i| self.height[i].to_string())?;
        grid("traversability.csv", &|i| {
            self.traversability[i].to_string()
        })?;
        grid("observed.csv", &|i| u8::from(self.observed[i]).to_string())?;
        let header = serde_json::json!({ "rows": self.rows, "cols": self.cols, "resolution": self.resolution, "origin": [self.origin.0, self.origin.1] });
        fs::write(
            dir.join("elevation.json"),
            serde_json::to_string_pretty(&header)?,
        )?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            rows: usize,
            cols: usize,
            resolution: f64,
            origin: (f64, f64),
        }
        let h: Header = serde_json::from_str(&fs::read_to_string(dir.join("elevation.json"))?)?;
        let grid = |name: &str| -> Result<Vec<f64>> {
            let (rows, cols, v) = crate::synthworld::io::read_grid_csv::<f64>(&dir.join(name))?;
            if rows != h.rows || cols != h.cols {
                return Err(Error::invalid(format!(
                    "{name}: grid is {rows}x{cols}, header says {}x{}",
                    h.rows, h.cols
                )));
            }
            Ok(v)
        };
        Ok(Self {
            rows: h.rows,
            cols: h.cols,
            resolution: h.resolution,
            origin: h.origin,
            height: grid("height.csv")?,
            traversability: grid("traversability.csv")?,
            observed: grid("observed.csv")?
                .into_iter()
                .map(|v| v != 0.0)
                .collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReduceParams {
    pub h_max: f64,
    /// Voxels this far below the plane still count as ground.
    pub ground_tol: f64,
}

impl Default for ReduceParams {
    fn default() -> Self {
        Self {
            h_max: 1.0,
            ground_tol: 0.05,
        }
    }
}

/// Collapses voxel columns onto a `rows × cols` grid aligned with the voxel
/// grid (origin at world (0, 0)). Only voxels between the plane and `h_max`
/// above it count; the cell keeps the highest one and the weight-averaged
/// traversability.
pub fn reduce_to_elevation(
    map: &VoxelMap,
    plane: &PlaneModel,
    rows: usize,
    cols: usize,
    params: ReduceParams,
) -> Result<ElevationMap> {
    if !(params.h_max > 0.0) || !(params.ground_tol >= 0.0) {
        return Err(Error::invalid("h_max must be > 0 and ground_tol >= 0"));
    }
    let mut out = ElevationMap::empty(rows, cols, map.resolution, (0.0, 0.0));
    let mut wsum = vec![0.0; rows * cols];
    for (&(i, j, _), v) in &map.voxels {
        if i < 0 || j < 0 || i as usize >= cols || j as usize >= rows {
            continue;
        }
        let (x, y) = (
            (i as f64 + 0.5) * map.resolution,
            (j as f64 + 0.5) * map.resolution,
        );
        let above = plane.signed_distance([x, y, v.height]) / plane.normal[2].abs().max(1e-12);
        if above < -params.ground_tol || above > params.h_max {
            continue;
        }
        let k = out.idx(j as usize, i as usize);
        if !out.observed[k] || v.height > out.height[k] {
            out.height[k] = v.height;
        }
        out.observed[k] = true;
        out.traversability[k] += v.weight * v.traversability;
        wsum[k] += v.weight;
    }
    for (t, w) in out.traversability.iter_mut().zip(&wsum) {
        if *w > 0.0 {
            *t = (*t / w).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
