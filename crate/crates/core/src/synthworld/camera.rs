//! Top-down camera stand-in: a `rows × cols` patch window ahead of the robot,
//! related to the robot frame by an axis-aligned affine map.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::trajectory::Pose;
use super::world::WorldMap;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineCamera {
    pub rows: usize,
    pub cols: usize,
    /// Ground footprint of one patch (m).
    pub patch_size: f64,
    /// Distance from the robot to the near edge of the window (m).
    pub near: f64,
}

impl Default for AffineCamera {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            patch_size: 0.25,
            near: 0.5,
        }
    }
}

impl AffineCamera {
    /// Robot-frame point → continuous image coordinates (pixel centers at integers).
    /// Row 0 is the far edge, column 0 the left edge.
    pub fn to_image(&self, x: f64, y: f64) -> (f64, f64) {
        let row = self.rows as f64 - 0.5 - (x - self.near) / self.patch_size;
        let col = self.cols as f64 / 2.0 - 0.5 - y / self.patch_size;
        (row, col)
    }

    pub fn to_sensor(&self, row: f64, col: f64) -> (f64, f64) {
        let x = self.near + (self.rows as f64 - 0.5 - row) * self.patch_size;
        let y = (self.cols as f64 / 2.0 - 0.5 - col) * self.patch_size;
        (x, y)
    }

    /// Patch containing the image coordinate, if inside the window.
    pub fn patch_of(&self, row: f64, col: f64) -> Option<(usize, usize)> {
        let (r, c) = ((row + 0.5).floor(), (col + 0.5).floor());
        (r >= 0.0 && c >= 0.0 && r < self.rows as f64 && c < self.cols as f64)
            .then_some((r as usize, c as usize))
    }

    /// Patch seen at world point `(wx, wy)` from `pose`.
    pub fn project_world(&self, pose: &Pose, wx: f64, wy: f64) -> Option<(usize, usize)> {
        let (lx, ly) = pose.to_local(wx, wy);
        let (r, c) = self.to_image(lx, ly);
        self.patch_of(r, c)
    }

    pub fn patch_world_center(&self, pose: &Pose, row: usize, col: usize) -> (f64, f64) {
        let (x, y) = self.to_sensor(row as f64, col as f64);
        pose.to_world(x, y)
    }
}

/// Frozen-backbone stand-in: one `dim`-vector per patch, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchFeatureImage {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub features: Vec<f64>,
    /// Ground-truth terrain per patch (evaluation only).
    pub terrain_gt: Vec<usize>,
    pub pose: Pose,
}

impl PatchFeatureImage {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature(&self, idx: usize) -> &[f64] {
        &self.features[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn feature_at(&self, row: usize, col: usize) -> &[f64] {
        self.feature(row * self.cols + col)
    }

    /// Mirror left-right (augmentation).
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (src, dst) = (r * self.cols + (self.cols - 1 - c), r * self.cols + c);
                out.features[dst * self.dim..(dst + 1) * self.dim]
                    .copy_from_slice(self.feature(src));
                out.terrain_gt[dst] = self.terrain_gt[src];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub dim: usize,
    /// Expected norm of the additive noise vector before renormalization.
    pub noise: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            dim: 64,
            noise: 0.05,
        }
    }
}

/// Renders the patch window ahead of `pose`. Each patch is the terrain's
/// unit prototype plus isotropic gaussian noise, renormalized. Patches
/// beyond the world border take the nearest border cell's terrain.
pub fn render_patch_features(
    world: &WorldMap,
    camera: &AffineCamera,
    params: FeatureParams,
    pose: &Pose,
    seed: u64,
) -> Result<PatchFeatureImage> {
    if !world.contains(pose.x, pose.y) {
        return Err(Error::OutOfBounds {
            x: pose.x,
            y: pose.y,
        });
    }
    let protos: Vec<(usize, Vec<f64>)> = world
        .terrains
        .iter()
        .map(|t| (t.id, t.prototype(params.dim)))
        .collect();
    let per_dim = params.noise / (params.dim as f64).sqrt();
    let noise = (per_dim > 0.0).then(|| Normal::new(0.0, per_dim).unwrap());
    let mut r = rng::stream(
        seed,
        "patch-noise",
        pose.t.to_bits() ^ pose.x.to_bits().rotate_left(17) ^ pose.y.to_bits().rotate_left(41),
    );
    let n = camera.rows * camera.cols;
    let mut features = Vec::with_capacity(n * params.dim);
    let mut terrain_gt = Vec::with_capacity(n);
    for row in 0..camera.rows {
        for col in 0..camera.cols {
            let (wx, wy) = camera.patch_world_center(pose, row, col);
            let (cr, cc) = world.cell_clamped(wx, wy);
            let id = world.terrain_at_cell(cr, cc);
            let proto = &protos.iter().find(|(pid, _)| *pid == id).unwrap().1;
            let mut f: Vec<f64> = proto.clone();
            if let Some(nd) = &noise {
                for v in f.iter_mut() {
                    *v += nd.sample(&mut r);
                }
            }
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            features.extend(f.iter().map(|v| v / norm));
            terrain_gt.push(id);
        }
    }
    Ok(PatchFeatureImage {
        rows: camera.rows,
        cols: camera.cols,
        dim: params.dim,
        features,
        terrain_gt,
        pose: *pose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::terrain::{SensorLayout, SignatureParams, TerrainSpec};
    use crate::tape::dot;

    fn single_terrain_world() -> WorldMap {
        let t = TerrainSpec::catalog(2, &SensorLayout::default(), SignatureParams::default(), 1);
        WorldMap {
            rows: 40,
            cols: 40,
            resolution: 0.25,
            cells: vec![0; 1600],
            elevation: vec![0.0; 1600],
            terrains: t,
        }
    }

    #[test]
    fn affine_roundtrip_and_center() {
        let cam = AffineCamera::default();
        let (x, y) = cam.to_sensor(3.0, 11.0);
        let (r, c) = cam.to_image(x, y);
        assert!((r - 3.0).abs() < 1e-12 && (c - 11.0).abs() < 1e-12);
        assert_eq!(cam.patch_of(3.2, 10.7), Some((3, 11)));
        assert_eq!(cam.patch_of(-0.6, 2.0), None);
    }

    #[test]
    fn noiseless_patches_equal_prototype() {
        let w = single_terrain_world();
        let params = FeatureParams {
            dim: 64,
            noise: 0.0,
        };
        let img = render_patch_features(
            &w,
            &AffineCamera::default(),
            params,
            &Pose::new(0.0, 2.0, 5.0, 0.0),
            3,
        )
        .unwrap();
        let proto = w.terrains[0].prototype(64);
        for i in 0..img.len() {
            assert!((dot(img.feature(i), &proto) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distinct_prototypes_are_nearly_orthogonal() {
        // Monte-Carlo reference: random unit-vector pairs in 64-D
        let mut r = rng::stream(9, "mc", 0);
        let sample = |r: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<f64> = (0..64)
                .map(|_| Normal::new(0.0, 1.0).unwrap().sample(r))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let mc: f64 = (0..1000)
            .map(|_| dot(&sample(&mut r), &sample(&mut r)).abs())
            .sum::<f64>()
            / 1000.0;
        assert!(mc < 0.2, "Monte-Carlo mean |cos| {mc}");
        let terrains =
            TerrainSpec::catalog(8, &SensorLayout::default(), SignatureParams::default(), 4);
        let protos: Vec<_> = terrains.iter().map(|t| t.prototype(64)).collect();
        let mut acc = 0.0;
        let mut n = 0;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                acc += dot(&protos[i], &protos[j]).abs();
                n += 1;
            }
        }
        assert!(acc / (n as f64) < 0.2);
    }

    #[test]
    fn deterministic_render() {
        let w = single_terrain_world();
        let p = Pose::new(1.0, 3.0, 3.0, 0.4);
        let a = render_patch_features(
            &w,
            &AffineCamera::default(),
            FeatureParams::default(),
            &p,
            5,
        )
        .unwrap();
        let b = render_patch_features(
            &w,
            &AffineCamera::default(),
            FeatureParams::default(),
            &p,
            5,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outside_pose_rejected() {
        let w = single_terrain_world();
        let r = render_patch_features(
            &w,
            &AffineCamera::default(),
            FeatureParams::default(),
            &Pose::new(0.0, 50.0, 1.0, 0.0),
            5,
        );
        assert!(matches!(r, Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn flip_is_an_involution() {
        let w = single_terrain_world();
        let img = render_patch_features(
            &w,
            &AffineCamera::default(),
            FeatureParams::default(),
            &Pose::new(0.0, 3.0, 3.0, 0.0),
            5,
        )
        .unwrap();
        assert_eq!(img.flipped().flipped(), img);
    }
}
