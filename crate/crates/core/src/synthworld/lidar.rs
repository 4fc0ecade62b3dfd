use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trajectory::Pose;
use super::world::WorldMap;
use crate::error::{Error, Result};
use crate::rng;

/// Point in the sensor frame: origin at `(pose.x, pose.y, 0)`, x forward,
/// y left, z up (world heights).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub terrain: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Samples `n_points` on the elevation surface, uniformly over the disc of
/// radius `range` around the pose, rejecting samples outside the world.
pub fn sample_lidar(
    world: &WorldMap,
    pose: &Pose,
    n_points: usize,
    range: f64,
    seed: u64,
) -> Result<PointCloud> {
    if !world.contains(pose.x, pose.y) {
        return Err(Error::OutOfBounds {
            x: pose.x,
            y: pose.y,
        });
    }
    if n_points == 0 {
        return Err(Error::invalid("n_points must be > 0"));
    }
    let mut r = rng::stream(
        seed,
        "lidar",
        pose.t.to_bits() ^ pose.x.to_bits().rotate_left(23),
    );
    let mut points = Vec::with_capacity(n_points);
    while points.len() < n_points {
        let rad = range * r.random::<f64>().sqrt();
        let ang = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (lx, ly) = (rad * ang.cos(), rad * ang.sin());
        let (wx, wy) = pose.to_world(lx, ly);
        let Some((row, col)) = world.cell_of(wx, wy) else {
            continue;
        };
        points.push(LidarPoint {
            x: lx,
            y: ly,
            z: world.height_at(wx, wy),
            terrain: world.terrain_at_cell(row, col),
        });
    }
    Ok(PointCloud { points })
}
