use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::world::WorldMap;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(t: f64, x: f64, y: f64, yaw: f64) -> Self {
        Self { t, x, y, yaw }
    }

    /// World point → robot frame (x forward, y left).
    pub fn to_local(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (dx, dy) = (wx - self.x, wy - self.y);
        let (s, c) = self.yaw.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Robot frame → world point.
    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }
}

/// Linear interpolation of a trajectory at time `t` (clamped to its ends).
pub fn pose_at(traj: &[Pose], t: f64) -> Pose {
    let i = traj.partition_point(|p| p.t <= t);
    if i == 0 {
        return traj[0];
    }
    if i >= traj.len() {
        return *traj.last().unwrap();
    }
    let (a, b) = (traj[i - 1], traj[i]);
    let s = (t - a.t) / (b.t - a.t);
    let dyaw = (b.yaw - a.yaw + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
        - std::f64::consts::PI;
    Pose::new(
        t,
        a.x + s * (b.x - a.x),
        a.y + s * (b.y - a.y),
        a.yaw + s * dyaw,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    /// Forward speed (m/s).
    pub speed: f64,
    /// Std of the heading random walk (rad/√s).
    pub heading_noise: f64,
    /// Optional zero-mean pose noise std (m); 0 disables.
    pub odometry_noise: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            speed: 1.0,
            heading_noise: 0.3,
            odometry_noise: 0.0,
        }
    }
}

fn uniform_times(duration: f64, rate: f64) -> Result<Vec<f64>> {
    if !(duration > 0.0) || !(rate > 0.0) {
        return Err(Error::invalid("duration and rate must be > 0"));
    }
    let n = (duration * rate).round() as usize;
    Ok((0..n).map(|i| i as f64 / rate).collect())
}

fn add_odometry_noise(poses: &mut [Pose], std: f64, seed: u64) {
    if std <= 0.0 {
        return;
    }
    let mut r = rng::stream(seed, "odometry-noise", 0);
    let n = Normal::new(0.0, std).unwrap();
    for p in poses {
        p.x += n.sample(&mut r);
        p.y += n.sample(&mut r);
    }
}

/// Coverage trajectory: drives straight toward a random cell of each terrain
/// in turn (cycling through terrain ids), so every region is visited once
/// the duration allows it.
pub fn gen_trajectory(
    world: &WorldMap,
    seed: u64,
    duration: f64,
    rate: f64,
    motion: MotionParams,
) -> Result<Vec<Pose>> {
    if world.is_empty() || world.terrains.is_empty() {
        return Err(Error::invalid("empty world"));
    }
    let times = uniform_times(duration, rate)?;
    let mut r = rng::stream(seed, "trajectory", 0);
    let mut ids: Vec<usize> = world.terrains.iter().map(|t| t.id).collect();
    ids.retain(|id| world.cells.contains(id));
    let pick = |id: usize, r: &mut rand_chacha::ChaCha8Rng| {
        let interior = world.interior_cells_of(id, 1);
        let cells = if interior.is_empty() {
            world.cells_of(id)
        } else {
            interior
        };
        let (row, col) = cells[r.random_range(0..cells.len())];
        world.cell_center(row, col)
    };
    let mut pos = pick(ids[0], &mut r);
    let mut target_idx = 1 % ids.len();
    let mut target = pick(ids[target_idx], &mut r);
    let mut yaw = (target.1 - pos.1).atan2(target.0 - pos.0);
    let step = motion.speed / rate;
    let mut poses = Vec::with_capacity(times.len());
    for t in times {
        poses.push(Pose::new(t, pos.0, pos.1, yaw));
        let (dx, dy) = (target.0 - pos.0, target.1 - pos.1);
        let dist = dx.hypot(dy);
        if dist <= step {
            pos = target;
            target_idx = (target_idx + 1) % ids.len();
            target = pick(ids[target_idx], &mut r);
        } else {
            yaw = dy.atan2(dx);
            pos = (pos.0 + step * dx / dist, pos.1 + step * dy / dist);
        }
    }
    add_odometry_noise(&mut poses, motion.odometry_noise, seed);
    Ok(poses)
}

/// Random walk confined to one terrain region: the heading drifts randomly
/// and the robot turns away whenever the next step would leave the region.
pub fn gen_terrain_walk(
    world: &WorldMap,
    terrain: usize,
    seed: u64,
    duration: f64,
    rate: f64,
    motion: MotionParams,
) -> Result<Vec<Pose>> {
    let times = uniform_times(duration, rate)?;
    let mut cells = world.interior_cells_of(terrain, 3);
    if cells.is_empty() {
        cells = world.cells_of(terrain);
    }
    if cells.is_empty() {
        return Err(Error::invalid(format!(
            "terrain {terrain} not present in world"
        )));
    }
    let mut r = rng::stream(seed, "terrain-walk", terrain as u64);
    let (row, col) = cells[r.random_range(0..cells.len())];
    let mut pos = world.cell_center(row, col);
    let mut yaw: f64 = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let step = motion.speed / rate;
    let turn = Normal::new(0.0, motion.heading_noise / rate.sqrt()).unwrap();
    let inside = |x: f64, y: f64| {
        world
            .cell_of(x, y)
            .is_some_and(|(r, c)| world.terrain_at_cell(r, c) == terrain)
    };
    let mut poses = Vec::with_capacity(times.len());
    for t in times {
        poses.push(Pose::new(t, pos.0, pos.1, yaw));
        yaw += turn.sample(&mut r);
        // if every retry fails the robot is stuck in a sliver and stays put
        for _ in 0..32 {
            // look a little ahead so the robot does not graze the boundary
            let ahead = (
                pos.0 + 4.0 * step * yaw.cos(),
                pos.1 + 4.0 * step * yaw.sin(),
            );
            let next = (pos.0 + step * yaw.cos(), pos.1 + step * yaw.sin());
            if inside(next.0, next.1) && inside(ahead.0, ahead.1) {
                pos = next;
                break;
            }
            yaw += r.random_range(std::f64::consts::FRAC_PI_2..std::f64::consts::PI)
                * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        }
        yaw = (yaw + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
    }
    add_odometry_noise(&mut poses, motion.odometry_noise, seed);
    Ok(poses)
}

/// Boustrophedon sweep over the world with poses every `spacing` meters,
/// used for mapping runs.
pub fn gen_sweep(world: &WorldMap, spacing: f64, lane: f64, margin: f64) -> Vec<Pose> {
    let mut poses = Vec::new();
    let (w, h) = (world.width_m(), world.height_m());
    let mut y = margin;
    let mut forward = true;
    let mut t = 0.0;
    while y <= h - margin + 1e-9 {
        let mut xs: Vec<f64> = Vec::new();
        let mut x = margin;
        while x <= w - margin + 1e-9 {
            xs.push(x);
            x += spacing;
        }
        if !forward {
            xs.reverse();
        }
        let yaw = if forward { 0.0 } else { std::f64::consts::PI };
        for x in xs {
            poses.push(Pose::new(t, x, y, yaw));
            t += 1.0;
        }
        // look both ways on every lane
        let mut back: Vec<Pose> = poses
            .iter()
            .rev()
            .take_while(|p| (p.y - y).abs() < 1e-9)
            .copied()
            .collect();
        for p in back.iter_mut() {
            p.yaw = if forward { std::f64::consts::PI } else { 0.0 };
            p.t = t;
            t += 1.0;
        }
        poses.extend(back);
        forward = !forward;
        y += lane;
    }
    poses
}
