use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::terrain::{ChannelGroup, GroupLayout, SensorLayout};
use super::trajectory::{pose_at, Pose};
use super::world::WorldMap;
use crate::error::{Error, Result};
use crate::rng;

/// One reading. `channels` holds either a full tick (all S channels in
/// layout order) or a single group's channels inside a [`GroupStream`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorTick {
    pub t: f64,
    pub channels: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terrain: Option<usize>,
}

/// Ticks of one channel group at its native rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStream {
    pub group: ChannelGroup,
    pub rate_hz: f64,
    pub ticks: Vec<SensorTick>,
}

fn sample_group(
    world: &WorldMap,
    g: &GroupLayout,
    pose: &Pose,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    let terrain_id = world.terrain_at(pose.x, pose.y)?;
    let terrain = world
        .terrain(terrain_id)
        .ok_or_else(|| Error::Internal(format!("terrain {terrain_id} missing")))?;
    let sig = terrain.group_signature(g.group).ok_or_else(|| {
        Error::invalid(format!(
            "terrain {} has no {} signature",
            terrain.name,
            g.group.name()
        ))
    })?;
    if sig.len() < g.channels {
        return Err(Error::invalid(format!(
            "terrain {} signature narrower than layout",
            terrain.name
        )));
    }
    let mut r = rng::stream(seed, g.group.name(), pose.t.to_bits());
    let values = sig[..g.channels]
        .iter()
        .map(|c| {
            let mut v =
                c.amplitude * (std::f64::consts::TAU * c.frequency * pose.t + c.phase).sin();
            if c.noise_std > 0.0 {
                v += Normal::new(0.0, c.noise_std).unwrap().sample(&mut r);
            }
            if g.group == ChannelGroup::Torque {
                v += terrain.effort_u;
            }
            v
        })
        .collect();
    Ok((values, terrain_id))
}

/// Full tick at `pose.t` from the terrain under the pose.
pub fn sample_sensor_tick(
    world: &WorldMap,
    layout: &SensorLayout,
    pose: &Pose,
    seed: u64,
) -> Result<SensorTick> {
    let mut channels = Vec::with_capacity(layout.width());
    let mut terrain = None;
    for g in &layout.groups {
        let (v, id) = sample_group(world, g, pose, seed)?;
        channels.extend(v);
        terrain = Some(id);
    }
    Ok(SensorTick {
        t: pose.t,
        channels,
        terrain,
    })
}

/// Records every group at its native rate along a trajectory.
pub fn record_streams(
    world: &WorldMap,
    layout: &SensorLayout,
    traj: &[Pose],
    seed: u64,
) -> Result<Vec<GroupStream>> {
    layout.validate()?;
    let (Some(first), Some(last)) = (traj.first(), traj.last()) else {
        return Err(Error::invalid("empty trajectory"));
    };
    layout
        .groups
        .iter()
        .map(|g| {
            let n = ((last.t - first.t) * g.rate_hz + 1e-9).floor() as usize + 1;
            let ticks = (0..n)
                .map(|i| {
                    let pose = pose_at(traj, first.t + i as f64 / g.rate_hz);
                    let (channels, id) = sample_group(world, g, &pose, seed)?;
                    Ok(SensorTick {
                        t: pose.t,
                        channels,
                        terrain: Some(id),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GroupStream {
                group: g.group,
                rate_hz: g.rate_hz,
                ticks,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::terrain::{ChannelSignature, SignatureParams, TerrainSpec};
    use crate::synthworld::world::{gen_world, WorldSpec};

    fn one_channel_world(sig: ChannelSignature, effort: f64) -> (WorldMap, SensorLayout) {
        let layout = SensorLayout {
            groups: vec![GroupLayout {
                group: ChannelGroup::Imu,
                channels: 1,
                rate_hz: 100.0,
            }],
        };
        let terrain = TerrainSpec {
            id: 0,
            name: "flat".into(),
            effort_u: effort,
            signature: vec![(ChannelGroup::Imu, vec![sig])],
            proto_seed: 1,
        };
        let world = WorldMap {
            rows: 8,
            cols: 8,
            resolution: 1.0,
            cells: vec![0; 64],
            elevation: vec![0.0; 64],
            terrains: vec![terrain],
        };
        (world, layout)
    }

    #[test]
    fn noiseless_sinusoid_values() {
        let sig = ChannelSignature {
            amplitude: 1.0,
            frequency: 1.0,
            phase: 0.0,
            noise_std: 0.0,
        };
        let (w, l) = one_channel_world(sig, 0.5);
        let tick = sample_sensor_tick(&w, &l, &Pose::new(0.25, 4.0, 4.0, 0.0), 1).unwrap();
        assert!((tick.channels[0] - 1.0).abs() < 1e-12);
        let sig = ChannelSignature { phase: 0.7, ..sig };
        let (w, l) = one_channel_world(sig, 0.5);
        let tick = sample_sensor_tick(&w, &l, &Pose::new(0.0, 4.0, 4.0, 0.0), 1).unwrap();
        assert!((tick.channels[0] - 0.7f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn noise_std_is_recovered_from_residuals() {
        let sig = ChannelSignature {
            amplitude: 1.0,
            frequency: 2.0,
            phase: 0.3,
            noise_std: 0.1,
        };
        let (w, l) = one_channel_world(sig, 0.5);
        let residuals: Vec<f64> = (0..1000)
            .map(|i| {
                let t = i as f64 * 0.01;
                let tick = sample_sensor_tick(&w, &l, &Pose::new(t, 4.0, 4.0, 0.0), 42).unwrap();
                tick.channels[0] - (std::f64::consts::TAU * 2.0 * t + 0.3).sin()
            })
            .collect();
        let mean = residuals.iter().sum::<f64>() / 1000.0;
        let sd = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        assert!((sd - 0.1).abs() <= 0.02, "sample std {sd}");
    }

    #[test]
    fn out_of_bounds_pose() {
        let sig = ChannelSignature {
            amplitude: 1.0,
            frequency: 1.0,
            phase: 0.0,
            noise_std: 0.0,
        };
        let (w, l) = one_channel_world(sig, 0.5);
        assert!(matches!(
            sample_sensor_tick(&w, &l, &Pose::new(0.0, -1.0, 2.0, 0.0), 1),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn torque_magnitude_monotone_in_effort() {
        let layout = SensorLayout::default();
        let params = SignatureParams {
            nuisance: 0.3,
            noise: 0.0,
            ..Default::default()
        };
        let terrains = TerrainSpec::catalog(6, &layout, params, 5);
        let spec = WorldSpec::default();
        let world = gen_world(&spec, &terrains, 6, 2).unwrap();
        let mut means: Vec<(f64, f64)> = terrains
            .iter()
            .map(|t| {
                let (r, c) = world.cells_of(t.id)[0];
                let (x, y) = world.cell_center(r, c);
                let torque_off = layout.offsets()[3];
                let mut acc = 0.0;
                let n = 2000;
                for i in 0..n {
                    let tick = sample_sensor_tick(
                        &world,
                        &layout,
                        &Pose::new(i as f64 * 0.013, x, y, 0.0),
                        1,
                    )
                    .unwrap();
                    acc += tick.channels[torque_off..torque_off + 4]
                        .iter()
                        .map(|v| v.abs())
                        .sum::<f64>();
                }
                (t.effort_u, acc / n as f64)
            })
            .collect();
        means.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in means.windows(2) {
            assert!(w[1].1 > w[0].1, "{means:?}");
        }
    }

    #[test]
    fn zero_noise_signatures_are_distinct() {
        let layout = SensorLayout::default();
        let params = SignatureParams {
            nuisance: 0.3,
            noise: 0.0,
            ..Default::default()
        };
        let terrains = TerrainSpec::catalog(6, &layout, params, 5);
        let world = gen_world(&WorldSpec::default(), &terrains, 6, 2).unwrap();
        let ticks: Vec<Vec<f64>> = terrains
            .iter()
            .map(|t| {
                let (r, c) = world.cells_of(t.id)[0];
                let (x, y) = world.cell_center(r, c);
                (0..20)
                    .flat_map(|i| {
                        sample_sensor_tick(
                            &world,
                            &layout,
                            &Pose::new(i as f64 * 0.05, x, y, 0.0),
                            0,
                        )
                        .unwrap()
                        .channels
                    })
                    .collect()
            })
            .collect();
        for i in 0..ticks.len() {
            for j in i + 1..ticks.len() {
                assert_ne!(ticks[i], ticks[j]);
            }
        }
    }

    #[test]
    fn streams_run_at_native_rates() {
        let layout = SensorLayout::default();
        let terrains = TerrainSpec::catalog(2, &layout, SignatureParams::default(), 5);
        let world = gen_world(&WorldSpec::default(), &terrains, 2, 2).unwrap();
        let traj = crate::synthworld::trajectory::gen_terrain_walk(
            &world,
            0,
            1,
            4.0,
            50.0,
            Default::default(),
        )
        .unwrap();
        let streams = record_streams(&world, &layout, &traj, 3).unwrap();
        for s in &streams {
            let dt = s.ticks[1].t - s.ticks[0].t;
            assert!((dt - 1.0 / s.rate_hz).abs() < 1e-9);
        }
    }
}
