use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Proprioceptive and inertial channel groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGroup {
    Imu,
    Joint,
    Feet,
    Torque,
    CmdVel,
    Vel,
}

impl ChannelGroup {
    pub const ALL: [ChannelGroup; 6] = [
        ChannelGroup::Imu,
        ChannelGroup::Joint,
        ChannelGroup::Feet,
        ChannelGroup::Torque,
        ChannelGroup::CmdVel,
        ChannelGroup::Vel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelGroup::Imu => "imu",
            ChannelGroup::Joint => "joint",
            ChannelGroup::Feet => "feet",
            ChannelGroup::Torque => "torque",
            ChannelGroup::CmdVel => "cmd_vel",
            ChannelGroup::Vel => "vel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::config(format!("unknown sensor group `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub group: ChannelGroup,
    pub channels: usize,
    pub rate_hz: f64,
}

/// Sensor layout: which groups exist, their width and native rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub groups: Vec<GroupLayout>,
}

impl Default for SensorLayout {
    fn default() -> Self {
        use ChannelGroup::*;
        let g = |group, channels, rate_hz| GroupLayout {
            group,
            channels,
            rate_hz,
        };
        Self {
            groups: vec![
                g(Imu, 6, 50.0),
                g(Joint, 4, 25.0),
                g(Feet, 4, 25.0),
                g(Torque, 4, 25.0),
                g(CmdVel, 2, 5.0),
                g(Vel, 2, 5.0),
            ],
        }
    }
}

impl SensorLayout {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::config("sensor layout has no groups"));
        }
        for g in &self.groups {
            if !(g.rate_hz > 0.0) || g.channels == 0 {
                return Err(Error::config(format!(
                    "group {} needs channels > 0 and rate > 0",
                    g.group.name()
                )));
            }
        }
        Ok(())
    }

    /// Total channel count S.
    pub fn width(&self) -> usize {
        self.groups.iter().map(|g| g.channels).sum()
    }

    pub fn master_rate(&self) -> f64 {
        self.groups.iter().map(|g| g.rate_hz).fold(0.0, f64::max)
    }

    /// Column offset of each group inside a full tick.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.groups
            .iter()
            .map(|g| {
                let o = acc;
                acc += g.channels;
                o
            })
            .collect()
    }

    /// Group of every channel, in tick order.
    pub fn channel_groups(&self) -> Vec<ChannelGroup> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(g.group, g.channels))
            .collect()
    }

    /// Layout restricted to the given groups (sensor ablation).
    pub fn select(&self, keep: &[ChannelGroup]) -> Result<Self> {
        let groups: Vec<_> = self
            .groups
            .iter()
            .filter(|g| keep.contains(&g.group))
            .cloned()
            .collect();
        let out = Self { groups };
        out.validate()?;
        Ok(out)
    }
}

/// One sinusoidal channel of a terrain's sensor signature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSignature {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub id: usize,
    pub name: String,
    /// Normalized effort in `[0, 1]`.
    pub effort_u: f64,
    /// Signature per group, one entry per channel of that group.
    pub signature: Vec<(ChannelGroup, Vec<ChannelSignature>)>,
    pub proto_seed: u64,
}

const NAMES: [&str; 8] = [
    "asphalt",
    "cobble_grass",
    "grass",
    "gravel",
    "dirt",
    "cobblestone",
    "tall_grass",
    "sand",
];
// Continual-learning order: reference terrain first, base terrains spanning the effort range.
const EFFORTS: [f64; 8] = [0.05, 0.55, 0.9, 0.3, 0.75, 0.15, 0.65, 0.4];

/// How signatures are synthesized from effort.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureParams {
    /// Per-terrain random perturbation of amplitudes and frequencies unrelated to effort.
    pub nuisance: f64,
    /// Base noise std on every channel (scaled up with effort).
    pub noise: f64,
    /// Share of the inertial vibration level set by a per-terrain texture
    /// draw instead of effort (0 = vibration fully effort-driven).
    pub texture: f64,
}

impl Default for SignatureParams {
    fn default() -> Self {
        Self {
            nuisance: 0.3,
            noise: 0.05,
            texture: 0.5,
        }
    }
}

impl TerrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.effort_u) {
            return Err(Error::config(format!(
                "terrain {} effort_u {} outside [0,1]",
                self.id, self.effort_u
            )));
        }
        for (_, chans) in &self.signature {
            if chans.iter().any(|c| !(c.noise_std >= 0.0)) {
                return Err(Error::config(format!(
                    "terrain {} has negative noise_std",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn group_signature(&self, group: ChannelGroup) -> Option<&[ChannelSignature]> {
        self.signature
            .iter()
            .find(|(g, _)| *g == group)
            .map(|(_, s)| s.as_slice())
    }

    /// Signature synthesized from effort: harder terrain vibrates more, at
    /// higher frequency, with larger torque and foot-contact swings.
    pub fn synthesize(
        id: usize,
        name: &str,
        effort_u: f64,
        layout: &SensorLayout,
        params: SignatureParams,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, "terrain-signature", id as u64);
        let u = effort_u;
        let vib = (1.0 - params.texture) * u + params.texture * r.random_range(0.0..1.0);
        let gait = 1.5;
        let mut signature = Vec::new();
        for g in &layout.groups {
            let chans = (0..g.channels)
                .map(|_| {
                    let nz = |r: &mut rand_chacha::ChaCha8Rng| {
                        params.nuisance * r.random_range(-1.0..1.0)
                    };
                    let phase = r.random_range(0.0..std::f64::consts::TAU);
                    let (amplitude, frequency, noise_std) = match g.group {
                        ChannelGroup::Imu => (
                            0.3 + 1.2 * vib + 0.3 * nz(&mut r),
                            3.0 + 6.0 * vib + 2.0 * nz(&mut r),
                            params.noise * (1.0 + 2.0 * vib),
                        ),
                        ChannelGroup::Joint => (
                            0.5 + 0.5 * u + 0.3 * nz(&mut r),
                            gait + 0.5 * nz(&mut r),
                            params.noise,
                        ),
                        ChannelGroup::Feet => (
                            0.2 + 0.8 * u + 0.2 * nz(&mut r),
                            gait,
                            params.noise * (1.0 + u),
                        ),
                        ChannelGroup::Torque => (0.1 + 0.4 * u, gait, params.noise),
                        ChannelGroup::CmdVel => (0.05, 0.2, params.noise * 0.2),
                        ChannelGroup::Vel => (0.1 + 0.3 * u + 0.1 * nz(&mut r), gait, params.noise),
                    };
                    ChannelSignature {
                        amplitude: amplitude.max(0.0),
                        frequency: frequency.max(0.1),
                        phase,
                        noise_std,
                    }
                })
                .collect();
            signature.push((g.group, chans));
        }
        Self {
            id,
            name: name.to_string(),
            effort_u,
            signature,
            proto_seed: rng::derive(seed, "proto", id as u64),
        }
    }

    /// Default terrain catalog of `n` terrains (reference terrain first).
    pub fn catalog(
        n: usize,
        layout: &SensorLayout,
        params: SignatureParams,
        seed: u64,
    ) -> Vec<Self> {
        (0..n)
            .map(|id| {
                let (name, u) = if id < NAMES.len() {
                    (NAMES[id].to_string(), EFFORTS[id])
                } else {
                    let mut r = rng::stream(seed, "extra-terrain", id as u64);
                    (format!("terrain_{id}"), r.random_range(0.0..1.0))
                };
                Self::synthesize(id, &name, u, layout, params, seed)
            })
            .collect()
    }

    /// Unit-norm visual prototype of dimension `dim`.
    pub fn prototype(&self, dim: usize) -> Vec<f64> {
        let mut r = rng::stream(self.proto_seed, "prototype", dim as u64);
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }
}
