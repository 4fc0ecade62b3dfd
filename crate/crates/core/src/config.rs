//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. A `profile` key (`default` or
//! `fast`) picks the base values before the other keys apply, wherever it
//! appears in the file.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::synthworld::ChannelGroup;

/// Value types a config key can hold.
trait KvValue: Sized {
    fn parse_kv(s: &str) -> Option<Self>;
    fn format_kv(&self) -> String;
}

macro_rules! scalar_kv {
    ($($t:ty),*) => {$(
        impl KvValue for $t {
            fn parse_kv(s: &str) -> Option<Self> {
                <$t>::from_str(s).ok()
            }
            fn format_kv(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_kv!(u64, usize, f64, bool, String);

impl<T: FromStr + Display> KvValue for Vec<T> {
    fn parse_kv(s: &str) -> Option<Self> {
        if s.is_empty() {
            return Some(Vec::new());
        }
        s.split(',').map(|x| x.trim().parse().ok()).collect()
    }
    fn format_kv(&self) -> String {
        self.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

macro_rules! run_config {
    ($($key:literal => $field:ident : $ty:ty = $default:expr, $doc:literal;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            /// Every key in declaration order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = <$ty as KvValue>::parse_kv(value)
                            .ok_or_else(|| Error::config(format!("{key}: cannot parse {value:?}")))?;
                    })*
                    _ => return Err(Error::config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$field.format_kv()),)*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    "seed" => seed: u64 = 7, "Master seed; every random draw derives from it.";
    "world.rows" => world_rows: usize = 64, "Main world grid rows.";
    "world.cols" => world_cols: usize = 64, "Main world grid columns.";
    "world.resolution" => world_resolution: f64 = 0.25, "Cell size (m).";
    "world.terrains" => n_terrains: usize = 6, "Terrains drawn from the catalog.";
    "world.elevation" => elevation_amplitude: f64 = 0.03, "Amplitude of the smooth height field (m).";
    "world.texture" => texture: f64 = 0.5, "Share of vibration set by terrain texture instead of effort.";
    "order" => order: Vec<usize> = Vec::new(), "Continual-learning terrain order; empty means catalog order.";
    "reference_terrain" => reference_terrain: usize = 0, "Smooth terrain anchoring all scores.";
    "sensor.channels" => channels: Vec<String> = Vec::new(), "Sensor groups kept; empty keeps all.";
    "vae.window" => vae_window: usize = 50, "Frame length in master ticks.";
    "vae.stride" => vae_stride: usize = 25, "Training frame stride in master ticks.";
    "vae.test_stride" => vae_test_stride: usize = 10, "Evaluation frame stride in master ticks.";
    "vae.epochs" => vae_epochs: usize = 13, "Base-phase epochs.";
    "vae.lr" => vae_lr: f64 = 1e-3, "Base learning rate.";
    "vae.online_lr_scale" => vae_online_lr_scale: f64 = 0.01, "Online learning rate relative to the base one.";
    "vae.batch" => vae_batch: usize = 128, "Frames per batch.";
    "vae.base_terrains" => base_terrains: usize = 3, "Leading terrains of the order learned offline.";
    "vae.duration" => vae_duration: f64 = 120.0, "Recording per training terrain (s).";
    "vae.test_duration" => vae_test_duration: f64 = 60.0, "Recording per evaluation terrain (s).";
    "vae.speed" => vae_speed: f64 = 1.0, "Robot speed while recording (m/s).";
    "vae.robust_window" => robust_window: f64 = 2.5, "Trailing-minimum window on scores (s).";
    "vae.alpha" => alpha: f64 = 16.0, "KL weight.";
    "vae.beta" => beta: f64 = 16.0, "Reconstruction weight.";
    "vae.gamma" => gamma: f64 = 3.0, "VicReg weight.";
    "vae.lambda" => lambda: f64 = 25.0, "VicReg invariance weight.";
    "vae.mu" => mu: f64 = 25.0, "VicReg variance weight.";
    "vae.nu" => nu: f64 = 1.0, "VicReg covariance weight.";
    "vae.inc" => use_inc: bool = true, "Anchor old frames during online learning.";
    "vae.adam" => vae_adam: bool = false, "Adam instead of plain gradient descent.";
    "visual.scores" => visual_scores: String = "oracle".into(), "Supervision source: oracle or sensor.";
    "visual.score_noise" => score_noise: f64 = 0.1, "Std of the noise on oracle scores.";
    "visual.lr" => visual_lr: f64 = 0.01, "Decoder learning rate.";
    "visual.steps" => visual_steps: usize = 150, "Training steps per increment.";
    "visual.batch" => visual_batch: usize = 2, "Images per step.";
    "visual.head" => head: String = "cosine".into(), "Prediction head: cosine alignment or direct regression.";
    "visual.batch_norm" => batch_norm: bool = false, "Batch norm in the decoder.";
    "visual.similarity" => similarity: f64 = 0.95, "Cosine threshold for growing terrain segments.";
    "visual.duration" => stream_duration: f64 = 60.0, "Recording per increment (s).";
    "visual.test_images" => test_images: usize = 4, "Test views per terrain.";
    "visual.feature_noise" => patch_noise: f64 = 0.05, "Noise norm on rendered patch features.";
    "replay.enabled" => replay: bool = true, "Feature replay on or off.";
    "replay.capacity" => capacity: usize = 200, "Replay buffer size.";
    "replay.t_b" => t_b: u64 = 100, "Steps between buffer updates.";
    "replay.t_r" => t_r: u64 = 1, "Steps between replay losses.";
    "replay.weight" => replay_weight: f64 = 20.0, "Replay loss weight.";
    "replay.fcm" => fcm: bool = true, "Feature cut-mix on or off.";
    "replay.p_fcm" => p_fcm: f64 = 0.5, "Cut-mix probability per image.";
    "map.rows" => map_rows: usize = 24, "Corridor world rows.";
    "map.cols" => map_cols: usize = 36, "Corridor world columns.";
    "map.lambda" => map_lambda: f64 = 0.2, "Voxel moving-average weight; 0 selects the running mean.";
    "map.h_max" => h_max: f64 = 1.0, "Highest voxel kept above the ground plane (m).";
    "map.lidar_points" => lidar_points: usize = 400, "Points per scan.";
    "map.lidar_range" => lidar_range: f64 = 4.0, "Scan radius (m).";
    "map.spacing" => sweep_spacing: f64 = 0.5, "Pose spacing along a sweep lane (m).";
    "map.ransac_iterations" => ransac_iterations: usize = 200, "Plane hypotheses tried.";
    "plan.w_trav" => w_trav: f64 = 5.0, "Traversability weight in the edge cost.";
    "eval.bins" => bins: usize = 32, "Histogram bins for score overlap.";
}

impl RunConfig {
    /// Continuous-integration scale: 4 terrains on a 32×32 world with short
    /// recordings and fewer steps.
    pub fn fast() -> Self {
        Self {
            world_rows: 32,
            world_cols: 32,
            n_terrains: 4,
            base_terrains: 2,
            vae_epochs: 4,
            vae_duration: 40.0,
            vae_test_duration: 20.0,
            visual_steps: 60,
            stream_duration: 30.0,
            test_images: 2,
            map_rows: 16,
            map_cols: 24,
            lidar_points: 200,
            ..Self::default()
        }
    }

    pub fn from_profile(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "fast" => Ok(Self::fast()),
            _ => Err(Error::config(format!("unknown profile {name:?}"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let profile = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "profile")
            .map_or("default", |(_, v)| v.as_str());
        let mut cfg = Self::from_profile(profile)?;
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every key with its value, one per line; parses back to `self`.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Terrain ids in learning order.
    pub fn terrain_order(&self) -> Vec<usize> {
        if self.order.is_empty() {
            (0..self.n_terrains).collect()
        } else {
            self.order.clone()
        }
    }

    pub fn channel_groups(&self) -> Result<Vec<ChannelGroup>> {
        self.channels
            .iter()
            .map(|s| ChannelGroup::parse(s))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let order = self.terrain_order();
        if self.n_terrains < 2 {
            return Err(Error::config("need at least 2 terrains"));
        }
        if let Some(bad) = order.iter().find(|&&t| t >= self.n_terrains) {
            return Err(Error::config(format!(
                "order references terrain {bad} but the world has {}",
                self.n_terrains
            )));
        }
        if self.reference_terrain >= self.n_terrains {
            return Err(Error::config("reference terrain does not exist"));
        }
        if self.base_terrains == 0 || self.base_terrains > order.len() {
            return Err(Error::config("vae.base_terrains must be in 1..=len(order)"));
        }
        if self.t_b < 1 || self.t_r < 1 {
            return Err(Error::config("replay intervals must be >= 1"));
        }
        if !matches!(self.visual_scores.as_str(), "oracle" | "sensor") {
            return Err(Error::config("visual.scores must be oracle or sensor"));
        }
        if !matches!(self.head.as_str(), "cosine" | "direct") {
            return Err(Error::config("visual.head must be cosine or direct"));
        }
        if !(self.map_lambda >= 0.0 && self.map_lambda <= 1.0) {
            return Err(Error::config("map.lambda must be in [0, 1]"));
        }
        if !(self.w_trav >= 0.0) {
            return Err(Error::config("plan.w_trav must be >= 0"));
        }
        self.channel_groups()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::fast();
        c.order = vec![0, 2, 1, 3];
        c.channels = vec!["imu".into(), "torque".into()];
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn profile_applies_first() {
        let c = RunConfig::parse("seed = 3\n# comment\nprofile = fast\nworld.rows = 40").unwrap();
        assert_eq!((c.seed, c.world_rows, c.n_terrains), (3, 40, 4));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("replay.t_r = 0").is_err());
        assert!(RunConfig::parse("order = 0,9").is_err());
        assert!(RunConfig::parse("just text").is_err());
    }
}
