//! Deterministic synthetic terrain world: terrain maps, trajectories,
//! multimodal sensor ticks, patch-feature images and point clouds, all pure
//! functions of their inputs and a seed.

pub mod camera;
pub mod io;
pub mod lidar;
pub mod sensors;
pub mod terrain;
pub mod trajectory;
pub mod world;

pub use camera::{render_patch_features, AffineCamera, FeatureParams, PatchFeatureImage};
pub use lidar::{sample_lidar, LidarPoint, PointCloud};
pub use sensors::{record_streams, sample_sensor_tick, GroupStream, SensorTick};
pub use terrain::{
    ChannelGroup, ChannelSignature, GroupLayout, SensorLayout, SignatureParams, TerrainSpec,
};
pub use trajectory::{gen_sweep, gen_terrain_walk, gen_trajectory, pose_at, MotionParams, Pose};
pub use world::{gen_corridor_world, gen_world, WorldMap, WorldSpec};
