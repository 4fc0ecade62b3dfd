//! Continual visual learning on a synthetic stream: one increment per
//! terrain, supervised from experienced scores, evaluated on all terrains
//! after every increment.

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{forgetting_curve, TerrainStats};
use crate::replay::FeatureBuffer;
use crate::rng;
use crate::scoring::{ScoreEntry, ScoreSeries};
use crate::supervision::{build_supervision, project_footprints, segment_terrain, SupervisionMask};
use crate::synthworld::{
    gen_terrain_walk, render_patch_features, AffineCamera, FeatureParams, MotionParams,
    PatchFeatureImage, Pose, WorldMap,
};
use crate::vismodel::{
    compute_reference, DecoderParams, ReferenceFeatures, StepReport, VisualTrainConfig,
    VisualTrainer,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Recording length per increment (s).
    pub duration: f64,
    /// Pose rate (Hz).
    pub rate: f64,
    /// Seconds between training images.
    pub image_interval: f64,
    /// Future poses within this many seconds become footprints.
    pub lookahead: f64,
    pub motion: MotionParams,
    pub camera: AffineCamera,
    pub features: FeatureParams,
    /// Cosine threshold for growing terrain segments.
    pub similarity: f64,
    pub test_images_per_terrain: usize,
    pub reference_images: usize,
    pub steps_per_increment: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            duration: 60.0,
            rate: 10.0,
            image_interval: 1.0,
            lookahead: 6.0,
            motion: MotionParams {
                speed: 0.5,
                heading_noise: 0.3,
                odometry_noise: 0.0,
            },
            camera: AffineCamera::default(),
            features: FeatureParams::default(),
            similarity: 0.95,
            test_images_per_terrain: 4,
            reference_images: 5,
            steps_per_increment: 150,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.duration,
            self.rate,
            self.image_interval,
            self.lookahead,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config(
                "stream duration, rate, image interval and lookahead must be > 0",
            ));
        }
        if !(self.similarity > 0.0 && self.similarity < 1.0) {
            return Err(Error::config("similarity threshold must be in (0, 1)"));
        }
        if self.test_images_per_terrain == 0 || self.reference_images == 0 {
            return Err(Error::config(
                "need at least one test and one reference image",
            ));
        }
        Ok(())
    }
}

/// Scores known from ground truth: `1 − u` of the terrain under each pose
/// plus gaussian noise, clamped to `[0, 1]`.
pub fn oracle_scores(
    world: &WorldMap,
    poses: &[Pose],
    noise: f64,
    seed: u64,
) -> Result<ScoreSeries> {
    let mut r = rng::stream(seed, "oracle-scores", 0);
    let nd =
        rand_distr::Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let entries = poses
        .iter()
        .map(|p| {
            let t = world.terrain_at(p.x, p.y)?;
            let u = world.terrain(t).map_or(0.5, |s| s.effort_u);
            let jitter = if noise > 0.0 {
                rand_distr::Distribution::sample(&nd, &mut r)
            } else {
                0.0
            };
            Ok(ScoreEntry {
                t: p.t,
                score: (1.0 - u + jitter).clamp(0.0, 1.0),
                terrain_gt: Some(t),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ScoreSeries { entries })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Increment {
    pub terrain: usize,
    pub samples: Vec<(PatchFeatureImage, SupervisionMask)>,
}

impl Increment {
    pub fn n_supervised(&self) -> usize {
        self.samples.iter().map(|(_, s)| s.n_valid()).sum()
    }
}

/// Training images along `poses`, each supervised by the footprints of the
/// poses that follow it within the lookahead.
pub fn build_increment(
    world: &WorldMap,
    terrain: usize,
    poses: &[Pose],
    scores: &ScoreSeries,
    cfg: &StreamConfig,
    seed: u64,
) -> Result<Increment> {
    let mut samples = Vec::new();
    let mut next_t = f64::NEG_INFINITY;
    for (i, pose) in poses.iter().enumerate() {
        if pose.t < next_t {
            continue;
        }
        next_t = pose.t + cfg.image_interval;
        let ahead: Vec<Pose> = poses[i..]
            .iter()
            .take_while(|p| p.t - pose.t <= cfg.lookahead)
            .copied()
            .collect();
        let image = render_patch_features(world, &cfg.camera, cfg.features, pose, seed)?;
        let footprint = project_footprints(&ahead, scores, pose, &cfg.camera);
        if footprint.pixels.is_empty() {
            continue;
        }
        let mask = segment_terrain(&image, &footprint, cfg.similarity)?;
        samples.push((image.clone(), build_supervision(&footprint, &mask)?));
    }
    Ok(Increment { terrain, samples })
}

/// Robot walk on `terrain` for one increment.
pub fn increment_poses(
    world: &WorldMap,
    terrain: usize,
    cfg: &StreamConfig,
    seed: u64,
) -> Result<Vec<Pose>> {
    gen_terrain_walk(
        world,
        terrain,
        rng::derive(seed, "increment-walk", terrain as u64),
        cfg.duration,
        cfg.rate,
        cfg.motion,
    )
}

/// Images looking over a terrain's interior from random headings.
pub fn terrain_views(
    world: &WorldMap,
    terrain: usize,
    n: usize,
    cfg: &StreamConfig,
    seed: u64,
) -> Result<Vec<PatchFeatureImage>> {
    let mut cells = world.interior_cells_of(terrain, 4);
    if cells.is_empty() {
        cells = world.cells_of(terrain);
    }
    if cells.is_empty() {
        return Err(Error::invalid(format!(
            "terrain {terrain} not present in world"
        )));
    }
    let mut r = rng::stream(seed, "terrain-views", terrain as u64);
    (0..n)
        .map(|k| {
            let (row, col) = cells[r.random_range(0..cells.len())];
            let (x, y) = world.cell_center(row, col);
            let yaw = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            render_patch_features(
                world,
                &cfg.camera,
                cfg.features,
                &Pose::new(k as f64, x, y, yaw),
                rng::derive(seed, "view-noise", terrain as u64),
            )
        })
        .collect()
}

/// Per-terrain statistics of all valid supervision values in the stream,
/// keyed by each patch's ground-truth terrain.
pub fn supervision_stats(increments: &[Increment]) -> TerrainStats {
    TerrainStats::from_samples(increments.iter().flat_map(|inc| {
        inc.samples.iter().flat_map(|(img, sup)| {
            (0..sup.values.len())
                .filter(|&i| sup.valid[i])
                .map(|i| (img.terrain_gt[i], sup.values[i]))
        })
    }))
}

#[derive(Clone, Debug)]
pub struct ContinualRun {
    pub snapshots: Vec<(DecoderParams, ReferenceFeatures)>,
    pub curve: Vec<f64>,
    pub stats: TerrainStats,
    pub steps: Vec<Vec<StepReport>>,
    /// Replay buffer after the last increment.
    pub replay: FeatureBuffer,
}

/// Trains through the increments in order, snapshotting after each, and
/// evaluates every snapshot on `test`.
pub fn run_continual(
    increments: &[Increment],
    reference_images: &[PatchFeatureImage],
    reference_terrain: usize,
    test: &[PatchFeatureImage],
    params: DecoderParams,
    train: VisualTrainConfig,
    steps_per_increment: usize,
) -> Result<ContinualRun> {
    let mut trainer = VisualTrainer::new(params, train)?;
    let ref_seed = rng::derive(trainer.config.seed, "reference", 0);
    let mut snapshots = Vec::new();
    let mut steps = Vec::new();
    for (k, inc) in increments.iter().enumerate() {
        let usable: Vec<usize> = (0..inc.samples.len())
            .filter(|&i| inc.samples[i].1.n_valid() > 0)
            .collect();
        if usable.is_empty() {
            return Err(Error::invalid(format!(
                "increment {k} has no supervised image"
            )));
        }
        let mut r = rng::stream(trainer.config.seed, "increment-batches", k as u64);
        let mut reports = Vec::with_capacity(steps_per_increment);
        for _ in 0..steps_per_increment {
            let batch: Vec<_> = (0..trainer.config.batch)
                .map(|_| inc.samples[usable[r.random_range(0..usable.len())]].clone())
                .collect();
            let reference = compute_reference(
                reference_images,
                reference_terrain,
                &trainer.params,
                ref_seed,
            )?;
            reports.push(trainer.train_step(&batch, &reference)?);
        }
        let reference = compute_reference(
            reference_images,
            reference_terrain,
            &trainer.params,
            ref_seed,
        )?;
        info!(
            "increment {k} (terrain {}): last loss {:?}",
            inc.terrain,
            reports.last().map(|s| s.total)
        );
        snapshots.push((trainer.params.clone(), reference));
        steps.push(reports);
    }
    let stats = supervision_stats(increments);
    let curve = forgetting_curve(&snapshots, test, &stats)?;
    Ok(ContinualRun {
        snapshots,
        curve,
        stats,
        steps,
        replay: trainer.replay,
    })
}
