//! Staged experiment pipeline over a run directory.
//!
//! Stages in order: world generation, sensor-model training, continual
//! visual training, mapping, planning and evaluation. Each stage reads the
//! artifacts of earlier stages and fails with [`Error::MissingArtifact`]
//! naming the subcommand that produces whatever is absent.
//!
//! ```text
//! config.txt
//! world/       main world (terrain.csv, elevation.csv, world.json)
//! corridor/    mapping and planning world
//! sensor/      vae.ckpt, reference.json, scores.csv, scores_base.csv
//! visual/      inc<k>/{decoder.ckpt, reference.json}, replay.ckpt,
//!              stats.json, curve.csv, losses.csv, supervision/
//! map/         height.csv, traversability.csv, observed.csv, elevation.json, plane.json
//! plan/        path.csv, euclidean.csv, paths.json
//! report.json
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path as FsPath, PathBuf};

use log::info;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::RunConfig;
use crate::continual::{
    build_increment, increment_poses, oracle_scores, run_continual, terrain_views, ContinualRun,
    Increment, StreamConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    forgetting_curve, hyper_objective, path_effort, score_quality, segm_25d, EffortTable,
    MetricReport, TerrainStats,
};
use crate::mapping::{
    fit_ground_plane, project_points, reduce_to_elevation, ElevationMap, PlaneModel, ReduceParams,
    UpdateRule, VoxelMap,
};
use crate::planner::{plan, Cell, Path, PlanQuery};
use crate::replay::{ReplayConfig, ReplaySchedule};
use crate::rng;
use crate::scoring::{calibrate_reference, robustify, score_series, ReferenceProfile, ScoreSeries};
use crate::sensornet::{
    encode_batch, partition, record_anchors, synchronize, vae_train_base, vae_train_online,
    AnchorSet, LossWeights, SensorFrame, TrainConfig, VaeConfig, VaeOptimizer, VaeParams,
};
use crate::synthworld::io::{load_world, save_world};
use crate::synthworld::{
    gen_corridor_world, gen_sweep, gen_terrain_walk, gen_world, record_streams,
    render_patch_features, sample_lidar, FeatureParams, MotionParams, PatchFeatureImage, Pose,
    SensorLayout, SignatureParams, TerrainSpec, WorldMap, WorldSpec,
};
use crate::vismodel::{
    predict_image, DecoderConfig, DecoderParams, HeadKind, ReferenceFeatures, VisualTrainConfig,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "report.json";

/// Subcommand names, indexed by stage.
pub const STAGES: [&str; 6] = [
    "gen-world",
    "train-sensor",
    "train-visual",
    "map",
    "plan",
    "eval",
];

/// Directories each stage writes, indexed like [`STAGES`].
const STAGE_DIRS: [&[&str]; 6] = [
    &["world", "corridor"],
    &["sensor"],
    &["visual"],
    &["map"],
    &["plan"],
    &[],
];

/// Earliest stage whose output depends on a config key.
pub fn stage_of(key: &str) -> usize {
    match key {
        "seed" | "map.rows" | "map.cols" => 0,
        k if k.starts_with("world.") => 0,
        "order" | "reference_terrain" => 1,
        k if k.starts_with("sensor.") || k.starts_with("vae.") => 1,
        k if k.starts_with("visual.") || k.starts_with("replay.") => 2,
        k if k.starts_with("map.") => 3,
        k if k.starts_with("plan.") => 4,
        _ => 5,
    }
}

/// Run directory with artifact lookup.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Path of an existing artifact, or the error naming its producer.
    pub fn require(&self, rel: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, producer })
        }
    }

    fn create(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p)?;
        Ok(p)
    }
}

fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &FsPath) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

// ---- world ----

pub fn build_world(cfg: &RunConfig) -> Result<WorldMap> {
    let signature = SignatureParams {
        texture: cfg.texture,
        ..Default::default()
    };
    let terrains = TerrainSpec::catalog(
        cfg.n_terrains,
        &SensorLayout::default(),
        signature,
        rng::derive(cfg.seed, "catalog", 0),
    );
    let spec = WorldSpec {
        rows: cfg.world_rows,
        cols: cfg.world_cols,
        resolution: cfg.world_resolution,
        elevation_amplitude: cfg.elevation_amplitude,
    };
    gen_world(
        &spec,
        &terrains,
        cfg.n_terrains,
        rng::derive(cfg.seed, "world", 0),
    )
}

/// Flat corridor world built from the easiest and the hardest terrain of
/// the main world.
pub fn build_corridor(world: &WorldMap, cfg: &RunConfig) -> Result<WorldMap> {
    let by_effort = |a: &&TerrainSpec, b: &&TerrainSpec| {
        a.effort_u.total_cmp(&b.effort_u).then(a.id.cmp(&b.id))
    };
    let low = world
        .terrains
        .iter()
        .min_by(by_effort)
        .ok_or_else(|| Error::invalid("world has no terrain"))?;
    let high = world.terrains.iter().max_by(by_effort).unwrap();
    gen_corridor_world(cfg.map_rows, cfg.map_cols, world.resolution, low, high)
}

pub fn cmd_gen_world(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    fs::create_dir_all(&run.root)?;
    fs::write(run.path(CONFIG_FILE), cfg.to_text())?;
    let world = build_world(cfg)?;
    save_world(&world, &run.path("world"))?;
    save_world(&build_corridor(&world, cfg)?, &run.path("corridor"))?;
    info!(
        "world {}x{} with {} terrains",
        world.rows,
        world.cols,
        world.terrains.len()
    );
    Ok(())
}

fn load_main_world(run: &RunDir) -> Result<WorldMap> {
    run.require("world/world.json", STAGES[0])?;
    load_world(&run.path("world"))
}

fn load_corridor(run: &RunDir) -> Result<WorldMap> {
    run.require("corridor/world.json", STAGES[0])?;
    load_world(&run.path("corridor"))
}

// ---- sensor model ----

pub fn sensor_layout(cfg: &RunConfig) -> Result<SensorLayout> {
    let full = SensorLayout::default();
    if cfg.channels.is_empty() {
        Ok(full)
    } else {
        full.select(&cfg.channel_groups()?)
    }
}

fn vae_train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.vae_epochs,
        lr: cfg.vae_lr,
        online_lr_scale: cfg.vae_online_lr_scale,
        batch: cfg.vae_batch,
        seed: rng::derive(cfg.seed, "vae-train", 0),
        weights: LossWeights {
            alpha: cfg.alpha,
            beta: cfg.beta,
            gamma: cfg.gamma,
            lambda: cfg.lambda,
            mu: cfg.mu,
            nu: cfg.nu,
        },
        optimizer: if cfg.vae_adam {
            VaeOptimizer::Adam
        } else {
            VaeOptimizer::GradientDescent
        },
        ..Default::default()
    }
}

/// Frames from a walk on one terrain; ids start at `id0`.
fn record_frames(
    world: &WorldMap,
    layout: &SensorLayout,
    cfg: &RunConfig,
    terrain: usize,
    tag: &str,
    duration: f64,
    stride: usize,
    id0: u64,
) -> Result<Vec<SensorFrame>> {
    let seed = rng::derive(cfg.seed, tag, terrain as u64);
    let motion = MotionParams {
        speed: cfg.vae_speed,
        ..Default::default()
    };
    let traj = gen_terrain_walk(world, terrain, seed, duration, layout.master_rate(), motion)?;
    let table = synchronize(&record_streams(world, layout, &traj, seed)?)?;
    let mut frames = partition(&table, cfg.vae_window, stride)?;
    for (i, f) in frames.iter_mut().enumerate() {
        f.id = id0 + i as u64;
    }
    Ok(frames)
}

fn robust_scores(
    frames: &[SensorFrame],
    params: &VaeParams,
    reference: &ReferenceProfile,
    window: f64,
) -> Result<ScoreSeries> {
    robustify(
        &score_series(&encode_batch(frames, params)?, reference)?,
        window,
    )
}

fn scores_per_terrain(
    test: &[Vec<SensorFrame>],
    params: &VaeParams,
    reference: &ReferenceProfile,
    window: f64,
) -> Result<ScoreSeries> {
    let mut entries = Vec::new();
    for frames in test {
        entries.extend(robust_scores(frames, params, reference, window)?.entries);
    }
    Ok(ScoreSeries { entries })
}

#[derive(Clone, Debug)]
pub struct SensorOutput {
    pub params: VaeParams,
    pub reference: ReferenceProfile,
    /// Test scores right after base training.
    pub base_scores: ScoreSeries,
    /// Test scores after all online increments.
    pub scores: ScoreSeries,
}

impl SensorOutput {
    /// Pearson correlation of per-terrain mean score with `1 − u`.
    pub fn correlation(&self, world: &WorldMap) -> Result<Option<f64>> {
        Ok(score_quality(
            &self.scores,
            &self.scores,
            &EffortTable::from_world(world),
            32,
        )?
        .correlation)
    }
}

/// Base training on the leading terrains of the order, then one online
/// increment per remaining terrain. Scores are calibrated on the
/// reference terrain and evaluated on a held-out walk over every terrain.
pub fn train_sensor(world: &WorldMap, cfg: &RunConfig) -> Result<SensorOutput> {
    let layout = sensor_layout(cfg)?;
    let order = cfg.terrain_order();
    let block = 1_000_000u64;
    let train: Vec<Vec<SensorFrame>> = order
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            record_frames(
                world,
                &layout,
                cfg,
                t,
                "sensor-train",
                cfg.vae_duration,
                cfg.vae_stride,
                block * k as u64,
            )
        })
        .collect::<Result<_>>()?;
    let id0 = block * order.len() as u64;
    let test: Vec<Vec<SensorFrame>> = (0..cfg.n_terrains)
        .map(|t| {
            record_frames(
                world,
                &layout,
                cfg,
                t,
                "sensor-test",
                cfg.vae_test_duration,
                cfg.vae_test_stride,
                id0 + block * t as u64,
            )
        })
        .collect::<Result<_>>()?;
    let calib = match order.iter().position(|&t| t == cfg.reference_terrain) {
        Some(k) => train[k].clone(),
        None => record_frames(
            world,
            &layout,
            cfg,
            cfg.reference_terrain,
            "sensor-calib",
            cfg.vae_duration,
            cfg.vae_stride,
            0,
        )?,
    };

    let tc = vae_train_config(cfg);
    let mut old: Vec<SensorFrame> = train[..cfg.base_terrains].concat();
    let mut params = VaeParams::init(
        VaeConfig::new(layout.width(), cfg.vae_window),
        rng::derive(cfg.seed, "vae-init", 0),
    )?;
    params.fit_normalization(&old)?;
    let (mut params, mut anchors, report) = vae_train_base(&old, &params, &tc)?;
    info!(
        "base training on {} frames: loss {:?}",
        old.len(),
        report.dataset_losses.last()
    );
    if !cfg.use_inc {
        anchors = AnchorSet::default();
    }
    let base_ref = calibrate_reference(&encode_batch(&calib, &params)?)?;
    let base_scores = scores_per_terrain(&test, &params, &base_ref, cfg.robust_window)?;

    for (k, frames) in train.iter().enumerate().skip(cfg.base_terrains) {
        params = vae_train_online(frames, &old, &params, &anchors, &tc)?.0;
        if cfg.use_inc {
            record_anchors(&mut anchors, frames, &params)?;
        }
        old.extend(frames.iter().cloned());
        info!("online increment on terrain {}", order[k]);
    }
    let reference = calibrate_reference(&encode_batch(&calib, &params)?)?;
    let scores = scores_per_terrain(&test, &params, &reference, cfg.robust_window)?;
    Ok(SensorOutput {
        params,
        reference,
        base_scores,
        scores,
    })
}

pub fn cmd_train_sensor(cfg: &RunConfig, run: &RunDir) -> Result<SensorOutput> {
    let world = load_main_world(run)?;
    let out = train_sensor(&world, cfg)?;
    let dir = run.create("sensor")?;
    out.params.save(&dir.join("vae.ckpt"))?;
    write_json(&dir.join("reference.json"), &out.reference)?;
    out.scores.write_csv(&dir.join("scores.csv"))?;
    out.base_scores.write_csv(&dir.join("scores_base.csv"))?;
    Ok(out)
}

// ---- visual model ----

pub fn stream_config(cfg: &RunConfig) -> StreamConfig {
    StreamConfig {
        duration: cfg.stream_duration,
        features: FeatureParams {
            noise: cfg.patch_noise,
            ..Default::default()
        },
        similarity: cfg.similarity,
        test_images_per_terrain: cfg.test_images,
        steps_per_increment: cfg.visual_steps,
        ..Default::default()
    }
}

/// Scores along an increment's walk, from ground truth or from the sensor
/// model run on the recorded streams.
pub fn increment_scores(
    world: &WorldMap,
    poses: &[Pose],
    terrain: usize,
    cfg: &RunConfig,
    sensor: Option<&(VaeParams, ReferenceProfile)>,
) -> Result<ScoreSeries> {
    match sensor {
        None => oracle_scores(
            world,
            poses,
            cfg.score_noise,
            rng::derive(cfg.seed, "oracle-scores", terrain as u64),
        ),
        Some((params, reference)) => {
            let layout = sensor_layout(cfg)?;
            let table = synchronize(&record_streams(
                world,
                &layout,
                poses,
                rng::derive(cfg.seed, "stream-sensors", terrain as u64),
            )?)?;
            let stride = (layout.master_rate() / stream_config(cfg).rate)
                .round()
                .max(1.0) as usize;
            robust_scores(
                &partition(&table, cfg.vae_window, stride)?,
                params,
                reference,
                cfg.robust_window,
            )
        }
    }
}

/// Held-out views of every terrain.
pub fn test_views(world: &WorldMap, cfg: &RunConfig) -> Result<Vec<PatchFeatureImage>> {
    let stream = stream_config(cfg);
    let mut out = Vec::new();
    for t in world.terrains.iter().map(|t| t.id) {
        out.extend(terrain_views(
            world,
            t,
            cfg.test_images,
            &stream,
            rng::derive(cfg.seed, "test-views", 0),
        )?);
    }
    Ok(out)
}

pub fn build_increments(
    world: &WorldMap,
    cfg: &RunConfig,
    sensor: Option<&(VaeParams, ReferenceProfile)>,
) -> Result<Vec<Increment>> {
    let stream = stream_config(cfg);
    cfg.terrain_order()
        .into_iter()
        .map(|t| {
            let poses = increment_poses(world, t, &stream, rng::derive(cfg.seed, "increment", 0))?;
            let scores = increment_scores(world, &poses, t, cfg, sensor)?;
            build_increment(
                world,
                t,
                &poses,
                &scores,
                &stream,
                rng::derive(cfg.seed, "increment-views", t as u64),
            )
        })
        .collect()
}

pub fn visual_train_config(cfg: &RunConfig) -> VisualTrainConfig {
    let replay = ReplayConfig {
        enabled: cfg.replay,
        capacity: cfg.capacity,
        schedule: ReplaySchedule {
            t_b: cfg.t_b,
            t_r: cfg.t_r,
            weight: cfg.replay_weight,
        },
        feature_cutmix: cfg.fcm,
        p_fcm: cfg.p_fcm,
        ..Default::default()
    };
    VisualTrainConfig {
        lr: cfg.visual_lr,
        batch: cfg.visual_batch,
        seed: rng::derive(cfg.seed, "visual-train", 0),
        replay,
        ..Default::default()
    }
}

pub fn decoder_config(cfg: &RunConfig) -> DecoderConfig {
    let head = if cfg.head == "direct" {
        HeadKind::Direct
    } else {
        HeadKind::Cosine
    };
    DecoderConfig {
        batch_norm: cfg.batch_norm,
        head,
        ..DecoderConfig::new(stream_config(cfg).features.dim)
    }
}

/// Continual visual training through the terrain order.
pub fn train_visual(
    world: &WorldMap,
    cfg: &RunConfig,
    sensor: Option<&(VaeParams, ReferenceProfile)>,
) -> Result<(Vec<Increment>, ContinualRun)> {
    let stream = stream_config(cfg);
    let increments = build_increments(world, cfg, sensor)?;
    let references = terrain_views(
        world,
        cfg.reference_terrain,
        stream.reference_images,
        &stream,
        rng::derive(cfg.seed, "reference-views", 0),
    )?;
    let params = DecoderParams::init(
        decoder_config(cfg),
        rng::derive(cfg.seed, "decoder-init", 0),
    )?;
    let run = run_continual(
        &increments,
        &references,
        cfg.reference_terrain,
        &test_views(world, cfg)?,
        params,
        visual_train_config(cfg),
        cfg.visual_steps,
    )?;
    Ok((increments, run))
}

pub fn cmd_train_visual(cfg: &RunConfig, run: &RunDir) -> Result<ContinualRun> {
    let world = load_main_world(run)?;
    let sensor = if cfg.visual_scores == "sensor" {
        let params = VaeParams::load(&run.require("sensor/vae.ckpt", STAGES[1])?)?;
        let reference: ReferenceProfile =
            read_json(&run.require("sensor/reference.json", STAGES[1])?)?;
        Some((params, reference))
    } else {
        None
    };
    let (increments, out) = train_visual(&world, cfg, sensor.as_ref())?;
    let dir = run.create("visual")?;
    let sup_dir = run.create("visual/supervision")?;
    for (k, ((params, reference), inc)) in out.snapshots.iter().zip(&increments).enumerate() {
        let d = run.create(&format!("visual/inc{k}"))?;
        params.save(&d.join("decoder.ckpt"))?;
        write_json(&d.join("reference.json"), reference)?;
        if let Some((_, sup)) = inc.samples.iter().find(|(_, s)| s.n_valid() > 0) {
            sup.write_csv(&sup_dir, &format!("inc{k}"))?;
        }
    }
    if !out.replay.is_empty() {
        out.replay.save(&dir.join("replay.ckpt"))?;
    }
    write_json(&dir.join("stats.json"), &out.stats)?;
    let mut curve = fs::File::create(dir.join("curve.csv"))?;
    writeln!(curve, "increment,terrain,miou")?;
    for (k, (m, inc)) in out.curve.iter().zip(&increments).enumerate() {
        writeln!(curve, "{k},{},{m}", inc.terrain)?;
    }
    let mut losses = fs::File::create(dir.join("losses.csv"))?;
    writeln!(losses, "increment,step,align,replay,total")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (k, steps) in out.steps.iter().enumerate() {
        for s in steps {
            writeln!(
                losses,
                "{k},{},{},{},{}",
                s.step,
                opt(s.align),
                opt(s.replay),
                s.total
            )?;
        }
    }
    Ok(out)
}

/// Per-increment decoder snapshots written by `train-visual`.
pub fn load_snapshots(
    cfg: &RunConfig,
    run: &RunDir,
) -> Result<Vec<(DecoderParams, ReferenceFeatures)>> {
    (0..cfg.terrain_order().len())
        .map(|k| {
            let params = DecoderParams::load(
                &run.require(&format!("visual/inc{k}/decoder.ckpt"), STAGES[2])?,
            )?;
            let reference =
                read_json(&run.require(&format!("visual/inc{k}/reference.json"), STAGES[2])?)?;
            Ok((params, reference))
        })
        .collect()
}

// ---- mapping ----

#[derive(Clone, Debug)]
pub struct MapOutput {
    pub map: ElevationMap,
    pub plane: PlaneModel,
    pub poses: usize,
    pub voxels: usize,
}

/// Sweeps the world, scoring lidar points with the visual predictions and
/// fusing them into a voxel map reduced to 2.5D on the world grid.
pub fn build_map(
    world: &WorldMap,
    params: &DecoderParams,
    reference: &ReferenceFeatures,
    cfg: &RunConfig,
) -> Result<MapOutput> {
    let stream = stream_config(cfg);
    let camera = stream.camera;
    let poses = gen_sweep(
        world,
        cfg.sweep_spacing,
        2.0 * cfg.sweep_spacing,
        world.resolution,
    );
    let rule = if cfg.map_lambda > 0.0 {
        UpdateRule::Ema(cfg.map_lambda)
    } else {
        UpdateRule::Mean
    };
    let mut voxels = VoxelMap::new(world.resolution, rule)?;
    let mut ground = Vec::new();
    let (view_seed, lidar_seed) = (
        rng::derive(cfg.seed, "map-views", 0),
        rng::derive(cfg.seed, "map-lidar", 0),
    );
    for pose in &poses {
        let prediction = predict_image(
            &render_patch_features(world, &camera, stream.features, pose, view_seed)?,
            params,
            reference,
        )?;
        let cloud = sample_lidar(world, pose, cfg.lidar_points, cfg.lidar_range, lidar_seed)?;
        voxels.integrate(&project_points(&cloud, &prediction, &camera)?, pose)?;
        ground.extend(cloud.points.iter().map(|p| {
            let (x, y) = pose.to_world(p.x, p.y);
            [x, y, p.z]
        }));
    }
    let plane = fit_ground_plane(
        &ground,
        cfg.ransac_iterations,
        0.05,
        rng::derive(cfg.seed, "ransac", 0),
    )?;
    let map = reduce_to_elevation(
        &voxels,
        &plane,
        world.rows,
        world.cols,
        ReduceParams {
            h_max: cfg.h_max,
            ..Default::default()
        },
    )?;
    Ok(MapOutput {
        map,
        plane,
        poses: poses.len(),
        voxels: voxels.len(),
    })
}

pub fn cmd_map(cfg: &RunConfig, run: &RunDir) -> Result<MapOutput> {
    let corridor = load_corridor(run)?;
    let snapshots = load_snapshots(cfg, run)?;
    let (params, reference) = snapshots
        .last()
        .ok_or_else(|| Error::invalid("no visual snapshot"))?;
    let out = build_map(&corridor, params, reference, cfg)?;
    let dir = run.create("map")?;
    out.map.write(&dir)?;
    write_json(&dir.join("plane.json"), &out.plane)?;
    info!(
        "map from {} poses: {} voxels, {} observed cells",
        out.poses,
        out.voxels,
        out.map.n_observed()
    );
    Ok(out)
}

fn read_map(run: &RunDir) -> Result<ElevationMap> {
    run.require("map/elevation.json", STAGES[3])?;
    ElevationMap::read(&run.path("map"))
}

// ---- planning ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOutput {
    pub query: PlanQuery,
    /// Path under the configured traversability weight.
    pub learned: Path,
    /// Geometric shortest path (`w_trav = 0`).
    pub euclidean: Path,
}

/// Bottom-left to bottom-right, one cell in from the border.
pub fn default_endpoints(map: &ElevationMap) -> (Cell, Cell) {
    let r = map.rows.saturating_sub(2);
    ((r, 1), (r, map.cols.saturating_sub(2)))
}

pub fn plan_pair(map: &ElevationMap, start: Cell, goal: Cell, w_trav: f64) -> Result<PlanOutput> {
    let query = PlanQuery {
        start,
        goal,
        w_trav,
    };
    let unreachable = || Error::invalid(format!("no path from {start:?} to {goal:?}"));
    let learned = plan(map, &query)?.ok_or_else(unreachable)?;
    let euclidean = plan(
        map,
        &PlanQuery {
            w_trav: 0.0,
            ..query
        },
    )?
    .ok_or_else(unreachable)?;
    Ok(PlanOutput {
        query,
        learned,
        euclidean,
    })
}

pub fn cmd_plan(
    cfg: &RunConfig,
    run: &RunDir,
    start: Option<Cell>,
    goal: Option<Cell>,
) -> Result<PlanOutput> {
    let map = read_map(run)?;
    let (ds, dg) = default_endpoints(&map);
    let out = plan_pair(&map, start.unwrap_or(ds), goal.unwrap_or(dg), cfg.w_trav)?;
    let dir = run.create("plan")?;
    out.learned.write_csv(&dir.join("path.csv"))?;
    out.euclidean.write_csv(&dir.join("euclidean.csv"))?;
    write_json(&dir.join("paths.json"), &out)?;
    Ok(out)
}

// ---- evaluation ----

pub fn cmd_eval(cfg: &RunConfig, run: &RunDir) -> Result<MetricReport> {
    let world = load_main_world(run)?;
    let corridor = load_corridor(run)?;
    let snapshots = load_snapshots(cfg, run)?;
    let stats: TerrainStats = read_json(&run.require("visual/stats.json", STAGES[2])?)?;
    let scores = ScoreSeries::read_csv(&run.require("sensor/scores.csv", STAGES[1])?)?;
    let base_scores = ScoreSeries::read_csv(&run.require("sensor/scores_base.csv", STAGES[1])?)?;
    let map = read_map(run)?;
    let paths: PlanOutput = read_json(&run.require("plan/paths.json", STAGES[4])?)?;

    let curve = forgetting_curve(&snapshots, &test_views(&world, cfg)?, &stats)?;
    let table = EffortTable::from_world(&corridor);
    let learned = path_effort(&paths.learned, &corridor, &table)?;
    let euclidean = path_effort(&paths.euclidean, &corridor, &table)?;
    let quality = score_quality(
        &scores,
        &base_scores,
        &EffortTable::from_world(&world),
        cfg.bins,
    )?;
    let report = MetricReport {
        effort: learned.effort,
        epl: learned.epl,
        euclidean_effort: euclidean.effort,
        euclidean_epl: euclidean.epl,
        miou_2d: curve.last().copied().unwrap_or(0.0),
        miou_25d: segm_25d(&map, &corridor.cells, &stats)?.miou,
        forgetting_curve: curve,
        score_quality: quality,
        hyper_objective: hyper_objective(&quality),
    };
    report.write(&run.path(REPORT_FILE))?;
    Ok(report)
}

/// Runs the stages from `first` on, then evaluates.
pub fn run_from(first: usize, cfg: &RunConfig, run: &RunDir) -> Result<MetricReport> {
    fs::create_dir_all(&run.root)?;
    fs::write(run.path(CONFIG_FILE), cfg.to_text())?;
    for stage in first..STAGES.len() - 1 {
        info!("stage {}", STAGES[stage]);
        match stage {
            0 => cmd_gen_world(cfg, run)?,
            1 => drop(cmd_train_sensor(cfg, run)?),
            2 => drop(cmd_train_visual(cfg, run)?),
            3 => drop(cmd_map(cfg, run)?),
            _ => drop(cmd_plan(cfg, run, None, None)?),
        }
    }
    cmd_eval(cfg, run)
}

pub fn run_all(cfg: &RunConfig, run: &RunDir) -> Result<MetricReport> {
    run_from(0, cfg, run)
}

// ---- ablation ----

/// One ablation axis: a config key and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct Toggle {
    pub key: String,
    pub values: Vec<String>,
}

impl Toggle {
    /// `key=v1|v2|…` (`|` because list values contain commas).
    pub fn parse(s: &str) -> Result<Self> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("toggle {s:?}: expected key=v1|v2")))?;
        let values: Vec<String> = values.split('|').map(|v| v.trim().to_string()).collect();
        if RunConfig::default().get(key.trim()).is_none() {
            return Err(Error::config(format!("toggle on unknown key {key:?}")));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
    pub report: MetricReport,
}

/// Cross product of the toggles.
pub fn ablation_grid(toggles: &[Toggle]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for t in toggles {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                t.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((t.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

fn copy_dir(from: &FsPath, to: &FsPath) -> Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

/// One full report per toggle combination under `<run>/cells/<name>`.
/// Stages upstream of every toggled key run once in `<run>/base` and are
/// shared by all cells.
pub fn cmd_ablate(cfg: &RunConfig, run: &RunDir, toggles: &[Toggle]) -> Result<Vec<AblationCell>> {
    let first = toggles
        .iter()
        .map(|t| stage_of(&t.key))
        .min()
        .unwrap_or(STAGES.len() - 1);
    let base = RunDir::new(run.path("base"));
    if first > 0 {
        fs::create_dir_all(&base.root)?;
        for stage in 0..first.min(STAGES.len() - 1) {
            match stage {
                0 => cmd_gen_world(cfg, &base)?,
                1 => drop(cmd_train_sensor(cfg, &base)?),
                2 => drop(cmd_train_visual(cfg, &base)?),
                3 => drop(cmd_map(cfg, &base)?),
                _ => drop(cmd_plan(cfg, &base, None, None)?),
            }
        }
    }
    let mut out = Vec::new();
    for overrides in ablation_grid(toggles) {
        let mut cell_cfg = cfg.clone();
        for (k, v) in &overrides {
            cell_cfg.set(k, v)?;
        }
        cell_cfg.validate()?;
        let name = overrides
            .iter()
            .map(|(k, v)| format!("{k}={}", v.replace([',', '/', '|'], "_")))
            .collect::<Vec<_>>()
            .join("+");
        let name = if name.is_empty() {
            "baseline".to_string()
        } else {
            name
        };
        let cell = RunDir::new(run.path(&format!("cells/{name}")));
        for dirs in &STAGE_DIRS[..first] {
            for d in *dirs {
                copy_dir(&base.path(d), &cell.path(d))?;
            }
        }
        info!("ablation cell {name}");
        let report = run_from(first.min(STAGES.len() - 1), &cell_cfg, &cell)?;
        out.push(AblationCell {
            name,
            overrides,
            report,
        });
    }
    let mut f = fs::File::create(run.path("ablation.csv"))?;
    writeln!(
        f,
        "cell,miou_2d,miou_25d,effort,epl,correlation,hyper_objective"
    )?;
    for c in &out {
        let r = &c.report;
        let corr = r
            .score_quality
            .correlation
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{},{corr},{}",
            c.name, r.miou_2d, r.miou_25d, r.effort, r.epl, r.hyper_objective
        )?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lookup() {
        assert_eq!(stage_of("seed"), 0);
        assert_eq!(stage_of("world.rows"), 0);
        assert_eq!(stage_of("vae.gamma"), 1);
        assert_eq!(stage_of("replay.enabled"), 2);
        assert_eq!(stage_of("map.lambda"), 3);
        assert_eq!(stage_of("plan.w_trav"), 4);
        assert_eq!(stage_of("eval.bins"), 5);
    }

    #[test]
    fn grid_is_a_cross_product() {
        let t = [
            Toggle::parse("replay.enabled=true|false").unwrap(),
            Toggle::parse("replay.capacity=20|200|400").unwrap(),
        ];
        let g = ablation_grid(&t);
        assert_eq!(g.len(), 6);
        assert_eq!(
            g[5],
            vec![
                ("replay.enabled".to_string(), "false".to_string()),
                ("replay.capacity".to_string(), "400".to_string())
            ]
        );
        assert!(Toggle::parse("nope=1|2").is_err());
        assert!(Toggle::parse("seed").is_err());
    }

    #[test]
    fn missing_artifacts_name_their_producer() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let cfg = RunConfig::fast();
        let err = cmd_train_sensor(&cfg, &run).unwrap_err();
        assert!(
            matches!(
                err,
                Error::MissingArtifact {
                    producer: "gen-world",
                    ..
                }
            ),
            "{err}"
        );
        cmd_gen_world(&cfg, &run).unwrap();
        let err = cmd_eval(&cfg, &run).unwrap_err();
        assert!(
            matches!(
                err,
                Error::MissingArtifact {
                    producer: "train-visual",
                    ..
                }
            ),
            "{err}"
        );
        let err = cmd_map(&cfg, &run).unwrap_err();
        assert!(
            matches!(
                err,
                Error::MissingArtifact {
                    producer: "train-visual",
                    ..
                }
            ),
            "{err}"
        );
        let err = cmd_plan(&cfg, &run, None, None).unwrap_err();
        assert!(
            matches!(
                err,
                Error::MissingArtifact {
                    producer: "map",
                    ..
                }
            ),
            "{err}"
        );
    }
}
