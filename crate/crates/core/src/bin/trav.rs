use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use trav_core::config::RunConfig;
use trav_core::pipeline::{self, RunDir, Toggle, CONFIG_FILE};
use trav_core::planner::Cell;
use trav_core::{Error, Result};

/// Self-supervised traversability pipeline on synthetic terrain.
#[derive(Parser)]
#[command(name = "trav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run directory holding every artifact.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// key = value config file. Defaults to the run directory's snapshot, then to the built-in profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is used (default or fast).
    #[arg(long)]
    profile: Option<String>,
    /// Override a config key, e.g. --set replay.enabled=false.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the main and corridor worlds.
    GenWorld(Common),
    /// Train the sensor model and score held-out walks.
    TrainSensor(Common),
    /// Continual visual training, one increment per terrain.
    TrainVisual(Common),
    /// Build the 2.5D map of the corridor world.
    Map(Common),
    /// Plan with learned traversability and the geometric baseline.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Start cell as row,col.
        #[arg(long, value_parser = parse_cell)]
        start: Option<Cell>,
        /// Goal cell as row,col.
        #[arg(long, value_parser = parse_cell)]
        goal: Option<Cell>,
    },
    /// Compute the metric report.
    Eval(Common),
    /// One report per combination of toggled keys.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// key=v1|v2|... ; repeat for a cross product.
        #[arg(long = "toggle", required = true)]
        toggles: Vec<String>,
    },
    /// Every stage in order.
    Run(Common),
}

fn parse_cell(s: &str) -> std::result::Result<Cell, String> {
    let (r, c) = s.split_once(',').ok_or("expected row,col")?;
    Ok((
        r.trim().parse().map_err(|_| "bad row")?,
        c.trim().parse().map_err(|_| "bad col")?,
    ))
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let snapshot = c.out.join(CONFIG_FILE);
    let mut cfg = match (&c.config, &c.profile) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(p)) => RunConfig::from_profile(p)?,
        (None, None) if snapshot.exists() => RunConfig::load(&snapshot)?,
        (None, None) => RunConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set {o:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld(c) => pipeline::cmd_gen_world(&load_config(&c)?, &RunDir::new(&c.out)),
        Command::TrainSensor(c) => {
            let out = pipeline::cmd_train_sensor(&load_config(&c)?, &RunDir::new(&c.out))?;
            println!("scored {} held-out frames", out.scores.len());
            Ok(())
        }
        Command::TrainVisual(c) => {
            let out = pipeline::cmd_train_visual(&load_config(&c)?, &RunDir::new(&c.out))?;
            println!("forgetting curve (mIoU): {:?}", out.curve);
            Ok(())
        }
        Command::Map(c) => {
            let out = pipeline::cmd_map(&load_config(&c)?, &RunDir::new(&c.out))?;
            println!(
                "{} observed cells from {} poses",
                out.map.n_observed(),
                out.poses
            );
            Ok(())
        }
        Command::Plan {
            common,
            start,
            goal,
        } => {
            let out = pipeline::cmd_plan(
                &load_config(&common)?,
                &RunDir::new(&common.out),
                start,
                goal,
            )?;
            println!(
                "learned cost {:.3} over {} cells; geometric cost {:.3}",
                out.learned.total_cost,
                out.learned.len(),
                out.euclidean.total_cost
            );
            Ok(())
        }
        Command::Eval(c) => {
            println!(
                "{}",
                pipeline::cmd_eval(&load_config(&c)?, &RunDir::new(&c.out))?.to_json()?
            );
            Ok(())
        }
        Command::Ablate { common, toggles } => {
            let toggles = toggles
                .iter()
                .map(|t| Toggle::parse(t))
                .collect::<Result<Vec<_>>>()?;
            for cell in
                pipeline::cmd_ablate(&load_config(&common)?, &RunDir::new(&common.out), &toggles)?
            {
                println!("{}: final mIoU {:.2}", cell.name, cell.report.miou_2d);
            }
            Ok(())
        }
        Command::Run(c) => {
            println!(
                "{}",
                pipeline::run_all(&load_config(&c)?, &RunDir::new(&c.out))?.to_json()?
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(match e {
                Error::InvalidConfig(_) => 2,
                Error::MissingArtifact { .. } => 3,
                _ => 1,
            })
        }
    }
}
