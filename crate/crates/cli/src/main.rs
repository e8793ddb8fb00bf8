use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use driftnav_cli::commands::{self, DatasetArgs, ExtractArgs};
use driftnav_cli::config::{load_scene, scene_file_json, scene_truth, ControllerKind, RunConfig};
use driftnav_core::lidar::DEFAULT_ACTIVATION_THRESHOLD;

/// Drift-aware CEM-MPC planner: run scenarios, compare controllers and
/// produce data for the feature learner.
#[derive(Parser)]
#[command(name = "driftnav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Scene file (JSON with schema_version) or stock scene name.
    #[arg(long)]
    scene: String,
    #[arg(long, value_enum, default_value = "cem-mpc")]
    controller: ControllerKind,
    /// `scene-truth` or an `s,d,weight` feature CSV.
    #[arg(long, default_value_t = scene_truth())]
    features: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Setting override such as `cem.n_elite=40` or `drift.kernel_sigma=3`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Planning horizon in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    n_samples: Option<usize>,
}

impl RunArgs {
    fn config(&self, controller: ControllerKind) -> RunConfig {
        RunConfig {
            scene: self.scene.clone(),
            controller,
            features: self.features.clone(),
            seed: self.seed,
            overrides: self.overrides.clone(),
            horizon: self.horizon,
            n_samples: self.n_samples,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop scenario.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several controllers on one scene and tabulate drift and path length.
    Compare {
        /// JSON run config; repeat for each row. Overrides the flag form.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        /// Scene for the flag form: one row per `--with` controller.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long = "with", value_enum)]
        controllers: Vec<ControllerKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Range images at several lateral offsets plus a drift-labelled index.
    GenDataset {
        /// Comma-separated scene files or stock names.
        #[arg(long, value_delimiter = ',', required = true)]
        scenes: Vec<String>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-3.0, -1.5, 0.0, 1.5, 3.0])]
        offsets: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        poses: usize,
        /// Distance between poses along the road (m).
        #[arg(long, default_value_t = 10.0)]
        spacing: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss parity fixture for the feature learner.
    DtlFixture {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feature CSV from a learned activation map and its range image.
    ExtractFeatures {
        #[arg(long)]
        activation: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        scene: String,
        /// Road-frame pose of the sensor.
        #[arg(long, allow_negative_numbers = true)]
        s: f64,
        #[arg(long, allow_negative_numbers = true, default_value_t = 0.0)]
        d: f64,
        /// Fraction of the peak activation a pixel needs to count.
        #[arg(long, default_value_t = DEFAULT_ACTIVATION_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a stock scene as a scene file.
    ExportScene {
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time single plans on the two-obstacle scene.
    Bench {
        #[arg(long, default_value_t = 9)]
        runs: usize,
        #[arg(long, default_value_t = 1000)]
        n_samples: usize,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { run, out } => {
            let o = commands::run_scenario(&run.config(run.controller), &out)?;
            println!("{}", serde_json::to_string_pretty(&o.metrics)?);
        }
        Command::Compare {
            configs,
            scene,
            controllers,
            seed,
            out,
        } => {
            let runs = if configs.is_empty() {
                let scene = scene.context("compare needs --config files or --scene with --with")?;
                controllers
                    .iter()
                    .map(|c| RunConfig {
                        scene: scene.clone(),
                        controller: *c,
                        features: scene_truth(),
                        seed,
                        overrides: vec![],
                        horizon: None,
                        n_samples: None,
                    })
                    .collect()
            } else {
                configs
                    .iter()
                    .map(|p| {
                        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                        serde_json::from_str(&text).with_context(|| format!("run config {}", p.display()))
                    })
                    .collect::<Result<Vec<RunConfig>>>()?
            };
            print!("{}", commands::compare(&runs, &out)?);
        }
        Command::GenDataset {
            scenes,
            offsets,
            poses,
            spacing,
            out,
        } => {
            let n = commands::gen_dataset(
                &DatasetArgs {
                    scenes,
                    offsets,
                    poses,
                    spacing,
                },
                &out,
            )?;
            println!("{n} samples written to {}", out.display());
        }
        Command::DtlFixture { seed, count, out } => commands::dtl_fixture(seed, count, &out)?,
        Command::ExtractFeatures {
            activation,
            image,
            scene,
            s,
            d,
            threshold,
            out,
        } => {
            let n = commands::extract_features(
                &ExtractArgs {
                    activation,
                    image,
                    scene,
                    s,
                    d,
                    threshold,
                },
                &out,
            )?;
            println!("{n} feature anchors written to {}", out.display());
        }
        Command::ExportScene { name, out } => {
            let (_, scene) = load_scene(&name)?;
            fs::write(&out, scene_file_json(&scene)).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Bench { runs, n_samples, out } => {
            let report = commands::bench(runs, n_samples)?;
            print!("{report}");
            if let Some(p) = out {
                fs::write(&p, &report).with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
