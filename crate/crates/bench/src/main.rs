use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use terranav::episode::{EpisodeConfig, SceneRef};
use terranav::scene::SceneRegistry;
use terranav::sensors::CameraConfig;
use terranav_bench::{format_table, measure_rates, run_sweep, write_csv, AgentKind, SweepSpec};

/// Benchmarks for the terranav simulator.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// Directory of extra scene descriptors (*.json).
    #[arg(long, global = true)]
    scene_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run scripted agents over a difficulty/distance grid.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "Forest,VolcanicField")]
        scenes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1.0")]
        difficulties: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "10,20")]
        distances: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        episodes: u32,
        #[arg(long, default_value = "greedy_avoid")]
        agent: AgentKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        grid_resolution: f64,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure simulation step rate and frame capture rate.
    Rates {
        #[arg(long, default_value_t = 256)]
        resolution: u32,
        #[arg(long, default_value_t = 1)]
        cameras: usize,
        /// Seconds per measurement.
        #[arg(long, default_value_t = 5.0)]
        duration: f64,
        #[arg(long, default_value = "Forest")]
        scene: String,
        #[arg(long, default_value_t = 0.5)]
        difficulty: f64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut registry = SceneRegistry::with_built_ins();
    if let Some(dir) = &cli.scene_dir {
        registry.load_dir(dir).with_context(|| format!("loading scenes from {}", dir.display()))?;
    }
    match cli.command {
        Command::Sweep { scenes, difficulties, distances, episodes, agent, seed, grid_resolution, out } => {
            let spec = SweepSpec {
                scenes,
                difficulties,
                distances,
                episodes_per_cell: episodes,
                agent,
                seed,
                grid_resolution,
                ..SweepSpec::default()
            };
            let rows = run_sweep(&spec, &registry)?;
            print!("{}", format_table(&rows));
            if let Some(path) = out {
                let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                write_csv(&rows, file)?;
            }
        }
        Command::Rates { resolution, cameras, duration, scene, difficulty } => {
            anyhow::ensure!(cameras >= 1, "need at least one camera");
            anyhow::ensure!(duration > 0.0, "duration must be positive");
            let camera = CameraConfig::default().with_resolution(resolution);
            let cfg = EpisodeConfig {
                scene: SceneRef::Named(scene),
                difficulty,
                cameras: (0..cameras)
                    .map(|k| CameraConfig { relative_yaw: 360.0 * k as f64 / cameras as f64, ..camera })
                    .collect(),
                ..EpisodeConfig::default()
            };
            let rates = measure_rates(&cfg, Duration::from_secs_f64(duration), &registry)?;
            println!("resolution          {resolution}x{resolution}");
            println!("cameras             {cameras}");
            println!("steps/sec           {:.1}", rates.steps_per_second);
            println!("captures/sec        {:.1}", rates.captures_per_second);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
