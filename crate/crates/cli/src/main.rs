// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use notice_bench::report::{
    cmd_analyze, cmd_gen, cmd_knockout, cmd_plant, cmd_render, cmd_report, cmd_sweep, load_sweep,
    ExperimentConfig, SweepOutput,
};
use notice_bench::{Error, ErrorClass, Result};

const SEED_ENV: &str = "NOTICE_BENCH_SEED";

#[derive(Parser)]
#[command(
    name = "notice-bench",
    version,
    about = "Activation patching on a planted vision-language transformer"
)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the config and NOTICE_BENCH_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the datasets.
    Gen,
    /// Build the planted model and save it.
    Plant,
    /// Run the configured patching sweeps.
    Sweep,
    /// Ablate heads on clean runs.
    Knockout,
    /// Rank heads and label universal and functional heads.
    Analyze {
        /// Sweep JSON files; defaults to every sweep in the output directory.
        results: Vec<PathBuf>,
    },
    /// Render heatmaps and the head-rank chart.
    Render {
        /// Sweep JSON files; defaults to every sweep in the output directory.
        results: Vec<PathBuf>,
    },
    /// Run every stage end to end.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        config.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}=`{v}` is not a u64")))?;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out_dir = o.clone();
    }
    Ok(config)
}

fn sweep_files(out_dir: &Path, given: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if !given.is_empty() {
        return Ok(given.to_vec());
    }
    let entries = std::fs::read_dir(out_dir)
        .map_err(|e| Error::Data(format!("{}: {e}", out_dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            name.starts_with("sweep_") && name.ends_with(".json")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no sweep results in {}",
            out_dir.display()
        )));
    }
    Ok(files)
}

fn load_sweeps(config: &ExperimentConfig, given: &[PathBuf]) -> Result<Vec<SweepOutput>> {
    sweep_files(&config.out_dir, given)?
        .iter()
        .map(|p| load_sweep(p))
        .collect()
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::InvalidConfig("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let out = config.out_dir.display();
    match &cli.command {
        Command::Gen => {
            for m in cmd_gen(&config)? {
                println!(
                    "{}: {} samples ({} before `or`, {} after) -> {out}/{}",
                    m.task.as_str(),
                    m.n,
                    m.option_before_or,
                    m.option_after_or,
                    m.file
                );
            }
        }
        Command::Plant => {
            let m = cmd_plant(&config)?;
            println!(
                "{:?} model, {} layers x {} heads -> {out}/model.nbm",
                m.config.arch, m.config.n_layers, m.config.n_heads
            );
        }
        Command::Sweep => {
            for s in cmd_sweep(&config)? {
                for m in &s.result.matrices {
                    let arg = m
                        .argmax_abs()
                        .map_or("-".to_string(), |(r, l)| format!("row {r}, layer {l}"));
                    println!(
                        "{}: {} kept {}/{}, argmax |effect| at {arg} ({:.6})",
                        s.stem(),
                        m.submodule.as_str(),
                        s.result.n_kept,
                        s.result.n_samples,
                        m.max_abs()
                    );
                }
            }
        }
        Command::Knockout => {
            for k in cmd_knockout(&config)? {
                if k.max_logit_change > 0.0 {
                    println!(
                        "{}: accuracy {:.3} -> {:.3}, mean drop {:.6}",
                        k.site, k.accuracy_before, k.accuracy_after, k.mean_drop
                    );
                }
            }
        }
        Command::Analyze { results } => {
            let sweeps = load_sweeps(&config, results)?;
            let report = cmd_analyze(&config, &sweeps)?;
            for h in &report.heads {
                if h.label != notice_bench::analysis::UnionLabel::None
                    || h.function != notice_bench::analysis::FunctionClass::Unclassified
                {
                    println!(
                        "L{}.H{}: {} / {}",
                        h.layer,
                        h.head,
                        h.label.as_str(),
                        h.function.as_str()
                    );
                }
            }
        }
        Command::Render { results } => {
            let sweeps = load_sweeps(&config, results)?;
            for f in cmd_render(&config, &sweeps)? {
                println!("{}", f.display());
            }
        }
        Command::Report => {
            cmd_report(&config)?;
            println!("report written to {out}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
