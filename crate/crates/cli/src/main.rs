use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rdi_core::config::ExperimentConfig;
use rdi_core::data::{build_schedule, IndexOnlyDataset};
use rdi_core::experiment::{
    average_accuracy, open_dataset, render_comparison, render_report, run_ablation, run_experiment,
    AblationGrid, RUN_ROOT_ENV,
};
use rdi_core::protocol::session_plan;
use rdi_core::Error;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "rdi", version, about = "Few-shot class-incremental experiments with redundancy decoupling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, run the incremental sessions and write a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
        run_root: PathBuf,
        /// Skip writing report.md.
        #[arg(long)]
        no_report: bool,
    },
    /// Run every cell of an ablation grid and write ablation.csv.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
        run_root: PathBuf,
    },
    /// Render report.md for a run, or a comparison of several runs.
    Report {
        run_dir: PathBuf,
        /// Further run directories to compare against the first.
        #[arg(long, num_args = 1..)]
        compare: Vec<PathBuf>,
        /// Output directory of the comparison (default: the first run's parent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config (or grid, with --grid) and print it with defaults filled in.
    ValidateConfig {
        path: PathBuf,
        #[arg(long)]
        grid: bool,
    },
    /// Print the session layout of a schedule without training.
    Plan {
        #[arg(long, conflicts_with = "config")]
        preset: Option<Preset>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Cifar100,
    MiniImagenet,
    Cub200,
}

fn print_plan(schedule: &rdi_core::types::SessionSchedule) {
    println!("session,new_classes,cumulative_classes,train_samples,test_samples");
    for r in session_plan(schedule) {
        println!(
            "{},{},{},{},{}",
            r.session, r.new_classes, r.cumulative_classes, r.train_samples, r.test_samples
        );
    }
}

fn plan(preset: Option<Preset>, config: Option<&Path>, seed: u64) -> Result<()> {
    let schedule = match (preset, config) {
        (Some(p), _) => {
            let (dataset, base, sessions, way) = match p {
                Preset::Cifar100 => (IndexOnlyDataset::cifar100(), 60, 8, 5),
                Preset::MiniImagenet => (IndexOnlyDataset::mini_imagenet(), 60, 8, 5),
                Preset::Cub200 => (IndexOnlyDataset::cub200(), 100, 10, 10),
            };
            build_schedule(&dataset, base, sessions, way, 5, seed)?
        }
        (None, Some(path)) => {
            let cfg = ExperimentConfig::load(path)?;
            let dataset = open_dataset(&cfg)?;
            rdi_core::experiment::experiment_schedule(&cfg, dataset.as_ref())?
        }
        (None, None) => bail!("give --preset or --config"),
    };
    print_plan(&schedule);
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, run_root: &Path, no_report: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = run_experiment(&cfg, run_root)?;
    let reports = out.experiment.reports();
    println!("session,top1,ba,na,nn,gap");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
    for r in reports {
        println!(
            "{},{:.4},{:.4},{},{},{}",
            r.session,
            r.session_top1,
            r.ba_acc,
            opt(r.na_acc),
            opt(r.nn_acc),
            opt(r.confusion_gap)
        );
    }
    println!("average accuracy {:.4}", average_accuracy(reports));
    if !no_report {
        render_report(&out.dir)?;
    }
    println!("{}", out.dir.display());
    Ok(())
}

fn ablate(grid: &Path, run_root: &Path) -> Result<()> {
    let grid = AblationGrid::load(grid)?;
    let rows = run_ablation(&grid, run_root)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x));
    println!("{:<16} {:>6} {:>6} {:>9} {:>5} {:>8} {:>8} {:>8}", "cell", "lambda", "beta", "threshold", "runs", "novel", "average", "gap");
    for r in &rows {
        println!(
            "{:<16} {:>6} {:>6} {:>9} {:>5} {:>8} {:>8} {:>8}",
            r.cell,
            r.lambda,
            r.beta,
            r.threshold,
            r.runs,
            opt(r.novel),
            opt(r.average),
            opt(r.gap)
        );
        for e in &r.errors {
            eprintln!("  {}: {e}", r.cell);
        }
    }
    println!("{}", run_root.join(&grid.name).join("ablation.csv").display());
    if rows.iter().all(|r| r.runs == 0) {
        bail!("every run of the grid failed");
    }
    Ok(())
}

fn report(run_dir: &Path, compare: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if !run_dir.is_dir() {
        bail!("{} is not a run directory", run_dir.display());
    }
    if compare.is_empty() {
        println!("{}", render_report(run_dir)?.display());
        return Ok(());
    }
    let mut dirs = vec![run_dir.to_path_buf()];
    dirs.extend(compare.iter().cloned());
    let out = out.map_or_else(|| run_dir.parent().unwrap_or(Path::new(".")).to_path_buf(), Path::to_path_buf);
    println!("{}", render_comparison(&dirs, &out)?.display());
    Ok(())
}

fn validate(path: &Path, grid: bool) -> Result<()> {
    if grid {
        let g = AblationGrid::load(path)?;
        println!("{}", toml::to_string_pretty(&g).context("serializing grid")?);
    } else {
        print!("{}", ExperimentConfig::load(path)?.to_toml_string());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::ConfigParse(_) | Error::SyntheticSpec(_)) => EXIT_CONFIG,
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            seed,
            run_root,
            no_report,
        } => run(config, *seed, run_root, *no_report),
        Command::Ablate { grid, run_root } => ablate(grid, run_root),
        Command::Report { run_dir, compare, out } => report(run_dir, compare, out.as_deref()),
        Command::ValidateConfig { path, grid } => validate(path, *grid),
        Command::Plan { preset, config, seed } => plan(*preset, config.as_deref(), *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e.downcast_ref::<Error>(), Some(Error::Divergence { .. })) {
                eprintln!("loss trajectory written to divergence.json in the run directory");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
