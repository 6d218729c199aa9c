//! `daq` command line: training, evaluation, ablations, data generation,
//! the memory bench and video prediction.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use daq::harness;
use daq::memtrack::TrackingAllocator;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "daq", about = "RGB-D video salient object detection workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// CSV output path (defaults to results.csv).
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
    },
    /// Train/evaluate every variant along one ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a deterministic synthetic RGB-D video dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        videos: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Measure peak training memory of the PEFT topologies.
    BenchMemory {
        #[arg(long)]
        config: PathBuf,
        /// Optional CSV output path; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint over one video directory and write masks.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Zero the depth branch (diagnostic).
        #[arg(long, default_value_t = false)]
        ablate_depth: bool,
    },
}

fn run(cli: Cli) -> daq::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = daq::Config::from_file(&config)?;
            let report = harness::train(&cfg)?;
            println!(
                "trained {} iterations; final l_pred {:.4}, l_total {:.4}",
                report.iterations_run, report.final_l_pred, report.final_l_total
            );
            println!("checkpoint: {}", report.checkpoint_path.display());
            println!("log: {}", report.log_path.display());
        }
        Command::Eval { pred, gt, out } => {
            let (rows, mean) = daq::metrics::evaluate_dataset(&pred, &gt)?;
            let csv = daq::metrics::results_csv(&rows, &mean);
            std::fs::write(&out, &csv).map_err(|e| daq::Error::io(&out, e))?;
            println!("{}", daq::metrics::results_markdown("frame", &rows));
            println!(
                "mean: E {:.4}  S {:.4}  F {:.4}  M {:.4} -> {}",
                mean.e_measure,
                mean.s_measure,
                mean.f_measure,
                mean.mae,
                out.display()
            );
        }
        Command::Ablate { axis, config } => {
            let cfg = daq::Config::from_file(&config)?;
            let table = harness::run_ablation(&axis, &cfg)?;
            let md = table.markdown();
            let out_dir = PathBuf::from(&cfg.out_dir);
            std::fs::create_dir_all(&out_dir).map_err(|e| daq::Error::io(&out_dir, e))?;
            let out = out_dir.join(format!("ablation_{axis}.md"));
            std::fs::write(&out, &md).map_err(|e| daq::Error::io(&out, e))?;
            println!("{md}");
            println!("written to {}", out.display());
        }
        Command::GenData { seed, videos, frames, out, size } => {
            daq::data::synth_generate_set(seed, videos, frames, size, &out)?;
            println!("wrote {videos} videos x {frames} frames at {size}x{size} under {}", out.display());
        }
        Command::BenchMemory { config, out } => {
            let cfg = daq::Config::from_file(&config)?;
            let rows = daq::peft::bench_memory(&cfg)?;
            let csv = daq::peft::bench_csv(&rows);
            match out {
                Some(path) => {
                    std::fs::write(&path, &csv).map_err(|e| daq::Error::io(&path, e))?;
                    println!("{csv}");
                    println!("written to {}", path.display());
                }
                None => println!("{csv}"),
            }
        }
        Command::Predict { ckpt, video, out, ablate_depth } => {
            let n = harness::predict_video(&ckpt, &video, &out, ablate_depth)?;
            println!("wrote {n} masks to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
