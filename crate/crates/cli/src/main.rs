use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pcreg::scenes::dataset_load;
use pcreg_cli::report::write_csv;
use pcreg_cli::{
    cmd_bench, cmd_eval, cmd_generate, cmd_register, cmd_train, exit, format_transform, CliError, CliResult, Settings,
};

/// Point-cloud registration with learned correspondences.
#[derive(Debug, Parser)]
#[command(name = "pcreg", version)]
struct Cli {
    /// Seed for scene generation, weight initialization and RANSAC sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat `section.key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of scene pairs with statistics.csv.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a model; the validation split is taken from the end of the dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Output weights file (FRWT).
        #[arg(long)]
        out: PathBuf,
        /// Epoch log CSV [default: <out>.log.csv].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Register SOURCE into TARGET's frame and print the 4x4 transform.
    Register {
        source: PathBuf,
        target: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Refine the RANSAC estimate with point-to-point ICP.
        #[arg(long)]
        icp: bool,
        /// RANSAC inlier threshold in meters.
        #[arg(long)]
        kappa: Option<f64>,
        /// Softmax temperature of the matching map.
        #[arg(long)]
        temperature: Option<f64>,
        /// Write a JSON result record (transform, inliers, stage timings).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate on a dataset; writes samples.csv and summary.csv.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        icp: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Per-stage timings over repeated registrations (loading excluded).
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        /// Timing report CSV.
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Core(pcreg::Error::Config(format!("--threads: {e}"))))?;
    }
    let mut settings = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    settings.pipeline.ransac.seed = cli.seed;
    match cli.command {
        Command::Generate { out, count } => {
            let pairs = cmd_generate(&settings, &out, count, cli.seed)?;
            println!("generated {} pairs in {}", pairs.len(), out.display());
        }
        Command::Train { dataset, out, log } => {
            let log = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.csv");
                p.into()
            });
            let records = cmd_train(&settings, &dataset, &out, &log, cli.seed)?;
            println!("trained {} epochs; weights {}, log {}", records.len(), out.display(), log.display());
        }
        Command::Register {
            source,
            target,
            weights,
            icp,
            kappa,
            temperature,
            output,
        } => {
            if let Some(k) = kappa {
                settings.pipeline.ransac.inlier_threshold = k;
            }
            if let Some(t) = temperature {
                settings.pipeline.temperature = t;
            }
            let record = cmd_register(&settings, &source, &target, &weights, icp)?;
            let t = pcreg::RigidTransform::from_row_major(&record.transform)?;
            print!("{}", format_transform(&t));
            println!("inliers {}", record.inliers);
            if let Some(path) = output {
                let json = serde_json::to_string_pretty(&record).expect("record serializes");
                std::fs::write(&path, json).map_err(|e| pcreg::Error::Io { path, source: e })?;
            }
        }
        Command::Eval {
            dataset,
            weights,
            icp,
            out,
        } => {
            let (_, summary) = cmd_eval(&settings, &dataset, &weights, icp, cli.seed, &out)?;
            println!("bin,count,mte_m,mre_deg,recall");
            let show = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
            for r in summary {
                println!("{},{},{},{},{}", r.bin, r.count, show(r.mte_m), show(r.mre_deg), show(r.recall));
            }
        }
        Command::Bench {
            dataset,
            weights,
            repetitions,
            out,
        } => {
            let rows = cmd_bench(&settings, || Ok(dataset_load(&dataset)?), &weights, repetitions, cli.seed)?;
            write_csv(&out, &rows)?;
            for r in rows {
                println!("{:<12} {:>10.2} ms ± {:.2}", r.stage, r.mean_ms, r.std_ms);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
