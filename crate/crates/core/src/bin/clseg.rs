use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clseg::harness::{
    emit_report, load_records, run_experiment, run_nc_reference, sweep_buffer, sweep_order, ExperimentConfig,
};
use clseg::scenarios::ingest_dataset;
use clseg::{Error, Result};

/// Continual-learning segmentation benchmark.
#[derive(Parser)]
#[command(name = "clseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration over all its seeds.
    Run { config: PathBuf },
    /// Train the single-task reference models and refresh the cache.
    NcRef { config: PathBuf },
    /// Repeat a configuration under seeded task orders.
    SweepOrder {
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the generated order as the first permutation.
        #[arg(long)]
        include_identity: bool,
    },
    /// Repeat a replay configuration for several buffer capacities.
    SweepBuffer {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
        sizes: Vec<usize>,
    },
    /// Summarise every persisted run under a results directory.
    Report {
        dir: PathBuf,
        /// Report several scenarios, one table each.
        #[arg(long)]
        allow_mixed: bool,
    },
    /// Check that a dataset manifest ingests cleanly.
    Validate { manifest: PathBuf },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_path(path)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let rec = run_experiment(&cfg)?;
            let files = emit_report(std::slice::from_ref(&rec), &cfg.out_dir.join(&rec.config_hash), false)?;
            println!("config {} ({} seeds)", rec.config_hash, rec.runs.len());
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::NcRef { config } => {
            let cfg = load(&config)?;
            for (seed, nc) in run_nc_reference(&cfg)? {
                let cells: Vec<String> = nc.d_nc.iter().map(|d| format!("{d:.4}")).collect();
                println!("seed {seed}: {}", cells.join(" "));
            }
        }
        Command::SweepOrder {
            config,
            n,
            seed,
            include_identity,
        } => {
            let cfg = load(&config)?;
            let sw = sweep_order(&cfg, n, seed, include_identity)?;
            for (k, label) in sw.labels.iter().enumerate() {
                println!("{label}: A-Dice {:.4} BWTR {:.4}", sw.a_dice[k], sw.bwtr[k]);
            }
            println!("across orders: A-Dice {} BWTR {}", sw.a_dice_across, sw.bwtr_across);
            println!("wrote {}", sw.csv.display());
        }
        Command::SweepBuffer { config, sizes } => {
            let cfg = load(&config)?;
            let sw = sweep_buffer(&cfg, &sizes)?;
            for (s, a) in sw.sizes.iter().zip(&sw.a_dice) {
                println!("capacity {s}: A-Dice {a:.4}");
            }
            match sw.spearman {
                Some(r) => println!("spearman(size, A-Dice) = {r:.4}"),
                None => println!("spearman(size, A-Dice) undefined (constant series)"),
            }
            println!("wrote {}", sw.csv.display());
        }
        Command::Report { dir, allow_mixed } => {
            let loaded = load_records(&dir)?;
            if loaded.is_empty() {
                return Err(Error::Aggregation(format!("no runs under {}", dir.display())));
            }
            let records: Vec<_> = loaded.into_iter().map(|l| l.record).collect();
            for f in emit_report(&records, &dir, allow_mixed)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Validate { manifest } => {
            let stream = ingest_dataset(&manifest)?;
            println!("{} stream, {} tasks", stream.kind, stream.n_tasks());
            for t in &stream.tasks {
                println!(
                    "task {}: classes {:?}, {} train / {} val / {} test",
                    t.id,
                    t.label_set,
                    t.train.len(),
                    t.val.len(),
                    t.test.len()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
