use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use depthsweep::Error;
use depthsweep_cli::commands::{
    cmd_ablate, cmd_analyze_error, cmd_eval, cmd_gen, cmd_infer, cmd_train, loss_csv_path, Predictions,
};
use depthsweep_cli::config::RunConfig;
use depthsweep_cli::{exit_code, init_threads, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "depthsweep", version, about = "Depth-uniform plane-sweep stereo with uncertainty-guided refinement")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML with [rig], [depth], [features], [model], [train], [gen], [eval]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.lr=0.5 (repeatable, applied in order).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Seed for scene generation and training (sets gen.seed and train.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, env = "DDL_THREADS", global = true)]
    threads: Option<usize>,
    /// Require run-to-run identical output. Reductions always run in a fixed
    /// order, so this only records the intent.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic samples and a manifest.
    Gen {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Three-phase training; writes a checkpoint and a per-epoch loss CSV.
    Train {
        /// Dataset manifest or its directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint path with extension .loss.csv.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Stop after this phase (1, 2 or 3).
        #[arg(long)]
        phase: Option<u8>,
    },
    /// Depth for one image pair, written as PFM.
    Infer {
        /// Without a checkpoint the initial parameters are used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write coarse depth, SU and offset maps into this directory.
        #[arg(long, value_name = "DIR")]
        dump_intermediates: Option<PathBuf>,
    },
    /// MAE and per-bin MAE against a dataset's ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory of {id}.pfm predictions.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        pred: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_name = "DIR")]
        error_maps: Option<PathBuf>,
    },
    /// Train and evaluate Baseline, BL+Dep and BL+Dep+GU with a shared seed.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate checkpoints already in --out instead of training.
        #[arg(long)]
        reuse: bool,
    },
    /// Tabulate depth error against depth for fixed disparity errors.
    AnalyzeError {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
        dis_errors: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let g = cli.global;
    init_threads(g.threads)?;
    let mut sets = g.sets;
    if let Some(seed) = g.seed {
        sets.push(format!("gen.seed={seed}"));
        sets.push(format!("train.seed={seed}"));
    }
    if let Command::Train { phase: Some(p), .. } = &cli.command {
        sets.push(format!("train.last_phase={p}"));
    }
    let cfg = RunConfig::load(g.config.as_deref(), &sets)?;
    match cli.command {
        Command::Gen { count, out } => {
            let m = cmd_gen(&cfg, count, &out)?;
            println!("wrote {} samples to {}", m.entries.len(), out.display());
        }
        Command::Train { data, out, loss_csv, .. } => {
            let csv = loss_csv.unwrap_or_else(|| loss_csv_path(&out));
            let r = cmd_train(&cfg, &data, &out, &csv)?;
            for e in &r.history {
                println!("epoch {:>3}  phase {}  lr {:.3e}  loss {:.6}", e.epoch, e.phase, e.lr, e.loss);
            }
            println!(
                "loss {:.6} -> {:.6}; checkpoint {}; history {}",
                r.initial_loss,
                r.final_loss,
                out.display(),
                csv.display()
            );
        }
        Command::Infer {
            checkpoint,
            left,
            right,
            out,
            dump_intermediates,
        } => {
            cmd_infer(&cfg, checkpoint.as_deref(), &left, &right, &out, dump_intermediates.as_deref())?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            data,
            pred,
            checkpoint,
            report,
            error_maps,
        } => {
            let source = match (pred, checkpoint) {
                (Some(p), _) => Predictions::Dir(p),
                (None, Some(c)) => Predictions::Checkpoint(c),
                (None, None) => unreachable!("clap requires one"),
            };
            let r = cmd_eval(&cfg, &data, &source, &report, error_maps.as_deref())?;
            println!("MAE {:.4} m over {} pixels", r.mae, r.count);
            for b in &r.bins {
                match b.mae {
                    Some(m) => println!("  [{:>4}, {:>4})  {m:.4} m  ({} px)", b.lo, b.hi, b.count),
                    None => println!("  [{:>4}, {:>4})  -", b.lo, b.hi),
                }
            }
        }
        Command::Ablate { train, test, out, reuse } => {
            let rows = cmd_ablate(&cfg, &train, &test, &out, reuse)?;
            for r in &rows {
                let bins: Vec<String> = r
                    .report
                    .bins
                    .iter()
                    .map(|b| b.mae.map(|m| format!("{m:.2}")).unwrap_or_else(|| "-".into()))
                    .collect();
                println!("{:<10} MAE {:.3}  bins {}", r.variant.name(), r.report.mae, bins.join(" "));
            }
            println!("wrote {}", out.join("ablation.csv").display());
        }
        Command::AnalyzeError { out, dis_errors } => {
            let curves = cmd_analyze_error(&cfg, &dis_errors, &out)?;
            for c in &curves {
                println!("dis_error {:.3} px: log-log slope {:.4}", c.disparity_error, c.slope);
            }
        }
    }
    Ok(())
}
