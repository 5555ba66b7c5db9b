use std::path::PathBuf;
use std::process::ExitCode;

use aslora_cli::{
    cmd_compare, cmd_inspect, cmd_params, cmd_sweep, cmd_train, default_run_dir, format_compare,
    format_params, Preset,
};
use aslora_core::{Result, RunConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aslora", version, about = "Train and compare shared-A low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Roberta,
    Llama,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration into a run directory.
    Train {
        config: PathBuf,
        /// Run directory; defaults to $ASLORA_RUNS/<config stem>.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Print trainable adapter parameter counts.
    Params {
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
    },
    /// Train the adaptive mode at several merge budgets.
    Sweep {
        config: PathBuf,
        /// Comma-separated merge budgets.
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed sharing against adaptive merging at matched parameter budgets.
    Compare {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Describe a checkpoint or run directory.
    Inspect { path: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            run_dir,
            resume,
        } => {
            let o = cmd_train(&config, run_dir.as_deref(), resume)?;
            let r = &o.report;
            println!("run        {}", o.run_dir.display());
            println!("loss       {:.5} -> {:.5}", r.initial_train_loss, r.final_train_loss);
            if let Some(a) = r.final_eval.accuracy {
                println!("eval acc   {a:.4}");
            }
            if let Some(m) = r.final_eval.mse {
                println!("eval mse   {m:.5}");
            }
            println!("params     {}", r.final_params);
            println!("merges     {}", o.merges);
        }
        Command::Params { config, preset } => {
            let cfg = match (config, preset) {
                (_, Some(PresetArg::Roberta)) => Preset::Roberta.config(),
                (_, Some(PresetArg::Llama)) => Preset::Llama.config(),
                (Some(p), None) => RunConfig::load(&p)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            print!("{}", format_params(&cmd_params(&cfg)?));
        }
        Command::Sweep {
            config,
            budgets,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| default_run_dir(&config, "-sweep"));
            let rows = cmd_sweep(&cfg, &budgets, &out)?;
            println!("{:>4}{:>12}{:>14}{:>12}", "N", "params", "train_loss", "eval");
            for r in rows {
                println!(
                    "{:>4}{:>12}{:>14.5}{:>12.4}",
                    r.budget, r.params, r.final_train_loss, r.eval_value
                );
            }
            println!("wrote {}", out.join("sweep.csv").display());
        }
        Command::Compare { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| default_run_dir(&config, "-compare"));
            print!("{}", format_compare(&cmd_compare(&cfg, &out)?));
            println!("wrote {}", out.join("compare.csv").display());
        }
        Command::Inspect { path } => print!("{}", cmd_inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
