use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cclx_core::experiment::{self, Arm, EvalKind, ExperimentConfig};
use cclx_core::Result;

/// Contrastive-curriculum cross-lingual chain-of-thought experiments on a
/// synthetic twin-language testbed.
#[derive(Parser)]
#[command(name = "cclx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON). Defaults apply to absent keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set schedule.stage1_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root; overrides the config and the CCLX_OUTPUT_ROOT variable.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = experiment::load_config(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate the corpus, QA sets and instruction files.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one arm: sft, xcot, cl-xcot or ccl-xcot.
    Run {
        arm: Arm,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate run directories.
    Eval {
        /// align, qa, consistency or ablate.
        #[arg(long)]
        kind: EvalKind,
        /// Run directories; defaults to every run under the output root.
        runs: Vec<PathBuf>,
        /// Worker threads; overrides `eval.jobs`.
        #[arg(long)]
        jobs: Option<usize>,
        /// Also write long-format CSVs for plotting.
        #[arg(long)]
        emit_plot_data: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Layer ablation; same as `eval --kind ablate`.
    Ablate {
        /// Worker threads; overrides `eval.jobs`.
        #[arg(long)]
        jobs: Option<usize>,
        /// Also write long-format CSVs for plotting.
        #[arg(long)]
        emit_plot_data: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn existing_runs(root: &std::path::Path) -> Vec<PathBuf> {
    Arm::ALL.iter().map(|&a| experiment::run_dir(root, a)).filter(|d| d.join("run.json").exists()).collect()
}

fn eval(cfg: ConfigArgs, kind: EvalKind, runs: Vec<PathBuf>, jobs: Option<usize>, plot: bool) -> Result<()> {
    let mut c = cfg.load()?;
    if let Some(j) = jobs {
        c.eval.jobs = j;
    }
    let root = c.output_root();
    let runs = if runs.is_empty() && kind != EvalKind::Ablate { existing_runs(&root) } else { runs };
    for path in experiment::cmd_eval(&c, &root, &runs, kind, plot)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { cfg } => {
            println!("{}", serde_json::to_string_pretty(&cfg.load()?)?);
        }
        Command::Gen { cfg } => {
            let c = cfg.load()?;
            let root = c.output_root();
            let manifest = experiment::cmd_gen(&c, &root)?;
            println!("{}", experiment::data_dir(&root).display());
            for (name, n) in &manifest.counts {
                println!("  {name}: {n}");
            }
            println!("corpus hash {}", manifest.corpus_hash);
        }
        Command::Run { arm, cfg } => {
            let c = cfg.load()?;
            println!("{}", experiment::cmd_run(&c, &c.output_root(), arm)?.display());
        }
        Command::Eval { kind, runs, jobs, emit_plot_data, cfg } => eval(cfg, kind, runs, jobs, emit_plot_data)?,
        Command::Ablate { jobs, emit_plot_data, cfg } => eval(cfg, EvalKind::Ablate, Vec::new(), jobs, emit_plot_data)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
