use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use osprompt_cli::*;
use osprompt_core::cost::{Phase, Pipeline};
use osprompt_core::Result;

// Output is informational; a closed pipe (e.g. `| head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "osprompt", version, about = "One-stage prompt-based continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(Preset))]
    preset: Option<Preset>,
}

#[derive(Subcommand)]
enum Command {
    /// Trains the backbone on the base classes and saves it.
    Pretrain(Common),
    /// Runs the continual task sequence.
    Train {
        #[command(flatten)]
        common: Common,
        /// Backbone from `pretrain`; pretrains inline when absent.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Evaluates a checkpoint on every task it has seen.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate as if after this 1-based task.
        #[arg(long)]
        task: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytical compute cost of every pipeline.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(Preset))]
        preset: Option<Preset>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Prompt lengths for the cost sweep.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        /// Prompted-layer counts for the cost sweep.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// Per-layer [CLS] drift between two checkpoints.
    Drift {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        /// Label for the task pair column.
        #[arg(long, default_value = "a-b")]
        pair: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeats training over a grid of config values and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2`; repeat for a product grid.
        #[arg(long, required = true)]
        grid: Vec<GridAxis>,
        /// Seeds per cell; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = resolve_config(c.config.as_deref(), c.preset, c.seed)?;
            let out = resolve_out(c.out.as_deref(), Some(&cfg));
            let pre = cmd_pretrain(&cfg, &out)?;
            say!("base accuracy {:.4}; backbone in {}", pre.base_accuracy, out.display());
        }
        Command::Train { common: c, backbone } => {
            let cfg = resolve_config(c.config.as_deref(), c.preset, c.seed)?;
            let out = resolve_out(c.out.as_deref(), Some(&cfg));
            let r = cmd_train(&cfg, &out, backbone.as_deref())?;
            match r.f_n {
                Some(f) => say!("A_N {:.4}  F_N {:.4}", r.a_n, f),
                None => say!("A_N {:.4}", r.a_n),
            }
        }
        Command::Eval { checkpoint, task, out } => {
            let out = resolve_out(out.as_deref(), None);
            let report = cmd_eval(&checkpoint, task, &out)?;
            say!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Flops {
            config,
            preset,
            out,
            lengths,
            layers,
        } => {
            let cost = cost_config_for(config.as_deref(), preset)?;
            let out = resolve_out(out.as_deref(), None);
            let (report, sweep) = cmd_flops(&cost, &lengths, &layers, &out)?;
            say!("plain forward {:.4} GFLOPs", report.plain_forward_gflops);
            say!("prompted forward {:.4} GFLOPs", report.prompted_forward_gflops);
            for row in &report.rows {
                say!(
                    "{:<12} {:<6} {:>10.4} GFLOPs {:>7.2}%",
                    row.mode.to_string(),
                    row.phase.to_string(),
                    row.gflops,
                    row.percent_of_two_stage
                );
            }
            for r in sweep.iter().filter(|r| r.mode == Pipeline::OneStage && r.phase == Phase::Infer) {
                say!("L_p {:>3} layers {:>2}: {:.2}% of two-stage", r.l_p, r.layers, r.percent_of_two_stage);
            }
        }
        Command::Drift { from, to, pair, out } => {
            let out = resolve_out(out.as_deref(), None);
            for r in cmd_drift(&from, &to, &pair, &out)? {
                say!("layer {:>2}  {:.6}", r.layer, r.distance);
            }
        }
        Command::Sweep { common: c, grid, seeds } => {
            let cfg = resolve_config(c.config.as_deref(), c.preset, c.seed)?;
            let out = resolve_out(c.out.as_deref(), Some(&cfg));
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            for cell in cmd_sweep(&cfg, &grid, &seeds, &out)? {
                let label: Vec<String> = cell.cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let mean = cell.a_n.iter().sum::<f64>() / cell.a_n.len() as f64;
                say!("{}  A_N {:.4}", label.join(" "), mean);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
