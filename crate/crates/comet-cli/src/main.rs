//! `comet` — staged cross-modal training over a shared discrete codebook.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};

use comet_cli::commands;
use comet_cli::config::{self, RunConfig};
use comet_cli::error::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "comet",
    version,
    about = "Continual multimodal training into one shared discrete codebook"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

/// Flags shared by every verb.
#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Precedence: this flag, then $COMET_OUT, then the
    /// config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma list of components to disable: pm, moe, gate, ewc, sl.
    #[arg(long)]
    ablate: Option<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Render every configured stage's synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train stages in order; one checkpoint per stage plus metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Contiguous stage selection: "1", "2-3", or "1,2".
        #[arg(long)]
        stages: Option<String>,
    },
    /// Score a checkpoint; writes eval_report.json (and activation.csv).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score (default: the final configured stage's).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma list from: agreement, transfer, retrieval, activation.
        /// Omitted = all; explicitly empty = empty report.
        #[arg(long)]
        metrics: Option<String>,
    },
    /// Export the per-code activation CSV for a checkpoint.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare every analytic gradient against finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Run only checks whose name starts with this prefix.
        #[arg(long)]
        filter: Option<String>,
    },
}

/// Config file + flag overrides, validated.
fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => config::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(arg) = &common.ablate {
        let list = config::parse_ablations(arg)?;
        cfg.apply_ablations(&list);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.verb {
        Verb::GenData { common } => {
            let cfg = effective_config(&common)?;
            let out = cfg.resolve_out(common.out.as_deref());
            for p in commands::cmd_gen_data(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Verb::Train { common, stages } => {
            let cfg = effective_config(&common)?;
            let out = cfg.resolve_out(common.out.as_deref());
            let summary = commands::cmd_train(&cfg, &out, stages.as_deref())?;
            for p in &summary.checkpoints {
                println!("wrote {}", p.display());
            }
            println!(
                "wrote {} ({} rows)",
                summary.metrics_path.display(),
                summary.rows
            );
        }
        Verb::Eval {
            common,
            checkpoint,
            metrics,
        } => {
            let cfg = effective_config(&common)?;
            let out = cfg.resolve_out(common.out.as_deref());
            let outputs =
                commands::cmd_eval(&cfg, &out, checkpoint.as_deref(), metrics.as_deref())?;
            for m in &outputs.report.metrics {
                let mut label = m.name.clone();
                if let Some(s) = m.stage {
                    label.push_str(&format!(" stage {s}"));
                }
                if let Some(p) = &m.pair {
                    label.push_str(&format!(" {p}"));
                }
                println!("{label}: {}", m.value);
            }
            println!("wrote {}", outputs.report_path.display());
            if let Some(p) = &outputs.activation_path {
                println!("wrote {}", p.display());
            }
        }
        Verb::Stats { common, checkpoint } => {
            let cfg = effective_config(&common)?;
            let out = cfg.resolve_out(common.out.as_deref());
            let (path, stats) = commands::cmd_stats(&cfg, &out, checkpoint.as_deref())?;
            let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
            for &c in &stats.classes {
                *hist.entry(c).or_insert(0) += 1;
            }
            for (class, n) in hist {
                println!("class {class}: {n} codes");
            }
            println!("wrote {}", path.display());
        }
        Verb::GradCheck { common, filter } => {
            let cfg = effective_config(&common)?;
            let report = commands::cmd_grad_check(cfg.seed, filter.as_deref())?;
            for line in &report.lines {
                println!("{line}");
            }
            if report.failures > 0 {
                return Err(CliError::GradCheck(report.failures));
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        process::exit(e.exit_code());
    }
}
