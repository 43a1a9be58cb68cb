use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fvnce::experiment::{self, InputSource, RunConfig};
use fvnce::oracle;
use fvnce::psr::{self, ScoringPair};

#[derive(Parser)]
#[command(
    name = "fvnce",
    version,
    about = "Double-ELBO scoring rules and fully variational NCE"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (a file for `curves`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the exact tabular checks and write report.json.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate f1, f0, the scores and the logit losses over the ratio grid.
    Curves {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        beta: f64,
        /// Use the raw pair instead of the normalized one.
        #[arg(long)]
        raw: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train one configuration; writes metrics.csv and checkpoint.bin.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train several methods from shared initial weights; writes table.csv.
    Sweep {
        /// Comma-separated methods, e.g. `ae,vae,(1/64,0)`.
        #[arg(long)]
        methods: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct inputs through a checkpoint; writes PGM grids and loglik.csv.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `test`, `noise`, or a headerless CSV file of inputs.
        #[arg(long, default_value = "test")]
        inputs: String,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_json_file(p)
            .with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Splits at commas outside parentheses, so `(1/64,0)` stays one method.
fn split_methods(list: &str) -> Vec<String> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in list.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(list[start..i].trim().to_string());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(list[start..].trim().to_string());
    out.retain(|m| !m.is_empty());
    out
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(1).max(1))
        .build()?;
    Ok(pool.install(f))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify { common } => {
            let report = with_threads(common.threads, oracle::verify_all)??;
            for c in &report.checks {
                println!(
                    "{:<4} {:<36} residual {:.3e} (tolerance {:.1e}, {} cases)",
                    if c.passed { "ok" } else { "FAIL" },
                    c.name,
                    c.residual,
                    c.tolerance,
                    c.cases
                );
            }
            let dir = common.out.unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&dir)?;
            let path = dir.join("report.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!("wrote {}", path.display());
            Ok(report.passed)
        }
        Command::Curves {
            alpha,
            beta,
            raw,
            common,
        } => {
            let pair = if raw {
                ScoringPair::raw(alpha, beta)?
            } else {
                ScoringPair::normalized(alpha, beta)?
            };
            let Some(out) = common.out else {
                bail!("curves needs --out FILE.csv");
            };
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            experiment::write_curves_csv(&out, &psr::curves(&pair)?)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Train { common } => {
            let cfg = run_config(&common)?;
            let out = experiment::run_train(&cfg)?;
            let last = out.metrics.last().expect("initial metrics row");
            println!(
                "epoch {}: loss {:.4}, data {:.3}, noise {:.3}, difference {:.3} nats",
                last.epoch, last.loss, last.data_loglik, last.noise_loglik, last.difference
            );
            println!("wrote {}", cfg.out_dir.display());
            Ok(true)
        }
        Command::Sweep { methods, common } => {
            let cfg = run_config(&common)?;
            let methods = methods.map_or_else(|| cfg.variants.clone(), |m| split_methods(&m));
            fs::create_dir_all(&cfg.out_dir)?;
            let rows = experiment::sweep(&cfg, &methods)?;
            println!(
                "{:<12} {:>12} {:>12} {:>12}",
                "method", "x~p_d", "x~p_n", "difference"
            );
            for r in &rows {
                println!(
                    "{:<12} {:>12.2} {:>12.2} {:>12.2}",
                    r.method, r.data_loglik, r.noise_loglik, r.difference
                );
            }
            println!("wrote {}", cfg.out_dir.join("table.csv").display());
            Ok(true)
        }
        Command::Reconstruct {
            checkpoint,
            inputs,
            count,
            common,
        } => {
            let source: InputSource = inputs.parse()?;
            let dir = common
                .out
                .unwrap_or_else(|| PathBuf::from("reconstruction"));
            let rec = with_threads(common.threads, || {
                experiment::run_reconstruct(&checkpoint, &source, count, &dir)
            })??;
            let n = rec.log_likelihood.len();
            let mean = rec.log_likelihood.iter().sum::<f64>() / n as f64;
            println!("{n} inputs, mean log p(x|g(x)) = {mean:.3} nats");
            println!("wrote {}", dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
