use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rftlab_core::experiment::{discover_runs, load_checked, make_risk_report, make_table, run_suite};
use rftlab_core::rif::read_filter_report;
use rftlab_core::{ExperimentConfig, RiskMode, TraceConfig};

#[derive(Parser)]
#[command(name = "rftlab", version, about = "Continual post-training experiments on synthetic task streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) pair of an experiment config.
    Run {
        config: PathBuf,
        /// Comma-separated seeds or a half-open range `a..b`; replaces the config's list.
        #[arg(long)]
        seeds: Option<String>,
        /// Worker threads.
        #[arg(long, env = "RFTLAB_PARALLEL")]
        parallel: Option<usize>,
        /// Output directory.
        #[arg(long, env = "RFTLAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Aggregate run directories into a median ± IQR table.
    Table {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write table.csv and table.txt (default: first directory).
        #[arg(long, env = "RFTLAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Write the forgetting-risk trace of one run.
    Risk {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        probe_size: usize,
        /// Bank examples per past task (0: all).
        #[arg(long, default_value_t = 64)]
        bank_per_task: usize,
        #[arg(long, default_value_t = 4096)]
        mc_samples: usize,
        #[arg(long, value_parser = ["auto", "exact", "monte_carlo"], default_value = "auto")]
        mode: String,
    },
    /// Print the instance-filtering summary of one run.
    FilterReport { run_dir: PathBuf },
    /// Check a config against the schema without running it.
    Validate { config: PathBuf },
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {text}");
        }
        return Ok((a..b).collect());
    }
    let seeds = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

fn write_table(dirs: &[PathBuf], out: &Path) -> Result<()> {
    let runs = discover_runs(dirs)?;
    if runs.is_empty() {
        bail!("no run directories under {dirs:?}");
    }
    let checked = runs
        .iter()
        .map(|d| load_checked(d).with_context(|| format!("rejected {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let table = make_table(&checked)?;
    std::fs::create_dir_all(out)?;
    table.write_csv(&out.join("table.csv"))?;
    let text = table.render_text();
    std::fs::write(out.join("table.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Run {
            config,
            seeds,
            parallel,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s)?;
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let parallel = parallel.unwrap_or(cfg.parallel);
            let outcomes = run_suite(&cfg, &out, parallel)?;
            let mut ok = true;
            for o in &outcomes {
                let state = match (&o.failure, o.reused) {
                    (Some(f), _) => {
                        ok = false;
                        format!("FAILED: {f}")
                    }
                    (None, true) => "reused".to_string(),
                    (None, false) => "done".to_string(),
                };
                println!("{} seed {}: {state} ({})", o.method, o.seed, o.dir.display());
            }
            if ok {
                write_table(std::slice::from_ref(&out), &out)?;
            }
            Ok(ok)
        }
        Command::Table { dirs, out } => {
            let out = out.unwrap_or_else(|| dirs[0].clone());
            write_table(&dirs, &out)?;
            Ok(true)
        }
        Command::Risk {
            run_dir,
            probe_size,
            bank_per_task,
            mc_samples,
            mode,
        } => {
            let mut cfg = TraceConfig {
                probe_size,
                bank_per_task: (bank_per_task > 0).then_some(bank_per_task),
                ..Default::default()
            };
            cfg.risk.mc_samples = mc_samples;
            cfg.risk.mode = match mode.as_str() {
                "exact" => RiskMode::Exact,
                "monte_carlo" => RiskMode::MonteCarlo,
                _ => RiskMode::Auto,
            };
            let (points, summary) = make_risk_report(&run_dir, &cfg)?;
            println!(
                "{} points ({} exact), max exact residual {:e}; wrote {}",
                points.len(),
                summary.exact_points,
                summary.max_exact_residual,
                run_dir.join("risk_trace.csv").display()
            );
            Ok(summary.identity_holds)
        }
        Command::FilterReport { run_dir } => {
            let path = run_dir.join("filter_report.json");
            let tasks = read_filter_report(&path).with_context(|| format!("no filter report at {}", path.display()))?;
            let (mut kept, mut total) = (0, 0);
            for t in &tasks {
                kept += t.n_kept;
                total += t.n_input;
                println!(
                    "task {}: kept {}/{} ({:.3}){}",
                    t.task,
                    t.n_kept,
                    t.n_input,
                    t.kept_fraction,
                    if t.skipped { ", skipped" } else { "" }
                );
            }
            println!("overall: trained on {kept}/{total} instances");
            Ok(true)
        }
        Command::Validate { config } => match ExperimentConfig::load(&config) {
            Ok(cfg) => {
                let runs = cfg.methods.len() * cfg.seeds.len();
                println!("{}: ok ({} runs)", config.display(), runs);
                Ok(true)
            }
            Err(rftlab_core::Error::Schema(errs)) => {
                for e in errs {
                    eprintln!("{}: {e}", config.display());
                }
                Ok(false)
            }
            Err(e) => Err(e.into()),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
