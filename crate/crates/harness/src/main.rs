use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdt_core::decay::DecayVariant;
use sdt_core::gradcheck::suites::Scope;
use sdt_harness::commands::{self, BenchOptions, DumpOptions};
use sdt_harness::runner::{self, EpochMetrics};
use sdt_harness::{Failure, RunConfig};

#[derive(Parser)]
#[command(name = "sdt", version, about = "Spatial decay attention: training, checks, benchmarks and mask dumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat key = value config file; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run, or a sweep over variants, alphas and seeds.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Comma-separated variants to sweep.
        #[arg(long, value_delimiter = ',')]
        sweep_variant: Vec<String>,
        /// Comma-separated alphas to sweep.
        #[arg(long, value_delimiter = ',')]
        sweep_alpha: Vec<f64>,
        /// Comma-separated seeds to sweep.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on its config's test split.
    Eval {
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "op")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full against decomposed mask and attention cost.
    Bench {
        /// Grids as N or HxW.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        grids: Vec<String>,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 8)]
        head_dim: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for bench.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write decay masks as text matrices and PGM heatmaps.
    DumpMask {
        #[arg(long, default_value = "cag")]
        variant: String,
        #[arg(long, default_value = "4x4")]
        grid: String,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        /// Rate for every head of the fixed mask.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "masks")]
        out: PathBuf,
        #[arg(long)]
        no_pgm: bool,
    },
    /// Export a synthetic split.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        previews: usize,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn variant(s: &str) -> Result<DecayVariant, Failure> {
    s.parse().map_err(|e: sdt_core::Error| Failure::Config(e.to_string()))
}

fn load_config(a: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = &a.variant {
        cfg.model.decay = variant(v)?;
    }
    if let Some(al) = a.alpha {
        cfg.model.alpha = al;
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sweep(base: &RunConfig, variants: &[String], alphas: &[f64], seeds: &[u64]) -> Result<Vec<RunConfig>, Failure> {
    let variants = if variants.is_empty() { vec![base.model.decay] } else { variants.iter().map(|v| variant(v)).collect::<Result<_, _>>()? };
    let alphas = if alphas.is_empty() { vec![base.model.alpha] } else { alphas.to_vec() };
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let mut out = Vec::new();
    for &v in &variants {
        for &a in &alphas {
            for &s in &seeds {
                let mut c = base.clone();
                c.model.decay = v;
                c.model.alpha = a;
                c.seed = s;
                c.validate()?;
                out.push(c);
            }
        }
    }
    Ok(out)
}

fn train(configs: &[RunConfig], out: &Path, quiet: bool) -> Result<(), Failure> {
    for cfg in configs {
        let id = cfg.run_id();
        eprintln!("run {id}");
        let mut log = |m: &EpochMetrics| {
            if !quiet {
                eprintln!("  epoch {:>3}  train_loss {:.4}  test_loss {:.4}  test_acc {:.4}  lr {:.2e}", m.epoch, m.train_loss, m.test_loss, m.test_acc, m.lr);
            }
        };
        let outcome = runner::train(cfg, Some(out), &mut log)?;
        let s = &outcome.record.summary;
        println!("{id}\tvariant={}\talpha={}\tseed={}\tfinal_test_acc={:.4}\twall={:.1}s", s.variant, s.alpha, s.seed, s.final_test_acc, outcome.record.wall_clock_secs);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { run, out, sweep_variant, sweep_alpha, seeds, quiet } => {
            let base = load_config(&run)?;
            train(&sweep(&base, &sweep_variant, &sweep_alpha, &seeds)?, &out, quiet)
        }
        Command::Eval { checkpoint } => {
            let r = runner::eval_checkpoint(&checkpoint)?;
            println!("{}", serde_json::to_string(&r)?);
            Ok(())
        }
        Command::Gradcheck { scope, seed } => {
            let scope: Scope = scope.parse().map_err(|e: sdt_core::Error| Failure::Config(e.to_string()))?;
            let report = commands::gradcheck(scope, seed)?;
            print!("{}", report.render());
            let bad = report.offenders();
            if bad.is_empty() {
                Ok(())
            } else {
                let names: Vec<&str> = bad.iter().map(|r| r.name.as_str()).collect();
                Err(Failure::Threshold(format!("{} inputs over {:e}: {}", bad.len(), report.tolerance, names.join(", "))))
            }
        }
        Command::Bench { grids, heads, head_dim, repeats, seed, out } => {
            let grids = grids.iter().map(|g| commands::parse_grid(g)).collect::<Result<Vec<_>, _>>()?;
            if heads == 0 || head_dim == 0 {
                return Err(Failure::Config("heads and head_dim must be positive".into()));
            }
            let rows = commands::bench(&grids, &BenchOptions { heads, head_dim, repeats, seed, ..BenchOptions::default() })?;
            print!("{}", commands::bench_table(&rows));
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("bench.csv"), commands::bench_csv(&rows))?;
            }
            Ok(())
        }
        Command::DumpMask { variant: v, grid, batch, heads, dim, alpha, lambda, seed, out, no_pgm } => {
            let opts = DumpOptions {
                variant: variant(&v)?,
                grid: commands::parse_grid(&grid)?,
                batch,
                heads,
                dim,
                alpha,
                lambda,
                seed,
                pgm: !no_pgm,
                ..DumpOptions::default()
            };
            let paths = commands::dump_masks(&opts, &out)?;
            println!("wrote {} masks to {}", paths.len(), out.display());
            Ok(())
        }
        Command::GenData { run, samples, previews, out } => {
            let cfg = load_config(&run)?;
            commands::gen_data(&cfg.task, samples, cfg.data_seed, previews, &out)?;
            println!("wrote {samples} samples to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
