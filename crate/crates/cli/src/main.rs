use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ape_core::harness::config::RunConfig;
use ape_core::harness::gradcheck::{gradcheck_has_answer, gradcheck_log_policy, REL_TOLERANCE};
use ape_core::harness::pipeline;

#[derive(Parser)]
#[command(name = "ape", version, about = "Budgeted adaptive passage encoding on synthetic retrieval data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the hasanswer, scheduler and eval splits.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Seed to generate for; defaults to every seed in `run.seeds`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the HasAnswer head on the hasanswer split.
    TrainHasanswer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
    },
    /// Train the scheduler with REINFORCE on the scheduler split.
    TrainScheduler {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate every configured policy and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
    },
    /// Print one episode's schedule trace for an eval question.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        question: usize,
        #[arg(long, default_value = "ape_argmax")]
        policy: String,
        /// Retained passages; defaults to the first `eval.k` value.
        #[arg(long)]
        k: Option<usize>,
        /// Step budget; defaults to `L * k`.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        cases: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, seed } => {
            let cfg = common.load()?;
            let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            for s in seeds {
                let data = pipeline::gen_data(&cfg, s)?;
                let counts: Vec<String> = data.iter().map(|d| d.len().to_string()).collect();
                println!(
                    "seed {s}: wrote {} questions (hasanswer/scheduler/eval) to {}",
                    counts.join("/"),
                    pipeline::seed_dir(&cfg, s).join("data").display()
                );
            }
        }
        Command::TrainHasanswer { common, seed } => {
            let cfg = common.load()?;
            let (_, log) = pipeline::train_hasanswer_stage(&cfg, seed)?;
            print!("{}", log.to_csv());
        }
        Command::TrainScheduler { common, seed } => {
            let cfg = common.load()?;
            let (_, curve) = pipeline::train_scheduler_stage(&cfg, seed)?;
            let first = curve.batches.first().map_or(0.0, |b| b.mean_return);
            let last = curve.batches.last().map_or(0.0, |b| b.mean_return);
            println!(
                "{} batches, mean return {first:.4} -> {last:.4}; wrote {}",
                curve.batches.len(),
                pipeline::scheduler_path(&cfg, seed).display()
            );
        }
        Command::Eval { common, seed } => {
            let cfg = common.load()?;
            let (report, _) = pipeline::eval_stage(&cfg, seed)?;
            print!("{}", report.to_csv());
        }
        Command::Trace {
            common,
            seed,
            question,
            policy,
            k,
            budget,
        } => {
            let cfg = common.load()?;
            let k = k.unwrap_or(cfg.eval_k[0]);
            let budget = budget.unwrap_or(cfg.encoder.num_layers * k);
            let trace = pipeline::trace_question(&cfg, seed, question, &policy, k, budget)?;
            print!("{}", trace.to_text());
        }
        Command::Gradcheck { common, cases } => {
            common.load()?;
            let mut failed = 0;
            for (name, check) in [
                ("hasanswer_bce", gradcheck_has_answer as fn(u64) -> ape_core::Result<_>),
                ("log_policy", gradcheck_log_policy),
            ] {
                let mut worst = 0.0f64;
                for seed in 0..cases {
                    let r = check(seed)?;
                    worst = worst.max(r.max_rel_error);
                    if !r.passed() {
                        failed += 1;
                        eprintln!("{name} case {seed}: max relative error {:.3e} at {}", r.max_rel_error, r.worst);
                    }
                }
                println!("{name}: {cases} cases, max relative error {worst:.3e} (tolerance {REL_TOLERANCE:e})");
            }
            if failed > 0 {
                bail!("{failed} gradient check cases exceeded the tolerance");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
