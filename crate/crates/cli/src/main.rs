use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use bmfal::acquisition::McInputSet;
use bmfal::active::{init_dataset, run_experiment, ExperimentConfig, Strategy, TestSet};
use bmfal::cost::Cost;
use bmfal::model::MfModel;
use bmfal::optimizer::OptimizerConfig;
use bmfal::planner::{plan_batch, PlanMode};
use bmfal::simulators::{OracleSpec, Problem};
use bmfal::Fidelity;

#[derive(Parser)]
#[command(
    name = "bmfal",
    version,
    about = "Budget-constrained batch multi-fidelity active learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a uniform initial dataset and write it as JSON lines.
    GenInitial {
        #[arg(long)]
        problem: Problem,
        /// Examples per fidelity, lowest first, e.g. "10,2".
        #[arg(long)]
        counts: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan one batch with a trained model and print it as JSON.
    Plan {
        /// Model checkpoint written by `run`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        problem: Problem,
        #[arg(long)]
        budget: Cost,
        /// Per-fidelity costs, e.g. "1,3"; defaults to the standard ladder.
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long, default_value_t = false)]
        exceed_once: bool,
        #[arg(long, default_value_t = 20)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one simulator query and print the field with its mesh.
    Solve {
        #[arg(long)]
        problem: Problem,
        /// 1-based fidelity level.
        #[arg(long)]
        fidelity: usize,
        /// Comma-separated input vector.
        #[arg(long, allow_hyphen_values = true)]
        input: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the active-learning loop and write CSV/JSONL records.
    Run {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        problem: Option<Problem>,
        #[arg(long)]
        budget: Option<Cost>,
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// TOML or JSON experiment config; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Score a model checkpoint on a held-out test set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        problem: Problem,
        #[arg(long, default_value_t = 128)]
        test_size: usize,
        #[arg(long, default_value_t = 12345)]
        test_seed: u64,
    },
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} entry {v:?}: {e}"))
        })
        .collect()
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => r.context("writing to stdout"),
            }
        }
    }
}

fn oracle_spec(problem: Problem, num_fidelities: usize, lambdas: Option<Vec<Cost>>) -> OracleSpec {
    let mut spec = OracleSpec::new(problem, num_fidelities);
    spec.lambdas = lambdas;
    spec
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenInitial {
            problem,
            counts,
            seed,
            out,
        } => {
            let counts: Vec<usize> = parse_list(&counts, "count")?;
            let oracle = OracleSpec::new(problem, counts.len()).build()?;
            let data = init_dataset(oracle.as_ref(), &counts, seed)?;
            data.write_jsonl(&out)?;
            eprintln!("wrote {} examples to {}", data.len(), out.display());
        }
        Command::Plan {
            model,
            problem,
            budget,
            lambdas,
            exceed_once,
            mc_samples,
            seed,
            out,
        } => {
            let model = MfModel::load(&model)?;
            let lambdas = lambdas
                .map(|l| parse_list::<Cost>(&l, "cost"))
                .transpose()?;
            let oracle = oracle_spec(problem, model.num_fidelities(), lambdas).build()?;
            let cost = bmfal::cost::CostModel::new(oracle.ladder().lambdas.clone(), budget)?;
            let mc = McInputSet::draw(oracle.domain(), mc_samples, seed)?;
            let opt = OptimizerConfig {
                seed,
                ..OptimizerConfig::default()
            };
            let mode = if exceed_once {
                PlanMode::ExceedOnce
            } else {
                PlanMode::Standard
            };
            let plan = plan_batch(&model, oracle.domain(), &cost, &opt, &mc, mode)?;
            emit(&serde_json::to_string_pretty(&plan)?, out.as_deref())?;
        }
        Command::Solve {
            problem,
            fidelity,
            input,
            out,
        } => {
            let x: Vec<f64> = parse_list(&input, "input")?;
            if fidelity == 0 {
                bail!("fidelity levels start at 1");
            }
            let spec = OracleSpec::new(problem, fidelity.clamp(2, 3));
            let oracle = spec.build()?;
            let (field, cost) = oracle.query(&x, Fidelity::level(fidelity))?;
            let mesh = oracle.ladder().meshes[fidelity - 1];
            let doc = json!({
                "problem": problem.to_string(),
                "fidelity": fidelity,
                "input": x,
                "cost": cost,
                "mesh": {"n": mesh.n(), "spacing": mesh.spacing(), "layout": "index = j * n + i"},
                "field": field,
            });
            emit(&serde_json::to_string(&doc)?, out.as_deref())?;
        }
        Command::Run {
            strategy,
            problem,
            budget,
            batches,
            seed,
            config,
            out,
        } => {
            let mut cfg = match (&config, problem) {
                (Some(p), _) => ExperimentConfig::load(p)?,
                (None, Some(problem)) => ExperimentConfig::desk(
                    OracleSpec::new(problem, 2),
                    strategy.unwrap_or(Strategy::BmfalBc),
                    0,
                ),
                (None, None) => bail!("either --config or --problem is required"),
            };
            if config.is_some() {
                if let Some(p) = problem {
                    cfg.oracle.problem = p;
                }
            }
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            if let Some(b) = budget {
                cfg.budget = b;
            }
            if let Some(n) = batches {
                cfg.num_batches = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let records = run_experiment(&cfg, Some(&out))?;
            for r in &records {
                eprintln!(
                    "batch {:>3}  cost {:>8}  nrmse {:.6}",
                    r.batch_index, r.accumulated_cost, r.nrmse
                );
            }
        }
        Command::Eval {
            model,
            problem,
            test_size,
            test_seed,
        } => {
            let model = MfModel::load(&model)?;
            let oracle = OracleSpec::new(problem, model.num_fidelities()).build()?;
            let test = TestSet::draw(oracle.as_ref(), test_size, test_seed)?;
            println!("{}", test.evaluate(&model, oracle.as_ref())?);
        }
    }
    Ok(())
}
