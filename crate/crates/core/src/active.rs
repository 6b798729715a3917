//! Active-learning harness: initial data, the acquire/query/retrain loop for
//! every strategy, nRMSE evaluation and run artifacts.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{dmfal_mi, IncrementalMi, McInputSet};
use crate::cost::{Cost, CostModel};
use crate::dataset::{Dataset, Example};
use crate::delta::DeltaContext;
use crate::error::{Error, Result};
use crate::model::{Activation, CovarianceKind, MfModel, ModelConfig, TrainConfig};
use crate::optimizer::OptimizerConfig;
use crate::planner::{self, best_over_fidelities, PlanMode};
use crate::simulators::{interpolate, OracleSpec, SimulatorOracle};
use crate::types::{Fidelity, Query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    /// Weighted-greedy batch plan, one retrain per batch.
    BmfalBc,
    /// One query at a time by `I(y_m(x); y_M(x)) / λ_m`, retraining after each.
    DmfalBc,
    /// One query at a time by the Monte-Carlo single score over `λ_m`.
    MfalBc,
    /// As `DmfalBc` with a random affordable fidelity.
    DmfalBcRf,
    /// As `MfalBc` with a random affordable fidelity.
    MfalBcRf,
    /// Random fidelities and inputs, one retrain per batch.
    BatchFrBc,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::BmfalBc,
        Strategy::DmfalBc,
        Strategy::MfalBc,
        Strategy::DmfalBcRf,
        Strategy::MfalBcRf,
        Strategy::BatchFrBc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::BmfalBc => "BMFAL_BC",
            Strategy::DmfalBc => "DMFAL_BC",
            Strategy::MfalBc => "MFAL_BC",
            Strategy::DmfalBcRf => "DMFAL_BC_RF",
            Strategy::MfalBcRf => "MFAL_BC_RF",
            Strategy::BatchFrBc => "BATCH_FR_BC",
        }
    }

    pub fn is_sequential(self) -> bool {
        !matches!(self, Strategy::BmfalBc | Strategy::BatchFrBc)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::parse("strategy", format!("unknown strategy {s:?}")))
    }
}

fn default_latent_dim() -> usize {
    8
}
fn default_hidden_width() -> usize {
    20
}
fn default_hidden_layers() -> usize {
    2
}
fn default_posterior_std() -> f64 {
    0.05
}
fn default_noise_var() -> f64 {
    0.01
}

/// Surrogate architecture; output sizes come from the oracle's ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_covariance")]
    pub covariance: CovarianceKind,
    #[serde(default = "default_posterior_std")]
    pub init_posterior_std: f64,
    #[serde(default = "default_noise_var")]
    pub init_noise_var: f64,
}

fn default_covariance() -> CovarianceKind {
    CovarianceKind::Full
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            latent_dim: default_latent_dim(),
            hidden_width: default_hidden_width(),
            hidden_layers: default_hidden_layers(),
            covariance: default_covariance(),
            init_posterior_std: default_posterior_std(),
            init_noise_var: default_noise_var(),
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, input_dim: usize, output_dims: &[usize]) -> ModelConfig {
        ModelConfig {
            num_fidelities: output_dims.len(),
            input_dim,
            latent_dims: vec![self.latent_dim; output_dims.len()],
            output_dims: output_dims.to_vec(),
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            activation: Activation::Tanh,
            covariance: self.covariance,
            init_posterior_std: self.init_posterior_std,
            init_noise_var: self.init_noise_var,
        }
    }
}

fn default_mc_samples() -> usize {
    20
}
fn default_test_size() -> usize {
    128
}
fn default_retrain_epochs() -> usize {
    500
}
fn default_inner_retrain_epochs() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub oracle: OracleSpec,
    #[serde(default)]
    pub model: ModelSettings,
    /// Training from scratch on the initial data.
    pub train: TrainConfig,
    /// Warm-started epochs after each batch.
    #[serde(default = "default_retrain_epochs")]
    pub retrain_epochs: usize,
    /// Warm-started epochs after each single query of a sequential strategy.
    #[serde(default = "default_inner_retrain_epochs")]
    pub inner_retrain_epochs: usize,
    pub budget: Cost,
    pub num_batches: usize,
    pub initial_counts: Vec<usize>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub test_seed: u64,
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    /// Write measured wall-clock seconds to the CSV (otherwise 0, keeping
    /// repeated runs byte-identical).
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    /// Desk-scale defaults for a problem: two fidelities, costs 1 and 3, budget 20.
    pub fn desk(oracle: OracleSpec, strategy: Strategy, seed: u64) -> Self {
        let initial_counts = match oracle.num_fidelities {
            3 => vec![10, 5, 2],
            m => {
                let mut c = vec![0; m];
                c[0] = 10;
                if m > 1 {
                    c[m - 1] = 2;
                }
                c
            }
        };
        Self {
            oracle,
            model: ModelSettings::default(),
            train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 3000,
                elbo_mc_samples: 1,
                prior_var: 1.0,
                seed: 0,
            },
            retrain_epochs: default_retrain_epochs(),
            inner_retrain_epochs: default_inner_retrain_epochs(),
            budget: Cost::integer(20),
            num_batches: 10,
            initial_counts,
            mc_samples: default_mc_samples(),
            optimizer: OptimizerConfig {
                restarts: 3,
                max_iters: 15,
                ..OptimizerConfig::default()
            },
            test_size: default_test_size(),
            test_seed: 12345,
            strategy,
            seed,
            record_wall_time: false,
        }
    }

    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ctx = path.display().to_string();
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::parse(ctx, e))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::parse(ctx, e))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = if path.extension().is_some_and(|e| e == "toml") {
            toml::to_string(self).map_err(|e| Error::parse("config", e))?
        } else {
            serde_json::to_string_pretty(self).map_err(|e| Error::parse("config", e))?
        };
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let ladder = self.oracle.ladder()?;
        if self.initial_counts.len() != ladder.num_fidelities() {
            return Err(Error::contract(format!(
                "initial_counts has {} entries for {} fidelities",
                self.initial_counts.len(),
                ladder.num_fidelities()
            )));
        }
        if self.mc_samples == 0 || self.test_size == 0 {
            return Err(Error::contract("mc_samples and test_size must be positive"));
        }
        self.cost_model()?;
        self.train.validate()?;
        self.optimizer.validate()
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        CostModel::new(self.oracle.ladder()?.lambdas, self.budget)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub seed: u64,
    pub batch_index: usize,
    /// Total cost of everything acquired after the initial data.
    pub accumulated_cost: Cost,
    pub nrmse: f64,
    /// Queries per fidelity in this batch.
    pub batch_counts: Vec<usize>,
    pub wall_seconds: f64,
    /// Queries of this batch in acquisition order.
    pub queries: Vec<Query>,
}

/// `‖p − t‖ / ‖t‖` over all entries (RMSE normalised by the RMS of the truth).
pub fn nrmse(predictions: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    if predictions.len() != truths.len()
        || predictions
            .iter()
            .zip(truths)
            .any(|(p, t)| p.len() != t.len())
    {
        return Err(Error::contract("predictions and truths differ in shape"));
    }
    let mut err = 0.0;
    let mut norm = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        for (a, b) in p.iter().zip(t) {
            err += (a - b) * (a - b);
            norm += b * b;
        }
    }
    if norm == 0.0 {
        return Err(Error::Domain("truths are all zero".into()));
    }
    Ok((err / norm).sqrt())
}

/// Uniform initial inputs, `counts[m]` examples at fidelity `m`.
pub fn init_dataset(oracle: &dyn SimulatorOracle, counts: &[usize], seed: u64) -> Result<Dataset> {
    if counts.len() != oracle.ladder().num_fidelities() {
        return Err(Error::contract(
            "one initial count per fidelity is required",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Dataset::new();
    for (m, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let x = oracle.domain().sample(&mut rng);
            data.push(query_example(
                oracle,
                &Query::new(x, Fidelity::from_index(m)),
            )?);
        }
    }
    Ok(data)
}

fn query_example(oracle: &dyn SimulatorOracle, q: &Query) -> Result<Example> {
    let (y, cost) = oracle.query(&q.x, q.fidelity)?;
    Ok(Example {
        x: q.x.clone(),
        fidelity: q.fidelity,
        y,
        cost: cost.to_f64(),
    })
}

/// Held-out inputs and top-fidelity reference fields on the evaluation mesh.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub inputs: Vec<Vec<f64>>,
    pub truths: Vec<Vec<f64>>,
}

impl TestSet {
    pub fn draw(oracle: &dyn SimulatorOracle, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = (0..size)
            .map(|_| oracle.domain().sample(&mut rng))
            .collect();
        let truths = inputs
            .iter()
            .map(|x| oracle.reference(x))
            .collect::<Result<_>>()?;
        Ok(Self { inputs, truths })
    }

    /// nRMSE of the model's top-fidelity mean interpolated to the evaluation mesh.
    pub fn evaluate(&self, model: &MfModel, oracle: &dyn SimulatorOracle) -> Result<f64> {
        let ladder = oracle.ladder();
        let pred = model.predict_mean_batch(&self.inputs, model.top_fidelity())?;
        let fields = (0..pred.nrows())
            .map(|i| {
                let row: Vec<f64> = pred.row(i).iter().copied().collect();
                interpolate(&row, ladder.top_mesh(), ladder.eval_mesh)
            })
            .collect::<Result<Vec<_>>>()?;
        nrmse(&fields, &self.truths)
    }
}

/// Everything a run carries between batches.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub model: MfModel,
    pub dataset: Dataset,
    pub accumulated_cost: Cost,
    pub batch_index: usize,
    pub nrmse: f64,
}

/// Shared, read-only context of one experiment.
pub struct Harness<'a> {
    pub config: &'a ExperimentConfig,
    pub oracle: &'a dyn SimulatorOracle,
    pub cost: CostModel,
    pub test: &'a TestSet,
}

fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng.random()
}

const TAG_INIT: u64 = 1;
const TAG_MODEL: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_MC: u64 = 4;
const TAG_RANDOM: u64 = 5;
const TAG_OPT: u64 = 6;

impl Harness<'_> {
    fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            ..self.config.train.clone()
        }
    }

    /// Builds and trains the initial model.
    pub fn initial_state(&self) -> Result<LoopState> {
        let cfg = self.config;
        let dataset = init_dataset(
            self.oracle,
            &cfg.initial_counts,
            derive_seed(cfg.seed, TAG_INIT, 0),
        )?;
        let ladder = self.oracle.ladder();
        let mcfg = cfg
            .model
            .model_config(self.oracle.input_dim(), &ladder.output_dims());
        let model = MfModel::new(mcfg, derive_seed(cfg.seed, TAG_MODEL, 0))?;
        let model = model.train(
            &dataset,
            &self.train_config(cfg.train.epochs, derive_seed(cfg.seed, TAG_TRAIN, 0)),
        )?;
        let nrmse = self.test.evaluate(&model, self.oracle)?;
        Ok(LoopState {
            model,
            dataset,
            accumulated_cost: Cost::zero(),
            batch_index: 0,
            nrmse,
        })
    }

    /// Acquires and learns from one batch.
    pub fn run_step(&self, state: LoopState, strategy: Strategy) -> Result<(LoopState, RunRecord)> {
        let started = Instant::now();
        let cfg = self.config;
        let batch = state.batch_index + 1;
        let mut model = state.model;
        let mut dataset = state.dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_RANDOM, batch as u64));
        let mc = McInputSet::draw(
            self.oracle.domain(),
            cfg.mc_samples,
            derive_seed(cfg.seed, TAG_MC, batch as u64),
        )?;
        let opt = OptimizerConfig {
            seed: derive_seed(cfg.seed, TAG_OPT, batch as u64),
            ..cfg.optimizer.clone()
        };
        let mut spent = Cost::zero();
        let mut queries: Vec<Query> = Vec::new();

        if strategy.is_sequential() {
            let mut step = 0;
            loop {
                let affordable = self.cost.affordable(spent);
                if affordable.is_empty() {
                    break;
                }
                let Some(q) =
                    self.pick_single(&model, strategy, &affordable, &mc, &opt, step, &mut rng)?
                else {
                    break;
                };
                spent += self.cost.lambda(q.fidelity);
                dataset.push(query_example(self.oracle, &q)?);
                queries.push(q);
                model = model.train(
                    &dataset,
                    &self.train_config(
                        cfg.inner_retrain_epochs,
                        derive_seed(cfg.seed, TAG_TRAIN, (batch * 1000 + step) as u64),
                    ),
                )?;
                step += 1;
            }
        } else {
            let planned = match strategy {
                Strategy::BmfalBc => {
                    let plan = planner::plan_batch(
                        &model,
                        self.oracle.domain(),
                        &self.cost,
                        &opt,
                        &mc,
                        PlanMode::Standard,
                    )?;
                    plan.queries()
                }
                _ => self.random_batch(&mut rng),
            };
            for q in planned {
                spent += self.cost.lambda(q.fidelity);
                queries.push(q);
            }
            // the plan is fixed before any query runs
            for q in &queries {
                dataset.push(query_example(self.oracle, q)?);
            }
            if !queries.is_empty() {
                model = model.train(
                    &dataset,
                    &self.train_config(
                        cfg.retrain_epochs,
                        derive_seed(cfg.seed, TAG_TRAIN, (batch * 1000) as u64),
                    ),
                )?;
            }
        }
        if spent > self.cost.budget {
            return Err(Error::BudgetViolation {
                cost: spent.to_string(),
                remaining: self.cost.budget.to_string(),
            });
        }

        let nrmse = if queries.is_empty() {
            state.nrmse
        } else {
            self.test.evaluate(&model, self.oracle)?
        };
        let mut counts = vec![0; self.cost.num_fidelities()];
        for q in &queries {
            counts[q.fidelity.index()] += 1;
        }
        let accumulated_cost = state.accumulated_cost + spent;
        let record = RunRecord {
            strategy,
            seed: cfg.seed,
            batch_index: batch,
            accumulated_cost,
            nrmse,
            batch_counts: counts,
            wall_seconds: started.elapsed().as_secs_f64(),
            queries,
        };
        Ok((
            LoopState {
                model,
                dataset,
                accumulated_cost,
                batch_index: batch,
                nrmse,
            },
            record,
        ))
    }

    fn random_batch(&self, rng: &mut ChaCha8Rng) -> Vec<Query> {
        let mut spent = Cost::zero();
        let mut out = Vec::new();
        loop {
            let affordable = self.cost.affordable(spent);
            if affordable.is_empty() {
                return out;
            }
            let f = affordable[rng.random_range(0..affordable.len())];
            let x = self.oracle.domain().sample(rng);
            spent += self.cost.lambda(f);
            out.push(Query::new(x, f));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn pick_single(
        &self,
        model: &MfModel,
        strategy: Strategy,
        affordable: &[Fidelity],
        mc: &McInputSet,
        opt: &OptimizerConfig,
        step: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Query>> {
        let fidelities: Vec<Fidelity> = match strategy {
            Strategy::DmfalBcRf | Strategy::MfalBcRf => {
                vec![affordable[rng.random_range(0..affordable.len())]]
            }
            _ => affordable.to_vec(),
        };
        // random-fidelity variants maximise the unweighted score
        let weighted = matches!(strategy, Strategy::DmfalBc | Strategy::MfalBc);
        let lambdas: Vec<f64> = self.cost.lambdas.iter().map(|l| l.to_f64()).collect();
        let weight = |f: Fidelity| {
            if weighted {
                1.0 / lambdas[f.index()]
            } else {
                1.0
            }
        };
        let domain = self.oracle.domain();
        let best = match strategy {
            Strategy::DmfalBc | Strategy::DmfalBcRf => {
                let ctx = DeltaContext::new(model)?;
                best_over_fidelities(&fidelities, domain, opt, step, |f, x| {
                    dmfal_mi(&ctx, f, x)
                        .map(|v| v * weight(f))
                        .unwrap_or(f64::NAN)
                })
            }
            _ => {
                let inc = IncrementalMi::new(model, mc)?;
                best_over_fidelities(&fidelities, domain, opt, step, |f, x| {
                    inc.gain(&Query::new(x.to_vec(), f))
                        .map(|v| v * weight(f))
                        .unwrap_or(f64::NAN)
                })
            }
        };
        Ok(best.map(|(f, r)| Query::new(r.x, f)))
    }
}

/// Paths of the artifacts written by [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub csv: PathBuf,
    pub jsonl: PathBuf,
    /// Final model checkpoint.
    pub model: PathBuf,
    /// Final training set, initial data included.
    pub dataset: PathBuf,
}

pub fn artifact_paths(out_dir: &Path, strategy: Strategy, seed: u64) -> RunArtifacts {
    let stem = format!("{}_seed{}", strategy.name().to_ascii_lowercase(), seed);
    RunArtifacts {
        csv: out_dir.join(format!("{stem}.csv")),
        jsonl: out_dir.join(format!("{stem}.jsonl")),
        model: out_dir.join(format!("{stem}_model.json")),
        dataset: out_dir.join(format!("{stem}_data.jsonl")),
    }
}

pub fn csv_header(num_fidelities: usize) -> String {
    let mut h = String::from("strategy,seed,batch_index,accumulated_cost,nrmse,wall_seconds");
    for m in 1..=num_fidelities {
        h.push_str(&format!(",n_fid_{m}"));
    }
    h
}

pub fn csv_row(r: &RunRecord, with_wall_time: bool) -> String {
    let mut row = format!(
        "{},{},{},{},{},{}",
        r.strategy,
        r.seed,
        r.batch_index,
        r.accumulated_cost.to_f64(),
        r.nrmse,
        if with_wall_time { r.wall_seconds } else { 0.0 }
    );
    for c in &r.batch_counts {
        row.push_str(&format!(",{c}"));
    }
    row
}

/// Runs the full loop: baseline record (batch 0) plus `num_batches` batches.
/// When `out_dir` is given, writes the records as CSV and JSON lines together
/// with the final model and dataset.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let oracle = config.oracle.build()?;
    let test = TestSet::draw(oracle.as_ref(), config.test_size, config.test_seed)?;
    let harness = Harness {
        config,
        oracle: oracle.as_ref(),
        cost: config.cost_model()?,
        test: &test,
    };
    let started = Instant::now();
    let mut state = harness.initial_state()?;
    let m = harness.cost.num_fidelities();
    let mut records = vec![RunRecord {
        strategy: config.strategy,
        seed: config.seed,
        batch_index: 0,
        accumulated_cost: Cost::zero(),
        nrmse: state.nrmse,
        batch_counts: vec![0; m],
        wall_seconds: started.elapsed().as_secs_f64(),
        queries: Vec::new(),
    }];
    for _ in 0..config.num_batches {
        let (next, record) = harness.run_step(state, config.strategy)?;
        state = next;
        records.push(record);
    }
    if let Some(dir) = out_dir {
        write_artifacts(dir, config, &records, &state)?;
    }
    Ok(records)
}

fn write_artifacts(
    dir: &Path,
    config: &ExperimentConfig,
    records: &[RunRecord],
    state: &LoopState,
) -> Result<RunArtifacts> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = artifact_paths(dir, config.strategy, config.seed);
    let mut csv = csv_header(state.model.num_fidelities());
    csv.push('\n');
    for r in records {
        csv.push_str(&csv_row(r, config.record_wall_time));
        csv.push('\n');
    }
    fs::write(&paths.csv, csv).map_err(|e| Error::io(&paths.csv, e))?;
    let mut f = fs::File::create(&paths.jsonl).map_err(|e| Error::io(&paths.jsonl, e))?;
    for r in records {
        let mut r = r.clone();
        if !config.record_wall_time {
            r.wall_seconds = 0.0;
        }
        let line = serde_json::to_string(&r).map_err(|e| Error::parse("record", e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&paths.jsonl, e))?;
    }
    state.model.save(&paths.model)?;
    state.dataset.write_jsonl(&paths.dataset)?;
    Ok(paths)
}
