//! Deep multi-fidelity surrogate with a Gaussian posterior on last-layer weights.
//!
//! For fidelity `m` (1-based in prose, 0-based in code):
//!
//! ```text
//! x_m = [x; h_{m-1}(x)],   h_m(x) = W_m φ_m(x_m),   y_m = A_m h_m(x) + ξ_m,  ξ_m ~ N(0, τ_m I)
//! ```
//!
//! `φ_m` is a small tanh network (point-estimated), `A_m` and `τ_m` are
//! point-estimated, and `q(vec W_m) = N(μ_m, L_m L_mᵀ)` is learned by maximising
//! the evidence lower bound with reparameterised draws `vec W_m = μ_m + L_m ε`.
//! `vec` is column-major, matching `nalgebra` storage.
//!
//! All parameters live in one flat vector described by a [`ParamLayout`], so
//! the optimiser and the finite-difference checks see a single `&[f64]`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tape::{softplus_inverse, softplus_scalar, Tape, Var};
use crate::types::Fidelity;

/// Diagonal value used to represent an exactly zero Cholesky entry.
const ZERO_DIAG_RAW: f64 = -1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Linear features; used for closed-form test models.
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }
}

/// Parameterisation of the posterior covariance of `vec W_m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Full,
    Diagonal,
}

fn default_hidden_layers() -> usize {
    2
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_covariance() -> CovarianceKind {
    CovarianceKind::Full
}
fn default_init_posterior_std() -> f64 {
    0.1
}
fn default_init_noise_var() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_fidelities: usize,
    pub input_dim: usize,
    pub latent_dims: Vec<usize>,
    pub output_dims: Vec<usize>,
    pub hidden_width: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_covariance")]
    pub covariance: CovarianceKind,
    /// Initial diagonal of every `L_m`.
    #[serde(default = "default_init_posterior_std")]
    pub init_posterior_std: f64,
    #[serde(default = "default_init_noise_var")]
    pub init_noise_var: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.num_fidelities;
        if m == 0 || self.input_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::contract(
                "num_fidelities, input_dim, hidden_width and hidden_layers must be positive",
            ));
        }
        if self.latent_dims.len() != m || self.output_dims.len() != m {
            return Err(Error::contract(format!(
                "latent_dims ({}) and output_dims ({}) must both have length {m}",
                self.latent_dims.len(),
                self.output_dims.len()
            )));
        }
        if self
            .latent_dims
            .iter()
            .chain(&self.output_dims)
            .any(|&v| v == 0)
        {
            return Err(Error::contract(
                "latent and output dimensions must be positive",
            ));
        }
        if !(self.init_posterior_std >= 0.0) || !(self.init_noise_var > 0.0) {
            return Err(Error::contract(
                "init_posterior_std >= 0 and init_noise_var > 0",
            ));
        }
        Ok(())
    }

    /// Input dimension of the fidelity-`m` network: `r + k_{m-1}` (`k_0 = 0`).
    pub fn network_input_dim(&self, m: usize) -> usize {
        self.input_dim + if m == 0 { 0 } else { self.latent_dims[m - 1] }
    }

    /// Length of `vec W_m`.
    pub fn weight_dim(&self, m: usize) -> usize {
        self.latent_dims[m] * self.hidden_width
    }

    pub fn total_weight_dim(&self) -> usize {
        (0..self.num_fidelities).map(|m| self.weight_dim(m)).sum()
    }
}

/// Location of one tensor inside the flat parameter vector (column-major).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    FeatureWeight,
    FeatureBias,
    PosteriorMean,
    CholDiag,
    CholOffDiag,
    Projection,
    LogNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityLayout {
    /// `(weight out x in, bias 1 x out)` per hidden layer.
    pub hidden: Vec<(Block, Block)>,
    pub mean: Block,
    pub chol_diag: Block,
    pub chol_off: Block,
    pub projection: Block,
    pub log_noise: Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub fidelities: Vec<FidelityLayout>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let b = Block { offset, rows, cols };
            offset += rows * cols;
            b
        };
        let w = cfg.hidden_width;
        let mut fidelities = Vec::with_capacity(cfg.num_fidelities);
        for m in 0..cfg.num_fidelities {
            let mut hidden = Vec::with_capacity(cfg.hidden_layers);
            let mut fan_in = cfg.network_input_dim(m);
            for _ in 0..cfg.hidden_layers {
                let wb = take(w, fan_in);
                let bb = take(1, w);
                hidden.push((wb, bb));
                fan_in = w;
            }
            let p = cfg.weight_dim(m);
            let mean = take(p, 1);
            let chol_diag = take(p, 1);
            let off_len = match cfg.covariance {
                CovarianceKind::Full => p * (p - 1) / 2,
                CovarianceKind::Diagonal => 0,
            };
            let chol_off = take(off_len, 1);
            let projection = take(cfg.output_dims[m], cfg.latent_dims[m]);
            let log_noise = take(1, 1);
            fidelities.push(FidelityLayout {
                hidden,
                mean,
                chol_diag,
                chol_off,
                projection,
                log_noise,
            });
        }
        Self {
            fidelities,
            total: offset,
        }
    }

    /// Every block tagged with its fidelity and group.
    pub fn blocks(&self) -> Vec<(usize, ParamGroup, Block)> {
        let mut out = Vec::new();
        for (m, f) in self.fidelities.iter().enumerate() {
            for &(w, b) in &f.hidden {
                out.push((m, ParamGroup::FeatureWeight, w));
                out.push((m, ParamGroup::FeatureBias, b));
            }
            out.push((m, ParamGroup::PosteriorMean, f.mean));
            out.push((m, ParamGroup::CholDiag, f.chol_diag));
            out.push((m, ParamGroup::CholOffDiag, f.chol_off));
            out.push((m, ParamGroup::Projection, f.projection));
            out.push((m, ParamGroup::LogNoise, f.log_noise));
        }
        out
    }
}

fn default_mc_samples() -> usize {
    1
}
fn default_prior_var() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_mc_samples")]
    pub elbo_mc_samples: usize,
    #[serde(default = "default_prior_var")]
    pub prior_var: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 1000,
            elbo_mc_samples: 1,
            prior_var: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.elbo_mc_samples == 0 || !(self.prior_var > 0.0) {
            return Err(Error::contract(
                "learning_rate, elbo_mc_samples and prior_var must be positive",
            ));
        }
        Ok(())
    }
}

/// Reparameterisation noise: one `ε_m` column per fidelity per Monte-Carlo sample.
pub type WeightNoise = Vec<Vec<DVector<f64>>>;

/// Value and gradient of the ELBO for fixed noise.
#[derive(Debug, Clone)]
pub struct ElboEvaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Data arranged for batched forward passes: rows sorted by fidelity,
/// highest first, so the rows that need fidelity `m` form a prefix.
struct PreparedData {
    x: DMatrix<f64>,
    /// `prefix[m]` = number of examples with fidelity `>= m`.
    prefix: Vec<usize>,
    /// Targets of examples with fidelity exactly `m` (rows `prefix[m+1]..prefix[m]`).
    y: Vec<DMatrix<f64>>,
}

impl PreparedData {
    fn new(cfg: &ModelConfig, data: &Dataset) -> Result<Self> {
        data.validate(cfg.input_dim, &cfg.output_dims)?;
        let m_count = cfg.num_fidelities;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(data.examples[i].fidelity.index()));
        let n = data.len();
        let x = DMatrix::from_fn(n, cfg.input_dim, |i, j| data.examples[order[i]].x[j]);
        let counts = data.counts(m_count);
        let mut prefix = vec![0; m_count + 1];
        for m in (0..m_count).rev() {
            prefix[m] = prefix[m + 1] + counts[m];
        }
        let y = (0..m_count)
            .map(|m| {
                let start = prefix[m + 1];
                DMatrix::from_fn(counts[m], cfg.output_dims[m], |i, j| {
                    data.examples[order[start + i]].y[j]
                })
            })
            .collect();
        Ok(Self { x, prefix, y })
    }
}

/// Tape handles for the parameter blocks of one fidelity.
struct FidelityVars {
    hidden: Vec<(Var, Var)>,
    mean: Var,
    chol_diag: Var,
    chol_off: Var,
    projection: Var,
    log_noise: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfModel {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl MfModel {
    /// Random initialisation (seeded).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let diag_raw = if config.init_posterior_std > 0.0 {
            softplus_inverse(config.init_posterior_std)
        } else {
            ZERO_DIAG_RAW
        };
        for (m, f) in layout.fidelities.iter().enumerate() {
            for &(w, _) in &f.hidden {
                let std = (1.0 / w.cols as f64).sqrt();
                for v in &mut params[w.range()] {
                    *v = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let std = (1.0 / config.hidden_width as f64).sqrt();
            for v in &mut params[f.mean.range()] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
            params[f.chol_diag.range()].fill(diag_raw);
            let std = (1.0 / config.latent_dims[m] as f64).sqrt();
            for v in &mut params[f.projection.range()] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
            params[f.log_noise.offset] = config.init_noise_var.ln();
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_fidelities(&self) -> usize {
        self.config.num_fidelities
    }

    pub fn top_fidelity(&self) -> Fidelity {
        Fidelity::from_index(self.config.num_fidelities - 1)
    }

    fn block(&self, b: Block) -> DMatrix<f64> {
        DMatrix::from_column_slice(b.rows, b.cols, &self.params[b.range()])
    }

    fn check_fidelity(&self, fidelity: Fidelity) -> Result<usize> {
        let m = fidelity.index();
        if m >= self.config.num_fidelities {
            return Err(Error::contract(format!(
                "fidelity {fidelity} out of range 1..={}",
                self.config.num_fidelities
            )));
        }
        Ok(m)
    }

    pub fn posterior_mean(&self, m: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.params[self.layout.fidelities[m].mean.range()])
    }

    /// `L_m` with `Σ_m = L_m L_mᵀ`.
    pub fn posterior_chol(&self, m: usize) -> DMatrix<f64> {
        let f = &self.layout.fidelities[m];
        let p = f.mean.rows;
        let diag = &self.params[f.chol_diag.range()];
        let off = &self.params[f.chol_off.range()];
        let mut l = DMatrix::zeros(p, p);
        let mut idx = 0;
        for j in 0..p {
            l[(j, j)] = softplus_scalar(diag[j]);
            if self.config.covariance == CovarianceKind::Full {
                for i in (j + 1)..p {
                    l[(i, j)] = off[idx];
                    idx += 1;
                }
            }
        }
        l
    }

    /// Overwrites `μ_m` and `L_m`. `chol` must be lower triangular with a
    /// non-negative diagonal (zero entries are represented exactly).
    pub fn set_posterior(
        &mut self,
        m: usize,
        mean: &DVector<f64>,
        chol: &DMatrix<f64>,
    ) -> Result<()> {
        let f = self.layout.fidelities[m].clone();
        let p = f.mean.rows;
        if mean.len() != p || chol.shape() != (p, p) {
            return Err(Error::contract(format!(
                "posterior for fidelity {} must have dimension {p}",
                m + 1
            )));
        }
        self.params[f.mean.range()].copy_from_slice(mean.as_slice());
        let mut idx = 0;
        for j in 0..p {
            let d = chol[(j, j)];
            if d < 0.0 {
                return Err(Error::contract("Cholesky diagonal must be non-negative"));
            }
            self.params[f.chol_diag.offset + j] = if d == 0.0 {
                ZERO_DIAG_RAW
            } else {
                softplus_inverse(d)
            };
            for i in (j + 1)..p {
                match self.config.covariance {
                    CovarianceKind::Full => {
                        self.params[f.chol_off.offset + idx] = chol[(i, j)];
                        idx += 1;
                    }
                    CovarianceKind::Diagonal if chol[(i, j)] != 0.0 => {
                        return Err(Error::contract(
                            "diagonal covariance model cannot hold off-diagonal entries",
                        ));
                    }
                    CovarianceKind::Diagonal => {}
                }
            }
        }
        Ok(())
    }

    pub fn projection(&self, m: usize) -> DMatrix<f64> {
        self.block(self.layout.fidelities[m].projection)
    }

    pub fn set_projection(&mut self, m: usize, a: &DMatrix<f64>) -> Result<()> {
        let b = self.layout.fidelities[m].projection;
        if a.shape() != (b.rows, b.cols) {
            return Err(Error::contract("projection shape mismatch"));
        }
        self.params[b.range()].copy_from_slice(a.as_slice());
        Ok(())
    }

    pub fn noise_var(&self, m: usize) -> f64 {
        self.params[self.layout.fidelities[m].log_noise.offset].exp()
    }

    pub fn set_noise_var(&mut self, m: usize, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::Domain(format!(
                "noise variance must be positive, got {tau}"
            )));
        }
        self.params[self.layout.fidelities[m].log_noise.offset] = tau.ln();
        Ok(())
    }

    /// Hidden layer `(weight, bias)` of fidelity `m`.
    pub fn hidden_layer(&self, m: usize, layer: usize) -> (DMatrix<f64>, DVector<f64>) {
        let (w, b) = self.layout.fidelities[m].hidden[layer];
        (
            self.block(w),
            DVector::from_column_slice(&self.params[b.range()]),
        )
    }

    pub fn set_hidden_layer(
        &mut self,
        m: usize,
        layer: usize,
        weight: &DMatrix<f64>,
        bias: &DVector<f64>,
    ) -> Result<()> {
        let (w, b) = self.layout.fidelities[m].hidden[layer];
        if weight.shape() != (w.rows, w.cols) || bias.len() != b.cols {
            return Err(Error::contract("hidden layer shape mismatch"));
        }
        self.params[w.range()].copy_from_slice(weight.as_slice());
        self.params[b.range()].copy_from_slice(bias.as_slice());
        Ok(())
    }

    /// `W_m` at the posterior mean, `k_m x width`.
    pub fn mean_weights(&self) -> Vec<DMatrix<f64>> {
        (0..self.config.num_fidelities)
            .map(|m| {
                DMatrix::from_column_slice(
                    self.config.latent_dims[m],
                    self.config.hidden_width,
                    &self.params[self.layout.fidelities[m].mean.range()],
                )
            })
            .collect()
    }

    /// Reparameterised draw `vec W_m = μ_m + L_m ε`, one matrix per fidelity.
    pub fn sample_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DMatrix<f64>> {
        (0..self.config.num_fidelities)
            .map(|m| {
                let p = self.config.weight_dim(m);
                let eps = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let w = self.posterior_mean(m) + self.posterior_chol(m) * eps;
                DMatrix::from_column_slice(
                    self.config.latent_dims[m],
                    self.config.hidden_width,
                    w.as_slice(),
                )
            })
            .collect()
    }

    /// `φ_m(x_m)` for one input row.
    fn features(&self, m: usize, input: &DVector<f64>) -> DVector<f64> {
        let mut z = input.clone();
        for layer in 0..self.config.hidden_layers {
            let (w, b) = self.hidden_layer(m, layer);
            z = (w * z + b).map(|v| self.config.activation.apply(v));
        }
        z
    }

    fn check_weights(&self, weights: &[DMatrix<f64>]) -> Result<()> {
        if weights.len() != self.config.num_fidelities {
            return Err(Error::contract(format!(
                "expected {} weight matrices, got {}",
                self.config.num_fidelities,
                weights.len()
            )));
        }
        for (m, w) in weights.iter().enumerate() {
            if w.shape() != (self.config.latent_dims[m], self.config.hidden_width) {
                return Err(Error::contract(format!(
                    "weight {} has shape {:?}, expected {:?}",
                    m + 1,
                    w.shape(),
                    (self.config.latent_dims[m], self.config.hidden_width)
                )));
            }
        }
        Ok(())
    }

    /// `h_1(x), …, h_M(x)` for given last-layer weights.
    pub fn forward_latents(
        &self,
        weights: &[DMatrix<f64>],
        x: &[f64],
    ) -> Result<Vec<DVector<f64>>> {
        self.check_weights(weights)?;
        if x.len() != self.config.input_dim {
            return Err(Error::contract(format!(
                "input length {} != {}",
                x.len(),
                self.config.input_dim
            )));
        }
        let mut out: Vec<DVector<f64>> = Vec::with_capacity(self.config.num_fidelities);
        for m in 0..self.config.num_fidelities {
            let mut input = DVector::zeros(self.config.network_input_dim(m));
            input.rows_mut(0, x.len()).copy_from_slice(x);
            if m > 0 {
                input
                    .rows_mut(x.len(), self.config.latent_dims[m - 1])
                    .copy_from(&out[m - 1]);
            }
            let phi = self.features(m, &input);
            out.push(&weights[m] * phi);
        }
        Ok(out)
    }

    /// Posterior-mean output `A_m h_m(x; μ)`.
    pub fn predict_mean(&self, x: &[f64], fidelity: Fidelity) -> Result<DVector<f64>> {
        let m = self.check_fidelity(fidelity)?;
        let h = self.forward_latents(&self.mean_weights(), x)?;
        Ok(self.projection(m) * &h[m])
    }

    /// Posterior-mean outputs for many inputs (rows of the result).
    pub fn predict_mean_batch(&self, xs: &[Vec<f64>], fidelity: Fidelity) -> Result<DMatrix<f64>> {
        let m = self.check_fidelity(fidelity)?;
        let weights = self.mean_weights();
        let a = self.projection(m);
        let mut out = DMatrix::zeros(xs.len(), a.nrows());
        for (i, x) in xs.iter().enumerate() {
            let h = self.forward_latents(&weights, x)?;
            out.row_mut(i).copy_from(&(&a * &h[m]).transpose());
        }
        Ok(out)
    }

    fn load_vars(&self, tape: &mut Tape) -> Vec<FidelityVars> {
        self.layout
            .fidelities
            .iter()
            .map(|f| FidelityVars {
                hidden: f
                    .hidden
                    .iter()
                    .map(|&(w, b)| (tape.input(self.block(w)), tape.input(self.block(b))))
                    .collect(),
                mean: tape.input(self.block(f.mean)),
                chol_diag: tape.input(self.block(f.chol_diag)),
                chol_off: tape.input(self.block(f.chol_off)),
                projection: tape.input(self.block(f.projection)),
                log_noise: tape.input(self.block(f.log_noise)),
            })
            .collect()
    }

    fn tape_features(&self, tape: &mut Tape, fv: &FidelityVars, input: Var) -> Var {
        let mut z = input;
        for &(w, b) in &fv.hidden {
            let lin = tape.matmul_nt(z, w);
            let pre = tape.add_row(lin, b);
            z = match self.config.activation {
                Activation::Tanh => tape.tanh(pre),
                Activation::Identity => pre,
            };
        }
        z
    }

    /// Batched latent forward pass on the tape. `rows[m]` is the number of
    /// leading rows that continue to fidelity `m`; it must be nonincreasing.
    fn tape_latents(
        &self,
        tape: &mut Tape,
        vars: &[FidelityVars],
        x: Var,
        weights: &[Var],
        rows: &[usize],
    ) -> Vec<Var> {
        let mut hs: Vec<Var> = Vec::with_capacity(vars.len());
        for m in 0..vars.len() {
            let input = if m == 0 {
                if rows[0] == tape.value(x).nrows() {
                    x
                } else {
                    tape.rows(x, 0, rows[0])
                }
            } else {
                let xs = tape.rows(x, 0, rows[m]);
                let hp = tape.rows(hs[m - 1], 0, rows[m]);
                tape.hcat(xs, hp)
            };
            let phi = self.tape_features(tape, &vars[m], input);
            hs.push(tape.matmul_nt(phi, weights[m]));
        }
        hs
    }

    fn tape_chol(&self, tape: &mut Tape, fv: &FidelityVars) -> (Var, Var) {
        let diag = tape.softplus(fv.chol_diag);
        let l = match self.config.covariance {
            CovarianceKind::Full => tape.lower_tri(diag, fv.chol_off),
            CovarianceKind::Diagonal => tape.diag(diag),
        };
        (diag, l)
    }

    /// Draws reparameterisation noise for `samples` Monte-Carlo samples.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R, samples: usize) -> WeightNoise {
        (0..samples)
            .map(|_| {
                (0..self.config.num_fidelities)
                    .map(|m| {
                        DVector::from_fn(self.config.weight_dim(m), |_, _| {
                            rng.sample::<f64, _>(StandardNormal)
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// `KL(q(W_m) || N(0, prior_var I))` summed over fidelities.
    pub fn kl_divergence(&self, prior_var: f64) -> f64 {
        let mut total = 0.0;
        for m in 0..self.config.num_fidelities {
            let p = self.config.weight_dim(m) as f64;
            let mu = self.posterior_mean(m);
            let l = self.posterior_chol(m);
            let logdiag: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
            total += 0.5
                * ((l.norm_squared() + mu.norm_squared()) / prior_var - p + p * prior_var.ln()
                    - 2.0 * logdiag);
        }
        total
    }

    /// ELBO value and gradient with respect to every parameter, for fixed noise.
    pub fn elbo_with_noise(
        &self,
        data: &Dataset,
        noise: &WeightNoise,
        prior_var: f64,
    ) -> Result<ElboEvaluation> {
        let prepared = PreparedData::new(&self.config, data)?;
        self.elbo_prepared(&prepared, noise, prior_var)
    }

    fn elbo_prepared(
        &self,
        data: &PreparedData,
        noise: &WeightNoise,
        prior_var: f64,
    ) -> Result<ElboEvaluation> {
        if noise.is_empty() {
            return Err(Error::contract("at least one noise sample is required"));
        }
        let cfg = &self.config;
        let mut tape = Tape::new();
        let vars = self.load_vars(&mut tape);
        let mut constant = 0.0;
        let mut terms: Vec<(Var, String)> = Vec::new();

        // KL terms
        let mut chols = Vec::with_capacity(vars.len());
        for (m, fv) in vars.iter().enumerate() {
            let (diag, l) = self.tape_chol(&mut tape, fv);
            chols.push(l);
            let p = cfg.weight_dim(m) as f64;
            let lsq = tape.sum_sq(l);
            let musq = tape.sum_sq(fv.mean);
            let quad = tape.add(lsq, musq);
            let quad = tape.scale(quad, -0.5 / prior_var);
            let logd = tape.log(diag);
            let logd = tape.sum(logd);
            let kl_neg = tape.add(quad, logd);
            constant += -0.5 * (p * prior_var.ln() - p);
            terms.push((kl_neg, format!("KL at fidelity {}", m + 1)));
        }

        let n = data.x.nrows();
        if n > 0 {
            let x = tape.input(data.x.clone());
            let inv_s = 1.0 / noise.len() as f64;
            for sample in noise {
                let mut weights = Vec::with_capacity(vars.len());
                for (m, fv) in vars.iter().enumerate() {
                    let eps = tape.input(DMatrix::from_column_slice(
                        sample[m].len(),
                        1,
                        sample[m].as_slice(),
                    ));
                    let le = tape.matmul(chols[m], eps);
                    let wv = tape.add(fv.mean, le);
                    weights.push(tape.reshape(wv, cfg.latent_dims[m], cfg.hidden_width));
                }
                let hs = self.tape_latents(&mut tape, &vars, x, &weights, &data.prefix);
                for (m, fv) in vars.iter().enumerate() {
                    let count = data.y[m].nrows();
                    if count == 0 {
                        continue;
                    }
                    let start = data.prefix[m + 1];
                    let h = tape.rows(hs[m], start, count);
                    let pred = tape.matmul_nt(h, fv.projection);
                    let y = tape.input(data.y[m].clone());
                    let res = tape.sub(y, pred);
                    let sse = tape.sum_sq(res);
                    let nd = (count * cfg.output_dims[m]) as f64;
                    let neg_log_noise = tape.scale(fv.log_noise, -1.0);
                    let prec = tape.exp(neg_log_noise);
                    let fit = tape.scale_by(sse, prec);
                    let fit = tape.scale(fit, -0.5 * inv_s);
                    let norm = tape.scale(fv.log_noise, -0.5 * nd * inv_s);
                    let ll = tape.add(fit, norm);
                    constant += -0.5 * nd * (2.0 * PI).ln() * inv_s;
                    terms.push((ll, format!("log-likelihood at fidelity {}", m + 1)));
                }
            }
        }

        for (v, name) in &terms {
            if !tape.scalar(*v).is_finite() {
                return Err(Error::Numerical(format!("{name} is not finite")));
            }
        }
        let mut total = terms[0].0;
        for (v, _) in &terms[1..] {
            total = tape.add(total, *v);
        }
        let value = tape.scalar(total) + constant;
        let grads = tape.backward(total, DMatrix::from_element(1, 1, 1.0));
        let mut gradient = vec![0.0; self.layout.total];
        let mut put = |v: Var, b: Block| {
            if let Some(g) = grads.get(v) {
                gradient[b.range()].copy_from_slice(g.as_slice());
            }
        };
        for (fv, fl) in vars.iter().zip(&self.layout.fidelities) {
            for (&(wv, bv), &(wb, bb)) in fv.hidden.iter().zip(&fl.hidden) {
                put(wv, wb);
                put(bv, bb);
            }
            put(fv.mean, fl.mean);
            put(fv.chol_diag, fl.chol_diag);
            put(fv.chol_off, fl.chol_off);
            put(fv.projection, fl.projection);
            put(fv.log_noise, fl.log_noise);
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("ELBO gradient is not finite".into()));
        }
        Ok(ElboEvaluation { value, gradient })
    }

    /// Monte-Carlo ELBO estimate with `samples` reparameterised draws.
    pub fn elbo<R: Rng + ?Sized>(
        &self,
        data: &Dataset,
        rng: &mut R,
        samples: usize,
        prior_var: f64,
    ) -> Result<f64> {
        let noise = self.draw_noise(rng, samples.max(1));
        Ok(self.elbo_with_noise(data, &noise, prior_var)?.value)
    }

    /// Maximises the ELBO with Adam, warm-starting from the current parameters.
    ///
    /// If the objective becomes non-finite the run restarts once from the
    /// initial parameters at half the learning rate. The returned model never
    /// has a lower fixed-seed ELBO than the input.
    pub fn train(&self, data: &Dataset, cfg: &TrainConfig) -> Result<MfModel> {
        cfg.validate()?;
        if cfg.epochs == 0 {
            return Ok(self.clone());
        }
        let prepared = PreparedData::new(&self.config, data)?;
        let trained = match self.adam(&prepared, cfg, cfg.learning_rate) {
            Ok(m) => m,
            Err(Error::Numerical(_)) => self.adam(&prepared, cfg, 0.5 * cfg.learning_rate)?,
            Err(e) => return Err(e),
        };
        let eval_samples = cfg.elbo_mc_samples.max(8);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_E7A1_u64);
        let noise = self.draw_noise(&mut eval_rng, eval_samples);
        let before = self.elbo_prepared(&prepared, &noise, cfg.prior_var)?.value;
        let after = trained
            .elbo_prepared(&prepared, &noise, cfg.prior_var)?
            .value;
        if after >= before {
            Ok(trained)
        } else {
            Ok(self.clone())
        }
    }

    fn adam(&self, data: &PreparedData, cfg: &TrainConfig, lr: f64) -> Result<MfModel> {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let mut model = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = model.params.len();
        let mut m1 = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        for t in 1..=cfg.epochs {
            let noise = model.draw_noise(&mut rng, cfg.elbo_mc_samples);
            let eval = model.elbo_prepared(data, &noise, cfg.prior_var)?;
            if !eval.value.is_finite() {
                return Err(Error::Numerical(format!("ELBO diverged at epoch {t}")));
            }
            let c1 = 1.0 - BETA1.powi(t as i32);
            let c2 = 1.0 - BETA2.powi(t as i32);
            for i in 0..n {
                let g = eval.gradient[i];
                m1[i] = BETA1 * m1[i] + (1.0 - BETA1) * g;
                m2[i] = BETA2 * m2[i] + (1.0 - BETA2) * g * g;
                // ascent
                model.params[i] += lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + EPS);
            }
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Numerical(format!(
                    "parameters diverged at epoch {t}"
                )));
            }
        }
        Ok(model)
    }

    /// Jacobian of `h_m(x)` with respect to `vec W_1, …, vec W_M` (stacked,
    /// column-major per matrix) evaluated at the posterior mean. One reverse
    /// sweep per latent coordinate.
    pub fn latent_jacobian_tape(&self, x: &[f64], fidelity: Fidelity) -> Result<DMatrix<f64>> {
        let m = self.check_fidelity(fidelity)?;
        if x.len() != self.config.input_dim {
            return Err(Error::contract("input length mismatch"));
        }
        let cfg = &self.config;
        let mut tape = Tape::new();
        let vars = self.load_vars(&mut tape);
        let xv = tape.input(DMatrix::from_row_slice(1, x.len(), x));
        let weights: Vec<Var> = self
            .mean_weights()
            .into_iter()
            .map(|w| tape.input(w))
            .collect();
        // only fidelities up to m matter
        let hs = self.tape_latents(&mut tape, &vars[..=m], xv, &weights[..=m], &vec![1; m + 1]);
        let k = cfg.latent_dims[m];
        let total = cfg.total_weight_dim();
        let mut jac = DMatrix::zeros(k, total);
        for c in 0..k {
            let mut seed = DMatrix::zeros(1, k);
            seed[(0, c)] = 1.0;
            let grads = tape.backward(hs[m], seed);
            let mut col = 0;
            for (j, &wv) in weights.iter().enumerate() {
                let pj = cfg.weight_dim(j);
                if j <= m {
                    if let Some(g) = grads.get(wv) {
                        for (i, v) in g.as_slice().iter().enumerate() {
                            jac[(c, col + i)] = *v;
                        }
                    }
                }
                col += pj;
            }
        }
        Ok(jac)
    }

    /// Writes a self-describing JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())
            .map_err(|e| Error::parse("checkpoint", e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Self::from_checkpoint(ckpt)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .layout
            .blocks()
            .into_iter()
            .enumerate()
            .map(|(i, (m, group, b))| TensorRecord {
                name: format!("fidelity{}.{:?}.{i}", m + 1, group),
                shape: [b.rows, b.cols],
                data: self.params[b.range()].to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            config: self.config.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::parse(
                "checkpoint",
                format!("unknown format {}", ckpt.format),
            ));
        }
        ckpt.config.validate()?;
        let layout = ParamLayout::new(&ckpt.config);
        let blocks = layout.blocks();
        if blocks.len() != ckpt.tensors.len() {
            return Err(Error::parse(
                "checkpoint",
                format!(
                    "expected {} tensors, found {}",
                    blocks.len(),
                    ckpt.tensors.len()
                ),
            ));
        }
        let mut params = vec![0.0; layout.total];
        for ((_, _, b), t) in blocks.iter().zip(&ckpt.tensors) {
            if t.shape != [b.rows, b.cols] || t.data.len() != b.len() {
                return Err(Error::parse(
                    "checkpoint",
                    format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        t.name,
                        t.shape,
                        [b.rows, b.cols]
                    ),
                ));
            }
            params[b.range()].copy_from_slice(&t.data);
        }
        Self::from_params(ckpt.config, params)
    }
}

pub const CHECKPOINT_FORMAT: &str = "bmfal-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}
