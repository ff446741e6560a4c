//! Monte-Carlo EM for the encoder/decoder parameters with an L1 prior on the encoder weights.

mod bound;
mod cv;
mod estep;
mod mstep;

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use bound::{log_likelihood_mc, log_prior, lower_bound, BoundEstimate};
pub use cv::{cross_validate, gamma_max, regularization_path, CvConfig, CvReport, PathPoint, SelectionRule};
pub use estep::{e_step, e_step_quadrature, ChainState, McmcConfig, SampleMoments};
pub use mstep::{lasso, m_step_s, m_step_sigma, m_step_theta, normal_equations, soft_threshold, VARIANCE_FLOOR};

use crate::error::{Error, Result};
use crate::features::{build_raw_design_matrix, fit_normalization, partition, sca, DesignMatrix, FeatureCatalog};
use crate::fem::{interpolation_matrix, CoarseSolver, CsrMatrix, HeatProblem, MeshSpec};
use crate::io;
use crate::microstructure::Microstructure;
use crate::rng;
use crate::surrogate::{Decoder, ModelParams};

/// One observed input/output pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub micro: Microstructure,
    pub u_f: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDataset {
    pub fine_mesh: MeshSpec,
    pub pairs: Vec<TrainingPair>,
}

impl TrainingDataset {
    pub fn new(fine_mesh: MeshSpec, pairs: Vec<TrainingPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        for (i, p) in pairs.iter().enumerate() {
            if p.micro.nx != fine_mesh.nel_x || p.micro.ny != fine_mesh.nel_y {
                return Err(Error::Config(format!(
                    "pair {i}: microstructure {}x{} does not match the {}x{} fine mesh",
                    p.micro.nx, p.micro.ny, fine_mesh.nel_x, fine_mesh.nel_y
                )));
            }
            if p.u_f.len() != fine_mesh.n_nodes() {
                return Err(Error::Config(format!(
                    "pair {i}: solution has {} values, mesh has {} nodes",
                    p.u_f.len(),
                    fine_mesh.n_nodes()
                )));
            }
        }
        Ok(TrainingDataset { fine_mesh, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// First `n` pairs.
    pub fn head(&self, n: usize) -> Result<Self> {
        Self::new(self.fine_mesh, self.pairs[..n.min(self.len())].to_vec())
    }
}

pub fn check_nested(fine: &MeshSpec, coarse: &MeshSpec) -> Result<()> {
    if fine.nel_x % coarse.nel_x != 0 || fine.nel_y % coarse.nel_y != 0 {
        return Err(Error::Config(format!(
            "coarse mesh {}x{} does not nest in the {}x{} fine mesh",
            coarse.nel_x, coarse.nel_y, fine.nel_x, fine.nel_y
        )));
    }
    Ok(())
}

/// Training data in the form the EM iterations consume: normalized design matrices,
/// fine solutions and the fixed operators of one coarse mesh.
#[derive(Clone, Debug)]
pub struct EmProblem {
    pub coarse_mesh: MeshSpec,
    pub fine_mesh: MeshSpec,
    pub problem: HeatProblem,
    /// Catalog with the normalization used for `phi`.
    pub catalog: FeatureCatalog,
    pub phi: Vec<DesignMatrix>,
    pub u_f: Vec<Vec<f64>>,
    /// Per-element `log` of the self-consistent estimate; the initial encoder target.
    pub log_sca: Vec<Vec<f64>>,
    w: CsrMatrix,
    solver: CoarseSolver,
}

impl EmProblem {
    /// Evaluates the catalog on every pair. Fits the normalization on this data unless the
    /// catalog already carries one.
    pub fn new(dataset: &TrainingDataset, catalog: &FeatureCatalog, coarse_mesh: MeshSpec, problem: HeatProblem) -> Result<Self> {
        check_nested(&dataset.fine_mesh, &coarse_mesh)?;
        let raw: Vec<DesignMatrix> = dataset
            .pairs
            .iter()
            .map(|p| build_raw_design_matrix(&p.micro, &coarse_mesh, catalog))
            .collect::<Result<_>>()?;
        Self::from_raw(dataset, catalog, coarse_mesh, problem, raw)
    }

    /// As [`EmProblem::new`] with the raw design matrices supplied, e.g. from a cache.
    pub fn from_raw(
        dataset: &TrainingDataset,
        catalog: &FeatureCatalog,
        coarse_mesh: MeshSpec,
        problem: HeatProblem,
        mut phi: Vec<DesignMatrix>,
    ) -> Result<Self> {
        let fine = dataset.fine_mesh;
        check_nested(&fine, &coarse_mesh)?;
        if phi.len() != dataset.len() || phi.iter().any(|m| m.catalog_hash != catalog.hash()) {
            return Err(Error::Config("raw design matrices do not belong to this dataset and catalog".into()));
        }
        let mut catalog = catalog.clone();
        if catalog.normalization().is_none() {
            catalog.set_normalization(fit_normalization(&phi)?)?;
        }
        let norm = catalog.normalization().expect("normalization set above").clone();
        phi.iter_mut().for_each(|m| m.normalize(&norm));
        let log_sca = dataset
            .pairs
            .iter()
            .map(|p| {
                partition(&p.micro, &coarse_mesh)?
                    .iter()
                    .map(|s| Ok(sca(s.lambda_lo, s.lambda_hi, s.volume_fraction_hi())?.ln()))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let u_f = dataset.pairs.iter().map(|p| p.u_f.clone()).collect();
        Self::from_parts(coarse_mesh, fine, problem, catalog, phi, u_f, log_sca)
    }

    /// Assembles a problem from precomputed (already normalized) design matrices.
    pub fn from_parts(
        coarse_mesh: MeshSpec,
        fine_mesh: MeshSpec,
        problem: HeatProblem,
        catalog: FeatureCatalog,
        phi: Vec<DesignMatrix>,
        u_f: Vec<Vec<f64>>,
        log_sca: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if phi.is_empty() || phi.len() != u_f.len() || phi.len() != log_sca.len() {
            return Err(Error::Config("design matrices, solutions and targets must be non-empty and aligned".into()));
        }
        let d = coarse_mesh.n_elements();
        if phi.iter().any(|m| m.n_rows != d || m.n_cols != catalog.len())
            || u_f.iter().any(|u| u.len() != fine_mesh.n_nodes())
            || log_sca.iter().any(|l| l.len() != d)
        {
            return Err(Error::Config("training arrays do not match the meshes and catalog".into()));
        }
        let w = interpolation_matrix(&coarse_mesh, &fine_mesh).map_err(|e| Error::Config(e.to_string()))?;
        let solver = CoarseSolver::new(coarse_mesh, &problem.boundary_conditions(&coarse_mesh))?;
        Ok(EmProblem {
            coarse_mesh,
            fine_mesh,
            problem,
            catalog,
            phi,
            u_f,
            log_sca,
            w,
            solver,
        })
    }

    pub fn n(&self) -> usize {
        self.phi.len()
    }

    pub fn w(&self) -> &CsrMatrix {
        &self.w
    }

    pub fn solver(&self) -> &CoarseSolver {
        &self.solver
    }

    pub fn decoder(&self, s: &[f64]) -> Result<Decoder> {
        Decoder::new(self.w.clone(), s)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<f64>>| idx.iter().map(|&i| v[i].clone()).collect();
        EmProblem {
            phi: idx.iter().map(|&i| self.phi[i].clone()).collect(),
            u_f: pick(&self.u_f),
            log_sca: pick(&self.log_sca),
            ..self.clone()
        }
    }
}

/// The learnable parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmParams {
    pub theta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub s: Vec<f64>,
}

impl EmParams {
    pub fn nnz(&self) -> usize {
        self.theta.iter().filter(|v| **v != 0.0).count()
    }

    /// Number of nonzero coefficients excluding the intercept.
    pub fn nnz_penalized(&self) -> usize {
        self.theta.iter().skip(1).filter(|v| **v != 0.0).count()
    }

    pub fn into_model(self, p: &EmProblem, gamma: f64) -> ModelParams {
        ModelParams {
            theta: self.theta,
            sigma2: self.sigma2,
            s: self.s,
            coarse_mesh: p.coarse_mesh,
            fine_mesh: p.fine_mesh,
            problem: p.problem,
            catalog_hash: p.catalog.hash(),
            catalog: p.catalog.clone(),
            gamma,
        }
    }
}

const INIT_RIDGE: f64 = 1e-8;

/// Ridge fit of `Phi theta ~ log SCA`; `sigma2` from its residuals (at least `sigma2_floor`),
/// `s` from the decoder residuals of the deterministic coarse prediction.
pub fn initialize(problem: &EmProblem, sigma2_floor: f64) -> Result<EmParams> {
    let p = problem.catalog.len();
    let d = problem.coarse_mesh.n_elements();
    let mut g = DMatrix::<f64>::identity(p, p) * INIT_RIDGE;
    let mut c = DVector::<f64>::zeros(p);
    for (ph, t) in problem.phi.iter().zip(&problem.log_sca) {
        for k in 0..d {
            let row = ph.row(k);
            for a in 0..p {
                c[a] += row[a] * t[k];
                for b in 0..p {
                    g[(a, b)] += row[a] * row[b];
                }
            }
        }
    }
    let theta: Vec<f64> = g
        .cholesky()
        .ok_or_else(|| Error::numeric("initial ridge system is not positive definite", f64::NAN))?
        .solve(&c)
        .iter()
        .copied()
        .collect();
    let n = problem.n() as f64;
    let mut sigma2 = vec![0.0; d];
    let mut s = vec![0.0; problem.fine_mesh.n_nodes()];
    for i in 0..problem.n() {
        let mu = problem.phi[i].mul_vec(&theta);
        for k in 0..d {
            sigma2[k] += (problem.log_sca[i][k] - mu[k]).powi(2) / n;
        }
        let uc = problem.solver().solve_log(&mu)?;
        let wuc = problem.w().mul_vec(&uc);
        for (j, (u, f)) in problem.u_f[i].iter().zip(&wuc).enumerate() {
            s[j] += (u - f) * (u - f) / n;
        }
    }
    sigma2.iter_mut().for_each(|v| *v = v.max(sigma2_floor).max(VARIANCE_FLOOR));
    s.iter_mut().for_each(|v| *v = v.max(VARIANCE_FLOOR));
    Ok(EmParams { theta, sigma2, s })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EStepKind {
    #[default]
    Mcmc,
    /// Deterministic grid integration; one coarse element only.
    Quadrature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GammaSelection {
    Fixed { value: f64 },
    Cv(CvConfig),
}

impl Default for GammaSelection {
    fn default() -> Self {
        GammaSelection::Cv(CvConfig::default())
    }
}

/// EM settings (JSON). Unlisted fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative change between successive window means that counts as converged.
    pub tol: f64,
    pub window: usize,
    pub mcmc: McmcConfig,
    pub gamma: GammaSelection,
    pub seed: u64,
    pub e_step: EStepKind,
    /// Draws per pair for the lower-bound estimate; 0 disables it (and convergence checks).
    pub lower_bound_samples: usize,
    /// Floor on the initial encoder variances.
    pub sigma2_init_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 200,
            tol: 1e-4,
            window: 5,
            mcmc: McmcConfig::default(),
            gamma: GammaSelection::default(),
            seed: 0,
            e_step: EStepKind::Mcmc,
            lower_bound_samples: 128,
            sigma2_init_floor: 0.25,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.window == 0 {
            return Err(Error::Config("max_iter and window must be positive".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tol must be nonnegative".into()));
        }
        if self.lower_bound_samples == 1 {
            return Err(Error::Config("lower_bound_samples must be 0 or at least 2".into()));
        }
        self.mcmc.validate()?;
        match &self.gamma {
            GammaSelection::Fixed { value } if !(*value >= 0.0 && value.is_finite()) => {
                Err(Error::Config(format!("gamma must be nonnegative, got {value}")))
            }
            GammaSelection::Cv(cv) => cv.validate(),
            _ => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: EmConfig = io::read_json(path)?;
        c.validate()?;
        Ok(c)
    }
}

/// Per-iteration training log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Lower bound plus log prior at the parameters that entered the E-step; NaN when not estimated.
    pub lower_bound: f64,
    pub lower_bound_se: f64,
    pub mean_accept_rate: f64,
    pub nnz_theta: usize,
    pub wall_time_s: f64,
}

/// Everything carried between EM iterations.
#[derive(Clone, Debug)]
pub struct EmState {
    pub params: EmParams,
    pub iteration: usize,
    pub lower_bound_trace: Vec<BoundEstimate>,
    pub chains: Vec<ChainState>,
    pub last_moments: Vec<SampleMoments>,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
}

impl EmState {
    pub fn new(problem: &EmProblem, params: EmParams) -> Self {
        let chains = problem
            .phi
            .iter()
            .map(|ph| ChainState::initial(ph.mul_vec(&params.theta), &params.sigma2))
            .collect();
        EmState {
            params,
            iteration: 0,
            lower_bound_trace: Vec::new(),
            chains,
            last_moments: Vec::new(),
            log: Vec::new(),
            converged: false,
        }
    }

    /// Same parameters, chains restricted to `idx`, history cleared.
    pub fn subset(&self, idx: &[usize]) -> Self {
        EmState {
            params: self.params.clone(),
            iteration: self.iteration,
            lower_bound_trace: Vec::new(),
            chains: idx.iter().map(|&i| self.chains[i].clone()).collect(),
            last_moments: Vec::new(),
            log: Vec::new(),
            converged: false,
        }
    }

    pub fn mean_accept_rate(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.mean_accept_rate)
    }
}

/// Settings of one run of EM iterations at fixed `gamma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSettings {
    pub max_iter: usize,
    pub tol: f64,
    pub window: usize,
    pub mcmc: McmcConfig,
    pub e_step: EStepKind,
    pub lower_bound_samples: usize,
    pub seed: u64,
}

impl From<&EmConfig> for RunSettings {
    fn from(c: &EmConfig) -> Self {
        RunSettings {
            max_iter: c.max_iter,
            tol: c.tol,
            window: c.window,
            mcmc: c.mcmc,
            e_step: c.e_step,
            lower_bound_samples: c.lower_bound_samples,
            seed: c.seed,
        }
    }
}

fn window_converged(trace: &[BoundEstimate], window: usize, tol: f64) -> bool {
    let n = trace.len();
    if n < 2 * window || tol <= 0.0 {
        return false;
    }
    let mean = |s: &[BoundEstimate]| s.iter().map(|b| b.value).sum::<f64>() / s.len() as f64;
    let cur = mean(&trace[n - window..]);
    let prev = mean(&trace[n - 2 * window..n - window]);
    ((cur - prev) / prev.abs().max(1e-300)).abs() < tol
}

/// E-step followed by the M-step sequence theta, sigma2, s.
pub fn em_iteration(problem: &EmProblem, state: &mut EmState, gamma: f64, run: &RunSettings) -> Result<()> {
    let started = Instant::now();
    let params = &state.params;
    let (moments, bound) = match run.e_step {
        EStepKind::Quadrature => {
            let (moments, log_ev) = e_step_quadrature(problem, params)?;
            let b = BoundEstimate {
                value: log_ev + log_prior(&params.theta, gamma),
                se: 0.0,
            };
            (moments, Some(b))
        }
        EStepKind::Mcmc => {
            let seed = rng::derive_seed(&[run.seed, 0x657374, state.iteration as u64]);
            let (moments, chains) = e_step(problem, params, &state.chains, &run.mcmc, seed)?;
            state.chains = chains;
            let bound = if run.lower_bound_samples > 0 {
                let b = lower_bound(problem, params, &moments, run.lower_bound_samples, run.seed)?;
                Some(BoundEstimate {
                    value: b.value + log_prior(&params.theta, gamma),
                    se: b.se,
                })
            } else {
                None
            };
            (moments, bound)
        }
    };
    let failed: usize = moments.iter().map(|m| m.failed_solves).sum();
    if failed > 0 {
        log::warn!("iteration {}: {failed} coarse solves failed and were rejected", state.iteration);
    }
    let accept = moments.iter().map(|m| m.accept_rate).sum::<f64>() / moments.len() as f64;
    if run.e_step == EStepKind::Mcmc {
        let off = moments.iter().filter(|m| !(0.05..=0.9).contains(&m.accept_rate)).count();
        if off > 0 {
            log::warn!("iteration {}: {off} chains have acceptance outside [0.05, 0.9]", state.iteration);
        }
    }

    let z_means: Vec<Vec<f64>> = moments.iter().map(|m| m.z_mean.clone()).collect();
    let z_vars: Vec<Vec<f64>> = moments.iter().map(|m| m.z_var()).collect();
    let resid: Vec<Vec<f64>> = moments.iter().map(|m| m.resid_sq.clone()).collect();
    let theta = m_step_theta(&z_means, &problem.phi, &state.params.sigma2, gamma, &state.params.theta)?;
    let sigma2 = m_step_sigma(&z_means, &z_vars, &problem.phi, &theta);
    let s = m_step_s(&resid);
    state.params = EmParams { theta, sigma2, s };

    if let Some(b) = bound {
        state.lower_bound_trace.push(b);
    }
    state.log.push(IterationRecord {
        iteration: state.iteration,
        lower_bound: bound.map_or(f64::NAN, |b| b.value),
        lower_bound_se: bound.map_or(f64::NAN, |b| b.se),
        mean_accept_rate: accept,
        nnz_theta: state.params.nnz(),
        wall_time_s: started.elapsed().as_secs_f64(),
    });
    log::debug!(
        "iteration {}: bound {:?}, accept {accept:.3}, nnz {}",
        state.iteration,
        bound.map(|b| b.value),
        state.params.nnz()
    );
    state.last_moments = moments;
    state.iteration += 1;
    Ok(())
}

/// Iterates until the windowed bound stabilizes or `max_iter` iterations have run.
pub fn run_em(problem: &EmProblem, mut state: EmState, gamma: f64, run: &RunSettings) -> Result<EmState> {
    state.converged = false;
    let start_len = state.lower_bound_trace.len();
    for _ in 0..run.max_iter {
        em_iteration(problem, &mut state, gamma, run)?;
        if window_converged(&state.lower_bound_trace[start_len..], run.window, run.tol) {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

/// Fitted model with its training history.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams,
    pub state: EmState,
    pub cv: Option<CvReport>,
    pub problem: EmProblem,
}

/// Full training pipeline: features, initialization, optional cross-validation for `gamma`, EM.
pub fn fit(dataset: &TrainingDataset, catalog: &FeatureCatalog, coarse_mesh: MeshSpec, problem: HeatProblem, config: &EmConfig) -> Result<FitResult> {
    config.validate()?;
    let em = EmProblem::new(dataset, catalog, coarse_mesh, problem)?;
    fit_problem(em, config)
}

/// [`fit`] on prepared data.
pub fn fit_problem(problem: EmProblem, config: &EmConfig) -> Result<FitResult> {
    config.validate()?;
    if config.e_step == EStepKind::Quadrature && problem.coarse_mesh.n_elements() != 1 {
        return Err(Error::Config("the quadrature E-step needs a 1x1 coarse mesh".into()));
    }
    let init = initialize(&problem, config.sigma2_init_floor)?;
    let state = EmState::new(&problem, init);
    let run = RunSettings::from(config);
    let (gamma, start, report) = match &config.gamma {
        GammaSelection::Fixed { value } => (*value, state, None),
        GammaSelection::Cv(cv) => {
            let (report, warm) = cross_validate(&problem, state, cv, config)?;
            (report.selected_gamma, warm, Some(report))
        }
    };
    let state = run_em(&problem, start, gamma, &run)?;
    if !state.converged {
        log::info!("EM stopped after {} iterations without meeting the tolerance", state.iteration);
    }
    Ok(FitResult {
        params: state.params.clone().into_model(&problem, gamma),
        state,
        cv: report,
        problem,
    })
}

#[derive(Serialize)]
struct LogRow {
    iteration: usize,
    lower_bound: f64,
    mean_accept_rate: f64,
    nnz_theta: usize,
    wall_time_s: f64,
}

/// CSV with columns `iteration,lower_bound,mean_accept_rate,nnz_theta,wall_time_s`.
pub fn training_log_csv(records: &[IterationRecord]) -> Result<String> {
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(["iteration", "lower_bound", "mean_accept_rate", "nnz_theta", "wall_time_s"])
            .map_err(csv_err)?;
    }
    for r in records {
        w.serialize(LogRow {
            iteration: r.iteration,
            lower_bound: r.lower_bound,
            mean_accept_rate: r.mean_accept_rate,
            nnz_theta: r.nnz_theta,
            wall_time_s: r.wall_time_s,
        })
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {}", e.error())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
