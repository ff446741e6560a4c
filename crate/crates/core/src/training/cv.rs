//! Choosing the sparsity strength by K-fold cross-validation on held-out predictive log density.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bound::log_predictive;
use super::estep::McmcConfig;
use super::mstep::normal_equations;
use super::{run_em, EmConfig, EmProblem, EmState, RunSettings};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Highest mean score.
    Best,
    /// Largest gamma whose mean score is within one standard error of the best.
    #[default]
    OneStandardError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    /// Explicit grid; sorted descending before use. `None` builds a log-spaced grid.
    pub grid: Option<Vec<f64>>,
    pub folds: usize,
    pub n_grid: usize,
    /// Smallest / largest gamma of the automatic grid.
    pub ratio: f64,
    /// Unpenalized iterations on the full data before the grid is built.
    pub warmup_iter: usize,
    /// EM iterations per grid point and fold.
    pub max_iter: usize,
    pub mcmc: McmcConfig,
    pub predictive_samples: usize,
    pub rule: SelectionRule,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            grid: None,
            folds: 5,
            n_grid: 8,
            ratio: 1e-4,
            warmup_iter: 10,
            max_iter: 15,
            mcmc: McmcConfig {
                burn_in: 150,
                samples: 150,
                target_accept: 0.3,
            },
            predictive_samples: 512,
            rule: SelectionRule::OneStandardError,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("cross-validation needs at least 2 folds".into()));
        }
        match &self.grid {
            Some(g) if g.is_empty() || g.iter().any(|v| !(*v >= 0.0 && v.is_finite())) => {
                return Err(Error::Config("gamma grid must be non-empty and nonnegative".into()))
            }
            None if self.n_grid < 2 || !(self.ratio > 0.0 && self.ratio < 1.0) => {
                return Err(Error::Config("automatic grid needs n_grid >= 2 and ratio in (0,1)".into()))
            }
            _ => {}
        }
        if self.max_iter == 0 || self.predictive_samples == 0 {
            return Err(Error::Config("cv max_iter and predictive_samples must be positive".into()));
        }
        self.mcmc.validate()
    }
}

/// Outcome of the grid search; scores are mean held-out log densities per pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// Descending.
    pub grid: Vec<f64>,
    pub mean_score: Vec<f64>,
    pub se: Vec<f64>,
    /// `fold_scores[f][g]`.
    pub fold_scores: Vec<Vec<f64>>,
    pub best_index: usize,
    pub selected_index: usize,
    pub selected_gamma: f64,
}

/// Smallest gamma at which every penalized coefficient is zero, given the current
/// posterior means and encoder variances.
pub fn gamma_max(problem: &EmProblem, state: &EmState) -> f64 {
    let z_means: Vec<Vec<f64>> = if state.last_moments.is_empty() {
        state.chains.iter().map(|c| c.mean.clone()).collect()
    } else {
        state.last_moments.iter().map(|m| m.z_mean.clone()).collect()
    };
    let (g, c) = normal_equations(&z_means, &problem.phi, &state.params.sigma2);
    let t0 = if g[(0, 0)] > 0.0 { c[0] / g[(0, 0)] } else { 0.0 };
    let lam = (1..c.len()).map(|j| (c[j] - g[(j, 0)] * t0).abs()).fold(0.0, f64::max);
    lam * lam
}

fn descending(mut grid: Vec<f64>) -> Vec<f64> {
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    grid
}

fn log_grid(gmax: f64, ratio: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| gmax * ratio.powf(k as f64 / (n - 1) as f64)).collect()
}

fn settings(cv: &CvConfig, base: &EmConfig, seed: u64) -> RunSettings {
    RunSettings {
        max_iter: cv.max_iter,
        tol: 0.0,
        window: base.window,
        mcmc: cv.mcmc,
        e_step: base.e_step,
        lower_bound_samples: 0,
        seed,
    }
}

/// Runs the warm-up, builds the grid, scores every (fold, gamma) pair and applies the
/// selection rule. Returns the report and the warm-up state for the final fit.
pub fn cross_validate(problem: &EmProblem, start: EmState, cv: &CvConfig, base: &EmConfig) -> Result<(CvReport, EmState)> {
    cv.validate()?;
    let n = problem.n();
    if n < cv.folds {
        return Err(Error::Config(format!("{n} training pairs cannot fill {} folds", cv.folds)));
    }
    let warm = if cv.warmup_iter > 0 {
        let run = RunSettings {
            max_iter: cv.warmup_iter,
            ..settings(cv, base, rng::derive_seed(&[base.seed, 0x7761726d]))
        };
        run_em(problem, start, 0.0, &run)?
    } else {
        start
    };
    let grid = match &cv.grid {
        Some(g) => descending(g.clone()),
        None => {
            let gmax = gamma_max(problem, &warm);
            if !(gmax > 0.0) {
                return Err(Error::numeric("no penalized feature correlates with the latent means", gmax));
            }
            log_grid(gmax, cv.ratio, cv.n_grid)
        }
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng::derive_seed(&[base.seed, 0x666f6c64]), 0));
    let folds: Vec<Vec<usize>> = (0..cv.folds)
        .map(|f| {
            let mut held: Vec<usize> = order.iter().copied().skip(f).step_by(cv.folds).collect();
            held.sort_unstable();
            held
        })
        .collect();

    let mut fold_scores = vec![vec![0.0; grid.len()]; cv.folds];
    for (f, held) in folds.iter().enumerate() {
        let train: Vec<usize> = (0..n).filter(|i| held.binary_search(i).is_err()).collect();
        let train_problem = problem.subset(&train);
        let held_problem = problem.subset(held);
        let mut state = warm.subset(&train);
        for (g, &gamma) in grid.iter().enumerate() {
            let run = settings(cv, base, rng::derive_seed(&[base.seed, 0x6376, f as u64, g as u64]));
            state = run_em(&train_problem, state, gamma, &run)?;
            let decoder = held_problem.decoder(&state.params.s)?;
            let scores: Vec<f64> = (0..held_problem.n())
                .into_par_iter()
                .map(|i| {
                    // same draws for every gamma
                    let seed = rng::derive_seed(&[base.seed, 0x7363, f as u64, i as u64]);
                    log_predictive(&held_problem, &state.params, &decoder, i, cv.predictive_samples, seed).map(|b| b.value)
                })
                .collect::<Result<_>>()?;
            fold_scores[f][g] = scores.iter().sum::<f64>() / scores.len() as f64;
            log::info!(
                "cv fold {f} gamma {gamma:.4e}: score {:.4}, nnz {}",
                fold_scores[f][g],
                state.params.nnz()
            );
        }
    }

    let k = cv.folds as f64;
    let mean_score: Vec<f64> = (0..grid.len())
        .map(|g| {
            folds
                .iter()
                .zip(&fold_scores)
                .map(|(held, s)| s[g] * held.len() as f64)
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let se: Vec<f64> = (0..grid.len())
        .map(|g| {
            let m = fold_scores.iter().map(|s| s[g]).sum::<f64>() / k;
            let var = fold_scores.iter().map(|s| (s[g] - m).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        })
        .collect();
    let best_index = (0..grid.len())
        .max_by(|&a, &b| mean_score[a].total_cmp(&mean_score[b]))
        .expect("grid is non-empty");
    let selected_index = match cv.rule {
        SelectionRule::Best => best_index,
        SelectionRule::OneStandardError => {
            let threshold = mean_score[best_index] - se[best_index];
            (0..grid.len()).find(|&g| mean_score[g] >= threshold).unwrap_or(best_index)
        }
    };
    Ok((
        CvReport {
            selected_gamma: grid[selected_index],
            grid,
            mean_score,
            se,
            fold_scores,
            best_index,
            selected_index,
        },
        warm,
    ))
}

/// One point of a warm-started path on the full data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub gamma: f64,
    pub nnz: usize,
    pub theta: Vec<f64>,
}

/// Fits along `grid` (sorted descending), each fit warm-started from the previous one.
pub fn regularization_path(problem: &EmProblem, start: EmState, grid: &[f64], run: &RunSettings) -> Result<Vec<PathPoint>> {
    let mut state = start;
    let mut out = Vec::new();
    for gamma in descending(grid.to_vec()) {
        state = run_em(problem, state, gamma, run)?;
        out.push(PathPoint {
            gamma,
            nnz: state.params.nnz(),
            theta: state.params.theta.clone(),
        });
    }
    Ok(out)
}
