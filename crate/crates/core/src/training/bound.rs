//! Monte-Carlo estimates of the variational lower bound and of the marginal likelihood.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estep::{SampleMoments, Target};
use super::{EmParams, EmProblem};
use crate::error::{Error, Result};
use crate::rng;
use crate::surrogate::{log_sum_exp, Decoder};

/// Point estimate with its Monte-Carlo standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub value: f64,
    pub se: f64,
}

/// `-sqrt(gamma) * sum_{j>=1} |theta_j|`; zero when `gamma = 0`.
pub fn log_prior(theta: &[f64], gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 0.0;
    }
    -gamma.sqrt() * theta.iter().skip(1).map(|t| t.abs()).sum::<f64>()
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(&[seed, 0x6c62, i as u64])
}

/// `F(q, theta) = sum_i E_q[log p_cf + log p_c] + H(q)` with `q_i` the Gaussian matching the
/// E-step mean and covariance. Uses common random numbers: draws depend only on `(seed, i)`.
pub fn lower_bound(problem: &EmProblem, params: &EmParams, moments: &[SampleMoments], n_samples: usize, seed: u64) -> Result<BoundEstimate> {
    if n_samples < 2 {
        return Err(Error::Config("lower bound needs at least 2 samples".into()));
    }
    let decoder = problem.decoder(&params.s)?;
    let parts: Vec<(f64, f64)> = (0..problem.n())
        .into_par_iter()
        .map(|i| {
            let mom = &moments[i];
            let d = mom.z_mean.len();
            let mut cov = mom.z_cov.clone();
            let scale = cov.diagonal().amax().max(1e-300);
            let mut jitter = 0.0;
            let chol = loop {
                if let Some(c) = cov.clone().cholesky() {
                    break c;
                }
                jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 10.0 };
                if jitter > scale {
                    return Err(Error::numeric("posterior covariance is not positive definite", jitter));
                }
                for k in 0..d {
                    cov[(k, k)] += jitter;
                }
            };
            let l = chol.l();
            let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let entropy = 0.5 * (d as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln()) + log_det);
            let mean = problem.phi[i].mul_vec(&params.theta);
            let t = decoder.target(&problem.u_f[i]);
            let target = Target {
                problem,
                decoder: &decoder,
                target: &t,
                mean: &mean,
                sigma2: &params.sigma2,
            };
            let mut rng = rng::stream(sample_seed(seed, i), 0);
            let m = DVector::from_column_slice(&mom.z_mean);
            let mut terms = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let z = &m + &l * eps;
                let (lp, _) = target
                    .eval(z.as_slice())
                    .ok_or_else(|| Error::numeric("coarse solve failed inside the bound estimate", f64::NAN))?;
                terms.push(lp);
            }
            let n = n_samples as f64;
            let mean_t = terms.iter().sum::<f64>() / n;
            let var_t = terms.iter().map(|t| (t - mean_t) * (t - mean_t)).sum::<f64>() / (n - 1.0);
            Ok((mean_t + entropy, var_t / n))
        })
        .collect::<Result<_>>()?;
    Ok(BoundEstimate {
        value: parts.iter().map(|p| p.0).sum(),
        se: parts.iter().map(|p| p.1).sum::<f64>().sqrt(),
    })
}

/// `log p(u_f^(i) | lambda_f^(i), theta)` by sampling the encoder; delta-method standard error.
pub(crate) fn log_predictive(problem: &EmProblem, params: &EmParams, decoder: &Decoder, i: usize, n_samples: usize, seed: u64) -> Result<BoundEstimate> {
    let mean = problem.phi[i].mul_vec(&params.theta);
    let t = decoder.target(&problem.u_f[i]);
    let mut rng = rng::stream(seed, 0x6c6c);
    let mut logs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z: Vec<f64> = mean
            .iter()
            .zip(&params.sigma2)
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let uc = problem
            .solver()
            .solve_log(&z)
            .map_err(|e| Error::numeric(format!("predictive draw failed: {e}"), f64::NAN))?;
        logs.push(decoder.log_density(&t, &uc));
    }
    let n = n_samples as f64;
    let value = log_sum_exp(&logs) - n.ln();
    // relative spread of the importance weights
    let w: Vec<f64> = logs.iter().map(|l| (l - value).exp()).collect();
    let var = w.iter().map(|x| (x - 1.0) * (x - 1.0)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(BoundEstimate {
        value,
        se: (var / n).sqrt(),
    })
}

/// Direct estimate of `sum_i log p(u_f^(i) | lambda_f^(i), theta)`.
pub fn log_likelihood_mc(problem: &EmProblem, params: &EmParams, n_samples: usize, seed: u64) -> Result<BoundEstimate> {
    let decoder = problem.decoder(&params.s)?;
    let parts: Vec<BoundEstimate> = (0..problem.n())
        .into_par_iter()
        .map(|i| log_predictive(problem, params, &decoder, i, n_samples, rng::derive_seed(&[seed, i as u64])))
        .collect::<Result<_>>()?;
    Ok(BoundEstimate {
        value: parts.iter().map(|p| p.value).sum(),
        se: parts.iter().map(|p| p.se * p.se).sum::<f64>().sqrt(),
    })
}
