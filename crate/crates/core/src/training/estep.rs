//! Posterior moments of the latent log-conductivities for each training pair.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EmParams, EmProblem};
use crate::error::{Error, Result};
use crate::rng;
use crate::surrogate::{encoder_log_density, log_sum_exp, Decoder, DecoderTarget};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub samples: usize,
    pub target_accept: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            burn_in: 500,
            samples: 500,
            target_accept: 0.3,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::Config("mcmc.samples must be at least 2".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("mcmc.target_accept must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Warm-start information carried between E-steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub mean: Vec<f64>,
    /// Per-coordinate proposal scales.
    pub scales: Vec<f64>,
    pub log_step: f64,
}

impl ChainState {
    pub fn initial(mean: Vec<f64>, sigma2: &[f64]) -> Self {
        let d = mean.len() as f64;
        ChainState {
            mean,
            scales: sigma2.iter().map(|v| v.sqrt()).collect(),
            log_step: (2.38 / d.sqrt()).ln(),
        }
    }
}

/// Moments of `q_i` used by the M-step and the bound.
#[derive(Clone, Debug)]
pub struct SampleMoments {
    pub z_mean: Vec<f64>,
    pub z_cov: DMatrix<f64>,
    /// `<(U_f - W U_c)_j^2>` per fine node.
    pub resid_sq: Vec<f64>,
    pub accept_rate: f64,
    pub failed_solves: usize,
}

impl SampleMoments {
    pub fn z_var(&self) -> Vec<f64> {
        self.z_cov.diagonal().iter().map(|v| v.max(0.0)).collect()
    }
}

/// Unnormalized log posterior of one pair plus the coarse solution, `None` if the solve fails.
pub(crate) struct Target<'a> {
    pub problem: &'a EmProblem,
    pub decoder: &'a Decoder,
    pub target: &'a DecoderTarget,
    pub mean: &'a [f64],
    pub sigma2: &'a [f64],
}

impl Target<'_> {
    pub fn eval(&self, z: &[f64]) -> Option<(f64, Vec<f64>)> {
        if z.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let uc = self.problem.solver().solve_log(z).ok()?;
        let lp = encoder_log_density(z, self.mean, self.sigma2) + self.decoder.log_density(self.target, &uc);
        lp.is_finite().then_some((lp, uc))
    }
}

/// `<(U_f - W U_c)_j^2>` from the mean and covariance of `U_c`.
fn residual_moments(problem: &EmProblem, u_f: &[f64], uc_mean: &[f64], uc_cov: &DMatrix<f64>) -> Vec<f64> {
    let w = problem.w();
    u_f.iter()
        .enumerate()
        .map(|(j, u)| {
            let row: Vec<(usize, f64)> = w.row(j).collect();
            let fitted: f64 = row.iter().map(|&(c, v)| v * uc_mean[c]).sum();
            let mut spread = 0.0;
            for &(a, va) in &row {
                for &(b, vb) in &row {
                    spread += va * vb * uc_cov[(a, b)];
                }
            }
            (u - fitted) * (u - fitted) + spread.max(0.0)
        })
        .collect()
}

/// Weighted mean and covariance of row vectors.
fn weighted_moments(rows: &[Vec<f64>], weights: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let total: f64 = weights.iter().sum();
    let mut mean = vec![0.0; d];
    for (r, w) in rows.iter().zip(weights) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += w * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut cov = DMatrix::zeros(d, d);
    for (r, w) in rows.iter().zip(weights) {
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += w * da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[(a, b)] /= total;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    (mean, cov)
}

const ADAPT_BATCH: usize = 20;

/// Adaptive random-walk Metropolis on `q_i`; returns moments and the updated chain state.
pub(crate) fn run_chain(target: &Target, u_f: &[f64], chain: &ChainState, config: &McmcConfig, seed: u64) -> Result<(SampleMoments, ChainState)> {
    let mut rng = rng::stream(seed, 0x6d636d63);
    let d = target.mean.len();
    let (mut z, (mut lp, mut uc)) = match target.eval(&chain.mean) {
        Some(v) => (chain.mean.clone(), v),
        None => match target.eval(target.mean) {
            Some(v) => (target.mean.to_vec(), v),
            None => return Err(Error::numeric("no finite starting point for the E-step chain", f64::NAN)),
        },
    };
    let scales: Vec<f64> = chain.scales.iter().map(|s| s.max(1e-10)).collect();
    let mut log_step = chain.log_step;
    let mut failed = 0usize;
    let mut proposal = vec![0.0; d];

    let mut step = |z: &mut Vec<f64>, lp: &mut f64, uc: &mut Vec<f64>, log_step: f64, rng: &mut rand_chacha::ChaCha8Rng| -> bool {
        let f = log_step.exp();
        for k in 0..d {
            proposal[k] = z[k] + f * scales[k] * rng.sample::<f64, _>(StandardNormal);
        }
        let u: f64 = rng.random();
        match target.eval(&proposal) {
            Some((lp_new, uc_new)) if u.ln() < lp_new - *lp => {
                z.copy_from_slice(&proposal);
                *lp = lp_new;
                *uc = uc_new;
                true
            }
            Some(_) => false,
            None => {
                failed += 1;
                false
            }
        }
    };

    let mut batch_accepts = 0usize;
    for t in 0..config.burn_in {
        batch_accepts += step(&mut z, &mut lp, &mut uc, log_step, &mut rng) as usize;
        if (t + 1) % ADAPT_BATCH == 0 {
            let k = (t + 1) / ADAPT_BATCH;
            if batch_accepts == 0 {
                log_step -= std::f64::consts::LN_2;
            } else {
                let rate = batch_accepts as f64 / ADAPT_BATCH as f64;
                log_step += (rate - config.target_accept) / (k as f64).sqrt();
            }
            batch_accepts = 0;
        }
    }

    let n = config.samples;
    let mut zs = Vec::with_capacity(n);
    let mut ucs = Vec::with_capacity(n);
    let mut accepted = 0usize;
    for _ in 0..n {
        accepted += step(&mut z, &mut lp, &mut uc, log_step, &mut rng) as usize;
        zs.push(z.clone());
        ucs.push(uc.clone());
    }
    let ones = vec![1.0; n];
    let (z_mean, z_cov) = weighted_moments(&zs, &ones);
    let (uc_mean, uc_cov) = weighted_moments(&ucs, &ones);
    let resid_sq = residual_moments(target.problem, u_f, &uc_mean, &uc_cov);
    let sd: Vec<f64> = z_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    let next = ChainState {
        mean: z_mean.clone(),
        scales: if accepted > 0 && sd.iter().all(|s| *s > 0.0) { sd } else { scales.clone() },
        log_step,
    };
    Ok((
        SampleMoments {
            z_mean,
            z_cov,
            resid_sq,
            accept_rate: accepted as f64 / n as f64,
            failed_solves: failed,
        },
        next,
    ))
}

/// Monte-Carlo E-step over all pairs; chains run in parallel with per-pair streams.
pub fn e_step(problem: &EmProblem, params: &EmParams, chains: &[ChainState], config: &McmcConfig, seed: u64) -> Result<(Vec<SampleMoments>, Vec<ChainState>)> {
    let decoder = problem.decoder(&params.s)?;
    let out: Vec<(SampleMoments, ChainState)> = (0..problem.n())
        .into_par_iter()
        .map(|i| {
            let mean = problem.phi[i].mul_vec(&params.theta);
            let t = decoder.target(&problem.u_f[i]);
            let target = Target {
                problem,
                decoder: &decoder,
                target: &t,
                mean: &mean,
                sigma2: &params.sigma2,
            };
            run_chain(&target, &problem.u_f[i], &chains[i], config, rng::derive_seed(&[seed, i as u64]))
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().unzip())
}

const STAGE1_POINTS: usize = 4001;
const STAGE2_POINTS: usize = 2001;
const HALF_WIDTH: f64 = 30.0;

/// Trapezoid rule on a uniform grid: log of the integral and quadrature weights of the normalized integrand (summing to 1).
fn trapezoid(lps: &[f64], h: f64) -> (f64, Vec<f64>) {
    let n = lps.len();
    let logs: Vec<f64> = lps
        .iter()
        .enumerate()
        .map(|(k, lp)| if k == 0 || k == n - 1 { lp - std::f64::consts::LN_2 } else { *lp })
        .collect();
    let log_int = log_sum_exp(&logs) + h.ln();
    let weights = logs.iter().map(|l| (l - log_int + h.ln()).exp()).collect();
    (log_int, weights)
}

/// Exact posterior moments and log evidence for a single coarse element by quadrature.
pub(crate) fn quadrature_sample(target: &Target, u_f: &[f64]) -> Result<(SampleMoments, f64)> {
    let grid = |center: f64, half: f64, n: usize| -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>, f64)> {
        let h = 2.0 * half / (n - 1) as f64;
        let mut zs = Vec::with_capacity(n);
        let mut lps = Vec::with_capacity(n);
        let mut ucs = Vec::with_capacity(n);
        for k in 0..n {
            let z = center - half + k as f64 * h;
            let (lp, uc) = target
                .eval(&[z])
                .ok_or_else(|| Error::numeric(format!("coarse solve failed at z = {z}"), f64::NAN))?;
            zs.push(z);
            lps.push(lp);
            ucs.push(uc);
        }
        Ok((zs, lps, ucs, h))
    };
    let sd_prior = target.sigma2[0].sqrt();
    let (zs, lps, _, h) = grid(target.mean[0], HALF_WIDTH * sd_prior, STAGE1_POINTS)?;
    let (_, w) = trapezoid(&lps, h);
    let m: f64 = zs.iter().zip(&w).map(|(z, w)| z * w).sum();
    let v: f64 = zs.iter().zip(&w).map(|(z, w)| (z - m) * (z - m) * w).sum();
    let mode = zs[lps.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k).unwrap()];
    let mut sd = v.sqrt().max(h);
    let mut center = mode;
    // refine until the grid resolves the posterior width
    let mut result = None;
    for _ in 0..3 {
        let (zs, lps, ucs, h2) = grid(center, HALF_WIDTH * sd, STAGE2_POINTS)?;
        let (log_ev, wz) = trapezoid(&lps, h2);
        let rows: Vec<Vec<f64>> = zs.iter().map(|z| vec![*z]).collect();
        let (z_mean, z_cov) = weighted_moments(&rows, &wz);
        let new_sd = z_cov[(0, 0)].max(0.0).sqrt();
        result = Some((zs, ucs, wz, log_ev, z_mean, z_cov));
        let well_resolved = new_sd > 0.5 * sd && new_sd > 20.0 * h2;
        center = result.as_ref().unwrap().4[0];
        if well_resolved {
            break;
        }
        sd = new_sd.max(h2);
    }
    let (_, ucs, wz, log_ev, z_mean, z_cov) = result.unwrap();
    let (uc_mean, uc_cov) = weighted_moments(&ucs, &wz);
    let resid_sq = residual_moments(target.problem, u_f, &uc_mean, &uc_cov);
    Ok((
        SampleMoments {
            z_mean,
            z_cov,
            resid_sq,
            accept_rate: 1.0,
            failed_solves: 0,
        },
        log_ev,
    ))
}

/// Deterministic E-step for one-element coarse models; also returns the summed log evidence.
pub fn e_step_quadrature(problem: &EmProblem, params: &EmParams) -> Result<(Vec<SampleMoments>, f64)> {
    if problem.coarse_mesh.n_elements() != 1 {
        return Err(Error::Config("the quadrature E-step needs a single coarse element".into()));
    }
    let decoder = problem.decoder(&params.s)?;
    let out: Vec<(SampleMoments, f64)> = (0..problem.n())
        .into_par_iter()
        .map(|i| {
            let mean = problem.phi[i].mul_vec(&params.theta);
            let t = decoder.target(&problem.u_f[i]);
            let target = Target {
                problem,
                decoder: &decoder,
                target: &t,
                mean: &mean,
                sigma2: &params.sigma2,
            };
            quadrature_sample(&target, &problem.u_f[i])
        })
        .collect::<Result<_>>()?;
    let log_ev = out.iter().map(|(_, l)| l).sum();
    Ok((out.into_iter().map(|(m, _)| m).collect(), log_ev))
}
