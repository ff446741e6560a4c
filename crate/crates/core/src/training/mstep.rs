//! Closed-form and convex parameter updates given E-step moments.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::features::DesignMatrix;

/// Lower bound applied to fitted variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const MAX_STEPS: usize = 20_000;
/// Ridge added to `G`, relative to its largest diagonal entry; makes the problem strictly
/// convex when there are fewer observations than features.
const RIDGE: f64 = 1e-10;

/// Quadratic part of the encoder objective: `G = sum_i Phi_i^T D Phi_i`, `c = sum_i Phi_i^T D m_i`
/// with `D = diag(1 / sigma2)`.
pub fn normal_equations(z_means: &[Vec<f64>], phi: &[DesignMatrix], sigma2: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let p = phi[0].n_cols;
    let mut g = DMatrix::zeros(p, p);
    let mut c = DVector::zeros(p);
    for (m, ph) in z_means.iter().zip(phi) {
        for k in 0..ph.n_rows {
            let row = ph.row(k);
            let d = 1.0 / sigma2[k];
            for a in 0..p {
                let ra = row[a] * d;
                c[a] += ra * m[k];
                for b in a..p {
                    g[(a, b)] += ra * row[b];
                }
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    (g, c)
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Minimizes `1/2 theta^T G theta - c^T theta + lambda * sum_{j>=1} |theta_j|` by
/// feature-sign search warm-started from `theta0`. Coordinate 0 is unpenalized; columns
/// with `G_jj = 0` stay at zero.
///
/// Each step solves the stationarity equations for a fixed support and sign pattern and
/// line-searches toward that solution, so the objective never increases and the method
/// terminates on ill-conditioned `G` where coordinate descent stalls.
pub fn lasso(g: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, theta0: &[f64]) -> Result<Vec<f64>> {
    let p = c.len();
    if let Some(theta) = feature_sign(g, c, lambda, theta0, 50 * p + 100) {
        return Ok(theta);
    }
    // singular G (fewer observations than features) can make the search cycle
    let ridge = RIDGE * g.diagonal().amax();
    let mut ridged = g.clone();
    for j in 0..p {
        if ridged[(j, j)] > 0.0 {
            ridged[(j, j)] += ridge;
        }
    }
    feature_sign(&ridged, c, lambda, theta0, MAX_STEPS).ok_or_else(|| {
        let t0 = DVector::from_column_slice(theta0);
        Error::Numeric {
            message: format!("lasso active-set search did not terminate in {MAX_STEPS} steps"),
            residual: (g * t0 - c).amax(),
        }
    })
}

fn feature_sign(g: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, theta0: &[f64], max_steps: usize) -> Option<Vec<f64>> {
    let p = c.len();
    let usable = |j: usize| g[(j, j)] > 0.0;
    let mut theta: Vec<f64> = (0..p).map(|j| if usable(j) { theta0[j] } else { 0.0 }).collect();
    let mut sign: Vec<f64> = theta.iter().map(|t| sign_of(*t)).collect();
    if usable(0) {
        sign[0] = 1.0;
    }
    let slack = lambda * (1.0 + 1e-9) + 1e-11 * c.amax().max(1.0);
    for _ in 0..max_steps {
        let active: Vec<usize> = (0..p).filter(|&j| sign[j] != 0.0).collect();
        let x = solve_signed(g, c, lambda, &active, &sign);
        let consistent = active.iter().all(|&j| j == 0 || x[j] * sign[j] > 0.0);
        if consistent {
            theta = x;
        } else {
            theta = line_search(g, c, lambda, &theta, &x);
            for j in 1..p {
                sign[j] = sign_of(theta[j]);
            }
            continue;
        }
        let grad = g * DVector::from_column_slice(&theta) - c;
        let entering = (1..p)
            .filter(|&j| sign[j] == 0.0 && usable(j) && grad[j].abs() > slack)
            .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()));
        match entering {
            Some(j) => sign[j] = -grad[j].signum(),
            None => return Some(theta),
        }
    }
    None
}

fn sign_of(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Minimizer of the smooth model with `|theta_j|` replaced by `sign_j * theta_j` on `active`.
fn solve_signed(g: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, active: &[usize], sign: &[f64]) -> Vec<f64> {
    let m = active.len();
    let mut out = vec![0.0; c.len()];
    if m == 0 {
        return out;
    }
    let gaa = DMatrix::from_fn(m, m, |a, b| g[(active[a], active[b])]);
    let rhs = DVector::from_fn(m, |a, _| {
        let j = active[a];
        if j == 0 {
            c[j]
        } else {
            c[j] - lambda * sign[j]
        }
    });
    let sol = match gaa.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => {
            let eps = 1e-13 * gaa.amax();
            gaa.svd(true, true).solve(&rhs, eps).expect("svd computed with both factors")
        }
    };
    for (a, &j) in active.iter().enumerate() {
        out[j] = sol[a];
    }
    out
}

fn objective(g: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, theta: &[f64]) -> f64 {
    let t = DVector::from_column_slice(theta);
    0.5 * t.dot(&(g * &t)) - c.dot(&t) + lambda * theta[1..].iter().map(|v| v.abs()).sum::<f64>()
}

/// Best point on the segment `from -> to` among `to` and the points where a coordinate
/// crosses zero; crossing coordinates are set to exactly zero.
fn line_search(g: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, from: &[f64], to: &[f64]) -> Vec<f64> {
    let mut best = to.to_vec();
    let mut best_f = objective(g, c, lambda, &best);
    for j in 1..from.len() {
        if from[j] != 0.0 && from[j] * to[j] <= 0.0 {
            let t = from[j] / (from[j] - to[j]);
            let mut point: Vec<f64> = from.iter().zip(to).map(|(a, b)| a + t * (b - a)).collect();
            point[j] = 0.0;
            let f = objective(g, c, lambda, &point);
            if f < best_f {
                best_f = f;
                best = point;
            }
        }
    }
    best
}

/// Encoder weights: weighted least squares with an L1 penalty `sqrt(gamma)` on every
/// coordinate except the intercept.
///
/// For `gamma = 0` the normal equations are solved directly when `G` is safely positive definite.
pub fn m_step_theta(z_means: &[Vec<f64>], phi: &[DesignMatrix], sigma2: &[f64], gamma: f64, theta0: &[f64]) -> Result<Vec<f64>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be a nonnegative number, got {gamma}")));
    }
    let (g, c) = normal_equations(z_means, phi, sigma2);
    if gamma == 0.0 {
        if let Some(chol) = g.clone().cholesky() {
            let theta = chol.solve(&c);
            // a numerically singular G can factor yet give a useless solution
            if theta.iter().all(|t| t.is_finite()) && (&g * &theta - &c).amax() <= 1e-9 * c.amax().max(1.0) {
                return Ok(theta.iter().copied().collect());
            }
        }
    }
    lasso(&g, &c, gamma.sqrt(), theta0)
}

/// `sigma2_k = mean_i <(z_ik - (Phi_i theta)_k)^2>`.
pub fn m_step_sigma(z_means: &[Vec<f64>], z_vars: &[Vec<f64>], phi: &[DesignMatrix], theta: &[f64]) -> Vec<f64> {
    let d = z_means[0].len();
    let n = z_means.len() as f64;
    let mut out = vec![0.0; d];
    for ((m, v), ph) in z_means.iter().zip(z_vars).zip(phi) {
        let mu = ph.mul_vec(theta);
        for k in 0..d {
            out[k] += v[k] + (m[k] - mu[k]) * (m[k] - mu[k]);
        }
    }
    floor_mean(out, n)
}

/// `s_j = mean_i <(U_f - W U_c)_j^2>`.
pub fn m_step_s(resid_sq: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; resid_sq[0].len()];
    for r in resid_sq {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    floor_mean(out, resid_sq.len() as f64)
}

fn floor_mean(mut sums: Vec<f64>, n: f64) -> Vec<f64> {
    let mut floored = 0;
    for v in sums.iter_mut() {
        *v /= n;
        if !(*v >= VARIANCE_FLOOR) {
            *v = VARIANCE_FLOOR;
            floored += 1;
        }
    }
    if floored > 0 {
        log::debug!("{floored} variance(s) raised to the floor {VARIANCE_FLOOR:e}");
    }
    sums
}
