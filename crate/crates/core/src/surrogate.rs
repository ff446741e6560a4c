//! The two-density generative model: encoder `z_c ~ N(Phi theta, diag sigma2)`,
//! coarse solve `U_c(z_c)`, decoder `U_f ~ N(W U_c, diag s)`.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_design_matrix, DesignMatrix, FeatureCatalog};
use crate::fem::{interpolation_matrix, CoarseSolver, CsrMatrix, HeatProblem, MeshSpec};
use crate::io;
use crate::microstructure::Microstructure;
use crate::rng;

/// Variances below this are raised to it before sampling or density evaluation.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Fitted parameters plus everything needed to rebuild the model.
///
/// `W` is not stored; it is the bilinear interpolation from `coarse_mesh` to `fine_mesh`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub s: Vec<f64>,
    pub coarse_mesh: MeshSpec,
    pub fine_mesh: MeshSpec,
    pub problem: HeatProblem,
    pub catalog: FeatureCatalog,
    pub catalog_hash: String,
    #[serde(default)]
    pub gamma: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.theta.len() != self.catalog.len() {
            return bad(format!("theta has {} entries for {} features", self.theta.len(), self.catalog.len()));
        }
        if self.sigma2.len() != self.coarse_mesh.n_elements() {
            return bad(format!(
                "sigma2 has {} entries for {} coarse elements",
                self.sigma2.len(),
                self.coarse_mesh.n_elements()
            ));
        }
        if self.s.len() != self.fine_mesh.n_nodes() {
            return bad(format!("s has {} entries for {} fine nodes", self.s.len(), self.fine_mesh.n_nodes()));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return bad("theta is not finite".into());
        }
        if self.sigma2.iter().chain(&self.s).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("variances must be positive and finite".into());
        }
        if self.catalog_hash != self.catalog.hash() {
            return bad("catalog hash does not match the stored catalog".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: ModelParams = io::read_json(path)?;
        p.validate()?;
        Ok(p)
    }

    pub fn nnz_theta(&self) -> usize {
        self.theta.iter().filter(|v| **v != 0.0).count()
    }
}

/// `log N(z | mean, diag sigma2)`.
pub fn encoder_log_density(z: &[f64], mean: &[f64], sigma2: &[f64]) -> f64 {
    diag_gaussian_log_density(z, mean, sigma2)
}

/// `log N(u_f | W u_c, diag s)`.
pub fn decoder_log_density(u_f: &[f64], u_c: &[f64], w: &CsrMatrix, s: &[f64]) -> f64 {
    diag_gaussian_log_density(u_f, &w.mul_vec(u_c), s)
}

fn diag_gaussian_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    assert!(x.len() == mean.len() && x.len() == var.len(), "dimension mismatch");
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| {
            let v = v.max(VARIANCE_FLOOR);
            -0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v)
        })
        .sum()
}

/// Decoder density with the fine-space quadratic form reduced to coarse dimension:
/// `|u_f - W u_c|^2_{S^-1} = r_min + (u_c - u_c*)^T M (u_c - u_c*)`, `M = W^T S^-1 W`.
#[derive(Clone, Debug)]
pub struct Decoder {
    w: CsrMatrix,
    s: Vec<f64>,
    m: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

/// Per-observation data for [`Decoder`].
#[derive(Clone, Debug)]
pub struct DecoderTarget {
    pub uc_star: DVector<f64>,
    pub r_min: f64,
}

impl Decoder {
    pub fn new(w: CsrMatrix, s: &[f64]) -> Result<Self> {
        if s.len() != w.nrows {
            return Err(Error::Config(format!("s has {} entries for {} fine nodes", s.len(), w.nrows)));
        }
        let s: Vec<f64> = s.iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
        let mut m = DMatrix::<f64>::zeros(w.ncols, w.ncols);
        for (j, sj) in s.iter().enumerate() {
            let row: Vec<(usize, f64)> = w.row(j).collect();
            for &(a, va) in &row {
                for &(b, vb) in &row {
                    m[(a, b)] += va * vb / sj;
                }
            }
        }
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numeric("W^T S^-1 W is not positive definite", f64::NAN))?;
        let log_norm = -0.5 * s.iter().map(|v| LN_2PI + v.ln()).sum::<f64>();
        Ok(Decoder { w, s, m, chol, log_norm })
    }

    pub fn w(&self) -> &CsrMatrix {
        &self.w
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn target(&self, u_f: &[f64]) -> DecoderTarget {
        let mut b = DVector::zeros(self.w.ncols);
        for (j, (u, sj)) in u_f.iter().zip(&self.s).enumerate() {
            for (c, v) in self.w.row(j) {
                b[c] += v * u / sj;
            }
        }
        let uc_star = self.chol.solve(&b);
        let fitted = self.w.mul_vec(uc_star.as_slice());
        let r_min = u_f
            .iter()
            .zip(&fitted)
            .zip(&self.s)
            .map(|((u, f), sj)| (u - f) * (u - f) / sj)
            .sum();
        DecoderTarget { uc_star, r_min }
    }

    /// `|u_f - W u_c|^2_{S^-1}`.
    pub fn quadratic(&self, t: &DecoderTarget, u_c: &[f64]) -> f64 {
        let n = u_c.len();
        let d: Vec<f64> = (0..n).map(|a| u_c[a] - t.uc_star[a]).collect();
        let mut q = 0.0;
        for b in 0..n {
            let col = self.m.column(b);
            let mut acc = 0.0;
            for a in 0..n {
                acc += col[a] * d[a];
            }
            q += acc * d[b];
        }
        t.r_min + q.max(0.0)
    }

    pub fn log_density(&self, t: &DecoderTarget, u_c: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.quadratic(t, u_c)
    }

    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }
}

/// Streaming per-node mean and variance (Welford), mergeable in a fixed order.
#[derive(Clone, Debug)]
pub struct Moments {
    pub n: usize,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Moments {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        for ((m, m2), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d * inv;
            *m2 += d * (v - *m);
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let n = (self.n + other.n) as f64;
        let w = other.n as f64 / n;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * w;
            self.m2[i] += other.m2[i] + d * d * self.n as f64 * w;
        }
        self.n += other.n;
    }

    /// Population variance.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.m2.iter().map(|v| (v / n).max(0.0)).collect()
    }
}

/// Monte-Carlo approximation of the predictive density at one input.
#[derive(Clone, Debug)]
pub struct PredictiveEnsemble {
    pub n_samples: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Retained draws of `U_f` when requested.
    pub samples: Option<Vec<Vec<f64>>>,
}

/// Draws per random sub-stream; fixes the reduction order independently of thread count.
const BLOCK: usize = 64;

/// A model ready for sampling: parameters plus rebuilt `W`, coarse solver and decoder.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub params: ModelParams,
    solver: CoarseSolver,
    decoder: Decoder,
}

impl Surrogate {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let w = interpolation_matrix(&params.coarse_mesh, &params.fine_mesh)?;
        let solver = CoarseSolver::new(params.coarse_mesh, &params.problem.boundary_conditions(&params.coarse_mesh))?;
        let decoder = Decoder::new(w, &params.s)?;
        Ok(Surrogate { params, solver, decoder })
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn solver(&self) -> &CoarseSolver {
        &self.solver
    }

    pub fn design_matrix(&self, micro: &Microstructure) -> Result<DesignMatrix> {
        build_design_matrix(micro, &self.params.coarse_mesh, &self.params.catalog)
    }

    /// `Phi theta`.
    pub fn encoder_mean(&self, phi: &DesignMatrix) -> Vec<f64> {
        phi.mul_vec(&self.params.theta)
    }

    fn draw_z(&self, mean: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        mean.iter()
            .zip(&self.params.sigma2)
            .map(|(m, v)| m + v.max(VARIANCE_FLOOR).sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn solve_z(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.solver.solve_log(z).map_err(|e| match e {
            Error::Numeric { message, residual } => Error::Numeric {
                message: format!("{message}; z_c draw {z:?}"),
                residual,
            },
            other => other,
        })
    }

    pub fn predict(&self, micro: &Microstructure, n_samples: usize, seed: u64, keep_samples: bool) -> Result<PredictiveEnsemble> {
        let phi = self.design_matrix(micro)?;
        self.predict_from_mean(&self.encoder_mean(&phi), n_samples, seed, keep_samples)
    }

    /// Ensemble for encoder mean `mean_z`.
    pub fn predict_from_mean(&self, mean_z: &[f64], n_samples: usize, seed: u64, keep_samples: bool) -> Result<PredictiveEnsemble> {
        if n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        let n_f = self.params.fine_mesh.n_nodes();
        let n_blocks = n_samples.div_ceil(BLOCK);
        let s_sqrt: Vec<f64> = self.decoder.s.iter().map(|v| v.sqrt()).collect();
        let blocks: Vec<(Moments, Vec<Vec<f64>>)> = (0..n_blocks)
            .into_par_iter()
            .map(|b| {
                let mut rng = rng::stream(rng::derive_seed(&[seed, b as u64]), 0x707265);
                let count = BLOCK.min(n_samples - b * BLOCK);
                let mut mom = Moments::new(n_f);
                let mut kept = Vec::new();
                for _ in 0..count {
                    let z = self.draw_z(mean_z, &mut rng);
                    let uc = self.solve_z(&z)?;
                    let mut uf = self.decoder.w.mul_vec(&uc);
                    for (u, sd) in uf.iter_mut().zip(&s_sqrt) {
                        *u += sd * rng.sample::<f64, _>(StandardNormal);
                    }
                    mom.push(&uf);
                    if keep_samples {
                        kept.push(uf);
                    }
                }
                Ok((mom, kept))
            })
            .collect::<Result<_>>()?;
        let mut total = Moments::new(n_f);
        let mut samples = keep_samples.then(Vec::new);
        for (m, kept) in blocks {
            total.merge(&m);
            if let Some(s) = samples.as_mut() {
                s.extend(kept);
            }
        }
        Ok(PredictiveEnsemble {
            n_samples,
            variance: total.variance(),
            mean: total.mean,
            samples,
        })
    }

    /// `log (1/M) sum_m N(u_f | W U_c(z_m), S)` with `z_m ~ N(mean_z, diag sigma2)`.
    pub fn log_predictive_density(&self, mean_z: &[f64], target: &DecoderTarget, n_samples: usize, seed: u64) -> Result<f64> {
        let mut rng = rng::stream(seed, 0x6c7064);
        let mut logs = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let z = self.draw_z(mean_z, &mut rng);
            let uc = self.solve_z(&z)?;
            logs.push(self.decoder.log_density(target, &uc));
        }
        Ok(log_sum_exp(&logs) - (n_samples as f64).ln())
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
