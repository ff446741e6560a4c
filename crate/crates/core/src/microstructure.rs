//! Random binary media obtained by thresholding a stationary Gaussian field.
//!
//! Grids are stored row-major with `y` varying slowest: cell `(ix, iy)` lives at
//! index `iy * nx + ix`, `iy = 0` is the bottom row and the cell center is
//! `((ix + 0.5) / nx, (iy + 0.5) / ny)` on the unit square.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Squared-exponential Gaussian field on a regular cell grid over `[0,1]^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    pub grid_nx: usize,
    pub grid_ny: usize,
    /// Correlation length `l` in domain units.
    pub length_scale: f64,
}

impl GrfSpec {
    pub fn new(grid_nx: usize, grid_ny: usize, length_scale: f64) -> Result<Self> {
        let spec = GrfSpec {
            grid_nx,
            grid_ny,
            length_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_nx == 0 || self.grid_ny == 0 {
            return Err(Error::Domain("grid must have at least one cell per axis".into()));
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::Domain(format!(
                "length scale must be positive, got {}",
                self.length_scale
            )));
        }
        Ok(())
    }

    /// `exp(-|d|^2 / l^2)`.
    pub fn covariance(&self, dx: f64, dy: f64) -> f64 {
        (-(dx * dx + dy * dy) / (self.length_scale * self.length_scale)).exp()
    }

    pub fn len(&self) -> usize {
        self.grid_nx * self.grid_ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Two-phase conductivity assignment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediumSpec {
    pub lambda_hi: f64,
    pub lambda_lo: f64,
    /// Target volume fraction of the high phase.
    pub phi_hi: f64,
    pub contrast_ratio: f64,
}

impl MediumSpec {
    pub fn new(lambda_hi: f64, lambda_lo: f64, phi_hi: f64) -> Result<Self> {
        if !(lambda_lo > 0.0 && lambda_lo.is_finite()) {
            return Err(Error::Domain(format!("lambda_lo must be positive, got {lambda_lo}")));
        }
        if !(lambda_hi > lambda_lo && lambda_hi.is_finite()) {
            return Err(Error::Domain(format!(
                "lambda_hi ({lambda_hi}) must exceed lambda_lo ({lambda_lo})"
            )));
        }
        if !(phi_hi > 0.0 && phi_hi < 1.0) {
            return Err(Error::Domain(format!("phi_hi must lie in (0,1), got {phi_hi}")));
        }
        Ok(MediumSpec {
            lambda_hi,
            lambda_lo,
            phi_hi,
            contrast_ratio: lambda_hi / lambda_lo,
        })
    }

    /// Medium with `lambda_lo` fixed and `lambda_hi = contrast * lambda_lo`.
    pub fn with_contrast(lambda_lo: f64, contrast: f64, phi_hi: f64) -> Result<Self> {
        Self::new(lambda_lo * contrast, lambda_lo, phi_hi)
    }
}

/// Binary conductivity field, one value per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Microstructure {
    pub nx: usize,
    pub ny: usize,
    /// `true` where the cell holds the high-conductivity phase.
    pub high: Vec<bool>,
    pub medium: MediumSpec,
}

impl Microstructure {
    pub fn new(nx: usize, ny: usize, high: Vec<bool>, medium: MediumSpec) -> Result<Self> {
        if high.len() != nx * ny {
            return Err(Error::Domain(format!(
                "phase grid has {} cells, expected {}x{}",
                high.len(),
                nx,
                ny
            )));
        }
        Ok(Microstructure { nx, ny, high, medium })
    }

    /// Rebuilds labels from conductivity values; every value must equal one of the phases.
    pub fn from_conductivities(nx: usize, ny: usize, values: &[f64], medium: MediumSpec) -> Result<Self> {
        let high = values
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                if v == medium.lambda_hi {
                    Ok(true)
                } else if v == medium.lambda_lo {
                    Ok(false)
                } else {
                    Err(Error::Data(format!("cell {k} has conductivity {v}, not a phase value")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(nx, ny, high, medium)
    }

    pub fn conductivity(&self, k: usize) -> f64 {
        if self.high[k] {
            self.medium.lambda_hi
        } else {
            self.medium.lambda_lo
        }
    }

    pub fn conductivities(&self) -> Vec<f64> {
        (0..self.high.len()).map(|k| self.conductivity(k)).collect()
    }

    pub fn volume_fraction_hi(&self) -> f64 {
        self.high.iter().filter(|&&h| h).count() as f64 / self.high.len() as f64
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Gaussian level `c` with `P(xi > c) = phi_hi` for a unit-variance field.
///
/// Computed by bisection on the CDF to 1e-12 absolute. The result is odd about
/// `phi_hi = 0.5`, so `threshold_level(1 - p) == -threshold_level(p)` bit for bit.
pub fn threshold_level(phi_hi: f64) -> Result<f64> {
    if !(phi_hi > 0.0 && phi_hi < 1.0) {
        return Err(Error::Domain(format!("volume fraction must lie in (0,1), got {phi_hi}")));
    }
    if phi_hi == 0.5 {
        return Ok(0.0);
    }
    // Solve for the upper tail q <= 0.5 and mirror.
    let (q, sign) = if phi_hi < 0.5 { (phi_hi, 1.0) } else { (1.0 - phi_hi, -1.0) };
    // P(xi > c) = 1 - Phi(c) = Phi(-c); find c >= 0 with Phi(-c) = q.
    let (mut lo, mut hi) = (0.0_f64, 40.0_f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(-mid) > q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(sign * 0.5 * (lo + hi))
}

/// Exact stationary sampler using circulant embedding on a padded periodic grid.
pub struct GrfSampler {
    spec: GrfSpec,
    m1: usize,
    m2: usize,
    /// `sqrt(eigenvalue / (m1 m2))` of the embedded covariance.
    sqrt_eigen: Vec<f64>,
    fft_x: Arc<dyn Fft<f64>>,
    fft_y: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for GrfSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrfSampler")
            .field("spec", &self.spec)
            .field("embedding", &(self.m1, self.m2))
            .finish()
    }
}

const MAX_PAD_FACTOR: usize = 32;
const NEGATIVE_EIGEN_TOL: f64 = 1e-8;

impl GrfSampler {
    pub fn new(spec: GrfSpec) -> Result<Self> {
        spec.validate()?;
        let mut pad = 2;
        loop {
            let m1 = pad * spec.grid_nx;
            let m2 = pad * spec.grid_ny;
            let mut planner = FftPlanner::new();
            let fft_x = planner.plan_fft_forward(m1);
            let fft_y = planner.plan_fft_forward(m2);
            let hx = 1.0 / spec.grid_nx as f64;
            let hy = 1.0 / spec.grid_ny as f64;
            let mut base = vec![Complex::new(0.0, 0.0); m1 * m2];
            for k2 in 0..m2 {
                let dy = k2.min(m2 - k2) as f64 * hy;
                for k1 in 0..m1 {
                    let dx = k1.min(m1 - k1) as f64 * hx;
                    base[k2 * m1 + k1] = Complex::new(spec.covariance(dx, dy), 0.0);
                }
            }
            fft2(&mut base, m1, m2, fft_x.as_ref(), fft_y.as_ref());
            let max = base.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max);
            let min = base.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
            if min < 0.0 && -min > NEGATIVE_EIGEN_TOL * max {
                if pad >= MAX_PAD_FACTOR {
                    return Err(Error::numeric(
                        "circulant embedding is not nonnegative definite at maximum padding",
                        min / max,
                    ));
                }
                pad *= 2;
                continue;
            }
            let norm = (m1 * m2) as f64;
            let sqrt_eigen = base.iter().map(|c| (c.re.max(0.0) / norm).sqrt()).collect();
            return Ok(GrfSampler {
                spec,
                m1,
                m2,
                sqrt_eigen,
                fft_x,
                fft_y,
            });
        }
    }

    pub fn spec(&self) -> &GrfSpec {
        &self.spec
    }

    /// Embedding grid dimensions.
    pub fn embedding(&self) -> (usize, usize) {
        (self.m1, self.m2)
    }

    /// One zero-mean unit-variance realization at cell centers.
    pub fn sample(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, 0x6772_66);
        let mut work: Vec<Complex<f64>> = self
            .sqrt_eigen
            .iter()
            .map(|&a| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex::new(a * re, a * im)
            })
            .collect();
        fft2(&mut work, self.m1, self.m2, self.fft_x.as_ref(), self.fft_y.as_ref());
        let (nx, ny) = (self.spec.grid_nx, self.spec.grid_ny);
        let mut out = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                out.push(work[iy * self.m1 + ix].re);
            }
        }
        out
    }
}

fn fft2(data: &mut [Complex<f64>], m1: usize, m2: usize, fft_x: &dyn Fft<f64>, fft_y: &dyn Fft<f64>) {
    for row in data.chunks_exact_mut(m1) {
        fft_x.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); m2];
    for k1 in 0..m1 {
        for k2 in 0..m2 {
            column[k2] = data[k2 * m1 + k1];
        }
        fft_y.process(&mut column);
        for k2 in 0..m2 {
            data[k2 * m1 + k1] = column[k2];
        }
    }
}

/// One field realization; builds a fresh sampler. Prefer [`GrfSampler`] for batches.
pub fn sample_grf(spec: GrfSpec, seed: u64) -> Result<Vec<f64>> {
    Ok(GrfSampler::new(spec)?.sample(seed))
}

/// High phase where `field > c`, ties go to the low phase.
pub fn threshold_field(field: &[f64], nx: usize, ny: usize, medium: MediumSpec) -> Result<Microstructure> {
    let c = threshold_level(medium.phi_hi)?;
    let high = field.iter().map(|&v| v > c).collect();
    Microstructure::new(nx, ny, high, medium)
}

/// Field sampling plus thresholding for a fixed medium.
#[derive(Debug)]
pub struct MicrostructureGenerator {
    sampler: GrfSampler,
    medium: MediumSpec,
}

impl MicrostructureGenerator {
    pub fn new(grf: GrfSpec, medium: MediumSpec) -> Result<Self> {
        Ok(MicrostructureGenerator {
            sampler: GrfSampler::new(grf)?,
            medium,
        })
    }

    pub fn generate(&self, seed: u64) -> Microstructure {
        let spec = self.sampler.spec();
        let field = self.sampler.sample(seed);
        threshold_field(&field, spec.grid_nx, spec.grid_ny, self.medium)
            .expect("medium validated at construction")
    }

    pub fn grf(&self) -> &GrfSpec {
        self.sampler.spec()
    }

    pub fn medium(&self) -> &MediumSpec {
        &self.medium
    }
}
