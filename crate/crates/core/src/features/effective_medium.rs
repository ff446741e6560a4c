//! Closed-form and implicit two-phase effective conductivity estimates (2D).

use crate::error::{Error, Result};

fn validate(lambda_mat: f64, lambda_inc: f64, phi_inc: f64) -> Result<()> {
    if !(lambda_mat > 0.0 && lambda_mat.is_finite() && lambda_inc > 0.0 && lambda_inc.is_finite()) {
        return Err(Error::Domain(format!(
            "phase conductivities must be positive, got {lambda_mat} and {lambda_inc}"
        )));
    }
    if !(0.0..=1.0).contains(&phi_inc) {
        return Err(Error::Domain(format!("inclusion fraction {phi_inc} outside [0,1]")));
    }
    Ok(())
}

/// Maxwell-Garnett estimate for dilute inclusions in a matrix.
pub fn mga(lambda_mat: f64, lambda_inc: f64, phi_inc: f64) -> Result<f64> {
    validate(lambda_mat, lambda_inc, phi_inc)?;
    let d = phi_inc * (lambda_inc - lambda_mat);
    let den = lambda_mat + lambda_inc - d;
    if den <= 0.0 {
        return Err(Error::numeric("Maxwell-Garnett denominator is nonpositive", den));
    }
    Ok(lambda_mat * (lambda_mat + lambda_inc + d) / den)
}

/// Self-consistent (Bruggeman) estimate; symmetric under phase inversion.
pub fn sca(lambda_mat: f64, lambda_inc: f64, phi_inc: f64) -> Result<f64> {
    validate(lambda_mat, lambda_inc, phi_inc)?;
    let phi_mat = 1.0 - phi_inc;
    let alpha = lambda_mat * (2.0 * phi_mat - 1.0) + lambda_inc * (2.0 * phi_inc - 1.0);
    let disc = alpha * alpha + 4.0 * lambda_mat * lambda_inc;
    // Rationalized branch for alpha < 0 avoids cancellation in alpha + sqrt(disc).
    if alpha >= 0.0 {
        Ok(0.5 * (alpha + disc.sqrt()))
    } else {
        Ok(2.0 * lambda_mat * lambda_inc / (disc.sqrt() - alpha))
    }
}

/// Residual of the integrated differential-effective-medium relation.
pub fn dem_residual(lambda_mat: f64, lambda_inc: f64, phi_inc: f64, lambda_eff: f64) -> f64 {
    (lambda_inc - lambda_eff) / (lambda_inc - lambda_mat) * (lambda_mat / lambda_eff).sqrt() - (1.0 - phi_inc)
}

const DEM_REL_TOL: f64 = 1e-12;

/// Differential effective medium: root of [`dem_residual`] between the phase values.
pub fn dem(lambda_mat: f64, lambda_inc: f64, phi_inc: f64) -> Result<f64> {
    validate(lambda_mat, lambda_inc, phi_inc)?;
    if lambda_mat == lambda_inc || phi_inc == 0.0 {
        return Ok(lambda_mat);
    }
    if phi_inc == 1.0 {
        return Ok(lambda_inc);
    }
    let g = |l: f64| dem_residual(lambda_mat, lambda_inc, phi_inc, l);
    let (mut a, mut b) = (lambda_mat.min(lambda_inc), lambda_mat.max(lambda_inc));
    let (mut ga, mut gb) = (g(a), g(b));
    if ga == 0.0 {
        return Ok(a);
    }
    if gb == 0.0 {
        return Ok(b);
    }
    if ga.signum() == gb.signum() {
        return Err(Error::numeric("DEM root is not bracketed", ga.min(gb)));
    }
    // Illinois-modified regula falsi with a bisection fallback.
    let mut side = 0i8;
    for _ in 0..200 {
        let mut c = (a * gb - b * ga) / (gb - ga);
        if !(c > a && c < b) {
            c = 0.5 * (a + b);
        }
        let gc = g(c);
        if gc == 0.0 || (b - a) <= DEM_REL_TOL * c {
            return Ok(c);
        }
        if gc.signum() == gb.signum() {
            b = c;
            gb = gc;
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            ga = gc;
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        }
        if (b - a) <= DEM_REL_TOL * a {
            return Ok(0.5 * (a + b));
        }
    }
    Err(Error::numeric("DEM root search did not converge", g(0.5 * (a + b))))
}
