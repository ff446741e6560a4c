use nalgebra::{DMatrix, DVector};

use super::{element_stiffness, flux_load, prescribed_values, validate_conductivity};
use super::{BoundaryConditions, FemSolution, MeshSpec};
use crate::error::{Error, Result};

/// Repeated direct solves on a small mesh whose boundary data is fixed.
///
/// The flux load does not depend on conductivity, so only the stiffness is
/// rebuilt per call: `K(lambda) = sum_e lambda_e K_e` followed by a dense Cholesky.
#[derive(Clone, Debug)]
pub struct CoarseSolver {
    mesh: MeshSpec,
    ke: [[f64; 4]; 4],
    elements: Vec<[usize; 4]>,
    /// Reduced index per node, `None` for Dirichlet nodes.
    reduced_index: Vec<Option<usize>>,
    prescribed: Vec<Option<f64>>,
    free_load: Vec<f64>,
    n_free: usize,
}

impl CoarseSolver {
    pub fn new(mesh: MeshSpec, bc: &BoundaryConditions) -> Result<Self> {
        let prescribed = prescribed_values(&mesh, bc)?;
        let (hx, hy) = mesh.element_size();
        let mut elements = Vec::with_capacity(mesh.n_elements());
        for ey in 0..mesh.nel_y {
            for ex in 0..mesh.nel_x {
                elements.push(mesh.element_nodes(ex, ey));
            }
        }
        let load = flux_load(&mesh, &bc.flux);
        let mut reduced_index = vec![None; mesh.n_nodes()];
        let mut free_load = Vec::new();
        for (node, p) in prescribed.iter().enumerate() {
            if p.is_none() {
                reduced_index[node] = Some(free_load.len());
                free_load.push(load[node]);
            }
        }
        let n_free = free_load.len();
        Ok(CoarseSolver {
            mesh,
            ke: element_stiffness(hx, hy),
            elements,
            reduced_index,
            prescribed,
            free_load,
            n_free,
        })
    }

    pub fn mesh(&self) -> &MeshSpec {
        &self.mesh
    }

    pub fn n_nodes(&self) -> usize {
        self.mesh.n_nodes()
    }

    /// Nodal solution for per-element conductivities.
    pub fn solve(&self, conductivity: &[f64]) -> Result<Vec<f64>> {
        validate_conductivity(&self.mesh, conductivity)?;
        let m = self.n_free;
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DVector::from_column_slice(&self.free_load);
        for (nodes, &lam) in self.elements.iter().zip(conductivity) {
            for (la, &na) in nodes.iter().enumerate() {
                let Some(ra) = self.reduced_index[na] else { continue };
                for (lb, &nb) in nodes.iter().enumerate() {
                    let v = lam * self.ke[la][lb];
                    match (self.reduced_index[nb], self.prescribed[nb]) {
                        (Some(rb), _) => a[(ra, rb)] += v,
                        (None, Some(u)) => rhs[ra] -= v * u,
                        (None, None) => unreachable!("node is either free or prescribed"),
                    }
                }
            }
        }
        let mut nodal: Vec<f64> = self.prescribed.iter().map(|p| p.unwrap_or(0.0)).collect();
        if m > 0 {
            let chol = a.cholesky().ok_or_else(|| {
                Error::numeric("coarse stiffness is not positive definite", f64::NAN)
            })?;
            let x = chol.solve(&rhs);
            for (node, r) in self.reduced_index.iter().enumerate() {
                if let Some(r) = r {
                    nodal[node] = x[*r];
                }
            }
        }
        if nodal.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("coarse solution is not finite", f64::INFINITY));
        }
        Ok(nodal)
    }

    /// Solve with `lambda = exp(z)`.
    pub fn solve_log(&self, z: &[f64]) -> Result<Vec<f64>> {
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("log-conductivity {bad} is not finite")));
        }
        let lambda: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        self.solve(&lambda)
    }
}

/// Coarse solution for log-conductivities `z_c`.
pub fn coarse_solve(mesh: &MeshSpec, z_c: &[f64], bc: &BoundaryConditions) -> Result<FemSolution> {
    let nodal = CoarseSolver::new(*mesh, bc)?.solve_log(z_c)?;
    Ok(FemSolution {
        mesh: *mesh,
        nodal_values: nodal,
    })
}

#[cfg(test)]
mod tests {
    use super::super::solve;
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_log_conductivity_matches_unit_solve() {
        let mesh = MeshSpec::square(2).unwrap();
        let bc = BoundaryConditions::reference(&mesh);
        let a = coarse_solve(&mesh, &[0.0; 4], &bc).unwrap();
        let b = solve(&mesh, &[1.0; 4], &bc).unwrap();
        for (x, y) in a.nodal_values.iter().zip(&b.nodal_values) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn constant_shift_scales_deviation() {
        let mesh = MeshSpec::square(4).unwrap();
        let bc = BoundaryConditions::reference(&mesh);
        let z: Vec<f64> = (0..16).map(|e| 0.1 * (e % 5) as f64 - 0.2).collect();
        let kappa = 0.7;
        let shifted: Vec<f64> = z.iter().map(|v| v + kappa).collect();
        let a = coarse_solve(&mesh, &z, &bc).unwrap();
        let b = coarse_solve(&mesh, &shifted, &bc).unwrap();
        for (ua, ub) in a.nodal_values.iter().zip(&b.nodal_values) {
            assert_abs_diff_eq!(ub + 50.0, (ua + 50.0) * (-kappa).exp(), epsilon = 1e-10);
        }
        assert_eq!(b.nodal_values[mesh.upper_left_node()], -50.0);
    }

    #[test]
    fn agrees_with_sparse_path() {
        let mesh = MeshSpec::new(3, 5).unwrap();
        let bc = BoundaryConditions::reference(&mesh);
        let lambda: Vec<f64> = (0..15).map(|e| 1.0 + (e * 7 % 4) as f64).collect();
        let a = CoarseSolver::new(mesh, &bc).unwrap().solve(&lambda).unwrap();
        let b = solve(&mesh, &lambda, &bc).unwrap();
        for (x, y) in a.iter().zip(&b.nodal_values) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-8);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mesh = MeshSpec::square(2).unwrap();
        let solver = CoarseSolver::new(mesh, &BoundaryConditions::reference(&mesh)).unwrap();
        assert!(solver.solve_log(&[0.0, f64::NAN, 0.0, 0.0]).is_err());
    }
}
