//! Bilinear quadrilateral finite elements for `-div(lambda grad U) = 0` on the unit square.
//!
//! Node `(i, j)` has id `j * (nel_x + 1) + i` and sits at `(i / nel_x, j / nel_y)`.
//! Element `(ex, ey)` has id `ey * nel_x + ex` and local nodes ordered
//! counter-clockwise from the lower-left corner.

mod coarse;
mod interpolation;
pub mod sparse;

pub use coarse::{coarse_solve, CoarseSolver};
pub use interpolation::interpolation_matrix;
pub use sparse::{pcg, CgReport, CsrMatrix};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular mesh of axis-aligned quadrilaterals on `[0,1]^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeshSpec {
    pub nel_x: usize,
    pub nel_y: usize,
}

impl MeshSpec {
    pub fn new(nel_x: usize, nel_y: usize) -> Result<Self> {
        if nel_x == 0 || nel_y == 0 {
            return Err(Error::Domain("mesh needs at least one element per axis".into()));
        }
        Ok(MeshSpec { nel_x, nel_y })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn n_nodes(&self) -> usize {
        (self.nel_x + 1) * (self.nel_y + 1)
    }

    pub fn n_elements(&self) -> usize {
        self.nel_x * self.nel_y
    }

    pub fn node_id(&self, i: usize, j: usize) -> usize {
        j * (self.nel_x + 1) + i
    }

    pub fn node_coords(&self, id: usize) -> (f64, f64) {
        let i = id % (self.nel_x + 1);
        let j = id / (self.nel_x + 1);
        (i as f64 / self.nel_x as f64, j as f64 / self.nel_y as f64)
    }

    pub fn element_size(&self) -> (f64, f64) {
        (1.0 / self.nel_x as f64, 1.0 / self.nel_y as f64)
    }

    /// Counter-clockwise node ids of element `(ex, ey)`.
    pub fn element_nodes(&self, ex: usize, ey: usize) -> [usize; 4] {
        [
            self.node_id(ex, ey),
            self.node_id(ex + 1, ey),
            self.node_id(ex + 1, ey + 1),
            self.node_id(ex, ey + 1),
        ]
    }

    /// Node at `(0, 1)`.
    pub fn upper_left_node(&self) -> usize {
        self.node_id(0, self.nel_y)
    }

    /// All nodes on the domain boundary, ascending.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&id| {
                let i = id % (self.nel_x + 1);
                let j = id / (self.nel_x + 1);
                i == 0 || j == 0 || i == self.nel_x || j == self.nel_y
            })
            .collect()
    }
}

/// Heat-flux vector field `Q(x, y) = (qx0 + qx_x x + qx_y y, qy0 + qy_x x + qy_y y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFlux {
    pub qx: [f64; 3],
    pub qy: [f64; 3],
}

impl AffineFlux {
    pub const ZERO: AffineFlux = AffineFlux {
        qx: [0.0; 3],
        qy: [0.0; 3],
    };

    /// `Q = (150 - 30 y, 100 - 30 x)`.
    pub fn reference() -> Self {
        AffineFlux {
            qx: [150.0, 0.0, -30.0],
            qy: [100.0, -30.0, 0.0],
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.qx[0] + self.qx[1] * x + self.qx[2] * y,
            self.qy[0] + self.qy[1] * x + self.qy[2] * y,
        )
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }
}

/// Dirichlet constraints plus a prescribed flux on the rest of the boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    /// `(node id, temperature)` pairs.
    pub dirichlet: Vec<(usize, f64)>,
    pub flux: AffineFlux,
}

impl BoundaryConditions {
    /// Upper-left corner pinned to `corner_value`, flux `flux` elsewhere.
    pub fn corner_pinned(mesh: &MeshSpec, corner_value: f64, flux: AffineFlux) -> Self {
        BoundaryConditions {
            dirichlet: vec![(mesh.upper_left_node(), corner_value)],
            flux,
        }
    }

    /// Corner at `-50`, reference flux field.
    pub fn reference(mesh: &MeshSpec) -> Self {
        Self::corner_pinned(mesh, -50.0, AffineFlux::reference())
    }

    /// Every boundary node constrained to `u(x, y)`; no flux load.
    pub fn all_dirichlet(mesh: &MeshSpec, u: impl Fn(f64, f64) -> f64) -> Self {
        let dirichlet = mesh
            .boundary_nodes()
            .into_iter()
            .map(|id| {
                let (x, y) = mesh.node_coords(id);
                (id, u(x, y))
            })
            .collect();
        BoundaryConditions {
            dirichlet,
            flux: AffineFlux::ZERO,
        }
    }
}

/// Mesh-independent description of the corner-pinned problem, used to rebuild
/// boundary conditions on any resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatProblem {
    pub corner_value: f64,
    pub flux: AffineFlux,
}

impl Default for HeatProblem {
    fn default() -> Self {
        HeatProblem {
            corner_value: -50.0,
            flux: AffineFlux::reference(),
        }
    }
}

impl HeatProblem {
    pub fn boundary_conditions(&self, mesh: &MeshSpec) -> BoundaryConditions {
        BoundaryConditions::corner_pinned(mesh, self.corner_value, self.flux)
    }
}

/// Nodal temperatures on a mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct FemSolution {
    pub mesh: MeshSpec,
    pub nodal_values: Vec<f64>,
}

const GAUSS_2: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];

/// Unit-conductivity stiffness of one `hx x hy` element, 2x2 Gauss quadrature.
pub fn element_stiffness(hx: f64, hy: f64) -> [[f64; 4]; 4] {
    // reference coordinates of the local nodes
    const XI: [f64; 4] = [-1.0, 1.0, 1.0, -1.0];
    const ETA: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];
    let mut k = [[0.0; 4]; 4];
    let det_j = hx * hy / 4.0;
    for &xi in &GAUSS_2 {
        for &eta in &GAUSS_2 {
            let mut grad = [[0.0; 2]; 4];
            for a in 0..4 {
                let dn_dxi = 0.25 * XI[a] * (1.0 + ETA[a] * eta);
                let dn_deta = 0.25 * ETA[a] * (1.0 + XI[a] * xi);
                grad[a] = [dn_dxi * 2.0 / hx, dn_deta * 2.0 / hy];
            }
            for a in 0..4 {
                for b in 0..4 {
                    k[a][b] += (grad[a][0] * grad[b][0] + grad[a][1] * grad[b][1]) * det_j;
                }
            }
        }
    }
    k
}

/// Boundary load `-int N_a (Q . n) ds`, one entry per mesh node.
pub fn flux_load(mesh: &MeshSpec, flux: &AffineFlux) -> Vec<f64> {
    let mut f = vec![0.0; mesh.n_nodes()];
    if flux.is_zero() {
        return f;
    }
    let (hx, hy) = mesh.element_size();
    // (node a, node b, outward normal, edge length), parametrized from a to b
    let mut edges: Vec<(usize, usize, (f64, f64), f64)> = Vec::new();
    for i in 0..mesh.nel_x {
        edges.push((mesh.node_id(i, 0), mesh.node_id(i + 1, 0), (0.0, -1.0), hx));
        edges.push((mesh.node_id(i, mesh.nel_y), mesh.node_id(i + 1, mesh.nel_y), (0.0, 1.0), hx));
    }
    for j in 0..mesh.nel_y {
        edges.push((mesh.node_id(0, j), mesh.node_id(0, j + 1), (-1.0, 0.0), hy));
        edges.push((mesh.node_id(mesh.nel_x, j), mesh.node_id(mesh.nel_x, j + 1), (1.0, 0.0), hy));
    }
    for (a, b, n, len) in edges {
        let (xa, ya) = mesh.node_coords(a);
        let (xb, yb) = mesh.node_coords(b);
        for &g in &GAUSS_2 {
            let t = 0.5 * (g + 1.0);
            let (x, y) = (xa + t * (xb - xa), ya + t * (yb - ya));
            let (qx, qy) = flux.eval(x, y);
            let qn = qx * n.0 + qy * n.1;
            let w = 0.5 * len;
            f[a] -= w * (1.0 - t) * qn;
            f[b] -= w * t * qn;
        }
    }
    f
}

/// Assembled stiffness with Dirichlet rows and columns eliminated.
#[derive(Clone, Debug)]
pub struct FemSystem {
    pub mesh: MeshSpec,
    /// Full stiffness before reduction.
    pub stiffness: CsrMatrix,
    /// Full load vector before reduction.
    pub load: Vec<f64>,
    /// Reduced SPD matrix over free nodes.
    pub reduced: CsrMatrix,
    pub reduced_rhs: Vec<f64>,
    /// Free node ids in reduced-index order.
    pub free_nodes: Vec<usize>,
    /// Prescribed value per node, `None` for free nodes.
    pub prescribed: Vec<Option<f64>>,
}

fn validate_conductivity(mesh: &MeshSpec, conductivity: &[f64]) -> Result<()> {
    if conductivity.len() != mesh.n_elements() {
        return Err(Error::Domain(format!(
            "conductivity has {} entries for {} elements",
            conductivity.len(),
            mesh.n_elements()
        )));
    }
    if let Some((e, v)) = conductivity.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("element {e} has nonpositive conductivity {v}")));
    }
    Ok(())
}

fn prescribed_values(mesh: &MeshSpec, bc: &BoundaryConditions) -> Result<Vec<Option<f64>>> {
    if bc.dirichlet.is_empty() {
        return Err(Error::Singular("no Dirichlet node; the pure-flux system is singular".into()));
    }
    let mut prescribed = vec![None; mesh.n_nodes()];
    for &(node, value) in &bc.dirichlet {
        if node >= mesh.n_nodes() {
            return Err(Error::Domain(format!("Dirichlet node {node} outside mesh")));
        }
        prescribed[node] = Some(value);
    }
    Ok(prescribed)
}

/// Assembles `K u = f` for per-element conductivity and eliminates Dirichlet nodes.
pub fn assemble(mesh: &MeshSpec, conductivity: &[f64], bc: &BoundaryConditions) -> Result<FemSystem> {
    validate_conductivity(mesh, conductivity)?;
    let prescribed = prescribed_values(mesh, bc)?;
    let (hx, hy) = mesh.element_size();
    let ke = element_stiffness(hx, hy);

    let mut triplets = Vec::with_capacity(16 * mesh.n_elements());
    for ey in 0..mesh.nel_y {
        for ex in 0..mesh.nel_x {
            let lam = conductivity[ey * mesh.nel_x + ex];
            let nodes = mesh.element_nodes(ex, ey);
            for a in 0..4 {
                for b in 0..4 {
                    triplets.push((nodes[a], nodes[b], lam * ke[a][b]));
                }
            }
        }
    }
    let n = mesh.n_nodes();
    let stiffness = CsrMatrix::from_triplets(n, n, &triplets);
    let load = flux_load(mesh, &bc.flux);

    let free_nodes: Vec<usize> = (0..n).filter(|&i| prescribed[i].is_none()).collect();
    let mut reduced_index = vec![usize::MAX; n];
    for (k, &node) in free_nodes.iter().enumerate() {
        reduced_index[node] = k;
    }
    let mut reduced_triplets = Vec::with_capacity(stiffness.nnz());
    let mut reduced_rhs: Vec<f64> = free_nodes.iter().map(|&i| load[i]).collect();
    for (k, &node) in free_nodes.iter().enumerate() {
        for (c, v) in stiffness.row(node) {
            match prescribed[c] {
                Some(u) => reduced_rhs[k] -= v * u,
                None => reduced_triplets.push((k, reduced_index[c], v)),
            }
        }
    }
    let m = free_nodes.len();
    let reduced = CsrMatrix::from_triplets(m, m, &reduced_triplets);
    Ok(FemSystem {
        mesh: *mesh,
        stiffness,
        load,
        reduced,
        reduced_rhs,
        free_nodes,
        prescribed,
    })
}

/// Relative tolerance of the fine-scale solve.
pub const SOLVE_REL_TOL: f64 = 1e-10;

impl FemSystem {
    /// Number of unknowns after Dirichlet elimination.
    pub fn n_equations(&self) -> usize {
        self.free_nodes.len()
    }

    /// Preconditioned CG on the reduced system, expanded to all nodes.
    pub fn solve(&self) -> Result<FemSolution> {
        let m = self.n_equations();
        let (x, _) = pcg(&self.reduced, &self.reduced_rhs, SOLVE_REL_TOL, (10 * m).max(10))?;
        Ok(self.expand(&x))
    }

    /// Full nodal vector from reduced unknowns.
    pub fn expand(&self, reduced: &[f64]) -> FemSolution {
        let mut nodal: Vec<f64> = self.prescribed.iter().map(|p| p.unwrap_or(0.0)).collect();
        for (k, &node) in self.free_nodes.iter().enumerate() {
            nodal[node] = reduced[k];
        }
        FemSolution {
            mesh: self.mesh,
            nodal_values: nodal,
        }
    }

    /// `K u - f` over all nodes; nonzero entries are the Dirichlet reactions.
    pub fn reactions(&self, solution: &FemSolution) -> Vec<f64> {
        let mut r = self.stiffness.mul_vec(&solution.nodal_values);
        for (ri, fi) in r.iter_mut().zip(&self.load) {
            *ri -= fi;
        }
        r
    }
}

/// Assemble and solve in one call.
pub fn solve(mesh: &MeshSpec, conductivity: &[f64], bc: &BoundaryConditions) -> Result<FemSolution> {
    assemble(mesh, conductivity, bc)?.solve()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn unit_element_stiffness() {
        let k = element_stiffness(0.5, 0.5);
        for a in 0..4 {
            assert_abs_diff_eq!(k[a][a], 2.0 / 3.0, epsilon = 1e-15);
            assert_abs_diff_eq!(k[a].iter().sum::<f64>(), 0.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(k[0][1], -1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(k[0][2], -1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn fully_constrained_single_element() {
        let mesh = MeshSpec::square(1).unwrap();
        let bc = BoundaryConditions::all_dirichlet(&mesh, |x, y| 3.0 * x - y);
        let sys = assemble(&mesh, &[1.0], &bc).unwrap();
        assert_eq!(sys.n_equations(), 0);
        let sol = sys.solve().unwrap();
        assert_eq!(sol.nodal_values, vec![0.0, 3.0, -1.0, 2.0]);
    }

    #[test]
    fn errors() {
        let mesh = MeshSpec::square(2).unwrap();
        let bc = BoundaryConditions::reference(&mesh);
        assert!(matches!(assemble(&mesh, &[1.0, 1.0, 0.0, 1.0], &bc), Err(Error::Domain(_))));
        assert!(matches!(assemble(&mesh, &[1.0; 3], &bc), Err(Error::Domain(_))));
        let free = BoundaryConditions {
            dirichlet: vec![],
            flux: AffineFlux::reference(),
        };
        assert!(matches!(assemble(&mesh, &[1.0; 4], &free), Err(Error::Singular(_))));
    }

    #[test]
    fn paper_scale_equation_count() {
        let mesh = MeshSpec::square(256).unwrap();
        assert_eq!(mesh.n_nodes(), 257 * 257);
        let prescribed = prescribed_values(&mesh, &BoundaryConditions::reference(&mesh)).unwrap();
        assert_eq!(prescribed.iter().filter(|p| p.is_none()).count(), 66048);
    }

    #[test]
    fn manufactured_affine_solution() {
        let mesh = MeshSpec::new(7, 5).unwrap();
        let u = |x: f64, y: f64| 1.5 * x - 0.7 * y + 0.2;
        let bc = BoundaryConditions::all_dirichlet(&mesh, u);
        let sol = solve(&mesh, &[2.5; 35], &bc).unwrap();
        for (id, v) in sol.nodal_values.iter().enumerate() {
            let (x, y) = mesh.node_coords(id);
            assert_abs_diff_eq!(*v, u(x, y), epsilon = 1e-10);
        }
    }

    #[test]
    fn reference_flux_is_balanced_and_heats_inflow_edges() {
        let mesh = MeshSpec::square(8).unwrap();
        let f = flux_load(&mesh, &AffineFlux::reference());
        // divergence-free field: zero net inflow
        assert_abs_diff_eq!(f.iter().sum::<f64>(), 0.0, epsilon = 1e-10);
        // left edge receives heat
        assert!(f[mesh.node_id(0, 4)] > 0.0);
        assert!(f[mesh.node_id(4, 0)] > 0.0);
        // interior left-edge node: (150 - 30 y) * h at y = 0.5
        assert_abs_diff_eq!(f[mesh.node_id(0, 4)], 135.0 / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn layered_series_conductance() {
        let n = 16;
        let mesh = MeshSpec::square(n).unwrap();
        let stripes: Vec<f64> = (0..n).map(|i| if i % 4 < 2 { 10.0 } else { 1.0 }).collect();
        let lambda: Vec<f64> = (0..n * n).map(|e| stripes[e % n]).collect();
        let mut dirichlet = Vec::new();
        for j in 0..=n {
            dirichlet.push((mesh.node_id(0, j), 1.0));
            dirichlet.push((mesh.node_id(n, j), 0.0));
        }
        let bc = BoundaryConditions {
            dirichlet,
            flux: AffineFlux::ZERO,
        };
        let sys = assemble(&mesh, &lambda, &bc).unwrap();
        let sol = sys.solve().unwrap();
        let r = sys.reactions(&sol);
        let outflow: f64 = -(0..=n).map(|j| r[mesh.node_id(n, j)]).sum::<f64>();
        let harmonic = n as f64 / stripes.iter().map(|l| 1.0 / l).sum::<f64>();
        assert_abs_diff_eq!(outflow, harmonic, epsilon = 1e-9 * harmonic);
    }

    #[test]
    fn small_reduced_matrix_is_spd() {
        for n in [1usize, 3, 6, 10] {
            let mesh = MeshSpec::square(n).unwrap();
            let lambda: Vec<f64> = (0..n * n).map(|e| 1.0 + (e % 3) as f64).collect();
            let sys = assemble(&mesh, &lambda, &BoundaryConditions::reference(&mesh)).unwrap();
            let dense = sys.reduced.to_dense();
            assert_eq!(dense, dense.transpose());
            let eig = nalgebra::SymmetricEigen::new(dense);
            assert!(eig.eigenvalues.min() > 0.0);
        }
    }

    proptest! {
        #[test]
        fn stiffness_rows_sum_to_zero(nx in 1usize..6, ny in 1usize..6, seed in 0u64..1000) {
            let mesh = MeshSpec::new(nx, ny).unwrap();
            let lambda: Vec<f64> = (0..nx * ny).map(|e| 0.5 + ((e as u64 * 2654435761 + seed) % 97) as f64 / 10.0).collect();
            let sys = assemble(&mesh, &lambda, &BoundaryConditions::reference(&mesh)).unwrap();
            for r in 0..mesh.n_nodes() {
                let s: f64 = sys.stiffness.row(r).map(|(_, v)| v).sum();
                let scale: f64 = sys.stiffness.row(r).map(|(_, v)| v.abs()).sum();
                prop_assert!(s.abs() <= 1e-13 * scale);
            }
            // reduced matrix is exactly symmetric
            let t = sys.reduced.transpose();
            prop_assert_eq!(&t, &sys.reduced);
        }

        #[test]
        fn scaling_conductivity_scales_deviation(k in 0.2f64..20.0, seed in 0u64..100) {
            let mesh = MeshSpec::square(4).unwrap();
            let bc = BoundaryConditions::reference(&mesh);
            let lambda: Vec<f64> = (0..16).map(|e| 1.0 + ((e as u64 + seed) % 5) as f64).collect();
            let scaled: Vec<f64> = lambda.iter().map(|l| l * k).collect();
            let a = solve(&mesh, &lambda, &bc).unwrap();
            let b = solve(&mesh, &scaled, &bc).unwrap();
            for (ua, ub) in a.nodal_values.iter().zip(&b.nodal_values) {
                let expected = (ua + 50.0) / k;
                prop_assert!((ub + 50.0 - expected).abs() <= 1e-8 * (1.0 + expected.abs()));
            }
        }
    }
}
