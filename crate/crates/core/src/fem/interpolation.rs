use super::{CsrMatrix, MeshSpec};
use crate::error::{Error, Result};

/// Coarse bilinear shape functions evaluated at fine nodes (`n_fine_nodes x n_coarse_nodes`).
pub fn interpolation_matrix(coarse: &MeshSpec, fine: &MeshSpec) -> Result<CsrMatrix> {
    if fine.nel_x % coarse.nel_x != 0 || fine.nel_y % coarse.nel_y != 0 {
        return Err(Error::Domain(format!(
            "fine mesh {}x{} does not nest coarse mesh {}x{}",
            fine.nel_x, fine.nel_y, coarse.nel_x, coarse.nel_y
        )));
    }
    let rx = fine.nel_x / coarse.nel_x;
    let ry = fine.nel_y / coarse.nel_y;
    // local coordinate and coarse element along one axis, exact at coarse nodes
    let locate = |i: usize, ratio: usize, nel_coarse: usize| -> (usize, f64) {
        let e = (i / ratio).min(nel_coarse - 1);
        (e, (i - e * ratio) as f64 / ratio as f64)
    };
    let mut triplets = Vec::with_capacity(4 * fine.n_nodes());
    for j in 0..=fine.nel_y {
        let (ey, t) = locate(j, ry, coarse.nel_y);
        for i in 0..=fine.nel_x {
            let (ex, s) = locate(i, rx, coarse.nel_x);
            let row = fine.node_id(i, j);
            let nodes = coarse.element_nodes(ex, ey);
            let weights = [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t];
            for (node, w) in nodes.iter().zip(weights) {
                if w != 0.0 {
                    triplets.push((row, *node, w));
                }
            }
        }
    }
    Ok(CsrMatrix::from_triplets(fine.n_nodes(), coarse.n_nodes(), &triplets))
}
