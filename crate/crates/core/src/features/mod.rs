//! Feature functions on fine-scale sub-grids and the design matrix built from them.

mod catalog;
pub mod effective_medium;
pub mod morphology;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use catalog::{
    default_catalog, morphological_entries, morphological_name, FeatureCatalog, FeatureEntry, FeatureKind, Formula,
    MatrixPhase, Morphological, Normalization, Phase,
};
pub use effective_medium::{dem, mga, sca};

use crate::error::{Error, Result};
use crate::fem::MeshSpec;
use crate::microstructure::Microstructure;

/// Fine cells inside one coarse element, in local row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgrid {
    pub nx: usize,
    pub ny: usize,
    pub high: Vec<bool>,
    pub lambda_hi: f64,
    pub lambda_lo: f64,
}

impl Subgrid {
    pub fn conductivities(&self) -> Vec<f64> {
        self.high
            .iter()
            .map(|&h| if h { self.lambda_hi } else { self.lambda_lo })
            .collect()
    }

    pub fn volume_fraction_hi(&self) -> f64 {
        self.high.iter().filter(|&&h| h).count() as f64 / self.high.len() as f64
    }
}

/// Splits the fine grid into one sub-grid per coarse element, in coarse element order.
pub fn partition(fine: &Microstructure, coarse: &MeshSpec) -> Result<Vec<Subgrid>> {
    if fine.nx % coarse.nel_x != 0 || fine.ny % coarse.nel_y != 0 {
        return Err(Error::Domain(format!(
            "fine grid {}x{} is not divisible into {}x{} coarse elements",
            fine.nx, fine.ny, coarse.nel_x, coarse.nel_y
        )));
    }
    let (sx, sy) = (fine.nx / coarse.nel_x, fine.ny / coarse.nel_y);
    let mut out = Vec::with_capacity(coarse.n_elements());
    for ey in 0..coarse.nel_y {
        for ex in 0..coarse.nel_x {
            let mut high = Vec::with_capacity(sx * sy);
            for y in ey * sy..(ey + 1) * sy {
                let start = y * fine.nx + ex * sx;
                high.extend_from_slice(&fine.high[start..start + sx]);
            }
            out.push(Subgrid {
                nx: sx,
                ny: sy,
                high,
                lambda_hi: fine.medium.lambda_hi,
                lambda_lo: fine.medium.lambda_lo,
            });
        }
    }
    Ok(out)
}

/// All morphological descriptors of one sub-grid, keyed by column name.
pub fn morphology_features(sub: &Subgrid) -> BTreeMap<String, f64> {
    let entries = morphological_entries();
    let catalog = FeatureCatalog::new(entries).expect("morphological entries are valid");
    let values = catalog.evaluate(sub).expect("morphological features are total");
    catalog
        .names()
        .into_iter()
        .zip(values)
        .skip(1)
        .map(|(n, v)| (n.to_string(), v))
        .collect()
}

/// Row-major `n_rows x n_cols` feature matrix; row `k` belongs to coarse element `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub values: Vec<f64>,
    pub catalog_hash: String,
}

impl DesignMatrix {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_cols..(k + 1) * self.n_cols]
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.n_cols + j]
    }

    /// `Phi theta`.
    pub fn mul_vec(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.n_cols, "theta length mismatch");
        (0..self.n_rows)
            .map(|k| self.row(k).iter().zip(theta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Applies a fitted normalization in place.
    pub fn normalize(&mut self, n: &Normalization) {
        for row in self.values.chunks_mut(self.n_cols) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - n.shift[j]) / n.scale[j];
            }
        }
    }
}

/// Unnormalized design matrix.
pub fn build_raw_design_matrix(fine: &Microstructure, coarse: &MeshSpec, catalog: &FeatureCatalog) -> Result<DesignMatrix> {
    let subs = partition(fine, coarse)?;
    let rows: Vec<Vec<f64>> = subs.par_iter().map(|s| catalog.evaluate(s)).collect::<Result<_>>()?;
    let names = catalog.names();
    for (k, row) in rows.iter().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "feature '{}' is {} on coarse element {k}",
                names[j], row[j]
            )));
        }
    }
    Ok(DesignMatrix {
        n_rows: rows.len(),
        n_cols: catalog.len(),
        values: rows.concat(),
        catalog_hash: catalog.hash(),
    })
}

/// Design matrix with the catalog's normalization applied when one is fitted.
pub fn build_design_matrix(fine: &Microstructure, coarse: &MeshSpec, catalog: &FeatureCatalog) -> Result<DesignMatrix> {
    let mut phi = build_raw_design_matrix(fine, coarse, catalog)?;
    if let Some(n) = catalog.normalization() {
        phi.normalize(n);
    }
    Ok(phi)
}

/// Column standardization (population sd) over the stacked rows; column 0 is left alone.
///
/// Constant columns become exact zeros with scale 1.
pub fn fit_normalization(raw: &[DesignMatrix]) -> Result<Normalization> {
    let n_cols = raw.first().map(|m| m.n_cols).ok_or_else(|| Error::Data("no design matrices".into()))?;
    if raw.iter().any(|m| m.n_cols != n_cols) {
        return Err(Error::Data("design matrices have different column counts".into()));
    }
    let count: usize = raw.iter().map(|m| m.n_rows).sum();
    let mut shift = vec![0.0; n_cols];
    let mut scale = vec![1.0; n_cols];
    for j in 1..n_cols {
        let col = || raw.iter().flat_map(|m| (0..m.n_rows).map(move |k| m.get(k, j)));
        let first = raw[0].get(0, j);
        if col().all(|v| v == first) {
            // maps the column to exact zeros
            shift[j] = first;
            continue;
        }
        let mean = col().sum::<f64>() / count as f64;
        let var = col().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        shift[j] = mean;
        let sd = var.sqrt();
        if sd > 1e-12 * mean.abs() && sd.is_finite() {
            scale[j] = sd;
        }
    }
    Ok(Normalization { shift, scale })
}
