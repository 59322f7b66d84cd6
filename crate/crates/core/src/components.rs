//! Shared view over PCA-style results and component selection.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Per-stock coordinates on a set of components.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub symbols: Vec<String>,
    /// `n_stocks × m`
    pub values: DMatrix<f64>,
}

impl ScoreMatrix {
    pub fn n_points(&self) -> usize {
        self.values.nrows()
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }
}

/// Anything that exposes ordered components with cumulative explained variance.
pub trait Components {
    fn symbols(&self) -> &[String];
    /// Cumulative explained-variance fractions, one per component.
    fn explained(&self) -> &[f64];
    /// `n_stocks × components`
    fn scores(&self) -> &DMatrix<f64>;
}

const EXPLAINED_SLACK: f64 = 1e-12;

/// Smallest component count whose cumulative explained variance reaches
/// `threshold` (never fewer than one).
pub fn components_needed(explained: &[f64], threshold: f64) -> usize {
    explained
        .iter()
        .position(|e| *e >= threshold - EXPLAINED_SLACK)
        .map_or(explained.len(), |i| i + 1)
        .max(1)
}

/// Leading score columns explaining at least `threshold` of the variance.
pub fn select_components<C: Components + ?Sized>(result: &C, threshold: f64) -> Result<ScoreMatrix> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Parameter(format!(
            "variance threshold must be in (0, 1], got {threshold}"
        )));
    }
    let m = components_needed(result.explained(), threshold).min(result.scores().ncols());
    Ok(ScoreMatrix {
        symbols: result.symbols().to_vec(),
        values: result.scores().columns(0, m).into_owned(),
    })
}
