//! Gaussian kernel PCA with stocks as samples.
//!
//! Each stock-day series is standardized and then scaled onto the unit
//! sphere, so squared distances between stocks lie in `[0, 4]` and a
//! bandwidth of 1 sits in the informative range of `exp(-d²/2σ²)`.

use nalgebra::DMatrix;

use crate::components::Components;
use crate::error::{Error, Result};
use crate::linalg::{cumulative_explained, sorted_eigen, standardize};
use crate::market_data::PricePanel;

/// Absolute floor on retained eigenvalues.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Relative cut, as a fraction of the largest eigenvalue.
pub const EIGEN_RELATIVE_CUT: f64 = 1e-10;

/// Unit-norm, standardized stock vectors (`n_stocks × buckets`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub symbols: Vec<String>,
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub symbols: Vec<String>,
    pub k: DMatrix<f64>,
    pub sigma: f64,
    pub centered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpcaResult {
    pub symbols: Vec<String>,
    pub sigma: f64,
    /// Retained eigenvalues of the centered kernel, nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is `α_j·√λ_j` with `‖α_j‖ = 1`.
    pub scores: DMatrix<f64>,
    pub explained: Vec<f64>,
}

impl Components for KpcaResult {
    fn symbols(&self) -> &[String] {
        &self.symbols
    }
    fn explained(&self) -> &[f64] {
        &self.explained
    }
    fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }
}

pub fn feature_vectors(panel: &PricePanel) -> Result<FeatureMatrix> {
    let mut values = DMatrix::zeros(panel.n_stocks(), panel.buckets);
    for i in 0..panel.n_stocks() {
        let z = standardize(&panel.series(i));
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ConstantSeries {
                symbol: panel.symbols[i].clone(),
            });
        }
        for (j, v) in z.iter().enumerate() {
            values[(i, j)] = v / norm;
        }
    }
    Ok(FeatureMatrix {
        symbols: panel.symbols.clone(),
        values,
    })
}

/// `K[i][j] = exp(-‖x_i - x_j‖² / 2σ²)`.
pub fn gaussian_kernel_matrix(features: &FeatureMatrix, sigma: f64) -> Result<KernelMatrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("kernel sigma must be positive, got {sigma}")));
    }
    let x = &features.values;
    let n = x.nrows();
    let mut k = DMatrix::identity(n, n);
    let denom = 2.0 * sigma * sigma;
    for i in 0..n {
        for j in (i + 1)..n {
            let d2 = (x.row(i) - x.row(j)).norm_squared();
            let v = (-d2 / denom).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(KernelMatrix {
        symbols: features.symbols.clone(),
        k,
        sigma,
        centered: false,
    })
}

/// Double-centers the kernel: `K - 1K - K1 + 1K1` with `1 = (1/n)·ones`.
pub fn center_kernel(kernel: &KernelMatrix) -> Result<KernelMatrix> {
    if kernel.centered {
        return Err(Error::Parameter("kernel matrix is already centered".into()));
    }
    let k = &kernel.k;
    let n = k.nrows();
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / n as f64).collect();
    let col_means: Vec<f64> = (0..n).map(|j| k.column(j).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let kc = DMatrix::from_fn(n, n, |i, j| k[(i, j)] - row_means[i] - col_means[j] + grand);
    Ok(KernelMatrix {
        symbols: kernel.symbols.clone(),
        k: (&kc + kc.transpose()) * 0.5,
        sigma: kernel.sigma,
        centered: true,
    })
}

pub fn kpca(kernel: &KernelMatrix) -> Result<KpcaResult> {
    if !kernel.centered {
        return Err(Error::Parameter("kpca expects a centered kernel matrix".into()));
    }
    let (values, vectors) = sorted_eigen(&kernel.k);
    let top = values.first().copied().unwrap_or(0.0);
    let cut = EIGEN_FLOOR.max(EIGEN_RELATIVE_CUT * top);
    let keep = values.iter().take_while(|v| **v > cut).count();
    if keep == 0 {
        return Err(Error::Degenerate(format!(
            "centered kernel has no eigenvalue above {cut:.1e} (points are indistinguishable)"
        )));
    }
    let eigenvalues = values[..keep].to_vec();
    let mut scores = vectors.columns(0, keep).into_owned();
    for (j, mut col) in scores.column_iter_mut().enumerate() {
        col *= eigenvalues[j].sqrt();
    }
    Ok(KpcaResult {
        symbols: kernel.symbols.clone(),
        sigma: kernel.sigma,
        explained: cumulative_explained(&eigenvalues),
        eigenvalues,
        scores,
    })
}

/// Full route from a panel to KPCA scores.
pub fn kpca_panel(panel: &PricePanel, sigma: f64) -> Result<KpcaResult> {
    let features = feature_vectors(panel)?;
    kpca(&center_kernel(&gaussian_kernel_matrix(&features, sigma)?)?)
}
