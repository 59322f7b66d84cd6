//! Functional PCA of intraday curves.
//!
//! Each stock-day series is standardized, smoothed onto a clamped uniform
//! B-spline basis over `[0, 1]` (bucket midpoints as abscissae), and the
//! covariance operator of the smoothed curves is diagonalized through the
//! basis Gram matrix `W[k][l] = ∫ φ_k φ_l`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::components::Components;
use crate::error::{Error, Result};
use crate::linalg::{cumulative_explained, fix_sign, sorted_eigen, standardize};
use crate::market_data::PricePanel;

/// Largest accepted condition estimate of the smoothing normal equations.
pub const MAX_CONDITION: f64 = 1e13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    /// Spline order (degree + 1); 4 is cubic, 1 gives cell indicators.
    pub order: usize,
    pub count: usize,
    /// Roughness weight on the integrated squared second derivative.
    pub penalty: f64,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            order: 4,
            count: 41,
            penalty: 0.0,
        }
    }
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.count < self.order {
            return Err(Error::Parameter(format!(
                "basis needs count >= order >= 1 (count {}, order {})",
                self.count, self.order
            )));
        }
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return Err(Error::Parameter(format!("penalty must be >= 0, got {}", self.penalty)));
        }
        Ok(())
    }
}

/// Clamped B-spline basis with uniformly spaced interior knots on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct BSplineBasis {
    order: usize,
    count: usize,
    knots: Vec<f64>,
}

// 5-point Gauss-Legendre rule on [-1, 1]; exact through degree 9.
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

impl BSplineBasis {
    pub fn new(spec: &BasisSpec) -> Result<Self> {
        spec.validate()?;
        let (order, count) = (spec.order, spec.count);
        let spans = count - order + 1;
        let mut knots = vec![0.0; order];
        knots.extend((1..spans).map(|i| i as f64 / spans as f64));
        knots.extend(std::iter::repeat_n(1.0, order));
        Ok(BSplineBasis { order, count, knots })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Distinct breakpoints `0 = u_0 < ... < u_s = 1`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.knots.clone();
        b.dedup();
        b
    }

    /// `r`-th derivative of basis function `i` at `t`.
    pub fn eval(&self, i: usize, t: f64, r: usize) -> f64 {
        self.eval_rec(i, self.order, t, r)
    }

    fn eval_rec(&self, i: usize, k: usize, t: f64, r: usize) -> f64 {
        let kn = &self.knots;
        if k == 1 {
            if r > 0 {
                return 0.0;
            }
            let last = *kn.last().unwrap();
            let inside = kn[i] <= t && t < kn[i + 1];
            // close the final non-empty span at the right end
            let at_end = t == last && kn[i + 1] == last && kn[i] < last;
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let left_w = kn[i + k - 1] - kn[i];
        let right_w = kn[i + k] - kn[i + 1];
        if r == 0 {
            let mut v = 0.0;
            if left_w > 0.0 {
                v += (t - kn[i]) / left_w * self.eval_rec(i, k - 1, t, 0);
            }
            if right_w > 0.0 {
                v += (kn[i + k] - t) / right_w * self.eval_rec(i + 1, k - 1, t, 0);
            }
            v
        } else {
            let mut v = 0.0;
            if left_w > 0.0 {
                v += self.eval_rec(i, k - 1, t, r - 1) / left_w;
            }
            if right_w > 0.0 {
                v -= self.eval_rec(i + 1, k - 1, t, r - 1) / right_w;
            }
            (k - 1) as f64 * v
        }
    }

    /// `points × count` matrix of `r`-th derivatives.
    pub fn design(&self, points: &[f64], r: usize) -> DMatrix<f64> {
        DMatrix::from_fn(points.len(), self.count, |p, i| self.eval(i, points[p], r))
    }

    /// `∫_0^1 φ_k^(r) φ_l^(r)`, exact for polynomial pieces up to degree 9.
    pub fn inner_products(&self, r: usize) -> DMatrix<f64> {
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for w in self.breakpoints().windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = (b - a) / 2.0;
            for (x, wt) in GL_NODES.iter().zip(GL_WEIGHTS) {
                nodes.push(a + half * (x + 1.0));
                weights.push(wt * half);
            }
        }
        let phi = self.design(&nodes, r);
        let weighted = DMatrix::from_fn(phi.nrows(), phi.ncols(), |p, i| phi[(p, i)] * weights[p]);
        let g = phi.transpose() * weighted;
        (&g + g.transpose()) * 0.5
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.inner_products(0)
    }

    /// Second-derivative roughness matrix; zero for orders below 3.
    pub fn roughness(&self) -> DMatrix<f64> {
        if self.order < 3 {
            DMatrix::zeros(self.count, self.count)
        } else {
            self.inner_products(2)
        }
    }
}

/// Bucket midpoints rescaled to `[0, 1]`.
pub fn unit_grid(points: usize) -> Vec<f64> {
    (0..points).map(|b| (b as f64 + 0.5) / points as f64).collect()
}

/// Penalized least-squares projection of sampled series onto a basis.
#[derive(Debug, Clone)]
pub struct BasisSmoother {
    basis: BSplineBasis,
    design: DMatrix<f64>,
    normal: Cholesky<f64, nalgebra::Dyn>,
}

impl BasisSmoother {
    pub fn new(spec: &BasisSpec, grid: &[f64]) -> Result<Self> {
        let basis = BSplineBasis::new(spec)?;
        if grid.len() < spec.count {
            return Err(Error::Parameter(format!(
                "basis count {} exceeds the {} observation points",
                spec.count,
                grid.len()
            )));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("evaluation grid must be strictly increasing".into()));
        }
        let design = basis.design(grid, 0);
        let mut normal = design.transpose() * &design;
        if spec.penalty > 0.0 {
            normal += basis.roughness() * spec.penalty;
        }
        let normal = (&normal + normal.transpose()) * 0.5;
        let eig = normal.clone().symmetric_eigenvalues();
        let (lo, hi) = eig
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(v.abs())));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if condition > MAX_CONDITION {
            return Err(Error::Numerical(format!(
                "smoothing normal equations are singular (condition estimate {condition:.3e})"
            )));
        }
        let normal = Cholesky::new(normal).ok_or_else(|| {
            Error::Numerical(format!(
                "smoothing normal equations not positive definite (condition estimate {condition:.3e})"
            ))
        })?;
        Ok(BasisSmoother { basis, design, normal })
    }

    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    /// Coefficients of the raw (unstandardized) series.
    pub fn fit(&self, y: &[f64]) -> Vec<f64> {
        let rhs = self.design.transpose() * DVector::from_column_slice(y);
        self.normal.solve(&rhs).iter().copied().collect()
    }

    /// Fitted values on the smoother's grid.
    pub fn fitted(&self, coeffs: &[f64]) -> Vec<f64> {
        (&self.design * DVector::from_column_slice(coeffs)).iter().copied().collect()
    }
}

/// Smoothed curves of one day in basis coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    pub symbols: Vec<String>,
    /// `n_stocks × basis.count`
    pub coeffs: DMatrix<f64>,
    pub basis: BasisSpec,
    pub gram: DMatrix<f64>,
}

/// Standardizes each stock's series and fits it onto the basis.
pub fn fit_basis(panel: &PricePanel, spec: &BasisSpec) -> Result<CoefficientMatrix> {
    if let Some(i) = (0..panel.n_stocks()).find(|&i| panel.values.row(i).iter().any(|v| !v.is_finite())) {
        return Err(Error::Input(format!("series for {} has non-finite values", panel.symbols[i])));
    }
    let smoother = BasisSmoother::new(spec, &unit_grid(panel.buckets))?;
    let mut coeffs = DMatrix::zeros(panel.n_stocks(), spec.count);
    for i in 0..panel.n_stocks() {
        let c = smoother.fit(&standardize(&panel.series(i)));
        coeffs.set_row(i, &nalgebra::RowDVector::from_vec(c));
    }
    Ok(CoefficientMatrix {
        symbols: panel.symbols.clone(),
        coeffs,
        basis: *spec,
        gram: smoother.basis().gram(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpcaResult {
    pub symbols: Vec<String>,
    /// Nonincreasing, nonnegative.
    pub eigenvalues: Vec<f64>,
    /// Row `j` expands eigenfunction `j` in the basis.
    pub eigenfunction_coeffs: DMatrix<f64>,
    /// `n_stocks × components`
    pub scores: DMatrix<f64>,
    pub explained: Vec<f64>,
    pub mean_coeffs: Vec<f64>,
}

impl Components for FpcaResult {
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

/// Functional PCA of the curves held in `coeffs`.
pub fn fpca(coeffs: &CoefficientMatrix) -> Result<FpcaResult> {
    let n = coeffs.coeffs.nrows();
    if n < 2 {
        return Err(Error::Parameter(format!("fpca needs at least 2 curves, got {n}")));
    }
    let w = &coeffs.gram;
    let (w_vals, w_vecs) = sorted_eigen(w);
    if w_vals.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "basis Gram matrix is not positive definite (min eigenvalue {:.3e})",
            w_vals.last().copied().unwrap_or(f64::NAN)
        )));
    }
    let w_half = &w_vecs * DMatrix::from_diagonal(&DVector::from_iterator(w_vals.len(), w_vals.iter().map(|v| v.sqrt()))) * w_vecs.transpose();
    let w_inv_half = &w_vecs
        * DMatrix::from_diagonal(&DVector::from_iterator(w_vals.len(), w_vals.iter().map(|v| 1.0 / v.sqrt())))
        * w_vecs.transpose();

    let mean = coeffs.coeffs.row_mean();
    let mut centered = coeffs.coeffs.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let half_scaled = &centered * &w_half;
    let m = half_scaled.transpose() * &half_scaled / (n - 1) as f64;
    let (values, vectors) = sorted_eigen(&m);
    let eigenvalues: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    if eigenvalues.first().is_none_or(|top| *top <= 1e-12) {
        return Err(Error::Degenerate("all curves coincide after standardization".into()));
    }

    let mut b = &w_inv_half * vectors;
    for mut col in b.column_iter_mut() {
        fix_sign(col.as_mut_slice());
    }
    let scores = &centered * w * &b;
    Ok(FpcaResult {
        symbols: coeffs.symbols.clone(),
        explained: cumulative_explained(&eigenvalues),
        eigenvalues,
        eigenfunction_coeffs: b.transpose(),
        scores,
        mean_coeffs: mean.iter().copied().collect(),
    })
}
