//! Small dense helpers shared by the PCA engines.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
///
/// Each eigenvector's sign is fixed so that its largest-magnitude entry is
/// positive (first such entry on ties).
pub(crate) fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(m.nrows(), order.len());
    for (col, &i) in order.iter().enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(i).into_owned();
        fix_sign(v.as_mut_slice());
        vectors.set_column(col, &v);
    }
    (values, vectors)
}

pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Rescales a series to zero mean and unit (population) variance.
/// A constant series maps to all zeros.
pub(crate) fn standardize(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 || !var.is_finite() {
        return vec![0.0; series.len()];
    }
    let sd = var.sqrt();
    series.iter().map(|x| (x - mean) / sd).collect()
}

/// Cumulative eigenvalue shares; all zeros when the total is zero.
pub(crate) fn cumulative_explained(eigenvalues: &[f64]) -> Vec<f64> {
    let total: f64 = eigenvalues.iter().sum();
    let mut acc = 0.0;
    eigenvalues
        .iter()
        .map(|l| {
            acc += l;
            if total > 0.0 {
                (acc / total).min(1.0)
            } else {
                0.0
            }
        })
        .collect()
}
