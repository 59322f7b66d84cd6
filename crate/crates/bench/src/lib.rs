//! Deterministic inputs shared by the benchmarks.

use comove::market_data::Fill;
use comove::{NaiveDate, PricePanel};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random-walk price panel with `stocks` rows and `buckets` columns.
pub fn random_panel(stocks: usize, buckets: usize, seed: u64) -> PricePanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = DMatrix::zeros(stocks, buckets);
    for i in 0..stocks {
        let mut p = 100.0;
        for j in 0..buckets {
            p *= 1.0 + 0.001 * (rng.random::<f64>() - 0.5);
            values[(i, j)] = p;
        }
    }
    PricePanel {
        date: NaiveDate::from_ymd_opt(2014, 1, 2).expect("valid date"),
        symbols: (0..stocks).map(|i| format!("S{i:03}")).collect(),
        buckets,
        values,
        fill_mask: vec![vec![Fill::Observed; buckets]; stocks],
    }
}

/// Uniform points in the unit cube.
pub fn random_points(n: usize, dims: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, dims, |_, _| rng.random::<f64>())
}
