//! Spearman rank correlation across stocks and the `1 - rho` distance.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::PricePanel;

/// Pairwise Spearman coefficients, symmetric with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub symbols: Vec<String>,
    pub rho: DMatrix<f64>,
}

/// `d = 1 - rho`, symmetric with zero diagonal, values in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub symbols: Vec<String>,
    pub d: DMatrix<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Fractional ranks (1-based); tied values share the average of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn centered(ranks: &[f64]) -> (Vec<f64>, f64) {
    let mean = ranks.iter().sum::<f64>() / ranks.len() as f64;
    let c: Vec<f64> = ranks.iter().map(|r| r - mean).collect();
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (c, norm)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spearman's rho of two equal-length series; `None` if either is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "series lengths differ");
    let (cx, nx) = centered(&average_ranks(x));
    let (cy, ny) = centered(&average_ranks(y));
    if nx == 0.0 || ny == 0.0 {
        return None;
    }
    Some((dot(&cx, &cy) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Spearman matrix over the panel's stocks (rows), correlating across buckets.
pub fn spearman_matrix(panel: &PricePanel) -> Result<CorrelationMatrix> {
    if panel.buckets < 3 {
        return Err(Error::Input(format!(
            "need at least 3 buckets for rank correlation, panel {} has {}",
            panel.date, panel.buckets
        )));
    }
    let n = panel.n_stocks();
    let mut unit = Vec::with_capacity(n);
    for i in 0..n {
        let (c, norm) = centered(&average_ranks(&panel.series(i)));
        if norm == 0.0 {
            return Err(Error::ConstantSeries {
                symbol: panel.symbols[i].clone(),
            });
        }
        unit.push(c.into_iter().map(|v| v / norm).collect::<Vec<_>>());
    }
    let mut rho = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = dot(&unit[i], &unit[j]).clamp(-1.0, 1.0);
            rho[(i, j)] = r;
            rho[(j, i)] = r;
        }
    }
    Ok(CorrelationMatrix {
        symbols: panel.symbols.clone(),
        rho,
    })
}

pub fn to_distance(corr: &CorrelationMatrix) -> DistanceMatrix {
    let n = corr.symbols.len();
    let d = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 - corr.rho[(i, j)] });
    DistanceMatrix {
        symbols: corr.symbols.clone(),
        d,
    }
}

/// Extremes and threshold counts over the above-diagonal pairs of one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaySummary {
    pub pairs: usize,
    pub max: f64,
    pub min: f64,
    pub max_pair: Option<(String, String)>,
    /// `(threshold, pairs with rho > threshold)`, thresholds ascending.
    pub above: Vec<(f64, usize)>,
}

pub fn day_summary(corr: &CorrelationMatrix, thresholds: &[f64]) -> DaySummary {
    let n = corr.symbols.len();
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    let mut max_pair = None;
    let mut counts = vec![0usize; thresholds.len()];
    let mut pairs = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let r = corr.rho[(i, j)];
            pairs += 1;
            if r > max {
                max = r;
                max_pair = Some((corr.symbols[i].clone(), corr.symbols[j].clone()));
            }
            min = min.min(r);
            for (c, t) in counts.iter_mut().zip(thresholds) {
                if r > *t {
                    *c += 1;
                }
            }
        }
    }
    if pairs == 0 {
        max = f64::NAN;
        min = f64::NAN;
    }
    DaySummary {
        pairs,
        max,
        min,
        max_pair,
        above: thresholds.iter().copied().zip(counts).collect(),
    }
}

/// Square CSV with the symbols as header row and first column.
pub fn write_square_csv<W: Write>(symbols: &[String], m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::new()];
    header.extend(symbols.iter().cloned());
    w.write_record(&header)?;
    for (i, s) in symbols.iter().enumerate() {
        let mut row = vec![s.clone()];
        row.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::Stream)?;
    Ok(())
}

pub fn read_square_csv<R: Read>(source: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut reader = csv::ReaderBuilder::new().from_reader(source);
    let symbols: Vec<String> = reader.headers()?.iter().skip(1).map(String::from).collect();
    let n = symbols.len();
    let mut data = Vec::with_capacity(n * n);
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        if i >= n || row.len() != n + 1 || row[0] != symbols[i] {
            return Err(Error::Format("square matrix CSV is not symmetric in its labels".into()));
        }
        for cell in row.iter().skip(1) {
            data.push(
                cell.parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad matrix value {cell:?}: {e}")))?,
            );
        }
    }
    if data.len() != n * n {
        return Err(Error::Format(format!("expected {n} matrix rows")));
    }
    Ok((symbols, DMatrix::from_row_slice(n, n, &data)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn corr(symbols: &[&str], rho: DMatrix<f64>) -> CorrelationMatrix {
        CorrelationMatrix {
            symbols: symbols.iter().map(|s| s.to_string()).collect(),
            rho,
        }
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_hand_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[9.0, 5.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0]), None);
    }

    #[test]
    fn constant_series_names_stock() {
        let panel = PricePanel {
            date: NaiveDate::from_ymd_opt(2014, 1, 1).unwrap(),
            symbols: vec!["A".into(), "FLAT".into()],
            buckets: 3,
            values: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 5.0, 5.0, 5.0]),
            fill_mask: vec![vec![crate::market_data::Fill::Observed; 3]; 2],
        };
        match spearman_matrix(&panel) {
            Err(Error::ConstantSeries { symbol }) => assert_eq!(symbol, "FLAT"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distance_examples() {
        let c = corr(&["A", "B", "C"], DMatrix::from_row_slice(3, 3, &[
            1.0, 1.0, -1.0,
            1.0, 1.0, 0.2796,
            -1.0, 0.2796, 1.0,
        ]));
        let d = to_distance(&c);
        assert_eq!(d.d[(0, 1)], 0.0);
        assert_eq!(d.d[(0, 2)], 2.0);
        assert!((d.d[(1, 2)] - 0.7204).abs() < 1e-12);
        assert_eq!(d.d[(2, 2)], 0.0);
    }

    #[test]
    fn summary_single_pair() {
        let s = day_summary(&corr(&["A", "B"], DMatrix::identity(2, 2)), &[0.5, 0.6]);
        assert_eq!((s.max, s.min, s.pairs), (0.0, 0.0, 1));
        assert_eq!(s.above, vec![(0.5, 0), (0.6, 0)]);
    }

    #[test]
    fn summary_counts_like_april_row() {
        // 10 pairs above 0.5, one of them above 0.6
        let n = 12;
        let mut rho = DMatrix::identity(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let r = if k == 0 { 0.6639 } else if k < 10 { 0.55 } else { 0.1 };
                rho[(i, j)] = r;
                rho[(j, i)] = r;
                k += 1;
            }
        }
        let names: Vec<String> = (0..n).map(|i| format!("S{i}")).collect();
        let s = day_summary(&CorrelationMatrix { symbols: names, rho }, &[0.5, 0.6]);
        assert_eq!(s.above, vec![(0.5, 10), (0.6, 1)]);
        assert_eq!(s.max, 0.6639);
        assert_eq!(s.pairs, 66);
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transform(x in prop::collection::vec(-5.0f64..5.0, 5..40), seed in 0u64..1000) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 7.3 + (i as u64 * seed % 11) as f64).sin()).collect();
            let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            if let (Some(a), Some(b)) = (spearman(&x, &y), spearman(&ex, &y)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn distance_monotone_and_bounded(r in -1.0f64..=1.0) {
            let c = corr(&["A", "B"], DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0]));
            let d = to_distance(&c);
            prop_assert!((0.0..=2.0).contains(&d.d[(0, 1)]));
            prop_assert_eq!(d.d[(0, 1)], d.d[(1, 0)]);
        }
    }
}
