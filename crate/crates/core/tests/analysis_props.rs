use std::collections::BTreeSet;

use comove::kpca::FeatureMatrix;
use comove::market_data::Fill;
use comove::rank_correlation::spearman;
use comove::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn panel_from(rows: &[Vec<f64>]) -> PricePanel {
    let n = rows.len();
    let b = rows[0].len();
    PricePanel {
        date: NaiveDate::from_ymd_opt(2014, 1, 2).unwrap(),
        symbols: (0..n).map(|i| format!("S{i:02}")).collect(),
        buckets: b,
        values: DMatrix::from_fn(n, b, |i, j| rows[i][j]),
        fill_mask: vec![vec![Fill::Observed; b]; n],
    }
}

fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let tied = v.iter().filter(|b| *b == a).count() as f64;
                below + (tied + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let sx = (rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (ry.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sx * sy)
}

fn arb_panel() -> impl Strategy<Value = Vec<Vec<f64>>> {
    // Values on a coarse grid so ties are common; constant rows filtered out.
    prop::collection::vec(prop::collection::vec(0u8..15, 20), 10)
        .prop_map(|rows| {
            rows.into_iter()
                .map(|r| r.into_iter().map(|v| 100.0 + v as f64 * 0.05).collect::<Vec<f64>>())
                .collect::<Vec<_>>()
        })
        .prop_filter("no constant rows", |rows| {
            rows.iter().all(|r| r.iter().any(|v| *v != r[0]))
        })
}

proptest! {
    #[test]
    fn spearman_matrix_matches_brute_force(rows in arb_panel()) {
        let corr = spearman_matrix(&panel_from(&rows)).unwrap();
        for i in 0..rows.len() {
            prop_assert_eq!(corr.rho[(i, i)], 1.0);
            for j in 0..rows.len() {
                prop_assert!((corr.rho[(i, j)] - brute_spearman(&rows[i], &rows[j])).abs() <= 1e-12);
                prop_assert_eq!(corr.rho[(i, j)], corr.rho[(j, i)]);
            }
        }
    }

    #[test]
    fn spearman_ignores_increasing_transforms(x in prop::collection::vec(-3.0f64..3.0, 5..40), seed in 0u64..1000) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 1.7 + (i as f64 + seed as f64).sin()).round()).collect();
        prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
        let base = spearman(&x, &y).unwrap();
        let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        prop_assert!((spearman(&ex, &y).unwrap() - base).abs() <= 1e-12);
        let cubed: Vec<f64> = y.iter().map(|v| v.powi(3) + 2.0).collect();
        prop_assert!((spearman(&x, &cubed).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn distance_is_symmetric_bounded_and_decreasing(rows in arb_panel()) {
        let corr = spearman_matrix(&panel_from(&rows)).unwrap();
        let d = to_distance(&corr);
        for i in 0..rows.len() {
            prop_assert_eq!(d.d[(i, i)], 0.0);
            for j in 0..rows.len() {
                prop_assert_eq!(d.d[(i, j)], d.d[(j, i)]);
                prop_assert!((0.0..=2.0).contains(&d.d[(i, j)]));
                for k in 0..rows.len() {
                    if corr.rho[(i, j)] > corr.rho[(i, k)] {
                        prop_assert!(d.d[(i, j)] <= d.d[(i, k)]);
                    }
                }
            }
        }
    }
}

fn arb_days() -> impl Strategy<Value = Vec<Vec<usize>>> {
    (2usize..12, 1usize..25).prop_flat_map(|(n, days)| prop::collection::vec(prop::collection::vec(0usize..4, n), days))
}

fn assignments(days: &[Vec<usize>]) -> Vec<ClusterAssignment> {
    let n = days[0].len();
    let base = NaiveDate::from_ymd_opt(2014, 1, 1).unwrap();
    days.iter()
        .enumerate()
        .map(|(d, labels)| {
            // Compact labels so every index in [0, k) is used.
            let used: BTreeSet<usize> = labels.iter().copied().collect();
            let used: Vec<usize> = used.into_iter().collect();
            let labels: Vec<usize> = labels.iter().map(|l| used.iter().position(|u| u == l).unwrap()).collect();
            ClusterAssignment {
                date: (0..d).fold(base, |x, _| x.succ_opt().unwrap()),
                method: Method::Fpca,
                k: used.len(),
                symbols: (0..n).map(|i| format!("S{i:02}")).collect(),
                labels,
                objective: 0.0,
                seed: 0,
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn cooccurrence_identities(days in arb_days()) {
        let co = cooccurrence(&assignments(&days)).unwrap();
        for i in 0..co.len() {
            prop_assert_eq!(co.together[i][i], co.n_days);
            for j in 0..co.len() {
                prop_assert!(co.together[i][j] <= co.n_days);
                prop_assert_eq!(co.together[i][j] + co.hamming(i, j), co.n_days);
            }
        }
    }

    #[test]
    fn networks_shrink_as_threshold_rises(days in arb_days()) {
        let co = cooccurrence(&assignments(&days)).unwrap();
        let mut previous: Option<(BTreeSet<(String, String)>, usize)> = None;
        for t in pipeline::default_thresholds() {
            let g = build_network(&co, t).unwrap();
            for e in &g.edges {
                prop_assert!(e.together_fraction > t);
            }
            // Components partition exactly the vertices that carry an edge.
            let in_edges: BTreeSet<String> = g.edges.iter().flat_map(|e| [e.a.clone(), e.b.clone()]).collect();
            let in_components: Vec<String> = g.components.iter().flatten().cloned().collect();
            prop_assert_eq!(in_components.len(), in_edges.len());
            prop_assert_eq!(in_components.into_iter().collect::<BTreeSet<_>>(), in_edges.clone());
            let edges: BTreeSet<(String, String)> = g.edges.iter().map(|e| (e.a.clone(), e.b.clone())).collect();
            // Isolated vertices count as singleton components here.
            let count = co.len() - in_edges.len() + g.components.len();
            if let Some((prev_edges, prev_count)) = &previous {
                prop_assert!(edges.is_subset(prev_edges));
                prop_assert!(count >= *prev_count);
            }
            previous = Some((edges, count));
        }
    }

    #[test]
    fn every_pair_has_exactly_one_category(days in arb_days()) {
        let co = cooccurrence(&assignments(&days)).unwrap();
        let m = category_matrix(&co);
        for i in 0..co.len() {
            for j in 0..co.len() {
                let p = co.fraction(i, j);
                let hits = [p >= 0.8, (0.6..0.8).contains(&p), (0.4..0.6).contains(&p), p < 0.4];
                prop_assert_eq!(hits.iter().filter(|h| **h).count(), 1);
                prop_assert_eq!(m[i][j], Category::of(p));
            }
        }
    }
}

#[test]
fn fifty_seven_percent_is_blue() {
    assert_eq!(Category::of(131.0 / 229.0), Category::Blue);
    assert_eq!(Category::of(0.5721), Category::Blue);
    assert_eq!(Category::of(0.80), Category::Red);
}

proptest! {
    #[test]
    fn kpca_scores_orthogonal_with_eigenvalue_norms(
        n in 3usize..25,
        d in 1usize..12,
        sigma in 0.3f64..3.0,
        seed in any::<u64>(),
    ) {
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let features = FeatureMatrix {
            symbols: (0..n).map(|i| i.to_string()).collect(),
            values: DMatrix::from_fn(n, d, |_, _| next()),
        };
        let k = center_kernel(&gaussian_kernel_matrix(&features, sigma).unwrap()).unwrap();
        let Ok(result) = kpca(&k) else {
            return Ok(());
        };
        let gram = result.scores.transpose() * &result.scores;
        for a in 0..gram.nrows() {
            prop_assert!((gram[(a, a)] - result.eigenvalues[a]).abs() <= 1e-8 * (1.0 + result.eigenvalues[a]));
            for b in 0..gram.ncols() {
                if a != b {
                    prop_assert!(gram[(a, b)].abs() <= 1e-8);
                }
            }
        }
    }
}
