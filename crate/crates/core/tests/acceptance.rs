//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test -p comove --test acceptance`.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use comove::clustering::{derive_seed, euclidean_distances, ClusterInput};
use comove::fpca::unit_grid;
use comove::kpca::FeatureMatrix;
use comove::market_data::{bucket_vwap_for, split_by_day, Fill};
use comove::pipeline::{self, analyse_day, RunConfig};
use comove::rank_correlation::spearman;
use comove::synthetic::{self, generate_ticks, SyntheticSpec};
use comove::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let o = f();
    (o, start.elapsed())
}

fn sig3(x: f64) -> String {
    format!("{x:.2e}")
}

// Counts, z and p columns of the KPCA table at p0 = 0.80, n = 229.
const STRONGEST_PAIRS: [(&str, &str, u32, f64, f64); 7] = [
    ("PNB", "Bank of Baroda", 213, 4.923098573, 4.25923e-07),
    ("ICICI", "Axis Bank", 202, 3.105847422, 0.000948673),
    ("TCS", "Infy", 205, 3.601461372, 0.000158217),
    ("TCS", "Wipro", 198, 2.445028822, 0.007242028),
    ("TCS", "Techm", 198, 2.445028822, 0.007242028),
    ("Infy", "Wipro", 198, 2.445028822, 0.007242028),
    ("Infy", "Techm", 202, 3.105847422, 0.000948673),
];

fn criterion_1() -> Outcome {
    let (z, p) = proportion_ztest(213, 229, 0.80).unwrap();
    let head = (z - 4.923099).abs() <= 1e-6 && (p - 4.2592e-07).abs() <= 1e-10;
    let mut bad = Vec::new();
    for (a, b, count, z_ref, p_ref) in STRONGEST_PAIRS {
        let (z, p) = proportion_ztest(count, 229, 0.80).unwrap();
        if sig3(z) != sig3(z_ref) || sig3(p) != sig3(p_ref) {
            bad.push(format!("{a}/{b}"));
        }
    }
    outcome(
        head && bad.is_empty(),
        format!("z={z:.9} p={p:.6e}; rows off at 3 s.f.: {bad:?}"),
    )
}

fn criterion_2() -> Outcome {
    let p1 = proportion_ztest(162, 229, 0.70).unwrap().1;
    let p2 = proportion_ztest(205, 229, 0.70).unwrap().1;
    let p3 = proportion_ztest(45, 46, 0.70).unwrap().1;
    let ok = (p1 - 0.403).abs() <= 0.001 && (p2 / 5.75e-11 - 1.0).abs() <= 0.01 && (p3 / 1.91e-05 - 1.0).abs() <= 0.01;
    outcome(ok, format!("p(162/229)={p1:.4} p(205/229)={p2:.4e} p(45/46)={p3:.4e}"))
}

fn criterion_3() -> Outcome {
    let symbols: Vec<String> = (0..89).map(|i| format!("S{i:02}")).collect();
    let panel = PricePanel {
        date: NaiveDate::from_ymd_opt(2014, 1, 1).unwrap(),
        symbols: symbols.clone(),
        buckets: 3,
        values: DMatrix::from_fn(89, 3, |i, j| ((i * 7 + j * 13) % 11) as f64 + j as f64 * 0.1),
        fill_mask: vec![vec![Fill::Observed; 3]; 89],
    };
    let pairs = day_summary(&spearman_matrix(&panel).unwrap(), &[0.5]).pairs;
    let assignment = ClusterAssignment {
        date: panel.date,
        method: Method::Kpca,
        k: 1,
        symbols,
        labels: vec![0; 89],
        objective: 0.0,
        seed: 0,
    };
    let co = cooccurrence(&[assignment]).unwrap();
    let co_pairs = build_network(&co, 0.5).unwrap().edges.len();
    let buckets = Session::default().buckets(30);
    let cells = 89 * 229 * buckets;
    outcome(
        pairs == 3916 && co_pairs == 3916 && buckets == 720 && cells == 14_674_320,
        format!("pairs={pairs} network_pairs={co_pairs} buckets={buckets} cells={cells}"),
    )
}

fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    // For each value: 1 + (# strictly smaller) + (# equal - 1) / 2.
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < 1000 {
        let mut series = || -> Vec<f64> {
            // Small integer range forces ties.
            let levels = rng.random_range(3..12);
            (0..20).map(|_| rng.random_range(0..levels) as f64 * 0.25).collect()
        };
        let (x, y) = (series(), series());
        let expected = oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y));
        if !expected.is_finite() {
            continue;
        }
        worst = worst.max((spearman(&x, &y).unwrap() - expected).abs());
        cases += 1;
    }
    outcome(worst <= 1e-12, format!("{cases} cases, max |diff| = {worst:.2e}"))
}

fn criterion_5() -> Outcome {
    let (n, g) = (20, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw = DMatrix::from_fn(n, g, |_, _| rng.random::<f64>() * 10.0 + 100.0);
    let panel = PricePanel {
        date: NaiveDate::from_ymd_opt(2014, 1, 1).unwrap(),
        symbols: (0..n).map(|i| format!("S{i:02}")).collect(),
        buckets: g,
        values: raw.clone(),
        fill_mask: vec![vec![Fill::Observed; g]; n],
    };
    let spec = BasisSpec {
        order: 1,
        count: g,
        penalty: 0.0,
    };
    let result = fpca(&fit_basis(&panel, &spec).unwrap()).unwrap();

    // Plain PCA oracle: standardize rows, center columns, SVD.
    let mut x = raw;
    for mut row in x.row_iter_mut() {
        let mean = row.sum() / g as f64;
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        row.apply(|v| *v = (*v - mean) / sd);
    }
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    let sv = x.svd(false, false).singular_values;
    let mut var: Vec<f64> = sv.iter().map(|s| s * s).collect();
    var.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = var.iter().sum();
    let mut acc = 0.0;
    let oracle: Vec<f64> = var
        .iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect();
    let m = result.explained.len().min(oracle.len());
    let explained_gap = (0..m)
        .map(|i| (result.explained[i] - oracle[i]).abs())
        .fold(0.0, f64::max);

    // Indicator basis on a uniform partition of [0, 1]: W = I / g.
    let e = &result.eigenfunction_coeffs;
    let gram = e * e.transpose() / g as f64;
    let ortho_gap = (gram - DMatrix::identity(e.nrows(), e.nrows())).abs().max();
    outcome(
        explained_gap <= 1e-6 && ortho_gap <= 1e-8 && unit_grid(g).len() == g,
        format!("explained max gap {explained_gap:.2e}, orthonormality gap {ortho_gap:.2e} over {} functions", e.nrows()),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut min_eig, mut row_sum, mut recon): (f64, f64, f64) = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..100 {
        let n = rng.random_range(3..40);
        let d = rng.random_range(1..30);
        let sigma = rng.random_range(0.3..3.0);
        let features = FeatureMatrix {
            symbols: (0..n).map(|i| i.to_string()).collect(),
            values: DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0),
        };
        let k = gaussian_kernel_matrix(&features, sigma).unwrap();
        min_eig = min_eig.min(k.k.clone().symmetric_eigenvalues().min());
        let kc = center_kernel(&k).unwrap();
        row_sum = row_sum.max(kc.k.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max));
        let result = kpca(&kc).unwrap();
        let s = &result.scores;
        recon = recon.max((s * s.transpose() - &kc.k).abs().max());
    }
    outcome(
        min_eig >= -1e-8 && row_sum <= 1e-10 && recon <= 1e-6,
        format!("min eigenvalue {min_eig:.2e}, max centered row sum {row_sum:.2e}, max reconstruction error {recon:.2e}"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut deterministic = true;
    let mut monotone = true;
    let mut iterations = 0usize;
    for run in 0..50u64 {
        let n = rng.random_range(6..40);
        let points = DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>());
        let k = rng.random_range(2..n.min(8));
        let a = kmeans(&points, k, run, 5).unwrap();
        let b = kmeans(&points, k, run, 5).unwrap();
        deterministic &= a.labels == b.labels && a.objective.to_bits() == b.objective.to_bits();
        let dist = euclidean_distances(&points);
        deterministic &= pam(&dist, k, run).unwrap().labels == pam(&dist, k, run).unwrap().labels;
        let auto = |s| comove::choose_k(ClusterInput::Scores(&points), 2, 6.min(n - 1), s, 3).unwrap();
        deterministic &= auto(run).partition.labels == auto(run).partition.labels;
        for trace in &a.objective_traces {
            iterations += trace.len();
            monotone &= trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
        }
    }

    let mut optimal = 0;
    let mut worst_gap: f64 = 0.0;
    for _ in 0..100 {
        let pts = DMatrix::from_fn(8, 3, |_, _| rng.random::<f64>());
        let d = euclidean_distances(&pts);
        let p = pam(&d, 2, 0).unwrap();
        let mut best = f64::INFINITY;
        for a in 0..8 {
            for b in (a + 1)..8 {
                best = best.min((0..8).map(|i| d[(i, a)].min(d[(i, b)])).sum());
            }
        }
        if (p.objective - best).abs() <= 1e-12 {
            optimal += 1;
        } else {
            worst_gap = worst_gap.max(p.objective / best - 1.0);
        }
    }
    outcome(
        deterministic && monotone && optimal >= 95,
        format!(
            "deterministic={deterministic}, PAM optimal on {optimal}/100 (worst relative gap {worst_gap:.3e}), \
             k-means traces non-increasing over {iterations} iterations={monotone}"
        ),
    )
}

/// Day panels for a synthetic spec, universe filtered as in the pipeline.
fn synthetic_panels(spec: &SyntheticSpec) -> (Vec<PricePanel>, GroundTruth) {
    let (ticks, truth) = generate_ticks(spec).unwrap();
    let mut symbols = spec.symbols();
    symbols.sort();
    let panels = split_by_day(ticks)
        .into_iter()
        .map(|(date, t)| bucket_vwap_for(date, &symbols, &t, &spec.session, spec.bucket_seconds))
        .collect();
    let (panels, _) = filter_universe(panels, &CoverageRule::default()).unwrap();
    (panels, truth)
}

/// Network components at `threshold` as labels; isolated stocks are singletons.
fn component_labels(co: &CoOccurrenceMatrix, g: &NetworkGraph) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..co.len()).map(|i| g.components.len() + i).collect();
    for (c, comp) in g.components.iter().enumerate() {
        for s in comp {
            labels[co.index_of(s).unwrap()] = c;
        }
    }
    labels
}

fn planted_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec::two_sectors(8, 0.85, 0.05, 20, seed)
}

fn criterion_8() -> Outcome {
    let cfg = RunConfig::default();
    let mut exact = true;
    let mut base_detail = String::new();
    let mut sums = [0.0; 3];
    let seeds = 10u64;
    for seed in 0..seeds {
        let spec = planted_spec(seed);
        let (panels, truth) = synthetic_panels(&spec);
        for (mi, method) in Method::ALL.into_iter().enumerate() {
            let days: Vec<ClusterAssignment> = panels
                .iter()
                .map(|p| analyse_day(&cfg, method, p).unwrap())
                .collect();
            let co = cooccurrence(&days).unwrap();
            let g = build_network(&co, 0.7).unwrap();
            let ari = adjusted_rand_index(&component_labels(&co, &g), &truth.labels(&co.symbols));
            sums[mi] += ari;
            if seed == 0 && method != Method::Correlation {
                let found: Vec<Vec<String>> = g.components_at_least(2).cloned().collect();
                let mut expected = truth.sectors();
                expected.sort();
                let mut got = found.clone();
                got.sort();
                exact &= got == expected && ari == 1.0;
                base_detail += &format!("{method}: {} components, ARI {ari:.3}; ", found.len());
            }
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / seeds as f64).collect();
    let ok = exact && means.iter().all(|m| *m >= 0.9);
    outcome(
        ok,
        format!(
            "seed 0 {base_detail}mean ARI over {seeds} seeds: correlation {:.3}, fpca {:.3}, kpca {:.3}",
            means[0], means[1], means[2]
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let thresholds = pipeline::default_thresholds();
    let mut nested = true;
    for _ in 0..50 {
        let n = rng.random_range(2..30);
        let days: u32 = rng.random_range(1..60);
        let mut together = vec![vec![days; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let c = rng.random_range(0..=days);
                together[i][j] = c;
                together[j][i] = c;
            }
        }
        let co = CoOccurrenceMatrix {
            symbols: (0..n).map(|i| format!("S{i:02}")).collect(),
            together,
            n_days: days,
            method: None,
        };
        let edge_sets: Vec<Vec<(String, String)>> = thresholds
            .iter()
            .map(|&t| {
                build_network(&co, t)
                    .unwrap()
                    .edges
                    .into_iter()
                    .map(|e| (e.a, e.b))
                    .collect()
            })
            .collect();
        nested &= edge_sets.windows(2).all(|w| w[1].iter().all(|e| w[0].contains(e)));
    }
    let boundaries = [
        (0.80, Category::Red),
        (0.7999, Category::Green),
        (0.60, Category::Green),
        (0.5999, Category::Blue),
        (0.40, Category::Blue),
        (0.3999, Category::White),
        (1.0, Category::Red),
        (0.0, Category::White),
    ];
    let cats_ok = boundaries.iter().all(|(p, c)| Category::of(*p) == *c);
    // 8/10, 6/10 and 4/10 days exactly on the boundaries.
    let co = CoOccurrenceMatrix {
        symbols: vec!["A".into(), "B".into(), "C".into(), "D".into()],
        together: vec![vec![10, 8, 6, 4], vec![8, 10, 3, 0], vec![6, 3, 10, 0], vec![4, 0, 0, 10]],
        n_days: 10,
        method: None,
    };
    let m = category_matrix(&co);
    let matrix_ok = m[0][1] == Category::Red
        && m[0][2] == Category::Green
        && m[0][3] == Category::Blue
        && m[1][2] == Category::White;
    outcome(
        nested && cats_ok && matrix_ok,
        format!("edge sets nested over 50 random matrices={nested}, boundary categories={cats_ok}, matrix boundaries={matrix_ok}"),
    )
}

fn run_fixture(ticks: &Path, out: &Path) -> pipeline::RunManifest {
    let cfg = RunConfig {
        input: vec![ticks.to_path_buf()],
        out: out.to_path_buf(),
        ..RunConfig::default()
    };
    pipeline::run(&cfg).unwrap()
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ticks = dir.path().join("ticks.csv");
    let spec = SyntheticSpec {
        n_days: 5,
        ..planted_spec(derive_seed(10, 0))
    };
    synthetic::generate(&spec, std::io::BufWriter::new(std::fs::File::create(&ticks).unwrap())).unwrap();
    let a = run_fixture(&ticks, &dir.path().join("a"));
    let b = run_fixture(&ticks, &dir.path().join("b"));
    let again = run_fixture(&ticks, &dir.path().join("a"));
    let manifest = |p: &str| std::fs::read(dir.path().join(p).join("manifest.json")).unwrap();
    let ok = a == b && a == again && manifest("a") == manifest("b") && !a.artifacts.is_empty();
    outcome(
        ok,
        format!(
            "{} artifacts; fresh runs identical={}, cached rerun identical={}",
            a.artifacts.len(),
            a == b,
            a == again
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 10] = [
        ("z-test strongest pairs", criterion_1, Some(Duration::from_secs(1))),
        ("z-test spot checks", criterion_2, Some(Duration::from_secs(1))),
        ("counting identities", criterion_3, None),
        ("spearman vs brute-force oracle", criterion_4, None),
        ("fpca reduces to pca", criterion_5, None),
        ("kpca spectral sanity", criterion_6, None),
        ("clustering determinism and optimality", criterion_7, None),
        ("planted sector recovery", criterion_8, Some(Duration::from_secs(120))),
        ("network monotonicity and categories", criterion_9, None),
        ("pipeline determinism", criterion_10, None),
    ];
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.into_iter().enumerate() {
        let (o, took) = timed(f);
        let in_time = limit.is_none_or(|l| took <= l);
        let ok = o.ok && in_time;
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {:<40} {} ({:.2}s) {}",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            o.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
