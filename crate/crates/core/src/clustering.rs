//! Daily partitions of the stock universe.
//!
//! Score matrices (FPCA, KPCA) are clustered with seeded k-means; the
//! correlation distance `1 - rho` has no centroids, so that route uses PAM
//! (k-medoids) instead.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Correlation,
    Fpca,
    Kpca,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Correlation, Method::Fpca, Method::Kpca];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Correlation => "correlation",
            Method::Fpca => "fpca",
            Method::Kpca => "kpca",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "correlation" | "rank" | "spearman" => Ok(Method::Correlation),
            "fpca" => Ok(Method::Fpca),
            "kpca" => Ok(Method::Kpca),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Output of one clustering call.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub k: usize,
    pub labels: Vec<usize>,
    pub objective: f64,
    pub seed: u64,
    /// Objective after every Lloyd update, one list per restart (k-means only).
    pub objective_traces: Vec<Vec<f64>>,
    /// BUILD-phase objective (PAM only).
    pub build_objective: Option<f64>,
    pub medoids: Vec<usize>,
}

impl Partition {
    pub fn into_assignment(self, date: NaiveDate, method: Method, symbols: Vec<String>) -> ClusterAssignment {
        ClusterAssignment {
            date,
            method,
            k: self.k,
            symbols,
            labels: self.labels,
            objective: self.objective,
            seed: self.seed,
        }
    }
}

/// One day's labels for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub date: NaiveDate,
    pub method: Method,
    pub k: usize,
    pub symbols: Vec<String>,
    pub labels: Vec<usize>,
    pub objective: f64,
    pub seed: u64,
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("cluster count k = {k} must lie in [1, {n}]")));
    }
    Ok(())
}

/// Seed of restart `r`, decorrelated from neighbouring base seeds (splitmix64).
pub fn derive_seed(seed: u64, r: u64) -> u64 {
    let mut z = seed ^ r.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sq_dist(points: &DMatrix<f64>, i: usize, c: &[f64]) -> f64 {
    points.row(i).iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// k-means with k-means++ seeding, best of `restarts` runs by objective.
///
/// Rows of `points` are the observations.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, restarts: usize) -> Result<Partition> {
    let n = points.nrows();
    check_k(k, n)?;
    if restarts == 0 {
        return Err(Error::Parameter("restarts must be at least 1".into()));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut traces = Vec::with_capacity(restarts);
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        let (labels, objective, trace) = lloyd(points, k, &mut rng);
        traces.push(trace);
        if best.as_ref().is_none_or(|(b, _)| objective < *b) {
            best = Some((objective, labels));
        }
    }
    let (objective, labels) = best.expect("at least one restart");
    Ok(Partition {
        k,
        labels,
        objective,
        seed,
        objective_traces: traces,
        build_objective: None,
        medoids: Vec::new(),
    })
}

fn plus_plus_init(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.nrows();
    let row = |i: usize| points.row(i).iter().copied().collect::<Vec<f64>>();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if *d > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the target just past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        let c = row(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, &c));
        }
    }
    chosen.into_iter().map(row).collect()
}

fn nearest(points: &DMatrix<f64>, i: usize, centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(points, i, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64, Vec<f64>) {
    let n = points.nrows();
    let dims = points.ncols();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut next: Vec<usize> = (0..n).map(|i| nearest(points, i, &centroids).0).collect();
        repair_empty(points, &mut next, &mut centroids);
        if next == labels {
            break;
        }
        labels = next;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let mut mean = vec![0.0; dims];
            for &i in &members {
                for (m, v) in mean.iter_mut().zip(points.row(i).iter()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= members.len() as f64);
            *centroid = mean;
        }
        let objective: f64 = (0..n).map(|i| sq_dist(points, i, &centroids[labels[i]])).sum();
        if let Some(prev) = trace.last() {
            debug_assert!(
                objective <= prev + 1e-12 * (1.0 + prev.abs()),
                "k-means objective increased: {prev} -> {objective}"
            );
        }
        trace.push(objective);
    }
    let objective = (0..n).map(|i| sq_dist(points, i, &centroids[labels[i]])).sum();
    (labels, objective, trace)
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &DMatrix<f64>, labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|s| *s == 0) else {
            return;
        };
        let mut far: Option<(usize, f64)> = None;
        for (i, &l) in labels.iter().enumerate() {
            if sizes[l] < 2 {
                continue;
            }
            let d = sq_dist(points, i, &centroids[l]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("k <= n leaves a cluster with two members");
        labels[i] = empty;
        centroids[empty] = points.row(i).iter().copied().collect();
    }
}

fn medoid_cost(dist: &DMatrix<f64>, medoids: &[usize]) -> f64 {
    (0..dist.nrows())
        .map(|i| medoids.iter().map(|&m| dist[(i, m)]).fold(f64::INFINITY, f64::min))
        .sum()
}

/// SWAP runs from random medoid sets in addition to the BUILD start.
pub const PAM_RANDOM_STARTS: usize = 10;

/// k-medoids: best-improvement SWAP from the BUILD medoids and from
/// [`PAM_RANDOM_STARTS`] seeded random medoid sets.
///
/// The lowest objective wins, ties going to the earliest start (BUILD first).
pub fn pam(dist: &DMatrix<f64>, k: usize, seed: u64) -> Result<Partition> {
    let n = dist.nrows();
    if dist.ncols() != n {
        return Err(Error::Input("distance matrix must be square".into()));
    }
    check_k(k, n)?;

    let build = pam_build(dist, k);
    let build_objective = medoid_cost(dist, &build);
    let mut best = pam_swap(dist, build);
    for r in 0..PAM_RANDOM_STARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        let start = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let candidate = pam_swap(dist, start);
        if candidate.1 < best.1 {
            best = candidate;
        }
    }

    let mut medoids = best.0;
    medoids.sort_unstable();
    let labels = medoid_labels(dist, &medoids);
    let objective = (0..n).map(|i| dist[(i, medoids[labels[i]])]).sum();
    Ok(Partition {
        k,
        labels,
        objective,
        seed,
        objective_traces: Vec::new(),
        build_objective: Some(build_objective),
        medoids,
    })
}

/// Greedy BUILD: each new medoid is the one lowering total cost the most.
fn pam_build(dist: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let n = dist.nrows();
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    let mut nearest_d = vec![f64::INFINITY; n];
    while medoids.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for cand in (0..n).filter(|c| !medoids.contains(c)) {
            let cost: f64 = (0..n).map(|i| nearest_d[i].min(dist[(i, cand)])).sum();
            if best.is_none_or(|(_, b)| cost < b) {
                best = Some((cand, cost));
            }
        }
        let (m, _) = best.expect("k <= n leaves a candidate");
        medoids.push(m);
        for (i, d) in nearest_d.iter_mut().enumerate() {
            *d = d.min(dist[(i, m)]);
        }
    }
    medoids
}

/// Best-improvement SWAP until no exchange lowers the cost.
///
/// Keeps each point's nearest and second-nearest medoid distance, so one
/// candidate exchange costs O(n).
fn pam_swap(dist: &DMatrix<f64>, mut medoids: Vec<usize>) -> (Vec<usize>, f64) {
    let n = dist.nrows();
    let k = medoids.len();
    let mut is_medoid = vec![false; n];
    for &m in &medoids {
        is_medoid[m] = true;
    }
    let mut cost = medoid_cost(dist, &medoids);
    loop {
        // (slot of nearest medoid, nearest distance, second-nearest distance)
        let near: Vec<(usize, f64, f64)> = (0..n)
            .map(|i| {
                let (mut s, mut d1, mut d2) = (0, f64::INFINITY, f64::INFINITY);
                for (slot, &m) in medoids.iter().enumerate() {
                    let d = dist[(i, m)];
                    if d < d1 {
                        (s, d1, d2) = (slot, d, d1);
                    } else if d < d2 {
                        d2 = d;
                    }
                }
                (s, d1, d2)
            })
            .collect();
        let mut best: Option<(usize, usize, f64)> = None;
        for slot in 0..k {
            for h in (0..n).filter(|&h| !is_medoid[h]) {
                let c: f64 = near
                    .iter()
                    .enumerate()
                    .map(|(i, &(s, d1, d2))| {
                        let dh = dist[(i, h)];
                        if s == slot {
                            dh.min(d2)
                        } else {
                            dh.min(d1)
                        }
                    })
                    .sum();
                if best.is_none_or(|(_, _, b)| c < b) {
                    best = Some((slot, h, c));
                }
            }
        }
        match best {
            Some((slot, h, c)) if c < cost - 1e-12 * (1.0 + cost.abs()) => {
                is_medoid[medoids[slot]] = false;
                is_medoid[h] = true;
                medoids[slot] = h;
                cost = c;
            }
            _ => break,
        }
    }
    let cost = medoid_cost(dist, &medoids);
    (medoids, cost)
}

fn medoid_labels(dist: &DMatrix<f64>, medoids: &[usize]) -> Vec<usize> {
    (0..dist.nrows())
        .map(|i| {
            if let Some(own) = medoids.iter().position(|&m| m == i) {
                return own;
            }
            let mut best = (0, f64::INFINITY);
            for (c, &m) in medoids.iter().enumerate() {
                if dist[(i, m)] < best.1 {
                    best = (c, dist[(i, m)]);
                }
            }
            best.0
        })
        .collect()
}

/// Pairwise Euclidean distances between rows.
pub fn euclidean_distances(points: &DMatrix<f64>) -> DMatrix<f64> {
    let n = points.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (points.row(i) - points.row(j)).norm();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Mean silhouette width; singleton members and `max(a, b) = 0` score 0.
pub fn silhouette(dist: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[(i, j)];
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// What to cluster: coordinates (k-means) or a precomputed distance matrix (PAM).
#[derive(Debug, Clone, Copy)]
pub enum ClusterInput<'a> {
    Scores(&'a DMatrix<f64>),
    Distances(&'a DMatrix<f64>),
}

impl ClusterInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            ClusterInput::Scores(m) | ClusterInput::Distances(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cluster(&self, k: usize, seed: u64, restarts: usize) -> Result<Partition> {
        match self {
            ClusterInput::Scores(m) => kmeans(m, k, seed, restarts),
            ClusterInput::Distances(d) => pam(d, k, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KChoice {
    pub k: usize,
    /// `(k, mean silhouette)` for every candidate.
    pub silhouettes: Vec<(usize, f64)>,
    pub partition: Partition,
}

/// Picks the k in `[k_min, k_max]` (clamped to `n - 1`) with the largest
/// mean silhouette; ties go to the smaller k.
pub fn choose_k(input: ClusterInput<'_>, k_min: usize, k_max: usize, seed: u64, restarts: usize) -> Result<KChoice> {
    let n = input.len();
    let hi = k_max.min(n.saturating_sub(1));
    if k_min < 2 || k_min > hi {
        return Err(Error::Parameter(format!(
            "k range [{k_min}, {k_max}] is empty for {n} points (need 2 <= k_min <= min(k_max, n - 1))"
        )));
    }
    let euclid;
    let dist = match input {
        ClusterInput::Scores(m) => {
            euclid = euclidean_distances(m);
            &euclid
        }
        ClusterInput::Distances(d) => d,
    };
    let mut silhouettes = Vec::new();
    let mut best: Option<(f64, Partition)> = None;
    for k in k_min..=hi {
        let p = input.cluster(k, seed, restarts)?;
        let s = silhouette(dist, &p.labels);
        silhouettes.push((k, s));
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, p));
        }
    }
    let (_, partition) = best.unwrap();
    Ok(KChoice {
        k: partition.k,
        silhouettes,
        partition,
    })
}

/// Chance-corrected agreement between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |m: u64| (m * m.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&m| c2(m)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        // both partitions trivial in the same way
        return if index == expected { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

pub const ASSIGNMENT_HEADER: [&str; 7] = ["date", "method", "k", "symbol", "label", "objective", "seed"];

/// Appends assignment rows (`date,method,k,symbol,label,objective,seed`).
pub fn write_assignments<W: Write>(assignments: &[ClusterAssignment], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ASSIGNMENT_HEADER)?;
    for a in assignments {
        for (symbol, label) in a.symbols.iter().zip(&a.labels) {
            w.write_record([
                a.date.to_string(),
                a.method.to_string(),
                a.k.to_string(),
                symbol.clone(),
                label.to_string(),
                a.objective.to_string(),
                a.seed.to_string(),
            ])?;
        }
    }
    w.flush().map_err(Error::Stream)?;
    Ok(())
}

/// Reads assignment rows back, grouping consecutive rows by (date, method).
pub fn read_assignments<R: Read>(source: R) -> Result<Vec<ClusterAssignment>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != ASSIGNMENT_HEADER {
        return Err(Error::Format(format!(
            "assignment header must be `{}`",
            ASSIGNMENT_HEADER.join(",")
        )));
    }
    let bad = |what: &str, v: &str| Error::Format(format!("bad {what} {v:?} in assignments"));
    let mut out: Vec<ClusterAssignment> = Vec::new();
    for row in reader.records() {
        let row = row?;
        let date = NaiveDate::parse_from_str(&row[0], "%Y-%m-%d").map_err(|_| bad("date", &row[0]))?;
        let method: Method = row[1].parse()?;
        let k: usize = row[2].parse().map_err(|_| bad("k", &row[2]))?;
        let label: usize = row[4].parse().map_err(|_| bad("label", &row[4]))?;
        let objective: f64 = row[5].parse().map_err(|_| bad("objective", &row[5]))?;
        let seed: u64 = row[6].parse().map_err(|_| bad("seed", &row[6]))?;
        match out.last_mut() {
            Some(a) if a.date == date && a.method == method => {
                a.symbols.push(row[3].to_string());
                a.labels.push(label);
            }
            _ => out.push(ClusterAssignment {
                date,
                method,
                k,
                symbols: vec![row[3].to_string()],
                labels: vec![label],
                objective,
                seed,
            }),
        }
    }
    Ok(out)
}
