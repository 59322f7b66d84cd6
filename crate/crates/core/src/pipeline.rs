//! File-based orchestration of the full experiment.
//!
//! Every stage reads the previous stage's artifacts from the output
//! directory and writes its own, so `run` is exactly the composition of the
//! individual stages. Layout under `out/`:
//!
//! ```text
//! panels/<date>.csv, panels/<date>.json, panels/index.json, universe.json
//! correlation/<date>.csv, correlation/<date>.summary.json, correlation/index.json
//! fpca/<date>.json, fpca/<date>.scores.csv, fpca/index.json
//! kpca/<date>.json, kpca/<date>.scores.csv, kpca/index.json
//! assignments/<method>/<date>.csv, assignments/<method>.csv
//! networks/<method>/{together,categories}.csv, p<t>.csv, p<t>.dot, components.json
//! tests/<method>/p0_<p>.csv, p0_<p>.json
//! manifest.json
//! ```
//!
//! Per-day outputs carry a `.key` file holding the SHA-256 of their inputs
//! and parameters; a rerun with the same key reuses the existing files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{self, choose_k, derive_seed, ClusterAssignment, ClusterInput, Method};
use crate::components::{components_needed, select_components, ScoreMatrix};
use crate::error::{Error, Result};
use crate::fpca::{self, BasisSpec};
use crate::hypothesis::{self, ProportionTestResult};
use crate::kpca;
use crate::market_data::{self, CoverageRule, PanelSidecar, ParseSummary, PricePanel, Session};
use crate::network::{self, CoOccurrenceMatrix};
use crate::rank_correlation::{self, CorrelationMatrix};

/// Flat run configuration; every field has a CLI flag of the same name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Vec<PathBuf>,
    pub out: PathBuf,
    pub session_open: String,
    pub session_close: String,
    pub bucket_seconds: u32,
    pub methods: Vec<Method>,
    pub variance_threshold: f64,
    pub sigma: f64,
    /// Fixed cluster count; `None` picks k per day by silhouette.
    pub k: Option<usize>,
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub thresholds: Vec<f64>,
    pub p0: Vec<f64>,
    pub seed: u64,
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
    /// Worker threads; `None` uses every logical core.
    pub jobs: Option<usize>,
    pub max_missing_day: f64,
    pub max_dropped_days: f64,
    pub basis_order: usize,
    pub basis_count: usize,
    pub basis_penalty: f64,
    /// Correlate log-differences instead of VWAP levels.
    pub returns: bool,
    pub min_size: usize,
    /// Thresholds for the per-day correlation summary counts.
    pub summary_thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: Vec::new(),
            out: PathBuf::from("out"),
            session_open: "09:30:00".into(),
            session_close: "15:30:00".into(),
            bucket_seconds: 30,
            methods: Method::ALL.to_vec(),
            variance_threshold: 0.75,
            sigma: 1.0,
            k: None,
            k_min: 2,
            k_max: 15,
            restarts: 10,
            thresholds: default_thresholds(),
            p0: vec![0.70, 0.80],
            seed: 0,
            from: None,
            to: None,
            jobs: None,
            max_missing_day: 0.05,
            max_dropped_days: 0.10,
            basis_order: 4,
            basis_count: 41,
            basis_penalty: 0.0,
            returns: false,
            min_size: 2,
            summary_thresholds: vec![0.5, 0.6],
        }
    }
}

/// 0.50, 0.55, ..., 0.90
pub fn default_thresholds() -> Vec<f64> {
    (10..=18).map(|i| i as f64 / 20.0).collect()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn session(&self) -> Result<Session> {
        Session::parse(&self.session_open, &self.session_close)
    }

    pub fn basis(&self) -> BasisSpec {
        BasisSpec {
            order: self.basis_order,
            count: self.basis_count,
            penalty: self.basis_penalty,
        }
    }

    pub fn coverage(&self) -> CoverageRule {
        CoverageRule {
            max_missing_day: self.max_missing_day,
            max_dropped_days: self.max_dropped_days,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() {
            return bad("at least one method must be enabled".into());
        }
        let session = self.session()?;
        if self.bucket_seconds == 0 || session.buckets(self.bucket_seconds) < 3 {
            return bad(format!("bucket_seconds {} leaves fewer than 3 buckets", self.bucket_seconds));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("thresholds must be a non-empty list inside (0, 1)".into());
        }
        if self.p0.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad("p0 values must lie in (0, 1)".into());
        }
        if !(self.variance_threshold > 0.0 && self.variance_threshold <= 1.0) {
            return bad("variance_threshold must be in (0, 1]".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive".into());
        }
        if let Some(k) = self.k {
            if k < 2 {
                return bad("k must be at least 2".into());
            }
        }
        if self.k_min < 2 || self.k_max < self.k_min {
            return bad(format!("k range [{}, {}] is invalid", self.k_min, self.k_max));
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        if let (Some(a), Some(b)) = (self.from, self.to) {
            if a > b {
                return bad(format!("date range {a}..{b} is empty"));
            }
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_missing_day) || !(0.0..=1.0).contains(&self.max_dropped_days) {
            return bad("coverage fractions must lie in [0, 1]".into());
        }
        self.basis().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn in_range(&self, date: NaiveDate) -> bool {
        self.from.is_none_or(|f| date >= f) && self.to.is_none_or(|t| date <= t)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            b = b.num_threads(j);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

/// Days a stage produced output for, and the days it had to skip.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageIndex {
    pub days: Vec<NaiveDate>,
    pub skipped: Vec<market_data::SkippedDay>,
}

/// Paths (relative to the output directory) written or reused by a stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageOutput {
    pub index: StageIndex,
    pub artifacts: Vec<PathBuf>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn read_bytes(path: &Path, hint: &str) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path, hint)?)?)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Runs `compute` unless `key` matches the stored key and every output exists.
fn cached(key_path: &Path, key: &str, outputs: &[PathBuf], compute: impl FnOnce() -> Result<()>) -> Result<()> {
    let fresh = fs::read_to_string(key_path).is_ok_and(|k| k.trim() == key) && outputs.iter().all(|p| p.exists());
    if fresh {
        return Ok(());
    }
    compute()?;
    write_file(key_path, key.as_bytes())
}

fn rel(out: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(out).unwrap_or(path).to_path_buf()
}

/// Errors that only disqualify one day (recorded as a skip, not fatal).
fn is_day_local(e: &Error) -> bool {
    matches!(
        e,
        Error::ConstantSeries { .. } | Error::Numerical(_) | Error::Degenerate(_) | Error::Parameter(_)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseFile {
    pub parse: ParseSummary,
    pub days_in_input: usize,
    pub report: market_data::UniverseReport,
}

/// Parses tick files, buckets each day and filters the universe.
pub fn ingest(cfg: &RunConfig) -> Result<StageOutput> {
    let session = cfg.session()?;
    if cfg.input.is_empty() {
        return Err(Error::Config("no input files given".into()));
    }
    let mut parse = ParseSummary::default();
    let mut ticks = Vec::new();
    for path in &cfg.input {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (t, s) = market_data::parse_ticks(std::io::BufReader::new(file), &session)?;
        parse.merge(&s);
        ticks.extend(t);
    }
    ticks.sort_by_key(|t| t.timestamp_ms);
    let days: BTreeMap<NaiveDate, Vec<market_data::TickRecord>> = market_data::split_by_day(ticks)
        .into_iter()
        .filter(|(d, _)| cfg.in_range(*d))
        .collect();
    if days.is_empty() {
        return Err(Error::Input("no trades fall inside the session and date range".into()));
    }
    let mut symbols: Vec<String> = days.values().flatten().map(|t| t.symbol.clone()).collect();
    symbols.sort();
    symbols.dedup();

    let pool = cfg.pool()?;
    let panels: Vec<PricePanel> = pool.install(|| {
        days.par_iter()
            .map(|(date, t)| market_data::bucket_vwap_for(*date, &symbols, t, &session, cfg.bucket_seconds))
            .collect()
    });
    let days_in_input = panels.len();
    let (panels, report) = market_data::filter_universe(panels, &cfg.coverage())?;
    for s in &report.skipped_days {
        warn!("skipping {}: {}", s.date, s.reason);
    }
    info!(
        "universe: kept {} of {} stocks over {} days",
        report.kept.len(),
        symbols.len(),
        panels.len()
    );

    let dir = cfg.out.join("panels");
    ensure_dir(&dir)?;
    let mut artifacts = Vec::new();
    for panel in &panels {
        let csv_path = dir.join(format!("{}.csv", panel.date));
        let json_path = dir.join(format!("{}.json", panel.date));
        write_file(&csv_path, &csv_bytes(|b| market_data::write_panel_csv(panel, b))?)?;
        write_json(
            &json_path,
            &PanelSidecar {
                date: panel.date,
                session,
                bucket_seconds: cfg.bucket_seconds,
                buckets: panel.buckets,
                fill: panel.fill_stats(),
                universe: report.clone(),
            },
        )?;
        artifacts.push(rel(&cfg.out, &csv_path));
        artifacts.push(rel(&cfg.out, &json_path));
    }
    let index = StageIndex {
        days: panels.iter().map(|p| p.date).collect(),
        skipped: report.skipped_days.clone(),
    };
    let universe_path = cfg.out.join("universe.json");
    write_json(
        &universe_path,
        &UniverseFile {
            parse,
            days_in_input,
            report,
        },
    )?;
    write_json(&dir.join("index.json"), &index)?;
    artifacts.push(rel(&cfg.out, &universe_path));
    artifacts.push(PathBuf::from("panels/index.json"));
    Ok(StageOutput { index, artifacts })
}

fn load_index(dir: &Path, hint: &str) -> Result<StageIndex> {
    read_json(&dir.join("index.json"), hint)
}

fn load_panel(out: &Path, date: NaiveDate) -> Result<(PricePanel, Vec<u8>)> {
    let path = out.join("panels").join(format!("{date}.csv"));
    let bytes = read_bytes(&path, "run `ingest` first")?;
    let panel = market_data::read_panel_csv(bytes.as_slice(), date)?;
    Ok((panel, bytes))
}

enum DayResult {
    Done(Vec<PathBuf>),
    Skipped(String),
}

/// Runs one per-day analysis over every ingested day.
fn per_day_stage<F>(cfg: &RunConfig, name: &str, params: &str, work: F) -> Result<StageOutput>
where
    F: Fn(&PricePanel, &Path) -> Result<Vec<PathBuf>> + Sync,
{
    let panels = load_index(&cfg.out.join("panels"), "run `ingest` first")?;
    let dir = cfg.out.join(name);
    ensure_dir(&dir)?;
    let pool = cfg.pool()?;
    let results: Vec<Result<DayResult>> = pool.install(|| {
        panels
            .days
            .par_iter()
            .map(|date| {
                let (panel, bytes) = load_panel(&cfg.out, *date)?;
                let key = sha256_hex(&[name.as_bytes(), params.as_bytes(), &bytes].concat());
                let stem = dir.join(date.to_string());
                let run = || work(&panel, &stem).map(drop);
                let key_path = stem.with_extension("key");
                let expected = expected_outputs(name, &stem);
                match cached(&key_path, &key, &expected, run) {
                    Ok(()) => Ok(DayResult::Done(expected)),
                    Err(e) if is_day_local(&e) => Ok(DayResult::Skipped(e.to_string())),
                    Err(e) => Err(e),
                }
            })
            .collect()
    });
    let mut out = StageOutput::default();
    for (date, r) in panels.days.iter().zip(results) {
        match r? {
            DayResult::Done(paths) => {
                out.index.days.push(*date);
                out.artifacts.extend(paths.iter().map(|p| rel(&cfg.out, p)));
            }
            DayResult::Skipped(reason) => {
                warn!("{name}: skipping {date}: {reason}");
                out.index.skipped.push(market_data::SkippedDay { date: *date, reason });
            }
        }
    }
    out.index.skipped.extend(panels.skipped.iter().cloned());
    out.index.skipped.sort_by_key(|s| s.date);
    write_json(&dir.join("index.json"), &out.index)?;
    out.artifacts.push(rel(&cfg.out, &dir.join("index.json")));
    Ok(out)
}

fn expected_outputs(stage: &str, stem: &Path) -> Vec<PathBuf> {
    let with = |suffix: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    match stage {
        "correlation" => vec![with(".csv"), with(".summary.json")],
        _ => vec![with(".json"), with(".scores.csv")],
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationDayFile {
    pub date: NaiveDate,
    pub returns: bool,
    pub summary: rank_correlation::DaySummary,
}

/// Spearman matrices and Table-3 style summaries per day.
pub fn correlate(cfg: &RunConfig) -> Result<StageOutput> {
    let params = format!("returns={};thresholds={:?}", cfg.returns, cfg.summary_thresholds);
    per_day_stage(cfg, "correlation", &params, |panel, stem| {
        let input = if cfg.returns { panel.log_returns() } else { panel.clone() };
        let corr = rank_correlation::spearman_matrix(&input)?;
        let csv_path = with_suffix(stem, ".csv");
        let json_path = with_suffix(stem, ".summary.json");
        write_file(&csv_path, &csv_bytes(|b| rank_correlation::write_square_csv(&corr.symbols, &corr.rho, b))?)?;
        write_json(
            &json_path,
            &CorrelationDayFile {
                date: panel.date,
                returns: cfg.returns,
                summary: rank_correlation::day_summary(&corr, &cfg.summary_thresholds),
            },
        )?;
        Ok(vec![csv_path, json_path])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaDayFile {
    pub date: NaiveDate,
    pub basis: BasisSpec,
    pub eigenvalues: Vec<f64>,
    pub explained: Vec<f64>,
    pub variance_threshold: f64,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpcaDayFile {
    pub date: NaiveDate,
    pub sigma: f64,
    pub eigenvalues: Vec<f64>,
    pub explained: Vec<f64>,
    pub variance_threshold: f64,
    pub m: usize,
}

pub fn write_scores_csv<W: std::io::Write>(scores: &ScoreMatrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["symbol".to_string()];
    header.extend((1..=scores.dims()).map(|j| format!("pc{j}")));
    w.write_record(&header)?;
    for (i, s) in scores.symbols.iter().enumerate() {
        let mut row = vec![s.clone()];
        row.extend(scores.values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::Stream)?;
    Ok(())
}

pub fn read_scores_csv<R: std::io::Read>(source: R) -> Result<ScoreMatrix> {
    let mut reader = csv::ReaderBuilder::new().from_reader(source);
    let dims = reader.headers()?.len().saturating_sub(1);
    let mut symbols = Vec::new();
    let mut data = Vec::new();
    for row in reader.records() {
        let row = row?;
        symbols.push(row[0].to_string());
        for cell in row.iter().skip(1) {
            data.push(
                cell.parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad score {cell:?}: {e}")))?,
            );
        }
    }
    if data.len() != symbols.len() * dims {
        return Err(Error::Format("ragged scores CSV".into()));
    }
    Ok(ScoreMatrix {
        values: DMatrix::from_row_slice(symbols.len(), dims, &data),
        symbols,
    })
}

/// Functional PCA per day; scores restricted to the selected components.
pub fn fpca_stage(cfg: &RunConfig) -> Result<StageOutput> {
    let basis = cfg.basis();
    let params = format!("{basis:?};vt={}", cfg.variance_threshold);
    per_day_stage(cfg, "fpca", &params, |panel, stem| {
        let result = fpca::fpca(&fpca::fit_basis(panel, &basis)?)?;
        let selected = select_components(&result, cfg.variance_threshold)?;
        let json_path = with_suffix(stem, ".json");
        let csv_path = with_suffix(stem, ".scores.csv");
        write_json(
            &json_path,
            &FpcaDayFile {
                date: panel.date,
                basis,
                m: components_needed(&result.explained, cfg.variance_threshold),
                eigenvalues: result.eigenvalues.clone(),
                explained: result.explained.clone(),
                variance_threshold: cfg.variance_threshold,
            },
        )?;
        write_file(&csv_path, &csv_bytes(|b| write_scores_csv(&selected, b))?)?;
        Ok(vec![json_path, csv_path])
    })
}

/// Gaussian kernel PCA per day; scores restricted to the selected components.
pub fn kpca_stage(cfg: &RunConfig) -> Result<StageOutput> {
    let params = format!("sigma={};vt={}", cfg.sigma, cfg.variance_threshold);
    per_day_stage(cfg, "kpca", &params, |panel, stem| {
        let result = kpca::kpca_panel(panel, cfg.sigma)?;
        let selected = select_components(&result, cfg.variance_threshold)?;
        let json_path = with_suffix(stem, ".json");
        let csv_path = with_suffix(stem, ".scores.csv");
        write_json(
            &json_path,
            &KpcaDayFile {
                date: panel.date,
                sigma: cfg.sigma,
                m: selected.dims(),
                eigenvalues: result.eigenvalues.clone(),
                explained: result.explained.clone(),
                variance_threshold: cfg.variance_threshold,
            },
        )?;
        write_file(&csv_path, &csv_bytes(|b| write_scores_csv(&selected, b))?)?;
        Ok(vec![json_path, csv_path])
    })
}

fn upstream_dir(method: Method) -> &'static str {
    match method {
        Method::Correlation => "correlation",
        Method::Fpca => "fpca",
        Method::Kpca => "kpca",
    }
}

/// Seed used for one day's clustering; depends only on the run seed and date.
pub fn day_seed(seed: u64, date: NaiveDate) -> u64 {
    derive_seed(seed, date.num_days_from_ce() as u64)
}

/// Clusters one day's upstream artifact for `method`.
pub fn cluster_day(cfg: &RunConfig, method: Method, date: NaiveDate) -> Result<ClusterAssignment> {
    let dir = cfg.out.join(upstream_dir(method));
    let hint = format!("run `{}` first", if method == Method::Correlation { "correlate" } else { method.as_str() });
    let seed = day_seed(cfg.seed, date);
    let (symbols, matrix) = match method {
        Method::Correlation => {
            let bytes = read_bytes(&dir.join(format!("{date}.csv")), &hint)?;
            let (symbols, rho) = rank_correlation::read_square_csv(bytes.as_slice())?;
            let dist = rank_correlation::to_distance(&CorrelationMatrix { symbols, rho });
            (dist.symbols, dist.d)
        }
        _ => {
            let bytes = read_bytes(&dir.join(format!("{date}.scores.csv")), &hint)?;
            let s = read_scores_csv(bytes.as_slice())?;
            (s.symbols, s.values)
        }
    };
    cluster_matrix(cfg, method, date, seed, symbols, matrix)
}

/// Clusters one day's panel for `method` without touching the filesystem.
///
/// Matches what the file-based stages produce for the same panel, since
/// every intermediate CSV round-trips `f64` exactly.
pub fn analyse_day(cfg: &RunConfig, method: Method, panel: &PricePanel) -> Result<ClusterAssignment> {
    let seed = day_seed(cfg.seed, panel.date);
    let (symbols, matrix) = match method {
        Method::Correlation => {
            let input = if cfg.returns { panel.log_returns() } else { panel.clone() };
            let dist = rank_correlation::to_distance(&rank_correlation::spearman_matrix(&input)?);
            (dist.symbols, dist.d)
        }
        Method::Fpca => {
            let s = select_components(&fpca::fpca(&fpca::fit_basis(panel, &cfg.basis())?)?, cfg.variance_threshold)?;
            (s.symbols, s.values)
        }
        Method::Kpca => {
            let s = select_components(&kpca::kpca_panel(panel, cfg.sigma)?, cfg.variance_threshold)?;
            (s.symbols, s.values)
        }
    };
    cluster_matrix(cfg, method, panel.date, seed, symbols, matrix)
}

fn cluster_matrix(
    cfg: &RunConfig,
    method: Method,
    date: NaiveDate,
    seed: u64,
    symbols: Vec<String>,
    matrix: DMatrix<f64>,
) -> Result<ClusterAssignment> {
    let input = match method {
        Method::Correlation => ClusterInput::Distances(&matrix),
        _ => ClusterInput::Scores(&matrix),
    };
    let partition = match cfg.k {
        Some(k) => input.cluster(k, seed, cfg.restarts)?,
        None => choose_k(input, cfg.k_min, cfg.k_max, seed, cfg.restarts)?.partition,
    };
    Ok(partition.into_assignment(date, method, symbols))
}

/// Daily partitions for one method, plus the concatenated assignment CSV.
pub fn cluster_stage(cfg: &RunConfig, method: Method) -> Result<StageOutput> {
    let up = cfg.out.join(upstream_dir(method));
    let hint = format!("run `{}` first", if method == Method::Correlation { "correlate" } else { method.as_str() });
    let upstream = load_index(&up, &hint)?;
    let dir = cfg.out.join("assignments").join(method.as_str());
    ensure_dir(&dir)?;
    let params = format!("k={:?};range={}..{};restarts={};seed={}", cfg.k, cfg.k_min, cfg.k_max, cfg.restarts, cfg.seed);
    let pool = cfg.pool()?;
    let results: Vec<Result<std::result::Result<ClusterAssignment, String>>> = pool.install(|| {
        upstream
            .days
            .par_iter()
            .map(|date| {
                let path = dir.join(format!("{date}.csv"));
                let input_name = match method {
                    Method::Correlation => format!("{date}.csv"),
                    _ => format!("{date}.scores.csv"),
                };
                let input = read_bytes(&up.join(input_name), &hint)?;
                let key = sha256_hex(&[method.as_str().as_bytes(), params.as_bytes(), &input].concat());
                let mut fresh: Option<ClusterAssignment> = None;
                let res = cached(&path.with_extension("key"), &key, std::slice::from_ref(&path), || {
                    let a = cluster_day(cfg, method, *date)?;
                    write_file(&path, &csv_bytes(|b| clustering::write_assignments(std::slice::from_ref(&a), b))?)?;
                    fresh = Some(a);
                    Ok(())
                });
                match res {
                    Ok(()) => match fresh {
                        Some(a) => Ok(Ok(a)),
                        None => {
                            let bytes = read_bytes(&path, &hint)?;
                            let mut v = clustering::read_assignments(bytes.as_slice())?;
                            v.pop()
                                .map(Ok)
                                .ok_or_else(|| Error::Format(format!("empty assignment file {}", path.display())))
                        }
                    },
                    Err(e) if is_day_local(&e) => Ok(Err(e.to_string())),
                    Err(e) => Err(e),
                }
            })
            .collect()
    });
    let mut out = StageOutput::default();
    let mut all = Vec::new();
    for (date, r) in upstream.days.iter().zip(results) {
        match r? {
            Ok(a) => {
                out.index.days.push(*date);
                out.artifacts.push(rel(&cfg.out, &dir.join(format!("{date}.csv"))));
                all.push(a);
            }
            Err(reason) => {
                warn!("cluster {method}: skipping {date}: {reason}");
                out.index.skipped.push(market_data::SkippedDay { date: *date, reason });
            }
        }
    }
    out.index.skipped.extend(upstream.skipped.iter().cloned());
    out.index.skipped.sort_by_key(|s| s.date);
    let combined = cfg.out.join("assignments").join(format!("{}.csv", method.as_str()));
    write_file(&combined, &csv_bytes(|b| clustering::write_assignments(&all, b))?)?;
    write_json(&dir.join("index.json"), &out.index)?;
    out.artifacts.push(rel(&cfg.out, &combined));
    out.artifacts.push(rel(&cfg.out, &dir.join("index.json")));
    Ok(out)
}

/// Reads the concatenated assignments written by [`cluster_stage`].
pub fn load_assignments(cfg: &RunConfig, method: Method) -> Result<Vec<ClusterAssignment>> {
    let path = cfg.out.join("assignments").join(format!("{}.csv", method.as_str()));
    let bytes = read_bytes(&path, &format!("run `cluster --methods {method}` first"))?;
    clustering::read_assignments(bytes.as_slice())
}

pub fn threshold_tag(t: f64) -> String {
    format!("{t:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub method: Option<Method>,
    pub n_days: u32,
    pub networks: Vec<ThresholdComponents>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdComponents {
    pub threshold: f64,
    pub edges: usize,
    pub components: Vec<Vec<String>>,
}

/// Co-occurrence counts, category matrix and one network per threshold.
pub fn network_stage(cfg: &RunConfig, name: &str, assignments: &[ClusterAssignment]) -> Result<StageOutput> {
    let co = network::cooccurrence(assignments)?;
    let dir = cfg.out.join("networks").join(name);
    ensure_dir(&dir)?;
    let mut artifacts = Vec::new();
    let mut put = |path: PathBuf, bytes: Vec<u8>| -> Result<()> {
        write_file(&path, &bytes)?;
        artifacts.push(rel(&cfg.out, &path));
        Ok(())
    };
    put(dir.join("together.csv"), csv_bytes(|b| network::write_together_csv(&co, b))?)?;
    put(dir.join("categories.csv"), csv_bytes(|b| network::write_category_csv(&co, b))?)?;
    let mut summary = NetworkSummary {
        method: co.method,
        n_days: co.n_days,
        networks: Vec::new(),
    };
    for &t in &cfg.thresholds {
        let g = network::build_network(&co, t)?;
        let tag = threshold_tag(t);
        put(dir.join(format!("p{tag}.csv")), csv_bytes(|b| network::write_edges_csv(&g, b))?)?;
        put(
            dir.join(format!("p{tag}.dot")),
            csv_bytes(|b| network::write_dot(&g, &format!("{name} > {tag}"), cfg.min_size, b))?,
        )?;
        summary.networks.push(ThresholdComponents {
            threshold: t,
            edges: g.edges.len(),
            components: g.components_at_least(cfg.min_size).cloned().collect(),
        });
    }
    let path = dir.join("components.json");
    write_json(&path, &summary)?;
    artifacts.push(rel(&cfg.out, &path));
    Ok(StageOutput {
        index: StageIndex {
            days: assignments.iter().map(|a| a.date).collect(),
            skipped: Vec::new(),
        },
        artifacts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReportFile {
    pub method: Option<Method>,
    pub p0: f64,
    pub n: u32,
    pub note: Option<String>,
    pub results: Vec<ProportionTestResult>,
}

/// Proportion tests for every configured `p0`.
pub fn test_stage(
    cfg: &RunConfig,
    name: &str,
    co: &CoOccurrenceMatrix,
    pairs: Option<&[(String, String)]>,
) -> Result<StageOutput> {
    let dir = cfg.out.join("tests").join(name);
    ensure_dir(&dir)?;
    let mut artifacts = Vec::new();
    for &p0 in &cfg.p0 {
        let results = hypothesis::test_report(co, p0, pairs)?;
        let note = hypothesis::multiple_testing_note(results.len());
        if let Some(n) = &note {
            warn!("{name} p0={p0}: {n}");
        }
        let tag = threshold_tag(p0);
        let csv_path = dir.join(format!("p0_{tag}.csv"));
        let json_path = dir.join(format!("p0_{tag}.json"));
        write_file(&csv_path, &csv_bytes(|b| hypothesis::write_report_csv(&results, b))?)?;
        write_json(
            &json_path,
            &TestReportFile {
                method: co.method,
                p0,
                n: co.n_days,
                note,
                results,
            },
        )?;
        artifacts.push(rel(&cfg.out, &csv_path));
        artifacts.push(rel(&cfg.out, &json_path));
    }
    Ok(StageOutput {
        index: StageIndex::default(),
        artifacts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodManifest {
    pub method: Method,
    pub days_processed: usize,
    pub days_skipped: Vec<market_data::SkippedDay>,
    pub thresholds: Vec<f64>,
    pub networks: Vec<String>,
    pub tests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of every input file, in configuration order.
    pub inputs: Vec<String>,
    pub days_in_input: usize,
    pub methods: Vec<MethodManifest>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn method(&self, m: Method) -> Option<&MethodManifest> {
        self.methods.iter().find(|x| x.method == m)
    }
}

/// Ingest, analyse, cluster, network and test for every configured method.
pub fn run(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    ensure_dir(&cfg.out)?;
    let mut artifacts: Vec<PathBuf> = Vec::new();
    let ingested = ingest(cfg)?;
    artifacts.extend(ingested.artifacts);
    let universe: UniverseFile = read_json(&cfg.out.join("universe.json"), "ingest output")?;

    let mut methods = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for &method in cfg.methods.iter().filter(|m| seen.insert(**m)) {
        let analysed = match method {
            Method::Correlation => correlate(cfg)?,
            Method::Fpca => fpca_stage(cfg)?,
            Method::Kpca => kpca_stage(cfg)?,
        };
        artifacts.extend(analysed.artifacts);
        let clustered = cluster_stage(cfg, method)?;
        artifacts.extend(clustered.artifacts.iter().cloned());
        let assignments = load_assignments(cfg, method)?;
        let (network_paths, test_paths) = if assignments.is_empty() {
            warn!("{method}: no day could be clustered; no networks or tests");
            (Vec::new(), Vec::new())
        } else {
            let net = network_stage(cfg, method.as_str(), &assignments)?;
            let co = network::cooccurrence(&assignments)?;
            let tests = test_stage(cfg, method.as_str(), &co, None)?;
            (net.artifacts, tests.artifacts)
        };
        artifacts.extend(network_paths.iter().cloned());
        artifacts.extend(test_paths.iter().cloned());
        methods.push(MethodManifest {
            method,
            days_processed: clustered.index.days.len(),
            days_skipped: clustered.index.skipped,
            thresholds: cfg.thresholds.clone(),
            networks: path_strings(&network_paths),
            tests: path_strings(&test_paths),
        });
    }

    let mut inputs = Vec::new();
    for path in &cfg.input {
        inputs.push(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?));
    }
    artifacts.sort();
    artifacts.dedup();
    let mut listed = Vec::with_capacity(artifacts.len());
    for a in &artifacts {
        let bytes = fs::read(cfg.out.join(a)).map_err(|e| Error::io(cfg.out.join(a), e))?;
        listed.push(Artifact {
            path: path_string(a),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = RunManifest {
        inputs,
        days_in_input: universe.days_in_input,
        methods,
        artifacts: listed,
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn path_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn path_strings(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| path_string(p)).collect()
}
