use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use comove::pipeline::{self, RunConfig};
use comove::synthetic::{self, SyntheticSpec};
use comove::{clustering, hypothesis, network, Error, ErrorKind, Method, NaiveDate};

#[derive(Parser)]
#[command(name = "comove", version, about = "Intraday co-movement networks from tick data")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse tick CSVs into per-day VWAP panels.
    Ingest(Common),
    /// Spearman matrices per day.
    Correlate(Common),
    /// Functional PCA scores per day.
    Fpca(Common),
    /// Gaussian kernel PCA scores per day.
    Kpca(Common),
    /// Daily clusterings for each method.
    Cluster(Common),
    /// Co-occurrence counts and threshold networks.
    Network(NetworkArgs),
    /// One-sided proportion z-tests.
    Test(TestArgs),
    /// Write a synthetic tick CSV with planted sectors.
    Synth(SynthArgs),
    /// Every stage in order, followed by a manifest.
    Run(Common),
}

/// Flags shared by the pipeline stages; each overrides the config file.
#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long)]
    session_open: Option<String>,
    #[arg(long)]
    session_close: Option<String>,
    #[arg(long)]
    bucket_seconds: Option<u32>,
    #[arg(long)]
    variance_threshold: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Fixed number of clusters per day.
    #[arg(long, conflicts_with = "k_auto")]
    k: Option<usize>,
    /// Choose k per day by silhouette.
    #[arg(long)]
    k_auto: bool,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    p0: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    from: Option<NaiveDate>,
    #[arg(long)]
    to: Option<NaiveDate>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    max_missing_day: Option<f64>,
    #[arg(long)]
    max_dropped_days: Option<f64>,
    #[arg(long)]
    basis_order: Option<usize>,
    #[arg(long)]
    basis_count: Option<usize>,
    #[arg(long)]
    basis_penalty: Option<f64>,
    /// Correlate bucket log-returns instead of VWAP levels.
    #[arg(long)]
    returns: bool,
    #[arg(long)]
    min_size: Option<usize>,
}

#[derive(Args)]
struct NetworkArgs {
    #[command(flatten)]
    common: Common,
    /// Single threshold; shorthand for `--thresholds T`.
    #[arg(long, conflicts_with = "thresholds")]
    threshold: Option<f64>,
    /// Assignment CSV to use instead of the stored clusterings.
    #[arg(long)]
    assignments: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    common: Common,
    /// CSV of `s1,s2,count,n` rows; results go to stdout.
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Restrict to these pairs, written `A:B`.
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Full generator spec as JSON; the remaining flags are ignored.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Tick CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the symbol-to-sector map.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    days: usize,
    #[arg(long, default_value_t = 8)]
    sector_size: usize,
    #[arg(long, default_value_t = 0.85)]
    intra: f64,
    #[arg(long, default_value_t = 0.05)]
    inter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn config(&self) -> comove::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if !self.input.is_empty() {
            cfg.input = self.input.clone();
        }
        if !self.methods.is_empty() {
            cfg.methods = self.methods.clone();
        }
        if !self.thresholds.is_empty() {
            cfg.thresholds = self.thresholds.clone();
        }
        if !self.p0.is_empty() {
            cfg.p0 = self.p0.clone();
        }
        if self.k_auto {
            cfg.k = None;
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(
            out,
            session_open,
            session_close,
            bucket_seconds,
            variance_threshold,
            sigma,
            k_min,
            k_max,
            restarts,
            seed,
            max_missing_day,
            max_dropped_days,
            basis_order,
            basis_count,
            basis_penalty,
            min_size
        );
        if self.k.is_some() {
            cfg.k = self.k;
        }
        if self.from.is_some() {
            cfg.from = self.from;
        }
        if self.to.is_some() {
            cfg.to = self.to;
        }
        if self.jobs.is_some() {
            cfg.jobs = self.jobs;
        }
        cfg.returns |= self.returns;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_pairs(pairs: &[String]) -> comove::Result<Vec<(String, String)>> {
    pairs
        .iter()
        .map(|p| {
            p.split_once(':')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Config(format!("pair {p:?} is not of the form A:B")))
        })
        .collect()
}

fn report(stage: &str, out: &pipeline::StageOutput) {
    info!(
        "{stage}: {} days, {} skipped, {} artifacts",
        out.index.days.len(),
        out.index.skipped.len(),
        out.artifacts.len()
    );
}

fn execute(command: Command) -> comove::Result<()> {
    match command {
        Command::Ingest(c) => report("ingest", &pipeline::ingest(&c.config()?)?),
        Command::Correlate(c) => report("correlate", &pipeline::correlate(&c.config()?)?),
        Command::Fpca(c) => report("fpca", &pipeline::fpca_stage(&c.config()?)?),
        Command::Kpca(c) => report("kpca", &pipeline::kpca_stage(&c.config()?)?),
        Command::Cluster(c) => {
            let cfg = c.config()?;
            for &m in &cfg.methods {
                report(&format!("cluster {m}"), &pipeline::cluster_stage(&cfg, m)?);
            }
        }
        Command::Network(a) => {
            let mut cfg = a.common.config()?;
            if let Some(t) = a.threshold {
                cfg.thresholds = vec![t];
                cfg.validate()?;
            }
            match &a.assignments {
                Some(path) => {
                    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
                    let assignments = clustering::read_assignments(io::BufReader::new(file))?;
                    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("custom");
                    let out = pipeline::network_stage(&cfg, name, &assignments)?;
                    print_edges(&cfg, name)?;
                    report("network", &out);
                }
                None => {
                    for &m in &cfg.methods {
                        let assignments = pipeline::load_assignments(&cfg, m)?;
                        report(&format!("network {m}"), &pipeline::network_stage(&cfg, m.as_str(), &assignments)?);
                    }
                }
            }
        }
        Command::Test(a) => {
            let cfg = a.common.config()?;
            let pairs = parse_pairs(&a.pairs)?;
            let pairs = (!pairs.is_empty()).then_some(pairs.as_slice());
            match &a.counts {
                Some(path) => {
                    let stdout = io::stdout();
                    let mut lock = stdout.lock();
                    for &p0 in &cfg.p0 {
                        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
                        let results = hypothesis::test_counts_csv(io::BufReader::new(file), p0)?;
                        hypothesis::write_report_csv(&results, &mut lock)?;
                    }
                    lock.flush()?;
                }
                None => {
                    for &m in &cfg.methods {
                        let co = network::cooccurrence(&pipeline::load_assignments(&cfg, m)?)?;
                        report(&format!("test {m}"), &pipeline::test_stage(&cfg, m.as_str(), &co, pairs)?);
                    }
                }
            }
        }
        Command::Synth(a) => synth(&a)?,
        Command::Run(c) => {
            let manifest = pipeline::run(&c.config()?)?;
            for m in &manifest.methods {
                info!(
                    "{}: {} days processed, {} skipped",
                    m.method,
                    m.days_processed,
                    m.days_skipped.len()
                );
            }
            println!("{} artifacts; manifest at {}", manifest.artifacts.len(), c.config()?.out.join("manifest.json").display());
        }
    }
    Ok(())
}

/// Echoes the edge list of every threshold network just written.
fn print_edges(cfg: &RunConfig, name: &str) -> comove::Result<()> {
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    for &t in &cfg.thresholds {
        let path = cfg.out.join("networks").join(name).join(format!("p{}.csv", pipeline::threshold_tag(t)));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(lock, "# threshold {t}")?;
        lock.write_all(text.as_bytes())?;
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> comove::Result<()> {
    let spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SyntheticSpec>(&text).map_err(|e| Error::Config(format!("spec: {e}")))?
        }
        None => SyntheticSpec::two_sectors(a.sector_size, a.intra, a.inter, a.days, a.seed),
    };
    let file = create(&a.out)?;
    let truth = synthetic::generate(&spec, io::BufWriter::new(file))?;
    if let Some(path) = &a.truth {
        let mut text = serde_json::to_string_pretty(&truth)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    info!("wrote {} stocks over {} days to {}", spec.n_stocks(), spec.n_days, a.out.display());
    Ok(())
}

fn create(path: &Path) -> comove::Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 1,
        ErrorKind::Input => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
