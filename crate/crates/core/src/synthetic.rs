//! Tick data with planted sector structure.
//!
//! Per bucket, log-returns are drawn as `σ·L·z` with `L` the Cholesky factor
//! of a block correlation matrix (one block per sector). Each bucket then
//! receives a Poisson number of trades at the bucket price with lognormal
//! volumes.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clustering::derive_seed;
use crate::error::{Error, Result};
use crate::market_data::{midnight_ms, Session, TickRecord, TICK_HEADER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorSpec {
    pub name: String,
    pub size: usize,
    pub intra_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_days: usize,
    pub sectors: Vec<SectorSpec>,
    pub inter_correlation: f64,
    #[serde(default)]
    pub session: Session,
    #[serde(default = "default_bucket_seconds")]
    pub bucket_seconds: u32,
    /// Mean Poisson trade count per stock and bucket.
    pub trades_per_bucket: f64,
    /// One positive price per stock; `None` spreads prices over 50..500.
    #[serde(default)]
    pub base_prices: Option<Vec<f64>>,
    /// Standard deviation of the per-bucket log-return.
    pub daily_vol: f64,
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
}

fn default_bucket_seconds() -> u32 {
    30
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2014, 1, 1).unwrap()
}

impl SyntheticSpec {
    /// Two equally sized sectors, the layout used throughout the tests.
    pub fn two_sectors(size: usize, intra: f64, inter: f64, n_days: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_days,
            sectors: vec![
                SectorSpec {
                    name: "BANK".into(),
                    size,
                    intra_correlation: intra,
                },
                SectorSpec {
                    name: "IT".into(),
                    size,
                    intra_correlation: intra,
                },
            ],
            inter_correlation: inter,
            session: Session::default(),
            bucket_seconds: 30,
            trades_per_bucket: 6.0,
            base_prices: None,
            daily_vol: 0.0005,
            seed,
            start_date: default_start(),
        }
    }

    pub fn n_stocks(&self) -> usize {
        self.sectors.iter().map(|s| s.size).sum()
    }

    /// Stock symbols in generation order (sector by sector).
    pub fn symbols(&self) -> Vec<String> {
        self.sectors
            .iter()
            .flat_map(|s| (1..=s.size).map(move |i| format!("{}{:02}", s.name, i)))
            .collect()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let mut map = BTreeMap::new();
        for s in &self.sectors {
            for i in 1..=s.size {
                map.insert(format!("{}{:02}", s.name, i), s.name.clone());
            }
        }
        GroundTruth(map)
    }

    /// Target correlation of per-bucket returns.
    pub fn correlation_matrix(&self) -> DMatrix<f64> {
        let sector_of: Vec<usize> = self
            .sectors
            .iter()
            .enumerate()
            .flat_map(|(k, s)| std::iter::repeat_n(k, s.size))
            .collect();
        let n = sector_of.len();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else if sector_of[i] == sector_of[j] {
                self.sectors[sector_of[i]].intra_correlation
            } else {
                self.inter_correlation
            }
        })
    }

    fn validate(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        let spec_err = |m: String| Err(Error::Config(m));
        if self.sectors.is_empty() || self.n_stocks() == 0 {
            return spec_err("synthetic spec needs at least one stock".into());
        }
        for s in &self.sectors {
            if !(0.0..1.0).contains(&s.intra_correlation) {
                return spec_err(format!("sector {} intra correlation must be in [0, 1)", s.name));
            }
            if self.inter_correlation > s.intra_correlation {
                return spec_err(format!(
                    "inter correlation {} exceeds sector {}'s intra correlation {}",
                    self.inter_correlation, s.name, s.intra_correlation
                ));
            }
        }
        let names: std::collections::BTreeSet<&str> = self.sectors.iter().map(|s| s.name.as_str()).collect();
        if names.len() != self.sectors.len() {
            return spec_err("sector names must be distinct".into());
        }
        if self.bucket_seconds == 0 || self.session.buckets(self.bucket_seconds) == 0 {
            return spec_err("session holds no whole bucket".into());
        }
        if !(self.trades_per_bucket > 0.0) || !(self.daily_vol >= 0.0) {
            return spec_err("trades_per_bucket must be > 0 and daily_vol >= 0".into());
        }
        if let Some(p) = &self.base_prices {
            if p.len() != self.n_stocks() || p.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return spec_err("base_prices needs one positive price per stock".into());
            }
        }
        Cholesky::new(self.correlation_matrix())
            .ok_or_else(|| Error::Config("block correlation matrix is not positive definite".into()))
    }

    fn base_prices(&self) -> Vec<f64> {
        match &self.base_prices {
            Some(p) => p.clone(),
            None => {
                let n = self.n_stocks();
                (0..n).map(|i| 50.0 + 450.0 * i as f64 / n.max(2) as f64).collect()
            }
        }
    }

    /// Trading dates: `n_days` weekdays from `start_date`.
    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut out = Vec::with_capacity(self.n_days);
        let mut d = self.start_date;
        while out.len() < self.n_days {
            if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
                out.push(d);
            }
            d = d + Days::new(1);
        }
        out
    }
}

/// Symbol to sector name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruth(pub BTreeMap<String, String>);

impl GroundTruth {
    /// Integer sector labels for `symbols`, numbered by first appearance.
    pub fn labels(&self, symbols: &[String]) -> Vec<usize> {
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        symbols
            .iter()
            .map(|s| {
                let sector = self.0.get(s).map_or("", String::as_str);
                let next = ids.len();
                *ids.entry(sector).or_insert(next)
            })
            .collect()
    }

    /// Symbols grouped by sector, each group sorted.
    pub fn sectors(&self) -> Vec<Vec<String>> {
        let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for (sym, sector) in &self.0 {
            groups.entry(sector).or_default().push(sym.clone());
        }
        groups.into_values().collect()
    }
}

/// Draws `n_ticks` correlated return vectors (rows) for every stock in `spec`.
pub fn correlated_returns(spec: &SyntheticSpec, n_ticks: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let chol = spec.validate()?;
    let l = chol.l();
    let n = spec.n_stocks();
    let mut out = DMatrix::zeros(n_ticks, n);
    for t in 0..n_ticks {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = &l * z * spec.daily_vol;
        out.set_row(t, &r.transpose());
    }
    Ok(out)
}

/// Generates every trade of the run, sorted by timestamp then symbol.
pub fn generate_ticks(spec: &SyntheticSpec) -> Result<(Vec<TickRecord>, GroundTruth)> {
    let chol = spec.validate()?;
    let l = chol.l();
    let symbols = spec.symbols();
    let n = symbols.len();
    let buckets = spec.session.buckets(spec.bucket_seconds);
    let bucket_ms = spec.bucket_seconds as i64 * 1000;
    let poisson = Poisson::new(spec.trades_per_bucket).map_err(|e| Error::Config(e.to_string()))?;
    let volume = LogNormal::<f64>::new(4.0, 1.0).expect("valid lognormal");

    let mut log_price: Vec<f64> = spec.base_prices().iter().map(|p| p.ln()).collect();
    let mut ticks = Vec::new();
    for (d, date) in spec.dates().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, d as u64));
        let open = midnight_ms(date) + spec.session.open_ms as i64;
        let mut day_ticks = Vec::new();
        for b in 0..buckets {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let r = &l * z;
            for (i, lp) in log_price.iter_mut().enumerate() {
                *lp += spec.daily_vol * r[i];
            }
            let start = open + b as i64 * bucket_ms;
            for (i, symbol) in symbols.iter().enumerate() {
                let trades = poisson.sample(&mut rng) as usize;
                let price = log_price[i].exp();
                for _ in 0..trades {
                    let ts = start + rng.random_range(0..bucket_ms);
                    let vol = volume.sample(&mut rng).ceil().max(1.0) as u64;
                    day_ticks.push(TickRecord {
                        symbol: symbol.clone(),
                        timestamp_ms: ts,
                        price,
                        volume: vol,
                    });
                }
            }
        }
        day_ticks.sort_by(|a, b| a.timestamp_ms.cmp(&b.timestamp_ms).then_with(|| a.symbol.cmp(&b.symbol)));
        ticks.extend(day_ticks);
    }
    Ok((ticks, spec.ground_truth()))
}

pub fn write_ticks_csv<W: Write>(ticks: &[TickRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TICK_HEADER)?;
    for t in ticks {
        w.write_record([
            t.symbol.as_str(),
            &t.timestamp_ms.to_string(),
            &t.price.to_string(),
            &t.volume.to_string(),
        ])?;
    }
    w.flush().map_err(Error::Stream)?;
    Ok(())
}

/// Writes the tick CSV for `spec` and returns its ground truth.
pub fn generate<W: Write>(spec: &SyntheticSpec, out: W) -> Result<GroundTruth> {
    let (ticks, truth) = generate_ticks(spec)?;
    write_ticks_csv(&ticks, out)?;
    Ok(truth)
}
