//! Tick ingestion and 30-second VWAP panels.
//!
//! Timestamps are exchange-local milliseconds since the epoch. No timezone
//! conversion happens anywhere: the calendar day is `ts / 86_400_000` and the
//! time of day is the remainder.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, NaiveTime, Timelike};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MS_PER_DAY: i64 = 86_400_000;
pub const TICK_HEADER: [&str; 4] = ["symbol", "timestamp_ms", "price", "volume"];

/// One trade.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub symbol: String,
    pub timestamp_ms: i64,
    pub price: f64,
    pub volume: u64,
}

impl TickRecord {
    pub fn date(&self) -> NaiveDate {
        day_of(self.timestamp_ms)
    }
}

pub fn day_of(timestamp_ms: i64) -> NaiveDate {
    let days = timestamp_ms.div_euclid(MS_PER_DAY);
    NaiveDate::from_num_days_from_ce_opt(EPOCH_DAYS_FROM_CE + days as i32)
        .expect("timestamp within chrono's date range")
}

/// Milliseconds since the epoch at local midnight of `date`.
pub fn midnight_ms(date: NaiveDate) -> i64 {
    (date.num_days_from_ce() - EPOCH_DAYS_FROM_CE) as i64 * MS_PER_DAY
}

// 1970-01-01 counted from 0001-01-01 (day 1).
const EPOCH_DAYS_FROM_CE: i32 = 719_163;

/// Intraday session window, `[open, close)` in milliseconds after midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub open_ms: u32,
    pub close_ms: u32,
}

impl Default for Session {
    fn default() -> Self {
        Session {
            open_ms: 9 * 3_600_000 + 30 * 60_000,
            close_ms: 15 * 3_600_000 + 30 * 60_000,
        }
    }
}

impl Session {
    pub fn new(open: NaiveTime, close: NaiveTime) -> Result<Self> {
        let to_ms = |t: NaiveTime| t.num_seconds_from_midnight() * 1000 + t.nanosecond() / 1_000_000;
        let session = Session {
            open_ms: to_ms(open),
            close_ms: to_ms(close),
        };
        if session.close_ms <= session.open_ms {
            return Err(Error::Config(format!(
                "session close {close} is not after open {open}"
            )));
        }
        Ok(session)
    }

    /// Parses `HH:MM[:SS]` bounds.
    pub fn parse(open: &str, close: &str) -> Result<Self> {
        let parse = |s: &str| {
            NaiveTime::parse_from_str(s, "%H:%M:%S")
                .or_else(|_| NaiveTime::parse_from_str(s, "%H:%M"))
                .map_err(|e| Error::Config(format!("bad session time {s:?}: {e}")))
        };
        Session::new(parse(open)?, parse(close)?)
    }

    pub fn len_ms(&self) -> u32 {
        self.close_ms - self.open_ms
    }

    pub fn contains(&self, timestamp_ms: i64) -> bool {
        let tod = timestamp_ms.rem_euclid(MS_PER_DAY);
        tod >= self.open_ms as i64 && tod < self.close_ms as i64
    }

    /// Number of whole buckets that fit in the session.
    pub fn buckets(&self, bucket_seconds: u32) -> usize {
        (self.len_ms() / (bucket_seconds * 1000)) as usize
    }

    /// Bucket index of an in-session timestamp, or `None` past the last whole bucket.
    pub fn bucket_of(&self, timestamp_ms: i64, bucket_seconds: u32) -> Option<usize> {
        if !self.contains(timestamp_ms) {
            return None;
        }
        let offset = timestamp_ms.rem_euclid(MS_PER_DAY) - self.open_ms as i64;
        let b = (offset / (bucket_seconds as i64 * 1000)) as usize;
        (b < self.buckets(bucket_seconds)).then_some(b)
    }

    pub fn open_time(&self) -> NaiveTime {
        ms_to_time(self.open_ms)
    }

    pub fn close_time(&self) -> NaiveTime {
        ms_to_time(self.close_ms)
    }
}

fn ms_to_time(ms: u32) -> NaiveTime {
    NaiveTime::from_num_seconds_from_midnight_opt(ms / 1000, (ms % 1000) * 1_000_000)
        .expect("ms within a day")
}

impl fmt::Display for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.open_time(), self.close_time())
    }
}

/// Row counts from [`parse_ticks`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub rows: usize,
    pub accepted: usize,
    pub malformed: usize,
    pub out_of_window: usize,
}

impl ParseSummary {
    pub fn merge(&mut self, other: &ParseSummary) {
        self.rows += other.rows;
        self.accepted += other.accepted;
        self.malformed += other.malformed;
        self.out_of_window += other.out_of_window;
    }
}

/// Reads a `symbol,timestamp_ms,price,volume` CSV.
///
/// Rows that fail to parse or violate `price > 0`, `volume > 0` are counted
/// as malformed; rows outside the session are counted and skipped. The
/// returned records are sorted by timestamp (stable, so per-symbol input
/// order is kept for equal timestamps).
pub fn parse_ticks<R: Read>(source: R, session: &Session) -> Result<(Vec<TickRecord>, ParseSummary)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut records = reader.records();
    let header = match records.next() {
        Some(row) => row.map_err(csv_io)?,
        None => return Err(Error::Format("empty tick file: missing header".into())),
    };
    if header.iter().collect::<Vec<_>>() != TICK_HEADER {
        return Err(Error::Format(format!(
            "tick header must be `{}`, found `{}`",
            TICK_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut summary = ParseSummary::default();
    let mut ticks = Vec::new();
    for row in records {
        let row = row.map_err(csv_io)?;
        summary.rows += 1;
        let Some(tick) = parse_row(&row) else {
            summary.malformed += 1;
            continue;
        };
        if !session.contains(tick.timestamp_ms) {
            summary.out_of_window += 1;
            continue;
        }
        summary.accepted += 1;
        ticks.push(tick);
    }
    ticks.sort_by_key(|t| t.timestamp_ms);
    Ok((ticks, summary))
}

fn csv_io(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Stream(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(e.to_string())
    }
}

fn parse_row(row: &csv::StringRecord) -> Option<TickRecord> {
    if row.len() != 4 || row[0].is_empty() {
        return None;
    }
    let timestamp_ms = row[1].parse::<i64>().ok()?;
    let price = row[2].parse::<f64>().ok()?;
    let volume = row[3].parse::<u64>().ok()?;
    if !(price.is_finite() && price > 0.0) || volume == 0 {
        return None;
    }
    Some(TickRecord {
        symbol: row[0].to_string(),
        timestamp_ms,
        price,
        volume,
    })
}

/// Groups ticks by calendar day, preserving order within each day.
pub fn split_by_day(ticks: Vec<TickRecord>) -> BTreeMap<NaiveDate, Vec<TickRecord>> {
    let mut days: BTreeMap<NaiveDate, Vec<TickRecord>> = BTreeMap::new();
    for t in ticks {
        days.entry(t.date()).or_default().push(t);
    }
    days
}

/// Provenance of one panel cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fill {
    Observed,
    ForwardFilled,
    /// Leading gap filled from the first observation (only after universe filtering).
    BackFilled,
    /// No trade yet on this day; the value is NaN.
    Missing,
}

/// One day of bucketed VWAPs, stocks by buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    pub date: NaiveDate,
    pub symbols: Vec<String>,
    pub buckets: usize,
    /// `symbols.len() × buckets`; NaN where the mask says `Missing`.
    pub values: DMatrix<f64>,
    pub fill_mask: Vec<Vec<Fill>>,
}

impl PricePanel {
    pub fn n_stocks(&self) -> usize {
        self.symbols.len()
    }

    pub fn series(&self, stock: usize) -> Vec<f64> {
        self.values.row(stock).iter().copied().collect()
    }

    /// True once every cell is positive and finite.
    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|v| v.is_finite() && *v > 0.0)
    }

    pub fn fill_stats(&self) -> Vec<SymbolFill> {
        self.symbols
            .iter()
            .zip(&self.fill_mask)
            .map(|(symbol, mask)| {
                let count = |f: Fill| mask.iter().filter(|m| **m == f).count();
                SymbolFill {
                    symbol: symbol.clone(),
                    observed: count(Fill::Observed),
                    forward_filled: count(Fill::ForwardFilled),
                    back_filled: count(Fill::BackFilled),
                    missing: count(Fill::Missing),
                }
            })
            .collect()
    }

    /// Fraction of buckets that are not observed trades (missing or forward-filled).
    pub fn gap_fraction(&self, stock: usize) -> f64 {
        let mask = &self.fill_mask[stock];
        let gaps = mask
            .iter()
            .filter(|f| matches!(f, Fill::Missing | Fill::ForwardFilled))
            .count();
        gaps as f64 / self.buckets.max(1) as f64
    }

    /// Keeps the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> PricePanel {
        PricePanel {
            date: self.date,
            symbols: rows.iter().map(|&r| self.symbols[r].clone()).collect(),
            buckets: self.buckets,
            values: self.values.select_rows(rows.iter()),
            fill_mask: rows.iter().map(|&r| self.fill_mask[r].clone()).collect(),
        }
    }

    /// Replaces every row by log-differences; the result has one bucket fewer.
    pub fn log_returns(&self) -> PricePanel {
        let b = self.buckets.saturating_sub(1);
        let values = DMatrix::from_fn(self.n_stocks(), b, |i, j| {
            (self.values[(i, j + 1)] / self.values[(i, j)]).ln()
        });
        PricePanel {
            date: self.date,
            symbols: self.symbols.clone(),
            buckets: b,
            values,
            fill_mask: self.fill_mask.iter().map(|m| m[1..].to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolFill {
    pub symbol: String,
    pub observed: usize,
    pub forward_filled: usize,
    pub back_filled: usize,
    pub missing: usize,
}

/// Buckets one day's trades. Symbols are taken from the ticks (sorted).
///
/// Fails when `ticks` is empty or spans more than one calendar day.
pub fn bucket_vwap(ticks: &[TickRecord], session: &Session, bucket_seconds: u32) -> Result<PricePanel> {
    let first = ticks
        .first()
        .ok_or_else(|| Error::Input("no ticks to bucket".into()))?;
    let date = first.date();
    if let Some(other) = ticks.iter().find(|t| t.date() != date) {
        return Err(Error::Input(format!(
            "ticks span more than one day ({date} and {})",
            other.date()
        )));
    }
    let mut symbols: Vec<String> = ticks.iter().map(|t| t.symbol.clone()).collect();
    symbols.sort();
    symbols.dedup();
    Ok(bucket_vwap_for(date, &symbols, ticks, session, bucket_seconds))
}

/// Buckets trades of `date` onto a fixed, already sorted symbol list.
///
/// Trades for symbols not in the list, on other days, or outside the whole
/// buckets of the session are ignored. Within a bucket trades are summed in
/// a canonical order, so the result does not depend on input order.
pub fn bucket_vwap_for(
    date: NaiveDate,
    symbols: &[String],
    ticks: &[TickRecord],
    session: &Session,
    bucket_seconds: u32,
) -> PricePanel {
    let buckets = session.buckets(bucket_seconds);
    let index: BTreeMap<&str, usize> = symbols
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut trades: Vec<(usize, usize, f64, u64)> = ticks
        .iter()
        .filter(|t| t.date() == date)
        .filter_map(|t| {
            let row = *index.get(t.symbol.as_str())?;
            let b = session.bucket_of(t.timestamp_ms, bucket_seconds)?;
            Some((row, b, t.price, t.volume))
        })
        .collect();
    trades.sort_by(|a, b| {
        (a.0, a.1)
            .cmp(&(b.0, b.1))
            .then(a.2.total_cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });

    let n = symbols.len();
    let mut notional = DMatrix::<f64>::zeros(n, buckets);
    let mut volume = vec![vec![0u64; buckets]; n];
    for (row, b, price, vol) in trades {
        notional[(row, b)] += price * vol as f64;
        volume[row][b] += vol;
    }

    let mut values = DMatrix::<f64>::from_element(n, buckets, f64::NAN);
    let mut fill_mask = vec![vec![Fill::Missing; buckets]; n];
    for row in 0..n {
        let mut last: Option<f64> = None;
        for b in 0..buckets {
            if volume[row][b] > 0 {
                let v = notional[(row, b)] / volume[row][b] as f64;
                values[(row, b)] = v;
                fill_mask[row][b] = Fill::Observed;
                last = Some(v);
            } else if let Some(v) = last {
                values[(row, b)] = v;
                fill_mask[row][b] = Fill::ForwardFilled;
            }
        }
    }
    PricePanel {
        date,
        symbols: symbols.to_vec(),
        buckets,
        values,
        fill_mask,
    }
}

/// Coverage thresholds for keeping a stock in the universe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRule {
    /// A stock-day is invalid when its missing + forward-filled share exceeds this.
    pub max_missing_day: f64,
    /// A stock is dropped when invalid on more than this share of days.
    pub max_dropped_days: f64,
}

impl Default for CoverageRule {
    fn default() -> Self {
        CoverageRule {
            max_missing_day: 0.05,
            max_dropped_days: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedStock {
    pub symbol: String,
    pub reason: String,
    /// Share of all the stock's cells (over every day) that were not observed trades.
    pub missing_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDay {
    pub date: NaiveDate,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UniverseReport {
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedStock>,
    /// Days removed as partial or because a kept stock had no trade at all.
    #[serde(default)]
    pub skipped_days: Vec<SkippedDay>,
}

/// Drops poorly covered stocks and back-fills leading gaps of the rest.
pub fn filter_universe(
    panels: Vec<PricePanel>,
    rule: &CoverageRule,
) -> Result<(Vec<PricePanel>, UniverseReport)> {
    let Some(first) = panels.first() else {
        return Err(Error::Input("no trading days to filter".into()));
    };
    let symbols = first.symbols.clone();
    if let Some(p) = panels.iter().find(|p| p.symbols != symbols) {
        return Err(Error::Input(format!(
            "panel {} has a different symbol ordering",
            p.date
        )));
    }

    let n_days = panels.len() as f64;
    let mut kept_rows = Vec::new();
    let mut report = UniverseReport::default();
    for (row, symbol) in symbols.iter().enumerate() {
        let invalid = panels
            .iter()
            .filter(|p| p.gap_fraction(row) > rule.max_missing_day)
            .count();
        let invalid_share = invalid as f64 / n_days;
        if invalid_share > rule.max_dropped_days {
            let missing_fraction =
                panels.iter().map(|p| p.gap_fraction(row)).sum::<f64>() / n_days;
            report.dropped.push(DroppedStock {
                symbol: symbol.clone(),
                reason: format!(
                    "more than {:.1}% of buckets unobserved on {invalid} of {} days ({:.1}% > {:.1}%)",
                    rule.max_missing_day * 100.0,
                    panels.len(),
                    invalid_share * 100.0,
                    rule.max_dropped_days * 100.0
                ),
                missing_fraction,
            });
        } else {
            kept_rows.push(row);
            report.kept.push(symbol.clone());
        }
    }
    if kept_rows.is_empty() {
        return Err(Error::EmptyUniverse);
    }

    let mut out = Vec::with_capacity(panels.len());
    for panel in &panels {
        let mut p = panel.select(&kept_rows);
        let silent = (0..p.buckets)
            .filter(|&b| p.fill_mask.iter().all(|row| row[b] != Fill::Observed))
            .count();
        if silent as f64 / p.buckets as f64 > rule.max_missing_day {
            report.skipped_days.push(SkippedDay {
                date: p.date,
                reason: format!("partial day: {silent} of {} buckets have no trades", p.buckets),
            });
            continue;
        }
        match back_fill(&mut p) {
            Ok(()) => out.push(p),
            Err(symbol) => report.skipped_days.push(SkippedDay {
                date: p.date,
                reason: format!("no trades for {symbol}"),
            }),
        }
    }
    Ok((out, report))
}

/// Fills leading `Missing` cells from the first observation. Returns the
/// first symbol without any observation.
fn back_fill(panel: &mut PricePanel) -> std::result::Result<(), String> {
    for row in 0..panel.n_stocks() {
        let mask = &mut panel.fill_mask[row];
        let Some(first) = mask.iter().position(|f| *f == Fill::Observed) else {
            return Err(panel.symbols[row].clone());
        };
        let v = panel.values[(row, first)];
        for b in 0..first {
            panel.values[(row, b)] = v;
            mask[b] = Fill::BackFilled;
        }
    }
    Ok(())
}

/// Writes `symbol,b0,...` rows. Values use shortest round-trip formatting.
pub fn write_panel_csv<W: Write>(panel: &PricePanel, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["symbol".to_string()];
    header.extend((0..panel.buckets).map(|b| format!("b{b}")));
    w.write_record(&header)?;
    for (i, symbol) in panel.symbols.iter().enumerate() {
        let mut row = vec![symbol.clone()];
        row.extend(panel.values.row(i).iter().map(|v| {
            if v.is_nan() {
                String::new()
            } else {
                v.to_string()
            }
        }));
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::Stream)?;
    Ok(())
}

/// Reads a panel CSV; empty cells become `Missing`, the rest `Observed`.
pub fn read_panel_csv<R: Read>(source: R, date: NaiveDate) -> Result<PricePanel> {
    let mut reader = csv::ReaderBuilder::new().from_reader(source);
    let header = reader.headers()?.clone();
    if header.get(0) != Some("symbol") {
        return Err(Error::Format("panel header must start with `symbol`".into()));
    }
    let buckets = header.len() - 1;
    let mut symbols = Vec::new();
    let mut data = Vec::new();
    let mut fill_mask = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != buckets + 1 {
            return Err(Error::Format(format!(
                "panel row for {} has {} cells, expected {}",
                &row[0],
                row.len() - 1,
                buckets
            )));
        }
        symbols.push(row[0].to_string());
        let mut mask = Vec::with_capacity(buckets);
        for cell in row.iter().skip(1) {
            if cell.is_empty() {
                data.push(f64::NAN);
                mask.push(Fill::Missing);
            } else {
                data.push(cell.parse::<f64>().map_err(|e| {
                    Error::Format(format!("bad panel value {cell:?}: {e}"))
                })?);
                mask.push(Fill::Observed);
            }
        }
        fill_mask.push(mask);
    }
    let values = DMatrix::from_row_slice(symbols.len(), buckets, &data);
    Ok(PricePanel {
        date,
        symbols,
        buckets,
        values,
        fill_mask,
    })
}

/// JSON companion of a panel CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSidecar {
    pub date: NaiveDate,
    pub session: Session,
    pub bucket_seconds: u32,
    pub buckets: usize,
    pub fill: Vec<SymbolFill>,
    pub universe: UniverseReport,
}
