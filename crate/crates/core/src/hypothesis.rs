//! One-sided z-tests on the share of days a pair of stocks clusters together.

use std::io::Write;

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};
use crate::network::CoOccurrenceMatrix;

/// Above this many tests a multiple-comparisons note is attached to reports.
pub const MANY_TESTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionTestResult {
    pub pair: (String, String),
    pub count: u32,
    pub n: u32,
    pub p0: f64,
    pub z: f64,
    /// Upper-tail `P(Z >= z)`.
    pub p_value: f64,
}

/// Standard normal upper tail `1 - Φ(z)`, accurate in the far tail.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `H0: p = p0` against `H1: p > p0`, normal approximation without
/// continuity correction.
pub fn proportion_ztest(count: u32, n: u32, p0: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Parameter("sample size must be at least 1".into()));
    }
    if count > n {
        return Err(Error::Parameter(format!("count {count} exceeds sample size {n}")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Parameter(format!("null proportion must be in (0, 1), got {p0}")));
    }
    let p_hat = count as f64 / n as f64;
    let z = (p_hat - p0) / (p0 * (1.0 - p0) / n as f64).sqrt();
    Ok((z, normal_sf(z)))
}

fn result(a: &str, b: &str, count: u32, n: u32, p0: f64) -> Result<ProportionTestResult> {
    let (z, p_value) = proportion_ztest(count, n, p0)?;
    Ok(ProportionTestResult {
        pair: (a.to_string(), b.to_string()),
        count,
        n,
        p0,
        z,
        p_value,
    })
}

/// Tests the requested pairs, or every pair together more than `p0` of the
/// days when `pairs` is `None`; sorted by p-value (stable on input order).
pub fn test_report(
    co: &CoOccurrenceMatrix,
    p0: f64,
    pairs: Option<&[(String, String)]>,
) -> Result<Vec<ProportionTestResult>> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Parameter(format!("null proportion must be in (0, 1), got {p0}")));
    }
    let mut out = Vec::new();
    match pairs {
        Some(pairs) => {
            for (a, b) in pairs {
                let i = co
                    .index_of(a)
                    .ok_or_else(|| Error::Input(format!("unknown symbol {a:?}")))?;
                let j = co
                    .index_of(b)
                    .ok_or_else(|| Error::Input(format!("unknown symbol {b:?}")))?;
                out.push(result(a, b, co.together[i][j], co.n_days, p0)?);
            }
        }
        None => {
            for i in 0..co.len() {
                for j in (i + 1)..co.len() {
                    if co.fraction(i, j) > p0 {
                        out.push(result(&co.symbols[i], &co.symbols[j], co.together[i][j], co.n_days, p0)?);
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| a.p_value.total_cmp(&b.p_value));
    Ok(out)
}

/// Scientific notation with three significant digits, e.g. `4.26E-07`.
pub fn format_p_value(p: f64) -> String {
    if p == 0.0 {
        return "0.00E+00".into();
    }
    let s = format!("{p:.2e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    format!("{mantissa}E{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
}

/// `s1,s2,count,n,p0,z,p_value` rows, p-values in table notation.
pub fn write_report_csv<W: Write>(results: &[ProportionTestResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s1", "s2", "count", "n", "p0", "z", "p_value"])?;
    for r in results {
        w.write_record([
            r.pair.0.clone(),
            r.pair.1.clone(),
            r.count.to_string(),
            r.n.to_string(),
            r.p0.to_string(),
            format!("{:.9}", r.z),
            format_p_value(r.p_value),
        ])?;
    }
    w.flush().map_err(Error::Stream)?;
    Ok(())
}

/// Reads `s1,s2,count,n` rows and tests each against `p0`, in file order.
pub fn test_counts_csv<R: std::io::Read>(source: R, p0: f64) -> Result<Vec<ProportionTestResult>> {
    let mut reader = csv::Reader::from_reader(source);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != ["s1", "s2", "count", "n"] {
        return Err(Error::Format(format!("expected header s1,s2,count,n, got {}", header.join(","))));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let num = |i: usize| -> Result<u32> {
            row[i]
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("line {}: bad integer {:?}: {e}", out.len() + 2, &row[i])))
        };
        out.push(result(&row[0], &row[1], num(2)?, num(3)?, p0)?);
    }
    Ok(out)
}

pub fn multiple_testing_note(tests: usize) -> Option<String> {
    (tests > MANY_TESTS).then(|| {
        format!("{tests} tests run without multiple-comparison adjustment; treat small p-values with care")
    })
}
