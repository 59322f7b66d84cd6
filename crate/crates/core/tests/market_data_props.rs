use comove::market_data::{
    bucket_vwap_for, filter_universe, midnight_ms, parse_ticks, CoverageRule, Fill, Session, TickRecord,
};
use comove::synthetic::write_ticks_csv;
use comove::{bucket_vwap, NaiveDate, PricePanel};
use proptest::prelude::*;

const DAY: NaiveDate = NaiveDate::from_ymd_opt(2014, 3, 3).unwrap();

fn open_ms() -> i64 {
    midnight_ms(DAY) + Session::default().open_ms as i64
}

fn arb_ticks() -> impl Strategy<Value = Vec<TickRecord>> {
    prop::collection::vec((0usize..3, 0i64..6 * 30_000, 1u32..2000, 1u64..500), 1..60).prop_map(|rows| {
        rows.into_iter()
            .map(|(s, offset, cents, volume)| TickRecord {
                symbol: format!("S{s}"),
                timestamp_ms: open_ms() + offset,
                price: cents as f64 / 100.0,
                volume,
            })
            .collect()
    })
}

fn symbols() -> Vec<String> {
    (0..3).map(|s| format!("S{s}")).collect()
}

fn csv_of(ticks: &[TickRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_ticks_csv(ticks, &mut buf).unwrap();
    buf
}

fn same_panel(a: &PricePanel, b: &PricePanel) -> bool {
    a.symbols == b.symbols
        && a.fill_mask == b.fill_mask
        && a.values.iter().zip(b.values.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Two passes per bucket: total volume, then the weighted sum.
fn naive_vwap(ticks: &[TickRecord], symbol: &str, bucket: i64) -> Option<f64> {
    let inside = |t: &&TickRecord| t.symbol == symbol && (t.timestamp_ms - open_ms()) / 30_000 == bucket;
    let volume: u64 = ticks.iter().filter(inside).map(|t| t.volume).sum();
    if volume == 0 {
        return None;
    }
    Some(ticks.iter().filter(inside).map(|t| t.price * t.volume as f64).sum::<f64>() / volume as f64)
}

proptest! {
    #[test]
    fn observed_cells_match_two_pass_oracle(ticks in arb_ticks()) {
        let panel = bucket_vwap_for(DAY, &symbols(), &ticks, &Session::default(), 30);
        for (i, s) in panel.symbols.iter().enumerate() {
            for b in 0..6 {
                let expected = naive_vwap(&ticks, s, b as i64);
                match panel.fill_mask[i][b] {
                    Fill::Observed => {
                        let got = panel.values[(i, b)];
                        let want = expected.unwrap();
                        prop_assert!((got - want).abs() <= 1e-12 * want.abs());
                    }
                    _ => prop_assert!(expected.is_none()),
                }
            }
        }
    }

    #[test]
    fn within_bucket_order_does_not_matter(ticks in arb_ticks(), seed in any::<u64>()) {
        let mut shuffled = ticks.clone();
        // Reverse-then-rotate within each bucket; bucket order itself is kept.
        shuffled.sort_by_key(|t| (t.timestamp_ms - open_ms()) / 30_000);
        let mut start = 0;
        while start < shuffled.len() {
            let bucket = (shuffled[start].timestamp_ms - open_ms()) / 30_000;
            let end = shuffled[start..]
                .iter()
                .position(|t| (t.timestamp_ms - open_ms()) / 30_000 != bucket)
                .map_or(shuffled.len(), |p| start + p);
            let slice = &mut shuffled[start..end];
            slice.reverse();
            let len = slice.len();
            slice.rotate_left((seed as usize) % len);
            start = end;
        }
        let a = bucket_vwap_for(DAY, &symbols(), &ticks, &Session::default(), 30);
        let b = bucket_vwap_for(DAY, &symbols(), &shuffled, &Session::default(), 30);
        prop_assert!(same_panel(&a, &b));
    }

    #[test]
    fn concatenated_files_equal_joint_parse(ticks in arb_ticks(), cut in 0usize..60) {
        let session = Session::default();
        let cut = cut.min(ticks.len());
        let (mut first, s1) = parse_ticks(csv_of(&ticks[..cut]).as_slice(), &session).unwrap();
        let (second, s2) = parse_ticks(csv_of(&ticks[cut..]).as_slice(), &session).unwrap();
        first.extend(second);
        first.sort_by_key(|t| t.timestamp_ms);
        let (joint, s) = parse_ticks(csv_of(&ticks).as_slice(), &session).unwrap();
        prop_assert_eq!(s.accepted, s1.accepted + s2.accepted);
        let a = bucket_vwap_for(DAY, &symbols(), &first, &session, 30);
        let b = bucket_vwap_for(DAY, &symbols(), &joint, &session, 30);
        prop_assert!(same_panel(&a, &b));
        if !joint.is_empty() {
            let own = bucket_vwap(&joint, &session, 30).unwrap();
            let subset = bucket_vwap_for(DAY, &own.symbols, &first, &session, 30);
            prop_assert!(same_panel(&own, &subset));
        }
    }
}

fn nth_day(d: u64) -> NaiveDate {
    (0..d).fold(DAY, |x, _| x.succ_opt().unwrap())
}

/// Full-session trades for `stocks` symbols, with `empty[i]` leading empty buckets.
fn day_panel(date: NaiveDate, empty: &[usize]) -> PricePanel {
    let symbols: Vec<String> = (0..empty.len()).map(|i| format!("S{i:03}")).collect();
    let open = midnight_ms(date) + Session::default().open_ms as i64;
    let ticks: Vec<TickRecord> = empty
        .iter()
        .enumerate()
        .flat_map(|(i, &g)| {
            (g..720).map(move |b| TickRecord {
                symbol: format!("S{i:03}"),
                timestamp_ms: open + 30_000 * b as i64 + 10,
                price: 50.0 + i as f64,
                volume: 10,
            })
        })
        .collect();
    bucket_vwap_for(date, &symbols, &ticks, &Session::default(), 30)
}

#[test]
fn hundred_stocks_with_eleven_violators_keep_eighty_nine() {
    let days = 20;
    let panels: Vec<PricePanel> = (0..days)
        .map(|d| {
            let date = nth_day(d);
            let empty: Vec<usize> = (0..100)
                .map(|s| if s % 9 == 0 && s / 9 < 11 && d < 4 { 100 } else { 0 })
                .collect();
            day_panel(date, &empty)
        })
        .collect();
    let (out, report) = filter_universe(panels, &CoverageRule::default()).unwrap();
    assert_eq!(report.kept.len(), 89);
    assert_eq!(report.dropped.len(), 11);
    assert_eq!(out.len(), days as usize);
    let mut all: Vec<String> = report.kept.iter().cloned().chain(report.dropped.iter().map(|d| d.symbol.clone())).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 100);
}

#[test]
fn half_empty_on_thirty_percent_of_days_is_dropped() {
    let panels: Vec<PricePanel> = (0..10)
        .map(|d| day_panel(nth_day(d), &[0, if d < 3 { 360 } else { 0 }]))
        .collect();
    let (_, report) = filter_universe(panels, &CoverageRule::default()).unwrap();
    assert_eq!(report.kept, vec!["S000"]);
    assert_eq!(report.dropped[0].symbol, "S001");
    assert!(report.dropped[0].reason.contains("3 of 10 days"));
}
