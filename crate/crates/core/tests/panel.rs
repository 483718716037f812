use proptest::prelude::*;

use netspill_core::dgp::{simulate, DgpConfig};
use netspill_core::network::{FirmId, ProductionNetwork, Side};
use netspill_core::panel::{median, potential_starters, ImportHistory, Mode, Origin};
use netspill_core::pipeline::{estimate, Dataset, EstimateOptions};
use netspill_core::treatment::{peer_share, Spec, Weighting};

const FIRST: i32 = 2010;
const YEARS: usize = 6;

fn history() -> impl Strategy<Value = ImportHistory> {
    (1usize..30).prop_flat_map(|n| {
        (
            proptest::collection::vec(any::<bool>(), n * YEARS),
            proptest::collection::vec(any::<bool>(), n * YEARS),
        )
            .prop_map(move |(eu, non_eu)| ImportHistory::from_dense(FIRST, YEARS, n, eu, non_eu))
    })
}

proptest! {
    #[test]
    fn starters_follow_the_entry_rule(h in history(), start in FIRST + 1..FIRST + 4, len in 0i32..3) {
        let window = (start, start + len);
        for origin in [Origin::Eu, Origin::NonEu, Origin::Any] {
            let rows = potential_starters(&h, origin, window).unwrap();
            for i in 0..h.n() {
                let f = FirmId(i as u32);
                let mine: Vec<_> = rows.iter().filter(|r| r.firm == f).collect();
                // oracle: rows from the window start up to and including the
                // first import, none if the firm imported before the window
                let mut expect = Vec::new();
                if (FIRST..window.0).all(|s| !h.get(f, origin, s).unwrap()) {
                    for t in window.0..=window.1 {
                        let y = h.get(f, origin, t).unwrap();
                        expect.push((t, y));
                        if y {
                            break;
                        }
                    }
                }
                let got: Vec<(i32, bool)> = mine.iter().map(|r| (r.year, r.y)).collect();
                prop_assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn median_splits_in_half(mut v in proptest::collection::vec(-1e6f64..1e6, 1..60)) {
        let m = median(&v);
        v.sort_by(f64::total_cmp);
        prop_assert!(v[0] <= m && m <= v[v.len() - 1]);
        prop_assert!(2 * v.iter().filter(|&&x| x <= m).count() >= v.len());
        prop_assert!(2 * v.iter().filter(|&&x| x >= m).count() >= v.len());
    }

    #[test]
    fn peer_share_counts_importing_peers(
        n in 2usize..25,
        pairs in proptest::collection::vec((0u32..25, 0u32..25), 0..80),
        bits in proptest::collection::vec(any::<bool>(), 25 * YEARS),
    ) {
        let edges: Vec<_> = pairs
            .into_iter()
            .filter(|(s, c)| s != c && (*s as usize) < n && (*c as usize) < n)
            .map(|(s, c)| (FirmId(s), FirmId(c), Some(1.0 + s as f64)))
            .collect();
        let g = ProductionNetwork::from_edges(n, edges).unwrap();
        let eu = bits[..n * YEARS].to_vec();
        let h = ImportHistory::from_dense(FIRST, YEARS, n, eu.clone(), eu);
        let year = FIRST + 2;
        for i in 0..n {
            let f = FirmId(i as u32);
            for side in [Side::Suppliers, Side::Customers] {
                let peers = g.neighbors(f, side).unwrap();
                let s = peer_share(&g, &h, f, Origin::Eu, year, side, Weighting::Uniform).unwrap();
                let importing = peers.iter().filter(|&&j| h.get(j, Origin::Eu, year - 1).unwrap()).count();
                prop_assert_eq!(s.missing, peers.is_empty());
                prop_assert_eq!(s.numerator, importing as f64);
                prop_assert_eq!(s.denominator, peers.len() as f64);
                prop_assert!((0.0..=1.0).contains(&s.value));
                // a graph without edges carries no link values
                if g.edge_count() > 0 {
                    let w = peer_share(&g, &h, f, Origin::Eu, year, side, Weighting::Value).unwrap();
                    prop_assert!((0.0..=1.0).contains(&w.value));
                    prop_assert_eq!(w.missing, s.missing);
                }
            }
        }
    }
}

#[test]
fn spec_names_roundtrip() {
    for s in [
        "s1-col1", "s1-col2", "s1-col3", "s1-col4", "s1-col5", "pooled", "iv-t2", "iv-t23", "iv-pooled-t2",
        "iv-pooled-t23", "h1:workers", "h2:wholesaler", "h3:workers", "h4:same-zip",
    ] {
        assert_eq!(Spec::parse(s).unwrap().name(), s);
    }
    assert!(Spec::parse("s9").is_err());
    assert!(Spec::parse("h1:nothing").is_err());
}

#[test]
fn pooled_panel_has_one_row_per_firm_year() {
    let ds = simulate(&DgpConfig { n: 1500, ..DgpConfig::default() }, 8).unwrap();
    let data = Dataset::from_synthetic(&ds).unwrap();
    let pooled = data.panel(Mode::Pooled, None).unwrap();
    assert!(pooled.rows.iter().all(|r| r.origin == Origin::Any));
    assert!(pooled.rows.windows(2).all(|w| w[0] < w[1]));
    let per = data.panel(Mode::PerOrigin, None).unwrap();
    assert!(per.rows.iter().all(|r| r.origin != Origin::Any));
    assert!(per.rows.len() > pooled.rows.len());
}

#[test]
fn ledger_reconciles_to_estimation_sample() {
    let ds = simulate(&DgpConfig { n: 2000, ..DgpConfig::default() }, 10).unwrap();
    let data = Dataset::from_synthetic(&ds).unwrap();
    for s in ["s1-col1", "s1-col5", "pooled", "iv-t23", "h2:workers"] {
        let e = estimate(&data, &Spec::parse(s).unwrap(), &EstimateOptions::default()).unwrap();
        assert!(e.ledger.reconciles(e.result.n), "{s}");
        assert_eq!(e.ledger.remaining(), e.result.n, "{s}");
        assert_eq!(e.audit.count_mismatches, 0, "{s}");
    }
}
