use proptest::prelude::*;

use netspill_core::dgp::{firm_layout, gen_network, gen_network_with, DgpConfig};
use netspill_core::network::{
    build_from_edges, read_edges_csv, stable_subnetwork, FirmId, IdMap, IngestOptions, ProductionNetwork, Side,
    ThresholdRule,
};

fn graph() -> impl Strategy<Value = ProductionNetwork> {
    (2usize..40).prop_flat_map(|n| {
        proptest::collection::vec((0..n as u32, 0..n as u32), 0..n * 4).prop_map(move |pairs| {
            let edges = pairs.into_iter().filter(|(s, c)| s != c).map(|(s, c)| (FirmId(s), FirmId(c), None));
            ProductionNetwork::from_edges(n, edges).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn exclusive_sets_exclude_first_order(g in graph()) {
        for i in 0..g.n() {
            let f = FirmId(i as u32);
            for side in [Side::Suppliers, Side::Customers] {
                let lenient = g.second_order_exclusive(f, side, false).unwrap();
                let strict = g.second_order_exclusive(f, side, true).unwrap();
                prop_assert!(lenient.windows(2).all(|w| w[0] < w[1]));
                for l in &lenient {
                    prop_assert!(*l != f);
                    prop_assert!(!g.has_edge(f, *l) && !g.has_edge(*l, f));
                }
                prop_assert!(strict.iter().all(|l| lenient.binary_search(l).is_ok()));
            }
        }
    }

    #[test]
    fn adjacency_is_mirrored(g in graph()) {
        let mut ins = 0;
        let mut outs = 0;
        for i in 0..g.n() {
            let f = FirmId(i as u32);
            ins += g.in_degree(f);
            outs += g.out_degree(f);
            for &c in g.customers(f) {
                prop_assert!(g.suppliers(c).contains(&f));
            }
        }
        prop_assert_eq!(ins, g.edge_count());
        prop_assert_eq!(outs, g.edge_count());
    }

    #[test]
    fn mirrored_graph_swaps_sides(g in graph()) {
        let rev = ProductionNetwork::from_edges(g.n(), g.edges().map(|(s, c, w)| (c, s, w))).unwrap();
        for i in 0..g.n() {
            let f = FirmId(i as u32);
            for strict in [false, true] {
                prop_assert_eq!(
                    g.second_order_exclusive(f, Side::Customers, strict).unwrap(),
                    rev.second_order_exclusive(f, Side::Suppliers, strict).unwrap()
                );
            }
        }
    }
}

#[test]
fn duplicates_collapse_and_self_loops_fail() {
    let e = |s, c| (FirmId(s), FirmId(c), Some(1.0));
    let g = ProductionNetwork::from_edges(3, [e(0, 1), e(0, 1), e(1, 2)]).unwrap();
    assert_eq!(g.edge_count(), 2);
    assert!(ProductionNetwork::from_edges(3, [e(1, 1)]).is_err());
    assert!(ProductionNetwork::from_edges(3, [e(0, 5)]).is_err());
    assert!(g.second_order_exclusive(FirmId(9), Side::Customers, true).is_err());
}

#[test]
fn chain_second_order() {
    // 0 -> 1 -> 2 -> 3
    let e = |s, c| (FirmId(s), FirmId(c), None);
    let g = ProductionNetwork::from_edges(4, [e(0, 1), e(1, 2), e(2, 3)]).unwrap();
    assert_eq!(g.second_order_exclusive(FirmId(0), Side::Customers, true).unwrap(), vec![FirmId(2)]);
    assert_eq!(g.second_order_exclusive(FirmId(3), Side::Suppliers, true).unwrap(), vec![FirmId(1)]);
    // a shortcut 0 -> 2 makes 2 a first-order customer
    let g = ProductionNetwork::from_edges(4, [e(0, 1), e(1, 2), e(2, 3), e(0, 2)]).unwrap();
    assert_eq!(g.second_order_exclusive(FirmId(0), Side::Customers, true).unwrap(), vec![FirmId(3)]);
}

#[test]
fn strict_mode_drops_mixed_paths() {
    // 0 -> 1 -> 2 and 2 -> 3 -> 0: firm 2 is both a customer of a customer
    // and a supplier of a supplier of 0
    let e = |s, c| (FirmId(s), FirmId(c), None);
    let g = ProductionNetwork::from_edges(4, [e(0, 1), e(1, 2), e(2, 3), e(3, 0)]).unwrap();
    assert_eq!(g.second_order_exclusive(FirmId(0), Side::Customers, false).unwrap(), vec![FirmId(2)]);
    assert!(g.second_order_exclusive(FirmId(0), Side::Customers, true).unwrap().is_empty());
}

const EDGES: &str = "supplier_id,customer_id,year,value
A,B,2010,5000
A,B,2011,6000
A,B,2012,3005
B,C,2010,3004.99
B,C,2011,9000
B,C,2012,9000
C,D,2010,4000
C,D,2012,4000
D,A,2011,10000
A,A,2011,10000
";

#[test]
fn threshold_and_stability() {
    let mut ids = IdMap::new();
    let recs = read_edges_csv(EDGES.as_bytes(), "edges.csv", &mut ids).unwrap();
    assert_eq!(ids.len(), 4);
    let y = build_from_edges(&recs, &IngestOptions::default()).unwrap();
    assert_eq!((y.first_year, y.last_year()), (2010, 2012));
    assert_eq!(y.stats.self_loops, 1);
    assert_eq!(y.stats.below_threshold, 1);
    // 3005 passes the inclusive rule only
    let excl = build_from_edges(&recs, &IngestOptions { min_value: Some(3005.0), rule: ThresholdRule::Exclusive }).unwrap();
    assert_eq!(excl.stats.below_threshold, 2);

    let id = |s: &str| ids.get(s).unwrap();
    let strict = stable_subnetwork(&y, (2010, 2012), 0, ids.len()).unwrap();
    assert!(strict.network.has_edge(id("A"), id("B")));
    assert!(!strict.network.has_edge(id("B"), id("C")));
    assert!(!strict.network.has_edge(id("C"), id("D")));
    let gap = stable_subnetwork(&y, (2010, 2012), 1, ids.len()).unwrap();
    assert!(gap.network.has_edge(id("B"), id("C")));
    assert!(gap.network.has_edge(id("C"), id("D")));
    assert!(!gap.network.has_edge(id("D"), id("A")));
    assert_eq!(gap.stats.kept, 3);
    // mean annual value over observed years
    let w = gap.network.side_weights(id("A"), Side::Customers).unwrap();
    assert!((w[0] - (5000.0 + 6000.0 + 3005.0) / 3.0).abs() < 1e-9);
    assert!(stable_subnetwork(&y, (2010, 2010), 0, ids.len()).is_err());
}

#[test]
fn bad_edge_rows_name_the_line() {
    let mut ids = IdMap::new();
    let err = read_edges_csv("supplier_id,customer_id,year,value\nA,B,20x0,1\n".as_bytes(), "e.csv", &mut ids).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("e.csv") && msg.contains('2'), "{msg}");
}

#[test]
fn id_map_csv() {
    let mut ids = IdMap::new();
    ids.intern("X9");
    ids.intern("A1");
    let mut buf = Vec::new();
    ids.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "external_id,firm_index\nX9,0\nA1,1\n");
}

#[test]
fn homophily_off_hits_target_degree() {
    let cfg = DgpConfig {
        n: 1000,
        mean_in_degree: 5.0,
        mean_out_degree: 5.0,
        distance_decay: 1e9,
        industry_boost: 0.0,
        ..DgpConfig::default()
    };
    let st = gen_network(&cfg, 11).unwrap().degree_stats();
    assert!((st.mean_in_degree - 5.0).abs() <= 0.75, "{st:?}");
    assert!((st.mean_out_degree - 5.0).abs() <= 0.75, "{st:?}");
}

#[test]
fn vanishing_decay_links_within_cell() {
    let cfg = DgpConfig {
        n: 3000,
        grid: 4,
        distance_decay: 1e-12,
        mean_in_degree: 3.0,
        mean_out_degree: 3.0,
        ..DgpConfig::default()
    };
    let layout = firm_layout(&cfg, 3);
    let g = gen_network_with(&cfg, &layout, 3).unwrap();
    assert!(g.edge_count() > 1000);
    assert!(g.edges().all(|(s, c, _)| layout.cell[s.index()] == layout.cell[c.index()]));
}

#[test]
fn calibration_degrees() {
    let cfg = DgpConfig::preset("calibration").unwrap();
    let st = gen_network(&cfg, 5).unwrap().degree_stats();
    assert!((st.mean_in_degree / 6.9 - 1.0).abs() <= 0.15, "{st:?}");
    assert!((st.mean_out_degree / 6.5 - 1.0).abs() <= 0.15, "{st:?}");
}

#[test]
fn network_generation_is_reproducible() {
    let cfg = DgpConfig { n: 2000, ..DgpConfig::default() };
    assert_eq!(gen_network(&cfg, 1).unwrap(), gen_network(&cfg, 1).unwrap());
    assert_ne!(gen_network(&cfg, 1).unwrap(), gen_network(&cfg, 2).unwrap());
}
