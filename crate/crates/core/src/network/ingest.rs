//! Edge-list ingestion, value thresholding and stable-link selection.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::graph::ProductionNetwork;
use super::ids::{FirmId, IdMap};
use crate::error::{Error, Result};

/// One reported supplier -> customer transaction in a calendar year.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeRecord {
    pub supplier: FirmId,
    pub customer: FirmId,
    pub year: i32,
    pub value: Option<f64>,
}

/// Boundary rule for the reporting threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// Keep links whose annual value is `>= min_value`.
    #[default]
    Inclusive,
    /// Keep links whose annual value is `> min_value`.
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub min_value: Option<f64>,
    pub rule: ThresholdRule,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_value: Some(3005.0),
            rule: ThresholdRule::Inclusive,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub records: usize,
    pub self_loops: usize,
    pub duplicates_merged: usize,
    pub below_threshold: usize,
    pub kept: usize,
}

/// Deduplicated link sets, one per calendar year of a contiguous range.
#[derive(Debug, Clone, PartialEq)]
pub struct YearlyEdges {
    pub first_year: i32,
    /// `years[k]` holds year `first_year + k`, sorted by (supplier, customer).
    pub years: Vec<Vec<(FirmId, FirmId, Option<f64>)>>,
    pub stats: IngestStats,
}

impl YearlyEdges {
    pub fn last_year(&self) -> i32 {
        self.first_year + self.years.len() as i32 - 1
    }

    pub fn year(&self, y: i32) -> Option<&[(FirmId, FirmId, Option<f64>)]> {
        let k = y.checked_sub(self.first_year)?;
        self.years.get(usize::try_from(k).ok()?).map(Vec::as_slice)
    }
}

/// Read the edge CSV (`supplier_id,customer_id,year[,value]`, header
/// required), interning firm ids into `ids`.
pub fn read_edges_csv<R: Read>(reader: R, file: &str, ids: &mut IdMap) -> Result<Vec<EdgeRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let parse_err = |line: u64, message: String| Error::Parse {
        file: file.to_owned(),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(cs), Some(cc), Some(cy)) = (col("supplier_id"), col("customer_id"), col("year")) else {
        return Err(parse_err(1, "header must contain supplier_id, customer_id, year".into()));
    };
    let cv = col("value");

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |k: usize| rec.get(k).unwrap_or("");
        let (s, c) = (field(cs), field(cc));
        if s.is_empty() || c.is_empty() {
            return Err(parse_err(line, "empty firm id".into()));
        }
        let year: i32 = field(cy)
            .parse()
            .map_err(|_| parse_err(line, format!("bad year {:?}", field(cy))))?;
        let value = match cv.map(field) {
            None | Some("") => None,
            Some(v) => {
                let v: f64 = v.parse().map_err(|_| parse_err(line, format!("bad value {v:?}")))?;
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(parse_err(line, format!("value must be non-negative, got {v}")));
                }
                Some(v)
            }
        };
        out.push(EdgeRecord {
            supplier: ids.intern(s),
            customer: ids.intern(c),
            year,
            value,
        });
    }
    Ok(out)
}

/// Group records into per-year link sets.
///
/// Self-loops are dropped and counted. Repeated `(supplier, customer, year)`
/// records are merged into one link whose value is the annual total; the
/// threshold is then applied to that total when a value is present.
pub fn build_from_edges(records: &[EdgeRecord], opts: &IngestOptions) -> Result<YearlyEdges> {
    if records.is_empty() {
        return Err(Error::Network("no edge records".into()));
    }
    let mut stats = IngestStats {
        records: records.len(),
        ..Default::default()
    };
    let mut by_year: BTreeMap<i32, HashMap<(FirmId, FirmId), Option<f64>>> = BTreeMap::new();
    for r in records {
        by_year.entry(r.year).or_default();
        if r.supplier == r.customer {
            stats.self_loops += 1;
            continue;
        }
        let slot = by_year.get_mut(&r.year).expect("year inserted").entry((r.supplier, r.customer));
        match slot {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                stats.duplicates_merged += 1;
                let merged = match (*e.get(), r.value) {
                    (Some(a), Some(b)) => Some(a + b),
                    (a, b) => a.or(b),
                };
                e.insert(merged);
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(r.value);
            }
        }
    }
    let first = *by_year.keys().next().expect("non-empty");
    let last = *by_year.keys().next_back().expect("non-empty");
    if (last - first + 1) as usize != by_year.len() {
        let present: Vec<String> = by_year.keys().map(|y| y.to_string()).collect();
        return Err(Error::Network(format!(
            "edge years must be contiguous, found {}",
            present.join(",")
        )));
    }

    let keep = |v: Option<f64>| match (v, opts.min_value) {
        (Some(v), Some(min)) => match opts.rule {
            ThresholdRule::Inclusive => v >= min,
            ThresholdRule::Exclusive => v > min,
        },
        _ => true,
    };
    let mut years = Vec::with_capacity(by_year.len());
    for (_, links) in by_year {
        let mut v: Vec<(FirmId, FirmId, Option<f64>)> = Vec::with_capacity(links.len());
        for ((s, c), val) in links {
            if keep(val) {
                v.push((s, c, val));
            } else {
                stats.below_threshold += 1;
            }
        }
        v.sort_unstable_by_key(|e| (e.0, e.1));
        stats.kept += v.len();
        years.push(v);
    }
    if stats.self_loops > 0 {
        log::warn!("dropped {} self-loop edge records", stats.self_loops);
    }
    Ok(YearlyEdges {
        first_year: first,
        years,
        stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableStats {
    pub window: (i32, i32),
    pub max_gap: usize,
    pub candidate_links: usize,
    pub kept: usize,
    pub dropped: usize,
    /// Share of total window trade value carried by dropped links.
    pub dropped_value_share: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StableNetwork {
    pub network: ProductionNetwork,
    pub stats: StableStats,
}

/// Keep links present in at least `len(window) - max_gap` years of the
/// window and collapse them into one static network of `n` firms. Link
/// weights are mean annual values over the years the link is observed.
pub fn stable_subnetwork(
    yearly: &YearlyEdges,
    window: (i32, i32),
    max_gap: usize,
    n: usize,
) -> Result<StableNetwork> {
    let (lo, hi) = window;
    if hi < lo + 1 {
        return Err(Error::Network(format!("window {lo}-{hi} must span at least 2 years")));
    }
    if lo < yearly.first_year || hi > yearly.last_year() {
        return Err(Error::Network(format!(
            "window {lo}-{hi} outside edge data {}-{}",
            yearly.first_year,
            yearly.last_year()
        )));
    }
    let len = (hi - lo + 1) as usize;
    let need = len.saturating_sub(max_gap).max(1);

    // (presence count, value sum, any value seen)
    let mut seen: HashMap<(FirmId, FirmId), (usize, f64, bool)> = HashMap::new();
    for y in lo..=hi {
        for &(s, c, v) in yearly.year(y).expect("checked range") {
            let e = seen.entry((s, c)).or_insert((0, 0.0, false));
            e.0 += 1;
            if let Some(v) = v {
                e.1 += v;
                e.2 = true;
            }
        }
    }
    let any_values = seen.values().any(|e| e.2);
    let mut seen: Vec<_> = seen.into_iter().collect();
    seen.sort_unstable_by_key(|e| e.0);
    let (mut total, mut dropped_value) = (0.0, 0.0);
    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for &((s, c), (count, sum, has_v)) in &seen {
        total += sum;
        if count >= need {
            kept.push((s, c, has_v.then(|| sum / count as f64)));
        } else {
            dropped += 1;
            dropped_value += sum;
        }
    }
    if kept.is_empty() {
        return Err(Error::Network(format!(
            "no link persists in {need} of {len} years of {lo}-{hi}"
        )));
    }
    let stats = StableStats {
        window,
        max_gap,
        candidate_links: seen.len(),
        kept: kept.len(),
        dropped,
        dropped_value_share: (any_values && total > 0.0).then(|| dropped_value / total),
    };
    let network = ProductionNetwork::from_edges(n, kept)?;
    Ok(StableNetwork { network, stats })
}

impl ProductionNetwork {
    /// The static network replicated into every year of `window`.
    pub fn to_yearly(&self, window: (i32, i32)) -> YearlyEdges {
        let links: Vec<_> = self.edges().collect();
        let years: Vec<_> = (window.0..=window.1).map(|_| links.clone()).collect();
        let kept = links.len() * years.len();
        YearlyEdges {
            first_year: window.0,
            years,
            stats: IngestStats {
                records: kept,
                kept,
                ..Default::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: u32, c: u32, year: i32, value: Option<f64>) -> EdgeRecord {
        EdgeRecord {
            supplier: FirmId(s),
            customer: FirmId(c),
            year,
            value,
        }
    }

    #[test]
    fn duplicate_records_collapse_to_one_link() {
        let y = build_from_edges(&[rec(0, 1, 2011, Some(5000.0)), rec(0, 1, 2011, Some(5000.0))], &Default::default()).unwrap();
        assert_eq!(y.years[0].len(), 1);
        assert_eq!(y.stats.duplicates_merged, 1);
    }

    #[test]
    fn self_loop_dropped_and_counted() {
        let y = build_from_edges(&[rec(0, 0, 2011, Some(9000.0)), rec(0, 1, 2011, None)], &Default::default()).unwrap();
        assert_eq!(y.stats.self_loops, 1);
        assert_eq!(y.years[0].len(), 1);
    }

    #[test]
    fn threshold_boundary_is_inclusive_by_default() {
        let recs = [rec(0, 1, 2011, Some(3000.0)), rec(0, 2, 2011, Some(3005.0))];
        let y = build_from_edges(&recs, &Default::default()).unwrap();
        assert_eq!(y.years[0], vec![(FirmId(0), FirmId(2), Some(3005.0))]);
        assert_eq!(y.stats.below_threshold, 1);
        let strict = IngestOptions {
            rule: ThresholdRule::Exclusive,
            ..Default::default()
        };
        assert!(build_from_edges(&recs, &strict).unwrap().years[0].is_empty());
    }

    #[test]
    fn years_must_be_contiguous() {
        let err = build_from_edges(&[rec(0, 1, 2011, None), rec(0, 1, 2013, None)], &Default::default());
        assert!(err.is_err());
    }

    fn presence(years: &[i32]) -> YearlyEdges {
        let mut recs: Vec<_> = years.iter().map(|&y| rec(0, 1, y, Some(4000.0))).collect();
        // a second link present every year keeps every year non-empty
        recs.extend((2011..=2014).map(|y| rec(2, 3, y, Some(4000.0))));
        build_from_edges(&recs, &Default::default()).unwrap()
    }

    #[test]
    fn stable_filter_imputes_one_missing_year() {
        for (years, kept) in [
            (&[2011, 2012, 2013, 2014][..], true),
            (&[2011, 2013, 2014][..], true),
            (&[2011, 2012][..], false),
        ] {
            let s = stable_subnetwork(&presence(years), (2011, 2014), 1, 4).unwrap();
            // oracle: direct count of presence years
            let expect = years.len() >= 3;
            assert_eq!(expect, kept);
            assert_eq!(s.network.has_edge(FirmId(0), FirmId(1)), kept, "{years:?}");
        }
    }

    #[test]
    fn dropped_value_share_reported() {
        let s = stable_subnetwork(&presence(&[2011, 2012]), (2011, 2014), 1, 4).unwrap();
        // dropped: 2 x 4000, total: 2 x 4000 + 4 x 4000
        assert!((s.stats.dropped_value_share.unwrap() - 8000.0 / 24000.0).abs() < 1e-12);
        assert_eq!((s.stats.kept, s.stats.dropped), (1, 1));
    }

    #[test]
    fn empty_result_is_an_error() {
        let y = build_from_edges(&[rec(0, 1, 2011, None), rec(0, 1, 2012, None), rec(1, 2, 2013, None), rec(1, 2, 2014, None)], &Default::default()).unwrap();
        assert!(stable_subnetwork(&y, (2011, 2014), 0, 3).is_err());
    }

    #[test]
    fn csv_reader_reports_line_numbers() {
        let mut ids = IdMap::new();
        let ok = "supplier_id,customer_id,year,value\nA,B,2011,5000\nB,C,2011,\n";
        let recs = read_edges_csv(ok.as_bytes(), "edges.csv", &mut ids).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].value, None);
        let bad = "supplier_id,customer_id,year,value\nA,B,2011,5000\nA,B,twenty,1\n";
        match read_edges_csv(bad.as_bytes(), "edges.csv", &mut ids) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let no_header = "A,B,2011\n";
        assert!(read_edges_csv(no_header.as_bytes(), "e", &mut ids).is_err());
    }
}
