//! Network regressors: lagged peer shares, second-order instruments,
//! contextual averages, spatial/industry proportions and heterogeneity
//! shares, assembled into design matrices per specification.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdfe::{FactorKind, RowKey};
use crate::ledger::{DropLedger, DropReason};
use crate::network::{FirmId, ProductionNetwork, Side};
use crate::panel::{
    median_split, AttributeTable, Characteristic, Control, Group, ImportHistory, MedianSplit, Mode,
    ObservationRow, Origin, Panel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Every peer counts once.
    #[default]
    Uniform,
    /// Peers weighted by link value.
    Value,
}

/// A share with the counts behind it. `missing` when the peer set is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Share {
    pub value: f64,
    /// Importing peers (weighted when value weights are used).
    pub numerator: f64,
    pub denominator: f64,
    pub missing: bool,
}

impl Share {
    fn of(numerator: f64, denominator: f64) -> Self {
        if denominator > 0.0 {
            Share {
                value: numerator / denominator,
                numerator,
                denominator,
                missing: false,
            }
        } else {
            Share {
                value: 0.0,
                numerator: 0.0,
                denominator: 0.0,
                missing: true,
            }
        }
    }
}

fn weights_for(net: &ProductionNetwork, i: FirmId, side: Side, w: Weighting) -> Result<Option<&[f64]>> {
    match w {
        Weighting::Uniform => Ok(None),
        Weighting::Value => net
            .side_weights(i, side)
            .map(Some)
            .ok_or_else(|| Error::Treatment("value weighting needs link values".into())),
    }
}

fn importing_share(
    peers: &[FirmId],
    weights: Option<&[f64]>,
    history: &ImportHistory,
    origin: Origin,
    year: i32,
) -> Option<Share> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, &j) in peers.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]);
        den += w;
        if history.get(j, origin, year)? {
            num += w;
        }
    }
    Some(Share::of(num, den))
}

/// Share of `i`'s peers on `side` importing from `origin` in `year - 1`.
pub fn peer_share(
    net: &ProductionNetwork,
    history: &ImportHistory,
    i: FirmId,
    origin: Origin,
    year: i32,
    side: Side,
    weighting: Weighting,
) -> Result<Share> {
    let peers = net.neighbors(i, side)?;
    let w = weights_for(net, i, side, weighting)?;
    importing_share(peers, w, history, origin, year - 1)
        .ok_or_else(|| Error::Treatment(format!("no statuses for {}", year - 1)))
}

/// Share of `i`'s exclusive second-order peers on `side` importing in
/// `year - lag`.
pub fn instrument_share(
    net: &ProductionNetwork,
    history: &ImportHistory,
    i: FirmId,
    origin: Origin,
    year: i32,
    side: Side,
    lag: i32,
    strict: bool,
) -> Result<Share> {
    let set = net.second_order_exclusive(i, side, strict)?;
    importing_share(&set, None, history, origin, year - lag)
        .ok_or_else(|| Error::Treatment(format!("no statuses for {}", year - lag)))
}

// ---------------------------------------------------------------------------
// Spatial and industry proportions

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialSpillovers {
    pub zip: Share,
    pub sec: Share,
    pub sec_zip: Share,
}

/// Importer counts per zip, industry and industry×zip cell for one
/// `(origin, year)`. Cell membership uses the attributes of that year.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    year: i32,
    zip: HashMap<u32, (u32, u32)>,
    sec: HashMap<u32, (u32, u32)>,
    sec_zip: HashMap<(u32, u32), (u32, u32)>,
}

impl SpatialIndex {
    pub fn new(attrs: &AttributeTable, history: &ImportHistory, origin: Origin, year: i32) -> Self {
        let mut ix = SpatialIndex {
            year,
            zip: HashMap::new(),
            sec: HashMap::new(),
            sec_zip: HashMap::new(),
        };
        for i in 0..attrs.n() {
            let f = FirmId(i as u32);
            let (Some(z), Some(s)) = (attrs.zip_code(f, year), attrs.industry_code(f, year)) else {
                continue;
            };
            let imp = u32::from(history.get(f, origin, year).unwrap_or(false));
            for cell in [ix.zip.entry(z).or_default(), ix.sec.entry(s).or_default(), ix.sec_zip.entry((s, z)).or_default()] {
                cell.0 += imp;
                cell.1 += 1;
            }
        }
        ix
    }

    /// Proportions among the other firms of `i`'s cells; `None` when `i`
    /// has no attributes in the index year.
    pub fn props(&self, attrs: &AttributeTable, history: &ImportHistory, i: FirmId, origin: Origin) -> Option<SpatialSpillovers> {
        let z = attrs.zip_code(i, self.year)?;
        let s = attrs.industry_code(i, self.year)?;
        let own = u32::from(history.get(i, origin, self.year).unwrap_or(false));
        let share = |c: Option<&(u32, u32)>| {
            let (imp, n) = c.copied().unwrap_or((0, 0));
            Share::of(f64::from(imp.saturating_sub(own)), f64::from(n.saturating_sub(1)))
        };
        Some(SpatialSpillovers {
            zip: share(self.zip.get(&z)),
            sec: share(self.sec.get(&s)),
            sec_zip: share(self.sec_zip.get(&(s, z))),
        })
    }
}

/// Proportions of firms importing from `origin` in `year - 1` among the
/// other firms sharing `i`'s zip, industry, and both. Builds a one-off
/// index; use [`SpatialIndex`] for many firms.
pub fn spatial_props(
    attrs: &AttributeTable,
    history: &ImportHistory,
    i: FirmId,
    origin: Origin,
    year: i32,
) -> Result<SpatialSpillovers> {
    SpatialIndex::new(attrs, history, origin, year - 1)
        .props(attrs, history, i, origin)
        .ok_or_else(|| Error::Treatment(format!("firm {i} has no zip/industry in {}", year - 1)))
}

// ---------------------------------------------------------------------------
// Heterogeneity

/// Per-link predicates for peer categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkPredicate {
    SameIndustry,
    SameZip,
    /// Same leading `n` characters of the zip code.
    SameProvince(usize),
    /// Both directions of the link exist.
    Reciprocal,
}

impl LinkPredicate {
    pub const DEFAULT_PROVINCE_DIGITS: usize = 2;

    pub fn label(self) -> String {
        match self {
            LinkPredicate::SameIndustry => "same-industry".into(),
            LinkPredicate::SameZip => "same-zip".into(),
            LinkPredicate::SameProvince(d) if d == Self::DEFAULT_PROVINCE_DIGITS => "same-province".into(),
            LinkPredicate::SameProvince(d) => format!("same-province{d}"),
            LinkPredicate::Reciprocal => "reciprocal".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "same-industry" => Some(LinkPredicate::SameIndustry),
            "same-zip" => Some(LinkPredicate::SameZip),
            "same-province" => Some(LinkPredicate::SameProvince(Self::DEFAULT_PROVINCE_DIGITS)),
            "reciprocal" => Some(LinkPredicate::Reciprocal),
            _ => s
                .strip_prefix("same-province")
                .and_then(|d| d.parse().ok())
                .filter(|d| *d > 0)
                .map(LinkPredicate::SameProvince),
        }
    }

    /// Whether the link between `i` and peer `j` satisfies the predicate,
    /// with attributes taken in `year`.
    pub fn holds(self, net: &ProductionNetwork, attrs: &AttributeTable, i: FirmId, j: FirmId, year: i32) -> Option<bool> {
        Some(match self {
            LinkPredicate::SameIndustry => attrs.industry_code(i, year)? == attrs.industry_code(j, year)?,
            LinkPredicate::SameZip => attrs.zip_code(i, year)? == attrs.zip_code(j, year)?,
            LinkPredicate::SameProvince(d) => {
                let zi = attrs.zip_label(attrs.zip_code(i, year)?);
                let zj = attrs.zip_label(attrs.zip_code(j, year)?);
                match (zi.get(..d), zj.get(..d)) {
                    (Some(a), Some(b)) => a == b,
                    _ => zi == zj,
                }
            }
            LinkPredicate::Reciprocal => net.has_edge(i, j) && net.has_edge(j, i),
        })
    }
}

/// How peers are sorted into two categories.
#[derive(Debug, Clone, Copy)]
pub enum Categorizer<'a> {
    /// By the peer's own baseline group (Low / High).
    Split(&'a MedianSplit),
    /// By a property of the link (No / Yes).
    Link(LinkPredicate),
}

/// Importing peers per category over the total side-degree; index 0 is
/// Low / No and index 1 High / Yes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeterogeneityShares {
    pub shares: [f64; 2],
    pub numerators: [f64; 2],
    pub total: Share,
}

pub fn category_shares(
    net: &ProductionNetwork,
    history: &ImportHistory,
    attrs: &AttributeTable,
    cat: Categorizer<'_>,
    i: FirmId,
    origin: Origin,
    year: i32,
    side: Side,
    weighting: Weighting,
) -> Result<HeterogeneityShares> {
    let peers = net.neighbors(i, side)?;
    let w = weights_for(net, i, side, weighting)?;
    let prev = year - 1;
    let mut num = [0.0; 2];
    let mut den = 0.0;
    for (k, &j) in peers.iter().enumerate() {
        let wk = w.map_or(1.0, |w| w[k]);
        den += wk;
        let v = match cat {
            Categorizer::Split(s) => usize::from(s.group(j) == Group::High),
            Categorizer::Link(p) => usize::from(
                p.holds(net, attrs, i, j, prev)
                    .ok_or_else(|| Error::Treatment(format!("peer {j} of firm {i} has no attributes in {prev}")))?,
            ),
        };
        let imp = history
            .get(j, origin, prev)
            .ok_or_else(|| Error::Treatment(format!("no statuses for {prev}")))?;
        if imp {
            num[v] += wk;
        }
    }
    let total = Share::of(num[0] + num[1], den);
    let shares = if total.missing { [0.0; 2] } else { [num[0] / den, num[1] / den] };
    Ok(HeterogeneityShares {
        shares,
        numerators: num,
        total,
    })
}

/// Group-form effects from the incremental layout
/// `ybar, ybar·z^H, ybar^H, ybar^H·z^H`: returns `[LL, HL, LH, HH]` where
/// the first letter is the firm's group and the second the peers'.
pub fn group_effects(incremental: [f64; 4]) -> [f64; 4] {
    let [a, b, c, d] = incremental;
    [a, a + b, a + c, a + b + c + d]
}

// ---------------------------------------------------------------------------
// Specifications

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heterogeneity {
    /// Firm-level split interacted with peer shares.
    H1(Characteristic),
    /// Peer shares by the peers' split group.
    H2(Characteristic),
    /// Firm group × peer group.
    H3(Characteristic),
    /// Peer shares by a link property.
    H4(LinkPredicate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spec {
    /// Regression ladder step 1..=5.
    S1(u8),
    Pooled,
    /// Per-origin 2SLS with instruments at t-2 (and t-3 when `t3`).
    Iv { pooled: bool, t3: bool },
    Het(Heterogeneity),
}

impl Spec {
    pub fn parse(s: &str) -> Result<Spec> {
        let bad = || Error::Config(format!("unknown specification {s:?}"));
        Ok(match s {
            "s1-col1" | "s1" => Spec::S1(1),
            "s1-col2" => Spec::S1(2),
            "s1-col3" => Spec::S1(3),
            "s1-col4" | "spillover-controls" => Spec::S1(4),
            "s1-col5" => Spec::S1(5),
            "pooled" => Spec::Pooled,
            "iv-t2" | "iv" => Spec::Iv { pooled: false, t3: false },
            "iv-t23" => Spec::Iv { pooled: false, t3: true },
            "iv-pooled-t2" => Spec::Iv { pooled: true, t3: false },
            "iv-pooled-t23" => Spec::Iv { pooled: true, t3: true },
            _ => {
                let (h, arg) = s.split_once(':').ok_or_else(bad)?;
                let ch = || Characteristic::parse(arg).ok_or_else(bad);
                Spec::Het(match h {
                    "h1" => Heterogeneity::H1(ch()?),
                    "h2" => Heterogeneity::H2(ch()?),
                    "h3" => Heterogeneity::H3(ch()?),
                    "h4" => Heterogeneity::H4(LinkPredicate::parse(arg).ok_or_else(bad)?),
                    _ => return Err(bad()),
                })
            }
        })
    }

    pub fn name(&self) -> String {
        match *self {
            Spec::S1(k) => format!("s1-col{k}"),
            Spec::Pooled => "pooled".into(),
            Spec::Iv { pooled, t3 } => format!(
                "iv{}-{}",
                if pooled { "-pooled" } else { "" },
                if t3 { "t23" } else { "t2" }
            ),
            Spec::Het(Heterogeneity::H1(c)) => format!("h1:{}", c.label()),
            Spec::Het(Heterogeneity::H2(c)) => format!("h2:{}", c.label()),
            Spec::Het(Heterogeneity::H3(c)) => format!("h3:{}", c.label()),
            Spec::Het(Heterogeneity::H4(p)) => format!("h4:{}", p.label()),
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Spec::Pooled | Spec::Iv { pooled: true, .. } => Mode::Pooled,
            _ => Mode::PerOrigin,
        }
    }

    pub fn is_iv(&self) -> bool {
        matches!(self, Spec::Iv { .. })
    }

    /// Default absorbed factors.
    pub fn factors(&self) -> Vec<FactorKind> {
        use FactorKind::*;
        match self {
            Spec::S1(1) | Spec::S1(2) => vec![Firm, OriginYear],
            Spec::S1(3) | Spec::S1(4) => vec![FirmYear, OriginYear],
            Spec::Pooled | Spec::Iv { pooled: true, .. } => vec![Firm, IndustryZipYear],
            _ => vec![FirmYear, OriginIndustryZipYear],
        }
    }

    /// Default cluster key.
    pub fn cluster(&self) -> FactorKind {
        match self {
            Spec::S1(1) | Spec::S1(2) | Spec::Pooled | Spec::Iv { pooled: true, .. } => FactorKind::Firm,
            _ => FactorKind::FirmYear,
        }
    }

    fn own_controls(&self) -> bool {
        matches!(self, Spec::S1(2) | Spec::Pooled | Spec::Iv { pooled: true, .. })
    }

    fn spatial(&self) -> bool {
        matches!(self, Spec::S1(4))
    }

    /// Instrument lags, empty for OLS specifications.
    pub fn lags(&self) -> &'static [i32] {
        match self {
            Spec::Iv { t3: false, .. } => &[2],
            Spec::Iv { t3: true, .. } => &[2, 3],
            _ => &[],
        }
    }

    /// Check the factor set and cluster key against the specification.
    pub fn validate(&self, factors: &[FactorKind], cluster: FactorKind) -> Result<()> {
        if factors.is_empty() {
            return Err(Error::Config(format!("{} needs at least one fixed-effect factor", self.name())));
        }
        if self.mode() == Mode::Pooled {
            if let Some(f) = factors.iter().chain([&cluster]).find(|f| **f == FactorKind::FirmYear) {
                return Err(Error::Config(format!(
                    "{} pools origins into one row per firm-year, so the {} factor would absorb every observation",
                    self.name(),
                    f.label()
                )));
            }
            if let Some(f) = factors.iter().find(|f| f.uses_origin()) {
                return Err(Error::Config(format!("{} has no origin dimension for {}", self.name(), f.label())));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Spec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

// ---------------------------------------------------------------------------
// Design assembly

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub label: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentOptions {
    pub weighting: Weighting,
    pub strict: bool,
    /// Year whose attributes define median splits.
    pub baseline_year: Option<i32>,
}

impl Default for TreatmentOptions {
    fn default() -> Self {
        Self {
            weighting: Weighting::Uniform,
            strict: true,
            baseline_year: None,
        }
    }
}

/// Exact bookkeeping checks performed while building a design.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionAudit {
    /// Rows whose category numerators were checked against the total.
    pub rows_checked: usize,
    /// Rows where the category numerators did not add up to the total.
    pub count_mismatches: usize,
    /// Largest |Σ_v share_v − share| over checked rows and sides.
    pub max_share_gap: f64,
    pub low_firms: usize,
    pub high_firms: usize,
    /// Sampled firms with baseline value above the cutoff.
    pub above_cutoff: usize,
}

#[derive(Debug, Clone)]
pub struct Design {
    pub spec: Spec,
    pub rows: Vec<ObservationRow>,
    pub keys: Vec<RowKey>,
    pub y: Vec<f64>,
    pub exog: Vec<Column>,
    pub endog: Vec<Column>,
    pub instruments: Vec<Column>,
    pub ledger: DropLedger,
    pub split: Option<MedianSplit>,
    pub audit: PartitionAudit,
    /// Rows whose spatial denominators were zero (value set to 0).
    pub spatial_alone: usize,
}

impl Design {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// All regressor labels in estimation order: endogenous then exogenous.
    pub fn regressor_labels(&self) -> Vec<String> {
        self.endog.iter().chain(&self.exog).map(|c| c.label.clone()).collect()
    }

    /// Keep only the given rows (ascending indices).
    pub fn retain_rows(&mut self, keep: &[usize]) {
        let pick = |v: &Vec<f64>| keep.iter().map(|&r| v[r]).collect::<Vec<_>>();
        self.y = pick(&self.y);
        for c in self.exog.iter_mut().chain(&mut self.endog).chain(&mut self.instruments) {
            c.values = pick(&c.values);
        }
        self.rows = keep.iter().map(|&r| self.rows[r]).collect();
        self.keys = keep.iter().map(|&r| self.keys[r]).collect();
    }

    /// CSV with a label header: firm index, origin, year, y, then columns.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let cols: Vec<&Column> = self.endog.iter().chain(&self.exog).chain(&self.instruments).collect();
        let mut header = vec!["firm".to_owned(), "origin".into(), "year".into(), "y".into()];
        header.extend(cols.iter().map(|c| c.label.clone()));
        out.write_record(&header).map_err(std::io::Error::from)?;
        for (r, row) in self.rows.iter().enumerate() {
            let mut rec = vec![row.firm.0.to_string(), row.origin.label().into(), row.year.to_string(), self.y[r].to_string()];
            rec.extend(cols.iter().map(|c| c.values[r].to_string()));
            out.write_record(&rec).map_err(std::io::Error::from)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Read-only inputs for treatment construction.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub net: &'a ProductionNetwork,
    pub history: &'a ImportHistory,
    pub attrs: &'a AttributeTable,
}

struct RowValues {
    values: Vec<f64>,
    /// Only for heterogeneity specs: category numerators and totals per side.
    partition: Option<[(f64, f64, f64); 2]>,
    spatial_alone: bool,
}

/// Column layout of a specification; `values` in [`RowValues`] follow it.
struct Layout {
    labels: Vec<String>,
    n_endog: usize,
    n_instr: usize,
}

fn layout(spec: &Spec) -> Layout {
    let mut labels: Vec<String> = Vec::new();
    let sides = [("D", Side::Suppliers), ("U", Side::Customers)];
    match spec {
        Spec::Het(Heterogeneity::H1(_)) => {
            for (s, _) in sides {
                labels.push(format!("ybar_{s}*z_low"));
                labels.push(format!("ybar_{s}*z_high"));
            }
        }
        Spec::Het(Heterogeneity::H2(_)) => {
            for (s, _) in sides {
                labels.push(format!("ybar_{s}_low"));
                labels.push(format!("ybar_{s}_high"));
            }
        }
        Spec::Het(Heterogeneity::H3(_)) => {
            for (s, _) in sides {
                labels.push(format!("ybar_{s}"));
                labels.push(format!("ybar_{s}*z_high"));
                labels.push(format!("ybar_{s}_high"));
                labels.push(format!("ybar_{s}_high*z_high"));
            }
        }
        Spec::Het(Heterogeneity::H4(_)) => {
            for (s, _) in sides {
                labels.push(format!("ybar_{s}_no"));
                labels.push(format!("ybar_{s}_yes"));
            }
        }
        _ => {
            labels.push("ybar_D".into());
            labels.push("ybar_U".into());
        }
    }
    let n_endog = if spec.is_iv() { 2 } else { 0 };
    if spec.spatial() {
        labels.extend(["prop_imp_zip", "prop_imp_sec", "prop_imp_sec_zip"].map(String::from));
    }
    if spec.own_controls() {
        labels.extend(Control::ALL.iter().map(|c| c.label().to_owned()));
        for (s, _) in sides {
            labels.extend(Control::CONTINUOUS.iter().map(|c| format!("xbar_{s}_{}", c.label())));
        }
    }
    let mut n_instr = 0;
    for &lag in spec.lags() {
        for (s, _) in sides {
            labels.push(format!("z{lag}bar_{s}"));
            n_instr += 1;
        }
    }
    Layout {
        labels,
        n_endog,
        n_instr,
    }
}

/// Mean of each continuous control over peers with attributes in `year`.
fn contextual(ctx: &Context<'_>, peers: &[FirmId], year: i32, out: &mut Vec<f64>) -> bool {
    let mut sums = [0.0; Control::CONTINUOUS.len()];
    let mut n = 0usize;
    for &j in peers {
        if !ctx.attrs.has(j, year) {
            continue;
        }
        n += 1;
        for (s, c) in sums.iter_mut().zip(Control::CONTINUOUS) {
            *s += ctx.attrs.control(j, year, c).unwrap();
        }
    }
    if n == 0 {
        return false;
    }
    out.extend(sums.iter().map(|s| s / n as f64));
    true
}

fn row_values(
    ctx: &Context<'_>,
    spec: &Spec,
    opts: &TreatmentOptions,
    split: Option<&MedianSplit>,
    spatial: Option<&HashMap<(Origin, i32), SpatialIndex>>,
    soe: &[Vec<FirmId>; 2],
    r: &ObservationRow,
) -> Result<std::result::Result<RowValues, DropReason>> {
    let sides = [Side::Suppliers, Side::Customers];
    let (i, origin, t) = (r.firm, r.origin, r.year);
    let mut shares = [Share::of(0.0, 0.0); 2];
    for (k, &side) in sides.iter().enumerate() {
        shares[k] = peer_share(ctx.net, ctx.history, i, origin, t, side, opts.weighting)?;
    }
    if shares[0].missing {
        return Ok(Err(DropReason::NoSuppliers));
    }
    if shares[1].missing {
        return Ok(Err(DropReason::NoCustomers));
    }
    let mut instr = Vec::new();
    for &lag in spec.lags() {
        if !ctx.history.covers(t - lag) {
            return Ok(Err(DropReason::LagUnavailable));
        }
    }
    for &lag in spec.lags() {
        for (k, reason) in [DropReason::NoSecondOrderSuppliers, DropReason::NoSecondOrderCustomers]
            .into_iter()
            .enumerate()
        {
            match importing_share(&soe[k], None, ctx.history, origin, t - lag) {
                Some(s) if !s.missing => instr.push(s.value),
                _ => return Ok(Err(reason)),
            }
        }
    }

    let mut values = Vec::with_capacity(64);
    let mut partition = None;
    match spec {
        Spec::Het(h) => {
            let cat = match h {
                Heterogeneity::H4(p) => Categorizer::Link(*p),
                _ => Categorizer::Split(split.expect("split computed for split-based heterogeneity")),
            };
            let mut part = [(0.0, 0.0, 0.0); 2];
            let z_high = split.map_or(0.0, |s| f64::from(u8::from(s.group(i) == Group::High)));
            for (k, &side) in sides.iter().enumerate() {
                let hs = match category_shares(ctx.net, ctx.history, ctx.attrs, cat, i, origin, t, side, opts.weighting) {
                    Ok(h) => h,
                    Err(Error::Treatment(_)) => return Ok(Err(DropReason::PeerAttributeGap)),
                    Err(e) => return Err(e),
                };
                part[k] = (hs.numerators[0], hs.numerators[1], hs.total.numerator);
                let ybar = hs.total.value;
                match h {
                    Heterogeneity::H1(_) => values.extend([ybar * (1.0 - z_high), ybar * z_high]),
                    Heterogeneity::H2(_) | Heterogeneity::H4(_) => values.extend(hs.shares),
                    Heterogeneity::H3(_) => {
                        values.extend([ybar, ybar * z_high, hs.shares[1], hs.shares[1] * z_high])
                    }
                }
            }
            partition = Some(part);
        }
        _ => values.extend([shares[0].value, shares[1].value]),
    }

    let mut spatial_alone = false;
    if spec.spatial() {
        let ix = &spatial.expect("spatial index built")[&(origin, t - 1)];
        let Some(sp) = ix.props(ctx.attrs, ctx.history, i, origin) else {
            return Ok(Err(DropReason::AttributeGap));
        };
        spatial_alone = sp.zip.missing || sp.sec.missing || sp.sec_zip.missing;
        values.extend([sp.zip.value, sp.sec.value, sp.sec_zip.value]);
    }
    if spec.own_controls() {
        for c in Control::ALL {
            values.push(ctx.attrs.control(i, t, c).expect("row has attributes"));
        }
        for side in sides {
            if !contextual(ctx, ctx.net.side(i, side), t - 1, &mut values) {
                return Ok(Err(DropReason::PeerAttributeGap));
            }
        }
    }
    values.extend(instr);
    Ok(Ok(RowValues {
        values,
        partition,
        spatial_alone,
    }))
}

/// Build the regressors of `spec` for every panel row. Rows lacking a
/// required treatment are dropped and recorded in the returned ledger.
pub fn build_design(ctx: &Context<'_>, panel: &Panel, spec: &Spec, opts: &TreatmentOptions) -> Result<Design> {
    if spec.mode() != panel.mode {
        return Err(Error::Treatment(format!(
            "{} needs a {:?} panel, got {:?}",
            spec.name(),
            spec.mode(),
            panel.mode
        )));
    }
    if opts.weighting == Weighting::Value && !ctx.net.is_weighted() {
        return Err(Error::Treatment("value weighting needs link values".into()));
    }
    let baseline = opts.baseline_year.unwrap_or(panel.window.0 - 1);
    let split = match spec {
        Spec::Het(Heterogeneity::H1(c) | Heterogeneity::H2(c) | Heterogeneity::H3(c)) => {
            Some(median_split(ctx.attrs, *c, baseline, &panel.firms())?)
        }
        _ => None,
    };
    let spatial = spec.spatial().then(|| {
        let mut m = HashMap::new();
        for &o in panel.mode.origins() {
            for t in panel.window.0..=panel.window.1 {
                m.insert((o, t - 1), SpatialIndex::new(ctx.attrs, ctx.history, o, t - 1));
            }
        }
        m
    });
    let lay = layout(spec);
    let needs_soe = !spec.lags().is_empty();

    // rows are sorted by firm; work per firm so second-order sets are built once
    let mut bounds = Vec::new();
    let mut start = 0;
    for k in 1..=panel.rows.len() {
        if k == panel.rows.len() || panel.rows[k].firm != panel.rows[start].firm {
            bounds.push((start, k));
            start = k;
        }
    }
    let results: Vec<Result<Vec<std::result::Result<RowValues, DropReason>>>> = bounds
        .par_iter()
        .map(|&(a, b)| {
            let i = panel.rows[a].firm;
            let soe = if needs_soe {
                [
                    ctx.net.second_order_exclusive(i, Side::Suppliers, opts.strict)?,
                    ctx.net.second_order_exclusive(i, Side::Customers, opts.strict)?,
                ]
            } else {
                [Vec::new(), Vec::new()]
            };
            panel.rows[a..b]
                .iter()
                .map(|r| row_values(ctx, spec, opts, split.as_ref(), spatial.as_ref(), &soe, r))
                .collect()
        })
        .collect();

    let width = lay.labels.len();
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(panel.rows.len()); width];
    let mut rows = Vec::with_capacity(panel.rows.len());
    let mut keys = Vec::with_capacity(panel.rows.len());
    let mut y = Vec::with_capacity(panel.rows.len());
    let mut ledger = DropLedger::new(panel.rows.len());
    let mut audit = PartitionAudit::default();
    let mut spatial_alone = 0;
    let mut it = panel.rows.iter();
    for chunk in results {
        for res in chunk? {
            let r = it.next().expect("one result per row");
            match res {
                Err(reason) => ledger.record(r.firm, r.origin, r.year, "treatment", reason),
                Ok(v) => {
                    debug_assert_eq!(v.values.len(), width);
                    if let Some(part) = v.partition {
                        audit.rows_checked += 1;
                        for (lo, hi, tot) in part {
                            if lo + hi != tot {
                                audit.count_mismatches += 1;
                            }
                        }
                    }
                    spatial_alone += usize::from(v.spatial_alone);
                    for (c, x) in cols.iter_mut().zip(v.values) {
                        c.push(x);
                    }
                    rows.push(*r);
                    keys.push(RowKey {
                        firm: r.firm,
                        origin: r.origin,
                        year: r.year,
                        zip: ctx.attrs.zip_code(r.firm, r.year),
                        industry: ctx.attrs.industry_code(r.firm, r.year),
                    });
                    y.push(f64::from(u8::from(r.y)));
                }
            }
        }
    }
    if ledger.dropped() > 0 {
        let summary: Vec<String> = ledger.counts().iter().map(|((_, r), n)| format!("{r}={n}")).collect();
        log::info!("{}: {} rows dropped ({})", spec.name(), ledger.dropped(), summary.join(", "));
    }
    if let Some(s) = &split {
        audit.low_firms = s.count(Group::Low);
        audit.high_firms = s.count(Group::High);
        audit.above_cutoff = s
            .sampled
            .iter()
            .filter(|f| {
                let v = s.values[f.index()];
                if s.characteristic == Characteristic::Wholesaler {
                    v == 1.0
                } else {
                    v > s.cutoff
                }
            })
            .count();
    }
    if matches!(spec, Spec::Het(Heterogeneity::H2(_) | Heterogeneity::H4(_))) {
        // category shares against the direct peer share, same denominator
        for (k, side) in [Side::Suppliers, Side::Customers].into_iter().enumerate() {
            for (r, row) in rows.iter().enumerate() {
                let direct = peer_share(ctx.net, ctx.history, row.firm, row.origin, row.year, side, opts.weighting)?.value;
                let gap = (cols[2 * k][r] + cols[2 * k + 1][r] - direct).abs();
                audit.max_share_gap = audit.max_share_gap.max(gap);
            }
        }
    }

    let mut labelled: Vec<Column> = lay
        .labels
        .into_iter()
        .zip(cols)
        .map(|(label, values)| Column { label, values })
        .collect();
    let instruments = labelled.split_off(width - lay.n_instr);
    let exog = labelled.split_off(lay.n_endog);
    Ok(Design {
        spec: *spec,
        rows,
        keys,
        y,
        exog,
        endog: labelled,
        instruments,
        ledger,
        split,
        audit,
        spatial_alone,
    })
}
