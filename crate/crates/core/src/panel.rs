//! Analysis panel: import histories, firm attributes, the potential-starter
//! sample and baseline median splits.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{DropLedger, DropReason};
use crate::network::{FirmId, IdMap, ProductionNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Origin {
    #[serde(rename = "EU")]
    Eu,
    #[serde(rename = "nonEU")]
    NonEu,
    /// Pooled: importing from any origin.
    #[serde(rename = "Any")]
    Any,
}

impl Origin {
    pub const SPLIT: [Origin; 2] = [Origin::Eu, Origin::NonEu];

    pub fn label(self) -> &'static str {
        match self {
            Origin::Eu => "EU",
            Origin::NonEu => "nonEU",
            Origin::Any => "Any",
        }
    }

    pub fn parse(s: &str) -> Option<Origin> {
        match s {
            "EU" | "eu" => Some(Origin::Eu),
            "nonEU" | "noneu" | "non-eu" => Some(Origin::NonEu),
            "Any" | "any" => Some(Origin::Any),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Separate EU and non-EU rows.
    #[default]
    PerOrigin,
    /// One row per firm-year, outcome = start from any origin.
    Pooled,
}

impl Mode {
    pub fn origins(self) -> &'static [Origin] {
        match self {
            Mode::PerOrigin => &Origin::SPLIT,
            Mode::Pooled => &[Origin::Any],
        }
    }
}

fn parse_err(file: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_owned(),
        line,
        message: message.into(),
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn header_positions(headers: &csv::StringRecord, file: &str, names: &[&str]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == *n)
                .ok_or_else(|| parse_err(file, 1, format!("missing column {n}")))
        })
        .collect()
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn next_record(
    r: std::result::Result<csv::StringRecord, csv::Error>,
    file: &str,
) -> Result<csv::StringRecord> {
    r.map_err(|e| {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        parse_err(file, line, e.to_string())
    })
}

// ---------------------------------------------------------------------------
// Import statuses

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImportStatus {
    pub firm: FirmId,
    pub year: i32,
    pub eu: bool,
    pub non_eu: bool,
}

/// Read `firm_id,year,eu_import,noneu_import`.
pub fn read_imports_csv<R: Read>(reader: R, file: &str, ids: &mut IdMap) -> Result<Vec<ImportStatus>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(file, 1, e.to_string()))?.clone();
    let pos = header_positions(&headers, file, &["firm_id", "year", "eu_import", "noneu_import"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = next_record(rec, file)?;
        let line = record_line(&rec);
        let f = |k: usize| rec.get(pos[k]).unwrap_or("");
        if f(0).is_empty() {
            return Err(parse_err(file, line, "empty firm id"));
        }
        let year: i32 = f(1).parse().map_err(|_| parse_err(file, line, format!("bad year {:?}", f(1))))?;
        let flag = |k: usize| match f(k) {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(parse_err(file, line, format!("import flag must be 0 or 1, got {other:?}"))),
        };
        out.push(ImportStatus {
            firm: ids.intern(f(0)),
            year,
            eu: flag(2)?,
            non_eu: flag(3)?,
        });
    }
    Ok(out)
}

/// Dense firm × year import statuses for both origins.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportHistory {
    first_year: i32,
    years: usize,
    n: usize,
    eu: Vec<bool>,
    non_eu: Vec<bool>,
}

impl ImportHistory {
    /// Every firm in `0..n` must have a status for every year of the
    /// contiguous range spanned by the records; a gap is an error.
    pub fn from_records(records: &[ImportStatus], n: usize) -> Result<Self> {
        let Some(first_year) = records.iter().map(|r| r.year).min() else {
            return Err(Error::Panel("no import status records".into()));
        };
        let last = records.iter().map(|r| r.year).max().unwrap_or(first_year);
        let years = (last - first_year + 1) as usize;
        let mut seen = vec![false; n * years];
        let mut eu = vec![false; n * years];
        let mut non_eu = vec![false; n * years];
        for r in records {
            if r.firm.index() >= n {
                return Err(Error::Panel(format!("firm index {} outside 0..{n}", r.firm)));
            }
            let k = r.firm.index() * years + (r.year - first_year) as usize;
            if seen[k] {
                return Err(Error::Panel(format!(
                    "duplicate import status for firm {} in {}",
                    r.firm, r.year
                )));
            }
            seen[k] = true;
            eu[k] = r.eu;
            non_eu[k] = r.non_eu;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Panel(format!(
                "missing import status for firm {} in {} ({} firm-years missing)",
                k / years,
                first_year + (k % years) as i32,
                seen.iter().filter(|s| !**s).count()
            )));
        }
        Ok(Self {
            first_year,
            years,
            n,
            eu,
            non_eu,
        })
    }

    /// Build directly from per-origin status matrices laid out firm-major.
    pub fn from_dense(first_year: i32, years: usize, n: usize, eu: Vec<bool>, non_eu: Vec<bool>) -> Self {
        assert_eq!(eu.len(), n * years);
        assert_eq!(non_eu.len(), n * years);
        Self {
            first_year,
            years,
            n,
            eu,
            non_eu,
        }
    }

    pub fn first_year(&self) -> i32 {
        self.first_year
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.years as i32 - 1
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn covers(&self, year: i32) -> bool {
        year >= self.first_year && year <= self.last_year()
    }

    /// Status of `firm` in `year`, `None` outside the observed range.
    #[inline]
    pub fn get(&self, firm: FirmId, origin: Origin, year: i32) -> Option<bool> {
        if !self.covers(year) {
            return None;
        }
        let k = firm.index() * self.years + (year - self.first_year) as usize;
        Some(match origin {
            Origin::Eu => self.eu[k],
            Origin::NonEu => self.non_eu[k],
            Origin::Any => self.eu[k] || self.non_eu[k],
        })
    }

    /// Status vector over all firms for one year (used by share kernels).
    pub fn year_slice(&self, origin: Origin, year: i32) -> Option<Vec<bool>> {
        if !self.covers(year) {
            return None;
        }
        Some((0..self.n).map(|i| self.get(FirmId(i as u32), origin, year).unwrap()).collect())
    }

    pub fn write_csv<W: Write>(&self, w: W, ids: &IdMap) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["firm_id", "year", "eu_import", "noneu_import"])
            .map_err(std::io::Error::from)?;
        for i in 0..self.n {
            for k in 0..self.years {
                let idx = i * self.years + k;
                out.write_record([
                    ids.name(FirmId(i as u32)),
                    &(self.first_year + k as i32).to_string(),
                    if self.eu[idx] { "1" } else { "0" },
                    if self.non_eu[idx] { "1" } else { "0" },
                ])
                .map_err(std::io::Error::from)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Attributes

#[derive(Debug, Clone, PartialEq)]
pub struct FirmYearAttributes {
    pub firm: FirmId,
    pub year: i32,
    pub workers: f64,
    pub labor_cost: f64,
    pub total_sales: f64,
    pub sales_to_firms: f64,
    pub interm_cost: f64,
    pub zip: String,
    pub industry: String,
}

/// Read `firm_id,year,workers,labor_cost,total_sales,sales_to_firms,interm_cost,zip,industry`.
pub fn read_attributes_csv<R: Read>(
    reader: R,
    file: &str,
    ids: &mut IdMap,
) -> Result<Vec<FirmYearAttributes>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(file, 1, e.to_string()))?.clone();
    let pos = header_positions(
        &headers,
        file,
        &[
            "firm_id",
            "year",
            "workers",
            "labor_cost",
            "total_sales",
            "sales_to_firms",
            "interm_cost",
            "zip",
            "industry",
        ],
    )?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = next_record(rec, file)?;
        let line = record_line(&rec);
        let f = |k: usize| rec.get(pos[k]).unwrap_or("");
        if f(0).is_empty() {
            return Err(parse_err(file, line, "empty firm id"));
        }
        let year: i32 = f(1).parse().map_err(|_| parse_err(file, line, format!("bad year {:?}", f(1))))?;
        let num = |k: usize, name: &str| -> Result<f64> {
            let v: f64 = f(k)
                .parse()
                .map_err(|_| parse_err(file, line, format!("bad {name} {:?}", f(k))))?;
            if !v.is_finite() || v < 0.0 {
                return Err(parse_err(file, line, format!("{name} must be non-negative, got {v}")));
            }
            Ok(v)
        };
        let (zip, industry) = (f(7), f(8));
        if zip.is_empty() || industry.is_empty() {
            return Err(parse_err(file, line, "zip and industry must be non-empty"));
        }
        out.push(FirmYearAttributes {
            firm: ids.intern(f(0)),
            year,
            workers: num(2, "workers")?,
            labor_cost: num(3, "labor_cost")?,
            total_sales: num(4, "total_sales")?,
            sales_to_firms: num(5, "sales_to_firms")?,
            interm_cost: num(6, "interm_cost")?,
            zip: zip.to_owned(),
            industry: industry.to_owned(),
        });
    }
    Ok(out)
}

/// Firm observables that enter as controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Control {
    Workers,
    LaborCost,
    TotalSales,
    SalesToFirms,
    IntermCost,
    Suppliers,
    Customers,
    LaborProductivity,
    AvgSalary,
    SalesPerCustomer,
    IntermProductivity,
    ZeroWorkers,
    ZeroCustomers,
    ZeroInterm,
}

impl Control {
    pub const ALL: [Control; 14] = [
        Control::Workers,
        Control::LaborCost,
        Control::TotalSales,
        Control::SalesToFirms,
        Control::IntermCost,
        Control::Suppliers,
        Control::Customers,
        Control::LaborProductivity,
        Control::AvgSalary,
        Control::SalesPerCustomer,
        Control::IntermProductivity,
        Control::ZeroWorkers,
        Control::ZeroCustomers,
        Control::ZeroInterm,
    ];

    /// Continuous controls; these also get peer averages.
    pub const CONTINUOUS: [Control; 11] = [
        Control::Workers,
        Control::LaborCost,
        Control::TotalSales,
        Control::SalesToFirms,
        Control::IntermCost,
        Control::Suppliers,
        Control::Customers,
        Control::LaborProductivity,
        Control::AvgSalary,
        Control::SalesPerCustomer,
        Control::IntermProductivity,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Control::Workers => "workers",
            Control::LaborCost => "labor_cost",
            Control::TotalSales => "total_sales",
            Control::SalesToFirms => "sales_to_firms",
            Control::IntermCost => "interm_cost",
            Control::Suppliers => "n_suppliers",
            Control::Customers => "n_customers",
            Control::LaborProductivity => "labor_prod",
            Control::AvgSalary => "avg_salary",
            Control::SalesPerCustomer => "sales_per_customer",
            Control::IntermProductivity => "interm_prod",
            Control::ZeroWorkers => "zero_workers",
            Control::ZeroCustomers => "zero_customers",
            Control::ZeroInterm => "zero_interm",
        }
    }
}

/// `num / den`, or 0 when the denominator is zero.
#[inline]
pub fn guarded_ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Columnar firm × year attributes with interned zip and industry codes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    first_year: i32,
    years: usize,
    n: usize,
    present: Vec<bool>,
    workers: Vec<f64>,
    labor_cost: Vec<f64>,
    total_sales: Vec<f64>,
    sales_to_firms: Vec<f64>,
    interm_cost: Vec<f64>,
    zip: Vec<u32>,
    industry: Vec<u32>,
    zips: Vec<String>,
    industries: Vec<String>,
    n_suppliers: Vec<f64>,
    n_customers: Vec<f64>,
}

impl AttributeTable {
    /// Lay records out densely over `0..n` firms and the given year range.
    /// Firm-years without a record are kept as gaps and reported by
    /// [`AttributeTable::has`]. Degrees are taken from `net`.
    pub fn from_records(
        records: &[FirmYearAttributes],
        n: usize,
        years: (i32, i32),
        net: &ProductionNetwork,
    ) -> Result<Self> {
        if years.1 < years.0 {
            return Err(Error::Panel(format!("empty year range {}..{}", years.0, years.1)));
        }
        if net.n() != n {
            return Err(Error::Panel(format!("network has {} firms, attributes cover {n}", net.n())));
        }
        let ny = (years.1 - years.0 + 1) as usize;
        let mut t = Self::empty(years.0, ny, n, net);
        let mut zip_codes: HashMap<String, u32> = HashMap::new();
        let mut ind_codes: HashMap<String, u32> = HashMap::new();
        for r in records {
            if r.year < years.0 || r.year > years.1 {
                continue;
            }
            if r.firm.index() >= n {
                return Err(Error::Panel(format!("firm index {} outside 0..{n}", r.firm)));
            }
            let k = r.firm.index() * ny + (r.year - years.0) as usize;
            if t.present[k] {
                return Err(Error::Panel(format!("duplicate attributes for firm {} in {}", r.firm, r.year)));
            }
            let z = *zip_codes.entry(r.zip.clone()).or_insert_with(|| {
                t.zips.push(r.zip.clone());
                (t.zips.len() - 1) as u32
            });
            let s = *ind_codes.entry(r.industry.clone()).or_insert_with(|| {
                t.industries.push(r.industry.clone());
                (t.industries.len() - 1) as u32
            });
            t.present[k] = true;
            t.workers[k] = r.workers;
            t.labor_cost[k] = r.labor_cost;
            t.total_sales[k] = r.total_sales;
            t.sales_to_firms[k] = r.sales_to_firms;
            t.interm_cost[k] = r.interm_cost;
            t.zip[k] = z;
            t.industry[k] = s;
        }
        Ok(t)
    }

    fn empty(first_year: i32, years: usize, n: usize, net: &ProductionNetwork) -> Self {
        let cells = n * years;
        Self {
            first_year,
            years,
            n,
            present: vec![false; cells],
            workers: vec![0.0; cells],
            labor_cost: vec![0.0; cells],
            total_sales: vec![0.0; cells],
            sales_to_firms: vec![0.0; cells],
            interm_cost: vec![0.0; cells],
            zip: vec![0; cells],
            industry: vec![0; cells],
            zips: Vec::new(),
            industries: Vec::new(),
            n_suppliers: (0..n).map(|i| net.in_degree(FirmId(i as u32)) as f64).collect(),
            n_customers: (0..n).map(|i| net.out_degree(FirmId(i as u32)) as f64).collect(),
        }
    }

    pub fn first_year(&self) -> i32 {
        self.first_year
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.years as i32 - 1
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn cell(&self, firm: FirmId, year: i32) -> Option<usize> {
        if year < self.first_year || year > self.last_year() || firm.index() >= self.n {
            return None;
        }
        let k = firm.index() * self.years + (year - self.first_year) as usize;
        self.present[k].then_some(k)
    }

    pub fn has(&self, firm: FirmId, year: i32) -> bool {
        self.cell(firm, year).is_some()
    }

    pub fn get(&self, firm: FirmId, year: i32) -> Option<FirmYearAttributes> {
        let k = self.cell(firm, year)?;
        Some(FirmYearAttributes {
            firm,
            year,
            workers: self.workers[k],
            labor_cost: self.labor_cost[k],
            total_sales: self.total_sales[k],
            sales_to_firms: self.sales_to_firms[k],
            interm_cost: self.interm_cost[k],
            zip: self.zips[self.zip[k] as usize].clone(),
            industry: self.industries[self.industry[k] as usize].clone(),
        })
    }

    /// Interned zip code of the firm-year.
    #[inline]
    pub fn zip_code(&self, firm: FirmId, year: i32) -> Option<u32> {
        self.cell(firm, year).map(|k| self.zip[k])
    }

    #[inline]
    pub fn industry_code(&self, firm: FirmId, year: i32) -> Option<u32> {
        self.cell(firm, year).map(|k| self.industry[k])
    }

    pub fn zip_label(&self, code: u32) -> &str {
        &self.zips[code as usize]
    }

    pub fn industry_label(&self, code: u32) -> &str {
        &self.industries[code as usize]
    }

    pub fn zip_count(&self) -> usize {
        self.zips.len()
    }

    pub fn industry_count(&self) -> usize {
        self.industries.len()
    }

    /// NACE 45, 46 or 47 (first two characters of the sector code).
    pub fn is_wholesaler(&self, firm: FirmId, year: i32) -> Option<bool> {
        self.industry_code(firm, year).map(|c| is_wholesale_sector(self.industry_label(c)))
    }

    /// Value of one derived control; `None` on an attribute gap.
    #[inline]
    pub fn control(&self, firm: FirmId, year: i32, c: Control) -> Option<f64> {
        let k = self.cell(firm, year)?;
        let i = firm.index();
        let w = self.workers[k];
        let cust = self.n_customers[i];
        Some(match c {
            Control::Workers => w,
            Control::LaborCost => self.labor_cost[k],
            Control::TotalSales => self.total_sales[k],
            Control::SalesToFirms => self.sales_to_firms[k],
            Control::IntermCost => self.interm_cost[k],
            Control::Suppliers => self.n_suppliers[i],
            Control::Customers => cust,
            Control::LaborProductivity => guarded_ratio(self.total_sales[k], w),
            Control::AvgSalary => guarded_ratio(self.labor_cost[k], w),
            Control::SalesPerCustomer => guarded_ratio(self.sales_to_firms[k], cust),
            Control::IntermProductivity => guarded_ratio(self.total_sales[k], self.interm_cost[k]),
            Control::ZeroWorkers => f64::from(u8::from(w == 0.0)),
            Control::ZeroCustomers => f64::from(u8::from(cust == 0.0)),
            Control::ZeroInterm => f64::from(u8::from(self.interm_cost[k] == 0.0)),
        })
    }

    pub fn write_csv<W: Write>(&self, w: W, ids: &IdMap) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "firm_id",
            "year",
            "workers",
            "labor_cost",
            "total_sales",
            "sales_to_firms",
            "interm_cost",
            "zip",
            "industry",
        ])
        .map_err(std::io::Error::from)?;
        for i in 0..self.n {
            for k in 0..self.years {
                let idx = i * self.years + k;
                if !self.present[idx] {
                    continue;
                }
                out.write_record([
                    ids.name(FirmId(i as u32)),
                    &(self.first_year + k as i32).to_string(),
                    &self.workers[idx].to_string(),
                    &self.labor_cost[idx].to_string(),
                    &self.total_sales[idx].to_string(),
                    &self.sales_to_firms[idx].to_string(),
                    &self.interm_cost[idx].to_string(),
                    &self.zips[self.zip[idx] as usize],
                    &self.industries[self.industry[idx] as usize],
                ])
                .map_err(std::io::Error::from)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub fn is_wholesale_sector(code: &str) -> bool {
    matches!(code.get(..2), Some("45" | "46" | "47"))
}

// ---------------------------------------------------------------------------
// Starter sample and rows

/// One `(firm, year)` cell of the potential-starter sample with its outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Starter {
    pub firm: FirmId,
    pub year: i32,
    pub y: bool,
}

/// Firm-years in `window` at which `firm` has not imported from `origin` in
/// any observed year before. The outcome is the status in that year, so a
/// firm's rows end with the year it starts.
pub fn potential_starters(history: &ImportHistory, origin: Origin, window: (i32, i32)) -> Result<Vec<Starter>> {
    check_window(history, window)?;
    let mut out = Vec::new();
    for i in 0..history.n() {
        let firm = FirmId(i as u32);
        let prior = (history.first_year()..window.0).any(|s| history.get(firm, origin, s) == Some(true));
        if prior {
            continue;
        }
        for t in window.0..=window.1 {
            let y = history.get(firm, origin, t).unwrap();
            out.push(Starter { firm, year: t, y });
            if y {
                break;
            }
        }
    }
    Ok(out)
}

fn check_window(history: &ImportHistory, window: (i32, i32)) -> Result<()> {
    if window.1 < window.0 {
        return Err(Error::Panel(format!("empty window {}..{}", window.0, window.1)));
    }
    if window.0 <= history.first_year() || window.1 > history.last_year() {
        return Err(Error::Panel(format!(
            "window {}..{} needs statuses from {} to {}, history covers {}..{}",
            window.0,
            window.1,
            window.0 - 1,
            window.1,
            history.first_year(),
            history.last_year()
        )));
    }
    Ok(())
}

/// One `(firm, origin, year)` observation of the analysis panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ObservationRow {
    pub firm: FirmId,
    pub origin: Origin,
    pub year: i32,
    pub y: bool,
}

#[derive(Debug, Clone)]
pub struct Panel {
    pub mode: Mode,
    pub window: (i32, i32),
    /// Canonical order: firm, origin, year.
    pub rows: Vec<ObservationRow>,
    pub ledger: DropLedger,
}

/// Assemble panel rows for every origin of `mode`, dropping rows whose
/// firm-year attributes are missing (each drop goes to the ledger).
pub fn build_rows(
    history: &ImportHistory,
    attrs: &AttributeTable,
    mode: Mode,
    window: (i32, i32),
) -> Result<Panel> {
    let mut starters: Vec<ObservationRow> = Vec::new();
    for &origin in mode.origins() {
        starters.extend(
            potential_starters(history, origin, window)?
                .into_iter()
                .map(|s| ObservationRow {
                    firm: s.firm,
                    origin,
                    year: s.year,
                    y: s.y,
                }),
        );
    }
    starters.sort_unstable();
    let mut ledger = DropLedger::new(starters.len());
    let mut rows = Vec::with_capacity(starters.len());
    for r in starters {
        if attrs.has(r.firm, r.year) {
            rows.push(r);
        } else {
            ledger.record(r.firm, r.origin, r.year, "panel", DropReason::AttributeGap);
        }
    }
    if ledger.dropped() > 0 {
        log::warn!("{} panel rows dropped for missing firm attributes", ledger.dropped());
    }
    Ok(Panel {
        mode,
        window,
        rows,
        ledger,
    })
}

impl Panel {
    /// Audit CSV: `firm_id,origin,year,y,zip,industry`.
    pub fn write_csv<W: Write>(&self, w: W, ids: &IdMap, attrs: &AttributeTable) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["firm_id", "origin", "year", "y", "zip", "industry"])
            .map_err(std::io::Error::from)?;
        for r in &self.rows {
            let zip = attrs.zip_code(r.firm, r.year).map(|c| attrs.zip_label(c)).unwrap_or("");
            let ind = attrs
                .industry_code(r.firm, r.year)
                .map(|c| attrs.industry_label(c))
                .unwrap_or("");
            out.write_record([
                ids.name(r.firm),
                r.origin.label(),
                &r.year.to_string(),
                if r.y { "1" } else { "0" },
                zip,
                ind,
            ])
            .map_err(std::io::Error::from)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Distinct firms in the panel, sorted.
    pub fn firms(&self) -> Vec<FirmId> {
        let mut f: Vec<FirmId> = self.rows.iter().map(|r| r.firm).collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

// ---------------------------------------------------------------------------
// Median splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Characteristic {
    Workers,
    Suppliers,
    Customers,
    LaborProductivity,
    IntermProductivity,
    Wholesaler,
}

impl Characteristic {
    pub const ALL: [Characteristic; 6] = [
        Characteristic::Workers,
        Characteristic::Suppliers,
        Characteristic::Customers,
        Characteristic::LaborProductivity,
        Characteristic::IntermProductivity,
        Characteristic::Wholesaler,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Characteristic::Workers => "workers",
            Characteristic::Suppliers => "suppliers",
            Characteristic::Customers => "customers",
            Characteristic::LaborProductivity => "labor-productivity",
            Characteristic::IntermProductivity => "interm-productivity",
            Characteristic::Wholesaler => "wholesaler",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == s)
    }

    pub fn control(self) -> Option<Control> {
        match self {
            Characteristic::Workers => Some(Control::Workers),
            Characteristic::Suppliers => Some(Control::Suppliers),
            Characteristic::Customers => Some(Control::Customers),
            Characteristic::LaborProductivity => Some(Control::LaborProductivity),
            Characteristic::IntermProductivity => Some(Control::IntermProductivity),
            Characteristic::Wholesaler => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Low,
    High,
}

/// Baseline split of firms into Low (value at or below the median) and High.
#[derive(Debug, Clone, PartialEq)]
pub struct MedianSplit {
    pub characteristic: Characteristic,
    pub baseline_year: i32,
    /// NaN for the wholesaler flag, which needs no cutoff.
    pub cutoff: f64,
    /// Group of every firm in the attribute table, indexed by firm.
    pub assignment: Vec<Group>,
    /// Baseline values (NaN when missing), indexed by firm.
    pub values: Vec<f64>,
    /// Firms the median was taken over.
    pub sampled: Vec<FirmId>,
    /// Firms without a baseline value; assigned Low.
    pub flagged: Vec<FirmId>,
}

impl MedianSplit {
    #[inline]
    pub fn group(&self, firm: FirmId) -> Group {
        self.assignment[firm.index()]
    }

    pub fn count(&self, g: Group) -> usize {
        self.sampled.iter().filter(|f| self.group(**f) == g).count()
    }
}

/// Median of a non-empty slice (average of the two middle values when even).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Split firms by their `baseline_year` value of `ch`. The cutoff is the
/// median over `sampled`; every firm in the table is then assigned by the
/// same rule so that peers outside the sample get a group too.
pub fn median_split(
    attrs: &AttributeTable,
    ch: Characteristic,
    baseline_year: i32,
    sampled: &[FirmId],
) -> Result<MedianSplit> {
    let n = attrs.n();
    let values: Vec<f64> = (0..n)
        .map(|i| {
            let f = FirmId(i as u32);
            match ch.control() {
                Some(c) => attrs.control(f, baseline_year, c),
                None => attrs.is_wholesaler(f, baseline_year).map(|w| f64::from(u8::from(w))),
            }
            .unwrap_or(f64::NAN)
        })
        .collect();
    let flagged: Vec<FirmId> = sampled.iter().copied().filter(|f| values[f.index()].is_nan()).collect();
    if !flagged.is_empty() {
        log::warn!(
            "{} sampled firms lack a {} value in {baseline_year}; assigned Low",
            flagged.len(),
            ch.label()
        );
    }
    let cutoff = if ch == Characteristic::Wholesaler {
        f64::NAN
    } else {
        let observed: Vec<f64> = sampled
            .iter()
            .map(|f| values[f.index()])
            .filter(|v| !v.is_nan())
            .collect();
        if observed.is_empty() {
            return Err(Error::Panel(format!(
                "no sampled firm has a {} value in {baseline_year}",
                ch.label()
            )));
        }
        let m = median(&observed);
        if observed.iter().all(|v| *v == observed[0]) {
            log::warn!("all {} values equal {m}; every firm falls in Low", ch.label());
        }
        m
    };
    let assignment = values
        .iter()
        .map(|&v| {
            let high = if ch == Characteristic::Wholesaler { v == 1.0 } else { v > cutoff };
            if high {
                Group::High
            } else {
                Group::Low
            }
        })
        .collect();
    Ok(MedianSplit {
        characteristic: ch,
        baseline_year,
        cutoff,
        assignment,
        values,
        sampled: sampled.to_vec(),
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_net(n: usize) -> ProductionNetwork {
        ProductionNetwork::from_edges(n, (1..n).map(|i| (FirmId(i as u32 - 1), FirmId(i as u32), None))).unwrap()
    }

    fn history(rows: &[(u32, i32, bool, bool)], n: usize) -> ImportHistory {
        let recs: Vec<ImportStatus> = rows
            .iter()
            .map(|&(f, year, eu, non_eu)| ImportStatus {
                firm: FirmId(f),
                year,
                eu,
                non_eu,
            })
            .collect();
        ImportHistory::from_records(&recs, n).unwrap()
    }

    fn full(n: u32, years: std::ops::RangeInclusive<i32>, eu_start: &[(u32, i32)]) -> ImportHistory {
        let mut rows = Vec::new();
        for f in 0..n {
            for y in years.clone() {
                let eu = eu_start.iter().any(|&(g, s)| g == f && y >= s);
                rows.push((f, y, eu, false));
            }
        }
        history(&rows, n as usize)
    }

    fn attrs_for(n: usize, years: (i32, i32), net: &ProductionNetwork) -> AttributeTable {
        let mut recs = Vec::new();
        for i in 0..n {
            for y in years.0..=years.1 {
                recs.push(FirmYearAttributes {
                    firm: FirmId(i as u32),
                    year: y,
                    workers: (i + 1) as f64,
                    labor_cost: 10.0,
                    total_sales: 100.0,
                    sales_to_firms: 50.0,
                    interm_cost: 20.0,
                    zip: "28001".into(),
                    industry: "4690".into(),
                });
            }
        }
        AttributeTable::from_records(&recs, n, years, net).unwrap()
    }

    #[test]
    fn starter_rows_end_at_start_year() {
        let h = full(1, 2010..=2014, &[(0, 2013)]);
        let s = potential_starters(&h, Origin::Eu, (2011, 2014)).unwrap();
        let got: Vec<(i32, bool)> = s.iter().map(|r| (r.year, r.y)).collect();
        assert_eq!(got, vec![(2011, false), (2012, false), (2013, true)]);
    }

    #[test]
    fn baseline_importer_never_sampled() {
        let h = full(2, 2010..=2014, &[(0, 2010)]);
        let s = potential_starters(&h, Origin::Eu, (2011, 2014)).unwrap();
        assert!(s.iter().all(|r| r.firm == FirmId(1)));
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|r| !r.y));
    }

    #[test]
    fn no_readmission_after_exit() {
        // imports in 2011, stops in 2012: never a potential starter again
        let h = history(
            &[(0, 2010, false, false), (0, 2011, true, false), (0, 2012, false, false), (0, 2013, false, false)],
            1,
        );
        let s = potential_starters(&h, Origin::Eu, (2011, 2013)).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s[0].y);
    }

    #[test]
    fn missing_status_is_an_error() {
        let recs = [
            ImportStatus {
                firm: FirmId(0),
                year: 2010,
                eu: false,
                non_eu: false,
            },
            ImportStatus {
                firm: FirmId(1),
                year: 2011,
                eu: false,
                non_eu: false,
            },
        ];
        assert!(matches!(ImportHistory::from_records(&recs, 2), Err(Error::Panel(_))));
    }

    #[test]
    fn both_origins_give_two_rows() {
        let net = line_net(2);
        let h = full(2, 2010..=2012, &[]);
        let a = attrs_for(2, (2010, 2012), &net);
        let p = build_rows(&h, &a, Mode::PerOrigin, (2011, 2012)).unwrap();
        let in_2012: Vec<_> = p.rows.iter().filter(|r| r.firm == FirmId(0) && r.year == 2012).collect();
        assert_eq!(in_2012.len(), 2);
        assert_ne!(in_2012[0].origin, in_2012[1].origin);
        assert_eq!(p.rows.len(), 8);
    }

    #[test]
    fn pooled_uses_any_origin() {
        let net = line_net(1);
        // non-EU start in 2012, EU start in 2013
        let h = history(
            &[
                (0, 2010, false, false),
                (0, 2011, false, false),
                (0, 2012, false, true),
                (0, 2013, true, true),
                (0, 2014, true, true),
            ],
            1,
        );
        let a = attrs_for(1, (2010, 2014), &net);
        let p = build_rows(&h, &a, Mode::Pooled, (2011, 2014)).unwrap();
        let got: Vec<(i32, bool)> = p.rows.iter().map(|r| (r.year, r.y)).collect();
        assert_eq!(got, vec![(2011, false), (2012, true)]);
        assert!(p.rows.iter().all(|r| r.origin == Origin::Any));
    }

    #[test]
    fn pooled_eu_start() {
        let net = line_net(1);
        let h = full(1, 2010..=2014, &[(0, 2013)]);
        let a = attrs_for(1, (2010, 2014), &net);
        let p = build_rows(&h, &a, Mode::Pooled, (2011, 2014)).unwrap();
        assert_eq!(p.rows.last().map(|r| (r.year, r.y)), Some((2013, true)));
    }

    #[test]
    fn attribute_gap_goes_to_ledger() {
        let net = line_net(2);
        let h = full(2, 2010..=2012, &[]);
        let recs = vec![FirmYearAttributes {
            firm: FirmId(0),
            year: 2011,
            workers: 1.0,
            labor_cost: 1.0,
            total_sales: 1.0,
            sales_to_firms: 1.0,
            interm_cost: 1.0,
            zip: "1".into(),
            industry: "10".into(),
        }];
        let a = AttributeTable::from_records(&recs, 2, (2010, 2012), &net).unwrap();
        let p = build_rows(&h, &a, Mode::PerOrigin, (2011, 2012)).unwrap();
        assert_eq!(p.rows.len(), 2);
        assert_eq!(p.ledger.count(DropReason::AttributeGap), 6);
        assert!(p.ledger.reconciles(p.rows.len()));
    }

    #[test]
    fn labor_productivity_ratio() {
        let net = line_net(1);
        let recs = vec![FirmYearAttributes {
            firm: FirmId(0),
            year: 2011,
            workers: 10.0,
            labor_cost: 250.0,
            total_sales: 1000.0,
            sales_to_firms: 0.0,
            interm_cost: 0.0,
            zip: "1".into(),
            industry: "10".into(),
        }];
        let a = AttributeTable::from_records(&recs, 1, (2011, 2011), &net).unwrap();
        assert_eq!(a.control(FirmId(0), 2011, Control::LaborProductivity), Some(100.0));
        assert_eq!(a.control(FirmId(0), 2011, Control::AvgSalary), Some(25.0));
        // no customers and no intermediates: ratios zeroed and flagged
        assert_eq!(a.control(FirmId(0), 2011, Control::SalesPerCustomer), Some(0.0));
        assert_eq!(a.control(FirmId(0), 2011, Control::ZeroCustomers), Some(1.0));
        assert_eq!(a.control(FirmId(0), 2011, Control::IntermProductivity), Some(0.0));
        assert_eq!(a.control(FirmId(0), 2011, Control::ZeroInterm), Some(1.0));
        assert_eq!(a.control(FirmId(0), 2011, Control::ZeroWorkers), Some(0.0));
    }

    fn split_of(values: &[f64]) -> MedianSplit {
        let n = values.len();
        let net = line_net(n);
        let recs: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(i, &w)| FirmYearAttributes {
                firm: FirmId(i as u32),
                year: 2010,
                workers: w,
                labor_cost: 0.0,
                total_sales: 0.0,
                sales_to_firms: 0.0,
                interm_cost: 0.0,
                zip: "1".into(),
                industry: if i == 0 { "4690".into() } else { "2511".into() },
            })
            .collect();
        let a = AttributeTable::from_records(&recs, n, (2010, 2010), &net).unwrap();
        let sampled: Vec<FirmId> = (0..n as u32).map(FirmId).collect();
        median_split(&a, Characteristic::Workers, 2010, &sampled).unwrap()
    }

    #[test]
    fn median_even_count() {
        let s = split_of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.cutoff, 2.5);
        assert_eq!(s.assignment, vec![Group::Low, Group::Low, Group::High, Group::High]);
    }

    #[test]
    fn median_ties_go_low() {
        let s = split_of(&[5.0, 5.0, 5.0, 9.0]);
        assert_eq!(s.cutoff, 5.0);
        assert_eq!(s.count(Group::Low), 3);
        assert_eq!(s.count(Group::High), 1);
    }

    #[test]
    fn all_equal_is_all_low() {
        let s = split_of(&[3.0, 3.0, 3.0]);
        assert_eq!(s.count(Group::High), 0);
    }

    #[test]
    fn wholesaler_uses_sector_code() {
        let net = line_net(3);
        let recs: Vec<_> = ["4690", "2511", "45"]
            .iter()
            .enumerate()
            .map(|(i, s)| FirmYearAttributes {
                firm: FirmId(i as u32),
                year: 2010,
                workers: 1.0,
                labor_cost: 0.0,
                total_sales: 0.0,
                sales_to_firms: 0.0,
                interm_cost: 0.0,
                zip: "1".into(),
                industry: (*s).into(),
            })
            .collect();
        let a = AttributeTable::from_records(&recs, 3, (2010, 2010), &net).unwrap();
        let sampled: Vec<FirmId> = (0..3).map(FirmId).collect();
        let s = median_split(&a, Characteristic::Wholesaler, 2010, &sampled).unwrap();
        assert_eq!(s.assignment, vec![Group::High, Group::Low, Group::High]);
        assert!(is_wholesale_sector("46"));
        assert!(!is_wholesale_sector("4"));
    }

    #[test]
    fn csv_round_trip() {
        let mut ids = IdMap::new();
        let text = "firm_id,year,eu_import,noneu_import\nA,2010,0,1\nA,2011,1,1\n";
        let recs = read_imports_csv(text.as_bytes(), "imports.csv", &mut ids).unwrap();
        let h = ImportHistory::from_records(&recs, ids.len()).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf, &ids).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
        let bad = "firm_id,year,eu_import,noneu_import\nA,2010,2,0\n";
        match read_imports_csv(bad.as_bytes(), "imports.csv", &mut ids) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
