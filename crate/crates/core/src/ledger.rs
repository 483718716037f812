//! Row-level record of every observation removed between panel assembly
//! and estimation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{FirmId, IdMap};
use crate::panel::Origin;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DropReason {
    /// Firm-year attributes missing for the row's year.
    AttributeGap,
    /// Firm has no suppliers, so the downstream share is undefined.
    NoSuppliers,
    /// Firm has no customers, so the upstream share is undefined.
    NoCustomers,
    /// Peer characteristics missing for the contextual averages.
    PeerAttributeGap,
    /// Instrument lag falls before the first observed year.
    LagUnavailable,
    /// No exclusive second-order suppliers.
    NoSecondOrderSuppliers,
    /// No exclusive second-order customers.
    NoSecondOrderCustomers,
    /// Alone in a fixed-effect group.
    Singleton,
}

impl DropReason {
    pub fn code(self) -> &'static str {
        match self {
            DropReason::AttributeGap => "ATTRIBUTE_GAP",
            DropReason::NoSuppliers => "NO_SUPPLIERS",
            DropReason::NoCustomers => "NO_CUSTOMERS",
            DropReason::PeerAttributeGap => "PEER_ATTRIBUTE_GAP",
            DropReason::LagUnavailable => "LAG_UNAVAILABLE",
            DropReason::NoSecondOrderSuppliers => "NO_SECOND_ORDER_SUPPLIERS",
            DropReason::NoSecondOrderCustomers => "NO_SECOND_ORDER_CUSTOMERS",
            DropReason::Singleton => "SINGLETON",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DroppedRow {
    pub firm: FirmId,
    pub origin: Origin,
    pub year: i32,
    pub stage: &'static str,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DropLedger {
    /// Rows entering the first recorded stage.
    pub input: usize,
    pub rows: Vec<DroppedRow>,
}

impl DropLedger {
    pub fn new(input: usize) -> Self {
        Self {
            input,
            rows: Vec::new(),
        }
    }

    pub fn record(&mut self, firm: FirmId, origin: Origin, year: i32, stage: &'static str, reason: DropReason) {
        self.rows.push(DroppedRow {
            firm,
            origin,
            year,
            stage,
            reason,
        });
    }

    pub fn dropped(&self) -> usize {
        self.rows.len()
    }

    pub fn remaining(&self) -> usize {
        self.input - self.rows.len()
    }

    /// True when input minus all recorded drops equals `final_n`.
    pub fn reconciles(&self, final_n: usize) -> bool {
        self.input >= self.rows.len() && self.remaining() == final_n
    }

    pub fn counts(&self) -> BTreeMap<(&'static str, DropReason), usize> {
        let mut m = BTreeMap::new();
        for r in &self.rows {
            *m.entry((r.stage, r.reason)).or_insert(0) += 1;
        }
        m
    }

    pub fn count(&self, reason: DropReason) -> usize {
        self.rows.iter().filter(|r| r.reason == reason).count()
    }

    /// Append another ledger whose input is this ledger's remainder.
    pub fn extend(&mut self, next: DropLedger) {
        debug_assert_eq!(next.input, self.remaining());
        self.rows.extend(next.rows);
    }

    /// One line per dropped row: `firm_id,origin,year,stage,reason`.
    pub fn write_csv<W: Write>(&self, w: W, ids: &IdMap) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["firm_id", "origin", "year", "stage", "reason"])
            .map_err(std::io::Error::from)?;
        for r in &self.rows {
            out.write_record([
                ids.name(r.firm),
                r.origin.label(),
                &r.year.to_string(),
                r.stage,
                r.reason.code(),
            ])
            .map_err(std::io::Error::from)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Summary lines `stage,reason,count` with input and final totals.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["stage", "reason", "count"]).map_err(std::io::Error::from)?;
        out.write_record(["input", "", &self.input.to_string()])
            .map_err(std::io::Error::from)?;
        for ((stage, reason), n) in self.counts() {
            out.write_record([stage, reason.code(), &n.to_string()])
                .map_err(std::io::Error::from)?;
        }
        out.write_record(["final", "", &self.remaining().to_string()])
            .map_err(std::io::Error::from)?;
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconcile_counts() {
        let mut l = DropLedger::new(10);
        l.record(FirmId(1), Origin::Eu, 2012, "panel", DropReason::AttributeGap);
        l.record(FirmId(2), Origin::Eu, 2012, "hdfe", DropReason::Singleton);
        assert!(l.reconciles(8));
        assert!(!l.reconciles(9));
        assert_eq!(l.count(DropReason::Singleton), 1);
        let mut next = DropLedger::new(8);
        next.record(FirmId(3), Origin::NonEu, 2013, "design", DropReason::NoCustomers);
        l.extend(next);
        assert_eq!(l.remaining(), 7);
    }
}
