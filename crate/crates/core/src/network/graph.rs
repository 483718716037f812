use serde::{Deserialize, Serialize};

use super::ids::FirmId;
use crate::error::{Error, Result};

/// Which first-order peers of a firm are meant.
///
/// `Suppliers` is the downstream channel (information flows from suppliers
/// to the firm, label `D`); `Customers` is the upstream channel (label `U`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Suppliers,
    Customers,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Suppliers, Side::Customers];

    pub fn label(self) -> &'static str {
        match self {
            Side::Suppliers => "D",
            Side::Customers => "U",
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Suppliers => Side::Customers,
            Side::Customers => Side::Suppliers,
        }
    }
}

/// Static directed supplier -> customer graph in compressed sparse row form,
/// indexed both forward (customers) and backward (suppliers).
#[derive(Debug, Clone, PartialEq)]
pub struct ProductionNetwork {
    n: usize,
    cust_off: Vec<usize>,
    cust: Vec<FirmId>,
    cust_w: Option<Vec<f64>>,
    supp_off: Vec<usize>,
    supp: Vec<FirmId>,
    supp_w: Option<Vec<f64>>,
}

fn csr(
    n: usize,
    edges: &[(u32, u32, Option<f64>)],
    keep_weights: bool,
) -> (Vec<usize>, Vec<FirmId>, Option<Vec<f64>>) {
    // `edges` must be sorted by (row, col).
    let mut off = vec![0usize; n + 1];
    for &(r, _, _) in edges {
        off[r as usize + 1] += 1;
    }
    for i in 0..n {
        off[i + 1] += off[i];
    }
    let targets = edges.iter().map(|&(_, c, _)| FirmId(c)).collect();
    let weights = keep_weights.then(|| edges.iter().map(|e| e.2.unwrap_or(0.0)).collect());
    (off, targets, weights)
}

impl ProductionNetwork {
    /// Build from `(supplier, customer, weight)` triples. Duplicate links are
    /// collapsed (first weight wins); weights are kept only when every link
    /// carries one.
    pub fn from_edges<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (FirmId, FirmId, Option<f64>)>,
    {
        let mut fwd: Vec<(u32, u32, Option<f64>)> = Vec::new();
        for (s, c, w) in edges {
            if s.index() >= n || c.index() >= n {
                return Err(Error::Network(format!(
                    "edge {s}->{c} references a firm outside 0..{n}"
                )));
            }
            if s == c {
                return Err(Error::Network(format!("self-loop on firm {s}")));
            }
            if let Some(v) = w {
                if !(v >= 0.0) {
                    return Err(Error::Network(format!("edge {s}->{c} has invalid value {v}")));
                }
            }
            fwd.push((s.0, c.0, w));
        }
        fwd.sort_by_key(|e| (e.0, e.1));
        fwd.dedup_by_key(|e| (e.0, e.1));
        let weighted = !fwd.is_empty() && fwd.iter().all(|e| e.2.is_some());

        let mut rev: Vec<(u32, u32, Option<f64>)> = fwd.iter().map(|&(s, c, w)| (c, s, w)).collect();
        rev.sort_by_key(|e| (e.0, e.1));

        let (cust_off, cust, cust_w) = csr(n, &fwd, weighted);
        let (supp_off, supp, supp_w) = csr(n, &rev, weighted);
        Ok(Self {
            n,
            cust_off,
            cust,
            cust_w,
            supp_off,
            supp,
            supp_w,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.cust.len()
    }

    pub fn is_weighted(&self) -> bool {
        self.cust_w.is_some()
    }

    /// Customers of `i` (N_i^+), sorted. Panics if `i` is out of range.
    #[inline]
    pub fn customers(&self, i: FirmId) -> &[FirmId] {
        let i = i.index();
        &self.cust[self.cust_off[i]..self.cust_off[i + 1]]
    }

    /// Suppliers of `i` (N_i^-), sorted. Panics if `i` is out of range.
    #[inline]
    pub fn suppliers(&self, i: FirmId) -> &[FirmId] {
        let i = i.index();
        &self.supp[self.supp_off[i]..self.supp_off[i + 1]]
    }

    #[inline]
    pub fn side(&self, i: FirmId, side: Side) -> &[FirmId] {
        match side {
            Side::Suppliers => self.suppliers(i),
            Side::Customers => self.customers(i),
        }
    }

    /// Link values aligned with [`Self::side`], when the network is weighted.
    pub fn side_weights(&self, i: FirmId, side: Side) -> Option<&[f64]> {
        let k = i.index();
        match side {
            Side::Suppliers => self
                .supp_w
                .as_ref()
                .map(|w| &w[self.supp_off[k]..self.supp_off[k + 1]]),
            Side::Customers => self
                .cust_w
                .as_ref()
                .map(|w| &w[self.cust_off[k]..self.cust_off[k + 1]]),
        }
    }

    pub fn neighbors(&self, i: FirmId, side: Side) -> Result<&[FirmId]> {
        self.check(i)?;
        Ok(self.side(i, side))
    }

    pub fn in_degree(&self, i: FirmId) -> usize {
        self.suppliers(i).len()
    }

    pub fn out_degree(&self, i: FirmId) -> usize {
        self.customers(i).len()
    }

    pub fn has_edge(&self, supplier: FirmId, customer: FirmId) -> bool {
        supplier.index() < self.n && self.customers(supplier).binary_search(&customer).is_ok()
    }

    /// All links as `(supplier, customer, weight)` in supplier-major order.
    pub fn edges(&self) -> impl Iterator<Item = (FirmId, FirmId, Option<f64>)> + '_ {
        (0..self.n).flat_map(move |s| {
            let lo = self.cust_off[s];
            (lo..self.cust_off[s + 1])
                .map(move |e| (FirmId(s as u32), self.cust[e], self.cust_w.as_ref().map(|w| w[e])))
        })
    }

    fn check(&self, i: FirmId) -> Result<()> {
        if i.index() >= self.n {
            return Err(Error::Network(format!(
                "firm id {i} out of range (n = {})",
                self.n
            )));
        }
        Ok(())
    }

    /// Second-order peers on `side` that are not first-order peers.
    ///
    /// For `Customers`: customers of customers of `i`, minus `i`, its
    /// suppliers and its customers. With `strict`, suppliers of customers,
    /// customers of suppliers and suppliers of suppliers are removed as well.
    /// `Suppliers` mirrors this.
    pub fn second_order_exclusive(&self, i: FirmId, side: Side, strict: bool) -> Result<Vec<FirmId>> {
        self.check(i)?;
        let mut cand: Vec<FirmId> = self
            .side(i, side)
            .iter()
            .flat_map(|&k| self.side(k, side).iter().copied())
            .collect();
        cand.sort_unstable();
        cand.dedup();
        let supp = self.suppliers(i);
        let cust = self.customers(i);
        cand.retain(|&l| l != i && supp.binary_search(&l).is_err() && cust.binary_search(&l).is_err());
        if strict && !cand.is_empty() {
            let other = side.opposite();
            let mut excl: Vec<FirmId> = Vec::new();
            for &k in cust {
                excl.extend_from_slice(self.suppliers(k));
            }
            for &k in supp {
                excl.extend_from_slice(self.customers(k));
            }
            for &k in self.side(i, other) {
                excl.extend_from_slice(self.side(k, other));
            }
            excl.sort_unstable();
            excl.dedup();
            cand.retain(|l| excl.binary_search(l).is_err());
        }
        Ok(cand)
    }
}

/// Summary degree statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub n: usize,
    pub edges: usize,
    /// Mean number of suppliers among firms with at least one supplier.
    pub mean_in_degree: f64,
    /// Mean number of customers among firms with at least one customer.
    pub mean_out_degree: f64,
    pub with_suppliers: usize,
    pub with_customers: usize,
}

impl ProductionNetwork {
    pub fn degree_stats(&self) -> DegreeStats {
        let ids = (0..self.n as u32).map(FirmId);
        let with_suppliers = ids.clone().filter(|&i| self.in_degree(i) > 0).count();
        let with_customers = ids.filter(|&i| self.out_degree(i) > 0).count();
        let e = self.edge_count() as f64;
        DegreeStats {
            n: self.n,
            edges: self.edge_count(),
            mean_in_degree: if with_suppliers > 0 { e / with_suppliers as f64 } else { 0.0 },
            mean_out_degree: if with_customers > 0 { e / with_customers as f64 } else { 0.0 },
            with_suppliers,
            with_customers,
        }
    }
}
