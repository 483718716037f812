//! Fixed-effect encoding, singleton pruning and absorption by alternating
//! projections.

use std::collections::HashMap;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::FirmId;
use crate::panel::Origin;
use crate::scalar::Scalar;

/// Grouping keys available on panel rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FactorKind {
    Firm,
    FirmYear,
    Year,
    OriginYear,
    OriginIndustryZipYear,
    IndustryZipYear,
}

impl FactorKind {
    pub const ALL: [FactorKind; 6] = [
        FactorKind::Firm,
        FactorKind::FirmYear,
        FactorKind::Year,
        FactorKind::OriginYear,
        FactorKind::OriginIndustryZipYear,
        FactorKind::IndustryZipYear,
    ];

    /// Short label used in table footers.
    pub fn label(self) -> &'static str {
        match self {
            FactorKind::Firm => "id",
            FactorKind::FirmYear => "id-y",
            FactorKind::Year => "y",
            FactorKind::OriginYear => "eu-y",
            FactorKind::OriginIndustryZipYear => "eu-s-z-y",
            FactorKind::IndustryZipYear => "s-z-y",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.label() == s)
    }

    /// Whether the key varies within a firm-year.
    pub fn uses_origin(self) -> bool {
        matches!(self, FactorKind::OriginYear | FactorKind::OriginIndustryZipYear)
    }
}

/// Fields a factor key can draw on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowKey {
    pub firm: FirmId,
    pub origin: Origin,
    pub year: i32,
    pub zip: Option<u32>,
    pub industry: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSpec {
    pub name: String,
    /// Dense group code per row.
    pub codes: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl FactorSpec {
    /// Densify arbitrary labels in order of first appearance.
    pub fn from_labels<L: std::hash::Hash + Eq + Copy>(name: &str, labels: &[L]) -> Self {
        let mut map: HashMap<L, u32> = HashMap::with_capacity(labels.len() / 2 + 1);
        let mut sizes = Vec::new();
        let codes = labels
            .iter()
            .map(|l| {
                let next = map.len() as u32;
                let c = *map.entry(*l).or_insert(next);
                if c as usize == sizes.len() {
                    sizes.push(0);
                }
                sizes[c as usize] += 1;
                c
            })
            .collect();
        Self {
            name: name.to_owned(),
            codes,
            sizes,
        }
    }

    pub fn groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Restrict to the given rows and re-densify.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let labels: Vec<u32> = rows.iter().map(|&r| self.codes[r]).collect();
        Self::from_labels(&self.name, &labels)
    }

    /// True when every group of `self` lies inside a single group of `outer`.
    pub fn nested_in(&self, outer: &[u32]) -> bool {
        assert_eq!(outer.len(), self.codes.len());
        let mut seen = vec![u32::MAX; self.groups()];
        for (&c, &o) in self.codes.iter().zip(outer) {
            let s = &mut seen[c as usize];
            if *s == u32::MAX {
                *s = o;
            } else if *s != o {
                return false;
            }
        }
        true
    }
}

/// Encode each factor over the rows, codes in order of first appearance.
pub fn encode(keys: &[RowKey], kinds: &[FactorKind]) -> Result<Vec<FactorSpec>> {
    kinds
        .iter()
        .map(|&kind| {
            let mut labels = Vec::with_capacity(keys.len());
            for (r, k) in keys.iter().enumerate() {
                let need = |v: Option<u32>, field: &str| {
                    v.ok_or_else(|| Error::Hdfe(format!("row {r}: factor {} needs {field}", kind.label())))
                };
                let o = k.origin as u64;
                let y = (k.year as i64 - i32::MIN as i64) as u64;
                let key: (u64, u64) = match kind {
                    FactorKind::Firm => (k.firm.0 as u64, 0),
                    FactorKind::FirmYear => (k.firm.0 as u64, y),
                    FactorKind::Year => (0, y),
                    FactorKind::OriginYear => (o, y),
                    FactorKind::OriginIndustryZipYear => {
                        let s = need(k.industry, "industry")? as u64;
                        let z = need(k.zip, "zip")? as u64;
                        ((o << 32) | s, (z << 32) | y)
                    }
                    FactorKind::IndustryZipYear => {
                        let s = need(k.industry, "industry")? as u64;
                        let z = need(k.zip, "zip")? as u64;
                        (s, (z << 32) | y)
                    }
                };
                labels.push(key);
            }
            Ok(FactorSpec::from_labels(kind.label(), &labels))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingletonDrop {
    /// Surviving row indices, ascending.
    pub keep: Vec<usize>,
    pub dropped: usize,
    pub passes: usize,
}

/// Remove rows that are alone in a group of any factor. With `recursive`
/// the pruning repeats until no singleton is left.
pub fn drop_singletons(factors: &[FactorSpec], recursive: bool) -> SingletonDrop {
    let n = factors.first().map_or(0, FactorSpec::len);
    let mut alive = vec![true; n];
    let mut sizes: Vec<Vec<usize>> = factors.iter().map(|f| f.sizes.clone()).collect();
    let mut passes = 0;
    loop {
        passes += 1;
        let doomed: Vec<usize> = (0..n)
            .filter(|&r| alive[r] && factors.iter().zip(&sizes).any(|(f, s)| s[f.codes[r] as usize] == 1))
            .collect();
        for &r in &doomed {
            alive[r] = false;
            for (f, s) in factors.iter().zip(sizes.iter_mut()) {
                s[f.codes[r] as usize] -= 1;
            }
        }
        if doomed.is_empty() || !recursive {
            break;
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&r| alive[r]).collect();
    SingletonDrop {
        dropped: n - keep.len(),
        keep,
        passes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemeanOptions {
    /// Bound on any residual group mean, relative to the column's max abs value.
    pub tol: f64,
    pub max_iter: usize,
}

impl DemeanOptions {
    pub fn for_scalar<T: Scalar>() -> Self {
        Self {
            tol: T::default_tol(),
            max_iter: 10_000,
        }
    }
}

impl Default for DemeanOptions {
    fn default() -> Self {
        Self::for_scalar::<f64>()
    }
}

/// Per-column convergence record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnConvergence {
    pub label: String,
    pub iterations: usize,
    /// Largest residual group mean over all factors, relative to scale.
    pub max_group_mean: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemeanedMatrix<T> {
    pub columns: Vec<Vec<T>>,
    pub convergence: Vec<ColumnConvergence>,
    pub tol: f64,
}

impl<T> DemeanedMatrix<T> {
    pub fn iterations(&self) -> usize {
        self.convergence.iter().map(|c| c.iterations).max().unwrap_or(0)
    }

    pub fn max_group_mean(&self) -> f64 {
        self.convergence.iter().map(|c| c.max_group_mean).fold(0.0, f64::max)
    }
}

fn group_means<T: Scalar>(col: &[T], f: &FactorSpec, sums: &mut [T]) {
    sums.iter_mut().for_each(|s| *s = T::zero());
    for (&c, &v) in f.codes.iter().zip(col) {
        sums[c as usize] += v;
    }
    for (s, &n) in sums.iter_mut().zip(&f.sizes) {
        *s /= T::of(n as f64);
    }
}

fn max_abs<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| Float::max(m, Float::abs(x)))
}

/// Largest absolute group mean of `col` over all factors.
pub fn residual_group_mean<T: Scalar>(col: &[T], factors: &[FactorSpec]) -> T {
    let mut worst = T::zero();
    for f in factors {
        let mut sums = vec![T::zero(); f.groups()];
        group_means(col, f, &mut sums);
        worst = Float::max(worst, max_abs(&sums));
    }
    worst
}

const TRACE_KEEP: usize = 64;

fn demean_column<T: Scalar>(col: &mut [T], factors: &[FactorSpec], opts: &DemeanOptions) -> Result<(usize, f64, f64)> {
    let scale = max_abs(col).to_f64_lossy();
    let unit = if scale > 0.0 { scale } else { 1.0 };
    let thr = T::of(opts.tol * unit);
    let mut buffers: Vec<Vec<T>> = factors.iter().map(|f| vec![T::zero(); f.groups()]).collect();
    let mut trace: Vec<f64> = Vec::new();
    let mut iter = 0;
    loop {
        for (fi, f) in factors.iter().enumerate() {
            let means = &mut buffers[fi];
            group_means(col, f, means);
            let m = max_abs(means);
            if fi == 0 && iter > 0 {
                trace.push(m.to_f64_lossy() / unit);
                if trace.len() > TRACE_KEEP {
                    trace.remove(0);
                }
                if m <= thr {
                    // state after the previous sweep; the last factor is exact,
                    // so audit the ones in between
                    let rest = residual_group_mean(col, &factors[1..]);
                    if rest <= thr {
                        let worst = Float::max(m, rest).to_f64_lossy() / unit;
                        return Ok((iter, worst, scale));
                    }
                }
            }
            for (v, &c) in col.iter_mut().zip(&f.codes) {
                *v -= means[c as usize];
            }
        }
        iter += 1;
        if iter >= opts.max_iter {
            let worst = residual_group_mean(col, factors);
            if worst <= thr {
                return Ok((iter, worst.to_f64_lossy() / unit, scale));
            }
            return Err(Error::NonConvergence {
                iterations: iter,
                last: worst.to_f64_lossy() / unit,
                tol: opts.tol,
                trace,
            });
        }
    }
}

/// Absorb all factors from every column. Columns are processed in parallel;
/// each column's sweep order is fixed, so results do not depend on the
/// worker count.
pub fn demean<T: Scalar>(
    columns: Vec<Vec<T>>,
    labels: &[String],
    factors: &[FactorSpec],
    opts: &DemeanOptions,
) -> Result<DemeanedMatrix<T>> {
    if factors.is_empty() {
        return Err(Error::Hdfe("at least one factor is required".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Hdfe(format!("tolerance must be positive, got {}", opts.tol)));
    }
    if labels.len() != columns.len() {
        return Err(Error::Hdfe("one label per column is required".into()));
    }
    let n = factors[0].len();
    if factors.iter().any(|f| f.len() != n) || columns.iter().any(|c| c.len() != n) {
        return Err(Error::Hdfe("factor and column lengths differ".into()));
    }
    let mut columns = columns;
    let stats: Vec<Result<(usize, f64, f64)>> = columns
        .par_iter_mut()
        .map(|c| demean_column(c, factors, opts))
        .collect();
    let mut convergence = Vec::with_capacity(stats.len());
    for (s, label) in stats.into_iter().zip(labels) {
        let (iterations, max_group_mean, scale) = s?;
        convergence.push(ColumnConvergence {
            label: label.clone(),
            iterations,
            max_group_mean,
            scale,
        });
    }
    Ok(DemeanedMatrix {
        columns,
        convergence,
        tol: opts.tol,
    })
}

/// Number of parameters absorbed by the factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorbedDof {
    pub total: usize,
    pub groups: Vec<usize>,
    /// Redundant group indicators subtracted from the group total.
    pub redundant: usize,
    /// False for three or more factors, where `total` is only a bound.
    pub exact: bool,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the bipartite graph linking groups of `a` and
/// `b` that share a row.
pub fn bipartite_components(a: &FactorSpec, b: &FactorSpec) -> usize {
    let ga = a.groups();
    let mut uf = UnionFind::new(ga + b.groups());
    for (&x, &y) in a.codes.iter().zip(&b.codes) {
        uf.union(x as usize, ga + y as usize);
    }
    (0..uf.parent.len()).filter(|&i| uf.find(i) == i).count()
}

/// Absorbed degrees of freedom. Exact for one and two factors; for more the
/// extra factors each lose as many levels as their largest pairwise
/// component count with an earlier factor, and the result is flagged.
pub fn absorbed_dof(factors: &[FactorSpec]) -> AbsorbedDof {
    let groups: Vec<usize> = factors.iter().map(FactorSpec::groups).collect();
    let sum: usize = groups.iter().sum();
    let redundant = match factors.len() {
        0 | 1 => 0,
        _ => {
            let mut r = bipartite_components(&factors[0], &factors[1]);
            for f in 2..factors.len() {
                r += (0..f)
                    .map(|j| bipartite_components(&factors[j], &factors[f]))
                    .max()
                    .unwrap_or(0);
            }
            r
        }
    };
    AbsorbedDof {
        total: sum.saturating_sub(redundant),
        groups,
        redundant,
        exact: factors.len() <= 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(labels: &[u32]) -> FactorSpec {
        FactorSpec::from_labels("f", labels)
    }

    fn key(firm: u32, origin: Origin, year: i32, s: u32, z: u32) -> RowKey {
        RowKey {
            firm: FirmId(firm),
            origin,
            year,
            zip: Some(z),
            industry: Some(s),
        }
    }

    #[test]
    fn firm_year_groups() {
        let keys = [
            key(1, Origin::Eu, 2011, 0, 0),
            key(1, Origin::Eu, 2012, 0, 0),
            key(2, Origin::Eu, 2011, 0, 0),
            key(1, Origin::NonEu, 2011, 0, 0),
        ];
        let f = encode(&keys, &[FactorKind::FirmYear]).unwrap();
        assert_eq!(f[0].groups(), 3);
        assert_eq!(f[0].codes[0], f[0].codes[3]);
    }

    #[test]
    fn origin_cell_groups_differ() {
        let keys = [key(1, Origin::Eu, 2012, 1, 9), key(1, Origin::NonEu, 2012, 1, 9)];
        let f = encode(&keys, &[FactorKind::OriginIndustryZipYear]).unwrap();
        assert_ne!(f[0].codes[0], f[0].codes[1]);
        let f = encode(&keys, &[FactorKind::IndustryZipYear]).unwrap();
        assert_eq!(f[0].codes[0], f[0].codes[1]);
    }

    #[test]
    fn missing_key_field() {
        let mut k = key(1, Origin::Eu, 2012, 1, 9);
        k.zip = None;
        let err = encode(&[k], &[FactorKind::IndustryZipYear]).unwrap_err();
        assert!(err.to_string().contains("row 0"));
    }

    #[test]
    fn singleton_drops() {
        let a = spec(&[0, 0, 1, 1, 2]);
        let d = drop_singletons(std::slice::from_ref(&a), true);
        assert_eq!(d.keep, vec![0, 1, 2, 3]);
        // dropping row 4 (alone in b) leaves row 3 alone in a
        let a = spec(&[0, 0, 1, 1]);
        let b = spec(&[0, 0, 0, 1]);
        let once = drop_singletons(&[a.clone(), b.clone()], false);
        assert_eq!(once.keep, vec![0, 1, 2]);
        let full = drop_singletons(&[a.clone(), b.clone()], true);
        assert_eq!(full.keep, vec![0, 1]);
        let none = drop_singletons(&[spec(&[0, 0, 1, 1])], true);
        assert_eq!(none.dropped, 0);
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn one_factor_one_pass() {
        let f = spec(&[0, 0, 1, 1]);
        let d = demean(vec![vec![1.0, 2.0, 3.0, 4.0]], &labels(1), &[f], &DemeanOptions::default()).unwrap();
        assert_eq!(d.columns[0], vec![-0.5, 0.5, -0.5, 0.5]);
        assert_eq!(d.iterations(), 1);
    }

    #[test]
    fn nested_factors_match_finer() {
        let fine = spec(&[0, 0, 1, 1, 2, 2, 3]);
        let coarse = spec(&[0, 0, 0, 0, 1, 1, 1]);
        let y = vec![1.0, 4.0, 2.0, 7.0, 3.0, 3.5, 9.0];
        let both = demean(vec![y.clone()], &labels(1), &[coarse, fine.clone()], &DemeanOptions::default()).unwrap();
        let only = demean(vec![y], &labels(1), &[fine], &DemeanOptions::default()).unwrap();
        assert!(both.iterations() <= 2);
        for (a, b) in both.columns[0].iter().zip(&only.columns[0]) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn additive_two_way_is_absorbed() {
        let a = spec(&[0, 0, 1, 1]);
        let b = spec(&[0, 1, 0, 1]);
        let d = demean(vec![vec![1.0, 2.0, 3.0, 4.0]], &labels(1), &[a, b], &DemeanOptions::default()).unwrap();
        for v in &d.columns[0] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn f32_columns() {
        let a = spec(&[0, 0, 1, 1, 2, 2]);
        let b = spec(&[0, 1, 1, 2, 2, 0]);
        let y: Vec<f32> = vec![1.0, 5.0, 2.0, 8.0, 3.0, 4.0];
        let d = demean(vec![y], &labels(1), &[a.clone(), b.clone()], &DemeanOptions::for_scalar::<f32>()).unwrap();
        assert!(residual_group_mean(&d.columns[0], &[a, b]) <= 8.0 * 1e-5);
    }

    #[test]
    fn nonconvergence_carries_trace() {
        let a = spec(&[0, 0, 1, 1, 2, 2]);
        let b = spec(&[0, 1, 1, 2, 2, 0]);
        let opts = DemeanOptions { tol: 1e-14, max_iter: 2 };
        match demean(vec![vec![1.0, 5.0, 2.0, 8.0, 3.0, 4.0]], &labels(1), &[a, b], &opts) {
            Err(Error::NonConvergence { iterations, trace, .. }) => {
                assert_eq!(iterations, 2);
                assert!(!trace.is_empty());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn dof_examples() {
        assert_eq!(absorbed_dof(&[spec(&[0, 1, 2, 2])]).total, 3);
        // connected: 3 + 4 groups, one component
        let a = spec(&[0, 0, 1, 1, 2, 2]);
        let b = spec(&[0, 1, 1, 2, 2, 3]);
        let d = absorbed_dof(&[a, b]);
        assert_eq!((d.total, d.exact), (6, true));
        // two components
        let a = spec(&[0, 0, 1, 2, 2]);
        let b = spec(&[0, 1, 0, 2, 3]);
        assert_eq!(absorbed_dof(&[a, b]).total, 5);
        let c = spec(&[0, 0, 0, 1, 1]);
        assert!(!absorbed_dof(&[spec(&[0, 0, 1, 2, 2]), spec(&[0, 1, 0, 2, 3]), c]).exact);
    }

    #[test]
    fn nesting() {
        let fy = spec(&[0, 0, 1, 1]);
        assert!(fy.nested_in(&[5, 5, 7, 7]));
        assert!(!fy.nested_in(&[5, 6, 7, 7]));
    }
}
