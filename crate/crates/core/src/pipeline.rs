//! End-to-end estimation: load or synthesize data, build the panel and the
//! design, prune singletons, absorb fixed effects and fit.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dgp::SyntheticDataset;
use crate::error::{Error, Result};
use crate::estimator::{ols, tsls, ClusterSpec, EstimationResult, IvData};
use crate::hdfe::{absorbed_dof, demean, drop_singletons, encode, ColumnConvergence, DemeanOptions, FactorKind};
use crate::ledger::{DropLedger, DropReason};
use crate::network::{
    build_from_edges, read_edges_csv, stable_subnetwork, IdMap, IngestOptions, IngestStats, ProductionNetwork, StableStats,
};
use crate::panel::{
    build_rows, read_attributes_csv, read_imports_csv, AttributeTable, ImportHistory, MedianSplit, Mode, Panel,
};
use crate::scalar::Scalar;
use crate::treatment::{build_design, Context, Design, PartitionAudit, Spec, TreatmentOptions};

/// Everything the estimators read.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: IdMap,
    pub network: ProductionNetwork,
    pub history: ImportHistory,
    pub attrs: AttributeTable,
    pub ingest: Option<IngestStats>,
    pub stable: Option<StableStats>,
}

#[derive(Debug, Clone)]
pub struct DataPaths {
    pub edges: PathBuf,
    pub attributes: PathBuf,
    pub imports: PathBuf,
}

impl DataPaths {
    /// Conventional file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            edges: dir.join("edges.csv"),
            attributes: dir.join("attributes.csv"),
            imports: dir.join("imports.csv"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub ingest: IngestOptions,
    /// Years over which links must persist; defaults to the full edge range.
    pub stable_window: Option<(i32, i32)>,
    /// Years a stable link may be missing.
    pub max_gap: Option<usize>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

impl Dataset {
    pub fn load(paths: &DataPaths, opts: &LoadOptions) -> Result<Self> {
        let mut ids = IdMap::new();
        let name = |p: &Path| p.display().to_string();
        let edges = read_edges_csv(open(&paths.edges)?, &name(&paths.edges), &mut ids)?;
        let attr_records = read_attributes_csv(open(&paths.attributes)?, &name(&paths.attributes), &mut ids)?;
        let imports = read_imports_csv(open(&paths.imports)?, &name(&paths.imports), &mut ids)?;
        let n = ids.len();
        let yearly = build_from_edges(&edges, &opts.ingest)?;
        let window = opts.stable_window.unwrap_or((yearly.first_year, yearly.last_year()));
        let stable = stable_subnetwork(&yearly, window, opts.max_gap.unwrap_or(1), n)?;
        let history = ImportHistory::from_records(&imports, n)?;
        let attrs = AttributeTable::from_records(
            &attr_records,
            n,
            (history.first_year(), history.last_year()),
            &stable.network,
        )?;
        log::info!(
            "loaded {n} firms, {} stable links of {} candidates",
            stable.stats.kept,
            stable.stats.candidate_links
        );
        Ok(Self {
            ids,
            network: stable.network,
            history,
            attrs,
            ingest: Some(yearly.stats),
            stable: Some(stable.stats),
        })
    }

    /// In-memory view of a simulation, equivalent to loading its CSVs.
    pub fn from_synthetic(ds: &SyntheticDataset) -> Result<Self> {
        Ok(Self {
            ids: ds.ids(),
            network: ds.network.clone(),
            history: ds.history(),
            attrs: ds.attributes()?,
            ingest: None,
            stable: None,
        })
    }

    pub fn context(&self) -> Context<'_> {
        Context {
            net: &self.network,
            history: &self.history,
            attrs: &self.attrs,
        }
    }

    /// Every observed year after the baseline.
    pub fn default_window(&self) -> (i32, i32) {
        (self.history.first_year() + 1, self.history.last_year())
    }

    pub fn panel(&self, mode: Mode, window: Option<(i32, i32)>) -> Result<Panel> {
        build_rows(&self.history, &self.attrs, mode, window.unwrap_or_else(|| self.default_window()))
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub window: Option<(i32, i32)>,
    /// Overrides the specification's absorbed factors.
    pub factors: Option<Vec<FactorKind>>,
    /// Overrides the specification's cluster key.
    pub cluster: Option<FactorKind>,
    pub treatment: TreatmentOptions,
    /// Defaults to the scalar's tolerance.
    pub demean: Option<DemeanOptions>,
    pub recursive_singletons: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            window: None,
            factors: None,
            cluster: None,
            treatment: TreatmentOptions::default(),
            demean: None,
            recursive_singletons: true,
        }
    }
}

impl EstimateOptions {
    pub fn resolved(&self, spec: &Spec) -> Result<(Vec<FactorKind>, FactorKind)> {
        let factors = self.factors.clone().unwrap_or_else(|| spec.factors());
        let cluster = self.cluster.unwrap_or_else(|| spec.cluster());
        spec.validate(&factors, cluster)?;
        Ok((factors, cluster))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Estimate {
    pub result: EstimationResult,
    /// Panel, treatment and singleton drops, reconciling to `result.n`.
    pub ledger: DropLedger,
    pub convergence: Vec<ColumnConvergence>,
    pub singleton_passes: usize,
    #[serde(skip)]
    pub split: Option<MedianSplit>,
    pub audit: PartitionAudit,
    pub spatial_alone: usize,
}

/// Fit `spec` in double precision.
pub fn estimate(data: &Dataset, spec: &Spec, opts: &EstimateOptions) -> Result<Estimate> {
    estimate_as::<f64>(data, spec, opts)
}

pub fn estimate_as<T: Scalar>(data: &Dataset, spec: &Spec, opts: &EstimateOptions) -> Result<Estimate> {
    opts.resolved(spec)?;
    let panel = data.panel(spec.mode(), opts.window)?;
    estimate_on_panel::<T>(data, &panel, spec, opts)
}

/// Fit on a prebuilt panel; lets several specifications share one.
pub fn estimate_on_panel<T: Scalar>(data: &Dataset, panel: &Panel, spec: &Spec, opts: &EstimateOptions) -> Result<Estimate> {
    let (factors, cluster) = opts.resolved(spec)?;
    let design = build_design(&data.context(), panel, spec, &opts.treatment)?;
    let mut ledger = panel.ledger.clone();
    let mut est = estimate_design::<T>(design, &factors, cluster, opts)?;
    ledger.extend(std::mem::take(&mut est.ledger));
    est.ledger = ledger;
    Ok(est)
}

fn to_scalar<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Absorb `factors` and fit a built design. The returned ledger covers only
/// the design's own drops and the singleton pass.
pub fn estimate_design<T: Scalar>(
    mut design: Design,
    factors: &[FactorKind],
    cluster: FactorKind,
    opts: &EstimateOptions,
) -> Result<Estimate> {
    let spec = design.spec;
    spec.validate(factors, cluster)?;
    let mut ledger = std::mem::take(&mut design.ledger);

    // singletons
    let fe = encode(&design.keys, factors)?;
    let sd = drop_singletons(&fe, opts.recursive_singletons);
    if sd.dropped > 0 {
        let mut single = DropLedger::new(design.n());
        let mut keep = sd.keep.iter().peekable();
        for (r, row) in design.rows.iter().enumerate() {
            if keep.peek() == Some(&&r) {
                keep.next();
            } else {
                single.record(row.firm, row.origin, row.year, "absorb", DropReason::Singleton);
            }
        }
        ledger.extend(single);
        design.retain_rows(&sd.keep);
        log::info!("{}: {} singleton rows dropped in {} passes", spec.name(), sd.dropped, sd.passes);
    }
    if design.n() == 0 {
        return Err(Error::Estimator(format!("{}: no rows left after dropping singletons", spec.name())));
    }
    let fe: Vec<_> = fe.iter().map(|f| f.subset(&sd.keep)).collect();
    let cl = encode(&design.keys, &[cluster])?.remove(0);

    // absorb
    let dopts = opts.demean.unwrap_or_else(DemeanOptions::for_scalar::<T>);
    let y_raw = design.y.clone();
    let mut labels = vec!["y".to_owned()];
    let mut cols: Vec<Vec<T>> = vec![to_scalar(&design.y)];
    for c in design.endog.iter().chain(&design.exog).chain(&design.instruments) {
        labels.push(c.label.clone());
        cols.push(to_scalar(&c.values));
    }
    let dm = demean(cols, &labels, &fe, &dopts)?;
    let mut it = dm.columns.into_iter();
    let y: Vec<T> = it.next().expect("y column");
    let endog: Vec<Vec<T>> = it.by_ref().take(design.endog.len()).collect();
    let exog_all: Vec<Vec<T>> = it.by_ref().take(design.exog.len()).collect();
    let instruments: Vec<Vec<T>> = it.collect();

    // drop exogenous columns the factors absorb
    let omit_tol = 100.0 * dopts.tol;
    let mut exog = Vec::new();
    let mut exog_labels = Vec::new();
    let mut omitted = Vec::new();
    for (raw, col) in design.exog.iter().zip(exog_all) {
        let before = norm(&raw.values);
        let after = norm(&col.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>());
        if before == 0.0 || after <= omit_tol * before {
            omitted.push(raw.label.clone());
        } else {
            exog.push(col);
            exog_labels.push(raw.label.clone());
        }
    }
    if !omitted.is_empty() {
        log::warn!("{}: absorbed by fixed effects and omitted: {}", spec.name(), omitted.join(", "));
    }

    // parameters absorbed by factors nested in the clusters do not count
    let adof = absorbed_dof(&fe);
    let nested: usize = fe.iter().filter(|f| f.nested_in(&cl.codes)).map(|f| f.groups()).sum();
    let cspec = ClusterSpec {
        codes: &cl.codes,
        absorbed_dof: adof.total.saturating_sub(nested),
        dof_exact: adof.exact,
    };
    let endog_labels: Vec<String> = design.endog.iter().map(|c| c.label.clone()).collect();
    let mut result = if spec.is_iv() {
        let instrument_labels: Vec<String> = design.instruments.iter().map(|c| c.label.clone()).collect();
        tsls(
            &IvData {
                y: &y,
                endog: &endog,
                exog: &exog,
                instruments: &instruments,
                endog_labels: &endog_labels,
                exog_labels: &exog_labels,
                instrument_labels: &instrument_labels,
            },
            &cspec,
        )?
    } else {
        let x: Vec<Vec<T>> = endog.into_iter().chain(exog).collect();
        let labels: Vec<String> = endog_labels.into_iter().chain(exog_labels).collect();
        ols(&y, &x, &labels, &cspec)?
    };
    result.spec = spec.name();
    result.fixed_effects = factors.iter().map(|f| f.label().to_owned()).collect();
    result.cluster = cluster.label().to_owned();
    result.omitted = omitted;
    // fitted values of the full model are y minus the residual
    result.fitted_outside_unit = y_raw
        .iter()
        .zip(&result.residuals)
        .filter(|(y, e)| !(0.0..=1.0).contains(&(*y - *e)))
        .count();
    if result.fitted_outside_unit > 0 {
        log::info!(
            "{}: {} fitted probabilities outside [0, 1]",
            spec.name(),
            result.fitted_outside_unit
        );
    }
    if !ledger.reconciles(result.n) {
        return Err(Error::Estimator(format!(
            "drop ledger does not reconcile: {} in, {} dropped, {} estimated",
            ledger.input,
            ledger.dropped(),
            result.n
        )));
    }
    Ok(Estimate {
        result,
        ledger,
        convergence: dm.convergence,
        singleton_passes: sd.passes,
        split: design.split,
        audit: design.audit,
        spatial_alone: design.spatial_alone,
    })
}
