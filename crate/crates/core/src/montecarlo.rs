//! Monte Carlo replications of the simulator and estimators.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{derive_seed, simulate, DgpConfig};
use crate::error::{Error, Result};
use crate::panel::Mode;
use crate::pipeline::{estimate_on_panel, Dataset, EstimateOptions};
use crate::treatment::Spec;

const REP_TAG: u64 = 0x4d43;

/// Seed of replication `rep` under master seed `seed`.
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    derive_seed(seed, REP_TAG, rep as u64, 0)
}

#[derive(Debug, Clone)]
pub struct McConfig {
    pub dgp: DgpConfig,
    pub reps: usize,
    pub seed: u64,
    pub specs: Vec<Spec>,
    /// Confidence level for coverage.
    pub level: f64,
    /// Nominal size of the overidentification test.
    pub j_size: f64,
    pub options: EstimateOptions,
}

impl McConfig {
    pub fn new(dgp: DgpConfig, reps: usize, seed: u64, specs: Vec<Spec>) -> Self {
        Self {
            dgp,
            reps,
            seed,
            specs,
            level: 0.95,
            j_size: 0.05,
            options: EstimateOptions::default(),
        }
    }
}

/// Outcome of one specification in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    pub spec: String,
    /// `(term, coefficient, se, covered)` for the peer terms.
    pub terms: Vec<(String, f64, f64, bool)>,
    pub n: usize,
    pub min_first_stage_f: Option<f64>,
    pub hansen_p: Option<f64>,
    pub clamp_rate: f64,
    pub error: Option<String>,
}

/// Per specification and term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSummary {
    pub spec: String,
    pub term: String,
    pub truth: f64,
    pub reps: usize,
    pub mean: f64,
    pub sd: f64,
    /// Monte Carlo standard error of the mean.
    pub mcse: f64,
    pub bias: f64,
    /// Bias in Monte Carlo standard errors.
    pub bias_z: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub failures: usize,
    /// Share of replications rejecting the overidentifying restrictions.
    pub j_rejection: Option<f64>,
    pub median_first_stage_f: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct McRun {
    pub outcomes: Vec<RepOutcome>,
    pub summary: Vec<TermSummary>,
}

fn truths(dgp: &DgpConfig) -> [(&'static str, f64); 2] {
    [("ybar_D", dgp.beta_d), ("ybar_U", dgp.beta_u)]
}

fn one_rep(cfg: &McConfig, rep: usize) -> Vec<RepOutcome> {
    let seed = rep_seed(cfg.seed, rep);
    let fail = |spec: &Spec, e: &Error, clamp: f64| RepOutcome {
        rep,
        seed,
        spec: spec.name(),
        terms: vec![],
        n: 0,
        min_first_stage_f: None,
        hansen_p: None,
        clamp_rate: clamp,
        error: Some(e.to_string()),
    };
    let ds = match simulate(&cfg.dgp, seed) {
        Ok(ds) => ds,
        Err(e) => return cfg.specs.iter().map(|s| fail(s, &e, f64::NAN)).collect(),
    };
    let data = match Dataset::from_synthetic(&ds) {
        Ok(d) => d,
        Err(e) => return cfg.specs.iter().map(|s| fail(s, &e, ds.clamp_rate)).collect(),
    };
    let mut panels: Vec<(Mode, Result<crate::panel::Panel>)> = Vec::new();
    let mut out = Vec::with_capacity(cfg.specs.len());
    for spec in &cfg.specs {
        let mode = spec.mode();
        if !panels.iter().any(|(m, _)| *m == mode) {
            panels.push((mode, data.panel(mode, cfg.options.window)));
        }
        let panel = &panels.iter().find(|(m, _)| *m == mode).unwrap().1;
        let est = match panel {
            Ok(p) => estimate_on_panel::<f64>(&data, p, spec, &cfg.options),
            Err(e) => Err(Error::Panel(e.to_string())),
        };
        match est {
            Ok(e) => {
                let r = &e.result;
                let terms = truths(&cfg.dgp)
                    .iter()
                    .filter_map(|&(t, truth)| {
                        let k = r.index(t)?;
                        let (lo, hi) = r.ci(t, cfg.level)?;
                        Some((t.to_owned(), r.coef[k], r.se[k], lo <= truth && truth <= hi))
                    })
                    .collect();
                let d = r.diagnostics.as_ref();
                out.push(RepOutcome {
                    rep,
                    seed,
                    spec: spec.name(),
                    terms,
                    n: r.n,
                    min_first_stage_f: d.map(|d| d.first_stage_f.iter().cloned().fold(f64::INFINITY, f64::min)),
                    hansen_p: d.filter(|d| !d.just_identified).map(|d| d.hansen_p),
                    clamp_rate: ds.clamp_rate,
                    error: None,
                });
            }
            Err(e) => out.push(fail(spec, &e, ds.clamp_rate)),
        }
    }
    out
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Summaries per specification and peer term, in specification order.
pub fn summarize(cfg: &McConfig, outcomes: &[RepOutcome]) -> Vec<TermSummary> {
    let mut out = Vec::new();
    for spec in &cfg.specs {
        let name = spec.name();
        let mine: Vec<&RepOutcome> = outcomes.iter().filter(|o| o.spec == name).collect();
        let failures = mine.iter().filter(|o| o.error.is_some()).count();
        let js: Vec<f64> = mine.iter().filter_map(|o| o.hansen_p).collect();
        let j_rejection = (!js.is_empty()).then(|| js.iter().filter(|&&p| p < cfg.j_size).count() as f64 / js.len() as f64);
        let median_f = median(mine.iter().filter_map(|o| o.min_first_stage_f).collect());
        for (term, truth) in truths(&cfg.dgp) {
            let draws: Vec<(f64, f64, bool)> = mine
                .iter()
                .filter_map(|o| o.terms.iter().find(|t| t.0 == term).map(|t| (t.1, t.2, t.3)))
                .collect();
            let m = draws.len();
            if m == 0 {
                continue;
            }
            let mf = m as f64;
            let mean = draws.iter().map(|d| d.0).sum::<f64>() / mf;
            let sd = if m > 1 {
                (draws.iter().map(|d| (d.0 - mean).powi(2)).sum::<f64>() / (mf - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            let mcse = sd / mf.sqrt();
            out.push(TermSummary {
                spec: name.clone(),
                term: term.to_owned(),
                truth,
                reps: m,
                mean,
                sd,
                mcse,
                bias: mean - truth,
                bias_z: (mean - truth) / mcse,
                mean_se: draws.iter().map(|d| d.1).sum::<f64>() / mf,
                coverage: draws.iter().filter(|d| d.2).count() as f64 / mf,
                failures,
                j_rejection,
                median_first_stage_f: median_f,
            });
        }
    }
    out
}

/// Run all replications. Replications run in parallel; results come back in
/// replication order, so output does not depend on the thread count.
pub fn run(cfg: &McConfig) -> Result<McRun> {
    if cfg.reps == 0 {
        return Err(Error::Config("montecarlo needs at least one replication".into()));
    }
    if cfg.specs.is_empty() {
        return Err(Error::Config("montecarlo needs at least one specification".into()));
    }
    cfg.dgp.validate()?;
    for s in &cfg.specs {
        cfg.options.resolved(s)?;
    }
    let outcomes: Vec<RepOutcome> = (0..cfg.reps).into_par_iter().flat_map_iter(|rep| one_rep(cfg, rep)).collect();
    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} fits failed", outcomes.len());
    }
    let summary = summarize(cfg, &outcomes);
    Ok(McRun { outcomes, summary })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One line per replication, specification and term.
pub fn write_reps_csv<W: Write>(w: W, outcomes: &[RepOutcome]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let e = |e: csv::Error| Error::Io(e.into());
    out.write_record([
        "rep", "seed", "spec", "term", "coefficient", "se", "covered", "n", "min_first_stage_f", "hansen_p", "clamp_rate",
        "error",
    ])
    .map_err(e)?;
    for o in outcomes {
        let common = |term: &str, c: String, s: String, cov: String| {
            vec![
                o.rep.to_string(),
                o.seed.to_string(),
                o.spec.clone(),
                term.to_owned(),
                c,
                s,
                cov,
                o.n.to_string(),
                opt(o.min_first_stage_f),
                opt(o.hansen_p),
                o.clamp_rate.to_string(),
                o.error.clone().unwrap_or_default(),
            ]
        };
        if o.terms.is_empty() {
            out.write_record(common("", String::new(), String::new(), String::new())).map_err(e)?;
        }
        for (t, c, s, cov) in &o.terms {
            out.write_record(common(t, c.to_string(), s.to_string(), cov.to_string())).map_err(e)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(w: W, summary: &[TermSummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for s in summary {
        out.serialize(s).map_err(|e| Error::Io(e.into()))?;
    }
    out.flush()?;
    Ok(())
}
