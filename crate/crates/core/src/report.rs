//! Output artifacts: result CSVs, regression tables, convergence logs and
//! run manifests.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimator::EstimationResult;
use crate::hdfe::ColumnConvergence;
use crate::panel::Control;

/// Significance marker: `*` below 0.1, `**` below 0.05, `***` below 0.01.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Shortest round-trip representation, with an exponent for tiny values.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::from(e))
}

/// One row per coefficient: `spec,term,coefficient,se,t,p,stars,n,clusters,fixed_effects,cluster`.
pub fn write_results_csv<W: Write>(w: W, results: &[&EstimationResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "spec",
        "term",
        "coefficient",
        "se",
        "t",
        "p",
        "stars",
        "n",
        "clusters",
        "fixed_effects",
        "cluster",
    ])
    .map_err(csv_err)?;
    for r in results {
        let fe = r.fixed_effects.join(" / ");
        for k in 0..r.labels.len() {
            out.write_record([
                r.spec.as_str(),
                &r.labels[k],
                &num(r.coef[k]),
                &num(r.se[k]),
                &num(r.t[k]),
                &num(r.p[k]),
                stars(r.p[k]),
                &r.n.to_string(),
                &r.clusters.to_string(),
                &fe,
                &r.cluster,
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `spec,column,iterations,max_group_mean,scale`.
pub fn write_convergence_csv<W: Write>(w: W, logs: &[(&str, &[ColumnConvergence])]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["spec", "column", "iterations", "max_group_mean", "scale"])
        .map_err(csv_err)?;
    for (spec, log) in logs {
        for c in log.iter() {
            out.write_record([
                *spec,
                &c.label,
                &c.iterations.to_string(),
                &format!("{:e}", c.max_group_mean),
                &format!("{:e}", c.scale),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Rank test analog: the Cragg–Donald statistic in chi-square form with its p-value.
pub fn identification_test(r: &EstimationResult) -> Option<(f64, f64)> {
    let d = r.diagnostics.as_ref()?;
    let l = d.instruments.len();
    let k1 = d.first_stage_f.len();
    let stat = d.cragg_donald * l as f64;
    let dof = (l + 1).saturating_sub(k1).max(1);
    let p = ChiSquared::new(dof as f64).map(|c| c.sf(stat)).unwrap_or(f64::NAN);
    Some((stat, p))
}

fn is_own_control(label: &str) -> bool {
    Control::ALL.iter().any(|c| c.label() == label)
}

fn is_peer_control(label: &str) -> bool {
    label.starts_with("xbar_")
}

/// Column entry for [`report_ladder`].
#[derive(Debug, Clone, Copy)]
pub struct Column<'a> {
    pub title: &'a str,
    pub result: &'a EstimationResult,
}

fn fmt_stat(v: f64) -> String {
    if !v.is_finite() {
        "".into()
    } else if v.abs() >= 1e6 {
        format!("{v:.3e}")
    } else {
        format!("{v:.3}")
    }
}

fn lag_names(instruments: &[String]) -> String {
    let mut lags: Vec<&str> = Vec::new();
    for i in instruments {
        let lag = i.trim_start_matches('z').split("bar").next().unwrap_or("");
        if !lags.contains(&lag) {
            lags.push(lag);
        }
    }
    lags.iter().map(|l| format!("t-{l}")).collect::<Vec<_>>().join(", ")
}

/// Plain-text regression table, one column per result. Coefficients are
/// aligned by label; control coefficients are summarized in the
/// characteristics rows.
pub fn report_ladder(cols: &[Column<'_>]) -> Result<String> {
    if cols.is_empty() {
        return Err(Error::Report("no results to tabulate".into()));
    }
    let mut titles = HashSet::new();
    for c in cols {
        if !titles.insert(c.title) {
            return Err(Error::Report(format!("duplicate column title {:?}", c.title)));
        }
        let mut seen = HashSet::new();
        for l in &c.result.labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::Report(format!("label {l:?} appears twice in {}", c.title)));
            }
        }
    }

    let mut terms: Vec<&str> = Vec::new();
    for c in cols {
        for l in &c.result.labels {
            if !is_own_control(l) && !is_peer_control(l) && !terms.contains(&l.as_str()) {
                terms.push(l);
            }
        }
    }

    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    let header: Vec<String> = (1..=cols.len()).map(|i| format!("({i})")).collect();
    rows.push((String::new(), header));
    rows.push((String::new(), cols.iter().map(|c| c.title.to_owned()).collect()));
    let rule = rows.len();
    for t in &terms {
        let mut coef = Vec::new();
        let mut se = Vec::new();
        for c in cols {
            match c.result.index(t) {
                Some(k) => {
                    let r = c.result;
                    coef.push(format!("{:.4}{}", r.coef[k], stars(r.p[k])));
                    se.push(format!("({:.4})", r.se[k]));
                }
                None => {
                    coef.push(String::new());
                    se.push(String::new());
                }
            }
        }
        rows.push((t.to_string(), coef));
        rows.push((String::new(), se));
    }
    let body_end = rows.len();

    let yes_no = |b: bool| if b { "Yes" } else { "No" }.to_owned();
    rows.push((
        "Own characteristics".into(),
        cols.iter()
            .map(|c| {
                let r = c.result;
                yes_no(
                    r.labels.iter().chain(&r.omitted).any(|l| is_own_control(l))
                        || r.fixed_effects.iter().any(|f| f == "id-y"),
                )
            })
            .collect(),
    ));
    rows.push((
        "Peers' characteristics".into(),
        cols.iter()
            .map(|c| yes_no(c.result.labels.iter().chain(&c.result.omitted).any(|l| is_peer_control(l))))
            .collect(),
    ));
    rows.push(("r2".into(), cols.iter().map(|c| format!("{:.3}", c.result.r2_within)).collect()));
    rows.push(("N".into(), cols.iter().map(|c| c.result.n.to_string()).collect()));
    if cols.iter().any(|c| c.result.diagnostics.is_some()) {
        let iv = |f: &dyn Fn(&EstimationResult) -> String| -> Vec<String> {
            cols.iter()
                .map(|c| if c.result.diagnostics.is_some() { f(c.result) } else { String::new() })
                .collect()
        };
        let d = |r: &EstimationResult| r.diagnostics.clone().expect("iv column");
        rows.push(("idstat".into(), iv(&|r| fmt_stat(identification_test(r).unwrap().0))));
        rows.push(("idp".into(), iv(&|r| fmt_stat(identification_test(r).unwrap().1))));
        rows.push((
            "widstat".into(),
            iv(&|r| fmt_stat(d(r).first_stage_f.iter().cloned().fold(f64::INFINITY, f64::min))),
        ));
        rows.push((
            "j".into(),
            iv(&|r| if d(r).just_identified { String::new() } else { fmt_stat(d(r).hansen_j) }),
        ));
        rows.push((
            "jp".into(),
            iv(&|r| if d(r).just_identified { String::new() } else { fmt_stat(d(r).hansen_p) }),
        ));
        rows.push(("instruments".into(), iv(&|r| lag_names(&d(r).instruments))));
    }
    let fe_lines = cols.iter().map(|c| c.result.fixed_effects.len()).max().unwrap_or(0);
    for line in 0..fe_lines {
        rows.push((
            if line == 0 { "fixed effects".into() } else { String::new() },
            cols.iter()
                .map(|c| c.result.fixed_effects.get(line).cloned().unwrap_or_default())
                .collect(),
        ));
    }
    rows.push(("clustering variable".into(), cols.iter().map(|c| c.result.cluster.clone()).collect()));

    let lw = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0);
    let cw = rows
        .iter()
        .flat_map(|r| r.1.iter().map(|s| s.chars().count()))
        .max()
        .unwrap_or(0)
        .max(8);
    let width = lw + cols.len() * (cw + 2);
    let mut out = String::new();
    let line = "-".repeat(width);
    out.push_str(&line);
    out.push('\n');
    for (i, (label, cells)) in rows.iter().enumerate() {
        if i == rule || i == body_end {
            out.push_str(&line);
            out.push('\n');
        }
        let mut s = format!("{label:<lw$}");
        for c in cells {
            let _ = write!(s, "  {c:>cw$}");
        }
        out.push_str(s.trim_end());
        out.push('\n');
    }
    out.push_str(&line);
    out.push('\n');
    out.push_str("Note: *p<0.1; **p<0.05; ***p<0.01\n");
    Ok(out)
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// What is needed to reproduce a run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of the canonical JSON of the resolved configuration.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    /// Artifact name to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: Option<u64>, threads: usize) -> Result<Self> {
        // serde_json maps keep keys sorted, so the encoding is canonical
        let config = serde_json::to_value(config)?;
        let config_hash = sha256_hex(serde_json::to_string(&config)?.as_bytes());
        Ok(Self {
            tool: "netspill".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash,
            config,
            seed,
            threads,
            artifacts: BTreeMap::new(),
        })
    }

    pub fn add_artifact(&mut self, name: &str, bytes: &[u8]) {
        self.artifacts.insert(name.into(), sha256_hex(bytes));
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{IvDiagnostics, Method};

    pub(crate) fn result(spec: &str, labels: &[&str], p: &[f64]) -> EstimationResult {
        let k = labels.len();
        EstimationResult {
            spec: spec.into(),
            method: Method::Ols,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            coef: (0..k).map(|i| 0.01 * (i + 1) as f64).collect(),
            vcov: vec![vec![0.0; k]; k],
            se: vec![0.005; k],
            t: vec![2.0; k],
            p: p.to_vec(),
            n: 1234,
            clusters: 100,
            k,
            absorbed_dof: 0,
            k_effective: k,
            df: 99,
            r2_within: 0.01,
            se_approximate: false,
            omitted: vec![],
            fixed_effects: vec!["id-y".into(), "eu-s-z-y".into()],
            cluster: "id".into(),
            diagnostics: None,
            fitted_outside_unit: 0,
            residuals: vec![],
        }
    }

    #[test]
    fn star_thresholds() {
        assert_eq!(stars(0.004), "***");
        assert_eq!(stars(0.01), "**");
        assert_eq!(stars(0.049), "**");
        assert_eq!(stars(0.05), "*");
        assert_eq!(stars(0.099), "*");
        assert_eq!(stars(0.1), "");
    }

    #[test]
    fn shared_label_is_one_row() {
        let a = result("s1-col1", &["ybar_D", "ybar_U"], &[0.004, 0.5]);
        let b = result("s1-col5", &["ybar_D"], &[0.03]);
        let t = report_ladder(&[Column { title: "a", result: &a }, Column { title: "b", result: &b }]).unwrap();
        let rows: Vec<&str> = t.lines().filter(|l| l.starts_with("ybar_D")).collect();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].contains("0.0100***") && rows[0].contains("0.0100**"));
        assert!(t.contains("fixed effects") && t.contains("eu-s-z-y"));
        assert!(t.contains("clustering variable"));
        assert!(!t.contains("idstat"));
    }

    #[test]
    fn iv_footer() {
        let mut r = result("iv-t23", &["ybar_D", "ybar_U"], &[0.2, 0.2]);
        r.method = Method::Tsls;
        r.diagnostics = Some(IvDiagnostics {
            instruments: vec!["z2bar_D".into(), "z2bar_U".into(), "z3bar_D".into(), "z3bar_U".into()],
            first_stage_f: vec![30.0, 40.0],
            cragg_donald: 12.0,
            hansen_j: 1.5,
            hansen_p: 0.47,
            j_dof: 2,
            just_identified: false,
            weak: false,
        });
        let t = report_ladder(&[Column { title: "iv", result: &r }]).unwrap();
        for row in ["idstat", "idp", "widstat", "j ", "jp", "instruments"] {
            assert!(t.lines().any(|l| l.starts_with(row)), "{row} missing:\n{t}");
        }
        assert!(t.contains("t-2, t-3"));
        assert!(t.contains("30.000"));
    }

    #[test]
    fn collisions_rejected() {
        let a = result("x", &["ybar_D", "ybar_D"], &[0.1, 0.1]);
        assert!(report_ladder(&[Column { title: "a", result: &a }]).is_err());
        let b = result("x", &["ybar_D"], &[0.1]);
        assert!(report_ladder(&[Column { title: "a", result: &b }, Column { title: "a", result: &b }]).is_err());
        assert!(report_ladder(&[]).is_err());
    }

    #[test]
    fn controls_folded_into_rows() {
        let a = result("s1-col2", &["ybar_D", "workers", "xbar_D_workers"], &[0.1, 0.1, 0.1]);
        let t = report_ladder(&[Column { title: "a", result: &a }]).unwrap();
        assert!(!t.contains("xbar_D_workers"));
        assert!(t.lines().any(|l| l.starts_with("Peers' characteristics") && l.ends_with("Yes")));
    }

    #[test]
    fn results_csv_round_trips_floats() {
        let a = result("s1-col5", &["ybar_D"], &[0.004]);
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &[&a]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let line = s.lines().nth(1).unwrap();
        assert_eq!(line, "s1-col5,ybar_D,0.01,0.005,2.0,0.004,***,1234,100,id-y / eu-s-z-y,id");
    }
}
