//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use netspill_core::dgp::DgpConfig;
use netspill_core::hdfe::{DemeanOptions, FactorKind};
use netspill_core::pipeline::EstimateOptions;
use netspill_core::treatment::{Spec, TreatmentOptions, Weighting};
use netspill_core::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding edges.csv, attributes.csv and imports.csv.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub window: Option<(i32, i32)>,
    pub specs: Vec<String>,
    pub factors: Option<Vec<String>>,
    pub cluster: Option<String>,
    pub weighting: Option<Weighting>,
    /// Second-order peers must not be first-order peers on either side.
    pub strict: Option<bool>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    /// "f64" (default) or "f32".
    pub precision: Option<String>,
    pub min_value: Option<f64>,
    pub max_gap: Option<usize>,
    pub reps: Option<usize>,
    /// Field overrides on top of the preset.
    pub dgp: Option<toml::Table>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn dgp(&self) -> Result<DgpConfig> {
        let base = DgpConfig::preset(self.preset.as_deref().unwrap_or("valid-iv"))?;
        let Some(over) = &self.dgp else {
            return Ok(base);
        };
        let mut v = serde_json::to_value(&base)?;
        let over = serde_json::to_value(over)?;
        if let (Some(m), Some(o)) = (v.as_object_mut(), over.as_object()) {
            for (k, x) in o {
                m.insert(k.clone(), x.clone());
            }
        }
        let cfg: DgpConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("[dgp] table: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn specs(&self) -> Result<Vec<Spec>> {
        if self.specs.is_empty() {
            return Err(Error::Config("no specification given (use --spec)".into()));
        }
        self.specs.iter().map(|s| Spec::parse(s)).collect()
    }

    pub fn estimate_options(&self) -> Result<EstimateOptions> {
        let factor = |s: &str| {
            FactorKind::parse(s).ok_or_else(|| {
                let known: Vec<&str> = FactorKind::ALL.iter().map(|k| k.label()).collect();
                Error::Config(format!("unknown factor {s:?} (expected one of {})", known.join(", ")))
            })
        };
        let factors = match &self.factors {
            Some(f) => Some(f.iter().map(|s| factor(s)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        let cluster = self.cluster.as_deref().map(factor).transpose()?;
        let mut treatment = TreatmentOptions::default();
        if let Some(w) = self.weighting {
            treatment.weighting = w;
        }
        if let Some(s) = self.strict {
            treatment.strict = s;
        }
        let demean = if self.tol.is_some() || self.max_iter.is_some() {
            let mut d = if self.f32()? {
                DemeanOptions::for_scalar::<f32>()
            } else {
                DemeanOptions::for_scalar::<f64>()
            };
            if let Some(t) = self.tol {
                d.tol = t;
            }
            if let Some(m) = self.max_iter {
                d.max_iter = m;
            }
            Some(d)
        } else {
            None
        };
        Ok(EstimateOptions {
            window: self.window,
            factors,
            cluster,
            treatment,
            demean,
            recursive_singletons: true,
        })
    }

    pub fn f32(&self) -> Result<bool> {
        match self.precision.as_deref() {
            None | Some("f64") => Ok(false),
            Some("f32") => Ok(true),
            Some(p) => Err(Error::Config(format!("unknown precision {p:?} (expected f64 or f32)"))),
        }
    }

    /// Every specification against the factor and cluster choices, before
    /// any data is touched.
    pub fn check(&self) -> Result<()> {
        let opts = self.estimate_options()?;
        for s in self.specs()? {
            opts.resolved(&s)?;
        }
        self.f32()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_with_dgp_overrides() {
        let c: RunConfig = toml::from_str(
            r#"
            preset = "violated-iv"
            specs = ["iv-t23"]
            window = [2011, 2014]
            [dgp]
            n = 500
            grid = 4
            "#,
        )
        .unwrap();
        let d = c.dgp().unwrap();
        assert_eq!(d.n, 500);
        assert_eq!(d.grid, 4);
        assert!(matches!(d.u_process, netspill_core::dgp::UProcess::Ar1 { .. }));
        assert_eq!(c.window, Some((2011, 2014)));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sped = 1").is_err());
        let c: RunConfig = toml::from_str("[dgp]\nbogus = 1").unwrap();
        assert!(c.dgp().is_err());
    }

    #[test]
    fn pooled_with_firm_year_is_config_error() {
        let c = RunConfig {
            specs: vec!["pooled".into()],
            factors: Some(vec!["id-y".into(), "s-z-y".into()]),
            ..Default::default()
        };
        assert!(matches!(c.check(), Err(Error::Config(_))));
    }
}
