//! Structural simulator: a spatial production network with homophily and
//! linear-probability import entry driven by lagged peer behaviour,
//! contextual effects and persistent unobservables.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{FirmId, IdMap, ProductionNetwork};
use crate::panel::{AttributeTable, FirmYearAttributes, ImportHistory};

/// Sector codes handed out to synthetic firms; wholesale/retail first.
pub const SECTORS: [&str; 12] = ["46", "25", "10", "47", "28", "45", "20", "62", "41", "49", "13", "70"];

/// Reporting threshold used for synthetic link values.
pub const MIN_LINK_VALUE: f64 = 3005.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UProcess {
    Iid,
    /// `u_t = s (e_t + θ e_{t-1})`, scaled to marginal sd `sigma_u`.
    Ma1 { theta: f64 },
    /// `u_t = ρ u_{t-1} + sqrt(1-ρ²) sigma_u e_t`.
    Ar1 { rho: f64 },
}

impl UProcess {
    /// Autocovariance at `lag` for unit marginal variance.
    pub fn autocorrelation(self, lag: usize) -> f64 {
        match (self, lag) {
            (_, 0) => 1.0,
            (UProcess::Iid, _) => 0.0,
            (UProcess::Ma1 { theta }, 1) => theta / (1.0 + theta * theta),
            (UProcess::Ma1 { .. }, _) => 0.0,
            (UProcess::Ar1 { rho }, l) => rho.powi(l as i32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    ValidIv,
    ViolatedIv,
    NoContextual,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::ValidIv, Regime::ViolatedIv, Regime::NoContextual];

    pub fn label(self) -> &'static str {
        match self {
            Regime::ValidIv => "valid-iv",
            Regime::ViolatedIv => "violated-iv",
            Regime::NoContextual => "no-contextual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.label() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n: usize,
    /// First emitted year; statuses of this year define the baseline.
    pub first_year: i32,
    /// Emitted years after the baseline.
    pub years: usize,
    /// Simulated but unreported years before the baseline.
    pub burn_in: usize,
    /// Side of the square zip grid.
    pub grid: usize,
    pub industries: usize,
    /// Mean suppliers among firms with at least one supplier.
    pub mean_in_degree: f64,
    /// Mean customers among firms with at least one customer.
    pub mean_out_degree: f64,
    /// Distance decay λ in grid cells; infinite turns spatial homophily off.
    pub distance_decay: f64,
    /// Extra acceptance weight for same-industry partners.
    pub industry_boost: f64,
    pub beta_d: f64,
    pub beta_u: f64,
    pub gamma: f64,
    pub delta_d: f64,
    pub delta_u: f64,
    pub zeta: f64,
    pub zeta_d: f64,
    pub zeta_u: f64,
    pub sigma_mu: f64,
    pub sigma_eta: f64,
    /// Innovation sd of the firm-size noise.
    pub sigma_eps: f64,
    /// Persistence of the firm-size noise.
    pub rho_x: f64,
    pub sigma_u: f64,
    pub u_process: UProcess,
    pub base_start_prob: f64,
    /// Relative rise of the base start probability across the grid's
    /// columns, eastwards for EU and westwards for non-EU imports.
    pub origin_gradient: f64,
    /// Relative rise of the base start probability across sector codes,
    /// in opposite directions for the two origins.
    pub sector_affinity: f64,
    pub initial_import_share: f64,
    /// Share of links missing from the edge file in one year.
    pub gap_share: f64,
    /// Spurious one- or two-year links, relative to the link count.
    pub transient_share: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 20_000,
            first_year: 2010,
            years: 5,
            burn_in: 2,
            grid: 10,
            industries: 8,
            mean_in_degree: 4.0,
            mean_out_degree: 4.0,
            distance_decay: 2.0,
            industry_boost: 1.0,
            beta_d: 0.05,
            beta_u: 0.10,
            gamma: 0.0,
            delta_d: 0.0,
            delta_u: 0.0,
            zeta: 1.0,
            zeta_d: 3.0,
            zeta_u: 3.0,
            sigma_mu: 0.01,
            sigma_eta: 0.01,
            sigma_eps: 0.1,
            rho_x: 0.7,
            sigma_u: 0.03,
            u_process: UProcess::Ma1 { theta: 0.8 },
            base_start_prob: 0.12,
            origin_gradient: 0.0,
            sector_affinity: 0.0,
            initial_import_share: 0.02,
            gap_share: 0.05,
            transient_share: 0.05,
        }
    }
}

impl DgpConfig {
    pub const PRESETS: [&'static str; 4] = ["calibration", "valid-iv", "violated-iv", "no-contextual"];

    /// Named starting configuration.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "calibration" => Self {
                beta_d: 0.0,
                beta_u: 0.0,
                gamma: 0.0,
                delta_d: 0.0,
                delta_u: 0.0,
                zeta: 0.0,
                zeta_d: 0.0,
                zeta_u: 0.0,
                base_start_prob: 0.036,
                u_process: UProcess::Iid,
                mean_in_degree: 6.9,
                mean_out_degree: 6.5,
                initial_import_share: 0.1,
                ..base
            },
            "valid-iv" => base.regime(Regime::ValidIv),
            "violated-iv" => base.regime(Regime::ViolatedIv),
            "no-contextual" => base.regime(Regime::NoContextual),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    Self::PRESETS.join(", ")
                )))
            }
        })
    }

    /// Adjust the unobservables for an identification regime.
    pub fn regime(&self, r: Regime) -> Self {
        let mut c = self.clone();
        let d = Self::default();
        let ensure = |v: f64, fallback: f64| if v == 0.0 { fallback } else { v };
        match r {
            Regime::ValidIv => {
                let theta = match c.u_process {
                    UProcess::Ma1 { theta } if theta != 0.0 => theta,
                    _ => 0.8,
                };
                c.u_process = UProcess::Ma1 { theta };
                c.zeta = ensure(c.zeta, d.zeta);
                c.zeta_d = ensure(c.zeta_d, d.zeta_d);
                c.zeta_u = ensure(c.zeta_u, d.zeta_u);
            }
            Regime::ViolatedIv => {
                c.u_process = UProcess::Ar1 { rho: 0.8 };
                c.zeta = ensure(c.zeta, d.zeta);
                c.zeta_d = ensure(c.zeta_d, d.zeta_d);
                c.zeta_u = ensure(c.zeta_u, d.zeta_u);
            }
            Regime::NoContextual => {
                c.zeta = 0.0;
                c.zeta_d = 0.0;
                c.zeta_u = 0.0;
            }
        }
        c
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.years as i32
    }

    /// Default estimation window: every emitted year after the baseline.
    pub fn window(&self) -> (i32, i32) {
        (self.first_year + 1, self.last_year())
    }

    fn periods(&self) -> usize {
        self.burn_in + 1 + self.years
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dgp(m));
        if self.n < 10 {
            return bad(format!("n = {} is below the minimum of 10 firms", self.n));
        }
        if self.years < 1 {
            return bad("at least one year after the baseline is required".into());
        }
        if self.grid == 0 || self.industries == 0 {
            return bad("grid and industries must be positive".into());
        }
        for (name, p) in [
            ("base_start_prob", self.base_start_prob),
            ("initial_import_share", self.initial_import_share),
            ("gap_share", self.gap_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.origin_gradient >= 0.0 && self.sector_affinity >= 0.0) {
            return bad("origin_gradient and sector_affinity must be non-negative".into());
        }
        if !(self.transient_share >= 0.0) {
            return bad("transient_share must be non-negative".into());
        }
        for (name, v) in [("sigma_mu", self.sigma_mu), ("sigma_eta", self.sigma_eta), ("sigma_u", self.sigma_u), ("sigma_eps", self.sigma_eps)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative scale"));
            }
        }
        if !(self.distance_decay > 0.0) {
            return bad("distance_decay must be positive (use inf to disable)".into());
        }
        if !(self.industry_boost >= 0.0) {
            return bad("industry_boost must be non-negative".into());
        }
        match self.u_process {
            UProcess::Ar1 { rho } if !(rho.abs() < 1.0) => return bad(format!("AR(1) rho = {rho} is not stationary")),
            _ => {}
        }
        if !(self.rho_x.abs() < 1.0) {
            return bad("rho_x must lie in (-1, 1)".into());
        }
        let (m_in, m_out) = (self.mean_in_degree, self.mean_out_degree);
        if !(m_in >= 1.0 && m_out >= 1.0) {
            return bad(format!("degree targets must be at least 1 (got {m_in}, {m_out})"));
        }
        let targets = self.n as f64 * m_in.min(m_out) / m_in.max(m_out);
        if m_in.max(m_out) > targets - 1.0 {
            return bad(format!(
                "degree targets {m_in}/{m_out} need more distinct partners than the {targets:.0} available"
            ));
        }
        Ok(())
    }

    pub fn write_truth_csv<W: Write>(&self, w: W, seed: u64) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["parameter", "value"]).map_err(std::io::Error::from)?;
        let (kind, persistence) = match self.u_process {
            UProcess::Iid => ("iid", 0.0),
            UProcess::Ma1 { theta } => ("ma1", theta),
            UProcess::Ar1 { rho } => ("ar1", rho),
        };
        let rows: Vec<(&str, String)> = vec![
            ("seed", seed.to_string()),
            ("n", self.n.to_string()),
            ("first_year", self.first_year.to_string()),
            ("years", self.years.to_string()),
            ("beta_D", self.beta_d.to_string()),
            ("beta_U", self.beta_u.to_string()),
            ("gamma", self.gamma.to_string()),
            ("delta_D", self.delta_d.to_string()),
            ("delta_U", self.delta_u.to_string()),
            ("zeta", self.zeta.to_string()),
            ("zeta_D", self.zeta_d.to_string()),
            ("zeta_U", self.zeta_u.to_string()),
            ("sigma_u", self.sigma_u.to_string()),
            ("u_process", kind.to_string()),
            ("u_persistence", persistence.to_string()),
            ("sigma_mu", self.sigma_mu.to_string()),
            ("sigma_eta", self.sigma_eta.to_string()),
            ("base_start_prob", self.base_start_prob.to_string()),
        ];
        for (k, v) in rows {
            out.write_record([k, v.as_str()]).map_err(std::io::Error::from)?;
        }
        out.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Counter-based random streams

const TAG_LAYOUT: u64 = 1;
const TAG_ROLE: u64 = 2;
const TAG_LINKS: u64 = 3;
const TAG_FIRM_YEAR: u64 = 4;
const TAG_CELL_YEAR: u64 = 5;
const TAG_EMIT: u64 = 6;
const TAG_TRANSIENT: u64 = 7;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for the stream `(seed, tag, a, b)`.
pub fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ splitmix(tag)) ^ a) ^ b.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, a, b))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------------------
// Firm layout and network

/// Location, sector and fixed size traits of every synthetic firm.
#[derive(Debug, Clone, PartialEq)]
pub struct FirmLayout {
    pub grid: usize,
    pub industries: usize,
    pub cell: Vec<u32>,
    pub industry: Vec<u32>,
    pub ln_workers: Vec<f64>,
    pub ln_productivity: Vec<f64>,
    pub ln_salary: Vec<f64>,
    pub sales_to_firms_share: Vec<f64>,
    pub interm_share: Vec<f64>,
}

impl FirmLayout {
    pub fn zip_label(&self, cell: u32) -> String {
        let (r, c) = (cell as usize / self.grid, cell as usize % self.grid);
        let half = self.grid.div_ceil(2);
        let province = (r / 2) * half + c / 2 + 1;
        format!("{province:02}{cell:03}")
    }

    pub fn industry_label(&self, k: u32) -> String {
        SECTORS
            .get(k as usize)
            .map_or_else(|| format!("{}", 71 + k as usize - SECTORS.len()), |s| (*s).to_owned())
    }

    /// Industry × zip cell index used for the shared shocks.
    pub fn sector_cell(&self, i: usize) -> usize {
        self.industry[i] as usize * self.grid * self.grid + self.cell[i] as usize
    }
}

pub fn firm_layout(cfg: &DgpConfig, seed: u64) -> FirmLayout {
    let cells = (cfg.grid * cfg.grid) as u32;
    let draws: Vec<(u32, u32, [f64; 5])> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, TAG_LAYOUT, i as u64, 0);
            let cell = rng.random_range(0..cells);
            let ind = rng.random_range(0..cfg.industries as u32);
            let t = [
                2.0 + normal(&mut rng),
                11.0 + 0.5 * normal(&mut rng),
                10.3 + 0.3 * normal(&mut rng),
                rng.random_range(0.3..0.9),
                rng.random_range(0.3..0.7),
            ];
            (cell, ind, t)
        })
        .collect();
    FirmLayout {
        grid: cfg.grid,
        industries: cfg.industries,
        cell: draws.iter().map(|d| d.0).collect(),
        industry: draws.iter().map(|d| d.1).collect(),
        ln_workers: draws.iter().map(|d| d.2[0]).collect(),
        ln_productivity: draws.iter().map(|d| d.2[1]).collect(),
        ln_salary: draws.iter().map(|d| d.2[2]).collect(),
        sales_to_firms_share: draws.iter().map(|d| d.2[3]).collect(),
        interm_share: draws.iter().map(|d| d.2[4]).collect(),
    }
}

fn cell_distance(grid: usize, a: usize, b: usize) -> f64 {
    let (ra, ca) = ((a / grid) as f64, (a % grid) as f64);
    let (rb, cb) = ((b / grid) as f64, (b % grid) as f64);
    ((ra - rb).powi(2) + (ca - cb).powi(2)).sqrt()
}

/// Directed network with spatial and industry homophily.
///
/// When the out-degree target is the smaller one every firm sells and a
/// share `m_out / m_in` of firms buys; each seller draws `1 + Poisson(m_out - 1)`
/// distinct customers. The opposite case is the mirror image. A partner is
/// found by picking a zip cell with weight `exp(-distance / λ)` times the
/// number of eligible firms there, a firm uniformly within it, and accepting
/// it with probability `(1 + boost · same industry) / (1 + boost)`.
pub fn gen_network(cfg: &DgpConfig, seed: u64) -> Result<ProductionNetwork> {
    cfg.validate()?;
    let layout = firm_layout(cfg, seed);
    gen_network_with(cfg, &layout, seed)
}

pub fn gen_network_with(cfg: &DgpConfig, layout: &FirmLayout, seed: u64) -> Result<ProductionNetwork> {
    cfg.validate()?;
    let n = cfg.n;
    let (m_in, m_out) = (cfg.mean_in_degree, cfg.mean_out_degree);
    // choosers pick partners among targets; sellers choose when m_out <= m_in
    let sellers_choose = m_out <= m_in;
    let (m_choose, share) = if sellers_choose { (m_out, m_out / m_in) } else { (m_in, m_in / m_out) };
    let is_target: Vec<bool> = (0..n)
        .map(|i| share >= 1.0 || stream(seed, TAG_ROLE, i as u64, 0).random::<f64>() < share)
        .collect();
    let n_cells = cfg.grid * cfg.grid;
    let mut by_cell: Vec<Vec<u32>> = vec![Vec::new(); n_cells];
    for i in 0..n {
        if is_target[i] {
            by_cell[layout.cell[i] as usize].push(i as u32);
        }
    }
    let n_targets: usize = by_cell.iter().map(Vec::len).sum();
    if (m_choose.ceil() as usize) + 1 > n_targets {
        return Err(Error::Dgp(format!("only {n_targets} eligible partners for mean degree {m_choose}")));
    }
    // cumulative cell weights per origin cell
    let cum: Vec<Vec<f64>> = (0..n_cells)
        .map(|a| {
            let mut acc = 0.0;
            (0..n_cells)
                .map(|b| {
                    let d = cell_distance(cfg.grid, a, b);
                    let w = if cfg.distance_decay.is_infinite() { 1.0 } else { (-d / cfg.distance_decay).exp() };
                    acc += w * by_cell[b].len() as f64;
                    acc
                })
                .collect()
        })
        .collect();
    let mut occupied = vec![false; n_cells];
    for &c in &layout.cell {
        occupied[c as usize] = true;
    }
    for a in 0..n_cells {
        if occupied[a] && !(cum[a][n_cells - 1] > 0.0) {
            return Err(Error::Dgp(format!(
                "zip cell {a} has no reachable partners; raise distance_decay or n"
            )));
        }
    }
    let extra = Poisson::new(m_choose - 1.0).ok();
    let boost = cfg.industry_boost;
    let links: Vec<Vec<(u32, u32)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, TAG_LINKS, i as u64, 0);
            let k = 1 + extra.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            let row = &cum[layout.cell[i] as usize];
            let total = row[n_cells - 1];
            let mut chosen: Vec<u32> = Vec::with_capacity(k);
            let mut attempts = 0;
            while chosen.len() < k && attempts < 200 * k + 1000 {
                attempts += 1;
                let x = rng.random::<f64>() * total;
                let cell = row.partition_point(|&c| c <= x).min(n_cells - 1);
                let pool = &by_cell[cell];
                if pool.is_empty() {
                    continue;
                }
                let j = pool[rng.random_range(0..pool.len())];
                if j as usize == i || chosen.contains(&j) {
                    continue;
                }
                let same = layout.industry[i] == layout.industry[j as usize];
                let accept = (1.0 + if same { boost } else { 0.0 }) / (1.0 + boost);
                if accept < 1.0 && rng.random::<f64>() >= accept {
                    continue;
                }
                chosen.push(j);
            }
            chosen
                .into_iter()
                .map(|j| if sellers_choose { (i as u32, j) } else { (j, i as u32) })
                .collect()
        })
        .collect();
    ProductionNetwork::from_edges(
        n,
        links
            .into_iter()
            .flatten()
            .map(|(s, c)| (FirmId(s), FirmId(c), Some(link_value(seed, s, c)))),
    )
}

/// Fixed annual value of a link, never below the reporting threshold.
fn link_value(seed: u64, s: u32, c: u32) -> f64 {
    let mut rng = stream(seed, TAG_EMIT, s as u64, c as u64);
    let v = MIN_LINK_VALUE + (9.0 + 1.5 * normal(&mut rng)).exp();
    (v * 100.0).round() / 100.0
}

// ---------------------------------------------------------------------------
// Panel simulation

/// Right-hand side of the start equation for one firm, origin and period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexTerms {
    /// Origin-specific base probability at the firm's location and sector.
    pub base: f64,
    pub x: f64,
    pub xbar_d: f64,
    pub xbar_u: f64,
    pub ybar_d: f64,
    pub ybar_u: f64,
    pub u: f64,
    pub ubar_d: f64,
    pub ubar_u: f64,
    pub mu: f64,
    pub eta: f64,
}

/// Latent start index (before clamping to [0, 1]).
#[inline]
pub fn latent_index(cfg: &DgpConfig, t: &IndexTerms) -> f64 {
    t.base
        + cfg.gamma * t.x
        + cfg.delta_d * t.xbar_d
        + cfg.delta_u * t.xbar_u
        + cfg.beta_d * t.ybar_d
        + cfg.beta_u * t.ybar_u
        + cfg.zeta * t.u
        + cfg.zeta_d * t.ubar_d
        + cfg.zeta_u * t.ubar_u
        + t.mu
        + t.eta
}

/// Every random draw of a simulation, kept so the statuses can be audited.
/// Arrays are period-major; origin-specific arrays are `[period][origin][firm]`.
#[derive(Debug, Clone)]
pub struct Draws {
    pub periods: usize,
    pub n: usize,
    pub cells: usize,
    pub u: Vec<f64>,
    pub uniform: Vec<f64>,
    /// Clamped start probability (NaN in the initial period and once importing).
    pub prob: Vec<f64>,
    pub mu: Vec<f64>,
    /// `[period][origin][sector cell]`.
    pub eta: Vec<f64>,
    /// Standardized firm size, `[period][firm]`.
    pub x: Vec<f64>,
}

impl Draws {
    #[inline]
    pub fn at(&self, s: usize, c: usize, i: usize) -> usize {
        (s * 2 + c) * self.n + i
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: DgpConfig,
    pub seed: u64,
    pub layout: FirmLayout,
    pub network: ProductionNetwork,
    /// Statuses for every simulated period (burn-in included), `[period][origin][firm]`.
    pub status: Vec<bool>,
    pub draws: Draws,
    /// Share of at-risk draws whose index left [0, 1].
    pub clamp_rate: f64,
}

fn peer_mean(peers: &[FirmId], f: impl Fn(usize) -> f64) -> f64 {
    if peers.is_empty() {
        0.0
    } else {
        peers.iter().map(|j| f(j.index())).sum::<f64>() / peers.len() as f64
    }
}

/// Layout, network and statuses in one go.
pub fn simulate(cfg: &DgpConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let layout = firm_layout(cfg, seed);
    let net = gen_network_with(cfg, &layout, seed)?;
    simulate_panel(net, layout, cfg, seed)
}

pub fn simulate_panel(net: ProductionNetwork, layout: FirmLayout, cfg: &DgpConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if net.n() != cfg.n || layout.cell.len() != cfg.n {
        return Err(Error::Dgp("network, layout and config disagree on n".into()));
    }
    let n = cfg.n;
    let periods = cfg.periods();
    let cells = cfg.industries * cfg.grid * cfg.grid;
    let mut d = Draws {
        periods,
        n,
        cells,
        u: vec![0.0; periods * 2 * n],
        uniform: vec![0.0; periods * 2 * n],
        prob: vec![f64::NAN; periods * 2 * n],
        mu: vec![0.0; periods * n],
        eta: vec![0.0; periods * 2 * cells],
        x: vec![0.0; periods * n],
    };
    let mut status = vec![false; periods * 2 * n];
    // size noise and innovations carried between periods
    let mut nu = vec![0.0; n];
    let mut e_prev = vec![0.0; 2 * n];
    let sd_nu0 = cfg.sigma_eps / (1.0 - cfg.rho_x * cfg.rho_x).sqrt();
    let mut clamped = 0usize;
    let mut at_risk = 0usize;

    for s in 0..periods {
        for c in 0..2 {
            for h in 0..cells {
                let mut rng = stream(seed, TAG_CELL_YEAR, (h * 2 + c) as u64, s as u64);
                d.eta[(s * 2 + c) * cells + h] = cfg.sigma_eta * normal(&mut rng);
            }
        }
        // per-firm draws: e[2], uniform[2], mu, size innovation
        let fd: Vec<[f64; 6]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(seed, TAG_FIRM_YEAR, i as u64, s as u64);
                [
                    normal(&mut rng),
                    normal(&mut rng),
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    cfg.sigma_mu * normal(&mut rng),
                    normal(&mut rng),
                ]
            })
            .collect();
        for i in 0..n {
            nu[i] = if s == 0 { sd_nu0 * fd[i][5] } else { cfg.rho_x * nu[i] + cfg.sigma_eps * fd[i][5] };
            d.x[s * n + i] = layout.ln_workers[i] - 2.0 + nu[i];
            d.mu[s * n + i] = fd[i][4];
            for c in 0..2 {
                let e = fd[i][c];
                let k = d.at(s, c, i);
                d.uniform[k] = fd[i][2 + c];
                d.u[k] = match cfg.u_process {
                    UProcess::Iid => cfg.sigma_u * e,
                    UProcess::Ma1 { theta } => {
                        let scale = cfg.sigma_u / (1.0 + theta * theta).sqrt();
                        let prev = if s == 0 { normal(&mut stream(seed, TAG_FIRM_YEAR, i as u64, u64::MAX - c as u64)) } else { e_prev[c * n + i] };
                        scale * (e + theta * prev)
                    }
                    UProcess::Ar1 { rho } => {
                        if s == 0 {
                            cfg.sigma_u * e
                        } else {
                            rho * d.u[d.at(s - 1, c, i)] + cfg.sigma_u * (1.0 - rho * rho).sqrt() * e
                        }
                    }
                };
                e_prev[c * n + i] = e;
            }
        }
        if s == 0 {
            for c in 0..2 {
                for i in 0..n {
                    let k = d.at(0, c, i);
                    status[k] = d.uniform[k] < cfg.initial_import_share;
                }
            }
            continue;
        }
        let dref = &d;
        let sref = &status;
        let updates: Vec<[(f64, bool, bool); 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut out = [(f64::NAN, false, false); 2];
                for (c, slot) in out.iter_mut().enumerate() {
                    let prev = sref[dref.at(s - 1, c, i)];
                    if prev {
                        *slot = (f64::NAN, true, false);
                        continue;
                    }
                    let terms = index_terms(cfg, &net, &layout, dref, sref, s, c, i);
                    let idx = latent_index(cfg, &terms);
                    let p = idx.clamp(0.0, 1.0);
                    let start = dref.uniform[dref.at(s, c, i)] < p;
                    *slot = (p, start, !(0.0..=1.0).contains(&idx));
                }
                out
            })
            .collect();
        for (i, u) in updates.iter().enumerate() {
            for (c, &(p, imp, clamp)) in u.iter().enumerate() {
                let k = d.at(s, c, i);
                status[k] = imp;
                d.prob[k] = p;
                if !p.is_nan() {
                    at_risk += 1;
                    clamped += usize::from(clamp);
                }
            }
        }
    }
    let clamp_rate = if at_risk > 0 { clamped as f64 / at_risk as f64 } else { 0.0 };
    if clamp_rate > 0.2 {
        log::warn!("{:.1}% of start probabilities were clamped to [0, 1]; the parameterization is too extreme", 100.0 * clamp_rate);
    }
    Ok(SyntheticDataset {
        config: cfg.clone(),
        seed,
        layout,
        network: net,
        status,
        draws: d,
        clamp_rate,
    })
}

/// Base start probability of firm `i` for origin `c` (0 = EU). The EU
/// rate rises towards the east and the non-EU rate towards the west; both
/// only ever raise the base. The tilts are constant within an origin, sector
/// and zip, so the focal firm's own value is absorbed by origin-sector-zip-year
/// effects while its peers' values still move their import shares.
pub fn base_prob(cfg: &DgpConfig, layout: &FirmLayout, c: usize, i: usize) -> f64 {
    let unit = |k: usize, m: usize| if m > 1 { k as f64 / (m - 1) as f64 } else { 0.5 };
    let geo = unit(layout.cell[i] as usize % layout.grid, layout.grid);
    let sec = unit(layout.industry[i] as usize, layout.industries);
    let (geo, sec) = if c == 0 { (geo, sec) } else { (1.0 - geo, 1.0 - sec) };
    cfg.base_start_prob * (1.0 + cfg.origin_gradient * geo + cfg.sector_affinity * sec)
}

fn index_terms(
    cfg: &DgpConfig,
    net: &ProductionNetwork,
    layout: &FirmLayout,
    d: &Draws,
    status: &[bool],
    s: usize,
    c: usize,
    i: usize,
) -> IndexTerms {
    let f = FirmId(i as u32);
    let (sup, cus) = (net.suppliers(f), net.customers(f));
    let prev = s - 1;
    let y = |j: usize| f64::from(u8::from(status[d.at(prev, c, j)]));
    let u = |j: usize| d.u[d.at(prev, c, j)];
    let x = |j: usize| d.x[prev * d.n + j];
    IndexTerms {
        base: base_prob(cfg, layout, c, i),
        x: d.x[s * d.n + i],
        xbar_d: peer_mean(sup, x),
        xbar_u: peer_mean(cus, x),
        ybar_d: peer_mean(sup, y),
        ybar_u: peer_mean(cus, y),
        u: d.u[d.at(s, c, i)],
        ubar_d: peer_mean(sup, u),
        ubar_u: peer_mean(cus, u),
        mu: d.mu[s * d.n + i],
        eta: d.eta[(s * 2 + c) * d.cells + layout.sector_cell(i)],
    }
}

/// Outcome of re-deriving every status from the stored draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditReport {
    pub checked: usize,
    pub mismatched: usize,
}

impl SyntheticDataset {
    pub fn periods(&self) -> usize {
        self.draws.periods
    }

    /// Calendar year of simulated period `s`.
    pub fn year_of(&self, s: usize) -> i32 {
        self.config.first_year - self.config.burn_in as i32 + s as i32
    }

    pub fn status(&self, s: usize, origin: usize, i: usize) -> bool {
        self.status[self.draws.at(s, origin, i)]
    }

    /// Recompute each start probability from the retained draws and check
    /// that it reproduces every status bit.
    pub fn audit(&self) -> AuditReport {
        let d = &self.draws;
        let mut checked = 0;
        let mut mismatched = 0;
        for s in 0..d.periods {
            for c in 0..2 {
                for i in 0..d.n {
                    let k = d.at(s, c, i);
                    checked += 1;
                    let expect = if s == 0 {
                        d.uniform[k] < self.config.initial_import_share
                    } else if self.status[d.at(s - 1, c, i)] {
                        true
                    } else {
                        let t = index_terms(&self.config, &self.network, &self.layout, d, &self.status, s, c, i);
                        let p = latent_index(&self.config, &t).clamp(0.0, 1.0);
                        if p.to_bits() != d.prob[k].to_bits() {
                            mismatched += 1;
                            continue;
                        }
                        d.uniform[k] < p
                    };
                    if expect != self.status[k] {
                        mismatched += 1;
                    }
                }
            }
        }
        AuditReport { checked, mismatched }
    }

    /// Emitted import history (baseline onward).
    pub fn history(&self) -> ImportHistory {
        let cfg = &self.config;
        let years = cfg.years + 1;
        let n = cfg.n;
        let mut eu = vec![false; n * years];
        let mut non_eu = vec![false; n * years];
        for i in 0..n {
            for k in 0..years {
                let s = cfg.burn_in + k;
                eu[i * years + k] = self.status(s, 0, i);
                non_eu[i * years + k] = self.status(s, 1, i);
            }
        }
        ImportHistory::from_dense(cfg.first_year, years, n, eu, non_eu)
    }

    /// Firm-year attribute records for the emitted years.
    pub fn attribute_records(&self) -> Vec<FirmYearAttributes> {
        let cfg = &self.config;
        let l = &self.layout;
        let mut out = Vec::with_capacity(cfg.n * (cfg.years + 1));
        let round2 = |v: f64| (v * 100.0).round() / 100.0;
        for i in 0..cfg.n {
            let zip = l.zip_label(l.cell[i]);
            let industry = l.industry_label(l.industry[i]);
            for k in 0..=cfg.years {
                let s = cfg.burn_in + k;
                let ln_w = self.draws.x[s * cfg.n + i] + 2.0;
                let size = ln_w.exp();
                let workers = size.round();
                let sales = round2((ln_w + l.ln_productivity[i]).exp());
                out.push(FirmYearAttributes {
                    firm: FirmId(i as u32),
                    year: cfg.first_year + k as i32,
                    workers,
                    labor_cost: round2(workers * l.ln_salary[i].exp()),
                    total_sales: sales,
                    sales_to_firms: round2(sales * l.sales_to_firms_share[i]),
                    interm_cost: round2(sales * l.interm_share[i]),
                    zip: zip.clone(),
                    industry: industry.clone(),
                });
            }
        }
        out
    }

    pub fn attributes(&self) -> Result<AttributeTable> {
        AttributeTable::from_records(
            &self.attribute_records(),
            self.config.n,
            (self.config.first_year, self.config.last_year()),
            &self.network,
        )
    }

    pub fn ids(&self) -> IdMap {
        let mut ids = IdMap::new();
        for i in 0..self.config.n {
            ids.intern(&firm_name(i));
        }
        ids
    }

    /// Observed yearly start rate per origin over the emitted years after
    /// the baseline: starts divided by firms not yet importing.
    pub fn start_rate(&self) -> f64 {
        let cfg = &self.config;
        let (mut starts, mut risk) = (0usize, 0usize);
        for k in 1..=cfg.years {
            let s = cfg.burn_in + k;
            for c in 0..2 {
                for i in 0..cfg.n {
                    if !self.status(s - 1, c, i) {
                        risk += 1;
                        starts += usize::from(self.status(s, c, i));
                    }
                }
            }
        }
        if risk == 0 {
            0.0
        } else {
            starts as f64 / risk as f64
        }
    }

    /// Edge CSV: each link appears every emitted year except, for a
    /// `gap_share` of links, one year; spurious links last one or two years.
    pub fn write_edges_csv<W: Write>(&self, w: W) -> Result<()> {
        let cfg = &self.config;
        let years = cfg.years + 1;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["supplier_id", "customer_id", "year", "value"]).map_err(std::io::Error::from)?;
        let mut rows: Vec<(i32, u32, u32, f64)> = Vec::new();
        for (s, c, v) in self.network.edges() {
            let mut rng = stream(self.seed, TAG_EMIT, s.0 as u64 ^ 0xFFFF_FFFF_0000_0000, c.0 as u64);
            let gap = if years > 2 && rng.random::<f64>() < cfg.gap_share {
                Some(rng.random_range(0..years))
            } else {
                None
            };
            for k in 0..years {
                if Some(k) != gap {
                    rows.push((cfg.first_year + k as i32, s.0, c.0, v.unwrap_or(MIN_LINK_VALUE)));
                }
            }
        }
        // spurious links cannot survive the stable filter when they span
        // fewer than years - 1 years
        if years >= 4 {
            let extra = (cfg.transient_share * self.network.edge_count() as f64).round() as usize;
            for e in 0..extra {
                let mut rng = stream(self.seed, TAG_TRANSIENT, e as u64, 0);
                let s = rng.random_range(0..cfg.n as u32);
                let c = rng.random_range(0..cfg.n as u32);
                if s == c {
                    continue;
                }
                let span = rng.random_range(1..=2usize);
                let start = rng.random_range(0..=years - span);
                let value = ((500.0 + (8.5 + normal(&mut rng)).exp()) * 100.0).round() / 100.0;
                for k in start..start + span {
                    rows.push((cfg.first_year + k as i32, s, c, value));
                }
            }
        }
        rows.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)).then(a.3.total_cmp(&b.3)));
        for (y, s, c, v) in rows {
            out.write_record([firm_name(s as usize), firm_name(c as usize), y.to_string(), v.to_string()])
                .map_err(std::io::Error::from)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_attributes_csv<W: Write>(&self, w: W) -> Result<()> {
        self.attributes()?.write_csv(w, &self.ids())
    }

    pub fn write_imports_csv<W: Write>(&self, w: W) -> Result<()> {
        self.history().write_csv(w, &self.ids())
    }

    pub fn write_truth_csv<W: Write>(&self, w: W) -> Result<()> {
        self.config.write_truth_csv(w, self.seed)
    }
}

/// External identifier of synthetic firm `i`.
pub fn firm_name(i: usize) -> String {
    format!("F{:07}", i + 1)
}
