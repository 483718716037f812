use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use netspill_core::dgp::{simulate, DgpConfig};
use netspill_core::montecarlo::{self, McConfig};
use netspill_core::panel::Mode;
use netspill_core::pipeline::{estimate_on_panel, DataPaths, Dataset, Estimate, LoadOptions};
use netspill_core::report::{self, Column, Manifest};
use netspill_core::treatment::Weighting;
use netspill_core::{EstimationResult, Error, Result};

mod config;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "netspill", version, about = "Peer effects in import entry over production networks")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "NETSPILL_THREADS", default_value_t = 0)]
    threads: usize,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a synthetic network and import history and write the input CSVs.
    Simulate(SimArgs),
    /// Assemble the potential-starter panel from input CSVs.
    BuildPanel(PanelArgs),
    /// Fit one or more specifications.
    Estimate(EstArgs),
    /// Combine saved estimates into one table.
    Report(ReportArgs),
    /// Replicate simulate + estimate under a regime.
    Montecarlo(McArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// calibration, valid-iv, violated-iv or no-contextual.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, required = true)]
    seed: u64,
    /// Number of firms.
    #[arg(long)]
    firms: Option<usize>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory with edges.csv, attributes.csv and imports.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Estimation window as FIRST:LAST.
    #[arg(long, value_parser = parse_window)]
    window: Option<(i32, i32)>,
    /// Minimum yearly link value.
    #[arg(long)]
    min_value: Option<f64>,
    /// Years a stable link may be missing.
    #[arg(long)]
    max_gap: Option<usize>,
}

#[derive(Args)]
struct PanelArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Pool origins into one row per firm-year.
    #[arg(long)]
    pooled: bool,
}

#[derive(Args)]
struct EstArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Specification(s), e.g. s1-col5, iv-t2, pooled, h1:workers.
    #[arg(long = "spec", value_delimiter = ',')]
    specs: Vec<String>,
    /// Absorbed factors, e.g. id-y,eu-s-z-y.
    #[arg(long, value_delimiter = ',')]
    factors: Option<Vec<String>>,
    #[arg(long)]
    cluster: Option<String>,
    /// uniform or value.
    #[arg(long)]
    weighting: Option<String>,
    /// Allow second-order peers that are also first-order peers on the other side.
    #[arg(long)]
    lenient: bool,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// f64 or f32.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directories of earlier `estimate` runs, one or more columns each.
    #[arg(long = "from", required = true)]
    from: Vec<PathBuf>,
    #[arg(long, short, required = true)]
    out: PathBuf,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, required = true)]
    seed: u64,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    firms: Option<usize>,
    #[arg(long = "spec", value_delimiter = ',')]
    specs: Vec<String>,
}

fn parse_window(s: &str) -> std::result::Result<(i32, i32), String> {
    let (a, b) = s.split_once(':').ok_or("expected FIRST:LAST")?;
    let a: i32 = a.trim().parse().map_err(|_| format!("bad year {a:?}"))?;
    let b: i32 = b.trim().parse().map_err(|_| format!("bad year {b:?}"))?;
    if a > b {
        return Err(format!("window {a}:{b} is empty"));
    }
    Ok((a, b))
}

/// Saved form of one `estimate` run, read back by `report`.
#[derive(Serialize, Deserialize)]
struct Saved {
    results: Vec<EstimationResult>,
}

fn base_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    if d.data.is_some() {
        cfg.data = d.data.clone();
    }
    if d.window.is_some() {
        cfg.window = d.window;
    }
    if d.min_value.is_some() {
        cfg.min_value = d.min_value;
    }
    if d.max_gap.is_some() {
        cfg.max_gap = d.max_gap;
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out.clone().ok_or_else(|| Error::Config("no output directory (use --out)".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", out.display()))))?;
    Ok(out)
}

/// Writes artifacts and records their hashes for the manifest.
struct Sink {
    dir: PathBuf,
    manifest: Manifest,
}

impl Sink {
    fn put(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        self.manifest.add_artifact(name, &bytes);
        fs::write(self.dir.join(name), &bytes)?;
        Ok(())
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.put(name, buf)
    }

    fn finish(self) -> Result<()> {
        let mut buf = Vec::new();
        self.manifest.write_json(&mut buf)?;
        fs::write(self.dir.join("manifest.json"), buf)?;
        Ok(())
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data.clone().ok_or_else(|| Error::Config("no input directory (use --data)".into()))?;
    let paths = DataPaths::in_dir(&dir);
    for p in [&paths.edges, &paths.attributes, &paths.imports] {
        if !p.is_file() {
            return Err(Error::Config(format!("input file {} does not exist", p.display())));
        }
    }
    let mut opts = LoadOptions {
        stable_window: None,
        max_gap: cfg.max_gap,
        ..Default::default()
    };
    if let Some(v) = cfg.min_value {
        opts.ingest.min_value = Some(v);
    }
    Dataset::load(&paths, &opts)
}

fn run_simulate(a: SimArgs, threads: usize) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if a.preset.is_some() {
        cfg.preset = a.preset.clone();
    }
    cfg.seed = Some(a.seed);
    let mut dgp = cfg.dgp()?;
    if let Some(n) = a.firms {
        dgp.n = n;
    }
    let out = out_dir(&cfg)?;
    let ds = simulate(&dgp, a.seed)?;
    log::info!("simulated {} firms, start rate {:.4}, clamp rate {:.4}", dgp.n, ds.start_rate(), ds.clamp_rate);
    let mut sink = Sink {
        dir: out,
        manifest: Manifest::new("simulate", &dgp, Some(a.seed), threads)?,
    };
    sink.csv("edges.csv", |w| ds.write_edges_csv(w))?;
    sink.csv("attributes.csv", |w| ds.write_attributes_csv(w))?;
    sink.csv("imports.csv", |w| ds.write_imports_csv(w))?;
    sink.csv("truth.csv", |w| ds.write_truth_csv(w))?;
    sink.csv("id_map.csv", |w| ds.ids().write_csv(w))?;
    sink.finish()
}

fn run_build_panel(a: PanelArgs, threads: usize) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_data(&mut cfg, &a.data);
    let out = out_dir(&cfg)?;
    let data = load_data(&cfg)?;
    let mode = if a.pooled { Mode::Pooled } else { Mode::PerOrigin };
    let panel = data.panel(mode, cfg.window)?;
    let mut sink = Sink {
        dir: out,
        manifest: Manifest::new("build-panel", &cfg, None, threads)?,
    };
    sink.csv("panel.csv", |w| panel.write_csv(w, &data.ids, &data.attrs))?;
    sink.csv("drop_ledger.csv", |w| panel.ledger.write_csv(w, &data.ids))?;
    sink.csv("drop_summary.csv", |w| panel.ledger.write_summary_csv(w))?;
    sink.csv("id_map.csv", |w| data.ids.write_csv(w))?;
    sink.finish()
}

fn run_estimate(a: EstArgs, threads: usize) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_data(&mut cfg, &a.data);
    if !a.specs.is_empty() {
        cfg.specs = a.specs.clone();
    }
    if a.factors.is_some() {
        cfg.factors = a.factors.clone();
    }
    if a.cluster.is_some() {
        cfg.cluster = a.cluster.clone();
    }
    if let Some(w) = &a.weighting {
        cfg.weighting = Some(match w.as_str() {
            "uniform" => Weighting::Uniform,
            "value" => Weighting::Value,
            _ => return Err(Error::Config(format!("unknown weighting {w:?} (expected uniform or value)"))),
        });
    }
    if a.lenient {
        cfg.strict = Some(false);
    }
    if a.tol.is_some() {
        cfg.tol = a.tol;
    }
    if a.max_iter.is_some() {
        cfg.max_iter = a.max_iter;
    }
    if a.precision.is_some() {
        cfg.precision = a.precision.clone();
    }
    // all configuration errors surface before any data is read
    cfg.check()?;
    let specs = cfg.specs()?;
    let opts = cfg.estimate_options()?;
    let f32 = cfg.f32()?;
    let out = out_dir(&cfg)?;
    let data = load_data(&cfg)?;

    let mut panels: Vec<(Mode, netspill_core::panel::Panel)> = Vec::new();
    let mut fits: Vec<Estimate> = Vec::new();
    for spec in &specs {
        if !panels.iter().any(|(m, _)| *m == spec.mode()) {
            panels.push((spec.mode(), data.panel(spec.mode(), opts.window)?));
        }
        let panel = &panels.iter().find(|(m, _)| *m == spec.mode()).unwrap().1;
        let e = if f32 {
            estimate_on_panel::<f32>(&data, panel, spec, &opts)?
        } else {
            estimate_on_panel::<f64>(&data, panel, spec, &opts)?
        };
        log::info!("{spec}: n = {}, clusters = {}", e.result.n, e.result.clusters);
        fits.push(e);
    }

    let mut sink = Sink {
        dir: out,
        manifest: Manifest::new("estimate", &cfg, cfg.seed, threads)?,
    };
    let results: Vec<&EstimationResult> = fits.iter().map(|e| &e.result).collect();
    sink.csv("results.csv", |w| report::write_results_csv(w, &results))?;
    let cols: Vec<Column> = fits.iter().map(|e| Column { title: &e.result.spec, result: &e.result }).collect();
    sink.put("table.txt", report::report_ladder(&cols)?.into_bytes())?;
    let logs: Vec<(&str, &[_])> = fits.iter().map(|e| (e.result.spec.as_str(), e.convergence.as_slice())).collect();
    sink.csv("convergence.csv", |w| report::write_convergence_csv(w, &logs))?;
    sink.csv("drop_ledger.csv", |w| {
        let mut first = true;
        for e in &fits {
            // one header, then rows tagged by specification
            let mut buf = Vec::new();
            e.ledger.write_csv(&mut buf, &data.ids)?;
            let text = String::from_utf8(buf).expect("csv is utf-8");
            for (i, line) in text.lines().enumerate() {
                if i == 0 {
                    if first {
                        w.extend_from_slice(format!("spec,{line}\n").as_bytes());
                        first = false;
                    }
                    continue;
                }
                w.extend_from_slice(format!("{},{line}\n", e.result.spec).as_bytes());
            }
        }
        Ok(())
    })?;
    sink.csv("drop_summary.csv", |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["spec", "stage", "reason", "count"]).map_err(std::io::Error::from)?;
        for e in &fits {
            let spec = e.result.spec.as_str();
            out.write_record([spec, "input", "", &e.ledger.input.to_string()])
                .map_err(std::io::Error::from)?;
            for ((stage, reason), n) in e.ledger.counts() {
                out.write_record([spec, stage, reason.code(), &n.to_string()])
                    .map_err(std::io::Error::from)?;
            }
            out.write_record([spec, "final", "", &e.ledger.remaining().to_string()])
                .map_err(std::io::Error::from)?;
        }
        out.flush()?;
        Ok(())
    })?;
    let saved = Saved {
        results: fits.into_iter().map(|e| e.result).collect(),
    };
    sink.put("estimates.json", serde_json::to_vec_pretty(&saved)?)?;
    sink.finish()
}

fn run_report(a: ReportArgs, threads: usize) -> Result<()> {
    let mut results = Vec::new();
    for dir in &a.from {
        let p = dir.join("estimates.json");
        let bytes = fs::read(&p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
        let s: Saved = serde_json::from_slice(&bytes)?;
        results.extend(s.results);
    }
    fs::create_dir_all(&a.out)?;
    let mut sink = Sink {
        dir: a.out.clone(),
        manifest: Manifest::new("report", &a.from, None, threads)?,
    };
    let refs: Vec<&EstimationResult> = results.iter().collect();
    sink.csv("results.csv", |w| report::write_results_csv(w, &refs))?;
    let cols: Vec<Column> = results.iter().map(|r| Column { title: &r.spec, result: r }).collect();
    sink.put("table.txt", report::report_ladder(&cols)?.into_bytes())?;
    sink.finish()
}

fn run_montecarlo(a: McArgs, threads: usize) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if a.preset.is_some() {
        cfg.preset = a.preset.clone();
    }
    if !a.specs.is_empty() {
        cfg.specs = a.specs.clone();
    }
    if cfg.specs.is_empty() {
        cfg.specs = vec!["s1-col5".into(), "iv-t23".into()];
    }
    if a.reps.is_some() {
        cfg.reps = a.reps;
    }
    cfg.seed = Some(a.seed);
    cfg.check()?;
    let mut dgp: DgpConfig = cfg.dgp()?;
    if let Some(n) = a.firms {
        dgp.n = n;
    }
    let mut mc = McConfig::new(dgp, cfg.reps.unwrap_or(200), a.seed, cfg.specs()?);
    mc.options = cfg.estimate_options()?;
    let out = out_dir(&cfg)?;
    let run = montecarlo::run(&mc)?;
    let mut sink = Sink {
        dir: out,
        manifest: Manifest::new("montecarlo", &(&cfg, &mc.dgp), Some(a.seed), threads)?,
    };
    sink.csv("reps.csv", |w| montecarlo::write_reps_csv(w, &run.outcomes))?;
    sink.csv("summary.csv", |w| montecarlo::write_summary_csv(w, &run.summary))?;
    for s in &run.summary {
        println!(
            "{:<10} {:<7} mean {:.4} (truth {:.4}) bias/mcse {:+.2} coverage {:.3} j-reject {} median F {}",
            s.spec,
            s.term,
            s.mean,
            s.truth,
            s.bias_z,
            s.coverage,
            s.j_rejection.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            s.median_first_stage_f.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into()),
        );
    }
    sink.finish()
}

fn init_threads(n: usize) -> Result<usize> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(n);
    pool.build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))?;
    Ok(rayon::current_num_threads())
}

fn run(cli: Cli) -> Result<()> {
    let threads = init_threads(cli.threads)?;
    match cli.cmd {
        Cmd::Simulate(a) => run_simulate(a, threads),
        Cmd::BuildPanel(a) => run_build_panel(a, threads),
        Cmd::Estimate(a) => run_estimate(a, threads),
        Cmd::Report(a) => run_report(a, threads),
        Cmd::Montecarlo(a) => run_montecarlo(a, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("  module: {}", e.module());
            eprintln!("  hint: {}", e.hint());
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
