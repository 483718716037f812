use std::path::Path;
use std::process::{Command, Output};

fn netspill(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_netspill"));
    cmd.args(args).env_remove("NETSPILL_THREADS");
    if let Some(t) = threads {
        cmd.env("NETSPILL_THREADS", t);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn simulate(dir: &Path) {
    ok(&netspill(&["simulate", "--seed", "42", "--firms", "2500", "-o", dir.to_str().unwrap()], None));
}

#[test]
fn simulate_estimate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data);
    for f in ["edges.csv", "attributes.csv", "imports.csv", "truth.csv", "id_map.csv", "manifest.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let panel = tmp.path().join("panel");
    ok(&netspill(&["build-panel", "--data", data.to_str().unwrap(), "-o", panel.to_str().unwrap()], None));
    assert!(read(&panel.join("panel.csv")).starts_with("firm_id,origin,year,y,zip,industry\n"));
    assert!(panel.join("drop_ledger.csv").exists());

    let est = tmp.path().join("est");
    ok(&netspill(
        &["estimate", "--data", data.to_str().unwrap(), "--spec", "s1-col1,s1-col5,iv-t23", "-o", est.to_str().unwrap()],
        None,
    ));
    for f in ["results.csv", "table.txt", "convergence.csv", "drop_ledger.csv", "drop_summary.csv", "estimates.json"] {
        assert!(est.join(f).exists(), "{f}");
    }
    let summary = read(&est.join("drop_summary.csv"));
    assert!(summary.starts_with("spec,stage,reason,count\n"), "{summary}");
    assert!(summary.lines().any(|l| l.starts_with("iv-t23,final,,")), "{summary}");
    let table = read(&est.join("table.txt"));
    assert!(table.contains("widstat") && table.contains("*p<0.1; **p<0.05; ***p<0.01"), "{table}");

    let manifest: serde_json::Value = serde_json::from_str(&read(&est.join("manifest.json"))).unwrap();
    for key in ["tool", "version", "command", "config_hash", "config", "seed", "threads", "artifacts"] {
        assert!(manifest.get(key).is_some(), "manifest lacks {key}: {manifest}");
    }
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    let sim: serde_json::Value = serde_json::from_str(&read(&data.join("manifest.json"))).unwrap();
    assert_eq!(sim["seed"], 42);

    let rep = tmp.path().join("rep");
    ok(&netspill(&["report", "--from", est.to_str().unwrap(), "-o", rep.to_str().unwrap()], None));
    assert_eq!(read(&rep.join("results.csv")), read(&est.join("results.csv")));
    assert_eq!(read(&rep.join("table.txt")), table);
}

#[test]
fn seed_is_mandatory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = netspill(&["simulate", "-o", tmp.path().to_str().unwrap()], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    let out = netspill(&["montecarlo", "--reps", "1"], None);
    assert!(!out.status.success());
}

#[test]
fn config_errors_exit_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    // the data directory does not exist: the spec check must fire first
    let out = netspill(
        &["estimate", "--data", tmp.path().join("none").to_str().unwrap(), "--spec", "pooled", "--factors", "id-y,s-z-y"],
        None,
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:") && err.contains("hint:"), "{err}");
    let out = netspill(&["estimate", "--data", ".", "--spec", "nonsense"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data);
    let mut outputs = Vec::new();
    for t in ["1", "3"] {
        let est = tmp.path().join(format!("est{t}"));
        ok(&netspill(
            &["estimate", "--data", data.to_str().unwrap(), "--spec", "s1-col5,iv-t2", "-o", est.to_str().unwrap()],
            Some(t),
        ));
        outputs.push((std::fs::read(est.join("results.csv")).unwrap(), std::fs::read(est.join("table.txt")).unwrap()));
    }
    assert!(outputs[0] == outputs[1]);

    let again = tmp.path().join("data2");
    let out = netspill(&["simulate", "--seed", "42", "--firms", "2500", "-o", again.to_str().unwrap()], Some("3"));
    ok(&out);
    assert_eq!(std::fs::read(data.join("edges.csv")).unwrap(), std::fs::read(again.join("edges.csv")).unwrap());
}

#[test]
fn montecarlo_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("mc");
    ok(&netspill(
        &["montecarlo", "--seed", "1", "--reps", "2", "--firms", "1500", "--spec", "iv-t23", "-o", out.to_str().unwrap()],
        None,
    ));
    let summary = read(&out.join("summary.csv"));
    assert!(summary.lines().count() >= 3, "{summary}");
    assert_eq!(read(&out.join("reps.csv")).lines().count(), 1 + 2 * 2);
}
