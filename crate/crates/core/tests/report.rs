use netspill_core::dgp::{simulate, DgpConfig};
use netspill_core::pipeline::{estimate, Dataset, EstimateOptions};
use netspill_core::report::{report_ladder, write_results_csv, Column};
use netspill_core::treatment::Spec;
use netspill_core::EstimationResult;

fn fits() -> Vec<EstimationResult> {
    let ds = simulate(&DgpConfig { n: 3000, ..DgpConfig::default() }, 31).unwrap();
    let data = Dataset::from_synthetic(&ds).unwrap();
    ["s1-col1", "s1-col5", "iv-t23"]
        .iter()
        .map(|s| {
            let mut r = estimate(&data, &Spec::parse(s).unwrap(), &EstimateOptions::default()).unwrap().result;
            r.spec = s.to_string();
            r
        })
        .collect()
}

#[test]
fn results_csv_and_table_from_real_fits() {
    let rs = fits();
    let mut buf = Vec::new();
    write_results_csv(&mut buf, &rs.iter().collect::<Vec<_>>()).unwrap();
    let csv = String::from_utf8(buf).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "spec,term,coefficient,se,t,p,stars,n,clusters,fixed_effects,cluster");
    let col5 = csv.lines().find(|l| l.starts_with("s1-col5,ybar_D,")).unwrap();
    assert!(col5.contains(",id-y / eu-s-z-y,"), "{col5}");
    let rows_per_spec: usize = rs.iter().map(|r| r.labels.len()).sum();
    assert_eq!(csv.lines().count(), rows_per_spec + 1);

    let cols: Vec<Column> = rs.iter().map(|r| Column { title: &r.spec, result: r }).collect();
    let table = report_ladder(&cols).unwrap();
    for needle in ["ybar_D", "ybar_U", "idstat", "idp", "widstat", "jp", "t-2, t-3", "clustering variable"] {
        assert!(table.contains(needle), "missing {needle}:\n{table}");
    }
    assert!(table.trim_end().ends_with("*p<0.1; **p<0.05; ***p<0.01"), "{table}");
    // the two-factor footer takes two lines
    let fe = table.lines().position(|l| l.starts_with("fixed effects")).unwrap();
    assert!(table.lines().nth(fe + 1).unwrap().contains("eu-s-z-y"), "{table}");
}

#[test]
fn ladder_rejects_duplicate_titles() {
    let rs = fits();
    let cols = [Column { title: "a", result: &rs[0] }, Column { title: "a", result: &rs[1] }];
    assert!(report_ladder(&cols).is_err());
    assert!(report_ladder(&[]).is_err());
}
