use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aesignal"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn golden_args<'a>(reports: &'a str, ontology: &'a str) -> Vec<&'a str> {
    vec!["--reports", reports, "--ontology", ontology, "--min-ae-count", "1", "--min-group-size", "1"]
}

#[test]
fn empty_reports_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let reports = dir.path().join("empty.csv");
    fs::write(&reports, "report_id,vaccines,aes\n").unwrap();
    let ontology = fixture("golden_ontology.csv");
    let mut args = vec!["mine", "--out"];
    let out = dir.path().join("out");
    let (r, o, d) = (reports.to_str().unwrap(), ontology.to_str().unwrap(), out.to_str().unwrap());
    args.push(d);
    args.extend(golden_args(r, o));
    let o = run(&args);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error=data reason="));
}

#[test]
fn missing_ontology_is_a_config_error() {
    let reports = fixture("golden_reports.csv");
    let o = run(&["validate", "--reports", reports.to_str().unwrap(), "--ontology", "/nonexistent/ontology.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error=config reason="));
}

#[test]
fn unknown_flag_is_a_config_error() {
    let o = run(&["mine", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error=config"));
}

#[test]
fn malformed_ontology_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ontology = dir.path().join("ontology.csv");
    fs::write(&ontology, "term,group\nfever,General\nfever,Respiratory\n").unwrap();
    let reports = fixture("golden_reports.csv");
    let o = run(&["validate", "--reports", reports.to_str().unwrap(), "--ontology", ontology.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn dry_run_prints_config_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (r, o) = (fixture("golden_reports.csv"), fixture("golden_ontology.csv"));
    let mut args = vec!["mine", "--dry-run", "--seed", "5", "--out", out.to_str().unwrap()];
    args.extend(golden_args(r.to_str().unwrap(), o.to_str().unwrap()));
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["fit"]["max_iters"], 500);
    assert!(!out.exists());
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.conf");
    fs::write(
        &config,
        format!(
            "# golden run\nreports = {}\nontology = {}\npermutations = 49\nseed = 3\nmin-ae-count = 1\nmin-group-size = 1\n",
            fixture("golden_reports.csv").display(),
            fixture("golden_ontology.csv").display()
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "mine",
        "--dry-run",
        "--config",
        config.to_str().unwrap(),
        "--permutations",
        "19",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["permutations"]["n_permutations"], 19);
    assert_eq!(cfg["permutations"]["seed"], 3);

    fs::write(&config, "bogus_key = 1\n").unwrap();
    let o = run(&["mine", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mine_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (r, o) = (fixture("golden_reports.csv"), fixture("golden_ontology.csv"));
    let mut args = vec!["mine", "--permutations", "19", "--dump-table", "--dump-null", "--out", out.to_str().unwrap()];
    args.extend(golden_args(r.to_str().unwrap(), o.to_str().unwrap()));
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "groups.csv",
        "aes.csv",
        "heatmap.csv",
        "table.csv",
        "null_group_max_s.txt",
        "null_ae_max_lambda.txt",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let null = fs::read_to_string(out.join("null_group_max_s.txt")).unwrap();
    assert_eq!(null.lines().count(), 19);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["input_digests"].as_object().unwrap().len(), 2);
    let groups = fs::read_to_string(out.join("groups.csv")).unwrap();
    // 2 vaccines x 2 groups
    assert_eq!(groups.lines().count(), 5);
}

fn simulate(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--group-sizes", "20", "--reps", "10", "--seed", "8", "--out", out.to_str().unwrap()];
    args.extend(extra);
    run(&args)
}

#[test]
fn simulate_smoke_and_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let t = Instant::now();
    let o = simulate(&out, &[]);
    assert!(t.elapsed().as_secs() < 10);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let group = fs::read_to_string(out.join("sim_group.csv")).unwrap();
    let ae = fs::read_to_string(out.join("sim_ae.csv")).unwrap();
    // header + reps x vaccines x sizes rows per metric
    assert_eq!(group.lines().count(), 1 + 10 * 3);
    assert_eq!(ae.lines().count(), 1 + 2 * 10 * 3);
    assert_eq!(group.lines().next().unwrap(), "scenario,vaccine,group_size,metric,value");
}

#[test]
fn simulate_is_deterministic_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(simulate(&a, &["--threads", "1"]).status.code(), Some(0));
    assert_eq!(simulate(&b, &["--threads", "4"]).status.code(), Some(0));
    for f in ["sim_group.csv", "sim_ae.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn simulate_rejects_bad_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(&dir.path().join("x"), &["--p", "0.2,1.5,0.1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn validate_reports_shape_and_unmapped_terms() {
    let dir = tempfile::tempdir().unwrap();
    let mut ontology = String::from("term,group\n");
    for g in 0..42 {
        for k in 0..3 {
            ontology.push_str(&format!("t{g}_{k},G{g:02}\n"));
        }
    }
    let mut reports = String::from("report_id,vaccines,aes\n");
    for n in 0..126 {
        let (g, k) = (n / 3, n % 3);
        reports.push_str(&format!("r{n},V{},t{g}_{k}|unknown_term\n", n % 4));
    }
    let (o_path, r_path) = (dir.path().join("o.csv"), dir.path().join("r.csv"));
    fs::write(&o_path, ontology).unwrap();
    fs::write(&r_path, reports).unwrap();
    let o = run(&[
        "validate",
        "--reports",
        r_path.to_str().unwrap(),
        "--ontology",
        o_path.to_str().unwrap(),
        "--min-ae-count",
        "1",
        "--min-group-size",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for line in ["vaccines=4", "aes=126", "groups=42", "reports=126", "unmapped_terms=1", "unmapped_mentions=126"] {
        assert!(text.lines().any(|l| l == line), "missing {line} in\n{text}");
    }
}

#[test]
fn help_exits_cleanly() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["mine", "simulate", "validate"] {
        assert!(stdout(&o).contains(sub));
    }
}
