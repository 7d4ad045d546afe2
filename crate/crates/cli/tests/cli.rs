use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn twogear(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twogear")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = twogear(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// The single data row of a CSV report, keyed by header.
fn row(csv: &str, line: usize) -> Vec<(String, String)> {
    let mut lines = csv.lines();
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    let vals: Vec<&str> = lines.nth(line).unwrap().split(',').collect();
    head.into_iter().zip(vals).map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

fn get<'a>(r: &'a [(String, String)], k: &str) -> &'a str {
    &r.iter().find(|(c, _)| c == k).unwrap_or_else(|| panic!("no column {k}")).1
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let o = twogear(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(twogear(&["sim", "run", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn sim_run_is_deterministic_and_writes_the_trace() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    let ra = ok(&["sim", "run", "--seed", "1", "--out", a.to_str().unwrap()]);
    let rb = ok(&["sim", "run", "--seed", "1", "--out", b.to_str().unwrap()]);
    assert_eq!(get(&row(&ra, 0), "trace_hash"), get(&row(&rb, 0), "trace_hash"));
    let ta = fs::read_to_string(a.join("trace.tsv")).unwrap();
    assert_eq!(ta, fs::read_to_string(b.join("trace.tsv")).unwrap());
    assert_eq!(ta.lines().count().to_string(), get(&row(&ra, 0), "records"));
    assert!(a.join("run.csv").exists());
}

#[test]
fn overhead_from_config_file() {
    let d = tempfile::tempdir().unwrap();
    let io = d.path().join("io.json");
    fs::write(&io, ok(&["sim", "template", "overhead-io"])).unwrap();
    let out = ok(&["bench", "overhead", "--config", io.to_str().unwrap(), "--seed", "1"]);
    let r = row(&out, 0);
    let est: f64 = get(&r, "estimated").parse().unwrap();
    let measured: f64 = get(&r, "measured").parse().unwrap();
    assert!((est - 0.037).abs() <= 1e-4, "{out}");
    assert!((0.037..=0.045).contains(&measured), "{out}");
}

#[test]
fn schema_violations_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&ok(&["sim", "template", "micro"])).unwrap();
    v["surprise"] = serde_json::json!(1);
    fs::write(&p, v.to_string()).unwrap();
    let o = twogear(&["sim", "validate", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("surprise"));

    v.as_object_mut().unwrap().remove("surprise");
    v["workloads"][0]["vm"] = serde_json::json!(42);
    fs::write(&p, v.to_string()).unwrap();
    let o = twogear(&["sim", "run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unresolved"));

    let o = twogear(&["sim", "validate", "--config", d.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_emit_round_trips_json_to_csv() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    let csv = ok(&["bench", "micro", "--rounds", "10", "--format", "csv"]);
    ok(&["bench", "micro", "--rounds", "10", "--format", "json", "--out", dir]);
    let back = ok(&["report", "emit", "--input", &format!("{dir}/micro.json"), "--format", "csv"]);
    assert_eq!(back, csv);
    for i in 0..5 {
        assert_eq!(get(&row(&csv, i), "error"), "0.000000", "{csv}");
    }
}

#[test]
fn micro_calibrate_reports_the_fit() {
    let out = ok(&["bench", "micro", "--rounds", "5", "--calibrate"]);
    assert!(out.starts_with("virq_inject_ns,gicd_emul_ns,gdm_user_hop_ns\n233,4820,2472\n"), "{out}");
}

#[test]
fn jitter_sweep_sorted_by_seed() {
    let out = ok(&["bench", "jitter", "--seed", "3", "--seeds", "2", "--samples", "100", "--jobs", "2"]);
    let seeds: Vec<&str> = out.lines().skip(1).take(10).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(seeds, [["3"; 5], ["4"; 5]].concat());
}

#[test]
fn trace_dump_matches_sim_run() {
    let d = tempfile::tempdir().unwrap();
    let f = d.path().join("t.tsv");
    ok(&["trace", "dump", "--template", "rtvm-gicd", "--duration", "10000000", "--out", f.to_str().unwrap()]);
    ok(&["sim", "run", "--template", "rtvm-gicd", "--duration", "10000000", "--out", d.path().to_str().unwrap()]);
    assert_eq!(fs::read(&f).unwrap(), fs::read(Path::new(d.path()).join("trace.tsv")).unwrap());
}
