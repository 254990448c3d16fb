use std::path::Path;
use std::process::{Command, Output};

use diskidx::bench::report::read_json;

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: [&str; 4] = ["--dataset", "synthetic:lognormal:20k", "--scale", "0.0005"];

#[test]
fn run_emits_csv_row_per_op_kind() {
    let mut args = vec!["run", "--index", "bptree,alex", "--workload", "balanced"];
    args.extend(SMALL);
    let out = stdout(&bench(&args));
    let lines: Vec<_> = out.lines().collect();
    assert!(lines[0].starts_with("index,workload,dataset,block_size"));
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[1].starts_with("bptree,balanced,"));
    assert!(lines[4].starts_with("alex,balanced,"));
}

#[test]
fn block_size_sweep_gives_three_rows_per_cell() {
    let mut args = vec!["run", "--index", "pgm", "--workload", "lookup", "--block-size", "4k,8k,16k"];
    args.extend(SMALL);
    let out = stdout(&bench(&args));
    let sizes: Vec<_> = out.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().to_string()).collect();
    assert_eq!(sizes, ["4096", "8192", "16384"]);
}

#[test]
fn json_to_file_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| {
        let path = dir.path().join(name);
        let p = path.to_str().unwrap();
        let mut args = vec!["run", "--index", "lipp", "--workload", "write-heavy", "--format", "json", "--out", p];
        args.extend(SMALL);
        stdout(&bench(&args));
        read_json(&std::fs::read(Path::new(p)).unwrap()).unwrap()
    };
    let (a, b) = (read("a.json"), read("b.json"));
    assert_eq!(a.len(), 1);
    assert_eq!(a[0].counters(), b[0].counters());
}

#[test]
fn hybrid_lipp_is_rejected() {
    let mut args = vec!["run", "--index", "lipp", "--workload", "lookup", "--hybrid"];
    args.extend(SMALL);
    let o = bench(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("LIPP"));
}

#[test]
fn missing_dataset_file_fails() {
    let o = bench(&["run", "--index", "pgm", "--workload", "lookup", "--dataset", "/nonexistent/keys"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn profile_reports_each_error_bound() {
    let out = stdout(&bench(&["profile", "--dataset", "synthetic:uniform:10k", "--errors", "16,64"]));
    let lines: Vec<_> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("uniform-10000,10000,16,"));
}

#[test]
fn verify_bounds_passes_for_bptree() {
    let mut args = vec!["verify-bounds", "--index", "bptree", "--workload", "lookup,write"];
    args.extend(SMALL);
    let out = stdout(&bench(&args));
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().all(|l| l.ends_with(" 0 violations")));
}
