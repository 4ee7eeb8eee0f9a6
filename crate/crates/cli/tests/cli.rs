use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output};
use std::time::Duration;

use rollsim_cli::commands::read_summary;
use rollsim_cli::config::{ConfigFile, ExperimentConfig, Overrides};
use rollsim_core::util::derive_seed;

const SMALL: [&str; 4] = ["--preset", "moonlight-like", "--scale", "0.01"];

fn rollsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rollsim")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = rollsim(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run"];
    args.extend(SMALL);
    args.extend(["--out", s(out)]);
    args.extend(extra);
    ok(&args)
}

#[test]
fn full_scale_preset_shape() {
    let flags = Overrides { preset: Some("moonlight-like".into()), scale: Some(1.0), ..Default::default() };
    let c = ExperimentConfig::resolve(ConfigFile::default(), flags).unwrap();
    assert_eq!((c.workload.num_groups, c.workload.group_size, c.workload.max_tokens), (400, 8, 65536));
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["generate", "--preset", "moonlight-like", "--scale", "0.01", "--seed", "3", "--out", s(d)]);
    }
    let read = |d: &Path| std::fs::read(d.join("trace.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    let report = ok(&["report", "--trace", s(&a.join("trace.jsonl"))]);
    assert!(String::from_utf8(report.stdout).unwrap().contains("40 groups, 320 requests"));
}

#[test]
fn invalid_config_is_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[workload]\npattern_similarity = 1.5\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = rollsim(&["generate", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pattern_similarity"));
    assert!(!out_dir.exists());
}

#[test]
fn iterations_use_derived_seeds_and_share_traces_across_policies() {
    let dir = tempfile::tempdir().unwrap();
    run_small(dir.path(), &["--policies", "group-baseline,context-aware", "--iterations", "3", "--seed", "11"]);
    let rows = read_summary(dir.path()).unwrap();
    assert_eq!(rows.len(), 6);
    let text = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    for i in 0..3u32 {
        let it: Vec<_> = rows.iter().filter(|r| r.iteration == i).collect();
        assert_eq!(it.len(), 2);
        assert_eq!(it[0].trace_fingerprint, it[1].trace_fingerprint);
        assert!(text.contains(&format!("group-baseline,{i},{},", derive_seed(11, i as u64))));
        assert!(rows.iter().all(|r| r.fidelity_mismatches == 0));
    }
    assert_ne!(rows[0].trace_fingerprint, rows[2].trace_fingerprint);
    assert!(dir.path().join("runs/context-aware-2/timeline.jsonl").exists());
}

#[test]
fn occupied_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("keep.txt"), "x").unwrap();
    let mut args = vec!["run"];
    args.extend(SMALL);
    args.extend(["--policies", "context-aware", "--out", s(dir.path())]);
    let out = rollsim(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    args.push("--force");
    ok(&args);
}

#[test]
fn runs_are_byte_reproducible_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, t, r) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("t"), dir.path().join("r"));
    run_small(&a, &["--policies", "group-baseline,full"]);
    run_small(&b, &["--policies", "group-baseline,full"]);
    let csv = |d: &Path| std::fs::read(d.join("summary.csv")).unwrap();
    assert_eq!(csv(&a), csv(&b));

    // replaying the generated iteration-0 trace reproduces the run
    ok(&["generate", "--preset", "moonlight-like", "--scale", "0.01", "--out", s(&t)]);
    run_small(&r, &["--policies", "group-baseline,full", "--trace", s(&t.join("trace.jsonl"))]);
    assert_eq!(csv(&a), csv(&r));
}

#[test]
fn compare_across_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (base, full, other) = (dir.path().join("base"), dir.path().join("full"), dir.path().join("other"));
    run_small(&base, &["--policies", "group-baseline"]);
    run_small(&full, &["--policies", "full"]);
    run_small(&other, &["--policies", "full", "--seed", "1"]);

    let out = ok(&["compare", s(&base), s(&full)]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("1.00×"), "{table}");
    let machine = std::fs::read_to_string(base.join("compare.csv")).unwrap();
    assert_eq!(machine.lines().count(), 3);
    let mult: f64 = machine.lines().nth(2).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!(mult > 1.0 && table.contains(&format!("{mult:.2}×")));

    let refused = rollsim(&["compare", s(&base), s(&other)]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("different trace"));
}

#[test]
fn external_draft_server_gives_identical_results() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut server =
        Command::new(env!("CARGO_BIN_EXE_rollsim")).args(["serve-dgds", "--listen", &addr]).spawn().unwrap();
    let mut tries = 0;
    while TcpStream::connect(&addr).is_err() {
        tries += 1;
        assert!(tries < 100, "draft server did not come up");
        std::thread::sleep(Duration::from_millis(50));
    }
    let dir = tempfile::tempdir().unwrap();
    let (local, remote) = (dir.path().join("local"), dir.path().join("remote"));
    run_small(&local, &["--policies", "full"]);
    // twice against the same server: sessions must not collide
    run_small(&remote, &["--policies", "full", "--service-dgds", &addr]);
    run_small(&remote, &["--policies", "full", "--service-dgds", &addr, "--force"]);
    server.kill().ok();
    server.wait().ok();
    // group ids carry the session namespace, so only the fetched byte count may differ
    let csv = |d: &Path| -> Vec<Vec<String>> {
        let text = std::fs::read_to_string(d.join("summary.csv")).unwrap();
        let skip = text.lines().next().unwrap().split(',').position(|c| c == "dgds_bytes_fetched").unwrap();
        text.lines()
            .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != skip).map(|(_, c)| c.to_string()).collect())
            .collect()
    };
    assert_eq!(csv(&local), csv(&remote));
}
