use rollsim_web::{length_histogram, simulate_curves, speculate};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn curves_cover_every_request() {
    let v = parse(simulate_curves("moonlight-like", 0.01, 0, "group-baseline, full"));
    let pols = v["policies"].as_array().unwrap();
    assert_eq!(pols.len(), 2);
    for p in pols {
        let finished = p["finished"].as_array().unwrap();
        let last = finished.last().unwrap().as_array().unwrap();
        assert_eq!(last[1].as_f64(), Some(1.0));
        assert_eq!(last[0].as_f64(), p["completion_time"].as_f64());
        assert!(finished.len() <= 201);
    }
    assert!(pols[1]["throughput"].as_f64() > pols[0]["throughput"].as_f64());
    assert_eq!(pols[0]["preemptions"].as_u64().map(|n| n > 0), Some(true));
}

#[test]
fn errors_are_reported_as_json() {
    assert!(parse(simulate_curves("nope", 0.01, 0, "full"))["error"].is_string());
    assert!(parse(simulate_curves("k2-like", 0.01, 0, "fastest"))["error"].is_string());
    assert!(parse(speculate("a b", "a", 4, 0))["error"].is_string());
}

#[test]
fn drafts_follow_the_corpus() {
    let corpus = "the cat sat on the mat\nthe cat sat on the hat\nthe cat ran off\n";
    let v = parse(speculate(corpus, "so the cat", 4, 2));
    let paths = v.as_array().unwrap();
    assert_eq!(paths[0]["text"], "sat on the mat");
    assert_eq!(paths[0]["support"], 1);
    assert_eq!(paths.len(), 2);
    assert_eq!(paths[1]["text"], "sat on the hat");
    // unseen context: nothing to draft
    assert_eq!(parse(speculate(corpus, "dog", 4, 2)).as_array().unwrap().len(), 0);
}

#[test]
fn histogram_counts_all_requests() {
    let v = parse(length_histogram("qwen72b-like", 0.01, 0, 0.6, 20));
    let total: u64 = v["bins"].as_array().unwrap().iter().map(|b| b["count"].as_u64().unwrap()).sum();
    assert_eq!(total, v["requests"].as_u64().unwrap());
    assert_eq!(v["bins"].as_array().unwrap().len(), 20);
    // identical lengths within a group at full correlation
    let same = parse(length_histogram("qwen72b-like", 0.01, 0, 1.0, 20));
    assert_eq!(same["within_group_cv"].as_f64(), Some(0.0));
    assert!(v["within_group_cv"].as_f64().unwrap() > 0.0);
}

#[test]
fn curves_use_the_cli_iteration_zero_trace() {
    use rollsim_core::presets::preset;
    use rollsim_core::util::derive_seed;
    use rollsim_core::workload::{generate_workload, trace_fingerprint};
    let p = preset("moonlight-like", 0.01, derive_seed(3, 0)).unwrap();
    let want = format!("{:016x}", trace_fingerprint(&generate_workload(&p.workload).unwrap()));
    let v = parse(simulate_curves("moonlight-like", 0.01, 3, "full"));
    assert_eq!(v["trace_fingerprint"], want.as_str());
}
