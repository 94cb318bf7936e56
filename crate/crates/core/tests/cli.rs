use std::process::Command;

fn hsr(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_hsr")).args(args).output().unwrap();
    assert!(out.status.success(), "hsr {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn verbs_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    hsr(&["gen-trace", "--seed", "3", "--set", "sessions=2", "--set", "rounds=2", "--set", "max_output=8", "--set", "max_input=16", "--out", &p("t.csv")]);
    let table = hsr(&["run", "--trace", &p("t.csv"), "--strategy", "hidden,kv_offload", "--out", &p("runs")]);
    assert!(table.contains("ttft_kv_offload_over_this"));
    let one = hsr(&["report", &p("runs/metrics_hidden.csv"), "--out", &p("r.csv")]);
    assert!(!one.contains("over_this"));
    assert!(std::fs::read_to_string(p("r.csv")).unwrap().starts_with("strategy,"));

    hsr(&["profile", "--tokens", "256", "--out", &p("timings.txt")]);
    let plan = hsr(&["plan", "--timings", &p("timings.txt")]);
    assert!(plan.starts_with("plan "));
    let plan = hsr(&["plan", "--model-preset", "7b"]);
    assert!(plan.contains("plan 25H+7RE"), "{plan}");
    let ab = hsr(&["ablate", "--model-preset", "13b", "--kind", "token-wise"]);
    assert!(ab.contains("token-wise"));
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_hsr")).args(["plan", "--model-preset", "nope"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown model preset"));
}
