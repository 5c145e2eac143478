use std::path::Path;
use std::process::Command;

fn stackpost(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_stackpost"))
        .args(args)
        .env("STACKPOST_WORKERS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_import_stack_score_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let stacked = tmp.path().join("stacked");
    stackpost(&["fit", "--benchmark", "gmm", "--pool-size", "3", "--k-target", "3", "--seed", "5", "--out", s(&runs)]);
    assert_eq!(std::fs::read_dir(&runs).unwrap().count(), 3);
    let listing = stackpost(&["import", "--runs-dir", s(&runs)]);
    assert!(listing.contains("runs kept"), "{listing}");
    stackpost(&["stack", "--runs-dir", s(&runs), "--benchmark", "gmm", "--out", s(&stacked)]);
    for f in ["stack.json", "trace.csv", "samples.csv"] {
        assert!(stacked.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(stacked.join("stack.json")).unwrap()).unwrap();
    let w: f64 = summary["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-9);
    let scores = stackpost(&["score", "--runs-dir", s(&runs), "--benchmark", "gmm"]);
    assert!(scores.starts_with("run,elbo,delta_lml,mmtv,gskl"), "{scores}");
}

#[test]
fn experiment_writes_artifacts_and_replays() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = [
        "experiment", "--benchmark", "ring", "--pool-size", "4", "--k-target", "3", "--m-list", "2,3", "--replicates", "2",
        "--mode", "all-weights,naive", "--debias", "component-median", "--resamples", "200", "--seed", "3", "--out",
    ];
    let mut first = args.to_vec();
    first.push(s(&a));
    stackpost(&first);
    let results = std::fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 2 * 2);
    stackpost(&["experiment", "--manifest", s(&a.join("manifest.json")), "--out", s(&b)]);
    assert_eq!(results, std::fs::read_to_string(b.join("results.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("summary.csv")).unwrap(), std::fs::read(b.join("summary.csv")).unwrap());
}

#[test]
fn unknown_mode_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_stackpost"))
        .args(["stack", "--runs-dir", ".", "--mode", "bogus", "--out", "."])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown stacking mode"));
}
