use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlab")).args(args).output().expect("spawn vlab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_conformance(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "conformance", "--seeds", "1,2", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    vlab(&args)
}

fn report_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir.join("report"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn lists_every_experiment() {
    let o = vlab(&["list-experiments"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["dpo-ar", "dpo-flow", "peft-ablation", "pretrain", "knn-eval", "latency-anatomy", "cache-bench", "conformance"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing from\n{text}");
    }
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let o = vlab(&["run", "dpo-transformer"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = vlab(&["run", "conformance", "--out", out.to_str().unwrap(), "--set", "flow.hiden=8"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn report_on_an_empty_directory_is_structured() {
    let dir = tempfile::tempdir().unwrap();
    let o = vlab(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).contains("error[integrity]"), "{}", stderr(&o));
    assert!(stderr(&o).contains("manifest.json"));

    let o = vlab(&["report", dir.path().join("absent").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_then_report_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conf");
    let o = run_conformance(&out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("100.0% (12/12)"), "{}", stdout(&o));
    let results = fs::read(out.join("results.json")).unwrap();
    let first = report_files(&out);
    assert!(first.iter().any(|(n, _)| n == "summary.txt"));
    assert!(first.iter().any(|(n, _)| n == "conformance.csv"));

    let o = vlab(&["report", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(report_files(&out), first);
    assert_eq!(fs::read(out.join("results.json")).unwrap(), results);
}

#[test]
fn tampered_outputs_fail_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conf");
    assert!(run_conformance(&out, &[]).status.success());
    fs::write(out.join("seed-1").join("conformance.json"), "[]\n").unwrap();
    let o = vlab(&["report", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).contains("seed-1/conformance.json"), "{}", stderr(&o));
}

#[test]
fn existing_directories_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conf");
    assert!(run_conformance(&out, &[]).status.success());
    assert_eq!(run_conformance(&out, &[]).status.code(), Some(2));
    assert!(run_conformance(&out, &["--force"]).status.success());

    let foreign = dir.path().join("foreign");
    fs::create_dir(&foreign).unwrap();
    fs::write(foreign.join("notes.txt"), "keep me").unwrap();
    assert_eq!(run_conformance(&foreign, &["--force"]).status.code(), Some(2));
    assert_eq!(fs::read_to_string(foreign.join("notes.txt")).unwrap(), "keep me");
}

#[test]
fn config_file_names_the_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-file");
    let file = dir.path().join("exp.toml");
    fs::write(
        &file,
        format!("version = 1\nexperiment = \"conformance\"\nseeds = [3]\nout_dir = {:?}\n\n[flow]\nhidden = 8\n", out.to_str().unwrap()),
    )
    .unwrap();
    let o = vlab(&["run", "--config", file.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(m["seeds"], serde_json::json!([3]));
    let resolved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("hidden = 8"), "{resolved}");
}

#[test]
fn cache_bench_reports_baseline_and_both_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cache");
    let o = vlab(&[
        "run", "cache-bench", "--seeds", "42", "--out", out.to_str().unwrap(),
        "--set", "sft.steps=60", "--set", "sft.demos=200", "--set", "cache.trials=3", "--set", "cache.gate=0.0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bench: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("seed-42/cache_bench.json")).unwrap()).unwrap();
    assert_eq!(bench["baseline"]["mode"]["mode"], "none");
    let modes: Vec<&str> = bench["strategies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["mode"]["mode"].as_str().unwrap())
        .collect();
    assert!(modes.contains(&"chunk") && modes.contains(&"prefix"), "{modes:?}");
}

#[test]
fn peft_ablation_uses_the_pooled_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("peft");
    let mut args = vec!["run", "peft-ablation", "--seeds", "42,1337", "--out", out.to_str().unwrap()];
    for s in ["sft.steps=40", "sft.demos=100", "ar.hidden=8", "dpo.max_steps=10", "dpo.warmup=2", "pairs.n_pairs=6", "pairs.heldout=4", "eval.trials=4"] {
        args.extend(["--set", s]);
    }
    let o = vlab(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for col in ["SFT seed 42", "SFT seed 1337", "SFT pooled", "+LoRA pooled", "+DoRA pooled"] {
        assert!(text.contains(col), "{col} missing:\n{text}");
    }
    let spatial = text.lines().find(|l| l.starts_with("spatial")).unwrap();
    assert!(spatial.contains("/8)"), "{spatial}");
    let csv = fs::read_to_string(out.join("report/suite_success.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("spatial,SFT,pooled,")), "{csv}");
}
