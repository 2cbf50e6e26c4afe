use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_hleval");

fn hleval(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(instances: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = hleval(&["synth", "-o", dir.path().to_str().unwrap(), "--instances", &instances.to_string()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, name: &str, body: &str) -> String {
        let p = self.path(name);
        std::fs::write(&p, body).unwrap();
        p.to_string_lossy().into_owned()
    }

    fn serve_cmd(&self, model: &str) -> String {
        format!("{BIN} serve {model} --params {}", self.path("models.json").display())
    }
}

fn base(model: &str, out: &str, methods: &str) -> String {
    format!(
        "model = {model:?}\nmodel_params = \"models.json\"\ndataset = \"dataset.jsonl\"\nout_dir = {out:?}\nseed = 5\nmethods = {methods}\nbivariate_permutations = 50\n"
    )
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn explain_writes_one_line_per_instance_and_is_reproducible() {
    let ws = Workspace::new(50);
    let cfg = ws.config("a.toml", &base("builtin:linear", "a", r#"["shapley-exact", "bivariate-shapley"]"#));
    let out = hleval(&["explain", "-c", &cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("predictions"));
    let first = read(&ws.path("a/shapley-exact.TokenEx.jsonl"));
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 50);

    let out = hleval(&["explain", "-c", &cfg, "--jobs", "1"]);
    assert_eq!(code(&out), 0);
    assert_eq!(read(&ws.path("a/shapley-exact.TokenEx.jsonl")), first);
}

#[test]
fn full_run_reports_validate_against_the_schema() {
    let ws = Workspace::new(40);
    let cfg = ws.config(
        "run.toml",
        &base("builtin:attention", "out", r#"["shapley-exact", "bivariate-shapley", "attention"]"#),
    );
    let out = hleval(&["run", "-c", &cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&read(&ws.path("out/report.json"))).unwrap();
    for block in ["faithfulness", "agreement", "simulatability", "complexity"] {
        assert!(report.get(block).is_some(), "{block} missing");
    }
    let schema: Value =
        serde_json::from_str(include_str!("../../../schema/report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    // the schema is not vacuous
    let mut broken = report.clone();
    broken["results"][0]["kind"] = Value::from("WordEx");
    assert!(!validator.is_valid(&broken));

    let hash = report["config_hash"].as_str().unwrap();
    for csv in ["faithfulness.csv", "agreement.csv", "simulatability.csv", "complexity.csv", "radar.csv"] {
        let text = String::from_utf8(read(&ws.path(&format!("out/{csv}")))).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(hash), "{csv}");
    }
    let printed = hleval(&["report", ws.path("out").to_str().unwrap()]);
    assert_eq!(code(&printed), 0);
    assert!(stdout(&printed).contains("agreement_interaction"));

    let again = hleval(&["run", "-c", &cfg, "--out", ws.path("again").to_str().unwrap()]);
    assert_eq!(code(&again), 0);
    assert_eq!(read(&ws.path("out/report.json")), read(&ws.path("again/report.json")));
}

#[test]
fn selected_properties_only() {
    let ws = Workspace::new(20);
    let cfg = ws.config("f.toml", &(base("builtin:linear", "f", r#"["shapley-exact", "bivariate-shapley"]"#) + "properties = [\"faithfulness\"]\n"));
    let out = hleval(&["run", "-c", &cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&read(&ws.path("f/report.json"))).unwrap();
    assert!(report.get("faithfulness").is_some());
    for absent in ["agreement", "simulatability", "complexity"] {
        assert!(report.get(absent).is_none(), "{absent} present");
    }
    assert!(!ws.path("f/complexity.csv").exists());
}

#[test]
fn stdio_adapter_matches_the_builtin_model_bit_for_bit() {
    let ws = Workspace::new(15);
    let methods = r#"["shapley-exact", "ig", "bivariate-shapley"]"#;
    let local = ws.config("local.toml", &base("builtin:linear", "local", methods));
    let remote = ws.config("remote.toml", &base(&format!("adapter:stdio:{}", ws.serve_cmd("linear")), "remote", methods));
    assert_eq!(code(&hleval(&["explain", "-c", &local])), 0);
    let out = hleval(&["explain", "-c", &remote]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["shapley-exact.TokenEx.jsonl", "ig.TokenEx.jsonl", "bivariate-shapley.SpanIntEx.jsonl"] {
        assert!(read(&ws.path(&format!("local/{f}"))) == read(&ws.path(&format!("remote/{f}"))), "{f} differs");
    }
}

#[test]
fn http_adapter_passes_conformance() {
    let ws = Workspace::new(5);
    let mut server = Command::new(BIN)
        .args(["serve", "attention", "--params", ws.path("models.json").to_str().unwrap(), "--http", "127.0.0.1:0"])
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    std::io::BufRead::read_line(&mut std::io::BufReader::new(server.stderr.take().unwrap()), &mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("server announces its url").to_string();
    let out = hleval(&["adapter-check", &url, "--dataset", ws.path("dataset.jsonl").to_str().unwrap()]);
    let _ = server.kill();
    let _ = server.wait();
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS attention"));
}

#[test]
fn adapter_check_over_stdio() {
    let ws = Workspace::new(5);
    let out = hleval(&["adapter-check", &format!("stdio:{}", ws.serve_cmd("linear"))]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS grad-dot"));
    assert!(stdout(&out).contains("PASS gating-attention"));
    let dead = hleval(&["adapter-check", "stdio:exit 0", "--timeout", "5"]);
    assert_eq!(code(&dead), 5);
}

#[test]
fn capability_mismatch_exits_3() {
    let ws = Workspace::new(5);
    let cfg = ws.config(
        "cap.toml",
        &base(&format!("adapter:stdio:{}", ws.serve_cmd("linear")), "cap", r#"["attention", "bivariate-shapley"]"#),
    );
    let out = hleval(&["explain", "-c", &cfg]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("attention"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_2() {
    let ws = Workspace::new(5);
    let no_seed = ws.config("noseed.toml", "model = \"builtin:constant\"\ndataset = \"dataset.jsonl\"\nout_dir = \"o\"\n");
    let out = hleval(&["explain", "-c", &no_seed]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));

    let cfg = ws.config("m.toml", &base("builtin:linear", "m", r#"["shapley-exact", "bivariate-shapley"]"#));
    let out = hleval(&["explain", "-c", &cfg, "--set", "methods=[\"lime\"]"]);
    assert_eq!(code(&out), 2);
    let out = hleval(&["eval", "-c", &cfg]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("shapley-exact.TokenEx.jsonl"));
}

#[test]
fn overrides_win_over_the_file() {
    let ws = Workspace::new(12);
    let cfg = ws.config("o.toml", &base("builtin:linear", "o", r#"["shapley-exact", "bivariate-shapley"]"#));
    let out = hleval(&["run", "-c", &cfg, "--seed", "9", "--set", "k_faith=2", "--set", "properties=[\"faithfulness\"]"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&read(&ws.path("o/report.json"))).unwrap();
    assert_eq!(report["seed"], 9);
    assert_eq!(report["faithfulness"]["k_max"], 2);
}

#[test]
fn selfcheck_passes_and_catches_corruption() {
    let a = hleval(&["selfcheck"]);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&hleval(&["selfcheck"])));
    let bad = hleval(&["selfcheck", "--corrupt-kernel"]);
    assert_ne!(code(&bad), 0);
    assert!(stdout(&bad).contains("FAIL kernel-efficiency"));
}
