use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn parnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = r#"{"heads": 2, "d_model": 8, "d_p": 4, "d_v": 8, "d_e": 4, "d_t": 8,
    "epochs": 2, "batch_size": 4, "validate_every": 1}"#;

/// Synthetic data plus a trained checkpoint in `dir`.
fn fixture(dir: &Path) {
    fs::write(dir.join("spec.json"), r#"{"scenes": 12, "d_v": 8}"#).unwrap();
    fs::write(dir.join("config.json"), CONFIG).unwrap();
    let out = parnet(&["synth", "--spec", s(&dir.join("spec.json")), "--seed", "3", "--out-dir", s(&dir.join("data"))]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("12 scenes"));
    let out = parnet(&[
        "train",
        "--config", s(&dir.join("config.json")),
        "--features", s(&dir.join("data/features.parf")),
        "--captions", s(&dir.join("data/captions.jsonl")),
        "--out", s(&dir.join("model.ck")),
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
}

fn with_data<'a>(dir: &'a Path, head: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = head.iter().map(|x| x.to_string()).collect();
    v.extend([
        "--ckpt".into(),
        dir.join("model.ck").to_str().unwrap().into(),
        "--features".into(),
        dir.join("data/features.parf").to_str().unwrap().into(),
        "--captions".into(),
        dir.join("data/captions.jsonl").to_str().unwrap().into(),
    ]);
    v
}

fn run_owned(args: &[String]) -> Output {
    parnet(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);

    let out = run_owned(&with_data(d, &["evaluate"]));
    assert_eq!(code(&out), 0, "{out:?}");
    let table = stdout(&out);
    assert!(table.contains("image-to-text") && table.contains("R@10"));

    let args = with_data(d, &["evaluate", "--k", "1,3", "--json"]);
    let out = run_owned(&args);
    assert_eq!(code(&out), 0, "{out:?}");
    let reports: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(reports[0]["queries"], 12);
    assert_eq!(reports[1]["recalls"][1]["k"], 3);

    let mut args = with_data(d, &["score"]);
    args.extend(["--image-id".into(), "2".into(), "--caption-id".into(), "5".into()]);
    let first = run_owned(&args);
    assert_eq!(code(&first), 0, "{first:?}");
    let score: f64 = stdout(&first).trim().parse().unwrap();
    assert!((-1.0..=1.0).contains(&score));
    assert_eq!(stdout(&run_owned(&args)), stdout(&first));

    let mut args = with_data(d, &["dump-attention"]);
    let dump = d.join("attn.json");
    args.extend(["--image-id".into(), "1".into(), "--caption-id".into(), "1".into()]);
    args.extend(["--out".into(), dump.to_str().unwrap().into()]);
    let out = run_owned(&args);
    assert_eq!(code(&out), 0, "{out:?}");
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(record["image_id"], 1);
    assert_eq!(record["omega_i"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_reports_and_fails_on_zero_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, r#"{"heads": 3, "d_model": 24, "d_p": 8, "d_v": 6, "d_e": 5, "d_t": 7}"#).unwrap();
    let out = parnet(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("spatial.rho_sigma"));
    let out = parnet(&["gradcheck", "--config", s(&cfg), "--tol", "0"]);
    assert_eq!(code(&out), 3, "{out:?}");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&parnet(&[])), 1);
    assert_eq!(code(&parnet(&["frobnicate"])), 1);
    assert_eq!(code(&parnet(&["evaluate", "--ckpt", "x"])), 1);
    assert_eq!(code(&parnet(&["gradcheck", "--config", "c.json", "--tol", "tiny"])), 1);
    assert_eq!(code(&parnet(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);

    let out = parnet(&["gradcheck", "--config", s(&d.join("missing.json"))]);
    assert_eq!(code(&out), 2);

    fs::write(d.join("bad.json"), r#"{"heads": 5, "d_model": 8}"#).unwrap();
    assert_eq!(code(&parnet(&["gradcheck", "--config", s(&d.join("bad.json"))])), 2);

    let mut args = with_data(d, &["score"]);
    args.extend(["--image-id".into(), "999".into(), "--caption-id".into(), "1".into()]);
    let out = run_owned(&args);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("999"));

    let bytes = fs::read(d.join("data/features.parf")).unwrap();
    fs::write(d.join("data/features.parf"), &bytes[..bytes.len() - 5]).unwrap();
    assert_eq!(code(&run_owned(&with_data(d, &["evaluate"]))), 2);

    fs::write(d.join("model.ck"), b"not a checkpoint").unwrap();
    fs::write(d.join("data/features.parf"), &bytes).unwrap();
    assert_eq!(code(&run_owned(&with_data(d, &["evaluate"]))), 2);
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let cfg = CONFIG.replace("\"epochs\": 2", "\"epochs\": 20, \"learning_rate\": 1e308, \"grad_clip\": 1e308");
    fs::write(d.join("hot.json"), cfg).unwrap();
    let out = parnet(&[
        "train",
        "--config", s(&d.join("hot.json")),
        "--features", s(&d.join("data/features.parf")),
        "--captions", s(&d.join("data/captions.jsonl")),
        "--out", s(&d.join("hot.ck")),
    ]);
    assert_eq!(code(&out), 3, "{out:?}");
}
