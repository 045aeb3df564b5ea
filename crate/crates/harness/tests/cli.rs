use std::process::Command;

fn modnorm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_modnorm"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn train_writes_records_with_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "width = 8\ndepth = 1\nsteps = 10\nn_train = 64\nn_test = 16\n",
    )
    .unwrap();
    let o = modnorm(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--lr",
        "0.05",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("# lr = 0.05"), "{text}");
    assert!(text.contains("# width = 8"), "{text}");
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 11);
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(modnorm(&["train", "--steps", "0"]).status.code(), Some(2));
    assert_eq!(
        modnorm(&["train", "--no-such-key", "1"]).status.code(),
        Some(2)
    );
    assert_eq!(modnorm(&["norms", "--arch", "vgg"]).status.code(), Some(2));
    assert_eq!(modnorm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        modnorm(&["train", "--config", "/nonexistent/c.toml"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn sweep_rejects_bad_thread_setting() {
    let o = Command::new(env!("CARGO_BIN_EXE_modnorm"))
        .args(["sweep", "--lrs", "0.1", "--steps", "1"])
        .env("MODNORM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn norms_prints_text_and_json() {
    let o = modnorm(&["norms", "--arch", "resmlp", "--width", "8", "--depth", "1"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Linear(8, 8)"), "{text}");
    let o = modnorm(&[
        "norms", "--arch", "gpt", "--json", "--width", "8", "--depth", "1",
    ]);
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["arch"], "gpt");
    assert!(doc["leaves"].as_array().unwrap().len() >= 6);
}

#[test]
fn sharpness_prints_triple_and_lipschitz() {
    let o = modnorm(&[
        "sharpness",
        "--arch",
        "resmlp",
        "--json",
        "--loss-value",
        "1.0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let (alpha, sigma, tau) = (
        doc["alpha"].as_f64().unwrap(),
        doc["sigma"].as_f64().unwrap(),
        doc["tau"].as_f64().unwrap(),
    );
    assert!((doc["lipschitz"].as_f64().unwrap() - (sigma * alpha + tau)).abs() < 1e-12);
    let aligned = modnorm(&[
        "sharpness",
        "--arch",
        "resmlp",
        "--json",
        "--ce-tau-aligned",
    ]);
    let doc: serde_json::Value = serde_json::from_slice(&aligned.stdout).unwrap();
    assert_eq!(doc["tau"], 1.0);
    assert_eq!(
        modnorm(&["sharpness", "--broadcast", "l7"]).status.code(),
        Some(2)
    );
}
