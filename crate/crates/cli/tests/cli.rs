use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn maskfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskfed")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn gen_data(path: &Path, seed: u64) {
    let out = maskfed(&[
        "gen-data",
        "--rows",
        "600",
        "--dim",
        "4",
        "--seed",
        &seed.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, n: usize, extra: &str) -> std::path::PathBuf {
    let ls: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let clients: Vec<String> =
        ls.iter().enumerate().map(|(i, l)| format!(r#"{{"id":{i},"addr":"{}"}}"#, l.local_addr().unwrap())).collect();
    let path = dir.join("run.json");
    std::fs::write(
        &path,
        format!(
            r#"{{"clients":[{}],"global_epochs":3,"dataset_path":"data.csv","seeds":{{"data":1,"shuffle":2}}{extra}}}"#,
            clients.join(",")
        ),
    )
    .unwrap();
    path
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("c.csv"));
    gen_data(&a, 5);
    gen_data(&b, 5);
    gen_data(&c, 6);
    let a = std::fs::read(a).unwrap();
    assert_eq!(a, std::fs::read(b).unwrap());
    assert_ne!(a, std::fs::read(c).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "f0,f1,f2,f3,label,age");
    assert_eq!(text.lines().count(), 601);
}

#[test]
fn mock_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(&dir.path().join("data.csv"), 1);
    let cfg = write_config(dir.path(), 2, r#","insecure":true,"io_timeout_secs":10"#);
    let out = maskfed(&["mock", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("auc"));
    let model = dir.path().join("out/final.bin");
    assert!(model.exists());
    let eval = maskfed(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        dir.path().join("data.csv").to_str().unwrap(),
        "--json",
    ]);
    assert!(eval.status.success());
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["n_eval"], 600);
    assert!(report["auc"].as_f64().unwrap() > 0.9);
}

#[test]
fn separate_coordinator_and_client_processes() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(&dir.path().join("data.csv"), 2);
    let cfg = write_config(dir.path(), 3, r#","insecure":true,"io_timeout_secs":10"#);
    let cfg = cfg.to_str().unwrap();
    let clients: Vec<_> = (0..3)
        .map(|i| {
            Command::new(env!("CARGO_BIN_EXE_maskfed"))
                .args(["client", "--id", &i.to_string(), "--config", cfg])
                .env("RUST_LOG", "warn")
                .stderr(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    let out = maskfed(&["coordinator", "--config", cfg, "--out", dir.path().join("dist").to_str().unwrap()]);
    for mut c in clients {
        assert!(c.wait().unwrap().success());
    }
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mock = maskfed(&["mock", "--config", cfg, "--out", dir.path().join("mock").to_str().unwrap()]);
    assert!(mock.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("dist/final.bin")).unwrap(),
        std::fs::read(dir.path().join("mock/final.bin")).unwrap()
    );
}

#[test]
fn plaintext_keys_are_refused_by_default() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(&dir.path().join("data.csv"), 3);
    let cfg = write_config(dir.path(), 2, r#","io_timeout_secs":2"#);
    let out = maskfed(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not confidential"));
    assert!(!dir.path().join("out/final.bin").exists());
}

#[test]
fn suite_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(&dir.path().join("data.csv"), 4);
    let cfg = write_config(dir.path(), 5, "");
    let out = maskfed(&["suite", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let suite: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/suite.json")).unwrap()).unwrap();
    let regimes: Vec<&str> =
        suite["entries"].as_array().unwrap().iter().map(|e| e["regime"].as_str().unwrap()).collect();
    assert_eq!(regimes, ["iid", "non_iid_by_attribute", "iid_shifted_train_test"]);
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"clients":[],"global_epochs":1,"dataset_path":"x.csv"}"#).unwrap();
    let out = maskfed(&["mock", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least one client"));
}
