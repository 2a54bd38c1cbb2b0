use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hpff(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpff"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HPFF_DATA_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const SMALL: &str = r#"
[run]
method = "hpff"
epochs = 2
batch_size = 32
eval_batch_size = 100

[partition]
modules = 4

[data]
dataset = "synthetic"
train_subset = 120
test_subset = 60
"#;

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_with_overrides_writes_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let o = hpff(&["train", "--config", &cfg, "--method", "hpff", "--k", "4", "--seed", "7", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,split,loss,accuracy,lr,peak_activation_bytes"));
    assert_eq!(metrics.lines().count(), 5);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["run"]["seed"], 7);
    for a in manifest["artifacts"].as_array().unwrap() {
        assert!(dir.path().join(a.as_str().unwrap()).exists(), "{a}");
    }
    let ckpt = fs::read(dir.path().join("run/final.ckpt")).unwrap();
    let again = hpff(&["train", "--config", &cfg, "--method", "hpff", "--k", "4", "--seed", "7", "--out", "run"], dir.path());
    assert_eq!(code(&again), 0);
    assert_eq!(metrics, fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap());
    assert!(ckpt == fs::read(dir.path().join("run/final.ckpt")).unwrap(), "checkpoint bytes changed");
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    assert_eq!(code(&hpff(&["train", "--config", &cfg, "--method", "sgd-magic"], dir.path())), 1);
    assert_eq!(code(&hpff(&["train", "--config", "absent.toml"], dir.path())), 2);
    let o = hpff(&["train", "--config", &cfg, "--dataset", "mnist", "--data-root", "no-such-dir", "--out", "r"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no-such-dir"));
    fs::write(dir.path().join("bad.toml"), "[run]\nmethod = 3\n").unwrap();
    assert_eq!(code(&hpff(&["train", "--config", "bad.toml"], dir.path())), 1);
    assert_eq!(code(&hpff(&["no-such-command"], dir.path())), 1);
}

#[test]
fn probe_and_cka_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    assert_eq!(code(&hpff(&["train", "--config", &cfg, "--out", "h"], dir.path())), 0);
    let common = ["--dataset", "synthetic", "--train-subset", "100", "--test-subset", "50"];
    let mut probe = vec!["probe", "--checkpoint", "h/final.ckpt", "--out", "p"];
    probe.extend(common);
    assert_eq!(code(&hpff(&probe, dir.path())), 0);
    let first = fs::read_to_string(dir.path().join("p/probe.csv")).unwrap();
    assert_eq!(first.lines().count(), 1 + 4);
    assert!(first.starts_with("layer,acc"));
    assert_eq!(code(&hpff(&probe, dir.path())), 0);
    assert_eq!(first, fs::read_to_string(dir.path().join("p/probe.csv")).unwrap());

    let cka = ["cka", "--a", "h/final.ckpt", "--b", "h/final.ckpt", "--dataset", "synthetic", "--out", "c", "--examples", "50"];
    assert_eq!(code(&hpff(&cka, dir.path())), 0);
    let text = fs::read_to_string(dir.path().join("c/cka.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,cka"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.last().unwrap().split(',').next(), Some("mean"));
    for r in &rows {
        let v: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{r}");
    }

    let mlp = write_config(dir.path(), "m.toml", "");
    assert_eq!(code(&hpff(&["train", "--config", &mlp, "--arch", "mlp-4", "--out", "m"], dir.path())), 0);
    let mismatch = ["cka", "--a", "h/final.ckpt", "--b", "m/final.ckpt", "--dataset", "synthetic", "--out", "c2"];
    assert_eq!(code(&hpff(&mismatch, dir.path())), 1);
    let wrong_data = ["probe", "--checkpoint", "h/final.ckpt", "--dataset", "mnist", "--data-root", "d", "--out", "p2"];
    assert_eq!(code(&hpff(&wrong_data, dir.path())), 2);
}

#[test]
fn memstat_is_deterministic_and_pff_is_smaller() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["memstat", "--dataset", "cifar10", "--batch-size", "4", "--k", "4", "--out", "m"];
    let a = hpff(&args, dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let b = hpff(&args, dir.path());
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["schema_version"], 1);
    let modules = report["modules"].as_array().unwrap();
    assert_eq!(modules.len(), 3);
    for m in modules {
        for key in ["plain_estimate_bytes", "pff_estimate_bytes", "measured_plain_bytes", "measured_pff_bytes"] {
            assert!(m[key].as_u64().unwrap() > 0, "{key}");
        }
        assert!(m["measured_pff_bytes"].as_u64() <= m["measured_plain_bytes"].as_u64());
    }
    assert!(dir.path().join("m/memory.json").exists());
}

#[test]
fn compare_summarises_each_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.toml", "");
    let b = write_config(dir.path(), "b.toml", "");
    fs::write(&b, SMALL.replace("\"hpff\"", "\"local\"")).unwrap();
    let o = hpff(&["compare", "--config", &a, &b, "--out", "cmp"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("cmp/summary.csv")).unwrap();
    let rows: Vec<_> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cmp/summary.json")).unwrap()).unwrap();
    for row in json["rows"].as_array().unwrap() {
        let run = dir.path().join(row["run_dir"].as_str().unwrap());
        let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
        let last_test = metrics.lines().filter(|l| l.contains(",test,")).last().unwrap();
        let acc: f64 = last_test.split(',').nth(3).unwrap().parse().unwrap();
        let err = row["test_error"].as_f64().unwrap();
        assert!((err - 100.0 * (1.0 - acc)).abs() < 1e-9);
    }
}

#[test]
fn print_config_shows_defaults_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = hpff(&["print-config", "--method", "local", "--k", "8"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = hpff::config::TrainConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.run.method, hpff::config::Method::Local);
    assert_eq!(cfg.partition.modules, 8);
    assert!(text.contains("weight_decay"));
}

#[cfg(unix)]
#[test]
fn interrupted_compare_writes_a_partial_summary() {
    let dir = tempfile::tempdir().unwrap();
    let long = write_config(dir.path(), "long.toml", "");
    fs::write(&long, SMALL.replace("epochs = 2", "epochs = 500")).unwrap();
    let child = Command::new(env!("CARGO_BIN_EXE_hpff"))
        .args(["compare", "--config", &long, &long, "--out", "cmp"])
        .current_dir(dir.path())
        .spawn()
        .unwrap();
    std::thread::sleep(std::time::Duration::from_millis(1500));
    let sent = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(sent.success());
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cmp/summary.json")).unwrap()).unwrap();
    assert_eq!(json["complete"], false);
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["interrupted"], true);
}
