use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use collogp::equation::preset;
use collogp::kernel::PointSet;
use collogp::linalg::JitterPolicy;
use collogp::model::ModelParams;
use collogp::predict::PosteriorGP;
use collogp_cli::io::{Provenance, Table};
use collogp_cli::run::{ModelFile, TrainedModel};
use serde_json::Value;

fn collogp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collogp"))
        .args(args)
        .env_remove("COLLOGP_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = collogp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = collogp(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const SMALL: &str = r#"
id = "pendulum-i-exact"
[train]
epochs = 5
eval_interval = 1
[sampling]
train_range = [[0.0, 7.3]]
test_range = [[0.0, 28.8]]
n_train = 12
n_test = 40
m_colloc = 6
"#;

fn rows(path: &Path) -> usize {
    Table::read(path).unwrap().rows.len()
}

#[test]
fn simulate_writes_the_pendulum_protocol_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "id = \"pendulum-c-exact\"\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["simulate", "--config", s(&cfg), "--out-dir", s(&a)]);
    ok(&["simulate", "--config", s(&cfg), "--out-dir", s(&b)]);
    assert_eq!(rows(&a.join("train.csv")), 50);
    assert_eq!(rows(&a.join("test.csv")), 800);
    assert_eq!(rows(&a.join("colloc.csv")), 20);
    for f in ["train.csv", "test.csv", "colloc.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let head = fs::read_to_string(a.join("train.csv")).unwrap();
    let mut lines = head.lines();
    assert!(lines.next().unwrap().starts_with("# collogp config_hash="));
    assert_eq!(lines.next().unwrap(), "x0,y");

    // the seed changes the data but not the config hash
    let c = dir.path().join("c");
    ok(&["simulate", "--config", s(&cfg), "--out-dir", s(&c), "--seed", "3"]);
    let (ta, tc) = (Table::read(&a.join("train.csv")).unwrap(), Table::read(&c.join("train.csv")).unwrap());
    assert_ne!(ta.rows, tc.rows);
    let (pa, pc) = (ta.provenance.unwrap(), tc.provenance.unwrap());
    assert_eq!(pa.config_hash, pc.config_hash);
    assert_eq!((pa.seed, pc.seed), (0, 3));
}

#[test]
fn seed_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_collogp"))
        .args(["simulate", "--config", s(&cfg), "--out-dir", s(dir.path())])
        .env("COLLOGP_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    let t = Table::read(&dir.path().join("train.csv")).unwrap();
    assert_eq!(t.provenance.unwrap().seed, 11);
}

#[test]
fn out_of_domain_range_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL.replace("train_range = [[0.0, 7.3]]", "train_range = [[0.0, 40.0]]");
    let cfg = write_config(dir.path(), "c.toml", &bad);
    let err = fails(&["simulate", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert!(err.contains("range out of domain at `sampling.train_range[0]`"), "{err}");
}

#[test]
fn missing_damping_init_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "id = \"pendulum-damped-c-exact\"\n[equation]\npreset = \"pendulum_complete_damped\"\n",
    );
    let err = fails(&["train", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert!(err.contains("schema error at `equation.coeffs[0]`"), "{err}");
}

#[test]
fn one_epoch_smoke_run_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("run");
    let stdout = ok(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--epochs-override", "1", "--mc-samples", "2"]);
    let printed: Value = serde_json::from_str(&stdout).unwrap();
    for f in ["metrics.json", "trace.csv", "model.bin", "predictions.csv", "config.toml", "train.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(printed, metrics);
    for k in ["rmse", "mnll", "final_rmse", "final_mnll"] {
        assert!(metrics["metrics"][k].as_f64().unwrap().is_finite(), "{k}");
    }
    assert_eq!(metrics["metrics"]["best_epoch"], 1);
    assert!(metrics["params"]["v"].as_f64().unwrap() > 0.0);
    assert_eq!(metrics["provenance"]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(rows(&out.join("trace.csv")), 1);
    assert_eq!(Table::read(&out.join("trace.csv")).unwrap().header, ["epoch", "elbo", "rmse", "mnll"]);
    // the written config is a full config that reproduces the hash
    let again = collogp_cli::ExperimentConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(again.hash(), metrics["provenance"]["config_hash"].as_str().unwrap());
}

#[test]
fn repeated_training_gives_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out-dir", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--out-dir", s(&b)]);
    for f in ["metrics.json", "trace.csv", "predictions.csv", "model.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_from_simulated_files_matches_the_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let data = dir.path().join("data");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--config", s(&cfg), "--out-dir", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--out-dir", s(&a), "--data-dir", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--out-dir", s(&b)]);
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());

    // data from another seed is refused unless forced
    let err = fails(&["train", "--config", s(&cfg), "--out-dir", s(&a), "--data-dir", s(&data), "--seed", "1"]);
    assert!(err.contains("--force"), "{err}");
    ok(&["train", "--config", s(&cfg), "--out-dir", s(&a), "--data-dir", s(&data), "--seed", "1", "--force"]);
}

#[test]
fn predict_and_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out-dir", s(&run)]);
    let preds = dir.path().join("p.csv");
    ok(&[
        "predict",
        "--model",
        s(&run.join("model.bin")),
        "--inputs",
        s(&run.join("test.csv")),
        "--out",
        s(&preds),
    ]);
    // predicting the test inputs reproduces the training run's predictions
    assert_eq!(fs::read(&preds).unwrap(), fs::read(run.join("predictions.csv")).unwrap());
    let stdout = ok(&[
        "evaluate",
        "--predictions",
        s(&preds),
        "--truth",
        s(&run.join("test.csv")),
        "--out",
        s(&dir.path().join("m.json")),
    ]);
    let e: Value = serde_json::from_str(&stdout).unwrap();
    let m: Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(e["rmse"], m["metrics"]["rmse"]);
    assert!((e["mnll"].as_f64().unwrap() - m["metrics"]["mnll"].as_f64().unwrap()).abs() < 1e-12);

    // source and derivative predictions
    let src = dir.path().join("g.csv");
    ok(&["predict", "--model", s(&run.join("model.bin")), "--inputs", s(&run.join("test.csv")), "--out", s(&src), "--source", "g"]);
    let g = Table::read(&src).unwrap();
    assert_eq!(g.rows.len(), 40);
    assert!(g.rows.iter().flatten().all(|v| v.is_finite()));
    let d2 = dir.path().join("d2.csv");
    ok(&["predict", "--model", s(&run.join("model.bin")), "--inputs", s(&run.join("test.csv")), "--out", s(&d2), "--deriv", "dt2"]);
    assert_eq!(Table::read(&d2).unwrap().header, ["x0", "mean", "var"]);
    let err = fails(&["predict", "--model", s(&run.join("model.bin")), "--inputs", s(&run.join("test.csv")), "--deriv", "dx2"]);
    assert!(err.contains("dx2"), "{err}");
    let err = fails(&["predict", "--model", s(&run.join("model.bin")), "--inputs", s(&run.join("test.csv")), "--source", "h"]);
    assert!(err.contains("no source `h`"), "{err}");
}

#[test]
fn evaluate_checks() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let prov = "# collogp config_hash=00 seed=0 version=0\n";
    let a = write_config(p, "a.csv", &format!("{prov}x0,mean,var\n0,0,1\n1,0,1\n"));
    let b = write_config(p, "b.csv", &format!("{prov}x0,y\n0,1\n1,1\n"));
    let e: Value = serde_json::from_str(&ok(&["evaluate", "--predictions", s(&a), "--truth", s(&a), "--out-dir", s(p)])).unwrap();
    assert_eq!(e["rmse"], 0.0);
    let e: Value = serde_json::from_str(&ok(&["evaluate", "--predictions", s(&a), "--truth", s(&b), "--out-dir", s(p)])).unwrap();
    assert_eq!(e["rmse"], 1.0);
    assert!(p.join("metrics.json").exists());

    let short = write_config(p, "c.csv", &format!("{prov}x0,y\n0,1\n"));
    let err = fails(&["evaluate", "--predictions", s(&a), "--truth", s(&short), "--out-dir", s(p)]);
    assert!(err.contains("dimension mismatch"), "{err}");

    let other = write_config(p, "d.csv", "# collogp config_hash=11 seed=0 version=0\nx0,y\n0,1\n1,1\n");
    let err = fails(&["evaluate", "--predictions", s(&a), "--truth", s(&other), "--out-dir", s(p)]);
    assert!(err.contains("provenance differs"), "{err}");
    ok(&["evaluate", "--predictions", s(&a), "--truth", s(&other), "--out-dir", s(p), "--force"]);
}

#[test]
fn converged_noise_free_regression_interpolates() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
        id = "pendulum-gpr-exact"
        [model]
        log_beta = 16.0
        [train]
        epochs = 200
        lr = 0.05
        learn_beta = false
        [sampling]
        train_range = [[0.0, 7.3]]
        test_range = [[0.0, 28.8]]
        n_train = 15
        n_test = 30
        m_colloc = 0
    "#;
    let cfg = write_config(dir.path(), "c.toml", text);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out-dir", s(&run)]);
    let preds = dir.path().join("p.csv");
    ok(&["predict", "--model", s(&run.join("model.bin")), "--inputs", s(&run.join("train.csv")), "--out", s(&preds)]);
    let mean = Table::read(&preds).unwrap().column("mean").unwrap();
    let y = Table::read(&run.join("train.csv")).unwrap().column("y").unwrap();
    for (m, y) in mean.iter().zip(&y) {
        assert!((m - y).abs() < 1e-3, "{m} vs {y}");
    }
}

#[test]
fn untrained_model_predicts_the_prior() {
    let dir = tempfile::tempdir().unwrap();
    let spec = preset("pendulum_incomplete").unwrap();
    let train_x = PointSet::from_scalars(&[0.5, 1.5, 2.0]);
    let colloc = PointSet::from_scalars(&[1.0, 4.0]);
    let mut params = ModelParams::init(1, Some(&spec));
    params.kernel_u.log_amp = 0.7;
    let post = PosteriorGP::prior(Some(spec), train_x, colloc, params, &JitterPolicy::default()).unwrap();
    let file = ModelFile {
        provenance: Provenance::new(0, "00".into()),
        input_names: vec!["t".into()],
        model: TrainedModel::Autoip(post),
    };
    let model = dir.path().join("model.bin");
    file.save(&model).unwrap();
    let inputs = write_config(dir.path(), "q.csv", "x0\n-3\n0.5\n2.2\n9\n");
    let out = dir.path().join("p.csv");
    ok(&["predict", "--model", s(&model), "--inputs", s(&inputs), "--out", s(&out)]);
    let t = Table::read(&out).unwrap();
    for (m, v) in t.column("mean").unwrap().iter().zip(t.column("var").unwrap()) {
        assert!(m.abs() < 1e-12);
        assert!((v - 0.7f64.exp()).abs() < 1e-9 * 0.7f64.exp(), "{v}");
    }
}

#[test]
fn reproduce_summarizes_seeds_and_the_damping_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
        id = "pendulum-damped-c-exact"
        [train]
        epochs = 4
        [sampling]
        train_range = [[0.0, 6.0]]
        test_range = [[0.0, 24.3]]
        n_train = 8
        n_test = 20
        m_colloc = 5
    "#;
    let cfg = write_config(dir.path(), "c.toml", text);
    let out = dir.path().join("rep");
    let stdout = ok(&["reproduce", "--config", s(&cfg), "--seeds", "0,1,2", "--out-dir", s(&out)]);
    let summary: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 3);
    let b = &summary["coeffs"]["b"];
    assert!(b["mean"].as_f64().unwrap() > 0.0 && b["std"].as_f64().unwrap() >= 0.0);
    assert!(summary["rmse"]["mean"].as_f64().unwrap().is_finite());
    for seed in 0..3 {
        assert!(out.join(format!("seed-{seed}/metrics.json")).exists());
    }
    assert!(out.join("summary.json").exists());
    let err = fails(&["reproduce", "--experiment", "pendulum-q-exact", "--out-dir", s(&out)]);
    assert!(err.contains("unknown experiment"), "{err}");
}

#[test]
fn grid_files_can_stand_in_for_the_solver() {
    let dir = tempfile::tempdir().unwrap();
    let mut grid = String::from("t,x,u\n");
    for i in 0..=10 {
        for j in 0..=20 {
            let (t, x) = (i as f64 * 0.1, -1.0 + j as f64 * 0.1);
            grid.push_str(&format!("{t},{x},{}\n", (1.0 - t) * x * x));
        }
    }
    write_config(dir.path(), "grid.csv", &grid);
    let text = r#"
        method = "autoip"
        [data]
        kind = "grid"
        path = "grid.csv"
        [sampling]
        train_range = [[0.0, 0.3], [-1.0, 1.0]]
        test_range = [[0.0, 1.0], [-1.0, 1.0]]
        n_train = 10
        n_test = 15
        m_colloc = 4
        [equation]
        preset = "allen_cahn_incomplete"
        [train]
        epochs = 3
    "#;
    let cfg = write_config(dir.path(), "c.toml", text);
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out-dir", s(&out)]);
    let test = Table::read(&out.join("test.csv")).unwrap();
    assert_eq!(test.header, ["x0", "x1", "y"]);
    for r in &test.rows {
        assert!((r[2] - (1.0 - r[0]) * r[1] * r[1]).abs() < 0.02);
    }
}

#[test]
fn csv_datasets_train_directly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut train = String::from("x0,y\n");
    let mut test = String::from("x0,y\n");
    for i in 0..10 {
        let t = i as f64 * 0.3;
        train.push_str(&format!("{t},{}\n", (1.3 * t).sin() + 0.5));
        test.push_str(&format!("{},{}\n", t + 0.15, (1.3 * (t + 0.15)).sin() + 0.5));
    }
    write_config(p, "train.csv", &train);
    write_config(p, "test.csv", &test);
    let text = r#"
        method = "autoip"
        [data]
        kind = "csv"
        train = "train.csv"
        test = "test.csv"
        colloc_range = [[0.0, 3.0]]
        m_colloc = 4
        [equation]
        preset = "first_order_latent_force"
        [[equation.coeffs]]
        name = "b"
        init = 0.5
        positive = true
        [[equation.coeffs]]
        name = "c"
        init = 0.1
        positive = true
        [train]
        epochs = 3
    "#;
    let cfg = write_config(p, "c.toml", text);
    let stdout = ok(&["train", "--config", s(&cfg), "--out-dir", s(&p.join("run"))]);
    let m: Value = serde_json::from_str(&stdout).unwrap();
    assert!(m["params"]["coeffs"]["b"].as_f64().unwrap() > 0.0);
    assert!(m["params"]["source_kernels"]["g"]["log_s"].is_array());
}
