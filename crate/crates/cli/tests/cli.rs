use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use streamfpca::eval::FpcTruth;
use streamfpca::modelfile::{FitMeta, ModelFile};
use streamfpca::simgen::{Setting, SimTruth};
use streamfpca::{GeneralizedStiefel64, SplineSpace64};
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_streamfpca"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, setting: &str, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("{setting}-{n}-{seed}.ndjson"));
    ok(&[
        "simulate",
        "--setting",
        setting,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]);
    out
}

fn fit_small(dir: &Path, data: &Path, tag: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let model = dir.join(format!("{tag}.model"));
    let metrics = dir.join(format!("{tag}.metrics.csv"));
    let mut args = vec![
        "fit",
        "--data",
        s(data),
        "--model-out",
        s(&model),
        "--metrics-out",
        s(&metrics),
        "--epochs",
        "2",
        "--n-init",
        "200",
        "--seed",
        "11",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    (model, metrics)
}

fn write_model(path: &Path, space: &SplineSpace64, theta: DMatrix<f64>, lambda: &[f64]) {
    let manifold = GeneralizedStiefel64::new(space.gram().clone()).unwrap();
    let theta = manifold.g_orthonormalize(&theta).unwrap().into_matrix();
    let model = ModelFile {
        degree: space.degree(),
        inner_knots: space.marginals().iter().map(|m| m.inner_knots()).collect(),
        domain: space.bounds(),
        theta,
        lambda: DVector::from_column_slice(lambda),
        sigma2: 0.25,
        delta: 1e-4,
        tau: 1e-3,
        tau_path: vec![(1, 1e-3)],
        meta: FitMeta {
            seed: 0,
            epochs: 1,
            steps: 0,
            subjects: 0,
            optimizer: "rsgd".into(),
            averaging: false,
        },
    };
    model.save(path).unwrap();
}

fn ramp(p: usize, r: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, r, |i, j| {
        ((i * (j + 2) + 3 * j) as f64 * 0.7).sin() + if i == j { 2.0 } else { 0.0 }
    })
}

#[test]
fn simulate_writes_one_line_per_subject_with_truth() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "1d", 5000, 1);
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 5000);
    let truth = SimTruth::read(&dir.path().join("1d-5000-1.truth.json")).unwrap();
    assert_eq!(truth.setting, Setting::OneD);
    assert_eq!(truth.n, 5000);
}

#[test]
fn simulate_is_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let da = simulate(a.path(), "2d", 50, 9);
    let db = simulate(b.path(), "2d", 50, 9);
    assert_eq!(std::fs::read(da).unwrap(), std::fs::read(db).unwrap());
    let dc = simulate(b.path(), "2d", 50, 10);
    assert_ne!(
        std::fs::read(a.path().join("2d-50-9.ndjson")).unwrap(),
        std::fs::read(dc).unwrap()
    );
}

#[test]
fn simulate_rejects_zero_subjects() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.ndjson");
    let res = run(&["simulate", "--setting", "1d", "--n", "0", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn fit_twice_gives_identical_files() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "1d", 800, 4);
    let (m1, x1) = fit_small(dir.path(), &data, "a", &[]);
    let out = bin()
        .env("STREAMFPCA_WORKERS", "1")
        .args([
            "fit",
            "--data",
            s(&data),
            "--model-out",
            s(&dir.path().join("b.model")),
            "--metrics-out",
            s(&dir.path().join("b.metrics.csv")),
            "--epochs",
            "2",
            "--n-init",
            "200",
            "--seed",
            "11",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(&m1).unwrap(),
        std::fs::read(dir.path().join("b.model")).unwrap()
    );
    assert_eq!(
        std::fs::read(&x1).unwrap(),
        std::fs::read(dir.path().join("b.metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.path().join("a.tuning.csv")).unwrap(),
        std::fs::read(dir.path().join("b.tuning.csv")).unwrap()
    );
}

#[test]
fn fit_outputs_are_well_formed() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "1d", 600, 2);
    let (model, metrics) = fit_small(dir.path(), &data, "m", &["--rank", "2"]);
    let loaded = ModelFile::<f64>::load(&model).unwrap();
    assert_eq!(loaded.rank(), 2);
    assert_eq!(loaded.meta.seed, 11);
    assert_eq!(loaded.meta.epochs, 2);
    assert_eq!(loaded.meta.subjects, 600);
    assert_eq!(loaded.meta.steps, 2 * 600 / 5);
    let metrics = std::fs::read_to_string(metrics).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "step,grad_norm,v_score,tau,lambda_1,lambda_2,sigma2"
    );
    assert_eq!(metrics.lines().count(), 1 + loaded.meta.steps);
    let tuning = std::fs::read_to_string(dir.path().join("m.tuning.csv")).unwrap();
    assert_eq!(
        tuning.lines().next().unwrap(),
        "block,candidate,tau,abv,selected"
    );
    assert!(tuning.lines().count() > 1);
}

#[test]
fn fit_reads_config_file() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "1d", 400, 5);
    let cfg = dir.path().join("fit.cfg");
    std::fs::write(
        &cfg,
        "preset = 1d\nrank = 2 # two components\nepochs = 1\nn_init = 100\n",
    )
    .unwrap();
    let model = dir.path().join("c.model");
    ok(&[
        "fit",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--model-out",
        s(&model),
        "--metrics-out",
        s(&dir.path().join("c.csv")),
        "--optimizer",
        "rsgd",
    ]);
    let loaded = ModelFile::<f64>::load(&model).unwrap();
    assert_eq!(loaded.rank(), 2);
    assert_eq!(loaded.meta.optimizer, "rsgd");
    assert_eq!(loaded.meta.epochs, 1);
}

#[test]
fn config_errors_name_the_field() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "1d", 50, 5);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "rank = 3\nbogus_key = 1\n").unwrap();
    let common = [
        "--data",
        s(&data),
        "--model-out",
        "unused.model",
        "--metrics-out",
        "unused.csv",
    ];
    let res = run(&[&["fit", "--config", s(&cfg)][..], &common[..]].concat());
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("bogus_key"));

    let res = run(&[&["fit", "--beta1", "1.5"][..], &common[..]].concat());
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("beta1"));

    let res = run(&[&["fit", "--averaging", "maybe"][..], &common[..]].concat());
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("averaging"));
}

#[test]
fn data_errors_exit_with_data_code() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "id,loc_1,y\na,0.5,1.0\na,1.5,2.0\n").unwrap();
    let res = run(&[
        "fit",
        "--data",
        s(&data),
        "--model-out",
        "x",
        "--metrics-out",
        "y",
    ]);
    assert_eq!(res.status.code(), Some(3));

    let res = run(&[
        "fit",
        "--data",
        s(&dir.path().join("missing.ndjson")),
        "--model-out",
        "x",
        "--metrics-out",
        "y",
    ]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn eval_report_lists_each_component() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "1d", 600, 8);
    let (model, _) = fit_small(dir.path(), &data, "e", &[]);
    let report = dir.path().join("r.json");
    let out = ok(&[
        "eval",
        "--model",
        s(&model),
        "--truth",
        "builtin:1d",
        "--report",
        s(&report),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("phi_")).count(), 3);
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["components"], 3);
    assert_eq!(doc["rmse"].as_array().unwrap().len(), 3);
    assert_eq!(doc["setting"], "1d");

    let sidecar = ok(&[
        "eval",
        "--model",
        s(&model),
        "--truth",
        s(&dir.path().join("1d-600-8.truth.json")),
    ]);
    assert_eq!(sidecar.stdout, out.stdout);
}

#[test]
fn eval_failures() {
    let dir = TempDir::new().unwrap();
    let missing = run(&[
        "eval",
        "--model",
        s(&dir.path().join("none.model")),
        "--truth",
        "builtin:1d",
    ]);
    assert_eq!(missing.status.code(), Some(3));

    let space = SplineSpace64::new(&[(0.0, 1.0)], &[5], 3).unwrap();
    let model = dir.path().join("one.model");
    write_model(&model, &space, ramp(space.len(), 2), &[0.4, 0.1]);
    let mismatch = run(&["eval", "--model", s(&model), "--truth", "builtin:2d"]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("domain"));

    let unknown = run(&["eval", "--model", s(&model), "--truth", "builtin:3d"]);
    assert_eq!(unknown.status.code(), Some(2));
}

/// Least-squares projection of the true components onto the spline space,
/// with inner products by composite Simpson quadrature.
fn projected_truth(space: &SplineSpace64, truth: &SimTruth, r: usize) -> DMatrix<f64> {
    let n = 20_000;
    let h = 1.0 / n as f64;
    let mut rhs = DMatrix::zeros(space.len(), r);
    for i in 0..=n {
        let t = i as f64 * h;
        let w = h / 3.0
            * if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
        let b = space.eval(&[t]).unwrap();
        for c in 0..r {
            let f = truth.eigenfunction(c, &[t]);
            for j in 0..space.len() {
                rhs[(j, c)] += w * b[j] * f;
            }
        }
    }
    space.gram().clone().cholesky().unwrap().solve(&rhs)
}

#[test]
fn eval_of_projected_truth_hits_spline_floor() {
    let dir = TempDir::new().unwrap();
    let truth = SimTruth::new(Setting::OneD, 0, 0);
    let space = SplineSpace64::new(&[(0.0, 1.0)], &[5], 3).unwrap();
    let theta = projected_truth(&space, &truth, 3);
    let model = dir.path().join("proj.model");
    write_model(&model, &space, theta, &[0.4, 0.1, 0.4 / 9.0]);
    let report = dir.path().join("proj.json");
    ok(&[
        "eval",
        "--model",
        s(&model),
        "--truth",
        "builtin:1d",
        "--report",
        s(&report),
    ]);
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let rmse: Vec<f64> = doc["rmse"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(rmse[0] < 0.01, "{rmse:?}");
    assert!(
        rmse[0] < 1e-8,
        "constants are in the spline space: {rmse:?}"
    );
    assert!(rmse.iter().all(|&e| e < 0.02), "{rmse:?}");
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn export_1d_grid() {
    let dir = TempDir::new().unwrap();
    let space = SplineSpace64::new(&[(0.0, 1.0)], &[5], 3).unwrap();
    let theta = GeneralizedStiefel64::new(space.gram().clone())
        .unwrap()
        .g_orthonormalize(&ramp(space.len(), 3))
        .unwrap()
        .into_matrix();
    let model = dir.path().join("m1.model");
    write_model(&model, &space, theta.clone(), &[0.3, 0.2, 0.1]);
    let out = dir.path().join("f.csv");
    ok(&[
        "export-fpc",
        "--model",
        s(&model),
        "--grid",
        "201",
        "--out",
        s(&out),
    ]);
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["loc_1", "fpc_1", "fpc_2", "fpc_3"]);
    assert_eq!(rows.len(), 201);
    assert_eq!(rows[0][0], 0.0);
    assert_eq!(rows[200][0], 1.0);
    for row in &rows {
        let b = space.eval(&row[..1]).unwrap();
        for r in 0..3 {
            let expect = theta.column(r).dot(&b);
            assert!((row[1 + r] - expect).abs() < 1e-12, "{row:?}");
        }
    }
}

#[test]
fn export_2d_grid() {
    let dir = TempDir::new().unwrap();
    let space = SplineSpace64::new(&[(0.0, 1.0), (0.0, 1.0)], &[5, 5], 3).unwrap();
    let model = dir.path().join("m2.model");
    write_model(&model, &space, ramp(space.len(), 2), &[1.0, 0.5]);
    let theta = ModelFile::<f64>::load(&model).unwrap().theta;
    let out = dir.path().join("f2.csv");
    ok(&[
        "export-fpc",
        "--model",
        s(&model),
        "--grid",
        "101",
        "--out",
        s(&out),
    ]);
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["loc_1", "loc_2", "fpc_1", "fpc_2"]);
    assert_eq!(rows.len(), 10201);
    for row in rows.iter().step_by(97) {
        let b = space.eval(&row[..2]).unwrap();
        for r in 0..2 {
            assert!((row[2 + r] - theta.column(r).dot(&b)).abs() < 1e-12);
        }
    }
}

#[test]
fn invalid_worker_count_is_a_config_error() {
    let out = bin()
        .env("STREAMFPCA_WORKERS", "zero")
        .args(["eval", "--model", "m", "--truth", "builtin:1d"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
