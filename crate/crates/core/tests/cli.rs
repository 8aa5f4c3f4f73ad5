//! Command-line workflows on small synthetic datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use velomix::io::plot::{scatter, Series};

fn run(args: &[&str]) {
    let full: Vec<&str> = std::iter::once("velomix").chain(args.iter().copied()).collect();
    velomix::cli::run(full).unwrap_or_else(|e| panic!("{args:?}: {e}"));
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn simulate(dir: &Path, preset: &str, cells: usize, extra: &[&str]) {
    let cells = cells.to_string();
    let mut args = vec!["simulate", "--seed", "3", "--preset", preset, "--cells", &cells];
    let out = p(dir);
    args.extend(["--out", &out]);
    args.extend(extra);
    run(&args);
}

fn metrics(run_dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(run_dir.join("metrics.json")).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
    out.sort();
    out
}

#[test]
fn simulate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&a, "S1", 120, &[]);
    simulate(&b, "S1", 120, &[]);
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.iter().any(|f| f.ends_with("unspliced.csv")));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn mtx_datasets_feed_the_steady_state_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("steady");
    simulate(&data, "S1", 100, &["--format", "mtx"]);
    assert!(data.join("spliced.mtx").exists());
    run(&["fit-steady", "--seed", "0", "--format", "mtx", "--input", &p(&data), "--out", &p(&out)]);
    let params = fs::read_to_string(out.join("params.csv")).unwrap();
    assert_eq!(params.lines().count(), 101);
}

#[test]
fn em_fit_then_evaluate_reports_time_correlation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("em");
    simulate(&data, "S1", 150, &["--noise", "0.05"]);
    run(&["fit-em", "--seed", "0", "--set", "em_max_iter=5", "--input", &p(&data), "--out", &p(&out)]);
    run(&["evaluate", "--seed", "0", "--run", &p(&out), "--input", &p(&data)]);
    let m = metrics(&out);
    assert_eq!(m["method"], "em");
    let k = m["k_t"].as_f64().unwrap();
    assert!(k > 0.5, "k_t {k}");
    assert!(m["mse_train"].as_f64().unwrap() >= 0.0);
}

#[test]
fn vae_fit_evaluate_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("vae");
    simulate(&data, "S2", 150, &[]);
    run(&[
        "fit-vae", "--seed", "1", "--model", "full", "--epochs", "3", "--set", "hidden=24,12", "--input", &p(&data), "--out",
        &p(&out),
    ]);
    for f in ["params.csv", "times.csv", "rho.csv", "velocity.csv", "split.csv", "history.csv", "fit.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    run(&["evaluate", "--seed", "1", "--run", &p(&out), "--input", &p(&data)]);
    let m = metrics(&out);
    assert!(m["k_t"].as_f64().is_some());
    assert!(m["mse_test"].as_f64().is_some());
    assert_eq!(m["per_gene_mse"].as_array().unwrap().len(), 100);

    run(&["plot", "--seed", "1", "--genes", "g000,markerA_00", "--run", &p(&out), "--input", &p(&data)]);
    let plots = files(&out.join("plots"));
    assert_eq!(plots.len(), 7);
    for f in &plots {
        let svg = fs::read_to_string(f).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{}", f.display());
        assert_eq!(svg.matches("<g ").count(), svg.matches("</g>").count());
        assert!(svg.matches("<circle").count() >= 150, "{}", f.display());
    }

    let empty = tmp.path().join("none");
    run(&["plot", "--seed", "1", "--genes", "", "--run", &p(&out), "--input", &p(&data), "--out", &p(&empty)]);
    assert!(!empty.exists() || files(&empty).is_empty());
}

fn circles(svg: &str) -> Vec<(f64, f64, f64)> {
    let attr = |tag: &str, name: &str| -> f64 {
        let key = format!(" {name}=\"");
        let start = tag.find(&key).unwrap() + key.len();
        tag[start..].split('"').next().unwrap().parse().unwrap()
    };
    svg.lines().filter(|l| l.starts_with("<circle")).map(|l| (attr(l, "cx"), attr(l, "cy"), attr(l, "r"))).collect()
}

#[test]
fn perfect_fit_overlays_the_observations() {
    let obs: Vec<(f64, f64)> = (0..60).map(|i| (i as f64 * 0.3, (i as f64 * 0.3).sin() * 4.0)).collect();
    let series = |name: &str, r: f64| Series { name: name.into(), points: obs.clone(), color: "#000".into(), radius: r, opacity: 0.5 };
    let svg = scatter("t", "x", "y", &[series("cells", 2.0), series("fitted", 1.2)]);
    let c = circles(&svg);
    // 60 observed, legend, 60 fitted, legend
    assert_eq!(c.len(), 122);
    let observed = &c[0..60];
    let fitted = &c[61..121];
    for (o, f) in observed.iter().zip(fitted) {
        let d = ((o.0 - f.0).powi(2) + (o.1 - f.1).powi(2)).sqrt();
        assert!(d < o.2, "fitted point {d} px from its observation");
    }
}

#[test]
fn usage_errors_exit_non_zero() {
    let bin = env!("CARGO_BIN_EXE_velomix");
    let status = Command::new(bin).args(["simulate", "--bogus"]).output().unwrap().status;
    assert_eq!(status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(bin).args(["simulate", "--out"]).arg(tmp.path().join("x")).output().unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    assert!(velomix::cli::run(["velomix", "fit-vae", "--seed", "0", "--model", "huge"]).is_err());
}
