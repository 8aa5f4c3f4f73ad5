//! Command-line surface.
//!
//! Every subcommand reads a [`RunConfig`] (optional `--config` file, then
//! `--set key=value` overrides, then dedicated flags), runs one stage and
//! writes its outputs into a directory. Besides the outputs, each command
//! writes `run_meta/<command>.txt` with the configuration echo, seed, version
//! and wall time; that record is the only output that differs between
//! otherwise identical runs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{fit_genes_em, fit_steady_state, global_time};
use crate::evaluation::{per_gene_mse, reconstruction_metrics, spearman, velocity_table, MetricsReport, SplitMetrics};
use crate::io::config::RunConfig;
use crate::io::matrix::{read_cell_metadata, read_csv_matrix, write_cell_metadata, write_csv_matrix};
use crate::io::plot::{grouped, scatter, Series};
use crate::io::{load_matrices, preprocess, write_matrices, ExpressionMatrix, MatrixFormat, Provenance};
use crate::kinetics::{solve_phase, GeneKinetics};
use crate::models::{predict, refine_initial_conditions, train, EpochRecord, ModelState, Prediction};
use crate::simulator::{capture_time_labels, preset_tree, read_truth, simulate_preset, write_truth, write_truth_params};

#[derive(Parser, Debug)]
#[command(name = "velomix", version, about = "Latent time, cell state and kinetic rates from unspliced/spliced expression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Existing run directory.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Matrix file format, csv or mtx.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// S1, S2 or S3.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Normalize, select genes and smooth.
    Preprocess {
        #[command(flatten)]
        common: Common,
    },
    /// Steady-state rate estimates per gene.
    FitSteady {
        #[command(flatten)]
        common: Common,
    },
    /// Per-gene EM fit of the switching model.
    FitEm {
        #[command(flatten)]
        common: Common,
    },
    /// Train a variational model.
    FitVae {
        #[command(flatten)]
        common: Common,
        /// basic or full.
        #[arg(long)]
        model: Option<String>,
    },
    /// Refine the initial conditions of a trained full model.
    Refine {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute predictions from a saved model.
    Predict {
        #[command(flatten)]
        common: Common,
    },
    /// Write metrics.json for a run.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Write SVG diagnostics for a run.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Comma-separated gene names; empty for none.
        #[arg(long)]
        genes: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Preprocess { .. } => "preprocess",
            Command::FitSteady { .. } => "fit-steady",
            Command::FitEm { .. } => "fit-em",
            Command::FitVae { .. } => "fit-vae",
            Command::Refine { .. } => "refine",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Plot { .. } => "plot",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common, .. }
            | Command::Preprocess { common }
            | Command::FitSteady { common }
            | Command::FitEm { common }
            | Command::FitVae { common, .. }
            | Command::Refine { common }
            | Command::Predict { common }
            | Command::Evaluate { common }
            | Command::Plot { common, .. } => common,
        }
    }

    fn config(&self) -> Result<RunConfig> {
        let c = self.common();
        let mut cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &c.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        let mut flag = |key: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(key, &v));
        flag("seed", c.seed.map(|s| s.to_string()))?;
        flag("input", c.input.as_ref().map(|p| p.display().to_string()))?;
        flag("out", c.out.as_ref().map(|p| p.display().to_string()))?;
        flag("run", c.run.as_ref().map(|p| p.display().to_string()))?;
        flag("format", c.format.clone())?;
        flag("epochs", c.epochs.map(|e| e.to_string()))?;
        match self {
            Command::Simulate { preset, cells, noise, .. } => {
                flag("preset", preset.clone())?;
                flag("cells", cells.map(|c| c.to_string()))?;
                flag("noise", noise.map(|n| n.to_string()))?;
            }
            Command::FitVae { model, .. } => flag("model", model.clone())?,
            Command::Plot { genes, .. } => flag("genes", genes.clone())?,
            _ => {}
        }
        Ok(cfg)
    }
}

/// Parse `args` (program name first) and run the command.
///
/// Usage errors come back as [`Error::Config`] carrying clap's rendered message.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.render().to_string()))?;
    execute(&cli.command)
}

/// Entry point of the binary; returns the process exit status.
pub fn main_with_args(args: Vec<std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cmd: &Command) -> Result<()> {
    let cfg = cmd.config()?;
    let seed = cfg.seed()?;
    let start = Instant::now();
    let meta_dir = match cmd {
        Command::Simulate { .. } => simulate_cmd(&cfg, seed)?,
        Command::Preprocess { .. } => preprocess_cmd(&cfg)?,
        Command::FitSteady { .. } => fit_steady_cmd(&cfg)?,
        Command::FitEm { .. } => fit_em_cmd(&cfg)?,
        Command::FitVae { .. } => fit_vae_cmd(&cfg)?,
        Command::Refine { .. } => refine_cmd(&cfg)?,
        Command::Predict { .. } => predict_cmd(&cfg)?,
        Command::Evaluate { .. } => evaluate_cmd(&cfg)?,
        Command::Plot { .. } => plot_cmd(&cfg)?,
    };
    if let Some(dir) = meta_dir {
        write_run_meta(&dir, cmd.name(), &cfg, seed, start.elapsed().as_secs_f64())?;
    }
    Ok(())
}

fn write_run_meta(dir: &Path, command: &str, cfg: &RunConfig, seed: u64, seconds: f64) -> Result<()> {
    let meta = dir.join("run_meta");
    create_dir(&meta)?;
    let mut s = String::new();
    let _ = writeln!(s, "command = {command}");
    let _ = writeln!(s, "seed = {seed}");
    let _ = writeln!(s, "velomix_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "target = {}-{}", std::env::consts::ARCH, std::env::consts::OS);
    let _ = writeln!(s, "threads = 1");
    let _ = writeln!(s, "wall_time_seconds = {seconds:.3}");
    let _ = writeln!(s, "# configuration");
    s.push_str(&cfg.to_text());
    write_text(&meta.join(format!("{command}.txt")), &s)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn copy_if_present(from: &Path, to: &Path, names: &[&str]) -> Result<()> {
    for name in names {
        let src = from.join(name);
        if src.exists() && from != to {
            fs::copy(&src, to.join(name)).map_err(|e| Error::io(&src, e))?;
        }
    }
    Ok(())
}

/// Matrix file paths of a dataset directory.
pub fn dataset_paths(dir: &Path, format: MatrixFormat) -> (PathBuf, PathBuf) {
    let ext = format.extension();
    (dir.join(format!("unspliced.{ext}")), dir.join(format!("spliced.{ext}")))
}

/// Read a dataset directory: both matrices, `cells.csv` and `provenance.json` when present.
pub fn read_dataset(dir: &Path, format: MatrixFormat) -> Result<ExpressionMatrix> {
    let (u, s) = dataset_paths(dir, format);
    let mut m = load_matrices(&u, &s, format)?;
    let cells = dir.join("cells.csv");
    if cells.exists() {
        read_cell_metadata(&cells, &mut m)?;
    }
    let prov = dir.join("provenance.json");
    if prov.exists() {
        let p: Provenance = serde_json::from_str(&read_text(&prov)?)?;
        m.provenance = Some(p);
    }
    Ok(m)
}

pub fn write_dataset(dir: &Path, m: &ExpressionMatrix, format: MatrixFormat) -> Result<()> {
    create_dir(dir)?;
    let (u, s) = dataset_paths(dir, format);
    write_matrices(m, &u, &s, format)?;
    if m.capture_times.is_some() || m.labels.is_some() {
        write_cell_metadata(&dir.join("cells.csv"), m)?;
    }
    if let Some(p) = &m.provenance {
        write_text(&dir.join("provenance.json"), &serde_json::to_string_pretty(p)?)?;
    }
    Ok(())
}

/// `fit.json`: what produced a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    /// `steady`, `em`, `vae-basic` or `vae-full`.
    pub method: String,
    pub input: PathBuf,
    pub format: MatrixFormat,
    pub informative_prior: bool,
    pub refined: bool,
}

fn read_fit(run: &Path) -> Result<FitRecord> {
    let path = run.join("fit.json");
    if !path.exists() {
        return Err(Error::Data(format!("{} is not a run directory (no fit.json)", run.display())));
    }
    Ok(serde_json::from_str(&read_text(&path)?)?)
}

fn write_fit(dir: &Path, fit: &FitRecord) -> Result<()> {
    write_text(&dir.join("fit.json"), &(serde_json::to_string_pretty(fit)? + "\n"))
}

/// Dataset of a run: the configured input if set, else the one recorded in `fit.json`.
fn run_dataset(cfg: &RunConfig, fit: &FitRecord) -> Result<(PathBuf, ExpressionMatrix)> {
    let dir = cfg.input.clone().unwrap_or_else(|| fit.input.clone());
    let format = if cfg.input.is_some() { cfg.format } else { fit.format };
    let data = read_dataset(&dir, format)?;
    Ok((dir, data))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `params.csv`: `gene,alpha,beta,gamma,t_on,t_off,sigma_u,sigma_s,estimable`.
fn write_params(path: &Path, genes: &[String], params: &[Option<GeneKinetics>], estimable: &[bool]) -> Result<()> {
    write_rows(
        path,
        &["gene", "alpha", "beta", "gamma", "t_on", "t_off", "sigma_u", "sigma_s", "estimable"],
        genes.iter().enumerate().map(|(j, g)| {
            let mut r = vec![g.clone()];
            match &params[j] {
                Some(k) => r.extend([k.alpha, k.beta, k.gamma, k.t_on, k.t_off, k.sigma_u, k.sigma_s].map(|v| v.to_string())),
                None => r.extend(std::iter::repeat(String::new()).take(7)),
            }
            r.push(estimable[j].to_string());
            r
        }),
    )
}

struct ParamRow {
    sigma_u: Option<f64>,
    sigma_s: Option<f64>,
}

fn read_params(path: &Path) -> Result<Vec<(String, ParamRow)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<Option<f64>> {
            match rec.get(k).map(str::trim) {
                None | Some("") => Ok(None),
                Some(v) => v.parse().map(Some).map_err(|_| Error::parse(path, format!("bad number {v:?}"))),
            }
        };
        out.push((
            rec.get(0).unwrap_or_default().to_string(),
            ParamRow { sigma_u: num(6)?, sigma_s: num(7)? },
        ));
    }
    Ok(out)
}

/// `velocity.csv`: long format `cell,gene,du_dt,ds_dt`.
fn write_velocity(path: &Path, data: &ExpressionMatrix, du: Option<&Array2<f64>>, ds: &Array2<f64>) -> Result<()> {
    let g = data.n_genes();
    write_rows(
        path,
        &["cell", "gene", "du_dt", "ds_dt"],
        (0..data.n_cells() * g).map(|k| {
            let (i, j) = (k / g, k % g);
            vec![
                data.cell_ids[i].clone(),
                data.gene_names[j].clone(),
                du.map(|d| d[[i, j]].to_string()).unwrap_or_default(),
                ds[[i, j]].to_string(),
            ]
        }),
    )
}

/// `times.csv`: `cell,time,sigma,t0`.
fn write_times(path: &Path, cells: &[String], time: &[f64], sigma: Option<&[f64]>, t0: Option<&[Option<f64>]>) -> Result<()> {
    write_rows(
        path,
        &["cell", "time", "sigma", "t0"],
        cells.iter().enumerate().map(|(i, c)| {
            vec![
                c.clone(),
                time[i].to_string(),
                fmt_opt(sigma.map(|s| s[i])),
                fmt_opt(t0.and_then(|t| t[i])),
            ]
        }),
    )
}

fn read_times(path: &Path) -> Result<HashMap<String, f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = HashMap::new();
    for rec in r.records() {
        let rec = rec?;
        let t = rec.get(1).unwrap_or_default();
        let v: f64 = t.parse().map_err(|_| Error::parse(path, format!("bad time {t:?}")))?;
        out.insert(rec.get(0).unwrap_or_default().to_string(), v);
    }
    Ok(out)
}

fn write_split(path: &Path, data: &ExpressionMatrix, train: &[usize], test: &[usize]) -> Result<()> {
    let mut set = vec![""; data.n_cells()];
    for &i in train {
        set[i] = "train";
    }
    for &i in test {
        set[i] = "test";
    }
    write_rows(path, &["cell", "set"], data.cell_ids.iter().zip(set).map(|(c, s)| vec![c.clone(), s.to_string()]))
}

/// Train and test cell indices from `split.csv`, matched to `data` by id.
fn read_split(path: &Path, data: &ExpressionMatrix) -> Result<(Vec<usize>, Vec<usize>)> {
    let index: HashMap<&str, usize> = data.cell_ids.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut r = csv::Reader::from_path(path)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default();
        let &i = index.get(id).ok_or_else(|| Error::Data(format!("cell {id:?} of {} not in the dataset", path.display())))?;
        match rec.get(1) {
            Some("train") => train.push(i),
            Some("test") => test.push(i),
            _ => {}
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_rows(
        path,
        &["epoch", "elbo", "kl_t", "kl_c", "mse_train", "mse_test"],
        history.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.elbo.to_string(),
                r.kl_t.to_string(),
                r.kl_c.to_string(),
                r.mse_train.to_string(),
                r.mse_test.to_string(),
            ]
        }),
    )
}

fn write_fitted(dir: &Path, data: &ExpressionMatrix, u_hat: &Array2<f64>, s_hat: &Array2<f64>) -> Result<()> {
    write_csv_matrix(&dir.join("fitted_unspliced.csv"), &data.cell_ids, &data.gene_names, u_hat)?;
    write_csv_matrix(&dir.join("fitted_spliced.csv"), &data.cell_ids, &data.gene_names, s_hat)
}

/// Reconstructions of a run, aligned to `data`; `None` when the run has none.
fn read_fitted(run: &Path, data: &ExpressionMatrix) -> Result<Option<(Array2<f64>, Array2<f64>)>> {
    let (pu, ps) = (run.join("fitted_unspliced.csv"), run.join("fitted_spliced.csv"));
    if !pu.exists() || !ps.exists() {
        return Ok(None);
    }
    let (u, s) = (read_csv_matrix(&pu)?, read_csv_matrix(&ps)?);
    if u.rows != data.cell_ids || u.cols != data.gene_names || s.rows != u.rows || s.cols != u.cols {
        return Err(Error::Data(format!("fitted matrices in {} do not match the dataset's cells and genes", run.display())));
    }
    Ok(Some((u.values, s.values)))
}

fn simulate_cmd(cfg: &RunConfig, seed: u64) -> Result<Option<PathBuf>> {
    let out = cfg.require(&cfg.out, "out")?;
    let (mut m, truth) = simulate_preset(cfg.preset, cfg.cells, cfg.noise, seed)?;
    let capture = capture_time_labels(&truth.times, cfg.capture_bins)?;
    m.capture_times = Some(capture.iter().map(|&b| b as f64).collect());
    write_dataset(out, &m, cfg.format)?;
    write_truth(&out.join("truth.csv"), &m.cell_ids, &truth, &capture)?;
    write_truth_params(&out.join("truth_params.csv"), &preset_tree(cfg.preset, seed))?;
    Ok(Some(out.to_path_buf()))
}

fn preprocess_cmd(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let input = cfg.require(&cfg.input, "input")?;
    let out = cfg.require(&cfg.out, "out")?;
    let raw = read_dataset(input, cfg.format)?;
    let processed = preprocess(&raw, &cfg.preprocess_options(raw.n_genes()))?;
    write_dataset(out, &processed, cfg.format)?;
    copy_if_present(input, out, &["truth.csv", "truth_params.csv"])?;
    Ok(Some(out.to_path_buf()))
}

fn fit_record(cfg: &RunConfig, input: &Path, method: &str) -> FitRecord {
    FitRecord {
        method: method.into(),
        input: input.to_path_buf(),
        format: cfg.format,
        informative_prior: cfg.train.informative_prior && method.starts_with("vae"),
        refined: false,
    }
}

fn fit_steady_cmd(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let input = cfg.require(&cfg.input, "input")?;
    let out = cfg.require(&cfg.out, "out")?;
    let data = read_dataset(input, cfg.format)?;
    create_dir(out)?;
    let (n, g) = (data.n_cells(), data.n_genes());
    let mut params = Vec::with_capacity(g);
    let mut estimable = Vec::with_capacity(g);
    for j in 0..g {
        let f = fit_steady_state(&data.unspliced.column(j).to_vec(), &data.spliced.column(j).to_vec(), cfg.em.quantile)?;
        let mut k = GeneKinetics::new(f.alpha, f.beta, f.gamma);
        k.t_off = f64::INFINITY;
        params.push(Some(k.with_noise(f64::NAN, f64::NAN)));
        estimable.push(f.estimable);
    }
    write_params(&out.join("params.csv"), &data.gene_names, &params, &estimable)?;
    // ds/dt on the observed values; du/dt needs a transcription rate and is left empty
    let ds = Array2::from_shape_fn((n, g), |(i, j)| {
        let k = params[j].as_ref().expect("set above");
        k.beta * data.unspliced[[i, j]] - k.gamma * data.spliced[[i, j]]
    });
    write_velocity(&out.join("velocity.csv"), &data, None, &ds)?;
    write_fit(out, &fit_record(cfg, input, "steady"))?;
    Ok(Some(out.to_path_buf()))
}

fn fit_em_cmd(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let input = cfg.require(&cfg.input, "input")?;
    let out = cfg.require(&cfg.out, "out")?;
    let data = read_dataset(input, cfg.format)?;
    create_dir(out)?;
    let fits = fit_genes_em(data.unspliced.view(), data.spliced.view(), &cfg.em)?;
    let (n, g) = (data.n_cells(), data.n_genes());
    let gene_times = Array2::from_shape_fn((n, g), |(i, j)| fits[j].times[i]);
    let estimable: Vec<bool> = fits.iter().map(|f| f.estimable).collect();
    let global: Vec<f64> = global_time(gene_times.view(), &estimable)?.into_iter().map(|v| v * cfg.em.t_max).collect();

    let mut u_hat = Array2::zeros((n, g));
    let mut s_hat = Array2::zeros((n, g));
    let mut rate = Array2::zeros((n, g));
    for (j, f) in fits.iter().enumerate() {
        for i in 0..n {
            let t = f.times[i];
            let x = solve_phase(&f.params, t)?;
            u_hat[[i, j]] = x.u;
            s_hat[[i, j]] = x.s;
            rate[[i, j]] = if t >= f.params.t_on && t < f.params.t_off { f.params.alpha } else { 0.0 };
        }
    }
    let params: Vec<Option<GeneKinetics>> = fits.iter().map(|f| Some(f.params)).collect();
    let beta: Vec<f64> = fits.iter().map(|f| f.params.beta).collect();
    let gamma: Vec<f64> = fits.iter().map(|f| f.params.gamma).collect();
    let v = velocity_table(u_hat.view(), s_hat.view(), rate.view(), &beta, &gamma)?;
    let rho = Array2::from_shape_fn((n, g), |(i, j)| if rate[[i, j]] > 0.0 { 1.0 } else { 0.0 });

    write_params(&out.join("params.csv"), &data.gene_names, &params, &estimable)?;
    write_times(&out.join("times.csv"), &data.cell_ids, &global, None, None)?;
    write_csv_matrix(&out.join("gene_times.csv"), &data.cell_ids, &data.gene_names, &gene_times)?;
    write_csv_matrix(&out.join("rho.csv"), &data.cell_ids, &data.gene_names, &rho)?;
    write_fitted(out, &data, &u_hat, &s_hat)?;
    write_velocity(&out.join("velocity.csv"), &data, Some(&v.du_dt), &v.ds_dt)?;
    write_rows(
        &out.join("em_history.csv"),
        &["gene", "iteration", "mse"],
        fits.iter().zip(&data.gene_names).flat_map(|(f, name)| {
            f.mse_history.iter().enumerate().map(move |(k, m)| vec![name.clone(), k.to_string(), m.to_string()])
        }),
    )?;
    write_fit(out, &fit_record(cfg, input, "em"))?;
    Ok(Some(out.to_path_buf()))
}

/// Predictions of a variational model on every cell of `data`.
fn write_predictions(dir: &Path, state: &ModelState, data: &ExpressionMatrix) -> Result<Prediction> {
    let p = predict(state, data)?;
    let kin: Vec<Option<GeneKinetics>> = state.gene_kinetics().into_iter().map(Some).collect();
    write_params(&dir.join("params.csv"), &data.gene_names, &kin, &vec![true; data.n_genes()])?;
    write_times(
        &dir.join("times.csv"),
        &data.cell_ids,
        p.posterior.mu_t.as_slice().expect("contiguous"),
        Some(p.posterior.sigma_t.as_slice().expect("contiguous")),
        Some(&p.t0),
    )?;
    if let (Some(mc), Some(sc)) = (&p.posterior.mu_c, &p.posterior.sigma_c) {
        let d = mc.ncols();
        let mut header = vec!["cell".to_string()];
        header.extend((1..=d).map(|k| format!("mu_c{k}")));
        header.extend((1..=d).map(|k| format!("sigma_c{k}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_rows(
            &dir.join("state.csv"),
            &header,
            data.cell_ids.iter().enumerate().map(|(i, c)| {
                let mut r = vec![c.clone()];
                r.extend(mc.row(i).iter().chain(sc.row(i).iter()).map(|v| v.to_string()));
                r
            }),
        )?;
    }
    write_csv_matrix(&dir.join("rho.csv"), &data.cell_ids, &data.gene_names, &p.rho)?;
    write_fitted(dir, data, &p.u_hat, &p.s_hat)?;
    write_velocity(&dir.join("velocity.csv"), data, Some(&p.du_dt), &p.ds_dt)?;
    Ok(p)
}

fn fit_vae_cmd(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let input = cfg.require(&cfg.input, "input")?;
    let out = cfg.require(&cfg.out, "out")?;
    let kind = cfg.model.ok_or_else(|| Error::Config("fit-vae needs a model (--model basic|full)".into()))?;
    let data = read_dataset(input, cfg.format)?;
    create_dir(out)?;
    let outcome = match train(&data, &cfg.train, kind) {
        Ok(o) => o,
        Err(f) => {
            write_history(&out.join("history.csv"), &f.history)?;
            if let Some(c) = &f.checkpoint {
                let dir = out.join("checkpoint");
                create_dir(&dir)?;
                c.save(&dir)?;
            }
            return Err(f.error);
        }
    };
    let model_dir = out.join("model");
    create_dir(&model_dir)?;
    outcome.state.save(&model_dir)?;
    write_history(&out.join("history.csv"), &outcome.history)?;
    write_split(&out.join("split.csv"), &data, &outcome.train_cells, &outcome.test_cells)?;
    write_predictions(out, &outcome.state, &data)?;
    write_fit(out, &fit_record(cfg, input, &format!("vae-{kind}")))?;
    Ok(Some(out.to_path_buf()))
}

fn load_model(run: &Path) -> Result<ModelState> {
    ModelState::load(&run.join("model"))
}

fn refine_cmd(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let run = cfg.require(&cfg.run, "run")?;
    let out = cfg.out.as_deref().unwrap_or(run);
    let mut fit = read_fit(run)?;
    let (_, data) = run_dataset(cfg, &fit)?;
    let state = load_model(run)?;
    let (train_cells, _) = read_split(&run.join("split.csv"), &data)?;
    let r = refine_initial_conditions(&state, &data, &train_cells, &cfg.train)?;
    create_dir(out)?;
    copy_if_present(run, out, &["split.csv", "history.csv"])?;
    let model_dir = out.join("model");
    create_dir(&model_dir)?;
    r.state.save(&model_dir)?;
    #[derive(Serialize)]
    struct Report {
        mse_before: f64,
        mse_after: f64,
        rolled_back: bool,
        empty_windows: usize,
    }
    let report = Report { mse_before: r.mse_before, mse_after: r.mse_after, rolled_back: r.rolled_back, empty_windows: r.empty_windows };
    write_text(&out.join("refine.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_predictions(out, &r.state, &data)?;
    fit.refined = !r.rolled_back;
    write_fit(out, &fit)?;
    Ok(Some(out.to_path_buf()))
}

fn predict_cmd(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let run = cfg.require(&cfg.run, "run")?;
    let out = cfg.out.as_deref().unwrap_or(run);
    let fit = read_fit(run)?;
    let (_, data) = run_dataset(cfg, &fit)?;
    let state = load_model(run)?;
    create_dir(out)?;
    write_predictions(out, &state, &data)?;
    if out != run {
        write_fit(out, &fit)?;
        copy_if_present(run, out, &["split.csv", "history.csv"])?;
        let model_dir = out.join("model");
        create_dir(&model_dir)?;
        state.save(&model_dir)?;
    }
    Ok(Some(out.to_path_buf()))
}

/// Reference time per cell: truth when the dataset has it, else capture times.
fn reference_time(dir: &Path, data: &ExpressionMatrix) -> Result<Option<(Vec<f64>, String)>> {
    let truth = dir.join("truth.csv");
    if truth.exists() {
        let rows = read_truth(&truth)?;
        let by_id: HashMap<&str, f64> = rows.iter().map(|r| (r.0.as_str(), r.1)).collect();
        let times = data
            .cell_ids
            .iter()
            .map(|c| by_id.get(c.as_str()).copied().ok_or_else(|| Error::Data(format!("cell {c:?} missing from truth.csv"))))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Some((times, "true_time".into())));
    }
    Ok(data.capture_times.clone().map(|t| (t, "capture_time".into())))
}

fn cell_times(run: &Path, data: &ExpressionMatrix) -> Result<Option<Vec<f64>>> {
    let path = run.join("times.csv");
    if !path.exists() {
        return Ok(None);
    }
    let by_id = read_times(&path)?;
    data.cell_ids
        .iter()
        .map(|c| by_id.get(c).copied().ok_or_else(|| Error::Data(format!("cell {c:?} missing from {}", path.display()))))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Metrics of a run directory against its dataset.
pub fn evaluate_run(run: &Path, cfg: &RunConfig) -> Result<MetricsReport> {
    let fit = read_fit(run)?;
    let (dir, data) = run_dataset(cfg, &fit)?;
    let mut report = MetricsReport {
        basis: "values the model was fit to (the dataset directory's matrices)".into(),
        method: fit.method.clone(),
        n_cells: data.n_cells(),
        n_genes: data.n_genes(),
        ..MetricsReport::default()
    };
    if let Some((u_hat, s_hat)) = read_fitted(run, &data)? {
        let params = read_params(&run.join("params.csv"))?;
        if params.iter().map(|p| &p.0).ne(data.gene_names.iter()) {
            return Err(Error::Data("params.csv genes do not match the dataset".into()));
        }
        let sigma_u: Vec<f64> = params.iter().map(|p| p.1.sigma_u.unwrap_or(1.0)).collect();
        let sigma_s: Vec<f64> = params.iter().map(|p| p.1.sigma_s.unwrap_or(1.0)).collect();
        let split_path = run.join("split.csv");
        let (train, test) = if split_path.exists() {
            read_split(&split_path, &data)?
        } else {
            ((0..data.n_cells()).collect(), Vec::new())
        };
        let metrics = |cells: &[usize]| {
            let pick = |m: &Array2<f64>| m.select(Axis(0), cells);
            reconstruction_metrics(
                pick(&data.unspliced).view(),
                pick(&data.spliced).view(),
                pick(&u_hat).view(),
                pick(&s_hat).view(),
                &sigma_u,
                &sigma_s,
            )
        };
        let train_m = metrics(&train)?;
        let test_m = if test.is_empty() { None } else { Some(metrics(&test)?) };
        report.set_split(SplitMetrics { train: train_m, test: test_m });
        let pick = |m: &Array2<f64>| m.select(Axis(0), &train);
        let pg = per_gene_mse(pick(&data.unspliced).view(), pick(&data.spliced).view(), pick(&u_hat).view(), pick(&s_hat).view())?;
        report.per_gene_mse = data.gene_names.iter().cloned().zip(pg).collect();
        if test.is_empty() {
            report.notes.push("no held-out cells; errors cover every cell".into());
        }
    } else {
        report.notes.push("run has no reconstruction; errors not computed".into());
    }
    if let (Some(times), Some((reference, name))) = (cell_times(run, &data)?, reference_time(&dir, &data)?) {
        let k = spearman(&times, &reference)?;
        if fit.informative_prior {
            report.k_t_info = k;
        } else {
            report.k_t = k;
        }
        report.time_reference = Some(name);
        if fit.method == "em" {
            report.notes.push("time is the EM global time: per-cell median of per-gene times rescaled to [0, 1]".into());
        }
    }
    Ok(report)
}

fn evaluate_cmd(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let run = cfg.require(&cfg.run, "run")?;
    let out = cfg.out.as_deref().unwrap_or(run);
    let report = evaluate_run(run, cfg)?;
    create_dir(out)?;
    write_text(&out.join("metrics.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(Some(out.to_path_buf()))
}

fn file_stem(gene: &str) -> String {
    gene.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Write the SVG set of a run; returns the written paths.
pub fn plot_run(run: &Path, out: &Path, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let fit = read_fit(run)?;
    let (dir, data) = run_dataset(cfg, &fit)?;
    let genes: Vec<String> = match &cfg.genes {
        Some(g) => g.clone(),
        None => data.gene_names.iter().take(4).cloned().collect(),
    };
    if genes.is_empty() {
        return Ok(Vec::new());
    }
    let (u_hat, s_hat) = read_fitted(run, &data)?
        .ok_or_else(|| Error::Data(format!("{} has no predictions to plot", run.display())))?;
    let times = cell_times(run, &data)?.ok_or_else(|| Error::Data(format!("{} has no times.csv", run.display())))?;
    let gene_times = {
        let p = run.join("gene_times.csv");
        if p.exists() {
            Some(read_csv_matrix(&p)?.values)
        } else {
            None
        }
    };
    let labels = data.labels.as_deref();
    create_dir(out)?;
    let mut written = Vec::new();
    let mut save = |name: String, svg: String| -> Result<()> {
        let path = out.join(name);
        write_text(&path, &svg)?;
        written.push(path);
        Ok(())
    };
    for gene in &genes {
        let j = data
            .gene_names
            .iter()
            .position(|g| g == gene)
            .ok_or_else(|| Error::Data(format!("gene {gene:?} not in the dataset")))?;
        let t: Vec<f64> = match &gene_times {
            Some(m) => m.column(j).to_vec(),
            None => times.clone(),
        };
        let col = |m: &Array2<f64>| m.column(j).to_vec();
        let (u, s, uh, sh) = (col(&data.unspliced), col(&data.spliced), col(&u_hat), col(&s_hat));
        let fitted = |pts: Vec<(f64, f64)>| Series { name: "fitted".into(), points: pts, color: "#000000".into(), radius: 1.2, opacity: 0.8 };
        let zip = |a: &[f64], b: &[f64]| a.iter().copied().zip(b.iter().copied()).collect::<Vec<_>>();
        let stem = file_stem(gene);

        let mut phase = grouped(&zip(&s, &u), labels, 2.0, 0.35);
        phase.push(fitted(zip(&sh, &uh)));
        save(format!("{stem}_phase.svg"), scatter(&format!("{gene} phase portrait"), "spliced", "unspliced", &phase))?;
        for (name, obs, fit_v) in [("u", &u, &uh), ("s", &s, &sh)] {
            let mut ser = grouped(&zip(&t, obs), labels, 2.0, 0.35);
            ser.push(fitted(zip(&t, fit_v)));
            let y = if name == "u" { "unspliced" } else { "spliced" };
            save(format!("{stem}_{name}_time.svg"), scatter(&format!("{gene} {y} vs time"), "inferred time", y, &ser))?;
        }
    }
    if let Some((reference, name)) = reference_time(&dir, &data)? {
        let pts: Vec<(f64, f64)> = reference.iter().copied().zip(times.iter().copied()).collect();
        save("times.svg".into(), scatter("inferred vs reference time", &name, "inferred time", &grouped(&pts, labels, 2.0, 0.5)))?;
    }
    Ok(written)
}

fn plot_cmd(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let run = cfg.require(&cfg.run, "run")?;
    let out = cfg.out.clone().unwrap_or_else(|| run.join("plots"));
    let written = plot_run(run, &out, cfg)?;
    Ok((!written.is_empty()).then(|| run.to_path_buf()))
}
