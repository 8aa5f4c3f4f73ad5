//! Reconstruction metrics, rank correlation, posterior uncertainty and velocity tables.
//!
//! All errors are computed on the values the models were fit to (normalized,
//! optionally smoothed expression), never on raw counts.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub mse: f64,
    pub mae: f64,
    /// Diagonal-Gaussian log-likelihood summed over genes, averaged over cells.
    pub ll: f64,
}

fn check_same(name: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{name}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// MSE and MAE over every entry of both matrices, and the Gaussian log-likelihood
/// with per-gene standard deviations.
pub fn reconstruction_metrics(
    u: ArrayView2<f64>,
    s: ArrayView2<f64>,
    u_hat: ArrayView2<f64>,
    s_hat: ArrayView2<f64>,
    sigma_u: &[f64],
    sigma_s: &[f64],
) -> Result<Reconstruction> {
    check_same("unspliced vs reconstruction", u.dim(), u_hat.dim())?;
    check_same("spliced vs reconstruction", s.dim(), s_hat.dim())?;
    check_same("unspliced vs spliced", u.dim(), s.dim())?;
    let (n, g) = u.dim();
    if sigma_u.len() != g || sigma_s.len() != g {
        return Err(Error::Shape(format!("{g} genes but {} / {} noise scales", sigma_u.len(), sigma_s.len())));
    }
    if n == 0 || g == 0 {
        return Err(Error::Shape("empty matrix".into()));
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut ll = 0.0;
    let mut accumulate = |x: &ArrayView2<f64>, x_hat: &ArrayView2<f64>, sigma: &[f64]| {
        for i in 0..n {
            for j in 0..g {
                let r = x[[i, j]] - x_hat[[i, j]];
                sq += r * r;
                abs += r.abs();
                let z = r / sigma[j];
                ll += -0.5 * (2.0 * PI).ln() - sigma[j].ln() - 0.5 * z * z;
            }
        }
    };
    accumulate(&u, &u_hat, sigma_u);
    accumulate(&s, &s_hat, sigma_s);
    let entries = (2 * n * g) as f64;
    Ok(Reconstruction { mse: sq / entries, mae: abs / entries, ll: ll / n as f64 })
}

/// Mean squared error of each gene over cells and both modalities.
pub fn per_gene_mse(u: ArrayView2<f64>, s: ArrayView2<f64>, u_hat: ArrayView2<f64>, s_hat: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_same("unspliced vs reconstruction", u.dim(), u_hat.dim())?;
    check_same("spliced vs reconstruction", s.dim(), s_hat.dim())?;
    check_same("unspliced vs spliced", u.dim(), s.dim())?;
    let (n, g) = u.dim();
    Ok((0..g)
        .map(|j| {
            let mut sq = 0.0;
            for i in 0..n {
                sq += (u[[i, j]] - u_hat[[i, j]]).powi(2) + (s[[i, j]] - s_hat[[i, j]]).powi(2);
            }
            sq / (2 * n) as f64
        })
        .collect())
}

/// Ranks starting at 1, ties receiving the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
///
/// `Ok(None)` when either input is constant and the correlation is undefined.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("spearman inputs of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::Shape(format!("spearman needs at least 3 points, got {}", a.len())));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite { term: "spearman input".into() });
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellUncertainty {
    /// `sigma_t / mu_t`; `None` when `mu_t == 0`.
    pub cv_t: Option<f64>,
    /// `sqrt(sum sigma_c^2 / sum mu_c^2)`; `None` without a cell state or when `mu_c == 0`.
    pub cv_c: Option<f64>,
}

/// Coefficients of variation of the latent posteriors, one entry per cell.
///
/// The multivariate form is the trace of the diagonal covariance over the
/// squared norm of the mean.
pub fn cv_uncertainty(
    mu_t: &[f64],
    sigma_t: &[f64],
    state: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
) -> Result<Vec<CellUncertainty>> {
    if mu_t.len() != sigma_t.len() {
        return Err(Error::Shape(format!("{} time means but {} deviations", mu_t.len(), sigma_t.len())));
    }
    if let Some((mu_c, sigma_c)) = &state {
        check_same("state mean vs deviation", mu_c.dim(), sigma_c.dim())?;
        if mu_c.nrows() != mu_t.len() {
            return Err(Error::Shape(format!("{} cells in time, {} in state", mu_t.len(), mu_c.nrows())));
        }
    }
    if let Some(bad) = sigma_t.iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::Domain(format!("negative posterior deviation {bad}")));
    }
    Ok((0..mu_t.len())
        .map(|i| {
            let cv_t = (mu_t[i] != 0.0).then(|| sigma_t[i] / mu_t[i].abs());
            let cv_c = state.as_ref().and_then(|(mu_c, sigma_c)| {
                let num: f64 = sigma_c.row(i).iter().map(|v| v * v).sum();
                let den: f64 = mu_c.row(i).iter().map(|v| v * v).sum();
                (den > 0.0).then(|| (num / den).sqrt())
            });
            CellUncertainty { cv_t, cv_c }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityTable {
    pub du_dt: Array2<f64>,
    pub ds_dt: Array2<f64>,
}

/// `du/dt = rate - beta u` and `ds/dt = beta u - gamma s` per cell and gene,
/// where `rate` is the effective transcription rate `rho * alpha`.
pub fn velocity_table(
    u: ArrayView2<f64>,
    s: ArrayView2<f64>,
    rate: ArrayView2<f64>,
    beta: &[f64],
    gamma: &[f64],
) -> Result<VelocityTable> {
    check_same("unspliced vs spliced", u.dim(), s.dim())?;
    check_same("unspliced vs rate", u.dim(), rate.dim())?;
    let g = u.ncols();
    if beta.len() != g || gamma.len() != g {
        return Err(Error::Shape(format!("{g} genes but {} / {} rates", beta.len(), gamma.len())));
    }
    let mut du_dt = Array2::zeros(u.dim());
    let mut ds_dt = Array2::zeros(u.dim());
    Zip::indexed(&mut du_dt).and(&mut ds_dt).for_each(|(i, j), du, ds| {
        let v = crate::kinetics::velocity(u[[i, j]], s[[i, j]], beta[j], gamma[j], Some(rate[[i, j]]));
        *du = v.du_dt.expect("rate supplied");
        *ds = v.ds_dt;
    });
    Ok(VelocityTable { du_dt, ds_dt })
}

/// Split of a metric into training and held-out cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: Reconstruction,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<Reconstruction>,
}

/// Flat summary written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Which values the errors were computed on.
    pub basis: String,
    pub method: String,
    pub n_cells: usize,
    pub n_genes: usize,
    pub mse_train: Option<f64>,
    pub mae_train: Option<f64>,
    pub ll_train: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_test: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_test: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ll_test: Option<f64>,
    /// Spearman correlation of inferred time with the reference time.
    pub k_t: Option<f64>,
    /// Same, for a run fit with the informative capture-time prior.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_t_info: Option<f64>,
    /// What `k_t` was computed against (`true_time`, `capture_time`, ...).
    pub time_reference: Option<String>,
    pub per_gene_mse: Vec<(String, f64)>,
    pub runtime_seconds: Option<f64>,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn set_split(&mut self, m: SplitMetrics) {
        self.mse_train = Some(m.train.mse);
        self.mae_train = Some(m.train.mae);
        self.ll_train = Some(m.train.ll);
        self.mse_test = m.test.map(|r| r.mse);
        self.mae_test = m.test.map(|r| r.mae);
        self.ll_test = m.test.map(|r| r.ll);
    }
}
