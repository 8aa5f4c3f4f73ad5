//! Shared-time variational models.
//!
//! Both models infer a Gaussian posterior over one latent time per cell with an
//! encoder network and reconstruct every gene from that time through the
//! closed-form kinetics. The basic model uses the switching kinetics with a
//! per-gene induction window. The full model adds a latent cell state `c`; a
//! decoder maps `c` to per-gene relative transcription rates `rho` in `(0, 1)`
//! and each cell follows its own ODE with rate `rho * alpha`.

mod mean;
mod train;

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::GeneKinetics;
use crate::nn::checkpoint::{find, mlp_from_tensors, mlp_tensors, read_tensors, write_tensors, NamedTensor};
use crate::nn::{sigmoid, softplus, Activation, Mlp, MlpSpec, Trainable, SIGMA_FLOOR};
use mean::{Rates, Source};

pub use train::{
    initial_times, initialize_params, minibatch_gradients, predict, refine_initial_conditions, train, EpochRecord, Gradients, Initialization, Prediction,
    RefineOutcome, TrainFailure, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Basic,
    Full,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(ModelKind::Basic),
            "full" => Ok(ModelKind::Full),
            other => Err(Error::Config(format!("unknown model kind {other:?} (expected basic or full)"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Basic => "basic",
            ModelKind::Full => "full",
        })
    }
}

/// Gaussian prior on latent time, optionally with a per-cell mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePrior {
    pub t0: f64,
    pub sigma0: f64,
    pub informative: Option<Vec<f64>>,
}

impl TimePrior {
    /// `N(t_max / 2, (t_max / 4)^2)`.
    pub fn uninformative(t_max: f64) -> Self {
        Self { t0: 0.5 * t_max, sigma0: 0.25 * t_max, informative: None }
    }

    /// Capture times are min-max scaled onto `[0, t_max]` and used as per-cell
    /// means. The standard deviation is half the spacing of the distinct scaled
    /// capture times, so neighbouring batches overlap at one standard deviation.
    pub fn from_capture_times(capture: &[f64], t_max: f64) -> Result<Self> {
        let scaled = scale_capture_times(capture, t_max)?;
        let mut distinct = scaled.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let sigma0 = 0.5 * t_max / (distinct.len() - 1) as f64;
        Ok(Self { t0: 0.5 * t_max, sigma0, informative: Some(scaled) })
    }

    pub fn mean(&self, cell: usize) -> f64 {
        self.informative.as_ref().map_or(self.t0, |m| m[cell])
    }

    pub fn validate(&self, n_cells: usize) -> Result<()> {
        if !(self.sigma0 > 0.0) || !self.t0.is_finite() {
            return Err(Error::Config(format!("time prior needs sigma0 > 0 and finite t0, got {self:?}")));
        }
        if let Some(m) = &self.informative {
            if m.len() != n_cells || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("informative prior has {} means for {n_cells} cells", m.len())));
            }
        }
        Ok(())
    }
}

pub(crate) fn scale_capture_times(capture: &[f64], t_max: f64) -> Result<Vec<f64>> {
    if capture.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("capture times must be finite".into()));
    }
    let lo = capture.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = capture.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Data("capture times need at least two distinct values".into()));
    }
    Ok(capture.iter().map(|&c| t_max * (c - lo) / (hi - lo)).collect())
}

/// Variational posterior of a batch of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu_t: Array1<f64>,
    pub sigma_t: Array1<f64>,
    pub mu_c: Option<Array2<f64>>,
    pub sigma_c: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate of the per-gene kinetic parameters.
    pub ode_learning_rate: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub latent_dim: usize,
    pub epochs: usize,
    pub seed: u64,
    pub t_max: f64,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Fraction of epochs over which the KL weight rises linearly from 0 to 1.
    pub kl_warmup: f64,
    pub informative_prior: bool,
    pub delta1: f64,
    pub delta2: f64,
    pub refine_epochs: usize,
    /// Epochs spent fitting the time head to the steady-state initial times
    /// before ELBO training; 0 skips it.
    pub time_warm_start: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t_max = 20.0;
        Self {
            learning_rate: 2e-4,
            ode_learning_rate: 1e-2,
            batch_size: 128,
            train_fraction: 0.7,
            latent_dim: 5,
            epochs: 300,
            seed: 0,
            t_max,
            hidden: vec![500, 250],
            dropout: 0.2,
            kl_warmup: 0.1,
            informative_prior: false,
            delta1: 3.0 * t_max / 100.0,
            delta2: t_max / 100.0,
            refine_epochs: 50,
            time_warm_start: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if !(self.delta1 > self.delta2 && self.delta2 >= 0.0) {
            return bad(format!("refinement window needs delta1 > delta2 >= 0, got {} and {}", self.delta1, self.delta2));
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2".into());
        }
        if !(self.learning_rate > 0.0) || !(self.ode_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.t_max > 0.0) {
            return bad(format!("t_max must be positive, got {}", self.t_max));
        }
        if self.latent_dim == 0 {
            return bad("latent dimension must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.kl_warmup) {
            return bad(format!("KL warm-up fraction must lie in [0, 1], got {}", self.kl_warmup));
        }
        Ok(())
    }
}

/// Per-gene kinetic parameters in their unconstrained form.
///
/// `log_dt` (the log length of the induction window) only exists for the basic
/// model and is empty otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeParams {
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
    pub log_gamma: Vec<f64>,
    pub t_on: Vec<f64>,
    pub log_dt: Vec<f64>,
    pub log_sigma_u: Vec<f64>,
    pub log_sigma_s: Vec<f64>,
}

impl OdeParams {
    pub fn n_genes(&self) -> usize {
        self.log_alpha.len()
    }

    fn zeros_like(&self) -> Self {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        Self {
            log_alpha: z(&self.log_alpha),
            log_beta: z(&self.log_beta),
            log_gamma: z(&self.log_gamma),
            t_on: z(&self.t_on),
            log_dt: z(&self.log_dt),
            log_sigma_u: z(&self.log_sigma_u),
            log_sigma_s: z(&self.log_sigma_s),
        }
    }

    fn fields(&self) -> [(&'static str, &Vec<f64>); 7] {
        [
            ("log_alpha", &self.log_alpha),
            ("log_beta", &self.log_beta),
            ("log_gamma", &self.log_gamma),
            ("t_on", &self.t_on),
            ("log_dt", &self.log_dt),
            ("log_sigma_u", &self.log_sigma_u),
            ("log_sigma_s", &self.log_sigma_s),
        ]
    }

    pub(crate) fn rates(&self, g: usize) -> Rates {
        Rates {
            alpha: self.log_alpha[g].exp(),
            beta: self.log_beta[g].exp(),
            gamma: self.log_gamma[g].exp(),
            t_on: self.t_on[g],
            dt: self.log_dt.get(g).map_or(f64::INFINITY, |v| v.exp()),
        }
    }
}

impl Trainable for OdeParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        self.fields().into_iter().filter(|(_, v)| !v.is_empty()).map(|(n, v)| (n.to_string(), v.as_slice())).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let Self { log_alpha, log_beta, log_gamma, t_on, log_dt, log_sigma_u, log_sigma_s } = self;
        [
            ("log_alpha", log_alpha),
            ("log_beta", log_beta),
            ("log_gamma", log_gamma),
            ("t_on", t_on),
            ("log_dt", log_dt),
            ("log_sigma_u", log_sigma_u),
            ("log_sigma_s", log_sigma_s),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(n, v)| (n.to_string(), v.as_mut_slice()))
        .collect()
    }
}

/// Initial conditions of a refined full model.
///
/// Holds the training cells (sorted by posterior-mean time) whose observed
/// expression is averaged over the window `[t - delta1, t - delta2]` preceding a
/// cell at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub delta1: f64,
    pub delta2: f64,
    pub times: Vec<f64>,
    pub u: Array2<f64>,
    pub s: Array2<f64>,
    prefix_u: Array2<f64>,
    prefix_s: Array2<f64>,
}

/// Per-gene start state and start time of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub u0: Array1<f64>,
    pub s0: Array1<f64>,
    pub t0: f64,
}

impl Refinement {
    pub fn new(delta1: f64, delta2: f64, times: &[f64], u: ArrayView2<f64>, s: ArrayView2<f64>) -> Result<Self> {
        if !(delta1 > delta2 && delta2 >= 0.0) {
            return Err(Error::Config(format!("refinement window needs delta1 > delta2 >= 0, got {delta1} and {delta2}")));
        }
        if u.dim() != s.dim() || u.nrows() != times.len() {
            return Err(Error::Shape(format!("{} times for matrices {:?} and {:?}", times.len(), u.dim(), s.dim())));
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
        let u = u.select(Axis(0), &order);
        let s = s.select(Axis(0), &order);
        let times: Vec<f64> = order.iter().map(|&i| times[i]).collect();
        let prefix = |m: &Array2<f64>| {
            let mut p = Array2::zeros((m.nrows() + 1, m.ncols()));
            for i in 0..m.nrows() {
                let next = &p.row(i) + &m.row(i);
                p.row_mut(i + 1).assign(&next);
            }
            p
        };
        Ok(Self { delta1, delta2, prefix_u: prefix(&u), prefix_s: prefix(&s), times, u, s })
    }

    /// Window mean for a cell at time `t`, or `None` for an empty window.
    pub fn anchor(&self, t: f64) -> Option<Anchor> {
        let lo = self.times.partition_point(|&x| x < t - self.delta1);
        let hi = self.times.partition_point(|&x| x <= t - self.delta2);
        if hi <= lo {
            return None;
        }
        let n = (hi - lo) as f64;
        let u0 = (&self.prefix_u.row(hi) - &self.prefix_u.row(lo)) / n;
        let s0 = (&self.prefix_s.row(hi) - &self.prefix_s.row(lo)) / n;
        Some(Anchor { u0, s0, t0: t - 0.5 * (self.delta1 + self.delta2) })
    }
}

/// Fitted parameters of either model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub kind: ModelKind,
    pub genes: Vec<String>,
    pub t_max: f64,
    pub latent_dim: usize,
    pub encoder: Mlp,
    pub decoder: Option<Mlp>,
    pub ode: OdeParams,
    /// Divisor applied to each encoder input column, `[u_1..u_G, s_1..s_G]`.
    pub input_scale: Vec<f64>,
    pub prior: TimePrior,
    pub refinement: Option<Refinement>,
}

/// Per-cell averages of the ELBO and its parts; `elbo = reconstruction - kl_t - kl_c`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub kl_t: f64,
    pub kl_c: f64,
    pub elbo: f64,
}

/// `KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))`.
pub fn kl_normal(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    let r = sigma_q / sigma_p;
    let d = (mu_q - mu_p) / sigma_p;
    0.5 * (r * r + d * d - 1.0) - r.ln()
}

/// Scale that maps a zero logit to the middle of `[0, t_max]`.
fn time_scale(t_max: f64) -> f64 {
    0.5 * t_max / std::f64::consts::LN_2
}

pub(crate) fn positive(x: f64) -> f64 {
    softplus(x).max(SIGMA_FLOOR)
}

pub(crate) fn positive_grad(x: f64) -> f64 {
    if softplus(x) > SIGMA_FLOOR {
        sigmoid(x)
    } else {
        0.0
    }
}

impl ModelState {
    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn encoder_spec(n_genes: usize, kind: ModelKind, latent_dim: usize, hidden: &[usize], dropout: f64) -> MlpSpec {
        let out = match kind {
            ModelKind::Basic => 2,
            ModelKind::Full => 2 + 2 * latent_dim,
        };
        MlpSpec::new(2 * n_genes, hidden, out, Activation::Identity, dropout)
    }

    /// Mirror image of the encoder's hidden widths, sigmoid output.
    pub fn decoder_spec(n_genes: usize, latent_dim: usize, hidden: &[usize], dropout: f64) -> MlpSpec {
        let rev: Vec<usize> = hidden.iter().rev().copied().collect();
        MlpSpec::new(latent_dim, &rev, n_genes, Activation::Sigmoid, dropout)
    }

    pub fn encoder_input(&self, u: ArrayView2<f64>, s: ArrayView2<f64>) -> Result<Array2<f64>> {
        let g = self.n_genes();
        if u.ncols() != g || s.ncols() != g || u.nrows() != s.nrows() {
            return Err(Error::Shape(format!(
                "model has {g} genes; got unspliced {:?} and spliced {:?}",
                u.dim(),
                s.dim()
            )));
        }
        let mut x = Array2::zeros((u.nrows(), 2 * g));
        x.slice_mut(s![.., ..g]).assign(&u);
        x.slice_mut(s![.., g..]).assign(&s);
        for (mut col, &sc) in x.axis_iter_mut(Axis(1)).zip(&self.input_scale) {
            col /= sc;
        }
        Ok(x)
    }

    /// Split raw encoder outputs into posterior parameters.
    pub(crate) fn heads(&self, out: ArrayView2<f64>) -> LatentPosterior {
        let ts = time_scale(self.t_max);
        let mu_t = out.column(0).mapv(|v| ts * softplus(v));
        let sigma_t = out.column(1).mapv(positive);
        let (mu_c, sigma_c) = match self.kind {
            ModelKind::Basic => (None, None),
            ModelKind::Full => {
                let d = self.latent_dim;
                (Some(out.slice(s![.., 2..2 + d]).to_owned()), Some(out.slice(s![.., 2 + d..2 + 2 * d]).mapv(positive)))
            }
        };
        LatentPosterior { mu_t, sigma_t, mu_c, sigma_c }
    }

    /// Eval-mode posterior for a batch given as separate unspliced and spliced blocks.
    pub fn encode(&self, u: ArrayView2<f64>, s: ArrayView2<f64>) -> Result<LatentPosterior> {
        let x = self.encoder_input(u, s)?;
        let out = self.encoder.predict(x.view())?;
        Ok(self.heads(out.view()))
    }

    /// Relative transcription rates for a batch of latent states.
    pub fn decode_rho(&self, c: ArrayView2<f64>) -> Result<Array2<f64>> {
        let dec = self.decoder.as_ref().ok_or_else(|| Error::Config("the basic model has no rho decoder".into()))?;
        if c.ncols() != self.latent_dim {
            return Err(Error::Shape(format!("latent state has {} columns, model uses {}", c.ncols(), self.latent_dim)));
        }
        dec.predict(c)
    }

    pub(crate) fn source(&self, rho: Option<f64>, anchor: Option<(&Anchor, usize)>) -> Source {
        match (self.kind, rho, anchor) {
            (ModelKind::Basic, _, _) => Source::Switch,
            (ModelKind::Full, rho, Some((a, g))) => {
                Source::Anchored { rho: rho.unwrap_or(1.0), u0: a.u0[g], s0: a.s0[g], t0: a.t0 }
            }
            (ModelKind::Full, rho, None) => Source::Mixture { rho: rho.unwrap_or(1.0) },
        }
    }

    /// Anchors for cells at the given times; all `None` before refinement.
    pub fn anchors(&self, times: &[f64]) -> Vec<Option<Anchor>> {
        match &self.refinement {
            None => vec![None; times.len()],
            Some(r) => times.iter().map(|&t| r.anchor(t)).collect(),
        }
    }

    /// Kinetic means for cells at `times`, with `rho` rows for the full model.
    pub fn kinetic_means(
        &self,
        times: &[f64],
        rho: Option<ArrayView2<f64>>,
        anchors: &[Option<Anchor>],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let g = self.n_genes();
        let n = times.len();
        if anchors.len() != n || rho.as_ref().is_some_and(|r| r.dim() != (n, g)) {
            return Err(Error::Shape(format!("{n} times with mismatched rho or anchors")));
        }
        if self.kind == ModelKind::Full && rho.is_none() {
            return Err(Error::Config("the full model needs rho".into()));
        }
        let rates: Vec<Rates> = (0..g).map(|j| self.ode.rates(j)).collect();
        let mut u = Array2::zeros((n, g));
        let mut s = Array2::zeros((n, g));
        for i in 0..n {
            for j in 0..g {
                let r = rho.as_ref().map(|r| r[[i, j]]);
                let src = self.source(r, anchors[i].as_ref().map(|a| (a, j)));
                let x = mean::mean(&rates[j], src, times[i]);
                u[[i, j]] = x.u;
                s[[i, j]] = x.s;
            }
        }
        Ok((u, s))
    }

    /// ELBO of a batch for given posterior parameters and sampled latents.
    ///
    /// `t` (and `c` for the full model) are the reparameterized draws; the KL
    /// terms use the closed form between `posterior` and the prior. Prior means
    /// default to `prior.t0`.
    pub fn elbo_terms(
        &self,
        u: ArrayView2<f64>,
        s: ArrayView2<f64>,
        posterior: &LatentPosterior,
        t: &[f64],
        c: Option<ArrayView2<f64>>,
        prior_means: Option<&[f64]>,
    ) -> Result<ElboTerms> {
        let n = u.nrows();
        if posterior.mu_t.len() != n || t.len() != n || s.dim() != u.dim() || u.ncols() != self.n_genes() {
            return Err(Error::Shape("batch, posterior and samples disagree in size".into()));
        }
        let rho = match (self.kind, c) {
            (ModelKind::Full, Some(c)) => Some(self.decode_rho(c)?),
            (ModelKind::Full, None) => return Err(Error::Config("the full model needs a sampled cell state".into())),
            (ModelKind::Basic, _) => None,
        };
        let anchors = self.anchors(posterior.mu_t.as_slice().expect("contiguous"));
        let (uh, sh) = self.kinetic_means(t, rho.as_ref().map(|r| r.view()), &anchors)?;
        let mut recon = 0.0;
        for j in 0..self.n_genes() {
            let (lsu, lss) = (self.ode.log_sigma_u[j], self.ode.log_sigma_s[j]);
            let (su, ss) = (lsu.exp(), lss.exp());
            for i in 0..n {
                let ru = (u[[i, j]] - uh[[i, j]]) / su;
                let rs = (s[[i, j]] - sh[[i, j]]) / ss;
                recon -= (2.0 * std::f64::consts::PI).ln() + lsu + lss + 0.5 * (ru * ru + rs * rs);
            }
        }
        let mut kl_t = 0.0;
        for i in 0..n {
            let mp = prior_means.map_or(self.prior.t0, |m| m[i]);
            kl_t += kl_normal(posterior.mu_t[i], posterior.sigma_t[i], mp, self.prior.sigma0);
        }
        let mut kl_c = 0.0;
        if let (Some(mc), Some(sc)) = (&posterior.mu_c, &posterior.sigma_c) {
            kl_c = mc.iter().zip(sc).map(|(&m, &sd)| kl_normal(m, sd, 0.0, 1.0)).sum();
        }
        let nf = n as f64;
        let terms = ElboTerms {
            reconstruction: recon / nf,
            kl_t: kl_t / nf,
            kl_c: kl_c / nf,
            elbo: (recon - kl_t - kl_c) / nf,
        };
        for (name, v) in [("reconstruction", terms.reconstruction), ("kl_t", terms.kl_t), ("kl_c", terms.kl_c)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name.into() });
            }
        }
        Ok(terms)
    }

    /// Per-gene parameters in natural units. For the full model `t_off` is infinite.
    pub fn gene_kinetics(&self) -> Vec<GeneKinetics> {
        (0..self.n_genes())
            .map(|j| {
                let r = self.ode.rates(j);
                let mut k = GeneKinetics::new(r.alpha, r.beta, r.gamma)
                    .with_noise(self.ode.log_sigma_u[j].exp(), self.ode.log_sigma_s[j].exp());
                k.t_on = r.t_on;
                k.t_off = r.t_on + r.dt;
                k
            })
            .collect()
    }

    /// Write `model.tensors` and `model_genes.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut t = vec![NamedTensor::vector(
            "meta",
            vec![
                match self.kind {
                    ModelKind::Basic => 0.0,
                    ModelKind::Full => 1.0,
                },
                self.t_max,
                self.latent_dim as f64,
                self.prior.t0,
                self.prior.sigma0,
            ],
        )];
        let spec = self.encoder.spec();
        let hidden: Vec<f64> = spec.layers[..spec.layers.len() - 1].iter().map(|l| l.width as f64).collect();
        let dropout = spec.layers.first().map_or(0.0, |l| l.dropout);
        t.push(NamedTensor::vector("hidden", hidden));
        t.push(NamedTensor::vector("dropout", vec![dropout]));
        t.push(NamedTensor::vector("input_scale", self.input_scale.clone()));
        for (name, v) in self.ode.fields() {
            t.push(NamedTensor::vector(format!("ode.{name}"), v.clone()));
        }
        if let Some(m) = &self.prior.informative {
            t.push(NamedTensor::vector("prior.means", m.clone()));
        }
        t.extend(mlp_tensors("encoder", &self.encoder));
        if let Some(d) = &self.decoder {
            t.extend(mlp_tensors("decoder", d));
        }
        if let Some(r) = &self.refinement {
            t.push(NamedTensor::vector("refine.window", vec![r.delta1, r.delta2]));
            t.push(NamedTensor::vector("refine.times", r.times.clone()));
            t.push(NamedTensor::new("refine.u", vec![r.u.nrows(), r.u.ncols()], r.u.iter().copied().collect()));
            t.push(NamedTensor::new("refine.s", vec![r.s.nrows(), r.s.ncols()], r.s.iter().copied().collect()));
        }
        write_tensors(&dir.join("model.tensors"), &t)?;
        let genes = self.genes.join("\n") + "\n";
        let path = dir.join("model_genes.txt");
        std::fs::write(&path, genes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.tensors");
        let t = read_tensors(&path)?;
        let gpath = dir.join("model_genes.txt");
        let genes: Vec<String> = std::fs::read_to_string(&gpath)
            .map_err(|e| Error::io(&gpath, e))?
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let meta = &find(&t, "meta")?.data;
        if meta.len() != 5 {
            return Err(Error::parse(&path, "meta tensor must hold 5 values"));
        }
        let kind = if meta[0] == 1.0 { ModelKind::Full } else { ModelKind::Basic };
        let (t_max, latent_dim) = (meta[1], meta[2] as usize);
        let hidden: Vec<usize> = find(&t, "hidden")?.data.iter().map(|&v| v as usize).collect();
        let dropout = find(&t, "dropout")?.data[0];
        let g = genes.len();
        let vec_of = |name: &str| -> Result<Vec<f64>> { Ok(find(&t, name)?.data.clone()) };
        let ode = OdeParams {
            log_alpha: vec_of("ode.log_alpha")?,
            log_beta: vec_of("ode.log_beta")?,
            log_gamma: vec_of("ode.log_gamma")?,
            t_on: vec_of("ode.t_on")?,
            log_dt: vec_of("ode.log_dt")?,
            log_sigma_u: vec_of("ode.log_sigma_u")?,
            log_sigma_s: vec_of("ode.log_sigma_s")?,
        };
        if ode.fields().iter().any(|(n, v)| v.len() != g && !(*n == "log_dt" && v.is_empty())) {
            return Err(Error::parse(&path, format!("kinetic tables do not match {g} genes")));
        }
        let encoder = mlp_from_tensors("encoder", Self::encoder_spec(g, kind, latent_dim, &hidden, dropout), &t)?;
        let decoder = match kind {
            ModelKind::Basic => None,
            ModelKind::Full => Some(mlp_from_tensors("decoder", Self::decoder_spec(g, latent_dim, &hidden, dropout), &t)?),
        };
        let prior = TimePrior { t0: meta[3], sigma0: meta[4], informative: find(&t, "prior.means").ok().map(|x| x.data.clone()) };
        let refinement = match find(&t, "refine.window") {
            Err(_) => None,
            Ok(w) => {
                let times = vec_of("refine.times")?;
                let shaped = |name: &str| -> Result<Array2<f64>> {
                    Array2::from_shape_vec((times.len(), g), vec_of(name)?).map_err(|e| Error::parse(&path, format!("{name}: {e}")))
                };
                Some(Refinement::new(w.data[0], w.data[1], &times, shaped("refine.u")?.view(), shaped("refine.s")?.view())?)
            }
        };
        let input_scale = vec_of("input_scale")?;
        if input_scale.len() != 2 * g {
            return Err(Error::parse(&path, "input scale does not match the gene list"));
        }
        Ok(Self { kind, genes, t_max, latent_dim, encoder, decoder, ode, input_scale, prior, refinement })
    }
}

#[cfg(test)]
mod tests;
