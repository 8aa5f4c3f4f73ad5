//! Parameter initialization, minibatch training, initial-condition refinement
//! and prediction.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::mean::{self, Rates, LOG_ALPHA, LOG_BETA, LOG_DT, LOG_GAMMA, RHO, TIME, T_ON};
use super::{
    kl_normal, positive_grad, time_scale, Anchor, ElboTerms, LatentPosterior, ModelKind, ModelState, OdeParams,
    Refinement, TimePrior, TrainConfig,
};
use crate::error::{Error, Result};
use crate::estimators::{assign_times_grid, fit_steady_state, global_time, quantile};
use crate::io::ExpressionMatrix;
use crate::kinetics::GeneKinetics;
use crate::nn::{sigmoid, softplus, AdamConfig, AdamState, Mlp, MlpGrads, Mode, Trainable};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Starting point for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub kinetics: Vec<GeneKinetics>,
    /// False for genes whose steady-state fit failed; they start at `alpha = beta = gamma = 1`.
    pub estimable: Vec<bool>,
    pub prior: TimePrior,
}

fn std_dev(x: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = x.clone().count() as f64;
    let mean = x.clone().sum::<f64>() / n;
    (x.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Steady-state rates for every gene, switch-on at 0 and noise scales from the
/// steady-state residuals. With capture times the prior means follow the scaled
/// capture times and the switch-off time is their 75th percentile; otherwise it
/// is `t_max / 2`.
pub fn initialize_params(
    u: ArrayView2<f64>,
    s: ArrayView2<f64>,
    capture_times: Option<&[f64]>,
    t_max: f64,
) -> Result<Initialization> {
    if u.dim() != s.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", u.dim(), s.dim())));
    }
    let (prior, t_off) = match capture_times {
        None => (TimePrior::uninformative(t_max), 0.5 * t_max),
        Some(c) => {
            let prior = TimePrior::from_capture_times(c, t_max)?;
            let q = quantile(prior.informative.as_ref().expect("informative"), 0.75);
            (prior, q.max(1e-3 * t_max))
        }
    };
    let mut kinetics = Vec::with_capacity(u.ncols());
    let mut estimable = Vec::with_capacity(u.ncols());
    for j in 0..u.ncols() {
        let uj = u.column(j).to_vec();
        let sj = s.column(j).to_vec();
        let ss = fit_steady_state(&uj, &sj, 0.95)?;
        let ok = ss.estimable && ss.alpha > 0.0 && ss.gamma > 0.0;
        let (a, b, g) = if ok { (ss.alpha, ss.beta, ss.gamma) } else { (1.0, 1.0, 1.0) };
        let floor = |x: &[f64]| (1e-2 * std_dev(x.iter().copied())).max(1e-6);
        let ru = uj.iter().zip(&sj).map(|(&x, &y)| x - g / b * y);
        let rs = uj.iter().zip(&sj).map(|(&x, &y)| y - b / g * x);
        let su = std_dev(ru).max(floor(&uj));
        let sd = std_dev(rs).max(floor(&sj));
        kinetics.push(GeneKinetics::new(a, b, g).with_switch(0.0, t_off).with_noise(su, sd));
        estimable.push(ok);
    }
    Ok(Initialization { kinetics, estimable, prior })
}

/// Per-cell times in `[0, t_max]` implied by the initial kinetics: every
/// estimable gene places each cell on its switching curve and the cell takes
/// the median of the rescaled gene times.
pub fn initial_times(u: ArrayView2<f64>, s: ArrayView2<f64>, init: &Initialization, t_max: f64) -> Result<Vec<f64>> {
    let (n, g) = u.dim();
    if init.kinetics.len() != g {
        return Err(Error::Shape(format!("{g} genes but {} initial kinetics", init.kinetics.len())));
    }
    let mut times = Array2::zeros((n, g));
    for j in 0..g {
        if !init.estimable[j] {
            continue;
        }
        let t = assign_times_grid(&u.column(j).to_vec(), &s.column(j).to_vec(), &init.kinetics[j], 500, t_max)?;
        times.column_mut(j).assign(&ndarray::Array1::from(t));
    }
    Ok(global_time(times.view(), &init.estimable)?.into_iter().map(|v| v * t_max).collect())
}

/// Fits the time head to `target` by least squares so that ELBO training
/// starts from a consistent time direction.
fn warm_start_time(
    state: &mut ModelState,
    u: ArrayView2<f64>,
    s: ArrayView2<f64>,
    target: &[f64],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut adam = AdamState::new(AdamConfig::default());
    let ts = time_scale(state.t_max);
    let mut order: Vec<usize> = (0..target.len()).collect();
    for _ in 0..config.time_warm_start {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = state.encoder_input(u.select(Axis(0), chunk).view(), s.select(Axis(0), chunk).view())?;
            let (out, cache) = state.encoder.forward(x.view(), Mode::Train, rng)?;
            let mut dout = Array2::zeros(out.raw_dim());
            let w = 2.0 / (chunk.len() as f64 * state.t_max * state.t_max);
            for (i, &k) in chunk.iter().enumerate() {
                let mu = ts * softplus(out[[i, 0]]);
                dout[[i, 0]] = w * (mu - target[k]) * ts * sigmoid(out[[i, 0]]);
            }
            let (grads, _) = state.encoder.backward(cache, dout.view())?;
            adam.step(&mut state.encoder, &grads, config.learning_rate)?;
        }
    }
    Ok(())
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-cell ELBO over the epoch's minibatches, with full KL weight.
    pub elbo: f64,
    pub kl_t: f64,
    pub kl_c: f64,
    pub mse_train: f64,
    pub mse_test: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub history: Vec<EpochRecord>,
    pub train_cells: Vec<usize>,
    pub test_cells: Vec<usize>,
}

/// Training stopped on an error. `checkpoint` is the state after the last
/// completed epoch, if any.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub checkpoint: Option<Box<ModelState>>,
    pub history: Vec<EpochRecord>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, checkpoint: None, history: Vec::new() }
    }
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training failed after {} epochs: {}", self.history.len(), self.error)
    }
}

/// Gradients of the minibatch loss, shaped like the parameters they belong to.
pub struct Gradients {
    pub encoder: MlpGrads,
    pub decoder: Option<MlpGrads>,
    pub ode: OdeParams,
}

impl Gradients {
    fn is_finite(&self) -> bool {
        let finite = |p: &dyn Trainable| p.tensors().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()));
        finite(&self.encoder) && self.decoder.as_ref().map_or(true, |d| finite(d)) && finite(&self.ode)
    }
}

/// Negative log-likelihood of one cell and gene and its gradient, scaled by `w`.
///
/// Returns the unscaled NLL; adds `w * dNLL/dparam` into `ode`, and returns
/// `w * dNLL/dt` and `w * dNLL/drho`.
#[allow(clippy::too_many_arguments)]
fn nll_cell_gene(
    state: &ModelState,
    rates: &Rates,
    src: mean::Source,
    j: usize,
    t: f64,
    u: f64,
    s: f64,
    w: f64,
    ode: &mut OdeParams,
) -> (f64, f64, f64) {
    let (x, gu, gs) = mean::mean_with_grad(rates, src, t);
    let (lsu, lss) = (state.ode.log_sigma_u[j], state.ode.log_sigma_s[j]);
    let (iu, is) = ((-lsu).exp(), (-lss).exp());
    let ru = (u - x.u) * iu;
    let rs = (s - x.s) * is;
    let nll = LN_2PI + lsu + lss + 0.5 * (ru * ru + rs * rs);
    // d nll / d mean
    let du = -ru * iu * w;
    let ds = -rs * is * w;
    ode.log_alpha[j] += du * gu[LOG_ALPHA] + ds * gs[LOG_ALPHA];
    ode.log_beta[j] += du * gu[LOG_BETA] + ds * gs[LOG_BETA];
    ode.log_gamma[j] += du * gu[LOG_GAMMA] + ds * gs[LOG_GAMMA];
    ode.t_on[j] += du * gu[T_ON] + ds * gs[T_ON];
    if let Some(v) = ode.log_dt.get_mut(j) {
        *v += du * gu[LOG_DT] + ds * gs[LOG_DT];
    }
    ode.log_sigma_u[j] += w * (1.0 - ru * ru);
    ode.log_sigma_s[j] += w * (1.0 - rs * rs);
    (nll, du * gu[TIME] + ds * gs[TIME], du * gu[RHO] + ds * gs[RHO])
}

/// Forward and reverse pass of the negative ELBO over one minibatch.
///
/// The loss is `(NLL + kl_weight * (KL_t + KL_c)) / B`. `eps_t` and `eps_c`
/// are the standard-normal draws of the reparameterization. The returned
/// terms always use full KL weight.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_gradients(
    state: &mut ModelState,
    u: ArrayView2<f64>,
    s: ArrayView2<f64>,
    prior_means: &[f64],
    eps_t: &[f64],
    eps_c: Option<ArrayView2<f64>>,
    mode: Mode,
    kl_weight: f64,
    rng: &mut impl Rng,
) -> Result<(ElboTerms, f64, Gradients)> {
    let (b, g) = u.dim();
    let w = 1.0 / b as f64;
    let x = state.encoder_input(u, s)?;
    let (out, enc_cache) = state.encoder.forward(x.view(), mode, rng)?;
    let post = state.heads(out.view());
    let t: Vec<f64> = (0..b).map(|i| post.mu_t[i] + post.sigma_t[i] * eps_t[i]).collect();

    let mut c = None;
    let mut rho = None;
    let mut dec_cache = None;
    if state.kind == ModelKind::Full {
        let (mc, sc) = (post.mu_c.as_ref().expect("full"), post.sigma_c.as_ref().expect("full"));
        let eps = eps_c.ok_or_else(|| Error::Config("the full model needs cell-state noise".into()))?;
        let cc = mc + &(sc * &eps);
        let dec = state.decoder.as_mut().expect("full model has a decoder");
        let (r, cache) = dec.forward(cc.view(), mode, rng)?;
        c = Some(cc);
        rho = Some(r);
        dec_cache = Some(cache);
    }

    let anchors = state.anchors(post.mu_t.as_slice().expect("contiguous"));
    let rates: Vec<Rates> = (0..g).map(|j| state.ode.rates(j)).collect();
    let mut ode = state.ode.zeros_like();
    let mut dt = vec![0.0; b];
    let mut drho = Array2::zeros((b, g));
    let mut nll = 0.0;
    for i in 0..b {
        for j in 0..g {
            let r = rho.as_ref().map(|r| r[[i, j]]);
            let src = state.source(r, anchors[i].as_ref().map(|a| (a, j)));
            let (l, d_t, d_rho) = nll_cell_gene(state, &rates[j], src, j, t[i], u[[i, j]], s[[i, j]], w, &mut ode);
            nll += l;
            dt[i] += d_t;
            drho[[i, j]] = d_rho;
        }
    }

    let ts = time_scale(state.t_max);
    let sp = state.prior.sigma0;
    let mut dout = Array2::zeros(out.raw_dim());
    let mut kl_t = 0.0;
    for i in 0..b {
        let (m, sd) = (post.mu_t[i], post.sigma_t[i]);
        kl_t += kl_normal(m, sd, prior_means[i], sp);
        let dmu = dt[i] + kl_weight * w * (m - prior_means[i]) / (sp * sp);
        let dsd = dt[i] * eps_t[i] + kl_weight * w * (sd / (sp * sp) - 1.0 / sd);
        dout[[i, 0]] = dmu * ts * sigmoid(out[[i, 0]]);
        dout[[i, 1]] = dsd * positive_grad(out[[i, 1]]);
    }

    let mut kl_c = 0.0;
    let mut dec_grads = None;
    if let (Some(cache), Some(_)) = (dec_cache, c.as_ref()) {
        let dec = state.decoder.as_ref().expect("full model has a decoder");
        let (grads, dc) = dec.backward(cache, drho.view())?;
        dec_grads = Some(grads);
        let (mc, sc) = (post.mu_c.as_ref().expect("full"), post.sigma_c.as_ref().expect("full"));
        let eps = eps_c.expect("checked above");
        let d = state.latent_dim;
        for i in 0..b {
            for k in 0..d {
                let (m, sd) = (mc[[i, k]], sc[[i, k]]);
                kl_c += kl_normal(m, sd, 0.0, 1.0);
                let dmu = dc[[i, k]] + kl_weight * w * m;
                let dsd = dc[[i, k]] * eps[[i, k]] + kl_weight * w * (sd - 1.0 / sd);
                dout[[i, 2 + k]] = dmu;
                dout[[i, 2 + d + k]] = dsd * positive_grad(out[[i, 2 + d + k]]);
            }
        }
    }
    let (enc_grads, _) = state.encoder.backward(enc_cache, dout.view())?;

    let terms = ElboTerms {
        reconstruction: -nll * w,
        kl_t: kl_t * w,
        kl_c: kl_c * w,
        elbo: -(nll + kl_t + kl_c) * w,
    };
    for (name, v) in [("reconstruction", terms.reconstruction), ("kl_t", terms.kl_t), ("kl_c", terms.kl_c)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    let loss = (nll + kl_weight * (kl_t + kl_c)) * w;
    Ok((terms, loss, Gradients { encoder: enc_grads, decoder: dec_grads, ode }))
}

/// Posterior means, rho and reconstruction for every row.
pub(crate) fn reconstruct(
    state: &ModelState,
    u: ArrayView2<f64>,
    s: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>, LatentPosterior, Option<Array2<f64>>, Vec<Option<Anchor>>)> {
    let post = state.encode(u, s)?;
    let rho = match &post.mu_c {
        Some(c) => Some(state.decode_rho(c.view())?),
        None => None,
    };
    let times = post.mu_t.to_vec();
    let anchors = state.anchors(&times);
    let (uh, sh) = state.kinetic_means(&times, rho.as_ref().map(|r| r.view()), &anchors)?;
    Ok((uh, sh, post, rho, anchors))
}

fn mse(u: ArrayView2<f64>, s: ArrayView2<f64>, uh: &Array2<f64>, sh: &Array2<f64>) -> f64 {
    let su: f64 = (&u - uh).iter().map(|v| v * v).sum();
    let ss: f64 = (&s - sh).iter().map(|v| v * v).sum();
    (su + ss) / (2 * u.len()) as f64
}

pub(crate) fn reconstruction_mse(state: &ModelState, u: ArrayView2<f64>, s: ArrayView2<f64>) -> Result<f64> {
    let (uh, sh, ..) = reconstruct(state, u, s)?;
    Ok(mse(u, s, &uh, &sh))
}

fn split(n: usize, fraction: f64, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_train = ((n as f64) * fraction).round() as usize;
    if n_train < 2 || n_train >= n {
        return Err(Error::Config(format!("a train fraction of {fraction} leaves no usable split of {n} cells")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn column_scale(u: ArrayView2<f64>, s: ArrayView2<f64>) -> Vec<f64> {
    u.axis_iter(Axis(1))
        .chain(s.axis_iter(Axis(1)))
        .map(|c| {
            let sd = std_dev(c.iter().copied());
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect()
}

fn ode_from(kinetics: &[GeneKinetics], kind: ModelKind) -> OdeParams {
    let map = |f: &dyn Fn(&GeneKinetics) -> f64| kinetics.iter().map(f).collect::<Vec<f64>>();
    OdeParams {
        log_alpha: map(&|k| k.alpha.ln()),
        log_beta: map(&|k| k.beta.ln()),
        log_gamma: map(&|k| k.gamma.ln()),
        t_on: map(&|k| k.t_on),
        log_dt: match kind {
            ModelKind::Basic => map(&|k| (k.t_off - k.t_on).ln()),
            ModelKind::Full => Vec::new(),
        },
        log_sigma_u: map(&|k| k.sigma_u.ln()),
        log_sigma_s: map(&|k| k.sigma_s.ln()),
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

struct Optimizers {
    encoder: AdamState,
    decoder: AdamState,
    ode: AdamState,
}

impl Optimizers {
    fn new() -> Self {
        let c = AdamConfig::default();
        Self { encoder: AdamState::new(c), decoder: AdamState::new(c), ode: AdamState::new(c) }
    }
}

/// Minibatch ADAM on the negative ELBO.
///
/// Cells are split into train and held-out sets by a seeded shuffle; batches
/// smaller than two cells are dropped because batch normalization needs batch
/// statistics. Encoder and decoder use `learning_rate`, the kinetic parameters
/// use `ode_learning_rate`.
pub fn train(
    data: &ExpressionMatrix,
    config: &TrainConfig,
    kind: ModelKind,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    config.validate()?;
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_cells, test_cells) = split(data.n_cells(), config.train_fraction, &mut rng)?;
    let u_tr = data.unspliced.select(Axis(0), &train_cells);
    let s_tr = data.spliced.select(Axis(0), &train_cells);
    let u_te = data.unspliced.select(Axis(0), &test_cells);
    let s_te = data.spliced.select(Axis(0), &test_cells);

    let capture = if config.informative_prior {
        Some(
            data.capture_times
                .as_deref()
                .ok_or_else(|| Error::Config("an informative prior needs capture times".into()))?,
        )
    } else {
        None
    };
    // rates come from training cells only; the prior covers every cell
    let init = initialize_params(u_tr.view(), s_tr.view(), None, config.t_max)?;
    let prior = match capture {
        Some(c) => initialize_params(u_tr.view(), s_tr.view(), None, config.t_max)
            .and_then(|_| TimePrior::from_capture_times(c, config.t_max))?,
        None => init.prior.clone(),
    };
    let init_for_times = init.clone();
    let mut kinetics = init.kinetics;
    if let Some(p) = &prior.informative {
        let scaled: Vec<f64> = train_cells.iter().map(|&i| p[i]).collect();
        let t_off = quantile(&scaled, 0.75).max(1e-3 * config.t_max);
        for k in &mut kinetics {
            k.t_off = t_off;
        }
    }

    let g = data.n_genes();
    let enc_spec = ModelState::encoder_spec(g, kind, config.latent_dim, &config.hidden, config.dropout);
    let encoder = Mlp::new(enc_spec, &mut rng)?;
    let decoder = match kind {
        ModelKind::Basic => None,
        ModelKind::Full => Some(Mlp::new(
            ModelState::decoder_spec(g, config.latent_dim, &config.hidden, config.dropout),
            &mut rng,
        )?),
    };
    let mut state = ModelState {
        kind,
        genes: data.gene_names.clone(),
        t_max: config.t_max,
        latent_dim: config.latent_dim,
        encoder,
        decoder,
        ode: ode_from(&kinetics, kind),
        input_scale: column_scale(u_tr.view(), s_tr.view()),
        prior,
        refinement: None,
    };
    state.prior.validate(data.n_cells())?;
    if config.time_warm_start > 0 {
        let target = match &state.prior.informative {
            Some(p) => train_cells.iter().map(|&i| p[i]).collect(),
            None => initial_times(u_tr.view(), s_tr.view(), &init_for_times, config.t_max)?,
        };
        warm_start_time(&mut state, u_tr.view(), s_tr.view(), &target, config, &mut rng)?;
    }

    let warmup = (config.kl_warmup * config.epochs as f64).ceil() as usize;
    let mut opt = Optimizers::new();
    let mut history: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut checkpoint: Option<Box<ModelState>> = None;
    let mut order: Vec<usize> = (0..train_cells.len()).collect();
    let fail = |error: Error, checkpoint: Option<Box<ModelState>>, history: Vec<EpochRecord>| TrainFailure {
        error,
        checkpoint,
        history,
    };

    for epoch in 0..config.epochs {
        let kl_weight = if warmup == 0 { 1.0 } else { ((epoch + 1) as f64 / warmup as f64).min(1.0) };
        order.shuffle(&mut rng);
        let mut sums = ElboTerms::default();
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let ub = u_tr.select(Axis(0), chunk);
            let sb = s_tr.select(Axis(0), chunk);
            let pm: Vec<f64> = chunk.iter().map(|&k| state.prior.mean(train_cells[k])).collect();
            let eps_t: Vec<f64> = (0..chunk.len()).map(|_| rng.sample(StandardNormal)).collect();
            let eps_c = (kind == ModelKind::Full).then(|| normal_matrix(chunk.len(), config.latent_dim, &mut rng));
            let step = minibatch_gradients(
                &mut state,
                ub.view(),
                sb.view(),
                &pm,
                &eps_t,
                eps_c.as_ref().map(|e| e.view()),
                Mode::Train,
                kl_weight,
                &mut rng,
            );
            let (terms, loss, grads) = match step {
                Ok(x) => x,
                Err(e) => return Err(fail(e, checkpoint, history)),
            };
            if !loss.is_finite() {
                return Err(fail(Error::NonFinite { term: "loss".into() }, checkpoint, history));
            }
            if !grads.is_finite() {
                return Err(fail(Error::NonFinite { term: "gradient".into() }, checkpoint, history));
            }
            let mut update = || -> Result<()> {
                opt.encoder.step(&mut state.encoder, &grads.encoder, config.learning_rate)?;
                if let (Some(d), Some(dg)) = (state.decoder.as_mut(), grads.decoder.as_ref()) {
                    opt.decoder.step(d, dg, config.learning_rate)?;
                }
                opt.ode.step(&mut state.ode, &grads.ode, config.ode_learning_rate)
            };
            if let Err(e) = update() {
                return Err(fail(e, checkpoint, history));
            }
            let nb = chunk.len() as f64;
            sums.reconstruction += terms.reconstruction * nb;
            sums.kl_t += terms.kl_t * nb;
            sums.kl_c += terms.kl_c * nb;
            sums.elbo += terms.elbo * nb;
            seen += chunk.len();
        }
        let evaluated = reconstruction_mse(&state, u_tr.view(), s_tr.view())
            .and_then(|a| Ok((a, reconstruction_mse(&state, u_te.view(), s_te.view())?)));
        let (mse_train, mse_test) = match evaluated {
            Ok(x) => x,
            Err(e) => return Err(fail(e, checkpoint, history)),
        };
        if !(mse_train.is_finite() && mse_test.is_finite()) {
            return Err(fail(Error::NonFinite { term: "reconstruction error".into() }, checkpoint, history));
        }
        let nf = seen.max(1) as f64;
        history.push(EpochRecord {
            epoch: epoch + 1,
            elbo: sums.elbo / nf,
            kl_t: sums.kl_t / nf,
            kl_c: sums.kl_c / nf,
            mse_train,
            mse_test,
        });
        checkpoint = Some(Box::new(state.clone()));
    }
    Ok(TrainOutcome { state, history, train_cells, test_cells })
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub state: ModelState,
    pub mse_before: f64,
    pub mse_after: f64,
    /// True when fine-tuning raised training error by more than 1% and the
    /// input state was returned unchanged.
    pub rolled_back: bool,
    /// Training cells whose preceding window held no cells.
    pub empty_windows: usize,
}

/// Reconstruction-only pass with fixed latent time and state; updates decoder and kinetics.
fn refine_pass(
    state: &mut ModelState,
    u: ArrayView2<f64>,
    s: ArrayView2<f64>,
    times: &[f64],
    c: ArrayView2<f64>,
    anchors: &[Option<Anchor>],
    rng: &mut impl Rng,
) -> Result<(f64, MlpGrads, OdeParams)> {
    let (b, g) = u.dim();
    let w = 1.0 / b as f64;
    let dec = state.decoder.as_mut().ok_or_else(|| Error::Config("refinement needs the full model".into()))?;
    let (rho, cache) = dec.forward(c, Mode::Train, rng)?;
    let rates: Vec<Rates> = (0..g).map(|j| state.ode.rates(j)).collect();
    let mut ode = state.ode.zeros_like();
    let mut drho = Array2::zeros((b, g));
    let mut nll = 0.0;
    for i in 0..b {
        for j in 0..g {
            let src = state.source(Some(rho[[i, j]]), anchors[i].as_ref().map(|a| (a, j)));
            let (l, _, d_rho) = nll_cell_gene(state, &rates[j], src, j, times[i], u[[i, j]], s[[i, j]], w, &mut ode);
            nll += l;
            drho[[i, j]] = d_rho;
        }
    }
    let (dg, _) = state.decoder.as_ref().expect("checked").backward(cache, drho.view())?;
    Ok((nll * w, dg, ode))
}

/// Per-cell initial conditions from the window preceding each cell's latent
/// time, then fine-tuning of kinetics and decoder with the encoder frozen.
///
/// The state with the lowest training error over the fine-tuning epochs is
/// kept. If even that error exceeds the pre-refinement error by more than 1%
/// the input state is returned unchanged.
pub fn refine_initial_conditions(
    state: &ModelState,
    data: &ExpressionMatrix,
    train_cells: &[usize],
    config: &TrainConfig,
) -> Result<RefineOutcome> {
    if state.kind != ModelKind::Full {
        return Err(Error::Config("initial-condition refinement applies to the full model".into()));
    }
    if !(config.delta1 > config.delta2 && config.delta2 >= 0.0) {
        return Err(Error::Config(format!(
            "refinement window needs delta1 > delta2 >= 0, got {} and {}",
            config.delta1, config.delta2
        )));
    }
    check_genes(state, data)?;
    let u = data.unspliced.select(Axis(0), train_cells);
    let s = data.spliced.select(Axis(0), train_cells);
    let base = ModelState { refinement: None, ..state.clone() };
    let mse_before = reconstruction_mse(&base, u.view(), s.view())?;
    let post = base.encode(u.view(), s.view())?;
    let times = post.mu_t.to_vec();
    let c = post.mu_c.expect("full model");

    let mut work = base.clone();
    work.refinement = Some(Refinement::new(config.delta1, config.delta2, &times, u.view(), s.view())?);
    let anchors = work.anchors(&times);
    let empty_windows = anchors.iter().filter(|a| a.is_none()).count();

    let eval = |m: &ModelState| -> Result<f64> {
        let rho = m.decode_rho(c.view())?;
        let (uh, sh) = m.kinetic_means(&times, Some(rho.view()), &anchors)?;
        Ok(mse(u.view(), s.view(), &uh, &sh))
    };
    let mut best_mse = eval(&work)?;
    let mut best = work.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e_f1_4e);
    let mut opt = Optimizers::new();
    let mut order: Vec<usize> = (0..times.len()).collect();
    for _ in 0..config.refine_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let tb: Vec<f64> = chunk.iter().map(|&k| times[k]).collect();
            let ab: Vec<Option<Anchor>> = chunk.iter().map(|&k| anchors[k].clone()).collect();
            let (loss, dg, ode) = refine_pass(
                &mut work,
                u.select(Axis(0), chunk).view(),
                s.select(Axis(0), chunk).view(),
                &tb,
                c.select(Axis(0), chunk).view(),
                &ab,
                &mut rng,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { term: "refinement loss".into() });
            }
            opt.decoder.step(work.decoder.as_mut().expect("full"), &dg, config.learning_rate)?;
            opt.ode.step(&mut work.ode, &ode, config.ode_learning_rate)?;
        }
        let m = eval(&work)?;
        if m < best_mse {
            best_mse = m;
            best = work.clone();
        }
    }
    if best_mse > 1.01 * mse_before {
        return Ok(RefineOutcome { state: state.clone(), mse_before, mse_after: mse_before, rolled_back: true, empty_windows });
    }
    Ok(RefineOutcome { state: best, mse_before, mse_after: best_mse, rolled_back: false, empty_windows })
}

fn check_genes(state: &ModelState, data: &ExpressionMatrix) -> Result<()> {
    if data.gene_names != state.genes {
        let first = data
            .gene_names
            .iter()
            .zip(&state.genes)
            .position(|(a, b)| a != b)
            .unwrap_or(data.gene_names.len().min(state.genes.len()));
        return Err(Error::Data(format!(
            "gene set differs from the fitted model ({} vs {} genes, first difference at position {first})",
            data.n_genes(),
            state.n_genes()
        )));
    }
    Ok(())
}

/// Model output for a set of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub u_hat: Array2<f64>,
    pub s_hat: Array2<f64>,
    pub posterior: LatentPosterior,
    /// Relative transcription rate per cell and gene. For the basic model it is
    /// 1 inside the induction window and 0 elsewhere.
    pub rho: Array2<f64>,
    pub du_dt: Array2<f64>,
    pub ds_dt: Array2<f64>,
    /// Per-cell start time of a refined model; `None` before refinement or for an empty window.
    pub t0: Vec<Option<f64>>,
}

/// Posterior means pushed through the kinetics; velocities use `rho * alpha`.
pub fn predict(state: &ModelState, data: &ExpressionMatrix) -> Result<Prediction> {
    check_genes(state, data)?;
    let (u_hat, s_hat, posterior, rho, anchors) = reconstruct(state, data.unspliced.view(), data.spliced.view())?;
    let (n, g) = u_hat.dim();
    let rho = rho.unwrap_or_else(|| {
        Array2::from_shape_fn((n, g), |(i, j)| {
            let r = state.ode.rates(j);
            let t = posterior.mu_t[i];
            if t >= r.t_on && t < r.t_on + r.dt {
                1.0
            } else {
                0.0
            }
        })
    });
    let mut du_dt = Array2::zeros((n, g));
    let mut ds_dt = Array2::zeros((n, g));
    for j in 0..g {
        let r = state.ode.rates(j);
        for i in 0..n {
            let v = crate::kinetics::velocity(u_hat[[i, j]], s_hat[[i, j]], r.beta, r.gamma, Some(rho[[i, j]] * r.alpha));
            du_dt[[i, j]] = v.du_dt.expect("rate supplied");
            ds_dt[[i, j]] = v.ds_dt;
        }
    }
    let t0 = anchors.iter().map(|a| a.as_ref().map(|a| a.t0)).collect();
    Ok(Prediction { u_hat, s_hat, posterior, rho, du_dt, ds_dt, t0 })
}
