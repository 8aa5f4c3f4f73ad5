//! Baseline estimators: steady-state quantile fit, per-gene EM with grid time
//! assignment, and a post-hoc global time.
//!
//! The per-gene EM fits the switching model with induction starting at `t = 0`
//! from the zero state. The E-step assigns each cell the grid time minimizing its
//! squared distance to the curve (equal noise in `u` and `s`); the M-step runs
//! gradient descent with backtracking on the mean squared error over
//! `(log alpha, log beta, log gamma, t_off)`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{closed_form, closed_form_with_jacobian, solve_phase, GeneKinetics, KineticState};

pub const DEFAULT_QUANTILE: f64 = 0.95;
pub const DEFAULT_GRID: usize = 500;
pub const DEFAULT_T_MAX: f64 = 20.0;

/// Linearly interpolated quantile (the "linear" / type-7 definition).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateFit {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub quantile: f64,
    /// False when the spliced quantile is zero and `gamma` cannot be formed.
    pub estimable: bool,
}

/// `alpha = u*`, `beta = 1`, `gamma = u* / s*` from upper quantiles.
pub fn fit_steady_state(u: &[f64], s: &[f64], q: f64) -> Result<SteadyStateFit> {
    if u.len() != s.len() {
        return Err(Error::Shape(format!("{} unspliced vs {} spliced values", u.len(), s.len())));
    }
    if u.len() < 10 {
        return Err(Error::Shape(format!("steady-state fit needs at least 10 cells, got {}", u.len())));
    }
    if !(q > 0.5 && q < 1.0) {
        return Err(Error::Config(format!("quantile must lie in (0.5, 1), got {q}")));
    }
    let u_star = quantile(u, q);
    let s_star = quantile(s, q);
    if s_star > 0.0 && u_star.is_finite() {
        Ok(SteadyStateFit { alpha: u_star, beta: 1.0, gamma: u_star / s_star, quantile: q, estimable: u_star > 0.0 })
    } else {
        Ok(SteadyStateFit { alpha: u_star.max(0.0), beta: 1.0, gamma: 1.0, quantile: q, estimable: false })
    }
}

/// Uniform grid of `n` points over `[0, t_max]`, endpoints included.
pub fn time_grid(n: usize, t_max: f64) -> Vec<f64> {
    (0..n).map(|k| t_max * k as f64 / (n - 1) as f64).collect()
}

fn nearest_on_curve(u: f64, s: f64, curve: &[KineticState], inv_var_u: f64, inv_var_s: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in curve.iter().enumerate() {
        let d = (u - c.u).powi(2) * inv_var_u + (s - c.s).powi(2) * inv_var_s;
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Per-cell grid time minimizing `(u - u(t))^2 / sigma_u^2 + (s - s(t))^2 / sigma_s^2`.
///
/// The curve is the full switching model (induction and repression); ties go to
/// the smaller time.
pub fn assign_times_grid(u: &[f64], s: &[f64], params: &GeneKinetics, grid_size: usize, t_max: f64) -> Result<Vec<f64>> {
    if u.len() != s.len() {
        return Err(Error::Shape(format!("{} unspliced vs {} spliced values", u.len(), s.len())));
    }
    if grid_size < 100 {
        return Err(Error::Config(format!("grid needs at least 100 points, got {grid_size}")));
    }
    if !(t_max > 0.0) {
        return Err(Error::Config(format!("t_max must be > 0, got {t_max}")));
    }
    let grid = time_grid(grid_size, t_max);
    let curve = grid.iter().map(|&t| solve_phase(params, t)).collect::<Result<Vec<_>>>()?;
    let (wu, ws) = (1.0 / (params.sigma_u * params.sigma_u), 1.0 / (params.sigma_s * params.sigma_s));
    Ok(u.iter().zip(s).map(|(&ui, &si)| grid[nearest_on_curve(ui, si, &curve, wu, ws).0]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub grid_size: usize,
    pub t_max: f64,
    pub max_iter: usize,
    /// Stop when the relative MSE improvement of an iteration falls below this.
    pub tol: f64,
    /// Gradient steps per M-step.
    pub m_steps: usize,
    pub quantile: f64,
    /// EM iterations at each fixed switch time of the initial scan.
    pub probe_iters: usize,
    /// Cells (evenly strided) used by the initial scan.
    pub probe_cells: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { grid_size: DEFAULT_GRID, t_max: DEFAULT_T_MAX, max_iter: 100, tol: 1e-4, m_steps: 20, quantile: DEFAULT_QUANTILE, probe_iters: 10, probe_cells: 400 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneEmFit {
    pub params: GeneKinetics,
    /// Gene-specific time of every cell.
    pub times: Vec<f64>,
    pub mse: f64,
    /// MSE after each accepted iteration (entry 0 is after the initial E-step).
    pub mse_history: Vec<f64>,
    pub iterations: usize,
    pub estimable: bool,
    /// Set when the fit stopped on a non-finite value.
    pub diagnostic: Option<String>,
}

/// Free parameters of the per-gene model: `[ln alpha, ln beta, ln gamma, t_off]`.
type Theta = [f64; 4];

fn kinetics_of(theta: &Theta) -> GeneKinetics {
    GeneKinetics::new(theta[0].exp(), theta[1].exp(), theta[2].exp()).with_switch(0.0, theta[3])
}

/// Predicted state at `t` and its gradient in `theta`.
fn predict_with_grad(theta: &Theta, t: f64) -> (KineticState, [f64; 4], [f64; 4]) {
    let (a, b, g, t_off) = (theta[0].exp(), theta[1].exp(), theta[2].exp(), theta[3]);
    if t < t_off {
        let (x, j) = closed_form_with_jacobian(a, b, g, t, 0.0, 0.0);
        let du = [j.u.rate * a, j.u.beta * b, j.u.gamma * g, 0.0];
        let ds = [j.s.rate * a, j.s.beta * b, j.s.gamma * g, 0.0];
        (x, du, ds)
    } else {
        let (x1, j1) = closed_form_with_jacobian(a, b, g, t_off, 0.0, 0.0);
        let (x, j) = closed_form_with_jacobian(0.0, b, g, t - t_off, x1.u, x1.s);
        // through the switch state (u1, s1) and through tau = t - t_off
        let chain = |p: &crate::kinetics::Partials| {
            [
                (p.u0 * j1.u.rate + p.s0 * j1.s.rate) * a,
                (p.beta + p.u0 * j1.u.beta + p.s0 * j1.s.beta) * b,
                (p.gamma + p.u0 * j1.u.gamma + p.s0 * j1.s.gamma) * g,
                -p.tau + p.u0 * j1.u.tau + p.s0 * j1.s.tau,
            ]
        };
        (x, chain(&j.u), chain(&j.s))
    }
}

fn mse_of(theta: &Theta, u: &[f64], s: &[f64], times: &[f64]) -> f64 {
    let p = kinetics_of(theta);
    let mut sq = 0.0;
    for ((&ui, &si), &t) in u.iter().zip(s).zip(times) {
        let x = if t < p.t_off {
            closed_form(p.alpha, p.beta, p.gamma, t, 0.0, 0.0)
        } else {
            let x1 = closed_form(p.alpha, p.beta, p.gamma, p.t_off, 0.0, 0.0);
            closed_form(0.0, p.beta, p.gamma, t - p.t_off, x1.u, x1.s)
        };
        sq += (ui - x.u).powi(2) + (si - x.s).powi(2);
    }
    sq / (2 * u.len()) as f64
}

fn mse_grad(theta: &Theta, u: &[f64], s: &[f64], times: &[f64]) -> (f64, [f64; 4]) {
    let mut sq = 0.0;
    let mut grad = [0.0; 4];
    for ((&ui, &si), &t) in u.iter().zip(s).zip(times) {
        let (x, du, ds) = predict_with_grad(theta, t);
        let (ru, rs) = (x.u - ui, x.s - si);
        sq += ru * ru + rs * rs;
        for k in 0..4 {
            grad[k] += 2.0 * (ru * du[k] + rs * ds[k]);
        }
    }
    let n = (2 * u.len()) as f64;
    (sq / n, grad.map(|g| g / n))
}

fn e_step(theta: &Theta, u: &[f64], s: &[f64], config: &EmConfig) -> Result<Vec<f64>> {
    assign_times_grid(u, s, &kinetics_of(theta), config.grid_size, config.t_max)
}

/// Gradient descent with Armijo backtracking; `t_off` is kept inside `[0, t_max]`
/// or held where it is when `fixed_switch` is set.
/// Returns the final parameters and MSE, never worse than the start.
fn m_step(theta: Theta, u: &[f64], s: &[f64], times: &[f64], config: &EmConfig, fixed_switch: bool) -> (Theta, f64) {
    let mut theta = theta;
    let mut f = mse_of(&theta, u, s, times);
    let mut step = 1.0;
    for _ in 0..config.m_steps {
        let (_, mut g) = mse_grad(&theta, u, s, times);
        if fixed_switch {
            g[3] = 0.0;
        }
        let g2: f64 = g.iter().map(|v| v * v).sum();
        if !g2.is_finite() || g2 == 0.0 {
            break;
        }
        let mut accepted = false;
        step *= 2.0;
        for _ in 0..40 {
            let mut cand = theta;
            for k in 0..4 {
                cand[k] -= step * g[k];
            }
            cand[3] = cand[3].clamp(0.0, config.t_max);
            let fc = mse_of(&cand, u, s, times);
            if fc.is_finite() && fc <= f - 1e-4 * step * g2 {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (theta, f)
}

struct EmRun {
    theta: Theta,
    times: Vec<f64>,
    f: f64,
    history: Vec<f64>,
    iterations: usize,
    diagnostic: Option<String>,
}

fn run_em(theta: Theta, times: Vec<f64>, f: f64, u: &[f64], s: &[f64], config: &EmConfig, fixed_switch: bool) -> Result<EmRun> {
    let mut run = EmRun { theta, times, f, history: vec![f], iterations: 0, diagnostic: None };
    while run.iterations < config.max_iter {
        run.iterations += 1;
        let (theta_m, f_m) = m_step(run.theta, u, s, &run.times, config, fixed_switch);
        if !f_m.is_finite() || theta_m.iter().any(|v| !v.is_finite()) {
            run.diagnostic = Some(format!("M-step produced a non-finite value at iteration {}", run.iterations));
            break;
        }
        let times_e = e_step(&theta_m, u, s, config)?;
        let f_e = mse_of(&theta_m, u, s, &times_e);
        if !f_e.is_finite() {
            run.diagnostic = Some(format!("E-step produced a non-finite error at iteration {}", run.iterations));
            break;
        }
        let improvement = (run.f - f_e) / run.f.max(f64::MIN_POSITIVE);
        run.theta = theta_m;
        run.times = times_e;
        run.f = f_e;
        run.history.push(f_e);
        if improvement < config.tol {
            break;
        }
    }
    Ok(run)
}

/// Fit one gene by alternating grid time assignment and MSE minimization.
pub fn fit_gene_em(u: &[f64], s: &[f64], config: &EmConfig) -> Result<GeneEmFit> {
    if u.len() != s.len() {
        return Err(Error::Shape(format!("{} unspliced vs {} spliced values", u.len(), s.len())));
    }
    if u.len() < 50 {
        return Err(Error::Shape(format!("per-gene EM needs at least 50 cells, got {}", u.len())));
    }
    let ss = fit_steady_state(u, s, config.quantile)?;
    if !ss.estimable {
        return Ok(GeneEmFit {
            params: GeneKinetics::new(1.0, 1.0, 1.0),
            times: vec![0.0; u.len()],
            mse: f64::NAN,
            mse_history: Vec::new(),
            iterations: 0,
            estimable: false,
            diagnostic: Some("unestimable: spliced or unspliced upper quantile is zero".into()),
        });
    }
    // Rates start from the steady-state fit. The switch time has many poor local
    // optima under hard assignment, so a short EM with t_off held fixed profiles
    // a coarse scan of switch times on a subsample of cells, and only the best
    // start is run to convergence on every cell.
    let stride = u.len().div_ceil(config.probe_cells.max(1));
    let pu: Vec<f64> = u.iter().step_by(stride).copied().collect();
    let ps: Vec<f64> = s.iter().step_by(stride).copied().collect();
    let probe = EmConfig { max_iter: config.probe_iters, tol: 0.0, ..*config };
    let base = [ss.alpha.ln(), ss.beta.ln(), ss.gamma.ln(), 0.0];
    let mut best: Option<EmRun> = None;
    for k in 1..20 {
        let mut theta = base;
        theta[3] = config.t_max * k as f64 / 20.0;
        let times = e_step(&theta, &pu, &ps, config)?;
        let f = mse_of(&theta, &pu, &ps, &times);
        if !f.is_finite() {
            continue;
        }
        let run = run_em(theta, times, f, &pu, &ps, &probe, true)?;
        if run.f.is_finite() && best.as_ref().map_or(true, |b| run.f < b.f) {
            best = Some(run);
        }
    }
    let start = best.ok_or_else(|| Error::NonFinite { term: "initial EM error".into() })?.theta;
    let times = e_step(&start, u, s, config)?;
    let f = mse_of(&start, u, s, &times);
    let best = run_em(start, times, f, u, s, config, false)?;
    let EmRun { theta, times, f, history, iterations, diagnostic } = best;
    let params = kinetics_of(&theta);
    let sigma = f.sqrt().max(1e-12);
    Ok(GeneEmFit {
        params: params.with_noise(sigma, sigma),
        times,
        mse: f,
        mse_history: history,
        iterations,
        estimable: true,
        diagnostic,
    })
}

/// Fit every column of a cells x genes pair.
pub fn fit_genes_em(u: ArrayView2<f64>, s: ArrayView2<f64>, config: &EmConfig) -> Result<Vec<GeneEmFit>> {
    if u.dim() != s.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", u.dim(), s.dim())));
    }
    (0..u.ncols())
        .map(|j| fit_gene_em(&u.column(j).to_vec(), &s.column(j).to_vec(), config))
        .collect()
}

/// Median over estimable genes of each gene's times rescaled to `[0, 1]`.
///
/// This is a simple stand-in for a global time; genes whose times are constant
/// contribute 0.
pub fn global_time(gene_times: ArrayView2<f64>, estimable: &[bool]) -> Result<Vec<f64>> {
    let (n, g) = gene_times.dim();
    if estimable.len() != g {
        return Err(Error::Shape(format!("{g} genes but {} estimability flags", estimable.len())));
    }
    let genes: Vec<usize> = (0..g).filter(|&j| estimable[j]).collect();
    if genes.is_empty() {
        return Err(Error::NoEstimableGenes);
    }
    let mut scaled = Array2::zeros((n, genes.len()));
    for (k, &j) in genes.iter().enumerate() {
        let col = gene_times.column(j);
        let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        for i in 0..n {
            scaled[[i, k]] = if hi > lo { (col[i] - lo) / (hi - lo) } else { 0.0 };
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row = scaled.row(i).to_vec();
            row.sort_by(f64::total_cmp);
            let m = row.len();
            if m % 2 == 1 {
                row[m / 2]
            } else {
                0.5 * (row[m / 2 - 1] + row[m / 2])
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::spearman;
    use crate::kinetics::solve_phase;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn quantile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.95), 4.8);
        assert_eq!(quantile(&v, 1.0), 5.0);
    }

    #[test]
    fn steady_state_on_constant_data() {
        let fit = fit_steady_state(&[2.0; 20], &[4.0; 20], 0.95).unwrap();
        assert_eq!((fit.alpha, fit.beta, fit.gamma), (2.0, 1.0, 0.5));
        assert!(fit.estimable);
        assert!(!fit_steady_state(&[1.0; 20], &[0.0; 20], 0.95).unwrap().estimable);
        assert!(!fit_steady_state(&[0.0; 20], &[0.0; 20], 0.95).unwrap().estimable);
        assert!(fit_steady_state(&[1.0; 5], &[1.0; 5], 0.95).is_err());
        assert!(fit_steady_state(&[1.0; 20], &[1.0; 20], 0.4).is_err());
    }

    #[test]
    fn steady_state_recovers_gamma_from_noisy_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let u: Vec<f64> = (0..500).map(|_| 2.0 + noise.sample(&mut rng)).collect();
        let s: Vec<f64> = (0..500).map(|_| 4.0 + noise.sample(&mut rng)).collect();
        let fit = fit_steady_state(&u, &s, 0.95).unwrap();
        assert!((fit.gamma - 0.5).abs() < 0.025, "{}", fit.gamma);
    }

    #[test]
    fn grid_assignment_exact_and_ties() {
        let p = GeneKinetics::new(2.0, 1.0, 0.5).with_switch(0.0, 5.0);
        // grid of 201 points over [0, 20] contains 0.7? step 0.1 -> yes
        let x = solve_phase(&p, 0.7).unwrap();
        let t = assign_times_grid(&[x.u], &[x.s], &p, 201, 20.0).unwrap();
        assert!((t[0] - 0.7).abs() < 1e-12);
        // zero-rate gene: every grid time is equally good, the smallest wins
        let flat = GeneKinetics::new(0.0, 1.0, 0.5);
        assert_eq!(assign_times_grid(&[0.0], &[0.0], &flat, 100, 20.0).unwrap(), vec![0.0]);
        assert!(assign_times_grid(&[0.0], &[0.0], &p, 99, 20.0).is_err());
    }

    #[test]
    fn grid_assignment_is_the_exhaustive_minimum() {
        let p = GeneKinetics::new(2.0, 1.0, 0.5).with_switch(0.0, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..2.5)).collect();
        let s: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..4.5)).collect();
        let t = assign_times_grid(&u, &s, &p, 150, 20.0).unwrap();
        let grid = time_grid(150, 20.0);
        for i in 0..50 {
            let d = |t: f64| {
                let x = solve_phase(&p, t).unwrap();
                (u[i] - x.u).powi(2) + (s[i] - x.s).powi(2)
            };
            let best = grid.iter().map(|&g| d(g)).fold(f64::INFINITY, f64::min);
            assert_eq!(d(t[i]), best);
        }
    }

    #[test]
    fn grid_assignment_orders_noiseless_samples() {
        let p = GeneKinetics::new(2.0, 1.0, 0.5).with_switch(0.0, 8.0);
        let truth: Vec<f64> = (0..50).map(|k| 0.2 + k as f64 * 0.3).collect();
        let pts: Vec<KineticState> = truth.iter().map(|&t| solve_phase(&p, t).unwrap()).collect();
        let u: Vec<f64> = pts.iter().map(|x| x.u).collect();
        let s: Vec<f64> = pts.iter().map(|x| x.s).collect();
        let t = assign_times_grid(&u, &s, &p, 500, 20.0).unwrap();
        assert!(spearman(&t, &truth).unwrap().unwrap() >= 0.99);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let theta = [0.7f64.ln(), 0.9f64.ln(), 0.4f64.ln(), 6.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let times: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..15.0)).collect();
        let u: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..2.0)).collect();
        let (_, g) = mse_grad(&theta, &u, &s, &times);
        let fd = crate::nn::central_difference(|x| mse_of(&[x[0], x[1], x[2], x[3]], &u, &s, &times), &theta, 1e-6);
        assert!(crate::nn::max_relative_error(&g, &fd) < 1e-5, "{g:?} vs {fd:?}");
    }

    fn switching_data(n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let p = GeneKinetics::new(2.0, 1.0, 0.5).with_switch(0.0, 5.0);
        let truth: Vec<f64> = (0..n).map(|k| 12.0 * (k as f64 + 0.5) / n as f64).collect();
        let pts: Vec<KineticState> = truth.iter().map(|&t| solve_phase(&p, t).unwrap()).collect();
        (pts.iter().map(|x| x.u).collect(), pts.iter().map(|x| x.s).collect(), truth)
    }

    #[test]
    fn em_recovers_noiseless_switching_gene() {
        let (u, s, truth) = switching_data(200);
        let fit = fit_gene_em(&u, &s, &EmConfig::default()).unwrap();
        assert!(fit.mse < 1e-4, "mse {} {:?} {:?}", fit.mse, fit.params, fit.mse_history);
        let ratio = fit.params.gamma / fit.params.beta;
        assert!((ratio - 0.5).abs() < 0.025, "gamma/beta {ratio}");
        for w in fit.mse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!(spearman(&fit.times, &truth).unwrap().unwrap() > 0.99);
    }

    #[test]
    fn em_flags_zero_gene() {
        let fit = fit_gene_em(&[0.0; 60], &[0.0; 60], &EmConfig::default()).unwrap();
        assert!(!fit.estimable);
        assert!(fit_gene_em(&[0.0; 10], &[0.0; 10], &EmConfig::default()).is_err());
    }

    #[test]
    fn global_time_cases() {
        let one = Array2::from_shape_vec((4, 1), vec![2.0, 4.0, 6.0, 10.0]).unwrap();
        assert_eq!(global_time(one.view(), &[true]).unwrap(), vec![0.0, 0.25, 0.5, 1.0]);
        assert!(matches!(global_time(one.view(), &[false]), Err(Error::NoEstimableGenes)));
        let truth: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let three = Array2::from_shape_fn((30, 3), |(i, j)| match j {
            0 => i as f64,
            1 => (i as f64).sqrt(),
            _ => 30.0 - i as f64,
        });
        let g = global_time(three.view(), &[true; 3]).unwrap();
        assert!(spearman(&g, &truth).unwrap().unwrap() >= 0.95);
        let two = Array2::from_shape_fn((30, 2), |(i, _)| i as f64 * 0.5);
        let g2 = global_time(two.view(), &[true; 2]).unwrap();
        assert_eq!(spearman(&g2, &truth).unwrap(), Some(1.0));
    }
}
