//! Closed-form kinetics of the transcription / splicing / degradation system
//!
//! ```text
//! du/dt = a(t) - beta * u
//! ds/dt = beta * u - gamma * s
//! ```
//!
//! where `a(t)` is the effective transcription rate: `alpha` during induction and
//! `0` during repression for the switching model, or `rho * alpha` for the
//! mixture model. With `a` constant on an interval the system has the solution
//!
//! ```text
//! u(tau) = u0 e^{-beta tau} + a/beta (1 - e^{-beta tau})
//! s(tau) = s0 e^{-gamma tau} + a/gamma (1 - e^{-gamma tau})
//!          + (a - beta u0) / (gamma - beta) (e^{-gamma tau} - e^{-beta tau})
//! ```
//!
//! The last term is evaluated as `(a - beta u0) e^{-beta tau} expm1(-(gamma - beta) tau) / (gamma - beta)`,
//! which switches to its series expansion (whose leading term is the exact
//! `beta == gamma` limit) when the rates are numerically degenerate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative gap `|gamma - beta| / max(beta, gamma)` under which the degenerate branch is used.
pub const DEGENERACY_TOL: f64 = 1e-6;

/// Per-gene parameters of the switching ODE model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneKinetics {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub t_on: f64,
    pub t_off: f64,
    pub u0: f64,
    pub s0: f64,
    pub sigma_u: f64,
    pub sigma_s: f64,
}

impl GeneKinetics {
    /// Induction starting at `t = 0` from the zero state, never switched off, unit noise.
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            t_on: 0.0,
            t_off: f64::INFINITY,
            u0: 0.0,
            s0: 0.0,
            sigma_u: 1.0,
            sigma_s: 1.0,
        }
    }

    pub fn with_switch(mut self, t_on: f64, t_off: f64) -> Self {
        self.t_on = t_on;
        self.t_off = t_off;
        self
    }

    pub fn with_initial(mut self, u0: f64, s0: f64) -> Self {
        self.u0 = u0;
        self.s0 = s0;
        self
    }

    pub fn with_noise(mut self, sigma_u: f64, sigma_s: f64) -> Self {
        self.sigma_u = sigma_u;
        self.sigma_s = sigma_s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_rates(self.alpha, self.beta, self.gamma)?;
        if self.t_on.is_nan() || self.t_off.is_nan() || self.t_on > self.t_off {
            return Err(Error::Domain(format!(
                "switch times must satisfy t_on <= t_off, got t_on={} t_off={}",
                self.t_on, self.t_off
            )));
        }
        if !(self.sigma_u > 0.0 && self.sigma_s > 0.0) {
            return Err(Error::Domain(format!(
                "noise scales must be positive, got sigma_u={} sigma_s={}",
                self.sigma_u, self.sigma_s
            )));
        }
        if !(self.u0 >= 0.0 && self.s0 >= 0.0) {
            return Err(Error::Domain(format!(
                "initial condition must be non-negative, got ({}, {})",
                self.u0, self.s0
            )));
        }
        Ok(())
    }
}

/// Unspliced / spliced abundance of one gene.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KineticState {
    pub u: f64,
    pub s: f64,
}

impl KineticState {
    pub fn new(u: f64, s: f64) -> Self {
        Self { u, s }
    }

    pub fn max_abs_diff(&self, other: &KineticState) -> f64 {
        (self.u - other.u).abs().max((self.s - other.s).abs())
    }
}

fn check_rates(alpha: f64, beta: f64, gamma: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("beta must be finite and > 0, got {beta}")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!("gamma must be finite and > 0, got {gamma}")));
    }
    Ok(())
}

/// `exp(-beta tau) * expm1(-delta tau) / delta` with `delta = gamma - beta`, and
/// its derivative in `delta` at fixed `beta`.
///
/// `scale` is `max(beta, gamma)`; the degenerate threshold is relative to it.
/// For `|delta tau| >= 1` the product is formed as `(eg - eb) / delta` so that a
/// large positive exponent never meets an underflowed `eb`.
fn exp_divided_difference(delta: f64, tau: f64, scale: f64, eb: f64, eg: f64) -> (f64, f64) {
    let x = -delta * tau;
    if x.abs() >= 1.0 && delta.abs() > DEGENERACY_TOL * scale {
        let value = (eg - eb) / delta;
        return (value, (-tau * eg - value) / delta);
    }
    let value = if delta.abs() <= DEGENERACY_TOL * scale {
        -tau * (1.0 + x / 2.0 + x * x / 6.0 + x * x * x / 24.0)
    } else {
        x.exp_m1() / delta
    };
    let d_delta = if x.abs() < 1e-3 {
        tau * tau * (0.5 + x / 3.0 + x * x / 8.0)
    } else {
        (-tau * x.exp() * delta - x.exp_m1()) / (delta * delta)
    };
    (eb * value, eb * d_delta)
}

/// Partial derivatives of one output of [`closed_form`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Partials {
    pub rate: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub u0: f64,
    pub s0: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolutionJacobian {
    pub u: Partials,
    pub s: Partials,
}

/// Solution after elapsed time `tau >= 0` with constant effective rate `rate`.
pub fn closed_form(rate: f64, beta: f64, gamma: f64, tau: f64, u0: f64, s0: f64) -> KineticState {
    let emb = (-beta * tau).exp_m1();
    let emg = (-gamma * tau).exp_m1();
    let eb = (-beta * tau).exp();
    let eg = (-gamma * tau).exp();
    let (div, _) = exp_divided_difference(gamma - beta, tau, beta.max(gamma), eb, eg);
    let u = u0 * eb - rate / beta * emb;
    let s = s0 * eg - rate / gamma * emg + (rate - beta * u0) * div;
    KineticState { u, s }
}

/// [`closed_form`] together with its derivatives in every argument.
pub fn closed_form_with_jacobian(
    rate: f64,
    beta: f64,
    gamma: f64,
    tau: f64,
    u0: f64,
    s0: f64,
) -> (KineticState, SolutionJacobian) {
    let emb = (-beta * tau).exp_m1();
    let emg = (-gamma * tau).exp_m1();
    let eb = (-beta * tau).exp();
    let eg = (-gamma * tau).exp();
    // both already carry the factor exp(-beta tau)
    let (div, div_delta) = exp_divided_difference(gamma - beta, tau, beta.max(gamma), eb, eg);
    let k = rate - beta * u0;

    let u = u0 * eb - rate / beta * emb;
    let s = s0 * eg - rate / gamma * emg + k * div;

    let du = Partials {
        rate: -emb / beta,
        beta: -tau * u0 * eb + rate * (emb / (beta * beta) + tau * eb / beta),
        gamma: 0.0,
        tau: k * eb,
        u0: eb,
        s0: 0.0,
    };
    let ds = Partials {
        rate: -emg / gamma + div,
        beta: -u0 * div - k * tau * div - k * div_delta,
        gamma: -tau * s0 * eg + rate * (emg / (gamma * gamma) + tau * eg / gamma) + k * div_delta,
        tau: beta * u - gamma * s,
        u0: -beta * div,
        s0: eg,
    };
    (KineticState { u, s }, SolutionJacobian { u: du, s: ds })
}

/// Kinetic function of the switching model at time `t`.
///
/// Before `t_on` the state is held at `(u0, s0)`. Induction runs on
/// `[t_on, t_off)`; from `t_off` onward transcription stops and the system
/// relaxes from the state reached at `t_off`.
pub fn solve_phase(params: &GeneKinetics, t: f64) -> Result<KineticState> {
    params.validate()?;
    if t.is_nan() {
        return Err(Error::Domain("time is NaN".into()));
    }
    let p = params;
    if t < p.t_on {
        return Ok(KineticState::new(p.u0, p.s0));
    }
    if t < p.t_off {
        return Ok(closed_form(p.alpha, p.beta, p.gamma, t - p.t_on, p.u0, p.s0));
    }
    let at_off = closed_form(p.alpha, p.beta, p.gamma, p.t_off - p.t_on, p.u0, p.s0);
    Ok(closed_form(0.0, p.beta, p.gamma, t - p.t_off, at_off.u, at_off.s))
}

/// Kinetic function of the mixture model: effective rate `rho * alpha` from `(u0, s0)` at `t0`.
#[allow(clippy::too_many_arguments)]
pub fn solve_mixture(
    alpha: f64,
    beta: f64,
    gamma: f64,
    rho: f64,
    t0: f64,
    u0: f64,
    s0: f64,
    t: f64,
) -> Result<KineticState> {
    check_rates(alpha, beta, gamma)?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("rho must lie in [0, 1], got {rho}")));
    }
    if !(t >= t0) {
        return Err(Error::Domain(format!("evaluation time {t} precedes initial time {t0}")));
    }
    Ok(closed_form(rho * alpha, beta, gamma, t - t0, u0, s0))
}

/// Fixed point `(alpha / beta, alpha / gamma)` under sustained transcription.
pub fn steady_state(alpha: f64, beta: f64, gamma: f64) -> Result<KineticState> {
    check_rates(alpha, beta, gamma)?;
    Ok(KineticState::new(alpha / beta, alpha / gamma))
}

/// Time derivatives of a state. `du_dt` is only defined when the effective rate is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Velocity {
    pub du_dt: Option<f64>,
    pub ds_dt: f64,
}

pub fn velocity(u: f64, s: f64, beta: f64, gamma: f64, alpha_tilde: Option<f64>) -> Velocity {
    Velocity {
        du_dt: alpha_tilde.map(|a| a - beta * u),
        ds_dt: beta * u - gamma * s,
    }
}

/// Right-hand side of the switching model, for use with [`rk4_reference`].
///
/// The state is frozen before `t_on`, matching [`solve_phase`].
pub fn phase_rates(params: GeneKinetics) -> impl Fn(f64, KineticState) -> (f64, f64) {
    move |t, x| {
        if t < params.t_on {
            return (0.0, 0.0);
        }
        let a = if t < params.t_off { params.alpha } else { 0.0 };
        (a - params.beta * x.u, params.beta * x.u - params.gamma * x.s)
    }
}

/// Classic fixed-step fourth-order Runge-Kutta integration of a two-species system.
///
/// Returns the state at every point of `t_grid` (the first entry is `initial`).
/// Each grid interval is subdivided into equal steps no longer than `max_step`,
/// and additionally split at every `breakpoints` entry so that discontinuities
/// in the rates fall on step boundaries. A stage evaluated at the end of a
/// sub-interval sees the left limit of the rates.
pub fn rk4_reference<F>(
    rates: F,
    initial: KineticState,
    t_grid: &[f64],
    max_step: f64,
    breakpoints: &[f64],
) -> Result<Vec<KineticState>>
where
    F: Fn(f64, KineticState) -> (f64, f64),
{
    if t_grid.is_empty() {
        return Err(Error::Domain("empty time grid".into()));
    }
    if t_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::Domain("time grid must be finite".into()));
    }
    if let Some(w) = t_grid.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::Domain(format!(
            "time grid must be strictly increasing, found {} then {}",
            w[0], w[1]
        )));
    }
    if !(max_step > 0.0) {
        return Err(Error::Domain(format!("max_step must be > 0, got {max_step}")));
    }

    let mut out = Vec::with_capacity(t_grid.len());
    let mut x = initial;
    out.push(x);
    for w in t_grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut cuts: Vec<f64> = breakpoints.iter().copied().filter(|&p| p > a && p < b).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut lo = a;
        for hi in cuts.into_iter().chain(std::iter::once(b)) {
            x = rk4_interval(&rates, x, lo, hi, max_step);
            lo = hi;
        }
        out.push(x);
    }
    Ok(out)
}

fn rk4_interval<F>(rates: &F, mut x: KineticState, a: f64, b: f64, max_step: f64) -> KineticState
where
    F: Fn(f64, KineticState) -> (f64, f64),
{
    let n = ((b - a) / max_step).ceil().max(1.0) as usize;
    let h = (b - a) / n as f64;
    let axpy = |x: KineticState, k: (f64, f64), c: f64| KineticState::new(x.u + c * k.0, x.s + c * k.1);
    for i in 0..n {
        let t = a + i as f64 * h;
        let t_end = if i + 1 == n { b.next_down() } else { a + (i + 1) as f64 * h };
        let k1 = rates(t, x);
        let k2 = rates(t + 0.5 * h, axpy(x, k1, 0.5 * h));
        let k3 = rates(t + 0.5 * h, axpy(x, k2, 0.5 * h));
        let k4 = rates(t_end, axpy(x, k3, h));
        x = KineticState::new(
            x.u + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
            x.s + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        );
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rk4_endpoint(params: GeneKinetics, t: f64, step: f64) -> KineticState {
        let start = params.t_on.min(0.0);
        let traj = rk4_reference(
            phase_rates(params),
            KineticState::new(params.u0, params.s0),
            &[start, t],
            step,
            &[params.t_on, params.t_off],
        )
        .unwrap();
        traj[1]
    }

    #[test]
    fn initial_condition_at_switch_on() {
        let p = GeneKinetics::new(2.0, 1.0, 0.5);
        assert_eq!(solve_phase(&p, 0.0).unwrap(), KineticState::new(0.0, 0.0));
    }

    #[test]
    fn induction_matches_rk4_oracle() {
        let p = GeneKinetics::new(2.0, 1.0, 0.5);
        let x = solve_phase(&p, 1.0).unwrap();
        let oracle = rk4_endpoint(p, 1.0, 1e-4);
        assert_abs_diff_eq!(x.u, oracle.u, epsilon = 1e-6);
        assert_abs_diff_eq!(x.s, oracle.s, epsilon = 1e-6);
        assert_abs_diff_eq!(x.u, 1.264241, epsilon = 1e-6);
        assert_abs_diff_eq!(x.s, 0.619272, epsilon = 1e-6);
    }

    #[test]
    fn fast_splicing_over_long_times_stays_finite() {
        // beta * tau far beyond the exponent range of f64
        let (rate, beta, gamma, tau) = (1.5e-4, 15.8, 0.0104, 52.0);
        let (x, jac) = closed_form_with_jacobian(rate, beta, gamma, tau, 0.2, 0.1);
        let p = GeneKinetics::new(rate, beta, gamma).with_initial(0.2, 0.1);
        let oracle = rk4_endpoint(p, tau, 1e-3);
        assert_abs_diff_eq!(x.u, oracle.u, epsilon = 1e-9);
        assert_abs_diff_eq!(x.s, oracle.s, epsilon = 1e-9);
        let all = [jac.u.rate, jac.u.beta, jac.u.tau, jac.s.rate, jac.s.beta, jac.s.gamma, jac.s.tau, jac.s.u0, jac.s.s0];
        assert!(all.iter().all(|v| v.is_finite()), "{jac:?}");
    }

    #[test]
    fn long_induction_reaches_steady_state() {
        let p = GeneKinetics::new(2.0, 1.0, 0.5);
        let x = solve_phase(&p, 80.0).unwrap();
        assert_abs_diff_eq!(x.u, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x.s, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_rates_use_limit_and_match_rk4() {
        let p = GeneKinetics::new(1.0, 1.0, 1.0);
        let x = solve_phase(&p, 1.0).unwrap();
        let oracle = rk4_endpoint(p, 1.0, 1e-4);
        assert_abs_diff_eq!(x.u, 1.0 - (-1.0f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(x.s, oracle.s, epsilon = 1e-6);
        // s(t) = 1 - e^{-t} - t e^{-t} for beta = gamma = 1
        assert_abs_diff_eq!(x.s, 1.0 - 2.0 * (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_branch_is_continuous_with_regular_branch() {
        let tau = 3.0;
        let exact = closed_form(2.0, 1.0, 1.0, tau, 0.3, 0.1);
        for gap in [1e-9, 1e-7, 2e-6, 1e-5, 1e-4] {
            let near = closed_form(2.0, 1.0, 1.0 + gap, tau, 0.3, 0.1);
            assert!(near.max_abs_diff(&exact) < 10.0 * gap, "gap {gap}");
        }
    }

    #[test]
    fn repression_after_switch_off() {
        let p = GeneKinetics::new(2.0, 1.0, 0.5).with_switch(0.0, 2.0);
        for t in [2.0, 3.5, 7.0] {
            let x = solve_phase(&p, t).unwrap();
            let oracle = rk4_endpoint(p, t, 1e-4);
            assert!(x.max_abs_diff(&oracle) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn continuity_across_switch_off() {
        let p = GeneKinetics::new(3.0, 0.7, 1.3).with_switch(1.0, 4.0);
        for h in [1e-3, 1e-6] {
            let before = solve_phase(&p, 4.0 - h).unwrap();
            let after = solve_phase(&p, 4.0 + h).unwrap();
            assert!(before.max_abs_diff(&after) < 10.0 * h);
        }
    }

    #[test]
    fn pre_induction_state_is_initial_condition() {
        let p = GeneKinetics::new(3.0, 0.7, 1.3).with_switch(2.0, 4.0).with_initial(0.4, 0.2);
        assert_eq!(solve_phase(&p, -5.0).unwrap(), KineticState::new(0.4, 0.2));
        assert_eq!(solve_phase(&p, 1.999).unwrap(), KineticState::new(0.4, 0.2));
    }

    #[test]
    fn invalid_rates_are_rejected() {
        assert!(matches!(solve_phase(&GeneKinetics::new(1.0, 0.0, 1.0), 1.0), Err(Error::Domain(_))));
        assert!(matches!(solve_phase(&GeneKinetics::new(1.0, 1.0, -1.0), 1.0), Err(Error::Domain(_))));
        assert!(steady_state(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn mixture_zero_rho_from_empty_state_stays_empty() {
        for t in [0.0, 0.5, 10.0] {
            let x = solve_mixture(2.0, 1.0, 0.5, 0.0, 0.0, 0.0, 0.0, t).unwrap();
            assert_eq!(x, KineticState::new(0.0, 0.0));
        }
    }

    #[test]
    fn mixture_with_full_rho_is_induction() {
        let p = GeneKinetics::new(2.0, 1.0, 0.5);
        for t in [0.3, 1.0, 6.0] {
            let m = solve_mixture(2.0, 1.0, 0.5, 1.0, 0.0, 0.0, 0.0, t).unwrap();
            assert_eq!(m, solve_phase(&p, t).unwrap());
        }
    }

    #[test]
    fn mixture_half_rate_matches_rk4() {
        let m = solve_mixture(2.0, 1.0, 0.5, 0.5, 0.0, 0.0, 0.0, 2.0).unwrap();
        let oracle = rk4_reference(
            |_, x: KineticState| (1.0 - x.u, x.u - 0.5 * x.s),
            KineticState::default(),
            &[0.0, 2.0],
            1e-4,
            &[],
        )
        .unwrap()[1];
        assert!(m.max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn mixture_domain_errors() {
        assert!(solve_mixture(2.0, 1.0, 0.5, 1.5, 0.0, 0.0, 0.0, 1.0).is_err());
        assert!(solve_mixture(2.0, 1.0, 0.5, -0.1, 0.0, 0.0, 0.0, 1.0).is_err());
        assert!(solve_mixture(2.0, 1.0, 0.5, 0.5, 2.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn steady_state_values() {
        assert_eq!(steady_state(2.0, 1.0, 0.5).unwrap(), KineticState::new(2.0, 4.0));
        assert_eq!(steady_state(0.0, 1.0, 1.0).unwrap(), KineticState::new(0.0, 0.0));
        assert_eq!(steady_state(1.0, 2.0, 4.0).unwrap(), KineticState::new(0.5, 0.25));
    }

    #[test]
    fn velocity_values() {
        assert_eq!(velocity(2.0, 4.0, 1.0, 0.5, None).ds_dt, 0.0);
        assert_eq!(velocity(1.0, 0.0, 1.0, 0.5, None).ds_dt, 1.0);
        assert_eq!(velocity(0.0, 1.0, 1.0, 1.0, None).ds_dt, -1.0);
        assert_eq!(velocity(1.0, 0.0, 1.0, 0.5, Some(3.0)).du_dt, Some(2.0));
    }

    #[test]
    fn steady_state_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (a, b, g) = (rng.gen_range(0.0..10.0), rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0));
            let ss = steady_state(a, b, g).unwrap();
            let v = velocity(ss.u, ss.s, b, g, Some(a));
            assert!(v.du_dt.unwrap().abs() <= 4.0 * f64::EPSILON * a);
            assert!(v.ds_dt.abs() <= 4.0 * f64::EPSILON * a);
        }
        let ss = steady_state(2.0, 1.0, 0.5).unwrap();
        let v = velocity(ss.u, ss.s, 1.0, 0.5, Some(2.0));
        assert_eq!(v.du_dt, Some(0.0));
        assert_eq!(v.ds_dt, 0.0);
    }

    #[test]
    fn rk4_zero_rates_stay_zero() {
        let traj =
            rk4_reference(|_, _| (0.0, 0.0), KineticState::default(), &[0.0, 0.5, 1.0], 1e-3, &[]).unwrap();
        assert!(traj.iter().all(|x| *x == KineticState::default()));
    }

    #[test]
    fn rk4_self_convergence() {
        let p = GeneKinetics::new(2.0, 1.0, 0.5);
        let coarse = rk4_endpoint(p, 1.0, 1e-4);
        let fine = rk4_endpoint(p, 1.0, 5e-5);
        assert!(coarse.max_abs_diff(&fine) < 1e-9);
        assert_abs_diff_eq!(coarse.u, 1.264241, epsilon = 1e-6);
        assert_abs_diff_eq!(coarse.s, 0.619272, epsilon = 1e-6);
    }

    #[test]
    fn rk4_rejects_non_monotone_grid() {
        let r = rk4_reference(|_, _| (0.0, 0.0), KineticState::default(), &[0.0, 1.0, 1.0], 1e-3, &[]);
        assert!(matches!(r, Err(Error::Domain(_))));
        let r = rk4_reference(|_, _| (0.0, 0.0), KineticState::default(), &[1.0, 0.0], 1e-3, &[]);
        assert!(r.is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..200 {
            let beta = rng.gen_range(0.2..3.0);
            let gamma = if case % 5 == 0 { beta * (1.0 + rng.gen_range(-1e-7..1e-7)) } else { rng.gen_range(0.2..3.0) };
            let args = [
                rng.gen_range(0.0..5.0),
                beta,
                gamma,
                rng.gen_range(0.0..6.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
            ];
            let f = |a: &[f64; 6]| closed_form(a[0], a[1], a[2], a[3], a[4], a[5]);
            let (_, jac) = closed_form_with_jacobian(args[0], args[1], args[2], args[3], args[4], args[5]);
            let analytic_u = [jac.u.rate, jac.u.beta, jac.u.gamma, jac.u.tau, jac.u.u0, jac.u.s0];
            let analytic_s = [jac.s.rate, jac.s.beta, jac.s.gamma, jac.s.tau, jac.s.u0, jac.s.s0];
            for k in 0..6 {
                let h = 1e-6;
                let mut plus = args;
                let mut minus = args;
                plus[k] += h;
                minus[k] -= h;
                let (p, m) = (f(&plus), f(&minus));
                let fd_u = (p.u - m.u) / (2.0 * h);
                let fd_s = (p.s - m.s) / (2.0 * h);
                assert!((fd_u - analytic_u[k]).abs() < 1e-6 * (1.0 + fd_u.abs()), "case {case} arg {k}: u {fd_u} vs {}", analytic_u[k]);
                assert!((fd_s - analytic_s[k]).abs() < 1e-6 * (1.0 + fd_s.abs()), "case {case} arg {k}: s {fd_s} vs {} args {args:?}", analytic_s[k]);
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn forward_solution_stays_non_negative(
                alpha in 0.0..10.0f64,
                beta in 0.05..5.0f64,
                gamma in 0.05..5.0f64,
                t_off in 0.0..10.0f64,
                u0 in 0.0..5.0f64,
                s0 in 0.0..5.0f64,
                t in 0.0..30.0f64,
            ) {
                let p = GeneKinetics::new(alpha, beta, gamma).with_switch(0.0, t_off).with_initial(u0, s0);
                let x = solve_phase(&p, t).unwrap();
                prop_assert!(x.u >= -1e-12 && x.s >= -1e-12);
            }

            #[test]
            fn repression_is_monotone_in_u(
                beta in 0.05..5.0f64,
                gamma in 0.05..5.0f64,
                u0 in 0.0..5.0f64,
                s0 in 0.0..5.0f64,
                t in 0.0..20.0f64,
                dt in 0.0..1.0f64,
            ) {
                let a = solve_mixture(1.0, beta, gamma, 0.0, 0.0, u0, s0, t).unwrap();
                let b = solve_mixture(1.0, beta, gamma, 0.0, 0.0, u0, s0, t + dt).unwrap();
                prop_assert!(b.u <= a.u + 1e-15);
            }
        }
    }
}
