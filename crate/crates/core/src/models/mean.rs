//! Kinetic mean of one cell and one gene, with its gradient.

use crate::kinetics::{closed_form, closed_form_with_jacobian, KineticState, Partials};

// Gradient slots.
pub(crate) const LOG_ALPHA: usize = 0;
pub(crate) const LOG_BETA: usize = 1;
pub(crate) const LOG_GAMMA: usize = 2;
pub(crate) const T_ON: usize = 3;
pub(crate) const LOG_DT: usize = 4;
pub(crate) const RHO: usize = 5;
pub(crate) const TIME: usize = 6;
pub(crate) const SLOTS: usize = 7;

pub(crate) type Grad = [f64; SLOTS];

/// Rates of one gene in natural units.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Rates {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub t_on: f64,
    /// Induction length of the switching model; unused by the mixture model.
    pub dt: f64,
}

/// How a cell's mean is formed.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Source {
    /// Zero start at `t_on`, induction for `dt`, then repression.
    Switch,
    /// Zero start at `t_on` with effective rate `rho * alpha`.
    Mixture { rho: f64 },
    /// Start from `(u0, s0)` at `t0` with effective rate `rho * alpha`.
    Anchored { rho: f64, u0: f64, s0: f64, t0: f64 },
}

pub(crate) fn mean(r: &Rates, src: Source, t: f64) -> KineticState {
    match src {
        Source::Switch => {
            let tau = t - r.t_on;
            if tau <= 0.0 {
                KineticState::default()
            } else if tau < r.dt {
                closed_form(r.alpha, r.beta, r.gamma, tau, 0.0, 0.0)
            } else {
                let x1 = closed_form(r.alpha, r.beta, r.gamma, r.dt, 0.0, 0.0);
                closed_form(0.0, r.beta, r.gamma, tau - r.dt, x1.u, x1.s)
            }
        }
        Source::Mixture { rho } => closed_form(rho * r.alpha, r.beta, r.gamma, (t - r.t_on).max(0.0), 0.0, 0.0),
        Source::Anchored { rho, u0, s0, t0 } => closed_form(rho * r.alpha, r.beta, r.gamma, (t - t0).max(0.0), u0, s0),
    }
}

fn slots(p: &Partials, r: &Rates, rho: f64) -> Grad {
    let mut g = [0.0; SLOTS];
    g[LOG_ALPHA] = p.rate * rho * r.alpha;
    g[LOG_BETA] = p.beta * r.beta;
    g[LOG_GAMMA] = p.gamma * r.gamma;
    g[RHO] = p.rate * r.alpha;
    g
}

/// The mean together with its gradient in every slot, for `u` and `s`.
pub(crate) fn mean_with_grad(r: &Rates, src: Source, t: f64) -> (KineticState, Grad, Grad) {
    match src {
        Source::Switch => {
            let tau = t - r.t_on;
            if tau <= 0.0 {
                return (KineticState::default(), [0.0; SLOTS], [0.0; SLOTS]);
            }
            if tau < r.dt {
                let (x, j) = closed_form_with_jacobian(r.alpha, r.beta, r.gamma, tau, 0.0, 0.0);
                let mut gu = slots(&j.u, r, 1.0);
                let mut gs = slots(&j.s, r, 1.0);
                for (g, p) in [(&mut gu, &j.u), (&mut gs, &j.s)] {
                    g[RHO] = 0.0;
                    g[T_ON] = -p.tau;
                    g[TIME] = p.tau;
                }
                return (x, gu, gs);
            }
            let (x1, j1) = closed_form_with_jacobian(r.alpha, r.beta, r.gamma, r.dt, 0.0, 0.0);
            let (x, j) = closed_form_with_jacobian(0.0, r.beta, r.gamma, tau - r.dt, x1.u, x1.s);
            // through the switch state and through the time spent in repression
            let chain = |p: &Partials| {
                let mut g = [0.0; SLOTS];
                g[LOG_ALPHA] = (p.u0 * j1.u.rate + p.s0 * j1.s.rate) * r.alpha;
                g[LOG_BETA] = (p.beta + p.u0 * j1.u.beta + p.s0 * j1.s.beta) * r.beta;
                g[LOG_GAMMA] = (p.gamma + p.u0 * j1.u.gamma + p.s0 * j1.s.gamma) * r.gamma;
                g[T_ON] = -p.tau;
                g[LOG_DT] = (p.u0 * j1.u.tau + p.s0 * j1.s.tau - p.tau) * r.dt;
                g[TIME] = p.tau;
                g
            };
            (x, chain(&j.u), chain(&j.s))
        }
        Source::Mixture { rho } => {
            let tau = t - r.t_on;
            if tau <= 0.0 {
                // the state sits at zero; only the clamp is active
                return (KineticState::default(), [0.0; SLOTS], [0.0; SLOTS]);
            }
            let (x, j) = closed_form_with_jacobian(rho * r.alpha, r.beta, r.gamma, tau, 0.0, 0.0);
            let mut gu = slots(&j.u, r, rho);
            let mut gs = slots(&j.s, r, rho);
            for (g, p) in [(&mut gu, &j.u), (&mut gs, &j.s)] {
                g[T_ON] = -p.tau;
                g[TIME] = p.tau;
            }
            (x, gu, gs)
        }
        Source::Anchored { rho, u0, s0, t0 } => {
            let tau = (t - t0).max(0.0);
            let (x, j) = closed_form_with_jacobian(rho * r.alpha, r.beta, r.gamma, tau, u0, s0);
            let mut gu = slots(&j.u, r, rho);
            let mut gs = slots(&j.s, r, rho);
            if t > t0 {
                gu[TIME] = j.u.tau;
                gs[TIME] = j.s.tau;
            }
            (x, gu, gs)
        }
    }
}
