use super::mean::{mean, Source};
use super::train::{minibatch_gradients, reconstruction_mse};
use super::*;
use crate::io::ExpressionMatrix;
use crate::kinetics::{closed_form, solve_phase};
use crate::nn::{central_difference, max_relative_error, Mode};
use crate::simulator::{simulate_preset, Preset};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_state(kind: ModelKind, g: usize, d: usize, hidden: &[usize], seed: u64) -> ModelState {
    let mut r = rng(seed);
    let encoder = Mlp::new(ModelState::encoder_spec(g, kind, d, hidden, 0.0), &mut r).unwrap();
    let decoder = (kind == ModelKind::Full).then(|| Mlp::new(ModelState::decoder_spec(g, d, hidden, 0.0), &mut r).unwrap());
    let mut draw = |lo: f64, hi: f64| (0..g).map(|_| r.gen_range(lo..hi)).collect::<Vec<f64>>();
    let ode = OdeParams {
        log_alpha: draw(0.0, 1.0),
        log_beta: draw(-0.7, 0.2),
        log_gamma: draw(-1.5, -0.5),
        t_on: draw(0.5, 2.0),
        log_dt: if kind == ModelKind::Basic { draw(1.5, 2.2) } else { Vec::new() },
        log_sigma_u: draw(-1.0, 0.0),
        log_sigma_s: draw(-1.0, 0.0),
    };
    let input_scale = draw(0.5, 2.0).into_iter().chain(draw(0.5, 2.0)).collect();
    ModelState {
        kind,
        genes: (0..g).map(|j| format!("g{j}")).collect(),
        t_max: 20.0,
        latent_dim: d,
        encoder,
        decoder,
        ode,
        input_scale,
        prior: TimePrior::uninformative(20.0),
        refinement: None,
    }
}

fn random_batch(n: usize, g: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut r = rng(seed);
    (Array2::from_shape_fn((n, g), |_| r.gen_range(0.0..3.0)), Array2::from_shape_fn((n, g), |_| r.gen_range(0.0..6.0)))
}

#[test]
fn encoder_output_shapes() {
    let state = tiny_state(ModelKind::Full, 100, 5, &[500, 250], 1);
    let (u, s) = random_batch(128, 100, 2);
    let p = state.encode(u.view(), s.view()).unwrap();
    assert_eq!(p.mu_t.len(), 128);
    assert_eq!(p.sigma_t.len(), 128);
    assert_eq!(p.mu_c.as_ref().unwrap().dim(), (128, 5));
    assert_eq!(p.sigma_c.as_ref().unwrap().dim(), (128, 5));
    assert!(p.sigma_t.iter().chain(p.sigma_c.as_ref().unwrap().iter()).all(|&v| v > 0.0));

    let basic = tiny_state(ModelKind::Basic, 100, 5, &[500, 250], 1);
    let p = basic.encode(u.view(), s.view()).unwrap();
    assert!(p.mu_c.is_none() && p.sigma_c.is_none());
    assert!(basic.encode(u.slice(ndarray::s![.., ..99]).view(), s.slice(ndarray::s![.., ..99]).view()).is_err());
}

#[test]
fn identical_cells_get_identical_posteriors() {
    let state = tiny_state(ModelKind::Full, 4, 3, &[16, 8], 3);
    let (mut u, mut s) = random_batch(5, 4, 4);
    let (ur, sr) = (u.row(1).to_owned(), s.row(1).to_owned());
    u.row_mut(3).assign(&ur);
    s.row_mut(3).assign(&sr);
    let p = state.encode(u.view(), s.view()).unwrap();
    assert_eq!(p.mu_t[1], p.mu_t[3]);
    assert_eq!(p.sigma_t[1], p.sigma_t[3]);
    assert_eq!(p.mu_c.as_ref().unwrap().row(1), p.mu_c.as_ref().unwrap().row(3));
}

#[test]
fn rho_lies_in_unit_interval_and_is_continuous() {
    let state = tiny_state(ModelKind::Full, 6, 5, &[32, 16], 5);
    let mut r = rng(6);
    let c = Array2::from_shape_fn((1000, 5), |_| r.gen_range(-4.0..4.0));
    let rho = state.decode_rho(c.view()).unwrap();
    assert!(rho.iter().all(|&v| v > 0.0 && v < 1.0));
    let shifted = &c + 1e-5;
    let rho2 = state.decode_rho(shifted.view()).unwrap();
    assert!((&rho - &rho2).iter().all(|v| v.abs() < 1e-3));
    assert!(state.decode_rho(Array2::zeros((2, 4)).view()).is_err());
}

#[test]
fn zero_final_decoder_layer_gives_one_half() {
    let mut state = tiny_state(ModelKind::Full, 6, 2, &[8, 8], 7);
    let dec = state.decoder.as_mut().unwrap();
    let last = dec.layers().len() - 1;
    let layer = dec.layer_mut(last);
    layer.weight.fill(0.0);
    layer.bias.fill(0.0);
    let c = Array2::from_shape_fn((10, 2), |(i, k)| i as f64 - k as f64);
    assert!(state.decode_rho(c.view()).unwrap().iter().all(|&v| v == 0.5));
}

#[test]
fn kl_spot_values() {
    assert!((kl_normal(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-9);
    let expected = 0.5 * (4f64.ln() + 0.25 - 1.0);
    assert!((kl_normal(0.0, 0.5, 0.0, 1.0) - expected).abs() < 1e-9);
    assert!((expected - 0.318147).abs() < 1e-6);
    assert_eq!(kl_normal(3.2, 0.7, 3.2, 0.7), 0.0);
}

proptest! {
    #[test]
    fn kl_is_non_negative(mq in -50.0..50.0f64, sq in 1e-3..30.0f64, mp in -50.0..50.0f64, sp in 1e-3..30.0f64) {
        prop_assert!(kl_normal(mq, sq, mp, sp) >= -1e-12);
    }
}

#[test]
fn elbo_at_zero_distance_and_zero_kl() {
    for kind in [ModelKind::Basic, ModelKind::Full] {
        let mut state = tiny_state(kind, 1, 2, &[4, 4], 8);
        state.ode.log_sigma_u = vec![0.0];
        state.ode.log_sigma_s = vec![0.0];
        let t = [7.3, 2.2];
        let c = Array2::from_shape_fn((2, 2), |(i, k)| 0.3 * i as f64 - 0.1 * k as f64);
        let rho = state.decoder.as_ref().map(|_| state.decode_rho(c.view()).unwrap());
        let anchors = vec![None, None];
        let (u, s) = state.kinetic_means(&t, rho.as_ref().map(|r| r.view()), &anchors).unwrap();
        let post = LatentPosterior {
            mu_t: Array1::from_elem(2, state.prior.t0),
            sigma_t: Array1::from_elem(2, state.prior.sigma0),
            mu_c: (kind == ModelKind::Full).then(|| Array2::zeros((2, 2))),
            sigma_c: (kind == ModelKind::Full).then(|| Array2::ones((2, 2))),
        };
        let e = state.elbo_terms(u.view(), s.view(), &post, &t, (kind == ModelKind::Full).then(|| c.view()), None).unwrap();
        assert_eq!(e.kl_t, 0.0);
        assert_eq!(e.kl_c, 0.0);
        assert!((e.elbo + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12, "{e:?}");
    }
}

#[test]
fn reconstruction_decomposes_over_genes() {
    let state = tiny_state(ModelKind::Basic, 3, 2, &[4], 9);
    let (u, s) = random_batch(6, 3, 10);
    let post = state.encode(u.view(), s.view()).unwrap();
    let t = [1.0, 3.0, 5.0, 7.0, 9.0, 11.0];
    let joint = state.elbo_terms(u.view(), s.view(), &post, &t, None, None).unwrap();
    let mut sum = 0.0;
    for j in 0..3 {
        let pick = |v: &Vec<f64>| vec![v[j]];
        let single = ModelState {
            genes: vec![state.genes[j].clone()],
            ode: OdeParams {
                log_alpha: pick(&state.ode.log_alpha),
                log_beta: pick(&state.ode.log_beta),
                log_gamma: pick(&state.ode.log_gamma),
                t_on: pick(&state.ode.t_on),
                log_dt: pick(&state.ode.log_dt),
                log_sigma_u: pick(&state.ode.log_sigma_u),
                log_sigma_s: pick(&state.ode.log_sigma_s),
            },
            ..state.clone()
        };
        let col = |m: &Array2<f64>| m.slice(ndarray::s![.., j..j + 1]).to_owned();
        sum += single.elbo_terms(col(&u).view(), col(&s).view(), &post, &t, None, None).unwrap().reconstruction;
    }
    assert!((sum - joint.reconstruction).abs() < 1e-10 * joint.reconstruction.abs());
}

#[test]
fn unit_rho_full_model_matches_basic_induction() {
    let mut basic = tiny_state(ModelKind::Basic, 3, 2, &[4], 11);
    basic.ode.log_dt = vec![100f64.ln(); 3];
    let mut full = tiny_state(ModelKind::Full, 3, 2, &[4], 11);
    full.ode = OdeParams { log_dt: Vec::new(), ..basic.ode.clone() };
    let t = [0.0, 0.7, 2.5, 6.0, 15.0];
    let none = vec![None; 5];
    let (ub, sb) = basic.kinetic_means(&t, None, &none).unwrap();
    let ones = Array2::ones((5, 3));
    let (uf, sf) = full.kinetic_means(&t, Some(ones.view()), &none).unwrap();
    assert_eq!(ub, uf);
    assert_eq!(sb, sf);
}

/// Every trainable scalar, perturbed through the `Trainable` views.
fn fd_check(kind: ModelKind) {
    let (n, g, d) = (8, 3, 2);
    let mut state = tiny_state(kind, g, d, &[7, 5], 12);
    // give batch norm non-trivial frozen statistics
    let (u, s) = random_batch(n, g, 13);
    let mut r = rng(14);
    for _ in 0..3 {
        let x = state.encoder_input(u.view(), s.view()).unwrap();
        state.encoder.forward(x.view(), Mode::Train, &mut r).unwrap();
    }
    let eps_t: Vec<f64> = (0..n).map(|i| 0.3 * (i as f64 - 3.5)).collect();
    let eps_c = Array2::from_shape_fn((n, d), |(i, k)| 0.2 * (i as f64) - 0.5 * k as f64);
    let prior: Vec<f64> = (0..n).map(|i| 8.0 + i as f64).collect();
    let eps_c_view = (kind == ModelKind::Full).then(|| eps_c.view());
    let loss = |st: &mut ModelState| {
        minibatch_gradients(st, u.view(), s.view(), &prior, &eps_t, eps_c_view, Mode::Eval, 1.0, &mut rng(0)).unwrap().1
    };
    let (_, _, grads) = minibatch_gradients(&mut state, u.view(), s.view(), &prior, &eps_t, eps_c_view, Mode::Eval, 1.0, &mut rng(0)).unwrap();

    fn check<P: Trainable, G: Trainable>(
        name: &str,
        state: &mut ModelState,
        grads: &G,
        get: fn(&mut ModelState) -> &mut P,
        loss: &dyn Fn(&mut ModelState) -> f64,
    ) {
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, g)| g.to_vec()).collect();
        for ti in 0..analytic.len() {
            let x0: Vec<f64> = get(state).tensors()[ti].1.to_vec();
            let numeric = central_difference(
                |x| {
                    get(state).tensors_mut()[ti].1.copy_from_slice(x);
                    let l = loss(state);
                    get(state).tensors_mut()[ti].1.copy_from_slice(&x0);
                    l
                },
                &x0,
                1e-6,
            );
            let err = max_relative_error(&analytic[ti], &numeric);
            assert!(err < 1e-3, "{name} tensor {ti}: relative error {err}");
        }
    }
    check("ode", &mut state, &grads.ode, |s| &mut s.ode, &loss);
    check("encoder", &mut state, &grads.encoder, |s| &mut s.encoder, &loss);
    if let Some(dg) = &grads.decoder {
        check("decoder", &mut state, dg, |s| s.decoder.as_mut().unwrap(), &loss);
    }
}

#[test]
fn elbo_gradient_matches_finite_differences_basic() {
    fd_check(ModelKind::Basic);
}

#[test]
fn elbo_gradient_matches_finite_differences_full() {
    fd_check(ModelKind::Full);
}

#[test]
fn initialization_cases() {
    let mut r = rng(15);
    let n = 400;
    let u = Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { 2.0 + 0.01 * r.gen::<f64>() } else { 0.0 });
    let s = Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { 4.0 + 0.01 * r.gen::<f64>() } else { 0.0 });
    let init = initialize_params(u.view(), s.view(), None, 20.0).unwrap();
    assert!((init.kinetics[0].gamma - 0.5).abs() < 0.025);
    assert_eq!(init.estimable, vec![true, false]);
    let k = &init.kinetics[1];
    assert_eq!((k.alpha, k.beta, k.gamma), (1.0, 1.0, 1.0));
    assert_eq!(init.kinetics[0].t_off, 10.0);

    let capture: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let init = initialize_params(u.view(), s.view(), Some(&capture), 20.0).unwrap();
    let mut means = init.prior.informative.clone().unwrap();
    means.sort_by(f64::total_cmp);
    means.dedup();
    assert_eq!(means, vec![0.0, 20.0]);
}

fn small_s1(n: usize, seed: u64) -> ExpressionMatrix {
    simulate_preset(Preset::S1, Some(n), 0.05, seed).unwrap().0
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: vec![32, 16],
        epochs: 40,
        batch_size: 32,
        learning_rate: 2e-3,
        seed,
        refine_epochs: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn training_raises_the_elbo_and_is_deterministic() {
    let data = small_s1(200, 16);
    let cfg = quick_config(3);
    let out = train(&data, &cfg, ModelKind::Full).unwrap();
    assert_eq!(out.history.len(), cfg.epochs);
    let smooth = |w: &[EpochRecord]| w.iter().map(|r| r.elbo).sum::<f64>() / w.len() as f64;
    let h = &out.history;
    assert!(smooth(&h[h.len() - 10..]) >= smooth(&h[..10]), "{h:?}");
    assert_eq!(out.train_cells.len(), 140);
    let again = train(&data, &cfg, ModelKind::Full).unwrap();
    assert_eq!(again.history, out.history);
    assert_eq!(again.state, out.state);

    let last = h.last().unwrap();
    let u = data.unspliced.select(ndarray::Axis(0), &out.train_cells);
    let s = data.spliced.select(ndarray::Axis(0), &out.train_cells);
    assert_eq!(reconstruction_mse(&out.state, u.view(), s.view()).unwrap(), last.mse_train);
}

#[test]
fn bad_configs_are_rejected() {
    let data = small_s1(60, 1);
    let bad = [
        TrainConfig { train_fraction: 1.0, ..quick_config(0) },
        TrainConfig { delta1: 0.1, delta2: 0.2, ..quick_config(0) },
        TrainConfig { informative_prior: true, ..quick_config(0) },
    ];
    for cfg in bad {
        assert!(matches!(train(&data, &cfg, ModelKind::Basic).map_err(|f| f.error), Err(Error::Config(_))));
    }
}

#[test]
fn refinement_rules() {
    let data = small_s1(200, 17);
    let cfg = quick_config(4);
    let out = train(&data, &cfg, ModelKind::Full).unwrap();
    let bad = TrainConfig { delta1: 0.2, delta2: 0.2, ..cfg.clone() };
    assert!(matches!(refine_initial_conditions(&out.state, &data, &out.train_cells, &bad), Err(Error::Config(_))));
    let basic = train(&data, &TrainConfig { epochs: 2, ..cfg.clone() }, ModelKind::Basic).unwrap();
    assert!(refine_initial_conditions(&basic.state, &data, &basic.train_cells, &cfg).is_err());

    let r = refine_initial_conditions(&out.state, &data, &out.train_cells, &cfg).unwrap();
    assert!(r.mse_after <= 1.01 * r.mse_before);
    assert!(r.empty_windows >= 1);
    if !r.rolled_back {
        let refinement = r.state.refinement.as_ref().unwrap();
        // the earliest reference cell has nothing before it
        assert!(refinement.anchor(refinement.times[0]).is_none());
    }
}

#[test]
fn window_mean_tracks_a_noiseless_trajectory() {
    let p = GeneKinetics::new(2.0, 1.0, 0.5).with_switch(0.0, 8.0);
    let times: Vec<f64> = (0..4000).map(|k| k as f64 * 0.005).collect();
    let u = Array2::from_shape_fn((times.len(), 1), |(i, _)| solve_phase(&p, times[i]).unwrap().u);
    let s = Array2::from_shape_fn((times.len(), 1), |(i, _)| solve_phase(&p, times[i]).unwrap().s);
    let r = Refinement::new(0.6, 0.2, &times, u.view(), s.view()).unwrap();
    assert!(r.anchor(0.1).is_none());
    for t in [1.0, 5.0, 9.0, 15.0] {
        let a = r.anchor(t).unwrap();
        assert!((a.t0 - (t - 0.4)).abs() < 1e-12);
        let truth = solve_phase(&p, a.t0).unwrap();
        // averaging a smooth curve over a symmetric window of width 0.4
        assert!((a.u0[0] - truth.u).abs() < 0.01 && (a.s0[0] - truth.s).abs() < 0.01, "t={t}: {a:?} vs {truth:?}");
    }
}

#[test]
fn prediction_at_steady_state_has_small_velocity() {
    let mut state = tiny_state(ModelKind::Basic, 4, 2, &[6], 18);
    state.ode.log_dt = vec![1e4f64.ln(); 4];
    let last = state.encoder.layers().len() - 1;
    let layer = state.encoder.layer_mut(last);
    layer.weight.fill(0.0);
    layer.bias[0] = 100.0;
    let (u, s) = random_batch(5, 4, 19);
    let data = ExpressionMatrix::new(
        (0..5).map(|i| format!("c{i}")).collect(),
        state.genes.clone(),
        u.clone(),
        s.clone(),
    )
    .unwrap();
    let p = predict(&state, &data).unwrap();
    for j in 0..4 {
        let k = &state.gene_kinetics()[j];
        let s_ss = k.alpha / k.gamma;
        for i in 0..5 {
            assert!(p.ds_dt[[i, j]].abs() < 0.05 * s_ss);
            assert_eq!(p.rho[[i, j]], 1.0);
        }
    }
    let renamed = ExpressionMatrix::new(
        (0..5).map(|i| format!("c{i}")).collect(),
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
        u,
        s,
    )
    .unwrap();
    assert!(matches!(predict(&state, &renamed), Err(Error::Data(_))));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = tiny_state(ModelKind::Full, 3, 2, &[5, 4], 20);
    let (u, s) = random_batch(30, 3, 21);
    let times: Vec<f64> = (0..30).map(|i| i as f64 * 0.5).collect();
    state.refinement = Some(Refinement::new(0.6, 0.2, &times, u.view(), s.view()).unwrap());
    state.prior = TimePrior::from_capture_times(&times, 20.0).unwrap();
    state.save(dir.path()).unwrap();
    assert_eq!(ModelState::load(dir.path()).unwrap(), state);

    let basic = tiny_state(ModelKind::Basic, 2, 5, &[3], 22);
    basic.save(dir.path()).unwrap();
    assert_eq!(ModelState::load(dir.path()).unwrap(), basic);
}

#[test]
fn anchored_mean_starts_from_the_anchor() {
    let r = super::mean::Rates { alpha: 2.0, beta: 1.0, gamma: 0.5, t_on: 0.0, dt: f64::INFINITY };
    let x = mean(&r, Source::Anchored { rho: 0.3, u0: 1.2, s0: 0.4, t0: 5.0 }, 5.4);
    assert_eq!(x, closed_form(0.6, 1.0, 0.5, 5.4 - 5.0, 1.2, 0.4));
}
