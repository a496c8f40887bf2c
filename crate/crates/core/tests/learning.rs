mod common;

use common::{random_game, rel, zeros_l};
use leqg_po::benchmarks::{cartpole, illustrative};
use leqg_po::data_driven::{
    build_operators, gamma_hat, omega_hat, run_learning, run_learning_on, simulate, simulate_with, solve_p_data,
    update_k_data, update_l_data, ExplorationPolicy, GammaMap, LearningConfig, SimulationOptions, BURN_IN,
};
use leqg_po::dual_loop::{run_with_reference, DualLoopConfig};
use leqg_po::game_oracle::{solve_gare_value_iteration, GameSolution, ORACLE_MAX_ITER, ORACLE_TOL};
use leqg_po::plant::{is_admissible, lmi_admissibility_check, PlantModel};
use leqg_po::sysid_init::{find_initial_gain, find_initial_gain_auto, identify, learn_initial_controller, lmi_gain, IdentifiedModel};
use leqg_po::Error;
use nalgebra::DMatrix;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn oracle(model: &PlantModel) -> GameSolution {
    solve_gare_value_iteration(model, ORACLE_TOL, ORACLE_MAX_ITER).unwrap()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn gamma_error(model: &PlantModel, policy: &ExplorationPolicy, tau: usize, seed: u64, p: &DMatrix<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buf = simulate(model, policy, tau, &mut rng).unwrap();
    let map = build_operators(&buf).unwrap().gamma_map().unwrap();
    let exact = gamma_hat(&GammaMap::from_model(model), p).unwrap();
    (gamma_hat(&map, p).unwrap() - &exact).norm() / exact.norm()
}

#[test]
fn model_map_updates_equal_model_based_updates() {
    for (model, k) in [(illustrative(), lmi_gain(&illustrative()).unwrap()), random_game(7, 4), random_game(8, 3)] {
        let sol = oracle(&model);
        let map = GammaMap::from_model(&model);
        let k_data = update_k_data(&map, &sol.p_star).unwrap();
        assert!(rel(k_data.matrix(), sol.k_star.matrix()) < 1e-8);
        let l_data = update_l_data(&map, &sol.p_star, &sol.k_star).unwrap();
        assert!(rel(l_data.matrix(), sol.l_star.matrix()) < 1e-8);

        // One inner Lyapunov step at (K, L = 0).
        let (p, res) = solve_p_data(&map, &k, &zeros_l(&model)).unwrap();
        let expect = leqg_po::matrix_kit::solve_dlyap(&model.closed_loop(&k), &model.closed_loop_weight(&k)).unwrap();
        assert!(rel(&p, &expect) < 1e-8);
        assert!(res < 1e-10);
    }
}

#[test]
fn idealized_learning_reproduces_exact_trace() {
    for model in [illustrative(), cartpole()] {
        let sol = oracle(&model);
        let k1 = lmi_gain(&model).unwrap();
        let exact = run_with_reference(&model, &sol, &DualLoopConfig::new(&model, 10, 20, k1.clone()).unwrap()).unwrap();
        let (learned, _) = run_learning_on(&model, &GammaMap::from_model(&model), &k1, 10, 20, &sol).unwrap();
        for (a, b) in exact.outer.iter().zip(&learned.outer) {
            assert!(rel(b.k.matrix(), a.k.matrix()) < 1e-6, "i {}", a.i);
            assert!(rel(b.p.as_ref().unwrap(), a.p.as_ref().unwrap()) < 1e-6);
        }
    }
}

#[test]
fn ww_block_agrees_with_direct_reconstruction() {
    let model = illustrative();
    let policy = ExplorationPolicy::lqr(&model, 1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ops = build_operators(&simulate(&model, &policy, 3000, &mut rng).unwrap()).unwrap();
    let map = ops.gamma_map().unwrap();
    let p = oracle(&model).p_star;
    let g = gamma_hat(&map, &p).unwrap();
    let ww = ops.gamma_ww_hat(&p).unwrap();
    assert!((g.view((6, 6), (3, 3)) - &ww).norm() < 1e-10 * ww.norm());
}

#[test]
fn sampled_operators_are_consistent() {
    let model = illustrative();
    let p = oracle(&model).p_star;
    let policy = ExplorationPolicy::lqr(&model, 1.0, 1.0).unwrap();

    assert!(gamma_error(&model, &policy, 50_000, 3, &p) <= 0.05);

    let mut medians = Vec::new();
    for tau in [2000, 5000, 20000, 50000] {
        medians.push(median((0..20).map(|s| gamma_error(&model, &policy, tau, 1000 + s, &p)).collect()));
    }
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}

#[test]
fn sampled_omega_and_policy_residual() {
    let model = illustrative();
    // D is small next to the state scale, so the w-channel needs louder
    // exploration for the disturbance regression to stand out of the noise.
    let loud = ExplorationPolicy::lqr(&model, 1.0, 10.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let map = build_operators(&simulate(&model, &loud, 50_000, &mut rng).unwrap()).unwrap().gamma_map().unwrap();
    let y = DMatrix::identity(3, 3);
    let ddt = model.d() * model.d().transpose();
    assert!(rel(&omega_hat(&map, &y).unwrap(), &ddt) <= 0.1);
    assert!(omega_hat(&map, &DMatrix::zeros(3, 3)).unwrap().norm() == 0.0);

    let policy = ExplorationPolicy::lqr(&model, 1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = build_operators(&simulate(&model, &policy, 5000, &mut rng).unwrap()).unwrap().gamma_map().unwrap();
    let k = lmi_gain(&model).unwrap();
    let (_, res) = solve_p_data(&map, &k, &zeros_l(&model)).unwrap();
    assert!(res <= 0.1);
}

#[test]
fn independent_buffers_estimate_the_same_second_moments() {
    let model = illustrative();
    let policy = ExplorationPolicy::lqr(&model, 1.0, 1.0).unwrap();
    let phi = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_operators(&simulate(&model, &policy, 50_000, &mut rng).unwrap()).unwrap().phi
    };
    let (a, b) = (phi(1), phi(2));
    let top = a.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for (x, y) in a.iter().zip(b.iter()) {
        if x.abs() >= 0.5 * top {
            assert!((x - y).abs() <= 0.05 * x.abs(), "{x} vs {y}");
        }
    }
}

#[test]
fn learner_never_touches_the_data() {
    let model = illustrative();
    let sol = oracle(&model);
    let policy = ExplorationPolicy::lqr(&model, 1.0, 1.0).unwrap();
    let cfg = |k_init| LearningConfig { outer_iters: 5, inner_iters: 5, tau: 2000, burn_in: BURN_IN, rng_seed: 9, k_init };
    let a = run_learning(&model, &policy, &cfg(lmi_gain(&model).unwrap()), &sol).unwrap();
    let b = run_learning(&model, &policy, &cfg(sol.k_star.clone()), &sol).unwrap();
    assert_eq!(a.buffer.fingerprint(), b.buffer.fingerprint());

    let before = a.buffer.fingerprint();
    let map = build_operators(&a.buffer).unwrap().gamma_map().unwrap();
    run_learning_on(&model, &map, &lmi_gain(&model).unwrap(), 5, 5, &sol).unwrap();
    assert_eq!(a.buffer.fingerprint(), before);
}

#[test]
fn sampled_learning_on_illustrative_example() {
    let model = illustrative();
    let sol = oracle(&model);
    let policy = ExplorationPolicy::lqr(&model, 1.0, 1.0).unwrap();
    let k1 = lmi_gain(&model).unwrap();
    let mut finals = Vec::new();
    for seed in 0..5 {
        let cfg = LearningConfig { outer_iters: 10, inner_iters: 20, tau: 5000, burn_in: BURN_IN, rng_seed: seed, k_init: k1.clone() };
        let run = run_learning(&model, &policy, &cfg, &sol).unwrap();
        assert!(run.trace.outer.iter().all(|r| r.admissible));
        finals.push(run.trace.last().unwrap().rel_err_k);
    }
    assert!(finals.iter().sum::<f64>() / 5.0 < 0.25);
}

#[test]
fn burn_in_and_start_state_are_honoured() {
    let model = illustrative();
    let policy = ExplorationPolicy::new(lmi_gain(&model).unwrap(), zeros_l(&model), 0.0, 0.0).unwrap();
    let quiet = model.with_sigma(DMatrix::zeros(3, 3)).unwrap();
    let opts = SimulationOptions { burn_in: 0, x0: Some(nalgebra::dvector![1.0, 0.0, 0.0]) };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let buf = simulate_with(&quiet, &policy, 3, &opts, &mut rng).unwrap();
    let a_k = quiet.closed_loop(&policy.k_exp);
    assert_eq!(buf.samples()[0].z.rows(0, 3), nalgebra::dvector![1.0, 0.0, 0.0]);
    assert!((&buf.samples()[0].x_next - &a_k * nalgebra::dvector![1.0, 0.0, 0.0]).norm() < 1e-14);
}

// ---- identification and the LMI initial gain ----

#[test]
fn identification_improves_with_data() {
    let model = illustrative();
    let policy = ExplorationPolicy::lqr(&model, 1.0, 1.0).unwrap();
    let mut medians = Vec::new();
    for tau in [1000, 5000, 20000] {
        let errs = (0..20)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(500 + s);
                identify(&simulate(&model, &policy, tau, &mut rng).unwrap(), Some(&model)).unwrap().residual_norm.unwrap()
            })
            .collect();
        medians.push(median(errs));
    }
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}

#[test]
fn minimal_data_is_still_solvable() {
    let model = illustrative();
    let policy = ExplorationPolicy::lqr(&model, 1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = SimulationOptions { burn_in: 0, x0: None };
    let buf = simulate_with(&model, &policy, 9, &opts, &mut rng).unwrap();
    let idm = identify(&buf, Some(&model)).unwrap();
    assert!(idm.residual_norm.unwrap().is_finite());
}

#[test]
fn noise_free_pipeline_reduces_to_true_matrix_lmi() {
    let model = illustrative().with_sigma(DMatrix::zeros(3, 3)).unwrap();
    let policy = ExplorationPolicy::lqr(&model, 1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ic = learn_initial_controller(&model, &policy, 2000, Some(1e-3), Some(1e-2), &mut rng).unwrap();
    let direct = find_initial_gain(&IdentifiedModel::exact(&model), model.c(), model.e(), model.gamma(), 1e-3, 1e-2).unwrap();
    assert!(rel(ic.k.matrix(), direct.k.matrix()) < 1e-6);
}

#[test]
fn learned_initial_gain_is_certified_on_both_models() {
    for (model, sigma) in [(illustrative(), 1.0), (cartpole(), 20.0)] {
        let policy = ExplorationPolicy::lqr(&model, sigma, sigma).unwrap();
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ic = learn_initial_controller(&model, &policy, 10_000, None, None, &mut rng).unwrap();
            let idm = ic.identified.to_plant(model.c(), model.e(), model.gamma()).unwrap();
            assert!(lmi_admissibility_check(&idm, &ic.lmi.w, &ic.lmi.v));
            assert!(is_admissible(&idm, &ic.k).unwrap().admissible);
            assert!(ic.admissibility.hinf.unwrap() < model.gamma());
        }
    }
}

#[test]
fn disturbance_free_estimate_is_always_feasible() {
    let model = illustrative();
    let idm = IdentifiedModel { d_hat: DMatrix::zeros(3, 3), ..IdentifiedModel::exact(&model) };
    let sol = find_initial_gain_auto(&idm, model.c(), model.e(), 0.5, None, None).unwrap();
    assert!(sol.margin < 0.0);
}

#[test]
fn tiny_trajectory_reports_a_failure() {
    let model = illustrative();
    let policy = ExplorationPolicy::lqr(&model, 1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = learn_initial_controller(&model, &policy, 5, None, None, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Stage { .. }));
}

#[test]
fn without_disturbance_channel_updates_reduce_to_lqr() {
    let base = illustrative();
    let model = PlantModel::new(
        base.a().clone(),
        base.b().clone(),
        base.c().clone(),
        DMatrix::zeros(3, 3),
        base.e().clone(),
        5.0,
        DMatrix::identity(3, 3),
    )
    .unwrap();
    let map = GammaMap::from_model(&model);
    let k = lmi_gain(&base).unwrap();
    let p = leqg_po::matrix_kit::solve_dlyap(&model.closed_loop(&k), &model.closed_loop_weight(&k)).unwrap();
    assert_eq!(update_l_data(&map, &p, &k).unwrap().matrix().norm(), 0.0);
    let b = model.b();
    let expect = (model.r() + b.transpose() * &p * b).lu().solve(&(b.transpose() * &p * model.a())).unwrap();
    assert!(rel(update_k_data(&map, &p).unwrap().matrix(), &expect) < 1e-10);
}
