#![allow(dead_code)]

use leqg_po::game_oracle::estimate_gamma_inf;
use leqg_po::plant::{GainK, GainL, PlantModel};
use leqg_po::sysid_init::lmi_gain;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `C = [I; 0]`, `E = [0; I]`, so `Q = I_n`, `R = I_m`, `C^T E = 0`.
pub fn output_maps(n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut c = DMatrix::zeros(n + m, n);
    c.view_mut((0, 0), (n, n)).fill_with_identity();
    let mut e = DMatrix::zeros(n + m, m);
    e.view_mut((n, 0), (m, m)).fill_with_identity();
    (c, e)
}

/// Random plant with `gamma = 2 gamma_inf` and an LMI initial gain. Draws
/// until both exist.
pub fn random_game(seed: u64, max_dim: usize) -> (PlantModel, GainK) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.random_range(1..=max_dim);
        let m = rng.random_range(1..=max_dim);
        let q = rng.random_range(1..=max_dim);
        let a = gaussian(n, n, 0.7 / (n as f64).sqrt(), &mut rng);
        let b = gaussian(n, m, 1.0, &mut rng);
        let d = gaussian(n, q, 0.3, &mut rng);
        let (c, e) = output_maps(n, m);
        let Ok(probe) = PlantModel::new(a, b, c, d, e, 1.0, DMatrix::identity(n, n)) else { continue };
        let Ok(g_inf) = estimate_gamma_inf(&probe, 1e-6) else { continue };
        let Ok(model) = probe.with_gamma(2.0 * g_inf.max(0.1)) else { continue };
        if let Ok(k) = lmi_gain(&model) {
            return (model, k);
        }
    }
}

/// Value iteration on the stacked-input Riccati equation with input
/// `[u; w]`, `B_s = [B D]`, `R_s = blockdiag(R, -gamma^2 I)`. Returns
/// `(P, K, L)` with `u = -K x`, `w = L x`.
pub fn stacked_riccati(model: &PlantModel) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n, m, q) = (model.n(), model.m(), model.q_dim());
    let mut bs = DMatrix::zeros(n, m + q);
    bs.view_mut((0, 0), (n, m)).copy_from(model.b());
    bs.view_mut((0, m), (n, q)).copy_from(model.d());
    let mut rs = DMatrix::zeros(m + q, m + q);
    rs.view_mut((0, 0), (m, m)).copy_from(&model.r());
    rs.view_mut((m, m), (q, q)).fill_with_identity();
    rs.view_mut((m, m), (q, q)).scale_mut(-model.gamma().powi(2));
    let a = model.a();
    let qm = model.q();
    let gain = |p: &DMatrix<f64>| {
        let h = &rs + bs.transpose() * p * &bs;
        h.lu().solve(&(bs.transpose() * p * a)).expect("stacked Riccati kernel is invertible")
    };
    let mut p = qm.clone();
    for _ in 0..2_000_000 {
        let g = gain(&p);
        let next = &qm + a.transpose() * &p * a - a.transpose() * &p * &bs * &g;
        let next = (&next + next.transpose()) * 0.5;
        let change = (&next - &p).norm() / p.norm();
        p = next;
        if change < 1e-15 {
            break;
        }
    }
    let g = gain(&p);
    let k = g.rows(0, m).into_owned();
    let l = -g.rows(m, q).into_owned();
    (p, k, l)
}

pub fn zeros_l(model: &PlantModel) -> GainL {
    GainL::zeros(model.q_dim(), model.n())
}

pub fn rel(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (x - y).norm() / y.norm().max(f64::MIN_POSITIVE)
}
