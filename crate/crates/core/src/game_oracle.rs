//! Reference solutions that do not go through policy optimization: the
//! generalized Riccati equation by value iteration, fixed-point evaluation of
//! a given gain, the worst-case adversary gain, and the infimal `gamma`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix_kit::{is_pd, solve_dlyap, spectral_radius, symmetrize, CostMatrix, STABILITY_MARGIN};
use crate::plant::{GainK, GainL, PlantModel};

/// `|P|_F` beyond which value iteration is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Default stopping tolerance (relative change) for the oracles.
pub const ORACLE_TOL: f64 = 1e-13;

pub const ORACLE_MAX_ITER: usize = 200_000;

const MAX_STEP_HALVINGS: usize = 30;

/// Saddle point of the zero-sum game.
#[derive(Debug, Clone, Serialize)]
pub struct GameSolution {
    #[serde(serialize_with = "ser_matrix")]
    pub p_star: CostMatrix,
    #[serde(serialize_with = "ser_gain_k")]
    pub k_star: GainK,
    #[serde(serialize_with = "ser_gain_l")]
    pub l_star: GainL,
    pub iterations: usize,
    /// Frobenius norm of the Riccati residual at `(P*, K*)`.
    pub residual: f64,
    #[serde(skip)]
    u_star: CostMatrix,
}

impl GameSolution {
    /// `U* = P* + P* D (gamma^2 I - D^T P* D)^{-1} D^T P*`.
    pub fn u_star(&self) -> &CostMatrix {
        &self.u_star
    }
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&crate::plant::to_rows(m), s)
}
fn ser_gain_k<S: serde::Serializer>(k: &GainK, s: S) -> std::result::Result<S::Ok, S::Error> {
    ser_matrix(k.matrix(), s)
}
fn ser_gain_l<S: serde::Serializer>(l: &GainL, s: S) -> std::result::Result<S::Ok, S::Error> {
    ser_matrix(l.matrix(), s)
}

/// `gamma^2 I - D^T P D`, checked positive definite.
fn risk_margin(model: &PlantModel, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = model.q_dim();
    let g2 = model.gamma() * model.gamma();
    let m = symmetrize(&(DMatrix::identity(q, q) * g2 - model.d().transpose() * p * model.d()));
    if !is_pd(&m) {
        return Err(Error::RiskInfeasible(
            "gamma^2 I - D^T P D is not positive definite".into(),
        ));
    }
    Ok(m)
}

/// `U(P) = P + P D (gamma^2 I - D^T P D)^{-1} D^T P`.
pub fn u_of_p(model: &PlantModel, p: &CostMatrix) -> Result<CostMatrix> {
    let m = risk_margin(model, p)?;
    let dtp = model.d().transpose() * p;
    let solved = m
        .cholesky()
        .ok_or_else(|| Error::RiskInfeasible("Cholesky of gamma^2 I - D^T P D failed".into()))?
        .solve(&dtp);
    Ok(symmetrize(&(p + dtp.transpose() * solved)))
}

/// `(R + B^T U B)^{-1} B^T U A`.
pub fn gain_from_u(model: &PlantModel, u: &CostMatrix) -> Result<GainK> {
    let btu = model.b().transpose() * u;
    let s = symmetrize(&(model.r() + &btu * model.b()));
    let k = s
        .lu()
        .solve(&(btu * model.a()))
        .ok_or_else(|| Error::IllConditioned("R + B^T U B is singular".into()))?;
    GainK::new(k)
}

/// `(A - BK)^T U(P) (A - BK) - P + Q + K^T R K` for the gain `K` built from `P`.
pub fn gare_residual(model: &PlantModel, p: &CostMatrix) -> Result<DMatrix<f64>> {
    let u = u_of_p(model, p)?;
    let k = gain_from_u(model, &u)?;
    let a_k = model.closed_loop(&k);
    Ok(a_k.transpose() * u * &a_k - p + model.closed_loop_weight(&k))
}

/// Iterates `P <- Q + A^T U A - A^T U B (R + B^T U B)^{-1} B^T U A`,
/// `U = U(P)`, from `P = Q` until the relative change drops below `tol`.
pub fn solve_gare_value_iteration(model: &PlantModel, tol: f64, max_iter: usize) -> Result<GameSolution> {
    let q = model.q();
    let a = model.a();
    let mut p = q.clone();
    let too_small = |what: &str| Error::GammaTooSmall(format!("gamma = {}: {what}", model.gamma()));
    for it in 1..=max_iter {
        let u = u_of_p(model, &p).map_err(|_| too_small("gamma^2 I - D^T P D lost definiteness"))?;
        let k = gain_from_u(model, &u)?;
        let aut = a.transpose() * &u;
        let p_next = symmetrize(&(&q + &aut * a - &aut * model.b() * k.matrix()));
        if !p_next.iter().all(|v| v.is_finite()) || p_next.norm() > DIVERGENCE_LIMIT {
            return Err(too_small("value iteration diverged"));
        }
        let change = (&p_next - &p).norm() / p.norm().max(f64::MIN_POSITIVE);
        p = p_next;
        if change <= tol {
            return finish_solution(model, p, it).map_err(|e| match e {
                Error::RiskInfeasible(msg) | Error::NotAdmissible(msg) => too_small(&msg),
                other => other,
            });
        }
        if it == max_iter {
            return Err(Error::NoConvergence {
                iterations: it,
                last_change: change,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_change: f64::NAN,
    })
}

fn finish_solution(model: &PlantModel, p: CostMatrix, iterations: usize) -> Result<GameSolution> {
    if !is_pd(&p) {
        return Err(Error::NotAdmissible("P* is not positive definite".into()));
    }
    let u = u_of_p(model, &p)?;
    let k = gain_from_u(model, &u)?;
    let l = worst_case_gain(model, &k, &p)?;
    let a_k = model.closed_loop(&k);
    for (what, m) in [("A - B K*", a_k.clone()), ("A - B K* + D L*", &a_k + model.d() * l.matrix())] {
        let rho = spectral_radius(&m)?;
        if rho >= 1.0 - STABILITY_MARGIN {
            return Err(Error::NotAdmissible(format!("{what} is not stable (rho = {rho})")));
        }
    }
    let residual = (a_k.transpose() * &u * &a_k - &p + model.closed_loop_weight(&k)).norm();
    Ok(GameSolution {
        p_star: p,
        k_star: k,
        l_star: l,
        iterations,
        residual,
        u_star: u,
    })
}

/// Nominal LQR gain for `(A, B, Q, R)`, ignoring the disturbance channel.
/// Used as a moderate stabilizing gain for exploration.
pub fn lqr_gain(model: &PlantModel, tol: f64, max_iter: usize) -> Result<GainK> {
    let q = model.q();
    let a = model.a();
    let mut p = q.clone();
    for it in 1..=max_iter {
        let k = gain_from_u(model, &p)?;
        let apt = a.transpose() * &p;
        let p_next = symmetrize(&(&q + &apt * a - &apt * model.b() * k.matrix()));
        if !p_next.iter().all(|v| v.is_finite()) || p_next.norm() > DIVERGENCE_LIMIT {
            return Err(Error::NotStabilizable("LQR value iteration diverged".into()));
        }
        let change = (&p_next - &p).norm() / p.norm().max(f64::MIN_POSITIVE);
        p = p_next;
        if change <= tol {
            return gain_from_u(model, &p);
        }
        if it == max_iter {
            return Err(Error::NoConvergence { iterations: it, last_change: change });
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, last_change: f64::NAN })
}

/// `P_K` solving `(A-BK)^T U(P_K) (A-BK) - P_K + Q + K^T R K = 0`, by a damped
/// fixed-point iteration started from the Lyapunov solution with `U = P`.
/// Each iteration takes the full step, halving it (at most 30 times) when the
/// residual would grow.
pub fn evaluate_policy(model: &PlantModel, k: &GainK, tol: f64, max_iter: usize) -> Result<CostMatrix> {
    model.check_gain_k(k)?;
    let a_k = model.closed_loop(k);
    let rho = spectral_radius(&a_k)?;
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(Error::UnstableMatrix { spectral_radius: rho });
    }
    let q_k = model.closed_loop_weight(k);
    let limit = DIVERGENCE_LIMIT * q_k.norm().max(1.0);
    let not_admissible =
        |what: &str| Error::NotAdmissible(format!("policy evaluation failed ({what}); |T(K)| >= gamma"));

    let image = |p: &CostMatrix| -> Result<CostMatrix> {
        let u = u_of_p(model, p).map_err(|_| not_admissible("definiteness lost"))?;
        Ok(symmetrize(&(&q_k + a_k.transpose() * u * &a_k)))
    };

    let step_to = |p: &CostMatrix, f: &CostMatrix, step: f64| -> Result<(CostMatrix, CostMatrix, f64)> {
        let cand = p + (f - p) * step;
        if !cand.iter().all(|v| v.is_finite()) || cand.norm() > limit {
            return Err(not_admissible("diverged"));
        }
        let f_cand = image(&cand)?;
        let res = (&f_cand - &cand).norm();
        Ok((cand, f_cand, res))
    };

    let mut p = solve_dlyap(&a_k, &q_k)?;
    let mut f = image(&p)?;
    let mut res = (&f - &p).norm();
    for _ in 0..max_iter {
        if res <= tol * p.norm().max(f64::MIN_POSITIVE) {
            return Ok(p);
        }
        // Full step; on a residual increase try up to 30 halvings and fall
        // back to the full step if none of them helps (the undamped map is
        // monotone from the Lyapunov start, so it cannot overshoot P_K).
        let full = step_to(&p, &f, 1.0)?;
        let mut accepted = None;
        if full.2 > res {
            let mut step = 1.0;
            for _ in 0..MAX_STEP_HALVINGS {
                step *= 0.5;
                let cand = step_to(&p, &f, step)?;
                if cand.2 <= res {
                    accepted = Some(cand);
                    break;
                }
            }
        }
        let (cand, f_cand, res_cand) = accepted.unwrap_or(full);
        p = cand;
        f = f_cand;
        res = res_cand;
    }
    if res <= tol * p.norm() {
        return Ok(p);
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_change: res / p.norm().max(f64::MIN_POSITIVE),
    })
}

/// `L_{K,*} = (gamma^2 I - D^T P_K D)^{-1} D^T P_K (A - B K)`.
pub fn worst_case_gain(model: &PlantModel, k: &GainK, p_k: &CostMatrix) -> Result<GainL> {
    model.check_gain_k(k)?;
    let m = risk_margin(model, p_k)?;
    let rhs = model.d().transpose() * p_k * model.closed_loop(k);
    let l = m
        .cholesky()
        .ok_or_else(|| Error::RiskInfeasible("Cholesky of gamma^2 I - D^T P D failed".into()))?
        .solve(&rhs);
    GainL::new(l)
}

/// Smallest `gamma` (relative tolerance `tol`) for which the value iteration
/// succeeds, searched over `[1e-6, 1e6]`. Returns the upper edge of the bracket.
pub fn estimate_gamma_inf(model: &PlantModel, tol: f64) -> Result<f64> {
    const FLOOR: f64 = 1e-6;
    const CEIL: f64 = 1e6;
    let feasible = |g: f64| -> Result<bool> {
        let m = model.with_gamma(g)?;
        Ok(solve_gare_value_iteration(&m, 1e-10, 20_000).is_ok())
    };
    if !feasible(CEIL)? {
        return Err(Error::NotStabilizable(
            "no stabilizing GARE solution even at gamma = 1e6".into(),
        ));
    }
    if feasible(FLOOR)? {
        return Ok(FLOOR);
    }
    let (mut lo, mut hi) = (FLOOR, CEIL);
    while hi / lo - 1.0 > tol {
        let mid = (lo * hi).sqrt();
        if feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `-gamma^2 log det(I - gamma^-2 P_K D D^T)`, when the argument of the log is positive.
pub fn leqg_cost(model: &PlantModel, p_k: &CostMatrix) -> Option<f64> {
    let g2 = model.gamma() * model.gamma();
    let q = model.q_dim();
    // det(I_n - g^-2 P D D^T) = det(I_q - g^-2 D^T P D)
    let m = symmetrize(&(DMatrix::identity(q, q) - model.d().transpose() * p_k * model.d() / g2));
    if !is_pd(&m) {
        return None;
    }
    Some(-g2 * m.determinant().ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn scalar(a: f64, b: f64, d: f64, gamma: f64) -> PlantModel {
        PlantModel::new(
            dmatrix![a],
            dmatrix![b],
            dmatrix![1.0; 0.0],
            dmatrix![d],
            dmatrix![0.0; 1.0],
            gamma,
            dmatrix![0.0],
        )
        .unwrap()
    }

    #[test]
    fn u_of_p_cases() {
        let m = scalar(1.0, 1.0, 0.0, 2.0);
        assert_eq!(u_of_p(&m, &dmatrix![3.0]).unwrap(), dmatrix![3.0]);
        let m = scalar(1.0, 1.0, 1.0, 2.0);
        assert_eq!(u_of_p(&m, &dmatrix![0.0]).unwrap(), dmatrix![0.0]);
        let u = u_of_p(&m, &dmatrix![1.0]).unwrap();
        assert!((u[(0, 0)] - 4.0 / 3.0).abs() < 1e-15);
        assert!(matches!(u_of_p(&m, &dmatrix![5.0]), Err(Error::RiskInfeasible(_))));
    }

    #[test]
    fn scalar_dare_golden_ratio() {
        let m = scalar(1.0, 1.0, 0.0, 1.0);
        let sol = solve_gare_value_iteration(&m, 1e-14, 10_000).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((sol.p_star[(0, 0)] - phi).abs() < 1e-12);
        assert!((sol.k_star[(0, 0)] - phi / (1.0 + phi)).abs() < 1e-12);
        assert_eq!(sol.l_star[(0, 0)], 0.0);
    }

    #[test]
    fn lqr_gain_ignores_disturbance_channel() {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let k = lqr_gain(&scalar(1.0, 1.0, 1.0, 2.0), 1e-14, 10_000).unwrap();
        assert!((k[(0, 0)] - phi / (1.0 + phi)).abs() < 1e-12);
    }

    #[test]
    fn worst_case_gain_scalar() {
        // a - b k = 0.5 with a = 1, b = 1, k = 0.5
        let m = scalar(1.0, 1.0, 1.0, 2.0);
        let l = worst_case_gain(&m, &GainK::new(dmatrix![0.5]).unwrap(), &dmatrix![1.0]).unwrap();
        assert!((l[(0, 0)] - 1.0 / 6.0).abs() < 1e-15);
        let m0 = scalar(1.0, 1.0, 0.0, 2.0);
        let l0 = worst_case_gain(&m0, &GainK::new(dmatrix![0.5]).unwrap(), &dmatrix![1.0]).unwrap();
        assert_eq!(l0[(0, 0)], 0.0);
    }

    #[test]
    fn evaluate_policy_without_disturbance_is_lyapunov() {
        let m = scalar(1.2, 1.0, 0.0, 1.0);
        let k = GainK::new(dmatrix![0.7]).unwrap();
        let p = evaluate_policy(&m, &k, 1e-14, 1000).unwrap();
        let expect = solve_dlyap(&m.closed_loop(&k), &m.closed_loop_weight(&k)).unwrap();
        assert!((p - expect).norm() < 1e-12);
    }

    #[test]
    fn evaluate_policy_flags_unstable_and_inadmissible() {
        let m = scalar(1.2, 1.0, 1.0, 1.2);
        let err = evaluate_policy(&m, &GainK::new(dmatrix![0.1]).unwrap(), 1e-12, 1000).unwrap_err();
        assert!(matches!(err, Error::UnstableMatrix { .. }));
        // closed loop 0.9, |T| = sqrt(1 + k^2)/(1 - 0.9) far above gamma
        let err = evaluate_policy(&m, &GainK::new(dmatrix![0.3]).unwrap(), 1e-12, 10_000).unwrap_err();
        assert!(matches!(err, Error::NotAdmissible(_)), "{err:?}");
    }

    #[test]
    fn gamma_inf_without_disturbance_hits_floor() {
        let m = scalar(1.2, 1.0, 0.0, 1.0);
        assert_eq!(estimate_gamma_inf(&m, 1e-3).unwrap(), 1e-6);
    }

    #[test]
    fn leqg_cost_is_positive_for_admissible_value() {
        let m = scalar(0.5, 1.0, 1.0, 3.0);
        let c = leqg_cost(&m, &dmatrix![2.0]).unwrap();
        // -9 ln(1 - 2/9)
        assert!((c + 9.0 * (1.0f64 - 2.0 / 9.0).ln()).abs() < 1e-12);
        assert!(leqg_cost(&m, &dmatrix![10.0]).is_none());
    }
}
