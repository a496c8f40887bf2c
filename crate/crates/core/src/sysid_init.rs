//! An initial admissible gain without model knowledge: least-squares
//! identification of `[A, B, D]` from one trajectory, then a bounded-real
//! LMI on the estimates, solved with a small log-det barrier method.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::data_driven::{equilibrated_pinv, simulate, DataBuffer, ExplorationPolicy};
use crate::error::{Error, Result};
use crate::matrix_kit::{max_eigenvalue, sym_len, symmetrize, unvecs};
use crate::plant::{bounded_real_lmi, is_admissible, to_rows, Admissibility, GainK, PlantModel};

/// Default `epsilon` relative to `|[A_hat, B_hat, D_hat]|_F`.
pub const DEFAULT_EPSILON_SCALE: f64 = 1e-3;
pub const DEFAULT_MU: f64 = 1e-2;
/// Halvings of `(epsilon, mu)` tried after the defaults fail.
pub const MAX_RETRIES: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct IdentifiedModel {
    #[serde(rename = "A_hat", serialize_with = "rows")]
    pub a_hat: DMatrix<f64>,
    #[serde(rename = "B_hat", serialize_with = "rows")]
    pub b_hat: DMatrix<f64>,
    #[serde(rename = "D_hat", serialize_with = "rows")]
    pub d_hat: DMatrix<f64>,
    /// `|[A_hat, B_hat, D_hat] - [A, B, D]|_F` when the truth was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_norm: Option<f64>,
}

fn rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&to_rows(m), s)
}

impl IdentifiedModel {
    /// The true matrices, as if identification were exact.
    pub fn exact(model: &PlantModel) -> Self {
        Self {
            a_hat: model.a().clone(),
            b_hat: model.b().clone(),
            d_hat: model.d().clone(),
            residual_norm: Some(0.0),
        }
    }

    /// `[A_hat, B_hat, D_hat]`
    pub fn stacked(&self) -> DMatrix<f64> {
        let n = self.a_hat.nrows();
        let (m, q) = (self.b_hat.ncols(), self.d_hat.ncols());
        let mut out = DMatrix::zeros(n, n + m + q);
        out.view_mut((0, 0), (n, n)).copy_from(&self.a_hat);
        out.view_mut((0, n), (n, m)).copy_from(&self.b_hat);
        out.view_mut((0, n + m), (n, q)).copy_from(&self.d_hat);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrices serialize")
    }

    /// The identified plant with the known output map and `gamma`.
    pub fn to_plant(&self, c: &DMatrix<f64>, e: &DMatrix<f64>, gamma: f64) -> Result<PlantModel> {
        let n = self.a_hat.nrows();
        PlantModel::new(
            self.a_hat.clone(),
            self.b_hat.clone(),
            c.clone(),
            self.d_hat.clone(),
            e.clone(),
            gamma,
            DMatrix::zeros(n, n),
        )
    }
}

/// `[A_hat, B_hat, D_hat]^T = Phi'^+ Xi'` with `Phi' = mean z z^T` and
/// `Xi' = mean z x+^T`.
pub fn identify(buffer: &DataBuffer, truth: Option<&PlantModel>) -> Result<IdentifiedModel> {
    let (n, m, q) = buffer.dims();
    let big_n = n + m + q;
    if buffer.tau() < big_n {
        return Err(Error::InsufficientExcitation(format!(
            "{} samples for {big_n} regressors",
            buffer.tau()
        )));
    }
    let mut phi = DMatrix::zeros(big_n, big_n);
    let mut xi = DMatrix::zeros(big_n, n);
    for s in buffer.samples() {
        phi.ger(1.0, &s.z, &s.z, 1.0);
        xi.ger(1.0, &s.z, &s.x_next, 1.0);
    }
    let scale = 1.0 / buffer.tau() as f64;
    let (inv, rank) = equilibrated_pinv(&(phi * scale))?;
    if rank < big_n {
        return Err(Error::InsufficientExcitation(format!("Phi' has numerical rank {rank} < {big_n}")));
    }
    let theta = (inv * (xi * scale)).transpose();
    let mut idm = IdentifiedModel {
        a_hat: theta.columns(0, n).into_owned(),
        b_hat: theta.columns(n, m).into_owned(),
        d_hat: theta.columns(n + m, q).into_owned(),
        residual_norm: None,
    };
    if let Some(model) = truth {
        idm.residual_norm = Some((idm.stacked() - IdentifiedModel::exact(model).stacked()).norm());
    }
    Ok(idm)
}

#[derive(Debug, Clone)]
pub struct LmiSolution {
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub epsilon: f64,
    pub mu: f64,
    /// `K = V W^{-1}`
    pub k: GainK,
    /// `lambda_max` of the stacked constraint at the returned point (negative).
    pub margin: f64,
}

/// `[[I, mu W, mu V^T], [mu W, I_n, 0], [mu V, 0, I_m]]`; must be positive definite.
pub fn coupling_lmi(w: &DMatrix<f64>, v: &DMatrix<f64>, mu: f64) -> DMatrix<f64> {
    let (n, m) = (w.nrows(), v.nrows());
    let mut out = DMatrix::identity(2 * n + m, 2 * n + m);
    out.view_mut((n, 0), (n, n)).copy_from(&(w * mu));
    out.view_mut((0, n), (n, n)).copy_from(&(w.transpose() * mu));
    out.view_mut((2 * n, 0), (m, n)).copy_from(&(v * mu));
    out.view_mut((0, 2 * n), (n, m)).copy_from(&(v.transpose() * mu));
    out
}

struct LmiProblem<'a> {
    idm: &'a IdentifiedModel,
    c: &'a DMatrix<f64>,
    e: &'a DMatrix<f64>,
    gamma: f64,
    epsilon: f64,
    mu: f64,
}

impl LmiProblem<'_> {
    fn n(&self) -> usize {
        self.idm.a_hat.nrows()
    }
    fn m(&self) -> usize {
        self.idm.b_hat.ncols()
    }
    fn nvars(&self) -> usize {
        sym_len(self.n()) + self.m() * self.n()
    }

    fn unpack(&self, x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let ns = sym_len(self.n());
        let w = unvecs(self.n(), &x.as_slice()[..ns]);
        let v = DMatrix::from_column_slice(self.m(), self.n(), &x.as_slice()[ns..]);
        (w, v)
    }

    /// `blockdiag(F1 + epsilon I, -F2)`, required to be negative definite.
    fn constraint(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (w, v) = self.unpack(x);
        let f1 = bounded_real_lmi(
            &self.idm.a_hat,
            &self.idm.b_hat,
            self.c,
            &self.idm.d_hat,
            self.e,
            self.gamma,
            &w,
            &v,
        );
        let f2 = coupling_lmi(&w, &v, self.mu);
        let (s1, s2) = (f1.nrows(), f2.nrows());
        let mut g = DMatrix::zeros(s1 + s2, s1 + s2);
        g.view_mut((0, 0), (s1, s1))
            .copy_from(&(f1 + DMatrix::identity(s1, s1) * self.epsilon));
        g.view_mut((s1, s1), (s2, s2)).copy_from(&(-f2));
        g
    }
}

/// Barrier method for `min t` s.t. `G(x) - t I < 0`. Returns the minimizer
/// when `lambda_max(G) < 0` there, otherwise the best `t` found.
fn barrier_solve(prob: &LmiProblem) -> std::result::Result<DVector<f64>, f64> {
    let nv = prob.nvars();
    let mut x = DVector::zeros(nv);
    // W = I, V = 0
    for i in 0..prob.n() {
        x[crate::matrix_kit::vecs_index(prob.n(), i, i)] = 1.0;
    }
    let g0 = prob.constraint(&DVector::zeros(nv));
    let basis: Vec<DMatrix<f64>> = (0..nv)
        .map(|k| {
            let mut e = DVector::zeros(nv);
            e[k] = 1.0;
            prob.constraint(&e) - &g0
        })
        .collect();
    let size = g0.nrows();
    let eval = |x: &DVector<f64>| -> DMatrix<f64> {
        let mut g = g0.clone();
        for (k, gk) in basis.iter().enumerate() {
            if x[k] != 0.0 {
                g += gk * x[k];
            }
        }
        g
    };
    let mut lam = max_eigenvalue(&eval(&x));
    let mut t = lam + 1.0;
    let mut best = (lam, x.clone());
    let slack = |x: &DVector<f64>, t: f64| DMatrix::identity(size, size) * t - eval(x);
    let barrier = |s: &DMatrix<f64>| -> Option<f64> {
        let ch = s.clone().cholesky()?;
        Some(-2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    };

    let mut c = 1.0;
    while (size as f64) / c > 1e-10 {
        for _ in 0..100 {
            let s = slack(&x, t);
            let s_inv = match s.clone().cholesky() {
                Some(ch) => ch.inverse(),
                None => break,
            };
            // derivative directions of S: -G_k for x_k, I for t
            let sg: Vec<DMatrix<f64>> = basis.iter().map(|gk| &s_inv * gk).collect();
            let mut grad = DVector::zeros(nv + 1);
            let mut hess = DMatrix::zeros(nv + 1, nv + 1);
            for k in 0..nv {
                grad[k] = sg[k].trace();
                for l in 0..=k {
                    let h = (&sg[k] * &sg[l]).trace();
                    hess[(k, l)] = h;
                    hess[(l, k)] = h;
                }
                let h = -(&sg[k] * &s_inv).trace();
                hess[(k, nv)] = h;
                hess[(nv, k)] = h;
            }
            grad[nv] = c - s_inv.trace();
            hess[(nv, nv)] = (&s_inv * &s_inv).trace();
            let step = match hess.clone().cholesky() {
                Some(ch) => -ch.solve(&grad),
                None => match hess.clone().lu().solve(&(-&grad)) {
                    Some(s) => s,
                    None => break,
                },
            };
            let decrement = -grad.dot(&step);
            if decrement / 2.0 < 1e-9 {
                break;
            }
            let f0 = c * t + barrier(&s).unwrap_or(f64::INFINITY);
            let mut alpha = 1.0;
            let mut moved = false;
            while alpha > 1e-12 {
                let xn = &x + step.rows(0, nv) * alpha;
                let tn = t + step[nv] * alpha;
                if let Some(b) = barrier(&slack(&xn, tn)) {
                    if c * tn + b <= f0 - 0.25 * alpha * decrement {
                        x = xn;
                        t = tn;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            lam = max_eigenvalue(&eval(&x));
            if lam < best.0 {
                best = (lam, x.clone());
            }
            if !moved {
                break;
            }
        }
        c *= 8.0;
    }
    if best.0 < 0.0 {
        Ok(best.1)
    } else {
        Err(best.0)
    }
}

/// Strictly feasible `(W, V)` for the bounded-real LMI on the identified
/// matrices (margin `epsilon`) and the coupling LMI (weight `mu`);
/// `K = V W^{-1}`.
pub fn find_initial_gain(
    idm: &IdentifiedModel,
    c: &DMatrix<f64>,
    e: &DMatrix<f64>,
    gamma: f64,
    epsilon: f64,
    mu: f64,
) -> Result<LmiSolution> {
    if !(epsilon > 0.0 && mu > 0.0 && gamma > 0.0) || !epsilon.is_finite() || !mu.is_finite() {
        return Err(Error::InvalidArgument("epsilon, mu and gamma must be positive".into()));
    }
    let n = idm.a_hat.nrows();
    let (m, p) = (idm.b_hat.ncols(), c.nrows());
    if c.ncols() != n || e.shape() != (p, m) {
        return Err(Error::InvalidArgument("C, E do not match the identified model".into()));
    }
    let prob = LmiProblem {
        idm,
        c,
        e,
        gamma,
        epsilon,
        mu,
    };
    let x = barrier_solve(&prob).map_err(|margin| Error::Infeasible { margin })?;
    let (w, v) = prob.unpack(&x);
    let w = symmetrize(&w);
    let margin = max_eigenvalue(&prob.constraint(&x));
    let w_inv = w
        .clone()
        .cholesky()
        .ok_or(Error::Infeasible { margin })?
        .inverse();
    let k = GainK::new(&v * w_inv)?;
    Ok(LmiSolution {
        w,
        v,
        epsilon,
        mu,
        k,
        margin,
    })
}

/// Retry ladder starting from `(epsilon, mu)` (defaults when `None`).
/// After an infeasible attempt `mu` is halved and `epsilon` drops to the
/// smaller of its half and half the slack the attempt showed to be reachable.
pub fn find_initial_gain_auto(
    idm: &IdentifiedModel,
    c: &DMatrix<f64>,
    e: &DMatrix<f64>,
    gamma: f64,
    epsilon: Option<f64>,
    mu: Option<f64>,
) -> Result<LmiSolution> {
    let mut eps = epsilon.unwrap_or(DEFAULT_EPSILON_SCALE * idm.stacked().norm().max(f64::MIN_POSITIVE));
    let mut mu = mu.unwrap_or(DEFAULT_MU);
    let mut last = Error::Infeasible { margin: f64::INFINITY };
    for _ in 0..=MAX_RETRIES {
        match find_initial_gain(idm, c, e, gamma, eps, mu) {
            Ok(sol) => return Ok(sol),
            Err(Error::Infeasible { margin }) => {
                last = Error::Infeasible { margin };
                // `margin - eps` is the best lambda_max reached without the
                // epsilon shift; when negative, aim halfway to it.
                let reachable = eps - margin;
                eps = if reachable > 0.0 { (0.5 * eps).min(0.5 * reachable) } else { 0.5 * eps };
            }
            Err(err) => return Err(err),
        }
        mu *= 0.5;
    }
    Err(last)
}

/// The LMI gain computed on the true matrices of `model`.
pub fn lmi_gain(model: &PlantModel) -> Result<GainK> {
    let sol = find_initial_gain_auto(&IdentifiedModel::exact(model), model.c(), model.e(), model.gamma(), None, None)?;
    Ok(sol.k)
}

#[derive(Debug, Clone)]
pub struct InitialController {
    pub k: GainK,
    pub identified: IdentifiedModel,
    pub lmi: LmiSolution,
    /// Check against the true model; evaluation only.
    pub admissibility: Admissibility,
}

/// simulate -> identify -> LMI (with the retry ladder) -> verify.
/// Failures carry the stage name.
pub fn learn_initial_controller<R: Rng + ?Sized>(
    model: &PlantModel,
    policy: &ExplorationPolicy,
    tau: usize,
    epsilon: Option<f64>,
    mu: Option<f64>,
    rng: &mut R,
) -> Result<InitialController> {
    let buffer = simulate(model, policy, tau, rng).map_err(|e| e.at_stage("simulate"))?;
    let identified = identify(&buffer, Some(model)).map_err(|e| e.at_stage("identify"))?;
    let lmi = find_initial_gain_auto(&identified, model.c(), model.e(), model.gamma(), epsilon, mu)
    .map_err(|e| e.at_stage("lmi"))?;
    let admissibility = is_admissible(model, &lmi.k).map_err(|e| e.at_stage("verify"))?;
    if !admissibility.admissible {
        return Err(Error::NotAdmissible(format!(
            "learned gain fails on the true plant ({:?})",
            admissibility.reason
        ))
        .at_stage("verify"));
    }
    Ok(InitialController {
        k: lmi.k.clone(),
        identified,
        lmi,
        admissibility,
    })
}
