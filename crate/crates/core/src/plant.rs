//! Plant and cost model, the admissible gain set, and H-infinity norms of the
//! closed-loop disturbance channel `w -> y`.

use std::ops::Deref;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_kit::{
    is_pd, max_eigenvalue, solve_dlyap, spectral_radius, symmetrize, symmetrize_checked,
    CostMatrix, STABILITY_MARGIN,
};

/// Number of frequency samples on `[0, pi]` used to bracket the H-infinity norm.
/// Conjugate symmetry makes this equivalent to the same density over `[0, 2 pi]`.
pub const HINF_GRID_POINTS: usize = 4096;

/// Relative width of the final bisection bracket.
const HINF_BISECTION_RTOL: f64 = 1e-9;

/// Iteration cap of the bounded-real Riccati test.
const RICCATI_TEST_MAX_ITER: usize = 400;

/// Linear plant `x+ = A x + B u + D w (+ v)`, `y = C x + E u`, with risk
/// parameter `gamma` and process-noise covariance `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlantJson", into = "PlantJson")]
pub struct PlantModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    e: DMatrix<f64>,
    gamma: f64,
    sigma: DMatrix<f64>,
}

impl PlantModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
        gamma: f64,
        sigma: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let dim_err = |what: &str| Err(Error::InvalidArgument(format!("plant dimensions: {what}")));
        if n == 0 || !a.is_square() {
            return dim_err("A must be square and nonempty");
        }
        if b.nrows() != n || b.ncols() == 0 {
            return dim_err("B must have n rows and at least one column");
        }
        if c.ncols() != n || c.nrows() == 0 {
            return dim_err("C must have n columns");
        }
        if d.nrows() != n || d.ncols() == 0 {
            return dim_err("D must have n rows and at least one column");
        }
        if e.shape() != (c.nrows(), b.ncols()) {
            return dim_err("E must be p x m");
        }
        if sigma.shape() != (n, n) {
            return dim_err("sigma must be n x n");
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        for (name, m) in [("A", &a), ("B", &b), ("C", &c), ("D", &d), ("E", &e), ("sigma", &sigma)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} has non-finite entries")));
            }
        }
        let sigma = symmetrize_checked(&sigma)?;
        if !crate::matrix_kit::is_psd(&sigma, 1e-12 * sigma.norm().max(1.0)) {
            return Err(Error::InvalidArgument("sigma must be positive semidefinite".into()));
        }
        Ok(Self {
            a,
            b,
            c,
            d,
            e,
            gamma,
            sigma,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// State weight `C^T C`.
    pub fn q(&self) -> DMatrix<f64> {
        symmetrize(&(self.c.transpose() * &self.c))
    }

    /// Input weight `E^T E`.
    pub fn r(&self) -> DMatrix<f64> {
        symmetrize(&(self.e.transpose() * &self.e))
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
    /// Disturbance dimension.
    pub fn q_dim(&self) -> usize {
        self.d.ncols()
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut out = self.clone();
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        out.gamma = gamma;
        Ok(out)
    }

    pub fn with_sigma(&self, sigma: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.c.clone(),
            self.d.clone(),
            self.e.clone(),
            self.gamma,
            sigma,
        )
    }

    /// `A - B K`.
    pub fn closed_loop(&self, k: &GainK) -> DMatrix<f64> {
        &self.a - &self.b * &k.0
    }

    /// `Q + K^T R K`.
    pub fn closed_loop_weight(&self, k: &GainK) -> DMatrix<f64> {
        symmetrize(&(self.q() + k.0.transpose() * self.r() * &k.0))
    }

    pub fn check_gain_k(&self, k: &GainK) -> Result<()> {
        if k.0.shape() != (self.m(), self.n()) {
            return Err(Error::InvalidArgument(format!(
                "K must be {}x{}, got {}x{}",
                self.m(),
                self.n(),
                k.0.nrows(),
                k.0.ncols()
            )));
        }
        Ok(())
    }

    pub fn check_gain_l(&self, l: &GainL) -> Result<()> {
        if l.0.shape() != (self.q_dim(), self.n()) {
            return Err(Error::InvalidArgument(format!(
                "L must be {}x{}, got {}x{}",
                self.q_dim(),
                self.n(),
                l.0.nrows(),
                l.0.ncols()
            )));
        }
        Ok(())
    }
}

/// JSON payload: row-major nested arrays.
#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlantJson {
    A: Vec<Vec<f64>>,
    B: Vec<Vec<f64>>,
    C: Vec<Vec<f64>>,
    D: Vec<Vec<f64>>,
    E: Vec<Vec<f64>>,
    gamma: f64,
    sigma: Vec<Vec<f64>>,
}

impl TryFrom<PlantJson> for PlantModel {
    type Error = Error;

    fn try_from(j: PlantJson) -> Result<Self> {
        PlantModel::new(
            from_rows(&j.A, "A")?,
            from_rows(&j.B, "B")?,
            from_rows(&j.C, "C")?,
            from_rows(&j.D, "D")?,
            from_rows(&j.E, "E")?,
            j.gamma,
            from_rows(&j.sigma, "sigma")?,
        )
    }
}

impl From<PlantModel> for PlantJson {
    fn from(m: PlantModel) -> Self {
        PlantJson {
            A: to_rows(&m.a),
            B: to_rows(&m.b),
            C: to_rows(&m.c),
            D: to_rows(&m.d),
            E: to_rows(&m.e),
            gamma: m.gamma,
            sigma: to_rows(&m.sigma),
        }
    }
}

/// Row-major nested arrays to a matrix; all rows must share one length.
pub fn from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::InvalidArgument(format!("{name} is empty")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument(format!("{name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

macro_rules! gain_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(DMatrix<f64>);

        impl $name {
            pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
                if matrix.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(concat!(stringify!($name), " has non-finite entries").into()));
                }
                Ok(Self(matrix))
            }

            pub fn zeros(rows: usize, cols: usize) -> Self {
                Self(DMatrix::zeros(rows, cols))
            }

            pub fn matrix(&self) -> &DMatrix<f64> {
                &self.0
            }

            pub fn into_inner(self) -> DMatrix<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = DMatrix<f64>;
            fn deref(&self) -> &DMatrix<f64> {
                &self.0
            }
        }
    };
}

gain_newtype!(
    /// Minimizer feedback gain, `u = -K x` (`m x n`).
    GainK
);
gain_newtype!(
    /// Maximizer (adversary) feedback gain, `w = L x` (`q x n`).
    GainL
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AssumptionReport {
    pub q_positive_definite: bool,
    pub r_positive_definite: bool,
    pub cross_term_zero: bool,
    pub stabilizable: bool,
}

impl AssumptionReport {
    pub fn all_hold(&self) -> bool {
        self.q_positive_definite && self.r_positive_definite && self.cross_term_zero && self.stabilizable
    }
}

pub fn check_assumptions(model: &PlantModel) -> AssumptionReport {
    let cross = model.c.transpose() * &model.e;
    AssumptionReport {
        q_positive_definite: is_pd(&model.q()),
        r_positive_definite: is_pd(&model.r()),
        cross_term_zero: cross.norm() <= 1e-12 * (model.c.norm() * model.e.norm()).max(1.0),
        stabilizable: is_stabilizable(&model.a, &model.b),
    }
}

/// PBH test: `rank [lambda I - A, B] = n` for every eigenvalue with `|lambda| >= 1`.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let Some(schur) = a.clone().try_schur(f64::EPSILON, 10_000) else {
        return false;
    };
    let scale = a.norm().max(b.norm()).max(1.0);
    schur
        .complex_eigenvalues()
        .iter()
        .filter(|lam| lam.norm() >= 1.0 - STABILITY_MARGIN)
        .all(|&lam| {
            let mut pbh = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
            for i in 0..n {
                for j in 0..n {
                    let diag = if i == j { lam } else { Complex::new(0.0, 0.0) };
                    pbh[(i, j)] = diag - Complex::new(a[(i, j)], 0.0);
                }
                for j in 0..b.ncols() {
                    pbh[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
                }
            }
            let sv = pbh.singular_values();
            sv.iter().filter(|s| **s > 1e-8 * scale).count() == n
        })
}

/// Largest singular value of `C_K (e^{jw} I - A_K)^{-1} D` over `points`
/// frequencies evenly spaced on `[0, pi]`.
pub fn hinf_norm_grid(model: &PlantModel, k: &GainK, points: usize) -> Result<f64> {
    model.check_gain_k(k)?;
    let a_k = model.closed_loop(k);
    let rho = spectral_radius(&a_k)?;
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(Error::UnstableMatrix { spectral_radius: rho });
    }
    let c_k = model.c() - model.e() * k.matrix();
    Ok(grid_peak(&a_k, &c_k, model.d(), points.max(2)).1)
}

/// Returns `(argmax frequency, peak gain)`.
fn grid_peak(a_k: &DMatrix<f64>, c_k: &DMatrix<f64>, d: &DMatrix<f64>, points: usize) -> (f64, f64) {
    let n = a_k.nrows();
    let cplx = |m: &DMatrix<f64>| m.map(|v| Complex::new(v, 0.0));
    let a_c = cplx(a_k);
    let c_c = cplx(c_k);
    let d_c = cplx(d);
    let mut best = (0.0, 0.0);
    for idx in 0..points {
        let w = std::f64::consts::PI * idx as f64 / (points - 1) as f64;
        let z = Complex::new(w.cos(), w.sin());
        let mut zi_a = -a_c.clone();
        for i in 0..n {
            zi_a[(i, i)] += z;
        }
        let Some(x) = zi_a.lu().solve(&d_c) else {
            // eigenvalue on the unit circle; excluded by the stability check
            continue;
        };
        let g = &c_c * x;
        let s = g.singular_values().iter().copied().fold(0.0, f64::max);
        if s > best.1 {
            best = (w, s);
        }
    }
    best
}

/// Bounded-real Riccati test at level `level`: does
/// `P = C_K^T C_K + A_K^T U(P) A_K` admit a stabilizing solution with
/// `level^2 I - D^T P D > 0`? Decided by maximizer policy iteration from
/// `L = 0`; any loss of definiteness, loss of stability of `A_K + D L`, or
/// failure to settle is reported as infeasible. Returns the solution when feasible.
pub fn bounded_real_riccati(
    a_k: &DMatrix<f64>,
    q_k: &DMatrix<f64>,
    d: &DMatrix<f64>,
    level: f64,
) -> Option<CostMatrix> {
    let g2 = level * level;
    let qd = d.ncols();
    let mut p = solve_dlyap(a_k, q_k).ok()?;
    for _ in 0..RICCATI_TEST_MAX_ITER {
        let m = DMatrix::identity(qd, qd) * g2 - d.transpose() * &p * d;
        if !is_pd(&m) {
            return None;
        }
        let l = m.cholesky()?.solve(&(d.transpose() * &p * a_k));
        let a_l = a_k + d * &l;
        let p_next = solve_dlyap(&a_l, &(q_k - l.transpose() * &l * g2)).ok()?;
        if !p_next.iter().all(|v| v.is_finite()) || p_next.norm() > 1e12 * q_k.norm().max(1.0) {
            return None;
        }
        let change = (&p_next - &p).norm();
        p = p_next;
        if change <= 1e-13 * p.norm().max(f64::MIN_POSITIVE) {
            let m = DMatrix::identity(qd, qd) * g2 - d.transpose() * &p * d;
            if !is_pd(&m) {
                return None;
            }
            let l = m.cholesky()?.solve(&(d.transpose() * &p * a_k));
            let rho = spectral_radius(&(a_k + d * l)).ok()?;
            return (rho < 1.0 - STABILITY_MARGIN).then_some(p);
        }
    }
    None
}

/// `|T(K)|_Hinf` for `T(K) = (C - E K)(z I - (A - B K))^{-1} D`.
///
/// A frequency grid gives a guaranteed lower bound; bisection on the
/// bounded-real Riccati test then closes the bracket to a relative width of
/// 1e-9. The returned value is the upper end of the bracket.
pub fn hinf_norm(model: &PlantModel, k: &GainK) -> Result<f64> {
    model.check_gain_k(k)?;
    let a_k = model.closed_loop(k);
    let rho = spectral_radius(&a_k)?;
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(Error::UnstableMatrix { spectral_radius: rho });
    }
    let c_k = model.c() - model.e() * k.matrix();
    let d = model.d();
    if d.norm() == 0.0 || c_k.norm() == 0.0 {
        return Ok(0.0);
    }
    let q_k = symmetrize(&(c_k.transpose() * &c_k));
    let (_, grid) = grid_peak(&a_k, &c_k, d, HINF_GRID_POINTS);
    if grid == 0.0 {
        return Ok(0.0);
    }
    let feasible = |level: f64| bounded_real_riccati(&a_k, &q_k, d, level).is_some();

    let mut lo = grid;
    let mut hi = 2.0 * grid;
    let mut doublings = 0;
    while !feasible(hi) {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::Numerical(
                "H-infinity bisection found no feasible upper bracket".into(),
            ));
        }
    }
    while hi - lo > HINF_BISECTION_RTOL * hi {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InadmissibleReason {
    /// `rho(A - B K) >= 1`.
    Unstable,
    /// `|T(K)|_Hinf >= gamma`.
    Hinf,
}

#[derive(Debug, Clone)]
pub struct Admissibility {
    pub admissible: bool,
    pub reason: Option<InadmissibleReason>,
    pub spectral_radius: f64,
    pub hinf: Option<f64>,
    /// Stabilizing Riccati solution `P_K` at the model's `gamma`, when admissible.
    pub certificate: Option<CostMatrix>,
}

/// Membership in `{K : rho(A - BK) < 1, |T(K)|_Hinf < gamma}`. The boundary
/// `|T(K)|_Hinf = gamma` counts as inadmissible.
pub fn is_admissible(model: &PlantModel, k: &GainK) -> Result<Admissibility> {
    model.check_gain_k(k)?;
    let a_k = model.closed_loop(k);
    let rho = spectral_radius(&a_k)?;
    if rho >= 1.0 - STABILITY_MARGIN {
        return Ok(Admissibility {
            admissible: false,
            reason: Some(InadmissibleReason::Unstable),
            spectral_radius: rho,
            hinf: None,
            certificate: None,
        });
    }
    let hinf = hinf_norm(model, k)?;
    let c_k = model.c() - model.e() * k.matrix();
    let q_k = symmetrize(&(c_k.transpose() * &c_k));
    let certificate = if hinf < model.gamma() {
        bounded_real_riccati(&a_k, &q_k, model.d(), model.gamma())
    } else {
        None
    };
    let admissible = certificate.is_some();
    Ok(Admissibility {
        admissible,
        reason: (!admissible).then_some(InadmissibleReason::Hinf),
        spectral_radius: rho,
        hinf: Some(hinf),
        certificate,
    })
}

/// The four-block bounded-real LMI
///
/// ```text
/// [ -W            *        *    *   ]
/// [  0       -g^2 I_q      *    *   ]
/// [ A W - B V     D       -W    *   ]
/// [ C W - E V     0        0  -I_p  ]
/// ```
#[allow(clippy::too_many_arguments)]
pub fn bounded_real_lmi(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    e: &DMatrix<f64>,
    gamma: f64,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = a.nrows();
    let q = d.ncols();
    let p = c.nrows();
    let size = 2 * n + q + p;
    let mut out = DMatrix::zeros(size, size);
    let (o1, o2, o3) = (n, n + q, 2 * n + q);
    out.view_mut((0, 0), (n, n)).copy_from(&(-w));
    out.view_mut((o1, o1), (q, q))
        .copy_from(&(DMatrix::identity(q, q) * -(gamma * gamma)));
    let awbv = a * w - b * v;
    out.view_mut((o2, 0), (n, n)).copy_from(&awbv);
    out.view_mut((0, o2), (n, n)).copy_from(&awbv.transpose());
    out.view_mut((o2, o1), (n, q)).copy_from(d);
    out.view_mut((o1, o2), (q, n)).copy_from(&d.transpose());
    out.view_mut((o2, o2), (n, n)).copy_from(&(-w));
    let cwev = c * w - e * v;
    out.view_mut((o3, 0), (p, n)).copy_from(&cwev);
    out.view_mut((0, o3), (n, p)).copy_from(&cwev.transpose());
    out.view_mut((o3, o3), (p, p))
        .copy_from(&(-DMatrix::identity(p, p)));
    out
}

/// `W > 0` and the bounded-real LMI is negative definite (`lambda_max < -1e-9`).
pub fn lmi_admissibility_check(model: &PlantModel, w: &DMatrix<f64>, v: &DMatrix<f64>) -> bool {
    let n = model.n();
    if w.shape() != (n, n) || v.shape() != (model.m(), n) {
        return false;
    }
    let Ok(w) = symmetrize_checked(w) else {
        return false;
    };
    if !is_pd(&w) {
        return false;
    }
    let lmi = bounded_real_lmi(model.a(), model.b(), model.c(), model.d(), model.e(), model.gamma(), &w, v);
    max_eigenvalue(&lmi) < -1e-9
}
