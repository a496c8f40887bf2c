//! Learning the game solution from one trajectory of the noisy plant.
//!
//! A fixed exploratory policy generates the data. Sample averages over the
//! lifted regressor `zbar = [vecv(z); 1]`, with `z = [x; u; w]`, give a
//! least-squares estimate of the affine map `X -> Gamma(X)`, the quadratic
//! kernel of the one-step cost-to-go. Every update of the dual loop is then
//! expressed through that map, so `A`, `B` and `D` are never needed.

use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dual_loop::{rel_err, IterationTrace, OuterRecord};
use crate::error::{Error, Result};
use crate::game_oracle::{lqr_gain, GameSolution, ORACLE_MAX_ITER, ORACLE_TOL};
use crate::matrix_kit::{
    duplication, is_pd, pinv, psd_sqrt, spectral_radius, sym_len, symmetrize, unvecs, vecs, vecv, CostMatrix,
    STABILITY_MARGIN,
};
use crate::plant::{hinf_norm, GainK, GainL, PlantModel};

/// Samples dropped at the start of every trajectory.
pub const BURN_IN: usize = 200;
/// Relative singular-value cutoff for the pseudo-inverse of `Phi` (applied
/// after scaling `Phi` to unit diagonal).
pub const PINV_CUTOFF: f64 = 1e-10;
/// `|x_t|` beyond which exploration is declared unstable.
pub const BLOW_UP: f64 = 1e9;

/// `u = -K_exp x + sigma1 xi1`, `w = L_exp x + sigma2 xi2`.
#[derive(Debug, Clone)]
pub struct ExplorationPolicy {
    pub k_exp: GainK,
    pub l_exp: GainL,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl ExplorationPolicy {
    pub fn new(k_exp: GainK, l_exp: GainL, sigma1: f64, sigma2: f64) -> Result<Self> {
        for (name, s) in [("sigma1", sigma1), ("sigma2", sigma2)] {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {s}")));
            }
        }
        Ok(Self {
            k_exp,
            l_exp,
            sigma1,
            sigma2,
        })
    }

    /// LQR gain of the nominal plant for `K_exp`, `L_exp = 0`.
    pub fn lqr(model: &PlantModel, sigma1: f64, sigma2: f64) -> Result<Self> {
        let k = lqr_gain(model, ORACLE_TOL, ORACLE_MAX_ITER)?;
        Self::new(k, GainL::zeros(model.q_dim(), model.n()), sigma1, sigma2)
    }

    /// Closed loop `A - B K_exp + D L_exp` must be Schur stable.
    pub fn check_against(&self, model: &PlantModel) -> Result<()> {
        model.check_gain_k(&self.k_exp)?;
        model.check_gain_l(&self.l_exp)?;
        let a = model.closed_loop(&self.k_exp) + model.d() * self.l_exp.matrix();
        let rho = spectral_radius(&a)?;
        if rho >= 1.0 - STABILITY_MARGIN {
            return Err(Error::InvalidArgument(format!(
                "exploration closed loop is unstable (rho = {rho})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[x; u; w]`
    pub z: DVector<f64>,
    pub x_next: DVector<f64>,
    pub r: f64,
}

/// One recorded trajectory. Immutable once collected.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBuffer {
    n: usize,
    m: usize,
    q: usize,
    samples: Vec<Sample>,
}

impl DataBuffer {
    pub fn new(n: usize, m: usize, q: usize, samples: Vec<Sample>) -> Result<Self> {
        for (t, s) in samples.iter().enumerate() {
            if s.z.len() != n + m + q || s.x_next.len() != n {
                return Err(Error::InvalidArgument(format!("sample {t} has the wrong layout")));
            }
        }
        Ok(Self { n, m, q, samples })
    }

    pub fn tau(&self) -> usize {
        self.samples.len()
    }

    /// `(n, m, q)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.q)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Hash of the raw bit patterns, to check that nothing mutates the data.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (self.n, self.m, self.q).hash(&mut h);
        for s in &self.samples {
            for v in s.z.iter().chain(s.x_next.iter()).chain(std::iter::once(&s.r)) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn header(&self) -> Vec<String> {
        let mut cols = vec!["t".to_string()];
        for (prefix, len) in [("x", self.n), ("u", self.m), ("w", self.q), ("x_next", self.n)] {
            cols.extend((0..len).map(|i| format!("{prefix}{i}")));
        }
        cols.push("r".into());
        cols
    }

    /// Columns `t, x0.., u0.., w0.., x_next0.., r`; floats in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.to_string());
        wr.write_record(self.header()).map_err(io)?;
        for (t, s) in self.samples.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(s.z.iter().chain(s.x_next.iter()).map(|v| v.to_string()));
            row.push(s.r.to_string());
            wr.write_record(&row).map_err(io)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let header = rd.headers().map_err(|e| Error::Io(e.to_string()))?.clone();
        let count = |prefix: &str| {
            header
                .iter()
                .filter(|h| h.strip_prefix(prefix).is_some_and(|rest| rest.parse::<usize>().is_ok()))
                .count()
        };
        let (n, m, q) = (count("x"), count("u"), count("w"));
        if n == 0 || count("x_next") != n || header.len() != 2 * n + m + q + 2 {
            return Err(Error::Config("data CSV header does not match t,x..,u..,w..,x_next..,r".into()));
        }
        let mut samples = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| Error::Io(e.to_string()))?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("data CSV row {}: {e}", line + 1)))?;
            if vals.len() != 2 * n + m + q + 1 {
                return Err(Error::Config(format!("data CSV row {} has {} values", line + 1, vals.len())));
            }
            let nz = n + m + q;
            samples.push(Sample {
                z: DVector::from_column_slice(&vals[..nz]),
                x_next: DVector::from_column_slice(&vals[nz..nz + n]),
                r: vals[nz + n],
            });
        }
        Self::new(n, m, q, samples)
    }
}

/// Optional overrides for [`simulate_with`].
#[derive(Debug, Clone)]
pub struct SimulationOptions {
    pub burn_in: usize,
    /// Initial state; drawn from `N(0, I)` when `None`.
    pub x0: Option<DVector<f64>>,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self { burn_in: BURN_IN, x0: None }
    }
}

/// Runs the exploratory policy on `x+ = Ax + Bu + Dw + v`, `v ~ N(0, Sigma)`,
/// and records `tau` samples after the default burn-in.
pub fn simulate<R: Rng + ?Sized>(
    model: &PlantModel,
    policy: &ExplorationPolicy,
    tau: usize,
    rng: &mut R,
) -> Result<DataBuffer> {
    simulate_with(model, policy, tau, &SimulationOptions::default(), rng)
}

pub fn simulate_with<R: Rng + ?Sized>(
    model: &PlantModel,
    policy: &ExplorationPolicy,
    tau: usize,
    opts: &SimulationOptions,
    rng: &mut R,
) -> Result<DataBuffer> {
    if tau == 0 {
        return Err(Error::InvalidArgument("tau must be >= 1".into()));
    }
    model.check_gain_k(&policy.k_exp)?;
    model.check_gain_l(&policy.l_exp)?;
    let (n, m, q) = (model.n(), model.m(), model.q_dim());
    let (qw, rw) = (model.q(), model.r());
    let g2 = model.gamma() * model.gamma();
    let noise_factor = psd_sqrt(model.sigma());
    let mut gauss = |len: usize| DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));

    let mut x = match &opts.x0 {
        Some(x0) if x0.len() == n => x0.clone(),
        Some(x0) => {
            return Err(Error::InvalidArgument(format!("x0 has length {}, expected {n}", x0.len())));
        }
        None => gauss(n),
    };
    let mut samples = Vec::with_capacity(tau);
    for step in 0..opts.burn_in + tau {
        let u = -(policy.k_exp.matrix() * &x) + gauss(m) * policy.sigma1;
        let w = policy.l_exp.matrix() * &x + gauss(q) * policy.sigma2;
        let v = &noise_factor * gauss(n);
        let x_next = model.a() * &x + model.b() * &u + model.d() * &w + v;
        let norm = x_next.norm();
        if !norm.is_finite() || norm > BLOW_UP {
            return Err(Error::UnstableExploration { step, norm });
        }
        if step >= opts.burn_in {
            let r = (x.transpose() * &qw * &x)[(0, 0)] + (u.transpose() * &rw * &u)[(0, 0)] - g2 * w.norm_squared();
            let mut z = DVector::zeros(n + m + q);
            z.rows_mut(0, n).copy_from(&x);
            z.rows_mut(n, m).copy_from(&u);
            z.rows_mut(n + m, q).copy_from(&w);
            samples.push(Sample {
                z,
                x_next: x_next.clone(),
                r,
            });
        }
        x = x_next;
    }
    DataBuffer::new(n, m, q, samples)
}

/// Sample second moments of the lifted regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedOperators {
    n: usize,
    m: usize,
    q: usize,
    /// `(1/tau) sum zbar zbar^T`
    pub phi: DMatrix<f64>,
    /// `(1/tau) sum zbar vecv(x+)^T`
    pub xi: DMatrix<f64>,
    /// `(1/tau) sum zbar r`
    pub psi: DVector<f64>,
}

/// `(n2, n1)`: `n2 = N(N+1)/2` with `N = n+m+q`, and `n1 = n2 + 1 - q(q+1)/2`
/// (1-based start of the `ww` rows).
pub fn lifted_sizes(n: usize, m: usize, q: usize) -> (usize, usize) {
    let n2 = sym_len(n + m + q);
    (n2, n2 + 1 - sym_len(q))
}

pub fn build_operators(buffer: &DataBuffer) -> Result<EstimatedOperators> {
    if buffer.tau() == 0 {
        return Err(Error::InvalidArgument("empty data buffer".into()));
    }
    let (n, m, q) = buffer.dims();
    let (n2, _) = lifted_sizes(n, m, q);
    let mut phi = DMatrix::zeros(n2 + 1, n2 + 1);
    let mut xi = DMatrix::zeros(n2 + 1, sym_len(n));
    let mut psi = DVector::zeros(n2 + 1);
    let mut zbar = DVector::zeros(n2 + 1);
    zbar[n2] = 1.0;
    for s in buffer.samples() {
        zbar.rows_mut(0, n2).copy_from(&vecv(&s.z));
        let xv = vecv(&s.x_next);
        phi.ger(1.0, &zbar, &zbar, 1.0);
        xi.ger(1.0, &zbar, &xv, 1.0);
        psi.axpy(s.r, &zbar, 1.0);
    }
    let scale = 1.0 / buffer.tau() as f64;
    Ok(EstimatedOperators {
        n,
        m,
        q,
        phi: phi * scale,
        xi: xi * scale,
        psi: psi * scale,
    })
}

impl EstimatedOperators {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.q)
    }

    /// Pseudo-inverse of `Phi` after scaling it to unit diagonal; the rank
    /// cutoff applies to the scaled matrix.
    fn phi_pinv(&self) -> Result<DMatrix<f64>> {
        let (inv, rank) = equilibrated_pinv(&self.phi)?;
        if rank < self.phi.nrows() {
            return Err(Error::InsufficientExcitation(format!(
                "Phi has numerical rank {rank} < {}",
                self.phi.nrows()
            )));
        }
        Ok(inv)
    }

    /// The affine map `vecs X -> [Phi^+]_{1..n2} (Xi vecs X + Psi)`.
    pub fn gamma_map(&self) -> Result<GammaMap> {
        let (n2, _) = lifted_sizes(self.n, self.m, self.q);
        let inv = self.phi_pinv()?;
        let top = inv.rows(0, n2);
        Ok(GammaMap {
            n: self.n,
            m: self.m,
            q: self.q,
            lin: top * &self.xi,
            offset: top * &self.psi,
        })
    }

    /// `Gamma_ww(X)` rebuilt from rows `n1..n2` of `Phi^+` only.
    pub fn gamma_ww_hat(&self, x: &CostMatrix) -> Result<CostMatrix> {
        let (n2, n1) = lifted_sizes(self.n, self.m, self.q);
        let inv = self.phi_pinv()?;
        let rows = inv.rows(n1 - 1, n2 + 1 - n1);
        let v = rows * (&self.xi * vecs(x)?.into_entries() + &self.psi);
        Ok(unvecs(self.q, v.as_slice()))
    }
}

/// `pinv(S^-1 M S^-1)` rescaled back, with `S = diag(sqrt(M_ii))`.
pub(crate) fn equilibrated_pinv(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let scale = m.diagonal().map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 });
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * scale[i] * scale[j]);
    let (inv, rank) = pinv(&scaled, PINV_CUTOFF)?;
    let back = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| inv[(i, j)] * scale[i] * scale[j]);
    Ok((back, rank))
}

/// Affine map `X -> Gamma(X)` in `vecs` coordinates, estimated from data or
/// built exactly from a model. `Gamma(X)` has the blocks
/// `[A B D]^T X [A B D] + blockdiag(Q, R, -gamma^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMap {
    n: usize,
    m: usize,
    q: usize,
    /// `n2 x n(n+1)/2`
    pub lin: DMatrix<f64>,
    /// length `n2`
    pub offset: DVector<f64>,
}

impl GammaMap {
    /// The noise-free map evaluated directly from the model.
    pub fn from_model(model: &PlantModel) -> Self {
        let (n, m, q) = (model.n(), model.m(), model.q_dim());
        let big_n = n + m + q;
        let mut abd = DMatrix::zeros(n, big_n);
        abd.view_mut((0, 0), (n, n)).copy_from(model.a());
        abd.view_mut((0, n), (n, m)).copy_from(model.b());
        abd.view_mut((0, n + m), (n, q)).copy_from(model.d());
        let ns = sym_len(n);
        let mut lin = DMatrix::zeros(sym_len(big_n), ns);
        let mut basis = vec![0.0; ns];
        for k in 0..ns {
            basis[k] = 1.0;
            let e = unvecs(n, &basis);
            basis[k] = 0.0;
            let img = symmetrize(&(abd.transpose() * e * &abd));
            lin.set_column(k, vecs(&img).expect("symmetric").entries());
        }
        let mut base = DMatrix::zeros(big_n, big_n);
        base.view_mut((0, 0), (n, n)).copy_from(&model.q());
        base.view_mut((n, n), (m, m)).copy_from(&model.r());
        base.view_mut((n + m, n + m), (q, q))
            .copy_from(&(DMatrix::identity(q, q) * -(model.gamma() * model.gamma())));
        let offset = vecs(&base).expect("symmetric").into_entries();
        Self { n, m, q, lin, offset }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.q)
    }

    fn check_square(&self, x: &DMatrix<f64>, dim: usize, name: &str) -> Result<()> {
        if x.shape() != (dim, dim) {
            return Err(Error::InvalidArgument(format!(
                "{name} is {:?}, expected {dim}x{dim}",
                x.shape()
            )));
        }
        Ok(())
    }
}

struct Blocks {
    xu: DMatrix<f64>,
    xw: DMatrix<f64>,
    uu: DMatrix<f64>,
    uw: DMatrix<f64>,
    ww: DMatrix<f64>,
}

fn blocks(map: &GammaMap, g: &DMatrix<f64>) -> Blocks {
    let (n, m, q) = map.dims();
    Blocks {
        xu: g.view((0, n), (n, m)).into_owned(),
        xw: g.view((0, n + m), (n, q)).into_owned(),
        uu: g.view((n, n), (m, m)).into_owned(),
        uw: g.view((n, n + m), (m, q)).into_owned(),
        ww: g.view((n + m, n + m), (q, q)).into_owned(),
    }
}

/// `Gamma(X)` as an `(n+m+q)`-square symmetric matrix.
pub fn gamma_hat(map: &GammaMap, x: &CostMatrix) -> Result<CostMatrix> {
    map.check_square(x, map.n, "X")?;
    let v = &map.lin * vecs(&symmetrize(x))?.into_entries() + &map.offset;
    Ok(unvecs(map.n + map.m + map.q, v.as_slice()))
}

/// `Omega(Y) = D Y D^T`, recovered as the adjoint of `X -> D^T X D` under
/// the Frobenius inner product.
pub fn omega_hat(map: &GammaMap, y: &CostMatrix) -> Result<CostMatrix> {
    map.check_square(y, map.q, "Y")?;
    let (n2, n1) = lifted_sizes(map.n, map.m, map.q);
    let g = map.lin.rows(n1 - 1, n2 + 1 - n1);
    let gram_q = duplication(map.q).gram_diagonal();
    let gram_n = duplication(map.n).gram_diagonal();
    let weighted = vecs(&symmetrize(y))?.into_entries().component_mul(&gram_q);
    let v = (g.transpose() * weighted).component_div(&gram_n);
    Ok(unvecs(map.n, v.as_slice()))
}

/// `P` from `M Gamma(P) M^T = P` with `M = [I, -K^T, L^T]`, solved in the
/// least-squares sense. Returns `P` and the relative residual.
pub fn solve_p_data(map: &GammaMap, k: &GainK, l: &GainL) -> Result<(CostMatrix, f64)> {
    let (n, m, q) = map.dims();
    if k.shape() != (m, n) || l.shape() != (q, n) {
        return Err(Error::InvalidArgument("gain dimensions do not match the data".into()));
    }
    let big_n = n + m + q;
    let mut mm = DMatrix::zeros(n, big_n);
    mm.view_mut((0, 0), (n, n)).fill_with_identity();
    mm.view_mut((0, n), (n, m)).copy_from(&(-k.matrix().transpose()));
    mm.view_mut((0, n + m), (n, q)).copy_from(&l.matrix().transpose());

    // H = (M (x) M) T_N, built column by column as vec(M E_k M^T).
    let n2 = sym_len(big_n);
    let mut h = DMatrix::zeros(n * n, n2);
    let mut basis = vec![0.0; n2];
    for c in 0..n2 {
        basis[c] = 1.0;
        let img = &mm * unvecs(big_n, &basis) * mm.transpose();
        basis[c] = 0.0;
        h.set_column(c, &DVector::from_column_slice(img.as_slice()));
    }
    let lhs = &h * &map.lin - duplication(n).matrix();
    let rhs = -(&h * &map.offset);
    let svd = lhs.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12 * smax).count();
    if rank < lhs.ncols() {
        return Err(Error::InsufficientExcitation(format!(
            "policy-evaluation system has rank {rank} < {}",
            lhs.ncols()
        )));
    }
    let sol = svd
        .solve(&rhs, 1e-12 * smax)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let residual = (&lhs * &sol - &rhs).norm() / rhs.norm().max(f64::MIN_POSITIVE);
    Ok((unvecs(n, sol.as_slice()), residual))
}

fn negative_definite_ww(map: &GammaMap, p: &CostMatrix) -> Result<Blocks> {
    let g = gamma_hat(map, p)?;
    let b = blocks(map, &g);
    if !is_pd(&-&b.ww) {
        return Err(Error::RiskInfeasibleEstimate("Gamma_ww(P) is not negative definite".into()));
    }
    Ok(b)
}

/// `L = -Gamma_ww(P)^{-1} (Gamma_wx(P) - Gamma_wu(P) K)`.
pub fn update_l_data(map: &GammaMap, p: &CostMatrix, k: &GainK) -> Result<GainL> {
    let b = negative_definite_ww(map, p)?;
    let rhs = b.xw.transpose() - b.uw.transpose() * k.matrix();
    let sol = (-&b.ww)
        .cholesky()
        .ok_or_else(|| Error::RiskInfeasibleEstimate("Cholesky of -Gamma_ww failed".into()))?
        .solve(&rhs);
    GainL::new(sol)
}

/// `U = P - P Omega(Gamma_ww(P)^{-1}) P`, then `K = Gamma_uu(U)^{-1} Gamma_ux(U)`.
pub fn update_k_data(map: &GammaMap, p: &CostMatrix) -> Result<GainK> {
    let b = negative_definite_ww(map, p)?;
    let ww_inv = b
        .ww
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::RiskInfeasibleEstimate("Gamma_ww(P) is singular".into()))?;
    let u = symmetrize(&(p - p * omega_hat(map, &symmetrize(&ww_inv))? * p));
    let bu = blocks(map, &gamma_hat(map, &u)?);
    let chol = bu
        .uu
        .clone()
        .cholesky()
        .ok_or_else(|| Error::IllConditionedEstimate("Gamma_uu(U) is not positive definite".into()))?;
    GainK::new(chol.solve(&bu.xu.transpose()))
}

#[derive(Debug, Clone)]
pub struct LearningConfig {
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub tau: usize,
    pub burn_in: usize,
    pub rng_seed: u64,
    pub k_init: GainK,
}

#[derive(Debug, Clone)]
pub struct LearningRun {
    pub trace: IterationTrace,
    pub buffer: DataBuffer,
    /// Largest relative least-squares residual of the policy-evaluation solves.
    pub max_residual: f64,
}

/// Collects one trajectory, builds the operators, and runs the dual loop on
/// them. The true model is used only to simulate and to score the iterates.
pub fn run_learning(
    model: &PlantModel,
    policy: &ExplorationPolicy,
    config: &LearningConfig,
    reference: &GameSolution,
) -> Result<LearningRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let opts = SimulationOptions {
        burn_in: config.burn_in,
        x0: None,
    };
    let buffer = simulate_with(model, policy, config.tau, &opts, &mut rng)?;
    let map = build_operators(&buffer)?.gamma_map()?;
    let (trace, max_residual) = run_learning_on(
        model,
        &map,
        &config.k_init,
        config.outer_iters,
        config.inner_iters,
        reference,
    )?;
    Ok(LearningRun {
        trace,
        buffer,
        max_residual,
    })
}

/// The dual loop driven by `map`; `model` scores the iterates.
pub fn run_learning_on(
    model: &PlantModel,
    map: &GammaMap,
    k_init: &GainK,
    outer_iters: usize,
    inner_iters: usize,
    reference: &GameSolution,
) -> Result<(IterationTrace, f64)> {
    if outer_iters == 0 || inner_iters == 0 {
        return Err(Error::InvalidArgument("outer_iters and inner_iters must be >= 1".into()));
    }
    let mut trace = IterationTrace {
        outer: Vec::with_capacity(outer_iters),
        final_gain: None,
        diverged: false,
    };
    let mut max_residual = 0.0f64;
    let mut k = k_init.clone();
    for i in 1..=outer_iters {
        let rho = spectral_radius(&model.closed_loop(&k))?;
        let hinf = if rho < 1.0 - STABILITY_MARGIN { hinf_norm(model, &k).ok() } else { None };
        let mut l = GainL::zeros(model.q_dim(), model.n());
        let mut p = None;
        for _ in 0..inner_iters {
            let (pj, res) = solve_p_data(map, &k, &l)?;
            max_residual = max_residual.max(res);
            l = update_l_data(map, &pj, &k)?;
            p = Some(pj);
        }
        let p = p.expect("inner_iters >= 1");
        trace.outer.push(OuterRecord {
            i,
            k: k.clone(),
            rel_err_k: rel_err(k.matrix(), reference.k_star.matrix()),
            rel_err_p: Some(rel_err(&p, &reference.p_star)),
            p: Some(p.clone()),
            hinf,
            admissible: hinf.is_some_and(|h| h < model.gamma()),
            inner_steps: inner_iters,
            inner_diverged: false,
            inner: Vec::new(),
        });
        k = update_k_data(map, &p)?;
    }
    trace.final_gain = Some(k);
    Ok((trace, max_residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::illustrative;
    use crate::game_oracle::{solve_gare_value_iteration, ORACLE_MAX_ITER, ORACLE_TOL};
    use nalgebra::dmatrix;

    #[test]
    fn lifted_sizes_of_illustrative_example() {
        // N = 9: n2 = 45, ww block is the last 6 entries
        assert_eq!(lifted_sizes(3, 3, 3), (45, 40));
        assert_eq!(lifted_sizes(4, 1, 4), (45, 36));
    }

    #[test]
    fn single_record_operators() {
        let s = Sample {
            z: DVector::from_element(3, 1.0),
            x_next: DVector::from_element(1, 1.0),
            r: 1.0,
        };
        let buf = DataBuffer::new(1, 1, 1, vec![s]).unwrap();
        let ops = build_operators(&buf).unwrap();
        let zbar = DVector::from_column_slice(&[1.0, 2.0, 2.0, 1.0, 2.0, 1.0, 1.0]);
        assert_eq!(ops.phi, &zbar * zbar.transpose());
        assert_eq!(ops.xi, zbar.clone());
        assert_eq!(ops.psi, zbar);
    }

    #[test]
    fn quiet_system_records_zeros() {
        let model = illustrative().with_sigma(DMatrix::zeros(3, 3)).unwrap();
        let sol = solve_gare_value_iteration(&model, ORACLE_TOL, ORACLE_MAX_ITER).unwrap();
        let pol = ExplorationPolicy::new(sol.k_star.clone(), GainL::zeros(3, 3), 0.0, 0.0).unwrap();
        let opts = SimulationOptions {
            burn_in: 0,
            x0: Some(DVector::zeros(3)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let buf = simulate_with(&model, &pol, 20, &opts, &mut rng).unwrap();
        assert_eq!(buf.tau(), 20);
        assert!(buf.samples().iter().all(|s| s.z.norm() == 0.0 && s.x_next.norm() == 0.0 && s.r == 0.0));
    }

    #[test]
    fn unstable_exploration_is_reported() {
        let model = illustrative();
        let pol = ExplorationPolicy::new(GainK::zeros(3, 3), GainL::zeros(3, 3), 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = simulate(&model, &pol, 100_000, &mut rng).unwrap_err();
        assert!(matches!(err, Error::UnstableExploration { .. }));
    }

    #[test]
    fn model_map_zero_is_block_diagonal_weights() {
        let model = illustrative();
        let map = GammaMap::from_model(&model);
        let g = gamma_hat(&map, &DMatrix::zeros(3, 3)).unwrap();
        let b = blocks(&map, &g);
        assert_eq!(g.view((0, 0), (3, 3)).into_owned(), model.q());
        assert_eq!(b.uu, model.r());
        assert_eq!(b.ww, DMatrix::identity(3, 3) * -25.0);
        assert_eq!(b.xu, DMatrix::zeros(3, 3));
    }

    #[test]
    fn model_map_omega_is_d_y_dt() {
        let model = illustrative();
        let map = GammaMap::from_model(&model);
        let y = dmatrix![1.0, 0.3, 0.0; 0.3, 2.0, -0.4; 0.0, -0.4, 0.5];
        let expect = model.d() * &y * model.d().transpose();
        assert!((omega_hat(&map, &y).unwrap() - expect).norm() < 1e-12);
        assert_eq!(omega_hat(&map, &DMatrix::zeros(3, 3)).unwrap(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn zero_p_gives_zero_l() {
        let model = illustrative();
        let map = GammaMap::from_model(&model);
        let k = GainK::new(DMatrix::from_element(3, 3, 0.1)).unwrap();
        let l = update_l_data(&map, &DMatrix::zeros(3, 3), &k).unwrap();
        assert_eq!(l.matrix(), &DMatrix::zeros(3, 3));
    }

    #[test]
    fn csv_round_trip() {
        let model = illustrative();
        let sol = solve_gare_value_iteration(&model, ORACLE_TOL, ORACLE_MAX_ITER).unwrap();
        let pol = ExplorationPolicy::new(sol.k_star.clone(), GainL::zeros(3, 3), 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let buf = simulate(&model, &pol, 50, &mut rng).unwrap();
        let mut bytes = Vec::new();
        buf.write_csv(&mut bytes).unwrap();
        let header = String::from_utf8(bytes.clone()).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, "t,x0,x1,x2,u0,u1,u2,w0,w1,w2,x_next0,x_next1,x_next2,r");
        let back = DataBuffer::read_csv(bytes.as_slice()).unwrap();
        assert_eq!(back, buf);
        assert_eq!(back.fingerprint(), buf.fingerprint());
    }
}
