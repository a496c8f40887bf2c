//! Model-based dual-loop policy optimization. The outer loop improves the
//! controller gain `K`; the inner loop runs policy iteration for the
//! adversary gain `L` at fixed `K`. Both updates optionally take a random
//! additive error of prescribed Frobenius norm.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::game_oracle::{
    evaluate_policy, gain_from_u, solve_gare_value_iteration, u_of_p, GameSolution, ORACLE_MAX_ITER, ORACLE_TOL,
};
use crate::matrix_kit::{solve_dlyap, spectral_radius, symmetrize, CostMatrix, STABILITY_MARGIN};
use crate::plant::{hinf_norm, is_admissible, GainK, GainL, PlantModel};

/// Inner iterations used by [`DualLoopConfig::exact`].
pub const EXACT_INNER_ITERS: usize = 200;
/// Relative change at which the exact-mode inner loop stops early.
pub const EXACT_INNER_STOP: f64 = 1e-12;

/// Additive iteration error: standard Gaussian entries rescaled to a fixed
/// Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceSpec {
    magnitude: f64,
}

impl DisturbanceSpec {
    pub fn new(magnitude: f64) -> Result<Self> {
        if !magnitude.is_finite() || magnitude < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "disturbance magnitude must be finite and >= 0, got {magnitude}"
            )));
        }
        Ok(Self { magnitude })
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn sample<R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
        if self.magnitude == 0.0 {
            return DMatrix::zeros(rows, cols);
        }
        let raw = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = raw.norm();
        if norm == 0.0 {
            return raw;
        }
        raw * (self.magnitude / norm)
    }
}

#[derive(Debug, Clone)]
pub struct DualLoopConfig {
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub k_init: GainK,
    pub disturbance_k: Option<DisturbanceSpec>,
    pub disturbance_l: Option<DisturbanceSpec>,
    pub rng_seed: u64,
    /// Keep every `(L_{i,j}, P_{i,j})` in the trace.
    pub verbose_inner: bool,
    /// Stop the inner loop once `|P_{i,j+1} - P_{i,j}|_F <= tol |P_{i,j+1}|_F`.
    pub inner_early_stop: Option<f64>,
}

impl DualLoopConfig {
    /// Checks `outer_iters, inner_iters >= 1` and that `k_init` is admissible for `model`.
    pub fn new(model: &PlantModel, outer_iters: usize, inner_iters: usize, k_init: GainK) -> Result<Self> {
        if outer_iters == 0 || inner_iters == 0 {
            return Err(Error::InvalidArgument("outer_iters and inner_iters must be >= 1".into()));
        }
        model.check_gain_k(&k_init)?;
        let adm = is_admissible(model, &k_init)?;
        if !adm.admissible {
            return Err(Error::InvalidArgument(format!(
                "initial gain is not admissible ({:?}, rho = {}, hinf = {:?})",
                adm.reason, adm.spectral_radius, adm.hinf
            )));
        }
        Ok(Self {
            outer_iters,
            inner_iters,
            k_init,
            disturbance_k: None,
            disturbance_l: None,
            rng_seed: 0,
            verbose_inner: false,
            inner_early_stop: None,
        })
    }

    /// Undisturbed run whose inner loop is run to convergence.
    pub fn exact(model: &PlantModel, outer_iters: usize, k_init: GainK) -> Result<Self> {
        let mut cfg = Self::new(model, outer_iters, EXACT_INNER_ITERS, k_init)?;
        cfg.inner_early_stop = Some(EXACT_INNER_STOP);
        Ok(cfg)
    }

    pub fn with_disturbances(mut self, dk: f64, dl: f64) -> Result<Self> {
        self.disturbance_k = Some(DisturbanceSpec::new(dk)?);
        self.disturbance_l = Some(DisturbanceSpec::new(dl)?);
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_verbose_inner(mut self, verbose: bool) -> Self {
        self.verbose_inner = verbose;
        self
    }

    pub fn is_disturbed(&self) -> bool {
        let active = |d: &Option<DisturbanceSpec>| d.is_some_and(|d| d.magnitude > 0.0);
        active(&self.disturbance_k) || active(&self.disturbance_l)
    }
}

/// `L_{i,j}` and the value `P_{i,j}` it produced.
#[derive(Debug, Clone)]
pub struct InnerRecord {
    pub j: usize,
    pub l: GainL,
    pub p: CostMatrix,
}

#[derive(Debug, Clone)]
pub struct InnerOutcome {
    /// Last computed `P_{K,j}`; `None` only if the very first evaluation failed.
    pub p: Option<CostMatrix>,
    /// `L_{K,j+1}` built from `p`.
    pub l_next: Option<GainL>,
    pub records: Vec<InnerRecord>,
    pub steps: usize,
    pub diverged: bool,
}

/// Inner policy iteration at fixed `K`, starting from `L_{K,1} = 0`:
/// `P_{K,j}` solves the Lyapunov equation for `A - BK + D L_{K,j}` with weight
/// `Q + K^T R K - gamma^2 L^T L`, then
/// `L_{K,j+1} = (gamma^2 I - D^T P D)^{-1} D^T P (A - BK) + Delta L`.
/// Instability or loss of definiteness truncates the loop with `diverged` set.
pub fn inner_loop<R: Rng + ?Sized>(
    model: &PlantModel,
    k: &GainK,
    inner_iters: usize,
    disturbance_l: Option<&DisturbanceSpec>,
    early_stop: Option<f64>,
    keep_records: bool,
    rng: &mut R,
) -> Result<InnerOutcome> {
    model.check_gain_k(k)?;
    let a_k = model.closed_loop(k);
    let q_k = model.closed_loop_weight(k);
    let d = model.d();
    let g2 = model.gamma() * model.gamma();
    let mut l = GainL::zeros(model.q_dim(), model.n());
    let mut out = InnerOutcome {
        p: None,
        l_next: None,
        records: Vec::new(),
        steps: 0,
        diverged: false,
    };
    for j in 1..=inner_iters {
        let a_kl = &a_k + d * l.matrix();
        let weight = symmetrize(&(&q_k - l.matrix().transpose() * l.matrix() * g2));
        let p = match solve_dlyap(&a_kl, &weight) {
            Ok(p) => p,
            Err(Error::UnstableMatrix { .. }) | Err(Error::IllConditioned(_)) => {
                out.diverged = true;
                return Ok(out);
            }
            Err(e) => return Err(e),
        };
        let change = out
            .p
            .as_ref()
            .map(|prev: &CostMatrix| (&p - prev).norm() / p.norm().max(f64::MIN_POSITIVE));
        let next = match crate::game_oracle::worst_case_gain(model, k, &p) {
            Ok(next) => next,
            Err(Error::RiskInfeasible(_)) => {
                out.diverged = true;
                if keep_records {
                    out.records.push(InnerRecord { j, l: l.clone(), p: p.clone() });
                }
                out.p = Some(p);
                out.steps = j;
                return Ok(out);
            }
            Err(e) => return Err(e),
        };
        let next = match disturbance_l {
            Some(spec) => GainL::new(next.into_inner() + spec.sample(model.q_dim(), model.n(), rng))?,
            None => next,
        };
        if keep_records {
            out.records.push(InnerRecord { j, l: l.clone(), p: p.clone() });
        }
        out.p = Some(p);
        out.steps = j;
        out.l_next = Some(next.clone());
        l = next;
        if let (Some(tol), Some(c)) = (early_stop, change) {
            if c <= tol {
                break;
            }
        }
    }
    Ok(out)
}

/// `K' = (R + B^T U B)^{-1} B^T U A + Delta K` with `U = U(P)`.
pub fn outer_step<R: Rng + ?Sized>(
    model: &PlantModel,
    p: &CostMatrix,
    disturbance_k: Option<&DisturbanceSpec>,
    rng: &mut R,
) -> Result<GainK> {
    let u = u_of_p(model, p)?;
    let k = gain_from_u(model, &u)?;
    match disturbance_k {
        Some(spec) => GainK::new(k.into_inner() + spec.sample(model.m(), model.n(), rng)),
        None => Ok(k),
    }
}

#[derive(Debug, Clone)]
pub struct OuterRecord {
    /// 1-based outer index.
    pub i: usize,
    pub k: GainK,
    /// `P_{i,jbar}`; `None` when `K_i` is not stabilizing.
    pub p: Option<CostMatrix>,
    pub rel_err_k: f64,
    pub rel_err_p: Option<f64>,
    /// `None` when `A - B K_i` is unstable.
    pub hinf: Option<f64>,
    pub admissible: bool,
    pub inner_steps: usize,
    pub inner_diverged: bool,
    pub inner: Vec<InnerRecord>,
}

#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub outer: Vec<OuterRecord>,
    /// `K_{ibar+1}`, produced by the last outer step.
    pub final_gain: Option<GainK>,
    /// Set when the run stopped before `ibar` outer steps.
    pub diverged: bool,
}

impl IterationTrace {
    pub fn last(&self) -> Option<&OuterRecord> {
        self.outer.last()
    }

    /// Number of recorded outer steps whose gain left the admissible set.
    pub fn escapes(&self) -> usize {
        self.outer.iter().filter(|r| !r.admissible).count()
    }
}

pub fn rel_err(x: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (x - reference).norm() / reference.norm().max(f64::MIN_POSITIVE)
}

/// Runs the dual loop against a freshly computed value-iteration reference.
pub fn run(model: &PlantModel, config: &DualLoopConfig) -> Result<IterationTrace> {
    let reference = solve_gare_value_iteration(model, ORACLE_TOL, ORACLE_MAX_ITER)?;
    run_with_reference(model, &reference, config)
}

/// Runs `ibar` outer steps of `jbar` inner steps each. In undisturbed mode
/// every `K_i` must stay admissible; a violation is reported as an error.
/// In disturbed mode escapes are flagged and the run continues until the
/// iteration can no longer be evaluated.
pub fn run_with_reference(
    model: &PlantModel,
    reference: &GameSolution,
    config: &DualLoopConfig,
) -> Result<IterationTrace> {
    if config.outer_iters == 0 || config.inner_iters == 0 {
        return Err(Error::InvalidArgument("outer_iters and inner_iters must be >= 1".into()));
    }
    model.check_gain_k(&config.k_init)?;
    let disturbed = config.is_disturbed();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut trace = IterationTrace {
        outer: Vec::with_capacity(config.outer_iters),
        final_gain: None,
        diverged: false,
    };
    let mut k = config.k_init.clone();
    for i in 1..=config.outer_iters {
        let rho = spectral_radius(&model.closed_loop(&k))?;
        let hinf = if rho < 1.0 - STABILITY_MARGIN { hinf_norm(model, &k).ok() } else { None };
        let admissible = hinf.is_some_and(|h| h < model.gamma());
        if !admissible && !disturbed {
            return Err(Error::NotAdmissible(format!("K_{i} left the admissible set in undisturbed mode")));
        }
        let inner = if hinf.is_some() {
            inner_loop(
                model,
                &k,
                config.inner_iters,
                config.disturbance_l.as_ref(),
                config.inner_early_stop,
                config.verbose_inner,
                &mut rng,
            )?
        } else {
            InnerOutcome {
                p: None,
                l_next: None,
                records: Vec::new(),
                steps: 0,
                diverged: true,
            }
        };
        let rel_err_p = inner.p.as_ref().map(|p| rel_err(p, &reference.p_star));
        trace.outer.push(OuterRecord {
            i,
            k: k.clone(),
            p: inner.p.clone(),
            rel_err_k: rel_err(k.matrix(), reference.k_star.matrix()),
            rel_err_p,
            hinf,
            admissible,
            inner_steps: inner.steps,
            inner_diverged: inner.diverged,
            inner: inner.records,
        });
        let Some(p) = inner.p else {
            trace.diverged = true;
            break;
        };
        match outer_step(model, &p, config.disturbance_k.as_ref(), &mut rng) {
            Ok(next) => k = next,
            Err(Error::RiskInfeasible(_)) if disturbed => {
                trace.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        if i == config.outer_iters {
            trace.final_gain = Some(k.clone());
        }
    }
    Ok(trace)
}

/// Empirical contraction factors of the outer and inner loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Rates {
    /// `max_i Tr(P_{i+1} - P*) / Tr(P_i - P*)`; 0 when every ratio was skipped.
    pub alpha_hat: f64,
    /// Per outer step, `max_j Tr(P_i - P_{i,j+1}) / Tr(P_i - P_{i,j})`; 0 when skipped.
    pub beta_hats: Vec<f64>,
}

/// Denominators below `RATE_FLOOR * Tr(reference)` are treated as converged.
pub const RATE_FLOOR: f64 = 1e-9;

/// Estimates the outer rate from `P_{i,jbar}` and the inner rate from the
/// verbose inner records, using `policy_values[i] = P_{K_i}`.
pub fn measure_rates(trace: &IterationTrace, p_star: &CostMatrix, policy_values: &[CostMatrix]) -> Result<Rates> {
    if policy_values.len() != trace.outer.len() {
        return Err(Error::InvalidArgument(format!(
            "{} policy values for {} outer records",
            policy_values.len(),
            trace.outer.len()
        )));
    }
    let floor = RATE_FLOOR * p_star.trace().abs().max(f64::MIN_POSITIVE);
    let mut alpha = 0.0f64;
    for w in trace.outer.windows(2) {
        let (Some(p0), Some(p1)) = (&w[0].p, &w[1].p) else { continue };
        let den = (p0 - p_star).trace();
        if den > floor.max(1e-12) {
            alpha = alpha.max((p1 - p_star).trace() / den);
        }
    }
    let mut betas = Vec::with_capacity(trace.outer.len());
    for (rec, p_i) in trace.outer.iter().zip(policy_values) {
        let floor_i = (RATE_FLOOR * p_i.trace().abs()).max(1e-12);
        let mut beta = 0.0f64;
        for w in rec.inner.windows(2) {
            let den = (p_i - &w[0].p).trace();
            if den > floor_i {
                beta = beta.max((p_i - &w[1].p).trace() / den);
            }
        }
        betas.push(beta);
    }
    Ok(Rates {
        alpha_hat: alpha,
        beta_hats: betas,
    })
}

/// `P_{K_i}` for every recorded gain, by the fixed-point policy evaluation.
pub fn policy_values(model: &PlantModel, trace: &IterationTrace) -> Result<Vec<CostMatrix>> {
    trace
        .outer
        .iter()
        .map(|r| evaluate_policy(model, &r.k, ORACLE_TOL, ORACLE_MAX_ITER))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::illustrative;
    use crate::game_oracle::worst_case_gain;

    fn reference() -> GameSolution {
        solve_gare_value_iteration(&illustrative(), ORACLE_TOL, ORACLE_MAX_ITER).unwrap()
    }

    fn perturbed_gain(sol: &GameSolution, scale: f64) -> GainK {
        let k = sol.k_star.matrix();
        GainK::new(k + DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| scale * ((i + 2 * j) as f64).sin())).unwrap()
    }

    #[test]
    fn disturbance_has_exact_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DisturbanceSpec::new(0.09).unwrap().sample(3, 3, &mut rng);
        assert!((d.norm() - 0.09).abs() < 1e-15);
        assert_eq!(DisturbanceSpec::new(0.0).unwrap().sample(2, 2, &mut rng), DMatrix::zeros(2, 2));
        assert!(DisturbanceSpec::new(f64::NAN).is_err());
        assert!(DisturbanceSpec::new(-1.0).is_err());
    }

    #[test]
    fn single_inner_step_is_lyapunov() {
        let model = illustrative();
        let sol = reference();
        let k = perturbed_gain(&sol, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = inner_loop(&model, &k, 1, None, None, false, &mut rng).unwrap();
        let expect = solve_dlyap(&model.closed_loop(&k), &model.closed_loop_weight(&k)).unwrap();
        assert!((out.p.unwrap() - expect).norm() < 1e-10);
    }

    #[test]
    fn long_inner_loop_matches_policy_evaluation() {
        let model = illustrative();
        let sol = reference();
        let k = perturbed_gain(&sol, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = inner_loop(&model, &k, 200, None, Some(1e-14), true, &mut rng).unwrap();
        let p_k = evaluate_policy(&model, &k, ORACLE_TOL, ORACLE_MAX_ITER).unwrap();
        assert!(rel_err(out.p.as_ref().unwrap(), &p_k) < 1e-8);
        let traces: Vec<f64> = out.records.iter().map(|r| r.p.trace()).collect();
        for w in traces.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
        assert!(traces.last().unwrap() <= &(p_k.trace() * (1.0 + 1e-9)));
    }

    #[test]
    fn outer_step_fixed_point_and_disturbance() {
        let model = illustrative();
        let sol = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = outer_step(&model, &sol.p_star, None, &mut rng).unwrap();
        assert!(rel_err(k.matrix(), sol.k_star.matrix()) < 1e-10);
        let spec = DisturbanceSpec::new(0.09).unwrap();
        let kd = outer_step(&model, &sol.p_star, Some(&spec), &mut rng).unwrap();
        assert!(((kd.matrix() - k.matrix()).norm() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn starting_at_optimum_stays_there() {
        let model = illustrative();
        let sol = reference();
        let cfg = DualLoopConfig::exact(&model, 4, sol.k_star.clone()).unwrap().with_verbose_inner(true);
        let trace = run_with_reference(&model, &sol, &cfg).unwrap();
        for r in &trace.outer {
            assert!(r.rel_err_k < 1e-9);
        }
        let pv = policy_values(&model, &trace).unwrap();
        let rates = measure_rates(&trace, &sol.p_star, &pv).unwrap();
        assert_eq!(rates.alpha_hat, 0.0);
    }

    #[test]
    fn worst_case_gain_at_optimum_is_l_star() {
        let model = illustrative();
        let sol = reference();
        let l = worst_case_gain(&model, &sol.k_star, &sol.p_star).unwrap();
        assert!((l.matrix() - sol.l_star.matrix()).norm() < 1e-12);
    }

    #[test]
    fn config_rejects_inadmissible_gain() {
        let model = illustrative();
        let k = GainK::zeros(3, 3);
        assert!(matches!(DualLoopConfig::new(&model, 3, 3, k), Err(Error::InvalidArgument(_))));
        let sol = reference();
        assert!(DualLoopConfig::new(&model, 0, 3, sol.k_star.clone()).is_err());
    }

    #[test]
    fn same_seed_same_trace() {
        let model = illustrative();
        let sol = reference();
        let k0 = perturbed_gain(&sol, 0.05);
        let cfg = DualLoopConfig::new(&model, 5, 10, k0).unwrap().with_disturbances(0.09, 0.09).unwrap().with_seed(11);
        let a = run_with_reference(&model, &sol, &cfg).unwrap();
        let b = run_with_reference(&model, &sol, &cfg).unwrap();
        for (x, y) in a.outer.iter().zip(&b.outer) {
            assert_eq!(x.k.matrix(), y.k.matrix());
            assert_eq!(x.p, y.p);
        }
    }
}
