//! Seeded Monte Carlo campaigns over the dual loop, the learner and the
//! initial-controller pipeline. Results go to `traces.csv` (one row per trial
//! and outer step), `aggregate.csv` (mean and variance per outer step) and
//! `summary.json`.
//!
//! `traces.csv` columns: `trial,seed,i,rel_err_k,rel_err_p,hinf,admissible,inner_steps`.
//! `aggregate.csv` columns: `i,count,mean_rel_err_k,var_rel_err_k,count_p,mean_rel_err_p,var_rel_err_p,count_hinf,mean_hinf,var_hinf,admissible_fraction`.
//! Empty cells mean "not available" (for instance `hinf` of an unstable gain).

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{cartpole, illustrative};
use crate::data_driven::{run_learning, ExplorationPolicy, LearningConfig, BURN_IN};
use crate::dual_loop::{measure_rates, policy_values, rel_err, run_with_reference, DualLoopConfig, IterationTrace, OuterRecord};
use crate::error::{Error, Result};
use crate::game_oracle::{solve_gare_value_iteration, GameSolution, ORACLE_MAX_ITER, ORACLE_TOL};
use crate::plant::{GainK, PlantModel};
use crate::sysid_init::{learn_initial_controller, lmi_gain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Undisturbed dual loop.
    Exact,
    /// Dual loop with random iteration errors.
    Disturbed,
    /// Off-policy learning from one sampled trajectory.
    Learn,
    /// Identification followed by the LMI initial gain.
    Sysid,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Exact => "exact",
            Mode::Disturbed => "disturbed",
            Mode::Learn => "learn",
            Mode::Sysid => "sysid",
        }
    }
}

fn default_ibar() -> usize {
    10
}

fn default_jbar() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub model: PlantModel,
    pub mode: Mode,
    pub trials: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_ibar")]
    pub ibar: usize,
    #[serde(default = "default_jbar")]
    pub jbar: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Keep every inner iterate and write `inner.csv`.
    #[serde(default)]
    pub verbose_inner: bool,
}

pub const BUILTIN_NAMES: [&str; 8] = [
    "illustrative-exact",
    "illustrative-disturbed",
    "illustrative-learn",
    "illustrative-sysid",
    "cartpole-exact",
    "cartpole-disturbed",
    "cartpole-learn",
    "cartpole-sysid",
];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// One of [`BUILTIN_NAMES`], or a bare model name (`illustrative`,
    /// `cartpole`) combined with `mode`.
    pub fn builtin(name: &str, mode: Option<Mode>) -> Result<Self> {
        let full = match (name, mode) {
            ("illustrative" | "cartpole", Some(m)) => format!("{name}-{}", m.as_str()),
            _ => name.to_string(),
        };
        let (model_name, mode_name) = full
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("unknown built-in config '{name}'")))?;
        let mode = match mode_name {
            "exact" => Mode::Exact,
            "disturbed" => Mode::Disturbed,
            "learn" => Mode::Learn,
            "sysid" => Mode::Sysid,
            _ => return Err(Error::Config(format!("unknown built-in config '{name}'"))),
        };
        let (model, dk, dl, tau, sigma) = match model_name {
            "illustrative" => (illustrative(), 0.09, 0.09, 5000, 1.0),
            "cartpole" => (cartpole(), 0.7, 0.1, 10000, 20.0),
            _ => return Err(Error::Config(format!("unknown built-in config '{name}'"))),
        };
        let mut cfg = Self {
            name: full.clone(),
            model,
            mode,
            trials: 50,
            master_seed: 0,
            ibar: 10,
            jbar: 20,
            delta_k: None,
            delta_l: None,
            tau: None,
            sigma1: None,
            sigma2: None,
            output: None,
            verbose_inner: false,
        };
        match mode {
            Mode::Exact => cfg.trials = 1,
            Mode::Disturbed => {
                cfg.delta_k = Some(dk);
                cfg.delta_l = Some(dl);
            }
            Mode::Learn | Mode::Sysid => {
                cfg.tau = Some(if mode == Mode::Sysid { 10000 } else { tau });
                cfg.sigma1 = Some(sigma);
                cfg.sigma2 = Some(sigma);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if self.ibar == 0 || self.jbar == 0 {
            return bad("ibar and jbar must be >= 1".into());
        }
        let need = |field: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("mode '{}' requires '{field}'", self.mode.as_str())))
            }
        };
        match self.mode {
            Mode::Exact => {}
            Mode::Disturbed => {
                need("delta_k", self.delta_k.is_some())?;
                need("delta_l", self.delta_l.is_some())?;
                for (f, v) in [("delta_k", self.delta_k), ("delta_l", self.delta_l)] {
                    if !v.is_some_and(|v| v.is_finite() && v >= 0.0) {
                        return bad(format!("{f} must be finite and >= 0"));
                    }
                }
            }
            Mode::Learn | Mode::Sysid => {
                need("tau", self.tau.is_some())?;
                need("sigma1", self.sigma1.is_some())?;
                need("sigma2", self.sigma2.is_some())?;
                if self.tau == Some(0) {
                    return bad("tau must be >= 1".into());
                }
                for (f, v) in [("sigma1", self.sigma1), ("sigma2", self.sigma2)] {
                    if !v.is_some_and(|v| v.is_finite() && v >= 0.0) {
                        return bad(format!("{f} must be finite and >= 0"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn trial_seed(&self, index: usize) -> u64 {
        self.master_seed.wrapping_add(index as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub index: usize,
    pub seed: u64,
    pub trace: Option<IterationTrace>,
    pub failure: Option<TrialFailure>,
    /// Identification error `|[A B D]^_hat - [A B D]|_F` (sysid mode).
    pub id_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub trial: usize,
    pub seed: u64,
    pub i: usize,
    pub rel_err_k: f64,
    pub rel_err_p: Option<f64>,
    pub hinf: Option<f64>,
    pub admissible: bool,
    pub inner_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub i: usize,
    pub count: usize,
    pub mean_rel_err_k: Option<f64>,
    pub var_rel_err_k: Option<f64>,
    pub count_p: usize,
    pub mean_rel_err_p: Option<f64>,
    pub var_rel_err_p: Option<f64>,
    pub count_hinf: usize,
    pub mean_hinf: Option<f64>,
    pub var_hinf: Option<f64>,
    pub admissible_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateSummary {
    pub alpha_hat: f64,
    pub beta_hats: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub config: ExperimentConfig,
    pub reference: GameSolution,
    pub trials: Vec<TrialResult>,
    pub rows: Vec<TraceRow>,
    pub aggregate: Vec<AggregateRow>,
    /// Exact mode only, from the first trial.
    pub rates: Option<RateSummary>,
}

fn mean_var(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (Some(mean), Some(var))
}

/// Mean and (population) variance per outer step `1..=steps`, over the rows
/// in their given order. Trials that stopped early simply do not contribute
/// to later steps.
pub fn aggregate(rows: &[TraceRow], steps: usize) -> Vec<AggregateRow> {
    (1..=steps)
        .map(|i| {
            let at: Vec<&TraceRow> = rows.iter().filter(|r| r.i == i).collect();
            let k: Vec<f64> = at.iter().map(|r| r.rel_err_k).collect();
            let p: Vec<f64> = at.iter().filter_map(|r| r.rel_err_p).collect();
            let h: Vec<f64> = at.iter().filter_map(|r| r.hinf).collect();
            let (mk, vk) = mean_var(&k);
            let (mp, vp) = mean_var(&p);
            let (mh, vh) = mean_var(&h);
            let adm = (!at.is_empty()).then(|| at.iter().filter(|r| r.admissible).count() as f64 / at.len() as f64);
            AggregateRow {
                i,
                count: at.len(),
                mean_rel_err_k: mk,
                var_rel_err_k: vk,
                count_p: p.len(),
                mean_rel_err_p: mp,
                var_rel_err_p: vp,
                count_hinf: h.len(),
                mean_hinf: mh,
                var_hinf: vh,
                admissible_fraction: adm,
            }
        })
        .collect()
}

fn trace_rows(trial: &TrialResult) -> Vec<TraceRow> {
    let Some(trace) = &trial.trace else { return Vec::new() };
    trace
        .outer
        .iter()
        .map(|r| TraceRow {
            trial: trial.index,
            seed: trial.seed,
            i: r.i,
            rel_err_k: r.rel_err_k,
            rel_err_p: r.rel_err_p,
            hinf: r.hinf,
            admissible: r.admissible,
            inner_steps: r.inner_steps,
        })
        .collect()
}

impl CampaignResult {
    /// Outer steps per trial (1 in sysid mode).
    pub fn steps(&self) -> usize {
        steps_for(&self.config)
    }

    pub fn completed(&self) -> usize {
        self.trials.iter().filter(|t| t.failure.is_none()).count()
    }

    pub fn failed(&self) -> usize {
        self.trials.len() - self.completed()
    }

    /// Admissible trial-steps over `trials * steps`. Failed trials and steps
    /// missing from truncated traces count as not admissible.
    pub fn admissible_fraction(&self) -> f64 {
        let ok = self.rows.iter().filter(|r| r.admissible).count();
        ok as f64 / (self.trials.len() * self.steps()) as f64
    }

    /// Mean `rel_err_K` at the last recorded step of each completed trial.
    pub fn mean_final_rel_err_k(&self) -> Option<f64> {
        let finals: Vec<f64> = self
            .trials
            .iter()
            .filter_map(|t| t.trace.as_ref().and_then(|tr| tr.last()).map(|r| r.rel_err_k))
            .collect();
        mean_var(&finals).0
    }

    pub fn mean_final_rel_err_p(&self) -> Option<f64> {
        let finals: Vec<f64> = self
            .trials
            .iter()
            .filter_map(|t| t.trace.as_ref().and_then(|tr| tr.last()).and_then(|r| r.rel_err_p))
            .collect();
        mean_var(&finals).0
    }

    /// Recorded gains that were unstable or had `hinf >= gamma`.
    pub fn escapes(&self) -> usize {
        self.rows.iter().filter(|r| !r.admissible).count()
    }

    pub fn max_hinf(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.hinf).reduce(f64::max)
    }

    pub fn summary(&self) -> serde_json::Value {
        let failures: Vec<serde_json::Value> = self
            .trials
            .iter()
            .filter_map(|t| {
                t.failure.as_ref().map(|f| {
                    serde_json::json!({"trial": t.index, "seed": t.seed, "stage": f.stage, "message": f.message})
                })
            })
            .collect();
        let ids: Vec<f64> = self.trials.iter().filter_map(|t| t.id_residual).collect();
        let last = self.aggregate.last();
        serde_json::json!({
            "name": self.config.name,
            "mode": self.config.mode.as_str(),
            "gamma": self.config.model.gamma(),
            "trials": self.trials.len(),
            "master_seed": self.config.master_seed,
            "completed": self.completed(),
            "failed": self.failed(),
            "failures": failures,
            "steps": self.steps(),
            "final_mean_rel_err_k": self.mean_final_rel_err_k(),
            "final_mean_rel_err_p": self.mean_final_rel_err_p(),
            "last_step": last,
            "admissible_fraction": self.admissible_fraction(),
            "escapes": self.escapes(),
            "max_hinf": self.max_hinf(),
            "mean_identification_error": mean_var(&ids).0,
            "rates": self.rates,
            "oracle_iterations": self.reference.iterations,
            "oracle_residual": self.reference.residual,
        })
    }
}

fn steps_for(cfg: &ExperimentConfig) -> usize {
    if cfg.mode == Mode::Sysid {
        1
    } else {
        cfg.ibar
    }
}

fn failure_of(err: &Error, default_stage: &str) -> TrialFailure {
    let stage = match err {
        Error::Stage { stage, .. } => stage.to_string(),
        _ => default_stage.to_string(),
    };
    TrialFailure {
        stage,
        message: err.root().to_string(),
    }
}

struct Shared {
    reference: GameSolution,
    k_init: Option<GainK>,
    policy: Option<ExplorationPolicy>,
}

fn run_trial(cfg: &ExperimentConfig, shared: &Shared, index: usize) -> TrialResult {
    let seed = cfg.trial_seed(index);
    let model = &cfg.model;
    let outcome: std::result::Result<(IterationTrace, Option<f64>), TrialFailure> = match cfg.mode {
        Mode::Exact | Mode::Disturbed => {
            let k = shared.k_init.clone().expect("initial gain computed");
            DualLoopConfig::new(model, cfg.ibar, cfg.jbar, k)
                .and_then(|c| match cfg.mode {
                    Mode::Disturbed => c.with_disturbances(cfg.delta_k.unwrap_or(0.0), cfg.delta_l.unwrap_or(0.0)),
                    _ => Ok(c),
                })
                .map(|c| c.with_seed(seed).with_verbose_inner(cfg.verbose_inner))
                .and_then(|c| run_with_reference(model, &shared.reference, &c))
                .map(|t| (t, None))
                .map_err(|e| failure_of(&e, "dual_loop"))
        }
        Mode::Learn => {
            let lc = LearningConfig {
                outer_iters: cfg.ibar,
                inner_iters: cfg.jbar,
                tau: cfg.tau.unwrap_or(0),
                burn_in: BURN_IN,
                rng_seed: seed,
                k_init: shared.k_init.clone().expect("initial gain computed"),
            };
            let policy = shared.policy.as_ref().expect("exploration policy computed");
            run_learning(model, policy, &lc, &shared.reference)
                .map(|run| (run.trace, None))
                .map_err(|e| failure_of(&e, "learn"))
        }
        Mode::Sysid => {
            let policy = shared.policy.as_ref().expect("exploration policy computed");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            learn_initial_controller(model, policy, cfg.tau.unwrap_or(0), None, None, &mut rng)
                .map(|ic| {
                    let rec = OuterRecord {
                        i: 1,
                        k: ic.k.clone(),
                        p: None,
                        rel_err_k: rel_err(ic.k.matrix(), shared.reference.k_star.matrix()),
                        rel_err_p: None,
                        hinf: ic.admissibility.hinf,
                        admissible: ic.admissibility.admissible,
                        inner_steps: 0,
                        inner_diverged: false,
                        inner: Vec::new(),
                    };
                    let trace = IterationTrace {
                        outer: vec![rec],
                        final_gain: Some(ic.k),
                        diverged: false,
                    };
                    (trace, ic.identified.residual_norm)
                })
                .map_err(|e| failure_of(&e, "sysid"))
        }
    };
    match outcome {
        Ok((trace, id_residual)) => TrialResult {
            index,
            seed,
            trace: Some(trace),
            failure: None,
            id_residual,
        },
        Err(failure) => TrialResult {
            index,
            seed,
            trace: None,
            failure: Some(failure),
            id_residual: None,
        },
    }
}

/// Runs `trials` independent trials with seeds `master_seed + index`, at most
/// `jobs` at a time (`None`: one per core). Per-trial failures are recorded,
/// not propagated; setup failures (oracle, initial gain) are returned.
pub fn run_campaign(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<CampaignResult> {
    cfg.validate()?;
    let model = &cfg.model;
    let reference =
        solve_gare_value_iteration(model, ORACLE_TOL, ORACLE_MAX_ITER).map_err(|e| e.at_stage("oracle"))?;
    let k_init = match cfg.mode {
        Mode::Sysid => None,
        _ => Some(lmi_gain(model).map_err(|e| e.at_stage("initial gain"))?),
    };
    let policy = match cfg.mode {
        Mode::Learn | Mode::Sysid => Some(
            ExplorationPolicy::lqr(model, cfg.sigma1.unwrap_or(0.0), cfg.sigma2.unwrap_or(0.0))
                .map_err(|e| e.at_stage("exploration"))?,
        ),
        _ => None,
    };
    let shared = Shared {
        reference,
        k_init,
        policy,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let trials: Vec<TrialResult> =
        pool.install(|| (0..cfg.trials).into_par_iter().map(|i| run_trial(cfg, &shared, i)).collect());
    let rows: Vec<TraceRow> = trials.iter().flat_map(trace_rows).collect();
    let aggregate = aggregate(&rows, steps_for(cfg));
    // Inner rates need the inner iterates, which are kept only in verbose mode.
    let rates = match (cfg.mode, trials.first().and_then(|t| t.trace.as_ref())) {
        (Mode::Exact, Some(trace)) => {
            let pv = policy_values(model, trace)?;
            let r = measure_rates(trace, &shared.reference.p_star, &pv)?;
            Some(RateSummary {
                alpha_hat: r.alpha_hat,
                beta_hats: if cfg.verbose_inner { r.beta_hats } else { Vec::new() },
            })
        }
        _ => None,
    };
    Ok(CampaignResult {
        config: cfg.clone(),
        reference: shared.reference,
        trials,
        rows,
        aggregate,
        rates,
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

const TRACE_HEADER: [&str; 8] = ["trial", "seed", "i", "rel_err_k", "rel_err_p", "hinf", "admissible", "inner_steps"];
const AGGREGATE_HEADER: [&str; 11] = [
    "i",
    "count",
    "mean_rel_err_k",
    "var_rel_err_k",
    "count_p",
    "mean_rel_err_p",
    "var_rel_err_p",
    "count_hinf",
    "mean_hinf",
    "var_hinf",
    "admissible_fraction",
];

#[derive(Serialize)]
struct InnerRow {
    trial: usize,
    i: usize,
    j: usize,
    trace_p: f64,
    norm_l: f64,
}

/// Writes `traces.csv`, `aggregate.csv`, `summary.json` and, when inner
/// iterates were kept, `inner.csv` into `dir`. Returns the written paths.
pub fn emit(result: &CampaignResult, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.trials.is_empty() {
        return Err(Error::Config("refusing to emit an empty campaign".into()));
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let traces = dir.join("traces.csv");
    write_rows(&traces, &result.rows, &TRACE_HEADER)?;
    let agg = dir.join("aggregate.csv");
    write_rows(&agg, &result.aggregate, &AGGREGATE_HEADER)?;
    let summary = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&result.summary()).expect("summary serializes");
    fs::write(&summary, text + "\n").map_err(|e| io_err(&summary, e))?;
    let mut out = vec![traces, agg, summary];
    let inner: Vec<InnerRow> = result
        .trials
        .iter()
        .filter_map(|t| t.trace.as_ref().map(|tr| (t.index, tr)))
        .flat_map(|(trial, tr)| {
            tr.outer.iter().flat_map(move |r| {
                r.inner.iter().map(move |rec| InnerRow {
                    trial,
                    i: r.i,
                    j: rec.j,
                    trace_p: rec.p.trace(),
                    norm_l: rec.l.matrix().norm(),
                })
            })
        })
        .collect();
    if !inner.is_empty() {
        let path = dir.join("inner.csv");
        write_rows(&path, &inner, &["trial", "i", "j", "trace_p", "norm_l"])?;
        out.push(path);
    }
    Ok(out)
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| io_err(path, e))).collect()
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| io_err(path, e))).collect()
}

/// Exit status for a failed command: 1 for configuration problems, 2 for
/// everything that went wrong while running or writing.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) => 1,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_validate() {
        for name in BUILTIN_NAMES {
            let cfg = ExperimentConfig::builtin(name, None).unwrap();
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
        }
        let cfg = ExperimentConfig::builtin("cartpole", Some(Mode::Disturbed)).unwrap();
        assert_eq!((cfg.delta_k, cfg.delta_l), (Some(0.7), Some(0.1)));
        assert!(ExperimentConfig::builtin("pendulum-exact", None).is_err());
    }

    #[test]
    fn mode_requirements_are_checked() {
        let mut cfg = ExperimentConfig::builtin("illustrative-disturbed", None).unwrap();
        cfg.delta_l = None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::builtin("illustrative-learn", None).unwrap();
        cfg.tau = None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::builtin("illustrative-exact", None).unwrap();
        cfg.trials = 0;
        assert_eq!(exit_code(&cfg.validate().unwrap_err()), 1);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::builtin("illustrative-exact", None).unwrap().to_json()).unwrap();
        v["trails"] = 3.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn aggregate_of_one_trial_is_the_trial() {
        let rows = vec![
            TraceRow { trial: 0, seed: 0, i: 1, rel_err_k: 0.5, rel_err_p: Some(0.2), hinf: Some(1.0), admissible: true, inner_steps: 20 },
            TraceRow { trial: 0, seed: 0, i: 2, rel_err_k: 0.1, rel_err_p: None, hinf: None, admissible: false, inner_steps: 0 },
        ];
        let agg = aggregate(&rows, 3);
        assert_eq!(agg.len(), 3);
        assert_eq!(agg[0].mean_rel_err_k, Some(0.5));
        assert_eq!(agg[0].var_rel_err_k, Some(0.0));
        assert_eq!(agg[1].mean_rel_err_p, None);
        assert_eq!(agg[1].admissible_fraction, Some(0.0));
        assert_eq!(agg[2].count, 0);
    }

    #[test]
    fn mean_and_variance() {
        let (m, v) = mean_var(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, Some(2.5));
        assert_eq!(v, Some(1.25));
    }
}
