//! Off-policy learning: one trajectory under a fixed exploratory policy, then
//! the dual loop on the estimated operators. The true model only simulates
//! the plant and scores the iterates.
use leqg_po::benchmarks::illustrative;
use leqg_po::data_driven::{gamma_hat, run_learning, ExplorationPolicy, GammaMap, LearningConfig, BURN_IN};
use leqg_po::game_oracle::{solve_gare_value_iteration, ORACLE_MAX_ITER, ORACLE_TOL};
use leqg_po::sysid_init::lmi_gain;

fn main() -> leqg_po::Result<()> {
    let model = illustrative();
    let reference = solve_gare_value_iteration(&model, ORACLE_TOL, ORACLE_MAX_ITER)?;
    let policy = ExplorationPolicy::lqr(&model, 1.0, 1.0)?;
    let cfg = LearningConfig {
        outer_iters: 10,
        inner_iters: 20,
        tau: 5000,
        burn_in: BURN_IN,
        rng_seed: 7,
        k_init: lmi_gain(&model)?,
    };
    let run = run_learning(&model, &policy, &cfg, &reference)?;

    let exact = gamma_hat(&GammaMap::from_model(&model), &reference.p_star)?;
    let ops = leqg_po::data_driven::build_operators(&run.buffer)?.gamma_map()?;
    let est = gamma_hat(&ops, &reference.p_star)?;
    println!("tau = {}, |Gamma_hat(P*) - Gamma(P*)| / |Gamma(P*)| = {:.3e}", run.buffer.tau(), (&est - &exact).norm() / exact.norm());

    for r in &run.trace.outer {
        println!("i {:2}  rel_err_K {:.3e}  rel_err_P {:.3e}  admissible {}", r.i, r.rel_err_k, r.rel_err_p.unwrap_or(f64::NAN), r.admissible);
    }
    println!("largest policy-evaluation residual {:.2e}", run.max_residual);
    Ok(())
}
