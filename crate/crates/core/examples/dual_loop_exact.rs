//! Model-based dual loop from an LMI initial gain. Prints the outer trace and
//! the empirical contraction rates.
use leqg_po::benchmarks::illustrative;
use leqg_po::dual_loop::{measure_rates, policy_values, run_with_reference, DualLoopConfig};
use leqg_po::game_oracle::{solve_gare_value_iteration, ORACLE_MAX_ITER, ORACLE_TOL};
use leqg_po::sysid_init::lmi_gain;

fn main() -> leqg_po::Result<()> {
    let model = illustrative();
    let reference = solve_gare_value_iteration(&model, ORACLE_TOL, ORACLE_MAX_ITER)?;
    let k1 = lmi_gain(&model)?;

    let cfg = DualLoopConfig::new(&model, 10, 20, k1)?.with_verbose_inner(true);
    let trace = run_with_reference(&model, &reference, &cfg)?;
    println!("  i   rel_err_K   rel_err_P   hinf");
    for r in &trace.outer {
        println!(
            "{:3}   {:.3e}   {:.3e}   {:.4}",
            r.i,
            r.rel_err_k,
            r.rel_err_p.unwrap_or(f64::NAN),
            r.hinf.unwrap_or(f64::NAN)
        );
    }
    let rates = measure_rates(&trace, &reference.p_star, &policy_values(&model, &trace)?)?;
    println!("outer rate {:.3e}", rates.alpha_hat);
    let inner: Vec<String> = rates.beta_hats.iter().map(|b| format!("{b:.2e}")).collect();
    println!("inner rates [{}]", inner.join(", "));
    Ok(())
}
