//! Saddle point of both benchmark games by Riccati value iteration, plus the
//! smallest feasible risk parameter.
use leqg_po::benchmarks::{cartpole, illustrative};
use leqg_po::game_oracle::{estimate_gamma_inf, leqg_cost, solve_gare_value_iteration, ORACLE_MAX_ITER, ORACLE_TOL};

fn main() -> leqg_po::Result<()> {
    for (name, model) in [("illustrative", illustrative()), ("cartpole", cartpole())] {
        let sol = solve_gare_value_iteration(&model, ORACLE_TOL, ORACLE_MAX_ITER)?;
        println!("== {name} (gamma = {})", model.gamma());
        println!("iterations {}, residual {:.2e}", sol.iterations, sol.residual);
        println!("P* = {:.4}", sol.p_star);
        println!("K* = {:.4}", sol.k_star.matrix());
        println!("L* = {:.4}", sol.l_star.matrix());
        if let Some(cost) = leqg_cost(&model, &sol.p_star) {
            println!("risk-sensitive cost {cost:.4}");
        }
        println!("gamma_inf ~ {:.4}\n", estimate_gamma_inf(&model, 1e-6)?);
    }
    Ok(())
}
