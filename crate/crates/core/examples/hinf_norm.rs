//! Closed-loop H-infinity norm from w to the cost output: frequency grid vs
//! bounded-real Riccati bisection, and the admissibility verdict.
use leqg_po::benchmarks::illustrative;
use leqg_po::game_oracle::{solve_gare_value_iteration, ORACLE_MAX_ITER, ORACLE_TOL};
use leqg_po::plant::{hinf_norm, hinf_norm_grid, is_admissible, GainK};

fn main() -> leqg_po::Result<()> {
    let model = illustrative();
    let sol = solve_gare_value_iteration(&model, ORACLE_TOL, ORACLE_MAX_ITER)?;
    let candidates = [
        ("K*", sol.k_star.clone()),
        ("1.5 K*", GainK::new(sol.k_star.matrix() * 1.5)?),
        ("0", GainK::zeros(3, 3)),
    ];
    for (name, k) in candidates {
        let adm = is_admissible(&model, &k)?;
        print!("{name:>7}: rho {:.4}", adm.spectral_radius);
        if adm.spectral_radius < 1.0 {
            print!("  grid {:.6}  bisection {:.6}", hinf_norm_grid(&model, &k, 4096)?, hinf_norm(&model, &k)?);
        }
        println!("  admissible {} {:?}", adm.admissible, adm.reason);
    }
    Ok(())
}
