//! Learning an admissible initial gain: simulate, identify (A, B, D) by least
//! squares, solve the bounded-real LMI on the estimate, check on the plant.
use leqg_po::benchmarks::cartpole;
use leqg_po::data_driven::ExplorationPolicy;
use leqg_po::plant::lmi_admissibility_check;
use leqg_po::sysid_init::learn_initial_controller;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> leqg_po::Result<()> {
    let model = cartpole();
    let policy = ExplorationPolicy::lqr(&model, 20.0, 20.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ic = learn_initial_controller(&model, &policy, 10_000, None, None, &mut rng)?;

    println!("identification error {:.3e}", ic.identified.residual_norm.unwrap_or(f64::NAN));
    println!("LMI: epsilon {:.2e}, mu {:.2e}, margin {:.2e}", ic.lmi.epsilon, ic.lmi.mu, ic.lmi.margin);
    println!("K = {:.4}", ic.k.matrix());
    println!(
        "true plant: rho {:.5}, hinf {:.4} (gamma {})",
        ic.admissibility.spectral_radius,
        ic.admissibility.hinf.unwrap_or(f64::NAN),
        model.gamma()
    );
    let idm = ic.identified.to_plant(model.c(), model.e(), model.gamma())?;
    println!("LMI certificate holds on the estimate: {}", lmi_admissibility_check(&idm, &ic.lmi.w, &ic.lmi.v));
    println!("{}", ic.identified.to_json());
    Ok(())
}
