//! Experiment configs are plain JSON. Write one, load it back, run a short
//! campaign with a fixed seed.
use leqg_po::experiments::{run_campaign, ExperimentConfig, Mode};

fn main() -> leqg_po::Result<()> {
    let mut cfg = ExperimentConfig::builtin("illustrative", Some(Mode::Learn))?;
    cfg.name = "illustrative-learn-short".into();
    cfg.trials = 4;
    cfg.master_seed = 2024;
    cfg.tau = Some(2000);

    let path = std::env::temp_dir().join("leqg-learn-short.json");
    std::fs::write(&path, cfg.to_json())?;
    let loaded = ExperimentConfig::load(&path)?;
    assert_eq!(loaded, cfg);
    println!("config at {}", path.display());

    let result = run_campaign(&loaded, Some(2))?;
    for t in &result.trials {
        let last = t.trace.as_ref().and_then(|tr| tr.last());
        match (last, &t.failure) {
            (Some(r), _) => println!("trial {} (seed {}): final rel_err_K {:.3e}", t.index, t.seed, r.rel_err_k),
            (None, Some(f)) => println!("trial {} (seed {}): failed in {}: {}", t.index, t.seed, f.stage, f.message),
            _ => {}
        }
    }
    println!("{}", serde_json::to_string_pretty(&result.summary()).expect("json"));
    Ok(())
}
