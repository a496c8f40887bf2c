//! Disturbed dual loop: 50 seeded trials with random gain errors, aggregated
//! per outer step and written as CSV/JSON.
//!
//!     cargo run --release --example robust_campaign -- [illustrative|cartpole] [out_dir]
use std::path::PathBuf;

use leqg_po::experiments::{emit, run_campaign, ExperimentConfig, Mode};

fn main() -> leqg_po::Result<()> {
    let mut args = std::env::args().skip(1);
    let which = args.next().unwrap_or_else(|| "illustrative".into());
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("leqg-robust"));

    let cfg = ExperimentConfig::builtin(&which, Some(Mode::Disturbed))?;
    let result = run_campaign(&cfg, None)?;
    for row in &result.aggregate {
        println!(
            "i {:2}  rel_err_K {:.3e} (var {:.1e})  hinf {:.3}",
            row.i,
            row.mean_rel_err_k.unwrap_or(f64::NAN),
            row.var_rel_err_k.unwrap_or(f64::NAN),
            row.mean_hinf.unwrap_or(f64::NAN)
        );
    }
    println!("escapes: {} of {} recorded gains", result.escapes(), result.rows.len());
    for f in emit(&result, &out)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
