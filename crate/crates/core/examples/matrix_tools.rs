//! Symmetric vectorization, duplication matrix and the Stein equation solver.
use leqg_po::matrix_kit::{duplication, lyap_residual, solve_dlyap, spectral_radius, unvecs, vecs, vecv};
use nalgebra::{dmatrix, dvector};

fn main() -> leqg_po::Result<()> {
    let x = dmatrix![2.0, 0.5, 0.0; 0.5, 1.0, -0.3; 0.0, -0.3, 4.0];
    let s = vecs(&x)?;
    println!("vecs(X) = {:?}", s.entries().as_slice());
    assert_eq!(unvecs(3, s.entries().as_slice()), x);

    // z^T X z == vecv(z)^T vecs(X)
    let z = dvector![1.0, -2.0, 0.5];
    println!("z'Xz = {:.6}, vecv(z)'vecs(X) = {:.6}", (z.transpose() * &x * &z)[0], vecv(&z).dot(s.entries()));

    let t = duplication(3);
    println!("T_3 is {}x{}, T+ T = I: {}", t.matrix().nrows(), t.matrix().ncols(), (t.pinv() * t.matrix()).is_identity(1e-12));

    let a = dmatrix![0.5, 0.2, 0.0; -0.1, 0.7, 0.3; 0.0, 0.0, 0.4];
    let q = dmatrix![1.0, 0.0, 0.0; 0.0, 2.0, 0.0; 0.0, 0.0, 1.0];
    let p = solve_dlyap(&a, &q)?;
    println!("rho(A) = {:.3}, P = {:.5}", spectral_radius(&a)?, p);
    println!("residual {:.2e}", lyap_residual(&a, &p, &q).norm());
    Ok(())
}
