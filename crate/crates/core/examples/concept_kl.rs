//! Diagonal-Gaussian KL diagnostic: closed form against a Monte Carlo
//! estimate, and the per-concept form fitted from latent samples.

use m2kt::numerics::SeededRng;
use m2kt::verify::{concept_kl, fit_diagonal_gaussian, kl_diagonal_gaussian};

fn main() -> m2kt::Result<()> {
    let mut rng = SeededRng::new(5);
    let mu1 = [0.0, 1.0, -0.5];
    let var1 = [1.0, 0.5, 2.0];
    let mu2 = [1.0, 2.5, 0.5];
    let var2 = [0.8, 1.0, 1.5];
    let closed = kl_diagonal_gaussian(&mu1, &var1, &mu2, &var2);
    let n = 100_000;
    let mut acc = 0.0;
    for _ in 0..n {
        for i in 0..3 {
            let x = mu1[i] + var1[i].sqrt() * rng.normal();
            let lp = -0.5 * ((x - mu1[i]).powi(2) / var1[i] + var1[i].ln());
            let lq = -0.5 * ((x - mu2[i]).powi(2) / var2[i] + var2[i].ln());
            acc += lp - lq;
        }
    }
    println!("closed form {closed:.5}, Monte Carlo ({n} samples) {:.5}", acc / n as f64);

    let a: Vec<Vec<f64>> = (0..500).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
    let b: Vec<Vec<f64>> = (0..500)
        .map(|_| (0..4).map(|_| 0.5 + 1.5 * rng.normal()).collect())
        .collect();
    let (mean, var) = fit_diagonal_gaussian(&b)?;
    println!("fitted b: mean {mean:.2?} var {var:.2?}");
    println!("KL(a || a) = {:.2e}", concept_kl(&a, &a)?);
    println!("KL(a || b) = {:.4}", concept_kl(&a, &b)?);
    Ok(())
}
