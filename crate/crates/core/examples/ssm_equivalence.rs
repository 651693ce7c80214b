//! A time-invariant SSM computed as a recurrence and as a global convolution.
//!
//! `cargo run --example ssm_equivalence`

use pcreg::numeric::Tensor;
use pcreg::ssm::{discretize, ssm_conv, ssm_scan, Discretization, SsmParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pcreg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, l, m) = (8, 2, 48);
    let p = SsmParams {
        a: (0..n).map(|_| -rng.random_range(0.1..2.0)).collect(),
        b: Tensor::randn(n, l, 1.0, &mut rng),
        c: Tensor::randn(l, n, 1.0, &mut rng),
        d: vec![0.0; l],
        delta: 0.1,
    };
    let disc = discretize(&p)?;
    println!("Ā diagonal: {:?}", disc.abar.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>());

    let x = Tensor::randn(m, l, 1.0, &mut rng);
    let scan = ssm_scan(&disc, &p.c, &p.d, &x)?;
    let conv = ssm_conv(&Discretization::TimeInvariant(disc), &p.c, &x)?;
    println!("{m} steps, state {n}, width {l}");
    println!("max |scan − conv| = {:.3e}", scan.max_abs_diff(&conv));
    println!("y[last] scan {:?}", scan.row_slice(m - 1));
    println!("y[last] conv {:?}", conv.row_slice(m - 1));
    Ok(())
}
