//! Serializes a random cloud along every curve and compares locality.
//!
//! `cargo run --example serialize_cloud`

use pcreg::geom::{Point, PointCloud};
use pcreg::serialize::{locality_score, morton_encode, serialize, Curve, DEFAULT_DEPTH};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pcreg::Result<()> {
    // Bit interleave: x takes bit 0, y bit 1, z bit 2 of each triple.
    println!("morton(1, 0, 0) = {}", morton_encode([1, 0, 0], 1, None)?);
    println!("morton(1, 1, 1) = {}", morton_encode([1, 1, 1], 1, None)?);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cloud = PointCloud::new((0..4096).map(|_| Point::from_fn(|_, _| rng.random::<f64>())).collect())?;
    println!("\n{:<14} locality (k=5, lower is better)", "curve");
    for curve in Curve::ALL {
        let code = serialize(&cloud, curve, DEFAULT_DEPTH)?;
        println!("{:<14} {:.4}", curve.name(), locality_score(&cloud, &code, 5)?);
    }

    let code = serialize(&cloud, Curve::Zorder, DEFAULT_DEPTH)?;
    println!("\nfirst five points in z-order:");
    for &i in &code.order[..5] {
        let p = cloud.points()[i];
        println!("  #{i:<5} code {:>14}  ({:.3}, {:.3}, {:.3})", code.codes[i], p.x, p.y, p.z);
    }
    Ok(())
}
