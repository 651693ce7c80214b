//! FLOPs and peak memory of the SSM, attention and hybrid encoder paths as
//! the serialized sequence grows.
//!
//! `cargo run --release --example scaling_study`

use pcreg::bench::{scaling_study, BenchConfig, BenchPath};

fn main() -> pcreg::Result<()> {
    let lengths = [256, 512, 1024, 1536];
    let table = scaling_study(&lengths, &BenchPath::ALL, &BenchConfig::default())?;
    print!("{}", table.to_csv());
    println!();
    for p in BenchPath::ALL {
        let fit = table.fit(p)?;
        println!(
            "{:<6} ratios per doubling {:?}  linear R² {:.6}  quadratic share {:.4}",
            p.name(),
            table.ratios_per_doubling(p).iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>(),
            fit.linear_r2,
            fit.quadratic_share()
        );
    }
    if let Some(s) = table.hybrid_saving(1536) {
        println!("attention-only / hybrid FLOPs at 1536 tokens: {s:.2}x");
    }
    Ok(())
}
