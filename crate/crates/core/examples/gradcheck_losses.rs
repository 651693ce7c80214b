//! Finite-difference checks of every loss term and network block.
//!
//! `cargo run --release --example gradcheck_losses`

use pcreg::checks::{run_gradchecks, CheckModule};

fn main() -> pcreg::Result<()> {
    let results = run_gradchecks(CheckModule::All)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("\n{} of {} checks passed", results.len() - failed, results.len());
    Ok(())
}
