//! Encoder variant, curve and order-indicator sweep on the toy setup.
//!
//! `cargo run --release --example ablation -- [steps]`

use pcreg::io::synth::{synth_pair, SynthConfig};
use pcreg::pipeline::ablation::{ablation_table, run_ablation};
use pcreg::pipeline::{toy_dataset, ModelConfig};

fn main() -> pcreg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let train = toy_dataset(12, 1)?;
    let tiny = SynthConfig::preset("tiny")?;
    let eval = (0..6).map(|i| synth_pair(&tiny, 90_000 + i)).collect::<pcreg::Result<Vec<_>>>()?;
    let rows = run_ablation(&train, &eval, &ModelConfig::toy(), steps)?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
