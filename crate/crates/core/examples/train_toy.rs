//! Trains the toy model on small synthetic pairs and prints the loss curve.
//!
//! `cargo run --release --example train_toy`

use pcreg::pipeline::{toy_dataset, train_toy, ModelConfig};

fn main() -> pcreg::Result<()> {
    let data = toy_dataset(20, 1)?;
    let cfg = ModelConfig { seed: 1, ..ModelConfig::toy() };
    let (model, params, report) = train_toy(&data, &cfg, 200)?;
    for (i, l) in report.losses.iter().enumerate().step_by(20) {
        println!("step {i:>4}  loss {l:.4}  grad norm {:.3}", report.grad_norms[i]);
    }
    if let Some((a, b)) = report.smoothed() {
        println!("smoothed loss {a:.4} -> {b:.4} ({:.3}x)", b / a);
    }
    let pair = &data[0];
    let (est, diag) = model.register(&pair.src, &pair.tgt, &params)?;
    let m = pcreg::geom::metrics(&est, &pair.gt, pcreg::pipeline::ablation::TOY_THRESHOLDS);
    println!("training pair 0: RRE {:.2}°  RTE {:.3}  inlier ratio {:.2}", m.rre, m.rte, diag.inlier_ratio);
    Ok(())
}
