use serde::Serialize;

use crate::error::Result;
use crate::geom::{metrics, registration_recall, RegistrationMetrics, SuccessThresholds};
use crate::io::synth::SynthPair;
use crate::serialize::Curve;

use super::config::{ModelConfig, Variant};
use super::train::train_toy;

/// Thresholds used when scoring toy registrations.
pub const TOY_THRESHOLDS: SuccessThresholds = SuccessThresholds {
    rot_deg: 5.0,
    trans: 0.1,
};

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub curve: Curve,
    pub order_indicator: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub mean_rre: f64,
    pub mean_rte: f64,
    pub recall: f64,
    /// Evaluation pairs on which registration returned an error.
    pub failures: usize,
}

/// Variant sweep at the default curve, then curve × order indicator for the hybrid.
pub fn ablation_grid(base: &ModelConfig) -> Vec<ModelConfig> {
    let mut grid = Vec::new();
    for v in Variant::ALL {
        grid.push(ModelConfig {
            variant: v,
            curve: Curve::Zorder,
            order_indicator: false,
            ..base.clone()
        });
    }
    for curve in [Curve::Zorder, Curve::Hilbert, Curve::Xyz] {
        for order_indicator in [false, true] {
            if curve == Curve::Zorder && !order_indicator {
                continue;
            }
            grid.push(ModelConfig {
                variant: Variant::Hybrid,
                curve,
                order_indicator,
                ..base.clone()
            });
        }
    }
    grid
}

/// Trains each configuration on `train` and scores it on `eval`.
pub fn run_ablation(train: &[SynthPair], eval: &[SynthPair], base: &ModelConfig, steps: usize) -> Result<Vec<AblationRow>> {
    ablation_grid(base)
        .into_iter()
        .map(|cfg| {
            let (model, params, report) = train_toy(train, &cfg, steps)?;
            let (initial_loss, final_loss) = report.smoothed().unwrap_or((f64::NAN, f64::NAN));
            let mut results: Vec<RegistrationMetrics> = Vec::new();
            let mut failures = 0;
            for p in eval {
                match model.register(&p.src, &p.tgt, &params) {
                    Ok((est, _)) => results.push(metrics(&est, &p.gt, TOY_THRESHOLDS)),
                    Err(_) => failures += 1,
                }
            }
            let n = results.len().max(1) as f64;
            let recall = registration_recall(&results) * results.len() as f64 / eval.len().max(1) as f64;
            Ok(AblationRow {
                variant: cfg.variant,
                curve: cfg.curve,
                order_indicator: cfg.order_indicator,
                initial_loss,
                final_loss,
                mean_rre: results.iter().map(|m| m.rre).sum::<f64>() / n,
                mean_rte: results.iter().map(|m| m.rte).sum::<f64>() / n,
                recall,
                failures,
            })
        })
        .collect()
}

/// Markdown table, rows ordered by recall then mean rotation error.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut sorted: Vec<&AblationRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.recall.total_cmp(&a.recall).then(a.mean_rre.total_cmp(&b.mean_rre)));
    let mut s = String::from("| rank | variant | curve | order indicator | loss start | loss end | mean RRE (deg) | mean RTE | RR | failures |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for (i, r) in sorted.iter().enumerate() {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.3} | {:.4} | {:.2} | {} |\n",
            i + 1,
            r.variant.name(),
            r.curve,
            if r.order_indicator { "on" } else { "off" },
            r.initial_loss,
            r.final_loss,
            r.mean_rre,
            r.mean_rte,
            r.recall,
            r.failures
        ));
    }
    s
}
