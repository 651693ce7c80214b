//! Generates a partially overlapping pair and writes it to a directory.
//!
//! `cargo run --example synth_pair -- [out_dir]`

use std::path::PathBuf;

use pcreg::io::synth::{measured_overlap, synth_pair, SynthConfig};
use pcreg::io::{write_transform, write_xyz};

fn main() -> pcreg::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_pair_out".into()));
    for preset in ["highoverlap", "lowoverlap", "tiny"] {
        let cfg = SynthConfig::preset(preset)?;
        let pair = synth_pair(&cfg, 7)?;
        let check = measured_overlap(&pair.src, &pair.tgt, &pair.gt, pair.radius);
        println!(
            "{preset:<12} {} + {} points, overlap {:.3} (requested {:.2}), radius {:.4}",
            pair.src.len(),
            pair.tgt.len(),
            check,
            cfg.overlap,
            pair.radius
        );
        let sub = dir.join(preset);
        std::fs::create_dir_all(&sub)?;
        write_xyz(&sub.join("src.xyz"), &pair.src)?;
        write_xyz(&sub.join("tgt.xyz"), &pair.tgt)?;
        write_transform(&sub.join("gt.json"), &pair.gt)?;
    }
    println!("written under {}", dir.display());
    Ok(())
}
