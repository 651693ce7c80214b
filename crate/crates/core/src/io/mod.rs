//! Point files and synthetic registration pairs.

pub mod pointfile;
pub mod synth;

pub use pointfile::{parse_ply, parse_xyz, read_points, read_transform, write_ply, write_points, write_transform, write_xyz};
pub use synth::{synth_pair, SynthConfig, SynthPair};
