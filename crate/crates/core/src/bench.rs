//! FLOP and peak-memory accounting over tape traces, and the sequence-length
//! scaling study contrasting the linear SSM path with quadratic attention.
//!
//! FLOPs are charged by the tape at node creation: a matmul `(m,k)×(k,n)`
//! costs `2mkn`, a softmax row of `n` costs `5n`, a selective scan costs
//! [`scan_flops`](crate::numeric::scan_flops), elementwise ops cost one or a
//! few per entry and data movement (gather, slice, concat, transpose) is free.
//!
//! Peak memory models a forward executor that frees each tensor right after
//! its last consumer runs: the high-water mark of live `f64` bytes, walking
//! the trace in creation order. The final node stays live to the end.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, CrossAttentionBlock, SelfAttentionBlock};
use crate::error::{Error, Result};
use crate::numeric::params::{Params, Session};
use crate::numeric::{OpRecord, Tape, Tensor, Var};
use crate::ssm::{MambaBlock, MambaConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// FLOPs per op kind.
    pub per_op: BTreeMap<String, u64>,
    /// Sum of `per_op`.
    pub total_flops: u64,
    /// High-water mark of live tensor bytes.
    pub peak_bytes: usize,
    /// Wall time of the measured forward pass; never asserted.
    pub ms: f64,
}

impl CostReport {
    /// Multiply-adds, i.e. half the FLOPs.
    pub fn macs(&self) -> u64 {
        self.total_flops / 2
    }
}

/// Aggregates a trace into per-op FLOPs and the liveness peak.
pub fn count_flops(trace: &[OpRecord]) -> CostReport {
    let mut per_op: BTreeMap<String, u64> = BTreeMap::new();
    for r in trace {
        *per_op.entry(r.kind.to_string()).or_default() += r.flops;
    }
    let total_flops = per_op.values().sum();
    CostReport {
        per_op,
        total_flops,
        peak_bytes: peak_live_bytes(trace),
        ms: 0.0,
    }
}

/// Live-byte high-water mark when every tensor is freed after its last use.
pub fn peak_live_bytes(trace: &[OpRecord]) -> usize {
    let n = trace.len();
    if n == 0 {
        return 0;
    }
    let mut last_use: Vec<usize> = (0..n).collect();
    for r in trace {
        for &i in &r.inputs {
            last_use[i] = last_use[i].max(r.id);
        }
    }
    last_use[n - 1] = n - 1;
    let mut release = vec![0usize; n];
    for (i, &k) in last_use.iter().enumerate() {
        release[k] += trace[i].bytes();
    }
    let (mut live, mut peak) = (0usize, 0usize);
    for (k, r) in trace.iter().enumerate() {
        live += r.bytes();
        peak = peak.max(live);
        live -= release[k];
    }
    peak
}

/// Encoder path measured by the scaling study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BenchPath {
    /// Mamba blocks over both sequences.
    Ssm,
    /// Self-attention, self-attention, cross-attention per block.
    Attn,
    /// Mamba, self-attention, cross-attention per block.
    Hybrid,
}

impl BenchPath {
    pub const ALL: [BenchPath; 3] = [BenchPath::Ssm, BenchPath::Attn, BenchPath::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            BenchPath::Ssm => "ssm",
            BenchPath::Attn => "attn",
            BenchPath::Hybrid => "hybrid",
        }
    }
}

impl FromStr for BenchPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssm" => Ok(BenchPath::Ssm),
            "attn" => Ok(BenchPath::Attn),
            "hybrid" => Ok(BenchPath::Hybrid),
            _ => Err(Error::InvalidConfig(format!("unknown bench path '{s}' (ssm, attn, hybrid)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub width: usize,
    pub state: usize,
    pub expand: usize,
    pub heads: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            width: 8,
            state: 8,
            expand: 2,
            heads: 1,
            blocks: 1,
            seed: 0,
        }
    }
}

impl BenchConfig {
    fn mamba(&self) -> MambaConfig {
        MambaConfig {
            width: self.width,
            expand: self.expand,
            state: self.state,
            ..MambaConfig::default()
        }
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            width: self.width,
            heads: self.heads,
            ..AttentionConfig::default()
        }
    }
}

enum Stage {
    Mamba(MambaBlock),
    SelfAttn(SelfAttentionBlock),
    Cross(CrossAttentionBlock),
}

struct Encoder {
    params: Params,
    stages: Vec<Stage>,
}

impl Encoder {
    fn new(path: BenchPath, cfg: &BenchConfig) -> Result<Self> {
        let (mc, ac) = (cfg.mamba(), cfg.attention());
        mc.validate()?;
        ac.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut stages = Vec::new();
        for b in 0..cfg.blocks {
            let name = |k: &str| format!("b{b}.{k}");
            match path {
                BenchPath::Ssm => {
                    stages.push(Stage::Mamba(MambaBlock::init(&mut params, &name("mamba"), &mc, &mut rng)));
                }
                BenchPath::Attn => {
                    stages.push(Stage::SelfAttn(SelfAttentionBlock::init(&mut params, &name("self0"), &ac, &mut rng)));
                    stages.push(Stage::SelfAttn(SelfAttentionBlock::init(&mut params, &name("self1"), &ac, &mut rng)));
                    stages.push(Stage::Cross(CrossAttentionBlock::init(&mut params, &name("cross"), &ac, &mut rng)));
                }
                BenchPath::Hybrid => {
                    stages.push(Stage::Mamba(MambaBlock::init(&mut params, &name("mamba"), &mc, &mut rng)));
                    stages.push(Stage::SelfAttn(SelfAttentionBlock::init(&mut params, &name("self"), &ac, &mut rng)));
                    stages.push(Stage::Cross(CrossAttentionBlock::init(&mut params, &name("cross"), &ac, &mut rng)));
                }
            }
        }
        Ok(Self { params, stages })
    }

    fn forward(&self, s: &Session, mut src: Var, mut tgt: Var) -> Result<(Var, Var)> {
        for stage in &self.stages {
            (src, tgt) = match stage {
                Stage::Mamba(m) => (m.forward(s, src)?, m.forward(s, tgt)?),
                Stage::SelfAttn(a) => (a.forward(s, src)?, a.forward(s, tgt)?),
                Stage::Cross(c) => c.forward(s, src, tgt)?,
            };
        }
        Ok((src, tgt))
    }
}

/// Cost of one forward pass of `path` over a source and a target sequence
/// of `length` tokens each.
pub fn measure_path(path: BenchPath, length: usize, cfg: &BenchConfig) -> Result<CostReport> {
    if length == 0 {
        return Err(Error::EmptyFeatures);
    }
    let enc = Encoder::new(path, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ length as u64);
    let xs = Tensor::randn(length, cfg.width, 1.0, &mut rng);
    let xt = Tensor::randn(length, cfg.width, 1.0, &mut rng);
    let t = Tape::new();
    let s = Session::new(&t, &enc.params, false);
    let start = Instant::now();
    let (src, tgt) = enc.forward(&s, t.constant(xs), t.constant(xt))?;
    // Joins both outputs so the trace ends in one node.
    t.concat_rows(&[src, tgt])?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(CostReport {
        ms,
        ..count_flops(&t.trace())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub length: usize,
    pub path: BenchPath,
    pub flops: u64,
    pub peak_bytes: usize,
    pub ms: f64,
}

/// Least-squares fits of FLOPs against sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    /// R² of the affine fit `c0 + c1 L`.
    pub linear_r2: f64,
    /// `[c0, c1, c2]` of the quadratic fit `c0 + c1 L + c2 L²`.
    pub quadratic: [f64; 3],
    pub max_length: f64,
}

impl ScalingFit {
    /// `c2 L² / |c1 L|` at the largest measured length.
    pub fn quadratic_share(&self) -> f64 {
        let l = self.max_length;
        self.quadratic[2] * l * l / (self.quadratic[1] * l).abs()
    }
}

fn least_squares(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    a.svd(true, true)
        .solve(&b, 1e-12)
        .map(|c| c.iter().copied().collect())
        .map_err(|e| Error::InvalidConfig(e.to_string()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
}

impl ScalingTable {
    pub fn series(&self, path: BenchPath) -> Vec<&ScalingRow> {
        self.rows.iter().filter(|r| r.path == path).collect()
    }

    /// FLOPs ratio of each length to the previous one.
    pub fn ratios(&self, path: BenchPath) -> Vec<f64> {
        self.series(path).windows(2).map(|w| w[1].flops as f64 / w[0].flops as f64).collect()
    }

    /// Adjacent ratios rescaled to a doubling of the length,
    /// `r^(ln 2 / ln(L₁/L₀))`: 2 for linear cost, 4 for quadratic.
    pub fn ratios_per_doubling(&self, path: BenchPath) -> Vec<f64> {
        self.series(path)
            .windows(2)
            .map(|w| {
                let r = w[1].flops as f64 / w[0].flops as f64;
                let step = w[1].length as f64 / w[0].length as f64;
                r.powf(2f64.ln() / step.ln())
            })
            .collect()
    }

    pub fn flops_at(&self, path: BenchPath, length: usize) -> Option<u64> {
        self.rows.iter().find(|r| r.path == path && r.length == length).map(|r| r.flops)
    }

    /// Attention-path FLOPs over hybrid FLOPs at `length`.
    pub fn hybrid_saving(&self, length: usize) -> Option<f64> {
        Some(self.flops_at(BenchPath::Attn, length)? as f64 / self.flops_at(BenchPath::Hybrid, length)? as f64)
    }

    /// Needs at least three lengths for the quadratic fit.
    pub fn fit(&self, path: BenchPath) -> Result<ScalingFit> {
        let s = self.series(path);
        if s.len() < 3 {
            return Err(Error::InvalidConfig(format!("fit needs 3 lengths, got {}", s.len())));
        }
        let lmax = s.iter().map(|r| r.length).max().unwrap_or(1) as f64;
        // Lengths are scaled to [0, 1] for conditioning, then mapped back.
        let x: Vec<f64> = s.iter().map(|r| r.length as f64 / lmax).collect();
        let y: Vec<f64> = s.iter().map(|r| r.flops as f64).collect();
        let lin = least_squares(&x, &y, 1)?;
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res: f64 = x.iter().zip(&y).map(|(xi, yi)| (yi - lin[0] - lin[1] * xi).powi(2)).sum();
        let linear_r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
        let q = least_squares(&x, &y, 2)?;
        Ok(ScalingFit {
            linear_r2,
            quadratic: [q[0], q[1] / lmax, q[2] / (lmax * lmax)],
            max_length: lmax,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,path,flops,peak_bytes,ms\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{:.3}", r.length, r.path.name(), r.flops, r.peak_bytes, r.ms).unwrap();
        }
        out
    }
}

/// Measures every path at every length. Lengths must be strictly ascending
/// with at least two entries.
pub fn scaling_study(lengths: &[usize], paths: &[BenchPath], cfg: &BenchConfig) -> Result<ScalingTable> {
    if lengths.len() < 2 || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::InvalidConfig(
            "lengths must be positive, strictly ascending and at least two".into(),
        ));
    }
    let mut rows = Vec::new();
    for &path in paths {
        for &length in lengths {
            let c = measure_path(path, length, cfg)?;
            rows.push(ScalingRow {
                length,
                path,
                flops: c.total_flops,
                peak_bytes: c.peak_bytes,
                ms: c.ms,
            });
        }
    }
    Ok(ScalingTable { rows })
}
