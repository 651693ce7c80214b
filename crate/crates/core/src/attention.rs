//! Scaled dot-product attention and the pre-norm Transformer blocks that
//! refine Mamba features: self-attention within a cloud and cross-attention
//! between the two clouds with one shared set of weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::numeric::params::{Params, Session};
use crate::numeric::{Tape, Var};

/// `softmax(Q Kᵀ / √d_k) V`.
pub fn attention(t: &Tape, q: Var, k: Var, v: Var, d_k: usize) -> Result<Var> {
    let (mq, dq) = t.shape(q);
    let (mk, dk) = t.shape(k);
    let (mv, _) = t.shape(v);
    if dq != dk || mk != mv || mk == 0 || mq == 0 {
        return Err(shape_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", t.shape(q), t.shape(k), t.shape(v)),
        ));
    }
    let kt = t.transpose(k);
    let logits = t.matmul(q, kt)?;
    let logits = t.scale(logits, 1.0 / (d_k as f64).sqrt());
    let p = t.softmax_rows(logits, None)?;
    t.matmul(p, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub width: usize,
    pub heads: usize,
    /// MLP hidden width is `width · mlp_ratio`.
    pub mlp_ratio: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 1,
            mlp_ratio: 2,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "attention width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.width / self.heads
    }
}

/// Multi-head projections `Q = x W_q`, `K = y W_k`, `V = y W_v`, output `W_o`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(params: &mut Params, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let w = cfg.width;
        Self {
            heads: cfg.heads,
            q: Linear::init(params, &format!("{name}.q"), w, w, false, 1.0, rng),
            k: Linear::init(params, &format!("{name}.k"), w, w, false, 1.0, rng),
            v: Linear::init(params, &format!("{name}.v"), w, w, false, 1.0, rng),
            out: Linear::init(params, &format!("{name}.o"), w, w, true, 0.5, rng),
        }
    }

    /// Queries from `x`, keys and values from `y`.
    pub fn forward(&self, s: &Session, x: Var, y: Var) -> Result<Var> {
        let t = s.tape();
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, y)?;
        let v = self.v.forward(s, y)?;
        let width = t.shape(q).1;
        let dk = width / self.heads;
        let out = if self.heads == 1 {
            attention(t, q, k, v, dk)?
        } else {
            let parts = (0..self.heads)
                .map(|h| {
                    let qh = t.slice_cols(q, h * dk, dk)?;
                    let kh = t.slice_cols(k, h * dk, dk)?;
                    let vh = t.slice_cols(v, h * dk, dk)?;
                    attention(t, qh, kh, vh, dk)
                })
                .collect::<Result<Vec<_>>>()?;
            t.concat_cols(&parts)?
        };
        self.out.forward(s, out)
    }
}

/// `x ← x + MHA(LN(x), LN(x))`, then `x ← x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SelfAttentionBlock {
    pub fn init<R: Rng>(params: &mut Params, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let w = cfg.width;
        Self {
            norm1: LayerNorm::init(params, &format!("{name}.norm1"), w),
            attn: MultiHeadAttention::init(params, &format!("{name}.attn"), cfg, rng),
            norm2: LayerNorm::init(params, &format!("{name}.norm2"), w),
            mlp: Mlp::init(params, &format!("{name}.mlp"), (w, w * cfg.mlp_ratio, w), rng),
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let t = s.tape();
        let xn = self.norm1.forward(s, x)?;
        let a = self.attn.forward(s, xn, xn)?;
        let x = t.add(x, a)?;
        let xn = self.norm2.forward(s, x)?;
        let m = self.mlp.forward(s, xn)?;
        t.add(x, m)
    }
}

/// Each cloud attends to the other through the same weights:
/// `src ← src + MHA(LN(src), LN(tgt))` and symmetrically for `tgt`,
/// both followed by the residual MLP.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossAttentionBlock {
    pub fn init<R: Rng>(params: &mut Params, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let w = cfg.width;
        Self {
            norm_q: LayerNorm::init(params, &format!("{name}.norm_q"), w),
            norm_kv: LayerNorm::init(params, &format!("{name}.norm_kv"), w),
            attn: MultiHeadAttention::init(params, &format!("{name}.attn"), cfg, rng),
            norm2: LayerNorm::init(params, &format!("{name}.norm2"), w),
            mlp: Mlp::init(params, &format!("{name}.mlp"), (w, w * cfg.mlp_ratio, w), rng),
        }
    }

    fn one_way(&self, s: &Session, x: Var, y: Var) -> Result<Var> {
        let t = s.tape();
        let xn = self.norm_q.forward(s, x)?;
        let yn = self.norm_kv.forward(s, y)?;
        let a = self.attn.forward(s, xn, yn)?;
        let x = t.add(x, a)?;
        let xn = self.norm2.forward(s, x)?;
        let m = self.mlp.forward(s, xn)?;
        t.add(x, m)
    }

    pub fn forward(&self, s: &Session, src: Var, tgt: Var) -> Result<(Var, Var)> {
        let t = s.tape();
        if t.shape(src).0 == 0 || t.shape(tgt).0 == 0 {
            return Err(Error::EmptyFeatures);
        }
        Ok((self.one_way(s, src, tgt)?, self.one_way(s, tgt, src)?))
    }
}
