//! Small trainable layers shared by the encoder, matching and estimation heads.

use rand::Rng;

use crate::error::Result;
use crate::numeric::params::{ParamId, Params, Session};
use crate::numeric::{Tensor, Var};

/// `y = x·W + b`, with `W` drawn from `N(0, gain²/fan_in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init<R: Rng>(
        params: &mut Params,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = params.add(format!("{name}.w"), Tensor::randn(fan_in, fan_out, std, rng));
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(1, fan_out)));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        s.tape().linear(x, s.var(self.w), self.b.map(|b| s.var(b)))
    }
}

/// Row-wise layer normalization with learnable gain (init 1) and bias (init 0).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(params: &mut Params, name: &str, width: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.gain"), Tensor::full(1, width, 1.0)),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(1, width)),
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let t = s.tape();
        let n = t.layernorm_rows(x);
        let n = t.mul_row(n, s.var(self.gain))?;
        t.add_row(n, s.var(self.bias))
    }
}

/// Two-layer perceptron `Linear → SiLU → Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn init<R: Rng>(
        params: &mut Params,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::init(params, &format!("{name}.l1"), dims.0, dims.1, true, 1.0, rng),
            l2: Linear::init(params, &format!("{name}.l2"), dims.1, dims.2, true, 1.0, rng),
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let h = self.l1.forward(s, x)?;
        let h = s.tape().silu(h);
        self.l2.forward(s, h)
    }
}
