//! State-space models: zero-order-hold discretization, the discrete
//! recurrence, its convolutional expansion, the input-selective SSM and the
//! gated Mamba block.
//!
//! The state matrix is diagonal. For continuous rates `a_i` and step `Δ`:
//! `Ā_i = exp(Δ a_i)` and `B̄_i = ((exp(Δ a_i) − 1) / (Δ a_i)) · Δ B_i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::numeric::params::{ParamId, Params, Session};
use crate::numeric::tape::zoh_factor;
use crate::numeric::{Tensor, Var};

/// Continuous-time SSM with diagonal state matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// Diagonal of `A`, length `N`.
    pub a: Vec<f64>,
    /// `N×L` input matrix.
    pub b: Tensor,
    /// `L×N` readout matrix.
    pub c: Tensor,
    /// Diagonal skip, length `L`.
    pub d: Vec<f64>,
    pub delta: f64,
}

/// Discretized system `h_k = Ā h_{k−1} + B̄ x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    /// Diagonal of `Ā`.
    pub abar: Vec<f64>,
    /// `N×L`.
    pub bbar: Tensor,
}

/// A discretization that is either shared by every step or varies per step.
#[derive(Debug, Clone, PartialEq)]
pub enum Discretization {
    TimeInvariant(DiscreteSsm),
    Selective(Vec<DiscreteSsm>),
}

impl SsmParams {
    pub fn validate(&self) -> Result<()> {
        let n = self.a.len();
        let l = self.d.len();
        if self.b.shape() != (n, l) || self.c.shape() != (l, n) {
            return Err(shape_err(
                "ssm",
                format!(
                    "a {n}, d {l}, b {:?}, c {:?}",
                    self.b.shape(),
                    self.c.shape()
                ),
            ));
        }
        Ok(())
    }
}

pub fn discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    if !(p.delta > 0.0) {
        return Err(Error::NonPositiveDelta(p.delta));
    }
    p.validate()?;
    let mut bbar = p.b.clone();
    let abar = p
        .a
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let z = p.delta * a;
            let k = zoh_factor(z) * p.delta;
            bbar.row_slice_mut(i).iter_mut().for_each(|x| *x *= k);
            z.exp()
        })
        .collect();
    Ok(DiscreteSsm { abar, bbar })
}

/// Runs `y_k = C h_k + D x_k` over the rows of `x` (`M×L`), starting from `h_0 = 0`.
pub fn ssm_scan(d: &DiscreteSsm, c: &Tensor, skip: &[f64], x: &Tensor) -> Result<Tensor> {
    let (n, l) = d.bbar.shape();
    if x.cols() != l || c.shape() != (l, n) || skip.len() != l || d.abar.len() != n {
        return Err(shape_err("ssm_scan", format!("x {:?}, c {:?}", x.shape(), c.shape())));
    }
    let mut h = vec![0.0; n];
    let mut y = Tensor::zeros(x.rows(), l);
    for k in 0..x.rows() {
        let xk = x.row_slice(k);
        for (i, hi) in h.iter_mut().enumerate() {
            let bx: f64 = d.bbar.row_slice(i).iter().zip(xk).map(|(b, x)| b * x).sum();
            *hi = d.abar[i] * *hi + bx;
        }
        let yk = y.row_slice_mut(k);
        for (j, out) in yk.iter_mut().enumerate() {
            *out = c.row_slice(j).iter().zip(&h).map(|(c, h)| c * h).sum::<f64>() + skip[j] * xk[j];
        }
    }
    Ok(y)
}

/// Convolution kernel `K_m = C Ā^m B̄` for `m < len`, each `L×L`.
pub fn ssm_kernel(d: &DiscreteSsm, c: &Tensor, len: usize) -> Vec<Tensor> {
    let (n, l) = d.bbar.shape();
    let mut pow = vec![1.0; n];
    (0..len)
        .map(|_| {
            let mut k = Tensor::zeros(l, l);
            for r in 0..l {
                for col in 0..l {
                    let v: f64 = (0..n).map(|i| c.get(r, i) * pow[i] * d.bbar.get(i, col)).sum();
                    k.set(r, col, v);
                }
            }
            pow.iter_mut().zip(&d.abar).for_each(|(p, a)| *p *= a);
            k
        })
        .collect()
}

/// Global convolution `y_k = Σ_m K_m x_{k−m}`; equals [`ssm_scan`] without the skip path.
pub fn ssm_conv(disc: &Discretization, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let Discretization::TimeInvariant(d) = disc else {
        return Err(Error::SelectiveParamsNotAllowed);
    };
    let l = d.bbar.cols();
    if x.cols() != l || c.rows() != l {
        return Err(shape_err("ssm_conv", format!("x {:?}, c {:?}", x.shape(), c.shape())));
    }
    let m = x.rows();
    let kernel = ssm_kernel(d, c, m);
    let mut y = Tensor::zeros(m, l);
    for k in 0..m {
        for (j, km) in kernel.iter().enumerate().take(k + 1) {
            let xr = x.row_slice(k - j);
            for r in 0..l {
                let v: f64 = km.row_slice(r).iter().zip(xr).map(|(a, b)| a * b).sum();
                y.set(k, r, y.get(k, r) + v);
            }
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MambaConfig {
    /// Model width `C`.
    pub width: usize,
    /// Inner width is `width · expand`.
    pub expand: usize,
    /// State size `N` per channel.
    pub state: usize,
    pub conv_kernel: usize,
    /// Prepend a learned token to the scanned sequence.
    pub order_indicator: bool,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            width: 32,
            expand: 2,
            state: 8,
            conv_kernel: 4,
            order_indicator: false,
        }
    }
}

impl MambaConfig {
    pub fn inner(&self) -> usize {
        self.width * self.expand
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.expand == 0 || self.state == 0 || self.conv_kernel == 0 {
            return Err(Error::InvalidConfig(
                "mamba width, expand, state and conv_kernel must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Input-selective SSM over `E` channels: `Δ_t = softplus(x_t W_Δ + b_Δ)`,
/// `B_t = x_t W_B`, `C_t = x_t W_C`, `A = −exp(a_log)`.
#[derive(Debug, Clone)]
pub struct SelectiveSsm {
    pub delta: Linear,
    pub b: Linear,
    pub c: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
}

impl SelectiveSsm {
    pub fn init<R: Rng>(params: &mut Params, name: &str, channels: usize, state: usize, rng: &mut R) -> Self {
        let delta = Linear::init(params, &format!("{name}.delta"), channels, channels, true, 0.1, rng);
        // Initial step sizes log-uniform in [1e-3, 1e-1].
        let bias: Vec<f64> = (0..channels)
            .map(|_| {
                let dt = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        *params.get_mut(delta.b.expect("delta bias")) = Tensor::row(&bias);
        let b = Linear::init(params, &format!("{name}.b"), channels, state, false, 1.0, rng);
        let c = Linear::init(params, &format!("{name}.c"), channels, state, false, 1.0, rng);
        let mut a_log = Tensor::zeros(channels, state);
        for r in 0..channels {
            for s in 0..state {
                a_log.set(r, s, ((s + 1) as f64).ln());
            }
        }
        Self {
            delta,
            b,
            c,
            a_log: params.add(format!("{name}.a_log"), a_log),
            d: params.add(format!("{name}.d"), Tensor::full(1, channels, 1.0)),
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let t = s.tape();
        let dl = self.delta.forward(s, x)?;
        let delta = t.softplus(dl);
        let b = self.b.forward(s, x)?;
        let c = self.c.forward(s, x)?;
        let a = t.neg(t.exp(s.var(self.a_log)));
        t.selective_scan(x, delta, a, b, c, s.var(self.d))
    }
}

/// Gated residual Mamba block:
/// `F' = LN(F)`, `u = SiLU(DW(F' W_in))`, `g = SiLU(F' W_g)`,
/// `out = (SSM(u) ⊙ g) W_out + F`.
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub cfg: MambaConfig,
    pub norm: LayerNorm,
    pub w_in: Linear,
    pub w_gate: Linear,
    pub conv: ParamId,
    pub conv_bias: ParamId,
    pub ssm: SelectiveSsm,
    pub w_out: Linear,
    pub order_token: Option<ParamId>,
}

impl MambaBlock {
    pub fn init<R: Rng>(params: &mut Params, name: &str, cfg: &MambaConfig, rng: &mut R) -> Self {
        let (c, e) = (cfg.width, cfg.inner());
        let conv_std = 1.0 / (cfg.conv_kernel as f64).sqrt();
        Self {
            cfg: cfg.clone(),
            norm: LayerNorm::init(params, &format!("{name}.norm"), c),
            w_in: Linear::init(params, &format!("{name}.in"), c, e, false, 1.0, rng),
            w_gate: Linear::init(params, &format!("{name}.gate"), c, e, false, 1.0, rng),
            conv: params.add(
                format!("{name}.conv"),
                Tensor::randn(cfg.conv_kernel, e, conv_std, rng),
            ),
            conv_bias: params.add(format!("{name}.conv_bias"), Tensor::zeros(1, e)),
            ssm: SelectiveSsm::init(params, &format!("{name}.ssm"), e, cfg.state, rng),
            w_out: Linear::init(params, &format!("{name}.out"), e, c, false, 0.5, rng),
            order_token: cfg
                .order_indicator
                .then(|| params.add(format!("{name}.order"), Tensor::randn(1, e, 0.1, rng))),
        }
    }

    /// `x` is an `M×C` sequence already in serialized order.
    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let t = s.tape();
        let (m, c) = t.shape(x);
        if c != self.cfg.width || m == 0 {
            return Err(shape_err("mamba_block", format!("input {:?}, width {}", (m, c), self.cfg.width)));
        }
        let xn = self.norm.forward(s, x)?;
        let u = self.w_in.forward(s, xn)?;
        let u = t.dwconv1d(u, s.var(self.conv))?;
        let u = t.add_row(u, s.var(self.conv_bias))?;
        let u = t.silu(u);
        let gate = self.w_gate.forward(s, xn)?;
        let gate = t.silu(gate);
        let y = match self.order_token {
            Some(tok) => {
                let seq = t.concat_rows(&[s.var(tok), u])?;
                let y = self.ssm.forward(s, seq)?;
                t.slice_rows(y, 1, m)?
            }
            None => self.ssm.forward(s, u)?,
        };
        let y = t.mul(y, gate)?;
        let y = self.w_out.forward(s, y)?;
        t.add(y, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gradcheck_params, Tape, GRAD_TOL};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_ssm(a: f64, b: f64, c: f64, d: f64, delta: f64) -> SsmParams {
        SsmParams {
            a: vec![a],
            b: Tensor::scalar(b),
            c: Tensor::scalar(c),
            d: vec![d],
            delta,
        }
    }

    fn random_ssm(rng: &mut ChaCha8Rng, n: usize, l: usize) -> SsmParams {
        SsmParams {
            a: (0..n).map(|_| -rng.random_range(0.05..2.0)).collect(),
            b: Tensor::randn(n, l, 1.0, rng),
            c: Tensor::randn(l, n, 1.0, rng),
            d: (0..l).map(|_| rng.random_range(-1.0..1.0)).collect(),
            delta: rng.random_range(0.01..0.5),
        }
    }

    #[test]
    fn discretize_examples() {
        let d = discretize(&scalar_ssm(-1.0, 1.0, 1.0, 0.0, 0.1)).unwrap();
        let e = (-0.1f64).exp();
        assert!((d.abar[0] - e).abs() < 1e-15);
        assert!((d.bbar.item() - (1.0 - e)).abs() < 1e-15);

        let d = discretize(&scalar_ssm(0.0, 3.0, 1.0, 0.0, 0.2)).unwrap();
        assert_eq!(d.abar[0], 1.0);
        assert!((d.bbar.item() - 0.6).abs() < 1e-15);

        let d = discretize(&scalar_ssm(-5.0, 2.0, 1.0, 0.0, 1e-12)).unwrap();
        assert!((d.abar[0] - 1.0).abs() < 1e-10);
        assert!((d.bbar.item() - 2e-12).abs() < 1e-20);

        assert!(matches!(
            discretize(&scalar_ssm(-1.0, 1.0, 1.0, 0.0, 0.0)),
            Err(Error::NonPositiveDelta(_))
        ));
    }

    #[test]
    fn scan_examples() {
        let d = DiscreteSsm {
            abar: vec![0.5],
            bbar: Tensor::scalar(1.0),
        };
        let y = ssm_scan(&d, &Tensor::scalar(1.0), &[0.0], &Tensor::col(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.5, 0.25]);
        let zeros = ssm_scan(&d, &Tensor::scalar(1.0), &[0.0], &Tensor::zeros(4, 1)).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));

        let mem = DiscreteSsm {
            abar: vec![0.0, 0.0],
            bbar: Tensor::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap(),
        };
        let c = Tensor::from_rows(&[[1.0, 0.0], [2.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[[1.0, -1.0], [0.5, 2.0]]).unwrap();
        let y = ssm_scan(&mem, &c, &[1.0, 1.0], &x).unwrap();
        let cb = c.matmul(&mem.bbar).unwrap();
        for k in 0..2 {
            for r in 0..2 {
                let want = cb.get(r, 0) * x.get(k, 0) + cb.get(r, 1) * x.get(k, 1) + x.get(k, r);
                assert!((y.get(k, r) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv_examples() {
        let d = DiscreteSsm {
            abar: vec![0.5],
            bbar: Tensor::scalar(1.0),
        };
        let k = ssm_kernel(&d, &Tensor::scalar(1.0), 3);
        assert_eq!(k.iter().map(Tensor::item).collect::<Vec<_>>(), vec![1.0, 0.5, 0.25]);
        let disc = Discretization::TimeInvariant(d.clone());
        let mut x = Tensor::zeros(5, 1);
        x.set(0, 0, 1.0);
        let y = ssm_conv(&disc, &Tensor::scalar(1.0), &x).unwrap();
        assert_eq!(y.data(), &[1.0, 0.5, 0.25, 0.125, 0.0625]);
        let sel = Discretization::Selective(vec![d.clone(), d]);
        assert!(matches!(
            ssm_conv(&sel, &Tensor::scalar(1.0), &x),
            Err(Error::SelectiveParamsNotAllowed)
        ));
    }

    #[test]
    fn conv_matches_scan_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for n in [1, 4, 16] {
            let p = random_ssm(&mut rng, n, 3);
            let d = discretize(&p).unwrap();
            let x = Tensor::randn(32, 3, 1.0, &mut rng);
            let scan = ssm_scan(&d, &p.c, &[0.0; 3], &x).unwrap();
            let conv = ssm_conv(&Discretization::TimeInvariant(d), &p.c, &x).unwrap();
            assert!(scan.max_abs_diff(&conv) <= 1e-10);
        }
    }

    /// Exact ODE solution by fine RK4 integration with the input held per step.
    fn rk4_reference(p: &SsmParams, x: &Tensor) -> Tensor {
        let n = p.a.len();
        let l = p.d.len();
        let sub = 400;
        let dt = p.delta / sub as f64;
        let mut h = vec![0.0; n];
        let mut y = Tensor::zeros(x.rows(), l);
        for k in 0..x.rows() {
            let bu: Vec<f64> = (0..n)
                .map(|i| p.b.row_slice(i).iter().zip(x.row_slice(k)).map(|(b, u)| b * u).sum())
                .collect();
            for _ in 0..sub {
                for i in 0..n {
                    let f = |hv: f64| p.a[i] * hv + bu[i];
                    let k1 = f(h[i]);
                    let k2 = f(h[i] + 0.5 * dt * k1);
                    let k3 = f(h[i] + 0.5 * dt * k2);
                    let k4 = f(h[i] + dt * k3);
                    h[i] += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                }
            }
            for r in 0..l {
                let v: f64 = p.c.row_slice(r).iter().zip(&h).map(|(c, h)| c * h).sum();
                y.set(k, r, v + p.d[r] * x.get(k, r));
            }
        }
        y
    }

    #[test]
    fn zoh_matches_ode_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let p = random_ssm(&mut rng, 6, 2);
            let x = Tensor::randn(20, 2, 1.0, &mut rng);
            let d = discretize(&p).unwrap();
            let scan = ssm_scan(&d, &p.c, &p.d, &x).unwrap();
            assert!(scan.max_abs_diff(&rk4_reference(&p, &x)) <= 1e-10);
        }
    }

    /// A per-channel selective scan with constant parameters is a block-diagonal LTI system.
    #[test]
    fn selective_scan_reduces_to_time_invariant_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (m, ch, n) = (12, 3, 4);
        let x = Tensor::randn(m, ch, 1.0, &mut rng);
        let delta_ch: Vec<f64> = vec![0.3; ch];
        let a = Tensor::uniform(ch, n, -2.0, -0.1, &mut rng);
        let brow = Tensor::randn(1, n, 1.0, &mut rng);
        let crow = Tensor::randn(1, n, 1.0, &mut rng);
        let skip = Tensor::randn(1, ch, 1.0, &mut rng);

        let tape = Tape::new();
        let rep = |row: &Tensor| Tensor::from_rows(&vec![row.data().to_vec(); m]).unwrap();
        let y = tape
            .selective_scan(
                tape.constant(x.clone()),
                tape.constant(Tensor::full(m, ch, delta_ch[0])),
                tape.constant(a.clone()),
                tape.constant(rep(&brow)),
                tape.constant(rep(&crow)),
                tape.constant(skip.clone()),
            )
            .unwrap();

        let mut b = Tensor::zeros(ch * n, ch);
        let mut c = Tensor::zeros(ch, ch * n);
        let mut adiag = vec![0.0; ch * n];
        for k in 0..ch {
            for s in 0..n {
                adiag[k * n + s] = a.get(k, s);
                b.set(k * n + s, k, brow.data()[s]);
                c.set(k, k * n + s, crow.data()[s]);
            }
        }
        let p = SsmParams {
            a: adiag,
            b,
            c: c.clone(),
            d: skip.data().to_vec(),
            delta: delta_ch[0],
        };
        let want = ssm_scan(&discretize(&p).unwrap(), &c, &p.d, &x).unwrap();
        assert!(tape.value(y).max_abs_diff(&want) <= 1e-10);
    }

    fn block(cfg: &MambaConfig, seed: u64) -> (Params, MambaBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let b = MambaBlock::init(&mut p, "blk", cfg, &mut rng);
        (p, b)
    }

    fn run_block(p: &Params, b: &MambaBlock, x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let s = Session::new(&tape, p, false);
        let y = b.forward(&s, tape.constant(x.clone())).unwrap();
        tape.value(y).clone()
    }

    fn small_cfg() -> MambaConfig {
        MambaConfig {
            width: 4,
            expand: 2,
            state: 3,
            conv_kernel: 4,
            order_indicator: false,
        }
    }

    #[test]
    fn selective_ssm_zero_input_and_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut p = Params::new();
        let ssm = SelectiveSsm::init(&mut p, "s", 4, 3, &mut rng);
        let eval = |x: &Tensor| {
            let tape = Tape::new();
            let s = Session::new(&tape, &p, false);
            let y = ssm.forward(&s, tape.constant(x.clone())).unwrap();
            tape.value(y).clone()
        };
        assert!(eval(&Tensor::zeros(6, 4)).data().iter().all(|&v| v == 0.0));

        let x = Tensor::randn(6, 4, 1.0, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|r| x.row_slice(r).to_vec()).collect();
        rows.extend(rows.clone());
        let doubled = Tensor::from_rows(&rows).unwrap();
        let y1 = eval(&x);
        let y2 = eval(&doubled);
        assert_eq!(&y2.data()[..24], y1.data());
        assert!(y2.gather_rows(&[6, 7, 8, 9, 10, 11]).max_abs_diff(&y1) > 1e-9);
    }

    #[test]
    fn zero_weights_make_block_an_identity() {
        let (mut p, b) = block(&small_cfg(), 45);
        p.zero_prefix("blk.out");
        let x = Tensor::randn(8, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(46));
        assert_eq!(run_block(&p, &b, &x), x);
    }

    #[test]
    fn block_is_order_sensitive() {
        let (p, b) = block(&small_cfg(), 47);
        let x = Tensor::randn(8, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(48));
        let perm = [3, 0, 7, 1, 5, 2, 6, 4];
        let y = run_block(&p, &b, &x);
        let y_perm = run_block(&p, &b, &x.gather_rows(&perm));
        assert!(y.gather_rows(&perm).max_abs_diff(&y_perm) > 1e-6);
    }

    #[test]
    fn block_is_causal() {
        let (p, b) = block(&small_cfg(), 49);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = Tensor::randn(8, 4, 1.0, &mut rng);
        let mut x2 = x.clone();
        for r in 5..8 {
            x2.row_slice_mut(r).iter_mut().for_each(|v| *v += 1.0);
        }
        let (y, y2) = (run_block(&p, &b, &x), run_block(&p, &b, &x2));
        assert_eq!(&y.data()[..20], &y2.data()[..20]);
        assert!(y.max_abs_diff(&y2) > 1e-6);
    }

    #[test]
    fn block_gradcheck() {
        for order_indicator in [false, true] {
            let cfg = MambaConfig {
                order_indicator,
                ..small_cfg()
            };
            let (p, b) = block(&cfg, 51);
            let x = Tensor::randn(8, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(52));
            let r = gradcheck_params(&p, &[x], |s, v| {
                let y = b.forward(s, v[0])?;
                Ok(s.tape().sum(y))
            })
            .unwrap();
            assert!(r.passed(GRAD_TOL), "{r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn stable_state_is_bounded(seed in 0u64..10_000, n in 1usize..8, m in 1usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_ssm(&mut rng, n, 2);
            let d = discretize(&p).unwrap();
            let x = Tensor::uniform(m, 2, -1.0, 1.0, &mut rng);
            let amax = d.abar.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let mut sup_bx = 0.0f64;
            let mut h = vec![0.0; n];
            for k in 0..m {
                let bx: Vec<f64> = (0..n)
                    .map(|i| d.bbar.row_slice(i).iter().zip(x.row_slice(k)).map(|(b, x)| b * x).sum())
                    .collect();
                sup_bx = sup_bx.max(bx.iter().map(|v| v * v).sum::<f64>().sqrt());
                for i in 0..n {
                    h[i] = d.abar[i] * h[i] + bx[i];
                }
                let hn = h.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(hn <= sup_bx / (1.0 - amax) + 1e-12);
            }
        }

        #[test]
        fn conv_equals_scan(seed in 0u64..10_000, n in 1usize..=16, m in 1usize..=64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_ssm(&mut rng, n, 2);
            let d = discretize(&p).unwrap();
            let x = Tensor::randn(m, 2, 1.0, &mut rng);
            let scan = ssm_scan(&d, &p.c, &[0.0, 0.0], &x).unwrap();
            let conv = ssm_conv(&Discretization::TimeInvariant(d), &p.c, &x).unwrap();
            prop_assert!(scan.max_abs_diff(&conv) <= 1e-10);
        }

        #[test]
        fn scan_is_causal(seed in 0u64..10_000, m in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_ssm(&mut rng, 4, 2);
            let d = discretize(&p).unwrap();
            let x = Tensor::randn(m, 2, 1.0, &mut rng);
            let cut = rng.random_range(1..m);
            let mut x2 = x.clone();
            for r in cut..m {
                x2.row_slice_mut(r).iter_mut().for_each(|v| *v += 3.0);
            }
            let y = ssm_scan(&d, &p.c, &p.d, &x).unwrap();
            let y2 = ssm_scan(&d, &p.c, &p.d, &x2).unwrap();
            prop_assert_eq!(&y.data()[..cut * 2], &y2.data()[..cut * 2]);
        }
    }
}
