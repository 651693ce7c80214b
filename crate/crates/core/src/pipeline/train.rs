use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::synth::{synth_pair, SynthConfig, SynthPair};
use crate::losses::{loss_total, LossTerms};
use crate::numeric::params::{Params, Session};
use crate::numeric::{Tape, Tensor};

use super::config::{ModelConfig, OptimConfig};
use super::model::Model;

/// Window for the smoothed loss at the start and end of a trace.
pub const SMOOTHING_WINDOW: usize = 20;

/// Rescales `grads` in place so their joint norm is at most `max`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max {
        let k = max / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &Params, cfg: &OptimConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            cfg: cfg.clone(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Step size after `epoch` completed epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = epoch / self.cfg.decay_every.max(1);
        self.cfg.lr * self.cfg.decay.powi(k as i32)
    }

    /// Clips `grads`, then applies one update; returns the pre-clip norm.
    pub fn step(&mut self, params: &mut Params, grads: &mut [Tensor], lr: f64) -> f64 {
        let norm = clip_global_norm(grads, self.cfg.clip);
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        norm
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// Total loss per step.
    pub losses: Vec<f64>,
    pub terms: Vec<LossTerms<f64>>,
    /// Pre-clip gradient norm per step.
    pub grad_norms: Vec<f64>,
}

impl TrainReport {
    /// Mean of the first and last [`SMOOTHING_WINDOW`] losses.
    pub fn smoothed(&self) -> Option<(f64, f64)> {
        smoothed_endpoints(&self.losses, SMOOTHING_WINDOW)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,keypoint,spot,coarse,infonce,keycorr,inlier,translation,rotation,grad_norm\n");
        for (i, (l, t)) in self.losses.iter().zip(&self.terms).enumerate() {
            s.push_str(&format!(
                "{i},{l},{},{},{},{},{},{},{},{},{}\n",
                t.keypoint, t.spot, t.coarse, t.infonce, t.keycorr, t.inlier, t.translation, t.rotation, self.grad_norms[i]
            ));
        }
        s
    }
}

pub fn smoothed_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if losses.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

/// `n` small pairs from the `tiny` preset.
pub fn toy_dataset(n: usize, seed: u64) -> Result<Vec<SynthPair>> {
    let cfg = SynthConfig::preset("tiny")?;
    (0..n as u64).map(|i| synth_pair(&cfg, seed.wrapping_mul(1_000_003).wrapping_add(i))).collect()
}

/// Trains from the configuration's seed for `steps` steps, visiting pair
/// `i mod n` at step `i`. An epoch is one pass over the dataset.
pub fn train_toy(dataset: &[SynthPair], cfg: &ModelConfig, steps: usize) -> Result<(Model, Params, TrainReport)> {
    let (model, mut params) = Model::init(cfg)?;
    let mut report = TrainReport {
        losses: vec![],
        terms: vec![],
        grad_norms: vec![],
    };
    if steps == 0 {
        return Ok((model, params, report));
    }
    if dataset.is_empty() {
        return Err(Error::EmptySet);
    }
    let inputs = dataset
        .iter()
        .map(|p| model.prepare(&p.src, &p.tgt))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(&params, &cfg.optim);
    for step in 0..steps {
        let k = step % dataset.len();
        let gt = &dataset[k].gt;
        let tape = Tape::new();
        let s = Session::new(&tape, &params, true);
        let teacher = cfg.teacher_forcing.then_some(gt);
        let out = model.forward(&s, &inputs[k], teacher)?;
        let terms = model.losses(&s, &inputs[k], &out, gt)?;
        let total = loss_total(&tape, &terms, &cfg.loss)?;
        let value = tape.item(total);
        if !value.is_finite() {
            return Err(Error::DivergedLoss(step));
        }
        let g = tape.backward(total)?;
        let mut grads = s.param_grads(&g, &params);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedLoss(step));
        }
        let lr = opt.lr_at(step / dataset.len());
        let norm = opt.step(&mut params, &mut grads, lr);
        report.losses.push(value);
        report.terms.push(terms.values(&tape));
        report.grad_norms.push(norm);
    }
    Ok((model, params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_scales_to_threshold() {
        let mut g = vec![Tensor::row(&[60.0, 0.0]), Tensor::row(&[0.0, 80.0])];
        let before = clip_global_norm(&mut g, 0.5);
        assert!((before - 100.0).abs() < 1e-12);
        let after = g.iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt();
        assert!((after - 0.5).abs() < 1e-15);
        assert!((g[0].data()[0] / g[1].data()[1] - 0.75).abs() < 1e-15);
        let mut small = vec![Tensor::row(&[0.1, 0.2])];
        clip_global_norm(&mut small, 0.5);
        assert_eq!(small[0], Tensor::row(&[0.1, 0.2]));
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = Params::new();
        let id = p.add("w", Tensor::row(&[1.0, -2.0]));
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&p, &cfg);
        let mut g = vec![Tensor::row(&[0.3, -0.1])];
        opt.step(&mut p, &mut g, 0.01);
        let w = p.get(id).data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn decay_every_five_epochs() {
        let p = Params::new();
        let opt = AdamW::new(&p, &OptimConfig::default());
        assert_eq!(opt.lr_at(4), 1e-4);
        assert!((opt.lr_at(5) - 0.9e-4).abs() < 1e-18);
        assert!((opt.lr_at(12) - 0.81e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let cfg = ModelConfig::toy();
        let (_, fresh) = Model::init(&cfg).unwrap();
        let (_, params, report) = train_toy(&[], &cfg, 0).unwrap();
        assert_eq!(params.tensors(), fresh.tensors());
        assert!(report.losses.is_empty());
    }

    #[test]
    fn short_runs_are_deterministic() {
        let data = toy_dataset(2, 5).unwrap();
        let cfg = ModelConfig::toy();
        let (_, pa, a) = train_toy(&data, &cfg, 3).unwrap();
        let (_, pb, b) = train_toy(&data, &cfg, 3).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(pa.tensors(), pb.tensors());
    }

    #[test]
    fn smoothing_endpoints() {
        let l: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(smoothed_endpoints(&l, 20), Some((9.5, 39.5)));
        assert_eq!(smoothed_endpoints(&[], 20), None);
    }
}
