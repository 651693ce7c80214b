//! Seeded finite-difference gradient checks of every differentiable module,
//! shared by the `gradcheck` command and the acceptance suite.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, CrossAttentionBlock, SelfAttentionBlock};
use crate::backbone::{build_hierarchy, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud, RigidTransform};
use crate::io::synth::{synth_pair, SynthConfig};
use crate::losses::{
    loss_coarse, loss_infonce, loss_inlier, loss_keycorr, loss_keypoint, loss_pose, loss_spot, GtPair,
};
use crate::numeric::params::{Params, Session};
use crate::numeric::{gradcheck, gradcheck_params, GradcheckReport, Tape, Tensor, GRAD_TOL};
use crate::pipeline::{Model, ModelConfig};
use crate::ssm::{MambaBlock, MambaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckModule {
    Losses,
    Ssm,
    Attention,
    Backbone,
    /// The composed coarse stage of the full model.
    Pipeline,
    All,
}

impl FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" => Ok(Self::Losses),
            "ssm" => Ok(Self::Ssm),
            "attention" => Ok(Self::Attention),
            "backbone" => Ok(Self::Backbone),
            "pipeline" => Ok(Self::Pipeline),
            "all" => Ok(Self::All),
            _ => Err(Error::InvalidConfig(format!(
                "unknown module '{s}' (losses, ssm, attention, backbone, pipeline, all)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub report: GradcheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed(GRAD_TOL)
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} {:>5} entries  max rel err {:.2e}  {}",
            self.name,
            self.report.checked,
            self.report.max_rel_err,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        if let Some((i, j, a, n)) = self.report.worst {
            write!(f, "  (worst: input {i}[{j}] analytic {a:.6e} numeric {n:.6e})")?;
        }
        Ok(())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn outcome(name: &'static str, report: Result<GradcheckReport>) -> Result<CheckOutcome> {
    Ok(CheckOutcome { name, report: report? })
}

/// One check per loss term, each on its own seeded toy.
pub fn loss_checks() -> Result<Vec<CheckOutcome>> {
    let mut g = rng(101);
    let gt = RigidTransform::random(&mut g, 60.0, 1.0);
    let pairs = [GtPair { src: 0, tgt: 1, overlap: 0.4 }, GtPair { src: 2, tgt: 3, overlap: 0.9 }];
    let logits = Tensor::randn(3, 4, 1.0, &mut g);
    let mut out = Vec::new();

    let kp = [
        Tensor::randn(4, 3, 1.0, &mut g),
        Tensor::randn(4, 1, 1.0, &mut g),
        Tensor::randn(5, 3, 1.0, &mut g),
        Tensor::randn(5, 1, 1.0, &mut g),
    ];
    out.push(outcome(
        "loss_keypoint",
        gradcheck(&kp, |t, v| loss_keypoint(t, v[0], t.softplus(v[1]), v[2], t.softplus(v[3]))),
    )?);
    out.push(outcome(
        "loss_spot",
        gradcheck(&[logits.clone(), logits.map(|x| 0.5 - x)], |t, v| {
            let a = t.softmax_rows(v[0], None)?;
            let b = t.softmax_rows(v[1], None)?;
            loss_spot(t, &[a, b], &pairs)
        }),
    )?);
    let (os, ot) = (Tensor::randn(3, 1, 1.0, &mut g), Tensor::randn(4, 1, 1.0, &mut g));
    out.push(outcome(
        "loss_coarse",
        gradcheck(&[logits.clone(), os, ot], |t, v| {
            let p = t.softmax_rows(v[0], None)?;
            loss_coarse(t, p, &pairs, t.sigmoid(v[1]), &[1], t.sigmoid(v[2]), &[0, 2])
        }),
    )?);
    let nce = [
        Tensor::randn(3, 4, 1.0, &mut g),
        Tensor::randn(5, 4, 1.0, &mut g),
        Tensor::randn(4, 4, 0.5, &mut g),
    ];
    let allowed: Vec<bool> = (0..15).map(|i| i % 4 != 2).collect();
    out.push(outcome(
        "loss_infonce",
        gradcheck(&nce, |t, v| {
            let w = t.scale(t.add(v[2], t.transpose(v[2]))?, 0.5);
            loss_infonce(t, v[0], v[1], w, &[0, 3, 1], &allowed)
        }),
    )?);
    let kc = [Tensor::randn(4, 3, 1.0, &mut g), Tensor::randn(4, 3, 1.0, &mut g)];
    out.push(outcome("loss_keycorr", gradcheck(&kc, |t, v| loss_keycorr(t, v[0], v[1], &gt)))?);
    let s = Tensor::randn(5, 1, 1.0, &mut g);
    out.push(outcome(
        "loss_inlier",
        gradcheck(&[s], |t, v| loss_inlier(t, t.sigmoid(v[0]), &[1.0, 0.0, 0.0, 1.0, 1.0])),
    )?);
    let pose = [Tensor::randn(3, 3, 1.0, &mut g), Tensor::randn(1, 3, 1.0, &mut g)];
    out.push(outcome(
        "loss_translation",
        gradcheck(&pose, |t, v| Ok(loss_pose(t, t.kabsch_rotation(v[0])?, v[1], &gt)?.0)),
    )?);
    out.push(outcome(
        "loss_rotation",
        gradcheck(&pose, |t, v| Ok(loss_pose(t, t.kabsch_rotation(v[0])?, v[1], &gt)?.1)),
    )?);
    Ok(out)
}

pub fn ssm_checks() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (name, order_indicator) in [("mamba_block", false), ("mamba_block+order", true)] {
        let cfg = MambaConfig {
            width: 4,
            expand: 2,
            state: 3,
            conv_kernel: 4,
            order_indicator,
        };
        let mut p = Params::new();
        let b = MambaBlock::init(&mut p, "m", &cfg, &mut rng(51));
        let x = Tensor::randn(8, 4, 1.0, &mut rng(52));
        out.push(outcome(
            name,
            gradcheck_params(&p, &[x], |s, v| {
                let t = s.tape();
                Ok(t.sum(t.square(b.forward(s, v[0])?)))
            }),
        )?);
    }
    Ok(out)
}

pub fn attention_checks() -> Result<Vec<CheckOutcome>> {
    let cfg = AttentionConfig {
        width: 8,
        heads: 2,
        mlp_ratio: 2,
    };
    let mut p = Params::new();
    let sa = SelfAttentionBlock::init(&mut p, "sa", &cfg, &mut rng(11));
    let x = Tensor::randn(6, 8, 1.0, &mut rng(12));
    let self_attn = outcome(
        "self_attention",
        gradcheck_params(&p, &[x], |s, v| {
            let t = s.tape();
            Ok(t.sum(t.square(sa.forward(s, v[0])?)))
        }),
    )?;

    let mut p = Params::new();
    let ca = CrossAttentionBlock::init(&mut p, "ca", &AttentionConfig { heads: 1, ..cfg }, &mut rng(13));
    let a = Tensor::randn(4, 8, 1.0, &mut rng(14));
    let c = Tensor::randn(3, 8, 1.0, &mut rng(15));
    let cross = outcome(
        "cross_attention",
        gradcheck_params(&p, &[a, c], |s, v| {
            let t = s.tape();
            let (u, w) = ca.forward(s, v[0], v[1])?;
            let (su, sw) = (t.sum(t.square(u)), t.sum(t.square(w)));
            t.add(su, sw)
        }),
    )?;
    Ok(vec![self_attn, cross])
}

pub fn backbone_checks() -> Result<Vec<CheckOutcome>> {
    let cfg = BackboneConfig {
        voxel_sizes: vec![0.3, 0.6, 1.2],
        widths: vec![4, 5, 6],
    };
    let mut p = Params::new();
    let b = Backbone::init(&mut p, "bb", &cfg, &mut rng(7));
    let mut g = rng(8);
    let cloud = PointCloud::new((0..50).map(|_| Point::from_fn(|_, _| g.random_range(-1.0..1.0))).collect())?;
    let h = build_hierarchy(&cloud, &cfg.voxel_sizes)?;
    Ok(vec![outcome(
        "backbone",
        gradcheck_params(&p, &[], |s, _| {
            let f = b.forward(s, &h)?;
            let t = s.tape();
            let top = t.sum(*f.encoded.last().expect("encoder levels"));
            let fine = t.sum(t.square(f.decoded[0]));
            t.add(top, fine)
        }),
    )?])
}

/// A deliberately narrow model so every parameter can be perturbed.
pub fn micro_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.backbone.widths = vec![3, 3, 3];
    cfg.width = 4;
    cfg.blocks = 1;
    cfg.state = 2;
    cfg.expand = 1;
    cfg.desc_width = 3;
    cfg
}

/// Backbone, encoder and overlap-aware matching composed end to end.
pub fn pipeline_checks() -> Result<Vec<CheckOutcome>> {
    let mut cfg = micro_config();
    let (model, params) = Model::init(&cfg)?;
    cfg.backbone.voxel_sizes = vec![0.2, 0.4, 0.8];
    let model = Model { cfg, ..model };
    let synth = SynthConfig {
        n_points: 60,
        ..SynthConfig::preset("tiny")?
    };
    let pair = synth_pair(&synth, 7)?;
    let input = model.prepare(&pair.src, &pair.tgt)?;
    // A fixed linear read-out keeps the finite-difference truncation small.
    let probe = {
        let t = Tape::new();
        let s = Session::new(&t, &params, false);
        let (_, layers, _) = model.coarse_stage(&s, &input)?;
        let (r, c) = t.shape(layers[0]);
        Tensor::randn(r, c, 1.0, &mut rng(5))
    };
    Ok(vec![outcome(
        "coarse_stage",
        gradcheck_params(&params, &[], |s, _| {
            let (_, layers, _) = model.coarse_stage(s, &input)?;
            let t = s.tape();
            Ok(t.sum(t.mul(layers[0], t.constant(probe.clone()))?))
        }),
    )?])
}

pub fn run_gradchecks(module: CheckModule) -> Result<Vec<CheckOutcome>> {
    Ok(match module {
        CheckModule::Losses => loss_checks()?,
        CheckModule::Ssm => ssm_checks()?,
        CheckModule::Attention => attention_checks()?,
        CheckModule::Backbone => backbone_checks()?,
        CheckModule::Pipeline => pipeline_checks()?,
        CheckModule::All => {
            let mut v = loss_checks()?;
            v.extend(ssm_checks()?);
            v.extend(attention_checks()?);
            v.extend(backbone_checks()?);
            v.extend(pipeline_checks()?);
            v
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_term_is_checked_and_passes() {
        let v = loss_checks().unwrap();
        assert_eq!(v.len(), 8);
        for o in &v {
            assert!(o.passed(), "{o}");
        }
    }

    #[test]
    fn module_names_parse() {
        assert_eq!("ssm".parse::<CheckModule>().unwrap(), CheckModule::Ssm);
        assert!("optimizer".parse::<CheckModule>().is_err());
    }
}
