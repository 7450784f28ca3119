//! Scalar objectives: pixel L1, feature-space perceptual loss, the
//! relativistic-average GAN pair, and the weighted generator objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Bound, FeatureExtractor};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_percep: f64,
    pub w_gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_l1: 1.0,
            w_percep: 1.0,
            w_gan: 0.005,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_l1", self.w_l1), ("w_percep", self.w_percep), ("w_gan", self.w_gan)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {w}")));
            }
        }
        Ok(())
    }
}

pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("l1: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Sum over feature stages of the mean absolute feature difference.
pub fn perceptual_loss(fx: &FeatureExtractor, sr: &Tensor, hr: &Tensor) -> Result<f64> {
    if sr.shape() != hr.shape() {
        return Err(Error::Dimension(format!(
            "perceptual: {:?} vs {:?}",
            sr.shape(),
            hr.shape()
        )));
    }
    let fa = fx.features(sr)?;
    let fb = fx.features(hr)?;
    fa.iter().zip(&fb).map(|(a, b)| l1_loss(a, b)).sum()
}

/// Differentiable perceptual loss of `sr` against precomputed target maps.
pub fn perceptual_loss_graph(
    g: &mut Graph,
    fx: &FeatureExtractor,
    fx_params: &Bound,
    sr: Var,
    target_maps: &[Var],
) -> Result<Var> {
    let maps = fx.forward(g, fx_params, sr)?;
    let mut total: Option<Var> = None;
    for (m, t) in maps.into_iter().zip(target_maps) {
        let d = g.mean_abs_diff(m, *t)?;
        total = Some(match total {
            Some(acc) => g.add(acc, d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::Argument("feature extractor produced no maps".into()))
}

/// Feature maps of `hr` bound as graph constants.
pub fn target_maps(g: &mut Graph, fx: &FeatureExtractor, hr: &Tensor) -> Result<Vec<Var>> {
    Ok(fx.features(hr)?.into_iter().map(|m| g.constant(m)).collect())
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)` without overflow for large |z|.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    z.min(0.0) - (-z.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanRole {
    Generator,
    Discriminator,
}

/// Relativistic-average loss and its gradients w.r.t. the real and fake logits.
///
/// With `d_r = C_r − mean C_f` and `d_f = C_f − mean C_r`:
/// discriminator `−mean log σ(d_r) − mean log σ(−d_f)`,
/// generator `−mean log σ(−d_r) − mean log σ(d_f)`.
pub(crate) fn relativistic_with_grad(real: &[f64], fake: &[f64], role: GanRole) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Argument("GAN loss needs non-empty logit lists".into()));
    }
    let a = match role {
        GanRole::Discriminator => 1.0,
        GanRole::Generator => -1.0,
    };
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let mean_r = real.iter().sum::<f64>() / nr;
    let mean_f = fake.iter().sum::<f64>() / nf;
    let mut loss = 0.0;
    // dL/d(d_r) and dL/d(d_f)
    let gr: Vec<f64> = real
        .iter()
        .map(|&r| {
            let z = a * (r - mean_f);
            loss -= log_sigmoid(z) / nr;
            -a * sigmoid(-z) / nr
        })
        .collect();
    let gf: Vec<f64> = fake
        .iter()
        .map(|&f| {
            let z = -a * (f - mean_r);
            loss -= log_sigmoid(z) / nf;
            a * sigmoid(-z) / nf
        })
        .collect();
    let sum_gr: f64 = gr.iter().sum();
    let sum_gf: f64 = gf.iter().sum();
    let d_real = gr.iter().map(|g| g - sum_gf / nr).collect();
    let d_fake = gf.iter().map(|g| g - sum_gr / nf).collect();
    Ok((loss, d_real, d_fake))
}

pub fn gan_loss_g(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    relativistic_with_grad(real_logits, fake_logits, GanRole::Generator).map(|r| r.0)
}

pub fn gan_loss_d(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    relativistic_with_grad(real_logits, fake_logits, GanRole::Discriminator).map(|r| r.0)
}

pub fn total_g_loss(w: &LossWeights, l1: f64, percep: f64, gan_g: f64) -> f64 {
    w.w_l1 * l1 + w.w_percep * percep + w.w_gan * gan_g
}
