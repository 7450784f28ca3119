//! ℓ∞ PGD against the generator, started from structured noise.
//!
//! The attack perturbs an LR input to maximize the generator's
//! reconstruction objective (L1 and/or perceptual) against the clean HR
//! target, with the generator weights held fixed. Each iterate is projected
//! onto the intersection of the ε-ball around the clean input and `[0,1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Image, PatchPair};
use crate::error::{Error, Result};
use crate::graph::{sign, Graph};
use crate::losses::perceptual_loss_graph;
use crate::model::{FeatureExtractor, Generator, ModelBundle};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub iters: usize,
    pub alpha: f64,
    pub structure_scale: f64,
    pub use_l1: bool,
    pub use_percep: bool,
    /// Re-centre the ε-ball on the running iterate instead of the clean
    /// input. Off by default; with it on, the distance to the clean input is
    /// no longer bounded by ε.
    pub recenter: bool,
    pub seed: u64,
}

pub const DEFAULT_EPSILON: f64 = 14.0 / 255.0;

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::with_epsilon(DEFAULT_EPSILON)
    }
}

impl AttackConfig {
    /// Defaults with the given ε and `alpha = ε/2`.
    pub fn with_epsilon(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            iters: 2,
            alpha: epsilon / 2.0,
            structure_scale: 1.5,
            use_l1: true,
            use_percep: true,
            recenter: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0,1], got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.alpha <= self.epsilon) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, epsilon], got {} with epsilon {}",
                self.alpha, self.epsilon
            )));
        }
        if self.epsilon > 0.0 && self.iters > 0 && self.alpha == 0.0 {
            return Err(Error::Config("alpha must be positive when epsilon > 0".into()));
        }
        if !(self.structure_scale >= 1.0) || !self.structure_scale.is_finite() {
            return Err(Error::Config(format!(
                "structure_scale must be ≥ 1, got {}",
                self.structure_scale
            )));
        }
        if self.iters > 0 && !self.use_l1 && !self.use_percep {
            return Err(Error::Config("attack needs at least one of use_l1/use_percep".into()));
        }
        Ok(())
    }
}

/// Uniform `[−ε, ε]` noise drawn on a `⌈h/scale⌉×⌈w/scale⌉` grid per channel and
/// spread back to `h×w` by nearest neighbour (`i ↦ ⌊i/scale⌋`). Shape `[1,c,h,w]`.
pub fn structured_noise(h: usize, w: usize, c: usize, epsilon: f64, scale: f64, seed: u64) -> Result<Tensor> {
    if !(scale >= 1.0) || !scale.is_finite() {
        return Err(Error::Config(format!("structure_scale must be ≥ 1, got {scale}")));
    }
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Dimension("noise dimensions must be positive".into()));
    }
    let gh = (h as f64 / scale).ceil() as usize;
    let gw = (w as f64 / scale).ceil() as usize;
    let mut rng = stream(seed, &[purpose::ATTACK_NOISE]);
    let coarse: Vec<f64> = (0..c * gh * gw)
        .map(|_| epsilon * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();
    let map = |i: usize, grid: usize| ((i as f64 / scale).floor() as usize).min(grid - 1);
    let mut out = Tensor::zeros([1, c, h, w]);
    let data = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let gy = map(y, gh);
            for x in 0..w {
                data[(ch * h + y) * w + x] = coarse[(ch * gh + gy) * gw + map(x, gw)];
            }
        }
    }
    Ok(out)
}

pub fn init_structured_noise(h: usize, w: usize, c: usize, cfg: &AttackConfig) -> Result<Tensor> {
    structured_noise(h, w, c, cfg.epsilon, cfg.structure_scale, cfg.seed)
}

/// Clamp `x` elementwise to `[max(0, x0 − ε), min(1, x0 + ε)]`.
pub fn project(x: &Tensor, x0: &Tensor, epsilon: f64) -> Result<Tensor> {
    if x.shape() != x0.shape() {
        return Err(Error::Dimension(format!(
            "project: {:?} vs {:?}",
            x.shape(),
            x0.shape()
        )));
    }
    Ok(x.zip_map(x0, |v, c| v.clamp((c - epsilon).max(0.0), (c + epsilon).min(1.0))))
}

/// The attacked objective and its gradient w.r.t. the LR input. Generator
/// and feature weights enter the graph as constants.
pub(crate) fn loss_and_input_grad(
    generator: &Generator,
    features: &FeatureExtractor,
    x: &Tensor,
    hr: &Tensor,
    hr_maps: &[Tensor],
    cfg: &AttackConfig,
    with_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    if !cfg.use_l1 && !cfg.use_percep {
        return Err(Error::Config("attack loss needs at least one of use_l1/use_percep".into()));
    }
    let mut g = Graph::new();
    let p = generator.bind(&mut g, false);
    let xv = if with_grad { g.input(x.clone()) } else { g.constant(x.clone()) };
    let sr = generator.forward(&mut g, &p, xv)?;
    if g.shape(sr) != hr.shape() {
        return Err(Error::Dimension(format!(
            "generator output {:?} does not match HR {:?}",
            g.shape(sr),
            hr.shape()
        )));
    }
    let mut total = None;
    if cfg.use_l1 {
        let hv = g.constant(hr.clone());
        total = Some(g.mean_abs_diff(sr, hv)?);
    }
    if cfg.use_percep {
        let fp = features.bind(&mut g);
        let maps: Vec<_> = hr_maps.iter().map(|m| g.constant(m.clone())).collect();
        let pl = perceptual_loss_graph(&mut g, features, &fp, sr, &maps)?;
        total = Some(match total {
            Some(t) => g.add(t, pl)?,
            None => pl,
        });
    }
    let total = total.expect("at least one term");
    let loss = g.value(total).item();
    let grad = with_grad.then(|| g.backward(total).get_or_zeros(xv, x.shape()));
    Ok((loss, grad))
}

fn hr_feature_maps(features: &FeatureExtractor, hr: &Tensor, cfg: &AttackConfig) -> Result<Vec<Tensor>> {
    if cfg.use_percep {
        features.features(hr)
    } else {
        Ok(Vec::new())
    }
}

/// `L1(G(x), hr) + L_percep(G(x), hr)` restricted to the enabled terms.
/// Batched inputs give the mean over items.
pub fn attack_loss(bundle: &ModelBundle, x: &Tensor, hr: &Tensor, cfg: &AttackConfig) -> Result<f64> {
    let maps = hr_feature_maps(bundle.features(), hr, cfg)?;
    loss_and_input_grad(&bundle.generator, bundle.features(), x, hr, &maps, cfg, false).map(|r| r.0)
}

/// PGD on a batch `[N,C,h,w]` of clean LR inputs. `seeds[i]` keys the noise
/// initialisation of item `i`.
pub fn pgd_attack_batch(
    generator: &Generator,
    features: &FeatureExtractor,
    lr: &Tensor,
    hr: &Tensor,
    cfg: &AttackConfig,
    seeds: &[u64],
) -> Result<Tensor> {
    cfg.validate()?;
    let [n, c, h, w] = lr.shape();
    if seeds.len() != n {
        return Err(Error::Argument(format!("{} noise seeds for {n} items", seeds.len())));
    }
    if hr.batch() != n {
        return Err(Error::Dimension("LR and HR batch sizes differ".into()));
    }
    let noise: Vec<Tensor> = seeds
        .iter()
        .map(|&s| structured_noise(h, w, c, cfg.epsilon, cfg.structure_scale, s))
        .collect::<Result<_>>()?;
    let noise = Tensor::stack(&noise)?;
    let mut x = project(&lr.zip_map(&noise, |a, b| a + b), lr, cfg.epsilon)?;
    if cfg.iters == 0 || cfg.epsilon == 0.0 {
        return Ok(x);
    }
    let maps = hr_feature_maps(features, hr, cfg)?;
    for t in 0..cfg.iters {
        let (_, grad) = loss_and_input_grad(generator, features, &x, hr, &maps, cfg, true)?;
        let grad = grad.expect("requested");
        if !grad.all_finite() {
            return Err(Error::Numerical(format!("non-finite attack gradient at iteration {t}")));
        }
        let alpha = cfg.alpha;
        let stepped = x.zip_map(&grad, |v, g| v + alpha * sign(g));
        x = if cfg.recenter {
            project(&stepped, &x, cfg.epsilon)?
        } else {
            project(&stepped, lr, cfg.epsilon)?
        };
    }
    Ok(x)
}

/// Adversarial version of `lr` for a single image pair, seeded by `cfg.seed`.
pub fn pgd_attack(bundle: &ModelBundle, lr: &Image, hr: &Image, cfg: &AttackConfig) -> Result<Image> {
    let scale = bundle.generator.scale();
    PatchPair::new(hr.clone(), lr.clone(), scale)?;
    let adv = pgd_attack_batch(
        &bundle.generator,
        bundle.features(),
        &lr.to_tensor(),
        &hr.to_tensor(),
        cfg,
        &[cfg.seed],
    )?;
    Image::from_tensor(&adv, 0)
}

/// `‖x − x0‖∞`.
pub fn linf_distance(x: &Tensor, x0: &Tensor) -> f64 {
    x.max_abs_diff(x0)
}
