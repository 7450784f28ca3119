//! Central finite-difference checks of the analytic gradients.
//!
//! Network outputs are reduced to a scalar through a fixed random
//! projection `Σ out ⊙ R`, so every output coordinate contributes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::losses::{perceptual_loss_graph, target_maps, GanRole, LossWeights};
use crate::model::{
    random_tensor, Bound, Discriminator, DiscriminatorConfig, FeatureConfig, FeatureExtractor, Generator,
    GeneratorArch, GeneratorConfig, ParamSet,
};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
pub const COORDS: usize = 5;

/// One analytic/numeric gradient comparison.
#[derive(Clone, Debug)]
pub struct Check {
    pub target: String,
    pub wrt: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl Check {
    /// `|a − n| / max(|a|, |n|, 1e-8)`.
    pub fn rel_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        (self.analytic - self.numeric).abs() / denom
    }

    pub fn passes(&self) -> bool {
        self.rel_error() <= TOLERANCE
    }
}

/// Where a perturbed coordinate lives: the input or parameter tensor `k`.
#[derive(Clone, Copy)]
enum Slot {
    Input,
    Param(usize),
}

fn pick(rng: &mut ChaCha8Rng, input: &Tensor, params: Option<&ParamSet>, n: usize) -> Vec<(Slot, usize)> {
    let mut out: Vec<(Slot, usize)> = (0..n).map(|_| (Slot::Input, rng.gen_range(0..input.len()))).collect();
    if let Some(p) = params.filter(|p| !p.is_empty()) {
        for _ in 0..n {
            let k = rng.gen_range(0..p.len());
            out.push((Slot::Param(k), rng.gen_range(0..p.tensors()[k].len())));
        }
    }
    out
}

fn central<F: FnMut(&Tensor, &ParamSet) -> Result<f64>>(
    f: &mut F,
    x: &Tensor,
    params: &ParamSet,
    slot: Slot,
    i: usize,
) -> Result<f64> {
    let eval = |f: &mut F, delta: f64| {
        let (mut x2, mut p2) = (x.clone(), params.clone());
        match slot {
            Slot::Input => x2.data_mut()[i] += delta,
            Slot::Param(k) => p2.tensors_mut()[k].data_mut()[i] += delta,
        }
        f(&x2, &p2)
    };
    Ok((eval(f, STEP)? - eval(f, -STEP)?) / (2.0 * STEP))
}

/// Compare the graph gradient of `build` against central differences.
/// `build(g, x, params)` returns the scalar root; `x` and the parameters are
/// differentiable when `params_trainable`.
fn check_scalar(
    target: &str,
    x: &Tensor,
    params: &ParamSet,
    params_trainable: bool,
    rng: &mut ChaCha8Rng,
    build: impl Fn(&mut Graph, Var, &[Var]) -> Result<Var>,
) -> Result<Vec<Check>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let bound = params.bind(&mut g, params_trainable);
    let root = build(&mut g, xv, bound.vars())?;
    let grads = g.backward(root);
    let mut f = |x: &Tensor, p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let b = p.bind(&mut g, false);
        let r = build(&mut g, xv, b.vars())?;
        Ok(g.value(r).item())
    };
    let coords = pick(rng, x, params_trainable.then_some(params), COORDS);
    let mut out = Vec::new();
    for (slot, i) in coords {
        let (wrt, analytic) = match slot {
            Slot::Input => ("input".to_string(), grads.get_or_zeros(xv, x.shape()).data()[i]),
            Slot::Param(k) => {
                let v = bound.vars()[k];
                (
                    params.names()[k].clone(),
                    grads.get_or_zeros(v, params.tensors()[k].shape()).data()[i],
                )
            }
        };
        out.push(Check {
            target: target.to_string(),
            wrt: format!("{wrt}[{i}]"),
            analytic,
            numeric: central(&mut f, x, params, slot, i)?,
        });
    }
    Ok(out)
}

/// Smooth-ish test input in `[0.1, 0.9]`.
fn input(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    random_tensor(shape, rng).map(|v| 0.1 + 0.8 * v)
}

/// Perturb biases away from zero so that every parameter carries gradient
/// through non-trivial activations.
fn jitter(params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * (rng.gen::<f64>() - 0.5);
        }
    }
}

pub fn check_generator(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, &[0x6C]);
    let arch = GeneratorArch::Rrdb(GeneratorConfig {
        num_blocks: 1,
        base_channels: 4,
        growth_channels: 3,
        scale: 2,
        channels: 3,
    });
    let mut gen = Generator::new(arch, seed)?;
    jitter(gen.params_mut(), &mut rng);
    let x = input([1, 3, 8, 8], &mut rng);
    let proj = random_tensor([1, 3, 16, 16], &mut rng).map(|v| v - 0.5);
    let gen_ref = &gen;
    check_scalar("generator", &x, gen.params(), true, &mut rng, |g, xv, vars| {
        let out = gen_ref.forward(g, &Bound::from_vars(vars), xv)?;
        g.dot_const(out, proj.clone())
    })
}

pub fn check_discriminator(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, &[0x6D]);
    let cfg = DiscriminatorConfig {
        base_channels: 4,
        patch_size: 16,
        channels: 3,
    };
    let mut disc = Discriminator::new(cfg, seed)?;
    jitter(disc.params_mut(), &mut rng);
    let x = input([2, 3, 16, 16], &mut rng);
    let proj = random_tensor([2, 1, 1, 1], &mut rng).map(|v| v + 0.5);
    let d = &disc;
    check_scalar("discriminator", &x, disc.params(), true, &mut rng, |g, xv, vars| {
        let out = d.forward(g, &Bound::from_vars(vars), xv)?;
        g.dot_const(out, proj.clone())
    })
}

pub fn check_features(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, &[0x6E]);
    let cfg = FeatureConfig {
        base_channels: 3,
        channels: 3,
    };
    let fx = FeatureExtractor::new(cfg, seed)?;
    let x = input([1, 3, 16, 16], &mut rng);
    let f = &fx;
    let shapes: Vec<[usize; 4]> = fx.features(&x)?.iter().map(Tensor::shape).collect();
    let projs: Vec<Tensor> = shapes.iter().map(|&s| random_tensor(s, &mut rng).map(|v| v - 0.5)).collect();
    check_scalar("features", &x, fx.params(), false, &mut rng, |g, xv, _| {
        let fp = f.bind(g);
        let maps = f.forward(g, &fp, xv)?;
        let mut total: Option<Var> = None;
        for (m, p) in maps.into_iter().zip(&projs) {
            let d = g.dot_const(m, p.clone())?;
            total = Some(match total {
                Some(t) => g.add(t, d)?,
                None => d,
            });
        }
        Ok(total.expect("four stages"))
    })
}

pub fn check_losses(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, &[0x6F]);
    let none = ParamSet::new();
    let mut out = Vec::new();

    let sr = input([2, 3, 16, 16], &mut rng);
    let hr = input([2, 3, 16, 16], &mut rng);
    let hr_c = hr.clone();
    out.extend(check_scalar("l1", &sr, &none, false, &mut rng, move |g, xv, _| {
        let h = g.constant(hr_c.clone());
        g.mean_abs_diff(xv, h)
    })?);

    let fx = FeatureExtractor::new(FeatureConfig { base_channels: 3, channels: 3 }, seed)?;
    let f = &fx;
    out.extend(check_scalar("perceptual", &sr, &none, false, &mut rng, |g, xv, _| {
        let fp = f.bind(g);
        let maps = target_maps(g, f, &hr)?;
        perceptual_loss_graph(g, f, &fp, xv, &maps)
    })?);

    let real = random_tensor([3, 1, 1, 1], &mut rng).map(|v| 4.0 * v - 2.0);
    let fake = random_tensor([3, 1, 1, 1], &mut rng).map(|v| 4.0 * v - 2.0);
    for (name, role) in [("gan_g", GanRole::Generator), ("gan_d", GanRole::Discriminator)] {
        let (r, fk) = (real.clone(), fake.clone());
        out.extend(check_scalar(&format!("{name}/real"), &real, &none, false, &mut rng, move |g, xv, _| {
            let fv = g.constant(fk.clone());
            g.relativistic_loss(xv, fv, role)
        })?);
        out.extend(check_scalar(&format!("{name}/fake"), &fake, &none, false, &mut rng, move |g, xv, _| {
            let rv = g.constant(r.clone());
            g.relativistic_loss(rv, xv, role)
        })?);
    }

    // The full weighted generator objective through a small generator and
    // discriminator, differentiated w.r.t. the LR input and generator weights.
    let gen = Generator::new(
        GeneratorArch::Rrdb(GeneratorConfig {
            num_blocks: 1,
            base_channels: 4,
            growth_channels: 2,
            scale: 2,
            channels: 3,
        }),
        seed,
    )?;
    let disc = Discriminator::new(
        DiscriminatorConfig {
            base_channels: 2,
            patch_size: 16,
            channels: 3,
        },
        seed,
    )?;
    let lr = input([2, 3, 8, 8], &mut rng);
    let w = LossWeights {
        w_l1: 1.0,
        w_percep: 1.0,
        w_gan: 0.5,
    };
    let (gen_ref, d) = (&gen, &disc);
    let hr2 = input([2, 3, 16, 16], &mut rng);
    out.extend(check_scalar("total_g", &lr, gen.params(), true, &mut rng, |g, xv, vars| {
        let sr = gen_ref.forward(g, &Bound::from_vars(vars), xv)?;
        let dp = d.bind(g, false);
        let hv = g.constant(hr2.clone());
        let real = d.forward(g, &dp, hv)?;
        let fake = d.forward(g, &dp, sr)?;
        let gan = g.relativistic_loss(real, fake, GanRole::Generator)?;
        let hv = g.constant(hr2.clone());
        let l1 = g.mean_abs_diff(sr, hv)?;
        let fp = f.bind(g);
        let maps = target_maps(g, f, &hr2)?;
        let pl = perceptual_loss_graph(g, f, &fp, sr, &maps)?;
        let a = g.scale(l1, w.w_l1);
        let b = g.scale(pl, w.w_percep);
        let c = g.scale(gan, w.w_gan);
        let ab = g.add(a, b)?;
        g.add(ab, c)
    })?);
    Ok(out)
}

/// Every check of the suite, grouped by target.
pub fn run_suite(seed: u64) -> Result<Vec<Check>> {
    let mut all = check_generator(seed)?;
    all.extend(check_discriminator(seed)?);
    all.extend(check_features(seed)?);
    all.extend(check_losses(seed)?);
    Ok(all)
}
