//! Clean GAN pre-training and robust fine-tuning.
//!
//! Every random choice during training (batch order, which items get
//! attacked, attack noise) is drawn from a stream keyed by the run seed and
//! the phase-local step, so a resumed run replays exactly what an
//! uninterrupted one would have done.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack_batch, AttackConfig};
use crate::dataio::PatchPair;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{perceptual_loss_graph, target_maps, GanRole, LossWeights};
use crate::model::{ModelBundle, ParamSet};
use crate::rng::{derive_seed, purpose, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Phase step count to train up to; a resumed state continues from its
    /// own counter.
    pub total_iters: usize,
    /// Leading pre-training iterations that optimise L1 only.
    pub l1_warmup_iters: usize,
    /// Probability that a batch item is replaced by its adversarial version.
    pub adv_fraction: f64,
    pub weights: LossWeights,
    pub attack: AttackConfig,
    pub seed: u64,
    /// Steps between periodic checkpoints written by the caller's monitor.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 8,
            total_iters: 1000,
            l1_warmup_iters: 0,
            adv_fraction: 1.0,
            weights: LossWeights::default(),
            attack: AttackConfig::default(),
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.l1_warmup_iters > self.total_iters {
            return Err(Error::Config(format!(
                "l1_warmup_iters ({}) exceeds total_iters ({})",
                self.l1_warmup_iters, self.total_iters
            )));
        }
        if !(0.0..=1.0).contains(&self.adv_fraction) {
            return Err(Error::Config(format!("adv_fraction must lie in [0,1], got {}", self.adv_fraction)));
        }
        self.weights.validate()?;
        self.attack.validate()
    }
}

/// Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors()[i].shape() {
            return Err(Error::Dimension(format!("adam: gradient {i} has shape {:?}", g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {}",
                params.names()[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Exponential moving averages of the logged losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningLosses {
    pub l1: Option<f64>,
    pub percep: Option<f64>,
    pub gan_g: Option<f64>,
    pub gan_d: Option<f64>,
}

const EMA_DECAY: f64 = 0.9;

fn ema(slot: &mut Option<f64>, v: Option<f64>) {
    if let Some(v) = v {
        *slot = Some(match *slot {
            Some(old) => EMA_DECAY * old + (1.0 - EMA_DECAY) * v,
            None => v,
        });
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    /// Optimiser iterations over the whole run.
    pub iteration: u64,
    pub pretrain_iters: u64,
    pub robust_iters: u64,
    pub running: RunningLosses,
}

impl TrainState {
    pub fn new(bundle: ModelBundle) -> Self {
        let opt_g = AdamState::new(bundle.generator.params());
        let opt_d = AdamState::new(bundle.discriminator.params());
        TrainState {
            bundle,
            opt_g,
            opt_d,
            iteration: 0,
            pretrain_iters: 0,
            robust_iters: 0,
            running: RunningLosses::default(),
        }
    }
}

/// One row of the training log. Terms not computed in a step are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub l1: f64,
    pub percep: Option<f64>,
    pub gan_g: Option<f64>,
    pub gan_d: Option<f64>,
    pub attack_loss_mean: Option<f64>,
    pub wall_time: f64,
}

pub const LOG_HEADER: [&str; 7] = ["iter", "l1", "percep", "gan_g", "gan_d", "attack_loss_mean", "wall_time"];

impl LogRow {
    pub fn fields(&self) -> [String; 7] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.iter.to_string(),
            self.l1.to_string(),
            opt(self.percep),
            opt(self.gan_g),
            opt(self.gan_d),
            opt(self.attack_loss_mean),
            format!("{:.3}", self.wall_time),
        ]
    }
}

/// Called after every optimiser step.
pub trait Monitor {
    fn on_step(&mut self, state: &TrainState, row: &LogRow) -> Result<()>;
}

impl Monitor for () {
    fn on_step(&mut self, _: &TrainState, _: &LogRow) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&TrainState, &LogRow) -> Result<()>> Monitor for F {
    fn on_step(&mut self, state: &TrainState, row: &LogRow) -> Result<()> {
        self(state, row)
    }
}

/// Training pairs held as `[1,C,h,w]` / `[1,C,H,W]` tensors.
#[derive(Clone, Debug)]
pub struct Dataset {
    lr: Vec<Tensor>,
    hr: Vec<Tensor>,
}

impl Dataset {
    pub fn new(pairs: &[PatchPair]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Argument("training set is empty".into()))?;
        let (lr_shape, hr_shape) = (first.lr().to_tensor().shape(), first.hr().to_tensor().shape());
        let mut ds = Dataset {
            lr: Vec::with_capacity(pairs.len()),
            hr: Vec::with_capacity(pairs.len()),
        };
        for p in pairs {
            let (l, h) = (p.lr().to_tensor(), p.hr().to_tensor());
            if l.shape() != lr_shape || h.shape() != hr_shape {
                return Err(Error::Dimension("training pairs must share one patch size".into()));
            }
            ds.lr.push(l);
            ds.hr.push(h);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    /// Item indices of batch `step`: consecutive slices of a sequence of
    /// independently shuffled epochs.
    pub fn batch_indices(&self, seed: u64, step: u64, batch: usize) -> Vec<usize> {
        let n = self.len() as u64;
        let mut out = Vec::with_capacity(batch);
        let mut pos = step * batch as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        while out.len() < batch {
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..self.len()).collect();
                perm.shuffle(&mut stream(seed, &[purpose::SHUFFLE, epoch]));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().unwrap().1[(pos % n) as usize]);
            pos += 1;
        }
        out
    }

    fn gather(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let lr: Vec<Tensor> = idx.iter().map(|&i| self.lr[i].clone()).collect();
        let hr: Vec<Tensor> = idx.iter().map(|&i| self.hr[i].clone()).collect();
        Ok((Tensor::stack(&lr)?, Tensor::stack(&hr)?))
    }
}

fn param_grads(g: &Graph, root: Var, bound: &[Var], params: &ParamSet) -> Vec<Tensor> {
    let grads = g.backward(root);
    bound
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect()
}

fn warmup_step(state: &mut TrainState, lr: &Tensor, hr: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    let gen = &state.bundle.generator;
    let mut g = Graph::new();
    let p = gen.bind(&mut g, true);
    let x = g.constant(lr.clone());
    let sr = gen.forward(&mut g, &p, x)?;
    let h = g.constant(hr.clone());
    let l1 = g.mean_abs_diff(sr, h)?;
    let grads = param_grads(&g, l1, p.vars(), gen.params());
    let value = g.value(l1).item();
    adam_step(
        state.bundle.generator.params_mut(),
        &grads,
        &mut state.opt_g,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    )?;
    Ok(value)
}

struct GanLosses {
    l1: f64,
    percep: f64,
    gan_g: f64,
    gan_d: f64,
}

/// Discriminator update on (HR, detached SR), then generator update against
/// the refreshed discriminator.
fn gan_step(state: &mut TrainState, lr: &Tensor, hr: &Tensor, cfg: &TrainConfig) -> Result<GanLosses> {
    let gen = &state.bundle.generator;
    let mut g = Graph::new();
    let gp = gen.bind(&mut g, true);
    let x = g.constant(lr.clone());
    let sr = gen.forward(&mut g, &gp, x)?;
    if g.shape(sr) != hr.shape() {
        return Err(Error::Dimension(format!(
            "generator output {:?} does not match HR {:?}",
            g.shape(sr),
            hr.shape()
        )));
    }
    let sr_value = g.value(sr).clone();

    let gan_d = {
        let disc = &state.bundle.discriminator;
        let mut gd = Graph::new();
        let dp = disc.bind(&mut gd, true);
        let real_in = gd.constant(hr.clone());
        let fake_in = gd.constant(sr_value);
        let real = disc.forward(&mut gd, &dp, real_in)?;
        let fake = disc.forward(&mut gd, &dp, fake_in)?;
        let loss = gd.relativistic_loss(real, fake, GanRole::Discriminator)?;
        let grads = param_grads(&gd, loss, dp.vars(), disc.params());
        let value = gd.value(loss).item();
        adam_step(
            state.bundle.discriminator.params_mut(),
            &grads,
            &mut state.opt_d,
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        )?;
        value
    };

    let bundle = &state.bundle;
    let fx = bundle.features();
    let disc = &bundle.discriminator;
    let dp = disc.bind(&mut g, false);
    let real_in = g.constant(hr.clone());
    let real = disc.forward(&mut g, &dp, real_in)?;
    let fake = disc.forward(&mut g, &dp, sr)?;
    let gan_g = g.relativistic_loss(real, fake, GanRole::Generator)?;
    let h = g.constant(hr.clone());
    let l1 = g.mean_abs_diff(sr, h)?;
    let fp = fx.bind(&mut g);
    let maps = target_maps(&mut g, fx, hr)?;
    let percep = perceptual_loss_graph(&mut g, fx, &fp, sr, &maps)?;
    let w = cfg.weights;
    let t1 = g.scale(l1, w.w_l1);
    let t2 = g.scale(percep, w.w_percep);
    let t3 = g.scale(gan_g, w.w_gan);
    let t12 = g.add(t1, t2)?;
    let total = g.add(t12, t3)?;
    let grads = param_grads(&g, total, gp.vars(), bundle.generator.params());
    let losses = GanLosses {
        l1: g.value(l1).item(),
        percep: g.value(percep).item(),
        gan_g: g.value(gan_g).item(),
        gan_d,
    };
    adam_step(
        state.bundle.generator.params_mut(),
        &grads,
        &mut state.opt_g,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    )?;
    Ok(losses)
}

fn finish_step(state: &mut TrainState, row: &LogRow, monitor: &mut impl Monitor) -> Result<()> {
    state.iteration += 1;
    ema(&mut state.running.l1, Some(row.l1));
    ema(&mut state.running.percep, row.percep);
    ema(&mut state.running.gan_g, row.gan_g);
    ema(&mut state.running.gan_d, row.gan_d);
    monitor.on_step(state, row)
}

/// Clean training up to `total_iters` pre-training steps: the first
/// `l1_warmup_iters` optimise L1 only, the rest are relativistic GAN steps.
pub fn pretrain_clean(state: TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    pretrain_clean_with(state, data, cfg, &mut ())
}

pub fn pretrain_clean_with(
    mut state: TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    monitor: &mut impl Monitor,
) -> Result<TrainState> {
    cfg.validate()?;
    let start = Instant::now();
    while state.pretrain_iters < cfg.total_iters as u64 {
        let step = state.pretrain_iters;
        let idx = data.batch_indices(cfg.seed, step, cfg.batch_size);
        let (lr, hr) = data.gather(&idx)?;
        let row = if step < cfg.l1_warmup_iters as u64 {
            let l1 = warmup_step(&mut state, &lr, &hr, cfg)?;
            LogRow {
                iter: state.iteration + 1,
                l1,
                percep: None,
                gan_g: None,
                gan_d: None,
                attack_loss_mean: None,
                wall_time: 0.0,
            }
        } else {
            let l = gan_step(&mut state, &lr, &hr, cfg)?;
            LogRow {
                iter: state.iteration + 1,
                l1: l.l1,
                percep: Some(l.percep),
                gan_g: Some(l.gan_g),
                gan_d: Some(l.gan_d),
                attack_loss_mean: None,
                wall_time: 0.0,
            }
        };
        state.pretrain_iters += 1;
        let row = LogRow {
            wall_time: start.elapsed().as_secs_f64(),
            ..row
        };
        finish_step(&mut state, &row, monitor)?;
    }
    Ok(state)
}

/// Items of batch `step` chosen for attack, each with probability `adv_fraction`.
pub fn adversarial_selection(seed: u64, step: u64, batch: usize, adv_fraction: f64) -> Vec<bool> {
    if adv_fraction <= 0.0 {
        return vec![false; batch];
    }
    let mut rng = stream(seed, &[purpose::ADV_SELECT, step]);
    (0..batch).map(|_| rng.gen::<f64>() < adv_fraction).collect()
}

/// Robust fine-tuning: each batch item is swapped for its PGD adversarial
/// version with probability `adv_fraction`; targets stay the clean HR.
pub fn robust_train(state: TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    robust_train_with(state, data, cfg, &mut ())
}

pub fn robust_train_with(
    mut state: TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    monitor: &mut impl Monitor,
) -> Result<TrainState> {
    cfg.validate()?;
    let start = Instant::now();
    while state.robust_iters < cfg.total_iters as u64 {
        let step = state.robust_iters;
        let idx = data.batch_indices(cfg.seed, step, cfg.batch_size);
        let (mut lr, hr) = data.gather(&idx)?;
        let chosen = adversarial_selection(cfg.seed, step, cfg.batch_size, cfg.adv_fraction);
        let picked: Vec<usize> = (0..cfg.batch_size).filter(|&i| chosen[i]).collect();
        let mut attacked = false;
        if !picked.is_empty() {
            let sub_lr = Tensor::stack(&picked.iter().map(|&i| lr.select(i)).collect::<Vec<_>>())?;
            let sub_hr = Tensor::stack(&picked.iter().map(|&i| hr.select(i)).collect::<Vec<_>>())?;
            let seeds: Vec<u64> = picked
                .iter()
                .map(|&i| derive_seed(cfg.seed, &[purpose::ATTACK_NOISE, step, i as u64]))
                .collect();
            let adv = pgd_attack_batch(
                &state.bundle.generator,
                state.bundle.features(),
                &sub_lr,
                &sub_hr,
                &cfg.attack,
                &seeds,
            )?;
            check_adversarial(&adv, &sub_lr, &cfg.attack, step)?;
            let len = lr.item_len();
            for (k, &i) in picked.iter().enumerate() {
                lr.data_mut()[i * len..(i + 1) * len].copy_from_slice(adv.item_slice(k));
            }
            attacked = true;
        }
        let l = gan_step(&mut state, &lr, &hr, cfg)?;
        let attack_loss_mean = attacked.then(|| {
            let a = &cfg.attack;
            (if a.use_l1 { l.l1 } else { 0.0 }) + (if a.use_percep { l.percep } else { 0.0 })
        });
        state.robust_iters += 1;
        let row = LogRow {
            iter: state.iteration + 1,
            l1: l.l1,
            percep: Some(l.percep),
            gan_g: Some(l.gan_g),
            gan_d: Some(l.gan_d),
            attack_loss_mean,
            wall_time: start.elapsed().as_secs_f64(),
        };
        finish_step(&mut state, &row, monitor)?;
    }
    Ok(state)
}

fn check_adversarial(adv: &Tensor, clean: &Tensor, cfg: &AttackConfig, step: u64) -> Result<()> {
    if adv.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Numerical(format!("adversarial input left [0,1] at step {step}")));
    }
    if !cfg.recenter && adv.max_abs_diff(clean) > cfg.epsilon + 1e-12 {
        return Err(Error::Numerical(format!("adversarial input left the ε-ball at step {step}")));
    }
    Ok(())
}
