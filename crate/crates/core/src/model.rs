//! Networks: an RRDB super-resolution generator, a strided-conv relativistic
//! discriminator, and a frozen feature extractor used by the perceptual loss
//! and the perceptual distance metric.
//!
//! Parameters live in [`ParamSet`]s (ordered, named tensors). A forward pass
//! binds a parameter set onto a [`Graph`], either as differentiable leaves
//! (training) or as constants (attack, evaluation, frozen features).

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Residual scaling inside dense blocks and RRDBs.
pub const RESIDUAL_SCALE: f64 = 0.2;
/// Smallest LR side the generator accepts.
pub const MIN_GENERATOR_INPUT: usize = 8;
/// Smallest side the feature extractor accepts.
pub const MIN_FEATURE_INPUT: usize = 16;
pub const FEATURE_STAGES: usize = 4;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Replace every tensor with `other`'s after checking names and shapes agree.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for ((name, t), (own_name, own)) in other.iter().zip(self.names.iter().zip(&mut self.tensors)) {
            if name != own_name || t.shape() != own.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match {own_name} {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
            *own = t.clone();
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.input(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph variables for a bound [`ParamSet`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn from_vars(vars: &[Var]) -> Self {
        Bound { vars: vars.to_vec() }
    }

    fn conv(&self, g: &mut Graph, layer: ConvLayer, x: Var, stride: usize) -> Result<Var> {
        g.conv2d(x, self.vars[layer.w], self.vars[layer.b], stride)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: usize,
    b: usize,
}

/// Builds a parameter set layer by layer, drawing initial values from one
/// seeded stream.
struct Builder<'a> {
    params: ParamSet,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Builder<'a> {
    fn new(rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Builder {
            params: ParamSet::new(),
            rng,
        }
    }

    fn normal(&mut self, shape: [usize; 4], std: f64) -> Tensor {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                let len = shape.iter().product();
                let data = (0..len).map(|_| dist.sample(rng)).collect();
                Tensor::from_vec(shape, data).expect("shape")
            }
            None => Tensor::zeros(shape),
        }
    }

    /// He-normal conv weights scaled by `gain_scale`, zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain_scale: f64) -> ConvLayer {
        let fan_in = (cin * k * k) as f64;
        let std = gain_scale * (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
        let w = self.normal([cout, cin, k, k], std);
        let w = self.params.push(format!("{name}.weight"), w);
        let b = self.params.push(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]));
        ConvLayer { w, b }
    }

    fn linear(&mut self, name: &str, input: usize, out: usize) -> usize {
        let w = self.normal([out, input, 1, 1], (1.0 / input as f64).sqrt());
        self.params.push(format!("{name}.weight"), w)
    }
}

// ---------------------------------------------------------------- generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_blocks: usize,
    pub base_channels: usize,
    pub growth_channels: usize,
    pub scale: usize,
    /// Image channels (1 or 3).
    pub channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_blocks: 4,
            base_channels: 32,
            growth_channels: 16,
            scale: 4,
            channels: 3,
        }
    }
}

fn validate_scale(scale: usize) -> Result<()> {
    if scale == 2 || scale == 4 {
        Ok(())
    } else {
        Err(Error::Config(format!("scale must be 2 or 4, got {scale}")))
    }
}

fn validate_channels(channels: usize) -> Result<()> {
    if channels == 1 || channels == 3 {
        Ok(())
    } else {
        Err(Error::Config(format!("image channels must be 1 or 3, got {channels}")))
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        validate_scale(self.scale)?;
        validate_channels(self.channels)?;
        if self.num_blocks == 0 || self.base_channels == 0 || self.growth_channels == 0 {
            return Err(Error::Config("generator block and channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Which network a [`Generator`] runs. The stubs have no parameters and exist
/// for analytic tests and plumbing checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorArch {
    Rrdb(GeneratorConfig),
    /// Nearest-neighbour upsampling.
    NearestStub { scale: usize, channels: usize },
    /// Every output pixel is the mean of the whole input item.
    MeanStub { scale: usize, channels: usize },
}

impl GeneratorArch {
    pub fn scale(&self) -> usize {
        match self {
            GeneratorArch::Rrdb(c) => c.scale,
            GeneratorArch::NearestStub { scale, .. } | GeneratorArch::MeanStub { scale, .. } => *scale,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            GeneratorArch::Rrdb(c) => c.channels,
            GeneratorArch::NearestStub { channels, .. } | GeneratorArch::MeanStub { channels, .. } => *channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GeneratorArch::Rrdb(c) => c.validate(),
            _ => {
                validate_scale(self.scale())?;
                validate_channels(self.channels())
            }
        }
    }
}

#[derive(Clone, Debug)]
struct RrdbLayout {
    first: ConvLayer,
    blocks: Vec<[[ConvLayer; 5]; 3]>,
    trunk: ConvLayer,
    ups: Vec<ConvLayer>,
    hr: ConvLayer,
    last: ConvLayer,
}

fn build_rrdb(cfg: &GeneratorConfig, b: &mut Builder) -> RrdbLayout {
    let (nf, gc, c) = (cfg.base_channels, cfg.growth_channels, cfg.channels);
    let first = b.conv("conv_first", c, nf, 3, 1.0);
    let blocks = (0..cfg.num_blocks)
        .map(|i| {
            std::array::from_fn(|r| {
                std::array::from_fn(|k| {
                    let cout = if k == 4 { nf } else { gc };
                    b.conv(&format!("body.{i}.rdb{}.conv{}", r + 1, k + 1), nf + k * gc, cout, 3, 0.1)
                })
            })
        })
        .collect();
    let trunk = b.conv("conv_body", nf, nf, 3, 1.0);
    let stages = cfg.scale.trailing_zeros() as usize;
    let ups = (0..stages)
        .map(|i| b.conv(&format!("conv_up{}", i + 1), nf, nf, 3, 1.0))
        .collect();
    let hr = b.conv("conv_hr", nf, nf, 3, 1.0);
    let last = b.conv("conv_last", nf, c, 3, 1.0);
    RrdbLayout {
        first,
        blocks,
        trunk,
        ups,
        hr,
        last,
    }
}

/// Dense block: five convs over the growing concatenation, output scaled by
/// [`RESIDUAL_SCALE`] and added to the input.
fn dense_block(g: &mut Graph, p: &Bound, convs: &[ConvLayer; 5], x: Var) -> Result<Var> {
    let mut feats = vec![x];
    for layer in &convs[..4] {
        let inp = if feats.len() == 1 { x } else { g.concat(&feats)? };
        let y = p.conv(g, *layer, inp, 1)?;
        feats.push(g.leaky_relu(y, LEAKY_SLOPE));
    }
    let inp = g.concat(&feats)?;
    let y = p.conv(g, convs[4], inp, 1)?;
    let y = g.scale(y, RESIDUAL_SCALE);
    g.add(y, x)
}

fn rrdb(g: &mut Graph, p: &Bound, block: &[[ConvLayer; 5]; 3], x: Var) -> Result<Var> {
    let mut out = x;
    for rdb in block {
        out = dense_block(g, p, rdb, out)?;
    }
    let out = g.scale(out, RESIDUAL_SCALE);
    g.add(out, x)
}

#[derive(Clone, Debug)]
pub struct Generator {
    arch: GeneratorArch,
    params: ParamSet,
    layout: Option<RrdbLayout>,
}

impl Generator {
    pub fn new(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, &[purpose::GENERATOR_INIT]);
        Ok(Self::build(arch, Some(&mut rng)))
    }

    /// Zero-initialised generator with the layout of `arch`, ready for
    /// [`ParamSet::load_from`].
    pub fn skeleton(arch: GeneratorArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self::build(arch, None))
    }

    fn build(arch: GeneratorArch, rng: Option<&mut ChaCha8Rng>) -> Self {
        let mut b = Builder::new(rng);
        let layout = match &arch {
            GeneratorArch::Rrdb(cfg) => Some(build_rrdb(cfg, &mut b)),
            _ => None,
        };
        Generator {
            arch,
            params: b.params,
            layout,
        }
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn scale(&self) -> usize {
        self.arch.scale()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Super-resolve `x` (`[N,C,H,W]`) into `[N,C,sH,sW]`. No output clamp.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let [n, c, h, w] = g.shape(x);
        if h < MIN_GENERATOR_INPUT || w < MIN_GENERATOR_INPUT {
            return Err(Error::Dimension(format!(
                "generator input {h}×{w} is smaller than {MIN_GENERATOR_INPUT}×{MIN_GENERATOR_INPUT}"
            )));
        }
        if c != self.arch.channels() {
            return Err(Error::Dimension(format!(
                "generator expects {} channels, got {c}",
                self.arch.channels()
            )));
        }
        let s = self.scale();
        match (&self.arch, &self.layout) {
            (GeneratorArch::Rrdb(_), Some(l)) => {
                let fea = p.conv(g, l.first, x, 1)?;
                let mut body = fea;
                for block in &l.blocks {
                    body = rrdb(g, p, block, body)?;
                }
                let trunk = p.conv(g, l.trunk, body, 1)?;
                let mut y = g.add(fea, trunk)?;
                for up in &l.ups {
                    let u = g.upsample_nearest(y, 2);
                    let u = p.conv(g, *up, u, 1)?;
                    y = g.leaky_relu(u, LEAKY_SLOPE);
                }
                let y = p.conv(g, l.hr, y, 1)?;
                let y = g.leaky_relu(y, LEAKY_SLOPE);
                p.conv(g, l.last, y, 1)
            }
            (GeneratorArch::NearestStub { .. }, _) => Ok(g.upsample_nearest(x, s)),
            (GeneratorArch::MeanStub { .. }, _) => g.broadcast_mean(x, [n, c, h * s, w * s]),
            _ => unreachable!("rrdb generators always carry a layout"),
        }
    }

    /// Forward pass without gradients.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }
}

// ------------------------------------------------------------ discriminator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Side length of the square HR patches it scores.
    pub patch_size: usize,
    pub channels: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        validate_channels(self.channels)?;
        if self.base_channels == 0 || self.patch_size < 8 {
            return Err(Error::Config(
                "discriminator needs positive channels and patch_size ≥ 8".into(),
            ));
        }
        Ok(())
    }

    /// Number of stride-2 stages: halve until the side is at most 4, at most five times.
    fn stages(&self) -> usize {
        let mut side = self.patch_size;
        let mut n = 0;
        while side > 4 && n < 5 {
            side = side.div_ceil(2);
            n += 1;
        }
        n
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: ParamSet,
    convs: Vec<(ConvLayer, usize)>,
    /// Weight of the linear head. It has no bias: the relativistic losses
    /// only see logit differences, so a bias would never be trained.
    head: usize,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, &[purpose::DISCRIMINATOR_INIT]);
        Ok(Self::build(cfg, Some(&mut rng)))
    }

    pub fn skeleton(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, None))
    }

    fn build(cfg: DiscriminatorConfig, rng: Option<&mut ChaCha8Rng>) -> Self {
        let mut b = Builder::new(rng);
        let nd = cfg.base_channels;
        let mut convs = vec![(b.conv("conv0", cfg.channels, nd, 3, 1.0), 1)];
        let (mut cin, mut side) = (nd, cfg.patch_size);
        for i in 0..cfg.stages() {
            let cout = nd << (i + 1).min(3);
            convs.push((b.conv(&format!("down{}", i + 1), cin, cout, 3, 1.0), 2));
            cin = cout;
            side = side.div_ceil(2);
        }
        let head = b.linear("linear", cin * side * side, 1);
        Discriminator {
            cfg,
            params: b.params,
            convs,
            head,
        }
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Per-item realness logits, shape `[N,1,1,1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(x);
        let want = [self.cfg.channels, self.cfg.patch_size, self.cfg.patch_size];
        if [c, h, w] != want {
            return Err(Error::Dimension(format!(
                "discriminator expects {want:?} (C,H,W), got {:?}",
                [c, h, w]
            )));
        }
        let mut y = x;
        for &(layer, stride) in &self.convs {
            let z = p.conv(g, layer, y, stride)?;
            y = g.leaky_relu(z, LEAKY_SLOPE);
        }
        let no_bias = g.constant(Tensor::zeros([1, 1, 1, 1]));
        g.linear(y, p.vars[self.head], no_bias)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).data().to_vec())
    }
}

// -------------------------------------------------------- feature extractor

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub base_channels: usize,
    pub channels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            base_channels: 8,
            channels: 3,
        }
    }
}

impl FeatureConfig {
    fn stage_channels(&self) -> [usize; FEATURE_STAGES] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 4 * b]
    }
}

/// Four conv+LeakyReLU stages separated by 2×2 average pooling. The map of
/// each stage is taken before pooling.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    params: ParamSet,
    convs: Vec<ConvLayer>,
}

impl FeatureExtractor {
    /// Seeded random weights.
    pub fn new(cfg: FeatureConfig, seed: u64) -> Result<Self> {
        validate_channels(cfg.channels)?;
        if cfg.base_channels == 0 {
            return Err(Error::Config("feature base_channels must be positive".into()));
        }
        let mut rng = stream(seed, &[purpose::FEATURE_INIT]);
        Ok(Self::build(cfg, Some(&mut rng)))
    }

    /// Externally supplied weights, e.g. from a pretrained network.
    pub fn with_weights(cfg: FeatureConfig, weights: &[(String, Tensor)]) -> Result<Self> {
        validate_channels(cfg.channels)?;
        let mut fx = Self::build(cfg, None);
        fx.params.load_from(weights)?;
        Ok(fx)
    }

    fn build(cfg: FeatureConfig, rng: Option<&mut ChaCha8Rng>) -> Self {
        let mut b = Builder::new(rng);
        let mut cin = cfg.channels;
        let convs = cfg
            .stage_channels()
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let layer = b.conv(&format!("stage{}", i + 1), cin, cout, 3, 1.0);
                cin = cout;
                layer
            })
            .collect();
        FeatureExtractor {
            cfg,
            params: b.params,
            convs,
        }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Feature parameters are always bound as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, false)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let [_, c, h, w] = g.shape(x);
        if h < MIN_FEATURE_INPUT || w < MIN_FEATURE_INPUT {
            return Err(Error::Dimension(format!(
                "feature input {h}×{w} is smaller than {MIN_FEATURE_INPUT}×{MIN_FEATURE_INPUT}"
            )));
        }
        if c != self.cfg.channels {
            return Err(Error::Dimension(format!(
                "feature extractor expects {} channels, got {c}",
                self.cfg.channels
            )));
        }
        let mut maps = Vec::with_capacity(FEATURE_STAGES);
        let mut y = x;
        for (i, layer) in self.convs.iter().enumerate() {
            if i > 0 {
                y = g.avg_pool2(y);
            }
            let z = p.conv(g, *layer, y, 1)?;
            y = g.leaky_relu(z, LEAKY_SLOPE);
            maps.push(y);
        }
        Ok(maps)
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let maps = self.forward(&mut g, &p, xv)?;
        Ok(maps.into_iter().map(|m| g.value(m).clone()).collect())
    }
}

// ------------------------------------------------------------------ bundle

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorConfig,
    pub features: FeatureConfig,
}

impl ModelConfig {
    /// RRDB generator plus matching discriminator/feature configs for LR
    /// patches of side `lr_patch`.
    pub fn rrdb(gen: GeneratorConfig, lr_patch: usize, disc_channels: usize, feature_channels: usize) -> Self {
        let channels = gen.channels;
        let patch_size = lr_patch * gen.scale;
        ModelConfig {
            generator: GeneratorArch::Rrdb(gen),
            discriminator: DiscriminatorConfig {
                base_channels: disc_channels,
                patch_size,
                channels,
            },
            features: FeatureConfig {
                base_channels: feature_channels,
                channels,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        let c = self.generator.channels();
        if self.discriminator.channels != c || self.features.channels != c {
            return Err(Error::Config("all networks must agree on image channels".into()));
        }
        if self.discriminator.patch_size % self.generator.scale() != 0 {
            return Err(Error::Config("discriminator patch size must be a multiple of the scale".into()));
        }
        Ok(())
    }
}

/// Generator, discriminator and frozen feature extractor.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub generator: Generator,
    pub discriminator: Discriminator,
    features: FeatureExtractor,
    pub seed: u64,
}

impl ModelBundle {
    pub fn new(generator: Generator, discriminator: Discriminator, features: FeatureExtractor, seed: u64) -> Self {
        ModelBundle {
            generator,
            discriminator,
            features,
            seed,
        }
    }

    /// The feature extractor is read-only once the bundle exists.
    pub fn features(&self) -> &FeatureExtractor {
        &self.features
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            generator: self.generator.arch().clone(),
            discriminator: self.discriminator.config().clone(),
            features: self.features.config().clone(),
        }
    }

    /// Checksum over all three parameter sets.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in [self.generator.params(), self.discriminator.params(), self.features.params()] {
            h.update(p.checksum().as_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

pub fn init_models(cfg: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    cfg.validate()?;
    Ok(ModelBundle {
        generator: Generator::new(cfg.generator.clone(), seed)?,
        discriminator: Discriminator::new(cfg.discriminator.clone(), seed)?,
        features: FeatureExtractor::new(cfg.features.clone(), seed)?,
        seed,
    })
}

/// Uniform `[0,1)` tensor, handy for tests and smoke runs.
pub fn random_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen::<f64>()).collect()).expect("shape")
}
