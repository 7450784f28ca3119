#![allow(dead_code)]

pub mod oracles;

use rand::Rng;
use rsrlab_core::dataio::{make_pair, synthetic_corpus, Image, PatchPair};
use rsrlab_core::model::{init_models, GeneratorConfig, ModelBundle, ModelConfig};
use rsrlab_core::rng::stream;

pub const SCALE: usize = 2;
pub const LR: usize = 8;
pub const HR: usize = LR * SCALE;

pub fn tiny_config() -> ModelConfig {
    let gen = GeneratorConfig {
        num_blocks: 1,
        base_channels: 4,
        growth_channels: 4,
        scale: SCALE,
        channels: 3,
    };
    ModelConfig::rrdb(gen, LR, 4, 4)
}

pub fn tiny_bundle(seed: u64) -> ModelBundle {
    init_models(&tiny_config(), seed).unwrap()
}

pub fn tiny_pairs(n: usize, seed: u64) -> Vec<PatchPair> {
    synthetic_corpus(n, HR, HR, 3, seed)
        .unwrap()
        .into_iter()
        .map(|im| make_pair(im, SCALE).unwrap())
        .collect()
}

pub fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = stream(seed, &[0xA11]);
    let px = (0..h * w * c).map(|_| rng.gen::<f64>()).collect();
    Image::new(h, w, c, px).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}
