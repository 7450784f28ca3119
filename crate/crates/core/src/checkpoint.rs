//! `rsrlab-ckpt-v1` files.
//!
//! Layout: the magic line `rsrlab-ckpt-v1\n`, a little-endian `u64` header
//! length, a JSON header (configs, counters, tensor directory), the tensors
//! as raw little-endian `f64` in directory order, and a SHA-256 of all
//! preceding bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Discriminator, FeatureExtractor, Generator, ModelBundle, ModelConfig, ParamSet};
use crate::tensor::Tensor;
use crate::train::{AdamState, RunningLosses, TrainState};

pub const MAGIC: &[u8] = b"rsrlab-ckpt-v1\n";
const MAGIC_PREFIX: &[u8] = b"rsrlab-ckpt-";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    seed: u64,
    iteration: u64,
    pretrain_iters: u64,
    robust_iters: u64,
    adam_g_step: u64,
    adam_d_step: u64,
    running: RunningLosses,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// A training state plus free-form string metadata (e.g. the resolved run
/// configuration).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    pub metadata: BTreeMap<String, String>,
}

const GROUPS: [&str; 7] = ["generator", "discriminator", "features", "adam_g.m", "adam_g.v", "adam_d.m", "adam_d.v"];

fn named<'a>(params: &'a ParamSet, tensors: &'a [Tensor]) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
    params.names().iter().map(String::as_str).zip(tensors)
}

pub fn encode(state: &TrainState, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let b = &state.bundle;
    let (gp, dp) = (b.generator.params(), b.discriminator.params());
    let groups: [Vec<(&str, &Tensor)>; 7] = [
        gp.iter().collect(),
        dp.iter().collect(),
        b.features().params().iter().collect(),
        named(gp, &state.opt_g.m).collect(),
        named(gp, &state.opt_g.v).collect(),
        named(dp, &state.opt_d.m).collect(),
        named(dp, &state.opt_d.v).collect(),
    ];
    let mut tensors = Vec::new();
    let mut entries = Vec::new();
    for (group, items) in GROUPS.iter().zip(&groups) {
        for (name, t) in items {
            entries.push(TensorEntry {
                name: format!("{group}/{name}"),
                shape: t.shape(),
            });
            tensors.push(*t);
        }
    }
    let header = Header {
        model: b.config(),
        seed: b.seed,
        iteration: state.iteration,
        pretrain_iters: state.pretrain_iters,
        robust_iters: state.robust_iters,
        adam_g_step: state.opt_g.step,
        adam_d_step: state.opt_d.step,
        running: state.running,
        metadata: metadata.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * tensors.iter().map(|t| t.len()).sum::<usize>() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("checkpoint truncated while reading {what}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if !bytes.starts_with(MAGIC) {
        if bytes.starts_with(MAGIC_PREFIX) {
            let line = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
            return Err(Error::Format(format!(
                "unsupported checkpoint version {:?}",
                String::from_utf8_lossy(line)
            )));
        }
        return Err(Error::Format("not an rsrlab checkpoint".into()));
    }
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut pos = MAGIC.len();
    let len = u64::from_le_bytes(take(body, &mut pos, 8, "header length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(body, &mut pos, len, "header")?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut read = BTreeMap::new();
    let mut order = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = take(body, &mut pos, n * 8, &e.name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        read.insert(e.name.clone(), Tensor::from_vec(e.shape, data)?);
        order.push(e.name.clone());
    }
    if pos != body.len() {
        return Err(Error::Format(format!(
            "checkpoint truncated or padded: {} unexpected bytes",
            body.len() - pos
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    header.model.validate()?;

    let group = |prefix: &str| -> Vec<(String, Tensor)> {
        let p = format!("{prefix}/");
        order
            .iter()
            .filter_map(|n| n.strip_prefix(&p).map(|s| (s.to_string(), read[n].clone())))
            .collect()
    };
    let mut generator = Generator::skeleton(header.model.generator.clone())?;
    generator.params_mut().load_from(&group("generator"))?;
    let mut discriminator = Discriminator::skeleton(header.model.discriminator.clone())?;
    discriminator.params_mut().load_from(&group("discriminator"))?;
    let features = FeatureExtractor::with_weights(header.model.features.clone(), &group("features"))?;
    let moments = |prefix: &str, params: &ParamSet, step: u64| -> Result<AdamState> {
        let mut m = params.clone();
        m.load_from(&group(&format!("{prefix}.m")))?;
        let mut v = params.clone();
        v.load_from(&group(&format!("{prefix}.v")))?;
        Ok(AdamState {
            step,
            m: m.tensors().to_vec(),
            v: v.tensors().to_vec(),
        })
    };
    let opt_g = moments("adam_g", generator.params(), header.adam_g_step)?;
    let opt_d = moments("adam_d", discriminator.params(), header.adam_d_step)?;
    let bundle = ModelBundle::new(generator, discriminator, features, header.seed);
    Ok(Checkpoint {
        state: TrainState {
            bundle,
            opt_g,
            opt_d,
            iteration: header.iteration,
            pretrain_iters: header.pretrain_iters,
            robust_iters: header.robust_iters,
            running: header.running,
        },
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(state: &TrainState, metadata: &BTreeMap<String, String>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(state, metadata)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Just the networks, for inference.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    load_checkpoint(path).map(|c| c.state.bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_models, GeneratorConfig};

    fn small_state() -> TrainState {
        let gen = GeneratorConfig {
            num_blocks: 1,
            base_channels: 4,
            growth_channels: 2,
            scale: 2,
            channels: 3,
        };
        let mut st = TrainState::new(init_models(&ModelConfig::rrdb(gen, 8, 2, 2), 5).unwrap());
        st.opt_g.step = 3;
        st.opt_g.m[0].data_mut()[0] = 0.125;
        st.iteration = 7;
        st.running.l1 = Some(0.1 + 0.2);
        st
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let st = small_state();
        let mut meta = BTreeMap::new();
        meta.insert("note".into(), "x".into());
        let a = encode(&st, &meta).unwrap();
        let back = decode(&a).unwrap();
        assert_eq!(back.metadata, meta);
        assert_eq!(back.state.bundle.checksum(), st.bundle.checksum());
        assert_eq!(back.state.opt_g, st.opt_g);
        assert_eq!(back.state.running, st.running);
        assert_eq!(encode(&back.state, &back.metadata).unwrap(), a);
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let a = encode(&small_state(), &BTreeMap::new()).unwrap();
        for cut in [0, 5, MAGIC.len() + 4, MAGIC.len() + 40, a.len() / 2, a.len() - 1] {
            assert!(matches!(decode(&a[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut flipped = a.clone();
        let k = a.len() - 100;
        flipped[k] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Format(_))));
        let mut v2 = a.clone();
        v2[MAGIC.len() - 2] = b'2';
        let err = decode(&v2).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
