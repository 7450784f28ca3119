use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use rsrlab_core::attack::{attack_loss, pgd_attack};
use rsrlab_core::checkpoint::{load_checkpoint, save_checkpoint};
use rsrlab_core::dataio::{
    crop_patches, degrade, load_folder, make_pair, save_image, synthetic_corpus, PatchPair,
};
use rsrlab_core::metrics::{evaluate, MetricReport, CLEAN};
use rsrlab_core::model::init_models;
use rsrlab_core::rng::derive_seed;
use rsrlab_core::train::{
    pretrain_clean_with, robust_train_with, Dataset, LogRow, TrainConfig, TrainState, LOG_HEADER,
};

use crate::config::{LossSelect, RunConfig};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const ROBUST_CKPT: &str = "robust.ckpt";

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

/// Write `resolved-config-<command>.ini` into the output directory.
pub fn write_resolved(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("resolved-config-{command}.ini"));
    let text = format!("# effective configuration of `rsrlab {command}`\n{}", cfg.to_text());
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

/// HR training patches: every PNG in `train_dir`, or a synthetic corpus.
pub fn training_pairs(cfg: &RunConfig) -> Result<Vec<PatchPair>> {
    let images = match &cfg.train_dir {
        Some(dir) => load_folder(dir)?.into_iter().map(|(_, img)| img).collect(),
        None => synthetic_corpus(
            cfg.synthetic_train_images,
            cfg.synthetic_train_size,
            cfg.synthetic_train_size,
            cfg.channels,
            cfg.data_seed,
        )?,
    };
    if images.is_empty() {
        bail!("no training images found");
    }
    let mut pairs = Vec::new();
    for img in &images {
        for patch in crop_patches(img, cfg.hr_patch, cfg.patch_stride)? {
            pairs.push(make_pair(patch, cfg.scale)?);
        }
    }
    Ok(pairs)
}

/// Named evaluation pairs: PNGs in `eval_dir` cropped to a multiple of the
/// scale, or synthetic images from a stream disjoint from the training set.
pub fn eval_set(cfg: &RunConfig) -> Result<Vec<(String, PatchPair)>> {
    let named: Vec<(String, _)> = match &cfg.eval_dir {
        Some(dir) => load_folder(dir)?,
        None => synthetic_corpus(
            cfg.synthetic_eval_images,
            cfg.synthetic_eval_size,
            cfg.synthetic_eval_size,
            cfg.channels,
            derive_seed(cfg.data_seed, &[0xE7A1]),
        )?
        .into_iter()
        .enumerate()
        .map(|(i, img)| (format!("synthetic_{i:03}"), img))
        .collect(),
    };
    if named.is_empty() {
        bail!("no evaluation images found");
    }
    let s = cfg.scale;
    named
        .into_iter()
        .map(|(id, img)| {
            let (h, w) = (img.height() / s * s, img.width() / s * s);
            let hr = img.crop(0, 0, h, w)?;
            let pair = make_pair(hr, s).with_context(|| format!("evaluation image {id}"))?;
            Ok((id, pair))
        })
        .collect()
}

fn require_checkpoint(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    cfg.checkpoint
        .clone()
        .with_context(|| format!("`{command}` needs a checkpoint (set `checkpoint` or pass --checkpoint PATH)"))
}

fn load_state(path: &Path) -> Result<TrainState> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))?
        .state)
}

/// Appends rows to the training log and writes periodic checkpoints.
struct RunMonitor {
    log: csv::Writer<File>,
    ckpt_dir: PathBuf,
    phase: &'static str,
    every: usize,
    metadata: BTreeMap<String, String>,
}

impl RunMonitor {
    fn new(cfg: &RunConfig, phase: &'static str, command: &str) -> Result<Self> {
        let path = cfg.output_dir.join(TRAIN_LOG);
        let fresh = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("cannot open {}", path.display()))?;
        let mut log = csv_writer(file);
        if fresh {
            log.write_record(LOG_HEADER)?;
            log.flush()?;
        }
        Ok(RunMonitor {
            log,
            ckpt_dir: cfg.output_dir.join("checkpoints"),
            phase,
            every: cfg.checkpoint_every,
            metadata: metadata(cfg, command),
        })
    }

    fn step(&mut self, state: &TrainState, row: &LogRow) -> rsrlab_core::Result<()> {
        let io = |e: std::io::Error| rsrlab_core::Error::io(TRAIN_LOG, e);
        self.log
            .write_record(row.fields())
            .map_err(|e| rsrlab_core::Error::Format(format!("training log: {e}")))?;
        self.log.flush().map_err(io)?;
        let phase_step = match self.phase {
            "pretrain" => state.pretrain_iters,
            _ => state.robust_iters,
        };
        if phase_step % self.every as u64 == 0 {
            let path = self.ckpt_dir.join(format!("{}-{phase_step:06}.ckpt", self.phase));
            save_checkpoint(state, &self.metadata, path)?;
        }
        Ok(())
    }
}

fn metadata(cfg: &RunConfig, command: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("command".to_string(), command.to_string()),
        ("resolved_config".to_string(), cfg.to_text()),
    ])
}

fn train_phase(
    cfg: &RunConfig,
    state: TrainState,
    data: &Dataset,
    tcfg: &TrainConfig,
    phase: &'static str,
    command: &str,
) -> Result<TrainState> {
    let mut mon = RunMonitor::new(cfg, phase, command)?;
    let mut hook = |s: &TrainState, r: &LogRow| mon.step(s, r);
    let state = match phase {
        "pretrain" => pretrain_clean_with(state, data, tcfg, &mut hook)?,
        _ => robust_train_with(state, data, tcfg, &mut hook)?,
    };
    Ok(state)
}

/// Clean pre-training, resumed from `checkpoint` when one is given.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    write_resolved(cfg, "pretrain")?;
    let state = match &cfg.checkpoint {
        Some(p) => load_state(p)?,
        None => TrainState::new(init_models(&cfg.model_config(), cfg.seed)?),
    };
    let data = Dataset::new(&training_pairs(cfg)?)?;
    let tcfg = cfg.train_config(cfg.pretrain_iters, cfg.l1_warmup_iters);
    let state = train_phase(cfg, state, &data, &tcfg, "pretrain", "pretrain")?;
    let out = cfg.output_dir.join(PRETRAIN_CKPT);
    save_checkpoint(&state, &metadata(cfg, "pretrain"), &out)?;
    println!("pretrain: {} steps, checkpoint {}", state.pretrain_iters, out.display());
    println!("generator checksum {}", state.bundle.generator.params().checksum());
    Ok(out)
}

/// Robust fine-tuning of a pre-trained checkpoint.
pub fn cmd_robust_train(cfg: &RunConfig) -> Result<PathBuf> {
    write_resolved(cfg, "robust-train")?;
    let state = load_state(&require_checkpoint(cfg, "robust-train")?)?;
    let data = Dataset::new(&training_pairs(cfg)?)?;
    let tcfg = cfg.train_config(cfg.robust_iters, 0);
    let state = train_phase(cfg, state, &data, &tcfg, "robust", "robust-train")?;
    let out = cfg.output_dir.join(ROBUST_CKPT);
    save_checkpoint(&state, &metadata(cfg, "robust-train"), &out)?;
    println!("robust-train: {} steps, checkpoint {}", state.robust_iters, out.display());
    println!("generator checksum {}", state.bundle.generator.params().checksum());
    Ok(out)
}

/// Adversarial LR images of the evaluation set, each with a JSON sidecar.
pub fn cmd_attack(cfg: &RunConfig) -> Result<PathBuf> {
    write_resolved(cfg, "attack")?;
    let bundle = load_state(&require_checkpoint(cfg, "attack")?)?.bundle;
    let dir = cfg.output_dir.join("adversarial");
    ensure_dir(&dir)?;
    for (i, (id, pair)) in eval_set(cfg)?.iter().enumerate() {
        let acfg = rsrlab_core::attack::AttackConfig {
            seed: derive_seed(cfg.seed, &[i as u64]),
            ..cfg.attack_config()
        };
        let adv = pgd_attack(&bundle, pair.lr(), pair.hr(), &acfg)?;
        let (lr_t, adv_t, hr_t) = (pair.lr().to_tensor(), adv.to_tensor(), pair.hr().to_tensor());
        let loss = |x| -> Result<Option<f64>> {
            if acfg.use_l1 || acfg.use_percep {
                Ok(Some(attack_loss(&bundle, x, &hr_t, &acfg)?))
            } else {
                Ok(None)
            }
        };
        let sidecar = serde_json::json!({
            "image_id": id,
            "epsilon": acfg.epsilon,
            "iters": acfg.iters,
            "alpha": acfg.alpha,
            "structure_scale": acfg.structure_scale,
            "use_l1": acfg.use_l1,
            "use_percep": acfg.use_percep,
            "recenter": acfg.recenter,
            "seed": acfg.seed,
            "linf_distance": adv_t.max_abs_diff(&lr_t),
            "clean_loss": loss(&lr_t)?,
            "adversarial_loss": loss(&adv_t)?,
        });
        save_image(&adv, dir.join(format!("{id}.png")))?;
        save_image(pair.lr(), dir.join(format!("{id}_clean.png")))?;
        let side = dir.join(format!("{id}.json"));
        fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n")
            .with_context(|| format!("cannot write {}", side.display()))?;
    }
    println!("attack: adversarial inputs in {}", dir.display());
    Ok(dir)
}

fn print_aggregates(report: &MetricReport) {
    println!("{:<24} {:>10} {:>8} {:>20}", "corruption", "psnr_db", "ssim", "percep (surrogate)");
    for a in report.aggregates() {
        println!("{:<24} {:>10.4} {:>8.4} {:>20.6}", a.corruption, a.psnr, a.ssim, a.percep);
    }
}

/// Metrics on clean and corrupted evaluation inputs.
pub fn cmd_eval(cfg: &RunConfig) -> Result<PathBuf> {
    write_resolved(cfg, "eval")?;
    let bundle = load_state(&require_checkpoint(cfg, "eval")?)?.bundle;
    let corruptions = seeded_corruptions(cfg);
    let report = evaluate(&bundle, &eval_set(cfg)?, &corruptions)?;
    let out = cfg.output_dir.join(METRICS_CSV);
    report.save_csv(&out)?;
    print_aggregates(&report);
    println!("eval: {} rows in {}", report.rows.len(), out.display());
    Ok(out)
}

fn seeded_corruptions(cfg: &RunConfig) -> Vec<rsrlab_core::dataio::CorruptionSpec> {
    cfg.corruptions
        .iter()
        .enumerate()
        .map(|(k, c)| c.with_seed(derive_seed(cfg.seed, &[k as u64])))
        .collect()
}

/// Corrupted copies of every PNG in `input_dir`.
pub fn cmd_degrade(cfg: &RunConfig) -> Result<PathBuf> {
    write_resolved(cfg, "degrade")?;
    let input = cfg
        .input_dir
        .as_ref()
        .context("`degrade` needs input_dir")?;
    if cfg.corruptions.is_empty() {
        bail!("`degrade` needs at least one entry in corruptions");
    }
    let images = load_folder(input)?;
    let root = cfg.output_dir.join("degraded");
    for (k, spec) in seeded_corruptions(cfg).iter().enumerate() {
        let dir = root.join(format!("{}_{}", spec.kind.name(), cfg.corruptions[k].strength));
        ensure_dir(&dir)?;
        for (j, (stem, img)) in images.iter().enumerate() {
            let out = degrade(img, &spec.with_seed(derive_seed(spec.seed, &[j as u64])))?;
            save_image(&out, dir.join(format!("{stem}.png")))?;
        }
    }
    println!("degrade: {} images × {} corruptions into {}", images.len(), cfg.corruptions.len(), root.display());
    Ok(root)
}

/// One ablation cell: the attack settings that differ from the base run.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub axis: &'static str,
    pub epsilon: f64,
    pub iters: usize,
    pub structure: f64,
    pub loss: LossSelect,
}

/// The base row followed by one row per listed value of each axis.
pub fn ablation_cells(cfg: &RunConfig) -> Result<Vec<Cell>> {
    let loss = LossSelect::from_flags(cfg.use_l1, cfg.use_percep)
        .context("base attack enables neither use_l1 nor use_percep")?;
    let base = Cell {
        axis: "base",
        epsilon: cfg.epsilon,
        iters: cfg.iters,
        structure: cfg.structure_scale,
        loss,
    };
    let mut cells = vec![base.clone()];
    cells.extend(cfg.sweep_epsilon.iter().map(|&epsilon| Cell { axis: "epsilon", epsilon, ..base.clone() }));
    cells.extend(cfg.sweep_iters.iter().map(|&iters| Cell { axis: "iters", iters, ..base.clone() }));
    cells.extend(cfg.sweep_structure.iter().map(|&structure| Cell { axis: "structure", structure, ..base.clone() }));
    cells.extend(cfg.sweep_loss.iter().map(|&loss| Cell { axis: "loss", loss, ..base.clone() }));
    Ok(cells)
}

impl Cell {
    fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let (use_l1, use_percep) = self.loss.flags();
        // an explicit alpha above a swept ε is pulled down to ε/2
        let alpha = cfg.alpha.filter(|a| *a <= self.epsilon);
        RunConfig {
            epsilon: self.epsilon,
            iters: self.iters,
            structure_scale: self.structure,
            use_l1,
            use_percep,
            alpha,
            ..cfg.clone()
        }
    }
}

/// Robust training per ablation cell from one shared pre-trained state,
/// one CSV row per cell, flushed as soon as it is known.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<PathBuf> {
    write_resolved(cfg, "ablate")?;
    let data = Dataset::new(&training_pairs(cfg)?)?;
    let base_state = match &cfg.checkpoint {
        Some(p) => load_state(p)?,
        None => {
            let state = TrainState::new(init_models(&cfg.model_config(), cfg.seed)?);
            let tcfg = cfg.train_config(cfg.pretrain_iters, cfg.l1_warmup_iters);
            let state = rsrlab_core::train::pretrain_clean(state, &data, &tcfg)?;
            save_checkpoint(&state, &metadata(cfg, "ablate"), cfg.output_dir.join("ablate-pretrain.ckpt"))?;
            state
        }
    };
    let evals = eval_set(cfg)?;
    let corruptions = seeded_corruptions(cfg);
    let labels: Vec<String> = std::iter::once(CLEAN.to_string())
        .chain(cfg.corruptions.iter().map(|c| c.label()))
        .collect();
    let mut header: Vec<String> = ["axis", "epsilon", "iters", "structure", "loss"].map(String::from).to_vec();
    for l in labels.iter().map(String::as_str).chain(["avg"]) {
        for m in ["psnr", "ssim", "percep"] {
            header.push(format!("{m}_{l}"));
        }
    }
    let out = cfg.output_dir.join(ABLATION_CSV);
    let file = File::create(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut w = csv_writer(file);
    w.write_record(&header)?;
    w.flush()?;
    let cells = ablation_cells(cfg)?;
    for (n, cell) in cells.iter().enumerate() {
        let cell_cfg = cell.apply(cfg);
        cell_cfg
            .validate()
            .with_context(|| format!("ablation cell {n} ({})", cell.axis))?;
        let tcfg = cell_cfg.train_config(cfg.robust_iters, 0);
        let state = rsrlab_core::train::robust_train(base_state.clone(), &data, &tcfg)?;
        let report = evaluate(&state.bundle, &evals, &corruptions)?;
        let mut rec = vec![
            cell.axis.to_string(),
            cell.epsilon.to_string(),
            cell.iters.to_string(),
            cell.structure.to_string(),
            cell.loss.name().to_string(),
        ];
        let aggs = report.aggregates();
        let (mut sp, mut ss, mut sq) = (0.0, 0.0, 0.0);
        for a in &aggs {
            rec.extend([a.psnr.to_string(), a.ssim.to_string(), a.percep.to_string()]);
            sp += a.psnr;
            ss += a.ssim;
            sq += a.percep;
        }
        let k = aggs.len() as f64;
        rec.extend([(sp / k).to_string(), (ss / k).to_string(), (sq / k).to_string()]);
        w.write_record(&rec)?;
        w.flush()?;
        println!(
            "ablate {}/{}: {} ε={:.5} iters={} structure={} loss={} psnr_avg={:.3} percep (surrogate)_avg={:.6}",
            n + 1,
            cells.len(),
            cell.axis,
            cell.epsilon,
            cell.iters,
            cell.structure,
            cell.loss.name(),
            sp / k,
            sq / k
        );
    }
    println!("ablate: {} rows in {}", cells.len(), out.display());
    Ok(out)
}
