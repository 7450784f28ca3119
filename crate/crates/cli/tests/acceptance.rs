//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p rsrlab --test acceptance -- 1 5` runs a subset.

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;
use rsrlab_core::attack::{attack_loss, pgd_attack, pgd_attack_batch, project, AttackConfig};
use rsrlab_core::checkpoint::load_bundle;
use rsrlab_core::dataio::{crop_patches, make_pair, synthetic_corpus, CorruptionSpec, Image, PatchPair};
use rsrlab_core::gradcheck;
use rsrlab_core::metrics::{evaluate, psnr, ssim, Aggregate, CLEAN};
use rsrlab_core::model::{init_models, random_tensor, GeneratorConfig, ModelBundle, ModelConfig};
use rsrlab_core::rng::{derive_seed, stream};
use rsrlab_core::train::{pretrain_clean, robust_train, Dataset, TrainConfig, TrainState};
use rsrlab_core::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed.as_secs() < limit_s
}

fn patches(images: &[Image], size: usize, scale: usize) -> Vec<PatchPair> {
    images
        .iter()
        .flat_map(|im| crop_patches(im, size, size).unwrap())
        .map(|p| make_pair(p, scale).unwrap())
        .collect()
}

fn stack(pairs: &[PatchPair]) -> (Tensor, Tensor) {
    let lr: Vec<Tensor> = pairs.iter().map(|p| p.lr().to_tensor()).collect();
    let hr: Vec<Tensor> = pairs.iter().map(|p| p.hr().to_tensor()).collect();
    (Tensor::stack(&lr).unwrap(), Tensor::stack(&hr).unwrap())
}

/// The ×4 toy generator used by the training criteria: LR 16, HR 64.
fn toy_bundle(seed: u64) -> ModelBundle {
    let gen = GeneratorConfig {
        num_blocks: 1,
        base_channels: 8,
        growth_channels: 8,
        scale: 4,
        channels: 3,
    };
    init_models(&ModelConfig::rrdb(gen, 16, 8, 8), seed).unwrap()
}

// 1 ------------------------------------------------------------------------

fn fuzz_lr(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    let kind = rng.gen_range(0..4);
    let v = rng.gen::<f64>();
    let px = (0..h * w * 3)
        .map(|_| match kind {
            0 => rng.gen::<f64>(),
            1 => 0.0,
            2 => 1.0,
            _ => (rng.gen::<f64>() < v) as u8 as f64,
        })
        .collect();
    Image::new(h, w, 3, px).unwrap()
}

fn constraint_suite() -> Outcome {
    let start = Instant::now();
    let gen = GeneratorConfig {
        num_blocks: 1,
        base_channels: 4,
        growth_channels: 4,
        scale: 2,
        channels: 3,
    };
    let bundles: Vec<ModelBundle> = (0..8)
        .map(|s| init_models(&ModelConfig::rrdb(gen.clone(), 8, 4, 4), s).unwrap())
        .collect();
    let mut rng = stream(2024, &[1]);
    let (mut ok, mut worst) = (0, 0.0f64);
    const CALLS: usize = 1000;
    for call in 0..CALLS {
        let bundle = &bundles[call % bundles.len()];
        let epsilon = rng.gen_range(0.0..=0.1);
        let (use_l1, use_percep) = match rng.gen_range(0..3) {
            0 => (true, false),
            1 => (false, true),
            _ => (true, true),
        };
        let cfg = AttackConfig {
            epsilon,
            iters: rng.gen_range(0..=8),
            alpha: epsilon * rng.gen_range(0.05..=1.0),
            structure_scale: rng.gen_range(1.0..=2.0),
            use_l1,
            use_percep,
            recenter: false,
            seed: rng.gen(),
        };
        let lr = fuzz_lr(&mut rng, 8, 8);
        let hr = fuzz_lr(&mut rng, 16, 16);
        let adv = pgd_attack(bundle, &lr, &hr, &cfg).unwrap();
        let dev = adv
            .pixels()
            .iter()
            .zip(lr.pixels())
            .map(|(a, l)| (a - l).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dev - epsilon);
        if dev <= epsilon + 1e-9 && adv.pixels().iter().all(|p| (0.0..=1.0).contains(p)) {
            ok += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        ok == CALLS && within(t, 300),
        format!("{ok}/{CALLS} attacks within the ε-ball and [0,1] (max excess {worst:.1e}), {:.1}s", t.as_secs_f64()),
    )
}

// 2 ------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks = gradcheck::run_suite(7).unwrap();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passes())
        .map(|c| format!("{}/{}", c.target, c.wrt))
        .collect();
    let worst = checks.iter().map(|c| c.rel_error()).fold(0.0, f64::max);
    let mut targets: Vec<&str> = checks.iter().map(|c| c.target.as_str()).collect();
    targets.dedup();
    let t = start.elapsed();
    outcome(
        failed.is_empty() && within(t, 120),
        format!(
            "{} checks over {} ({} failed{}), max rel error {worst:.1e}, {:.1}s",
            checks.len(),
            targets.join(", "),
            failed.len(),
            if failed.is_empty() { String::new() } else { format!(": {}", failed.join(" ")) },
            t.as_secs_f64()
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn attack_effectiveness() -> Outcome {
    let start = Instant::now();
    let train = patches(&synthetic_corpus(25, 128, 128, 3, 500).unwrap(), 64, 4);
    let held = patches(&synthetic_corpus(8, 128, 128, 3, 777).unwrap(), 64, 4);
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        batch_size: 4,
        total_iters: 400,
        l1_warmup_iters: 400,
        seed: 3,
        ..TrainConfig::default()
    };
    let state = pretrain_clean(TrainState::new(toy_bundle(3)), &Dataset::new(&train).unwrap(), &cfg).unwrap();
    let bundle = &state.bundle;
    let (lr, hr) = stack(&held);
    let attack = AttackConfig::default();
    const TRIALS: u64 = 20;
    let mut wins = 0;
    let mut margins = Vec::new();
    for t in 0..TRIALS {
        let seeds: Vec<u64> = (0..lr.batch() as u64).map(|i| derive_seed(t, &[i])).collect();
        let adv = pgd_attack_batch(&bundle.generator, bundle.features(), &lr, &hr, &attack, &seeds).unwrap();
        let mut rng = stream(t, &[0x4E015E]);
        let noise = random_tensor(lr.shape(), &mut rng).map(|u| (2.0 * u - 1.0) * attack.epsilon);
        let noisy = project(&lr.zip_map(&noise, |a, b| a + b), &lr, attack.epsilon).unwrap();
        let la = attack_loss(bundle, &adv, &hr, &attack).unwrap();
        let ln = attack_loss(bundle, &noisy, &hr, &attack).unwrap();
        margins.push(la / ln);
        if la > ln {
            wins += 1;
        }
    }
    let t = start.elapsed();
    let mean_ratio = margins.iter().sum::<f64>() / margins.len() as f64;
    outcome(
        wins * 10 >= 9 * TRIALS && within(t, 300),
        format!(
            "PGD beats random ε-noise in {wins}/{TRIALS} trials of {} patches (mean loss ratio {mean_ratio:.3}), {:.1}s",
            lr.batch(),
            t.as_secs_f64()
        ),
    )
}

// 4 ------------------------------------------------------------------------

const FAMILIES: [&str; 3] = ["gaussian:0.04", "salt_pepper:0.02", "quantize:16"];

/// Per-seed aggregates of the baseline and the robust model.
struct SeedResult {
    base: Vec<Aggregate>,
    rsr: Vec<Aggregate>,
}

fn get<'a>(aggs: &'a [Aggregate], label: &str) -> &'a Aggregate {
    aggs.iter().find(|a| a.corruption == label).expect("label present")
}

/// Clean PSNR minus mean PSNR over the corruption families.
fn psnr_drop(aggs: &[Aggregate]) -> f64 {
    let corrupted = FAMILIES.iter().map(|f| get(aggs, f).psnr).sum::<f64>() / FAMILIES.len() as f64;
    get(aggs, CLEAN).psnr - corrupted
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn rsr_seed(seed: u64) -> SeedResult {
    let train = patches(&synthetic_corpus(50, 128, 128, 3, 100 + seed).unwrap(), 64, 4);
    let data = Dataset::new(&train).unwrap();
    let evals: Vec<(String, PatchPair)> = synthetic_corpus(8, 64, 64, 3, 9999)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, im)| (format!("{i}"), make_pair(im, 4).unwrap()))
        .collect();
    let corruptions: Vec<CorruptionSpec> = FAMILIES.iter().map(|s| s.parse().unwrap()).collect();
    let pre_cfg = TrainConfig {
        learning_rate: 2e-3,
        batch_size: 4,
        total_iters: 3200,
        l1_warmup_iters: 3000,
        seed,
        ..TrainConfig::default()
    };
    let pre = pretrain_clean(TrainState::new(toy_bundle(seed)), &data, &pre_cfg).unwrap();
    let fine_tune = |adv_fraction: f64| {
        let cfg = TrainConfig {
            learning_rate: 5e-4,
            total_iters: 400,
            l1_warmup_iters: 0,
            adv_fraction,
            ..pre_cfg.clone()
        };
        let s = robust_train(pre.clone(), &data, &cfg).unwrap();
        evaluate(&s.bundle, &evals, &corruptions).unwrap().aggregates()
    };
    SeedResult {
        base: fine_tune(0.0),
        rsr: fine_tune(0.5),
    }
}

fn rsr_claim() -> Outcome {
    let start = Instant::now();
    let results: Vec<SeedResult> = (1..=3).map(rsr_seed).collect();
    for (k, r) in results.iter().enumerate() {
        let row = |aggs: &[Aggregate]| {
            std::iter::once(CLEAN)
                .chain(FAMILIES)
                .map(|f| format!("{:.3}/{:.5}", get(aggs, f).psnr, get(aggs, f).percep))
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!("    seed {}  baseline psnr/percep {}", k + 1, row(&r.base));
        println!("    seed {}  rsr      psnr/percep {}", k + 1, row(&r.rsr));
    }
    let med = |f: &str, pick: fn(&SeedResult) -> &Vec<Aggregate>| {
        median(results.iter().map(|r| get(pick(r), f).percep).collect())
    };
    let wins = FAMILIES
        .iter()
        .filter(|f| med(f, |r| &r.rsr) < med(f, |r| &r.base))
        .count();
    let base_drop = median(results.iter().map(|r| psnr_drop(&r.base)).collect());
    let rsr_drop = median(results.iter().map(|r| psnr_drop(&r.rsr)).collect());
    let t = start.elapsed();
    outcome(
        wins >= 2 && rsr_drop <= base_drop + 0.5 && within(t, 45 * 60),
        format!(
            "median over 3 seeds: RSR lower percep on {wins}/3 families; PSNR drop under corruption rsr {rsr_drop:.3} dB vs baseline {base_drop:.3} dB, {:.0}s",
            t.as_secs_f64()
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for k in 0..100u64 {
        let mut rng = stream(k, &[5]);
        let (h, w) = (rng.gen_range(11..=24), rng.gen_range(11..=24));
        let c = if k % 2 == 0 { 3 } else { 1 };
        let mix = rng.gen::<f64>();
        let a = Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen()).collect()).unwrap();
        let b = Image::from_fn(h, w, c, |y, x, ch| mix * a.get(y, x, ch) + (1.0 - mix) * ((y * 7 + x * 3 + ch) % 11) as f64 / 10.0).unwrap();
        dp = dp.max((psnr(&a, &b).unwrap() - oracles::psnr_oracle(&a, &b)).abs());
        ds = ds.max((ssim(&a, &b).unwrap() - oracles::ssim_oracle(&a, &b)).abs());
    }
    let half = psnr(&Image::constant(16, 16, 3, 0.0).unwrap(), &Image::constant(16, 16, 3, 0.5).unwrap()).unwrap();
    let t = start.elapsed();
    outcome(
        dp <= 1e-9 && ds <= 1e-6 && (half - 6.0206).abs() <= 1e-4 && within(t, 60),
        format!(
            "100 pairs: max |Δpsnr| {dp:.1e}, max |Δssim| {ds:.1e}; constant pair 0 vs 0.5 gives {half:.4} dB, {:.1}s",
            t.as_secs_f64()
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn micro_config(out: &Path, extra: &str) -> String {
    format!(
        "[data]
output_dir = {}
hr_patch = 32
patch_stride = 32
synthetic_train_images = 4
synthetic_train_size = 64
synthetic_eval_images = 2
synthetic_eval_size = 32

[model]
scale = 4
num_blocks = 1
base_channels = 4
growth_channels = 4
disc_channels = 4
feature_channels = 4

[train]
batch_size = 2
learning_rate = 1e-3
pretrain_iters = 50
l1_warmup_iters = 40
seed = 11
{extra}",
        out.display()
    )
}

fn rsrlab(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rsrlab"))
        .args(args)
        .env_remove("RSRLAB_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("rsrlab {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn full_run(dir: &Path, name: &str) -> Result<(String, Vec<u8>), String> {
    let out = dir.join(name);
    let cfg = dir.join(format!("{name}.ini"));
    fs::write(&cfg, micro_config(&out, "robust_iters = 30\n")).map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    rsrlab(&["pretrain", "--config", cfg])?;
    let pre = out.join("pretrain.ckpt");
    rsrlab(&["robust-train", "--config", cfg, "--checkpoint", pre.to_str().unwrap()])?;
    let robust = out.join("robust.ckpt");
    rsrlab(&["eval", "--config", cfg, "--checkpoint", robust.to_str().unwrap()])?;
    let checksum = load_bundle(&robust).map_err(|e| e.to_string())?.checksum();
    let csv = fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?;
    Ok((checksum, csv))
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let runs = full_run(dir.path(), "a").and_then(|a| full_run(dir.path(), "b").map(|b| (a, b)));
    let t = start.elapsed();
    match runs {
        Ok(((ca, ma), (cb, mb))) => outcome(
            ca == cb && ma == mb,
            format!(
                "two pretrain/robust-train/eval runs: checksums {} ({}…), metrics CSVs {}, {:.1}s",
                if ca == cb { "identical" } else { "differ" },
                &ca[..12],
                if ma == mb { "identical" } else { "differ" },
                t.as_secs_f64()
            ),
        ),
        Err(e) => outcome(false, e),
    }
}

// 7 ------------------------------------------------------------------------

fn ablation() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    let cfg = dir.path().join("ablate.ini");
    fs::write(&cfg, micro_config(&out, "robust_iters = 50\n")).unwrap();
    if let Err(e) = rsrlab(&["ablate", "--config", cfg.to_str().unwrap()]) {
        return outcome(false, e);
    }
    let mut reader = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let metric_cols: Vec<usize> = (5..header.len()).collect();
    let finite = rows
        .iter()
        .all(|r| metric_cols.iter().all(|&i| r[i].parse::<f64>().map(f64::is_finite).unwrap_or(false)));
    let mut axes: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    axes.dedup();
    let t = start.elapsed();
    outcome(
        rows.len() == 5 + 4 + 2 + 2 + 1 && finite,
        format!(
            "{} rows (axes {}), {} metric columns, all finite: {finite}, {:.1}s",
            rows.len(),
            axes.join("/"),
            metric_cols.len(),
            t.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Outcome); 7] = [
        ("1", "constraint suite", constraint_suite),
        ("2", "gradient suite", gradient_suite),
        ("3", "attack effectiveness", attack_effectiveness),
        ("4", "robust vs clean fine-tuning", rsr_claim),
        ("5", "metric oracles", metric_oracles),
        ("6", "determinism", determinism),
        ("7", "ablation harness", ablation),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let o = run();
        println!("acceptance {id} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failures += 1;
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
