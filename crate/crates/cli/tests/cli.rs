use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rsrlab::commands::eval_set;
use rsrlab::parse_config;
use rsrlab_core::attack::{init_structured_noise, project};
use rsrlab_core::checkpoint::load_bundle;
use rsrlab_core::dataio::{load_image, quantize_u8, save_image, Image};
use rsrlab_core::rng::derive_seed;

fn micro(out: &Path) -> String {
    format!(
        "[data]
output_dir = {}
hr_patch = 16
patch_stride = 16
synthetic_train_images = 3
synthetic_train_size = 32
synthetic_eval_images = 2
synthetic_eval_size = 16

[model]
scale = 2
num_blocks = 1
base_channels = 4
growth_channels = 4
disc_channels = 4
feature_channels = 4

[train]
batch_size = 2
pretrain_iters = 4
l1_warmup_iters = 2
robust_iters = 2
checkpoint_every = 2
learning_rate = 1e-3
seed = 5
",
        out.display()
    )
}

fn rsrlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsrlab"))
        .args(args)
        .env_remove("RSRLAB_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rsrlab(args);
    assert!(
        out.status.success(),
        "rsrlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = rsrlab(args);
    assert!(!out.status.success(), "rsrlab {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    r.records()
        .map(|rec| header.iter().map(String::from).zip(rec.unwrap().iter().map(String::from)).collect())
        .collect()
}

#[test]
fn pretrain_robust_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "run.ini", &micro(&out));
    ok(&["pretrain", "--config", s(&cfg)]);
    let pre = out.join("pretrain.ckpt");
    assert!(pre.exists());
    assert!(out.join("checkpoints/pretrain-000002.ckpt").exists());
    assert!(out.join("resolved-config-pretrain.ini").exists());

    ok(&["robust-train", "--config", s(&cfg), "--checkpoint", s(&pre)]);
    let robust = out.join("robust.ckpt");
    let log = csv_rows(&out.join("train_log.csv"));
    assert_eq!(log.len(), 6);
    assert_eq!(log[5]["iter"], "6");
    assert_eq!(log[0]["attack_loss_mean"], "");
    assert_ne!(log[5]["attack_loss_mean"], "");

    let stdout = ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&robust)]);
    assert!(stdout.contains("percep (surrogate)"));
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 2 * (1 + 3));
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(text.starts_with("image_id,corruption,psnr_db,ssim,percep\n"));
    assert!(!text.contains('\r'));
}

#[test]
fn eval_of_a_perfect_stub_gives_unit_ssim() {
    let dir = tempfile::tempdir().unwrap();
    let evals = dir.path().join("evals");
    fs::create_dir(&evals).unwrap();
    for (name, v) in [("black", 0.0), ("white", 1.0)] {
        save_image(&Image::constant(16, 16, 3, v).unwrap(), evals.join(format!("{name}.png"))).unwrap();
    }
    let out = dir.path().join("run");
    let text = micro(&out)
        .replace("[model]\n", "[model]\ngenerator = nearest\n")
        .replace("[data]\n", &format!("[data]\neval_dir = {}\n", evals.display()))
        .replace("pretrain_iters = 4", "pretrain_iters = 0")
        .replace("l1_warmup_iters = 2", "l1_warmup_iters = 0")
        + "\n[eval]\ncorruptions =\n";
    let cfg = write_config(dir.path(), "stub.ini", &text);
    ok(&["pretrain", "--config", s(&cfg)]);
    ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&out.join("pretrain.ckpt"))]);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["ssim"].parse::<f64>().unwrap(), 1.0);
        assert_eq!(r["psnr_db"], "inf");
        assert_eq!(r["percep"].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn attack_without_iterations_writes_the_projected_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = write_config(dir.path(), "run.ini", &micro(&out).replace("pretrain_iters = 4", "pretrain_iters = 2"));
    ok(&["pretrain", "--config", s(&cfg_path)]);
    let ckpt = out.join("pretrain.ckpt");
    ok(&["attack", "--config", s(&cfg_path), "--checkpoint", s(&ckpt), "--iters", "0", "--epsilon", "8/255"]);

    let mut cfg = parse_config(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg.iters = 0;
    cfg.epsilon = 8.0 / 255.0;
    for (i, (id, pair)) in eval_set(&cfg).unwrap().iter().enumerate() {
        let acfg = rsrlab_core::attack::AttackConfig {
            seed: derive_seed(cfg.seed, &[i as u64]),
            ..cfg.attack_config()
        };
        let lr = pair.lr().to_tensor();
        let noise = init_structured_noise(lr.height(), lr.width(), lr.channels(), &acfg).unwrap();
        let expected = project(&lr.zip_map(&noise, |a, b| a + b), &lr, acfg.epsilon).unwrap();
        let written = load_image(out.join(format!("adversarial/{id}.png"))).unwrap();
        let expected_img = Image::from_tensor(&expected, 0).unwrap();
        for (w, e) in written.pixels().iter().zip(expected_img.pixels()) {
            assert_eq!(*w, quantize_u8(*e) as f64 / 255.0);
        }
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("adversarial/{id}.json"))).unwrap()).unwrap();
        assert_eq!(side["iters"], 0);
        assert!(side["linf_distance"].as_f64().unwrap() <= acfg.epsilon + 1e-9);
        assert_eq!(side["linf_distance"].as_f64().unwrap(), expected.max_abs_diff(&lr));
        assert!(side["adversarial_loss"].as_f64().is_some());
    }
}

#[test]
fn resolved_config_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let cfg = write_config(dir.path(), "run.ini", &micro(&a));
    let first = Command::new(env!("CARGO_BIN_EXE_rsrlab"))
        .args(["pretrain", "--config", s(&cfg), "--learning_rate", "2e-3"])
        .env("RSRLAB_SEED", "77")
        .output()
        .unwrap();
    assert!(first.status.success());
    let resolved = a.join("resolved-config-pretrain.ini");
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("seed = 77"));
    assert!(text.contains("learning_rate = 0.002"));

    let b = dir.path().join("b");
    ok(&["pretrain", "--config", s(&resolved), "--output_dir", s(&b)]);
    let (ba, bb) = (load_bundle(a.join("pretrain.ckpt")).unwrap(), load_bundle(b.join("pretrain.ckpt")).unwrap());
    assert_eq!(ba.checksum(), bb.checksum());

    for run in [&a, &b] {
        let resolved = run.join("resolved-config-pretrain.ini");
        ok(&["eval", "--config", s(&resolved), "--checkpoint", s(&run.join("pretrain.ckpt")), "--output_dir", s(run)]);
    }
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(p.clone(), fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn commands_leave_their_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("inputs");
    fs::create_dir(&inputs).unwrap();
    for k in 0..3u64 {
        let img = rsrlab_core::dataio::synthetic_image(32, 32, 3, k).unwrap();
        save_image(&img, inputs.join(format!("im{k}.png"))).unwrap();
    }
    let out = dir.path().join("run");
    let text = micro(&out).replace(
        "[data]\n",
        &format!(
            "[data]\ntrain_dir = {0}\neval_dir = {0}\ninput_dir = {0}\n",
            inputs.display()
        ),
    );
    let cfg = write_config(dir.path(), "run.ini", &text);
    let before = (snapshot(&inputs), fs::read(&cfg).unwrap());

    ok(&["pretrain", "--config", s(&cfg)]);
    let ckpt = out.join("pretrain.ckpt");
    let ckpt_bytes = fs::read(&ckpt).unwrap();
    ok(&["robust-train", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    ok(&["attack", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    ok(&["degrade", "--config", s(&cfg)]);

    assert_eq!(before, (snapshot(&inputs), fs::read(&cfg).unwrap()));
    assert_eq!(ckpt_bytes, fs::read(&ckpt).unwrap());
    let degraded = out.join("degraded/gaussian_0.04");
    assert_eq!(snapshot(&degraded).len(), 3);
    assert!(load_image(degraded.join("im0.png")).unwrap() != load_image(inputs.join("im0.png")).unwrap());
}

#[test]
fn single_cell_ablation_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let text = micro(&out) + "\n[ablate]\nsweep_epsilon =\nsweep_iters =\nsweep_structure =\nsweep_loss =\n";
    let cfg = write_config(dir.path(), "run.ini", &text);
    ok(&["ablate", "--config", s(&cfg)]);
    let rows = csv_rows(&out.join("ablation.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["axis"], "base");
    assert_eq!(rows[0]["loss"], "both");
    for key in ["psnr_avg", "ssim_avg", "percep_avg", "psnr_clean", "percep_quantize:16"] {
        assert!(rows[0][key].parse::<f64>().unwrap().is_finite(), "{key}");
    }
    assert!(out.join("ablate-pretrain.ckpt").exists());
}

#[test]
fn errors_name_their_cause_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let typo = write_config(dir.path(), "typo.ini", &(micro(&out) + "[attack]\nepsilo = 0.1\n"));
    let err = fail(&["eval", "--config", s(&typo)]);
    assert!(err.contains("epsilo"), "{err}");

    let good = write_config(dir.path(), "good.ini", &micro(&out));
    let err = fail(&["eval", "--config", s(&good)]);
    assert!(err.contains("checkpoint"), "{err}");

    let err = fail(&["eval", "--config", s(&good), "--checkpoint", s(&dir.path().join("nope.ckpt"))]);
    assert!(err.contains("nope.ckpt"), "{err}");

    let err = fail(&["pretrain", "--config", s(&good), "--epsilon", "2"]);
    assert!(err.contains("epsilon"), "{err}");

    let err = fail(&["pretrain", "--config", s(&dir.path().join("missing.ini"))]);
    assert!(err.contains("missing.ini"), "{err}");

    let bad_seed = Command::new(env!("CARGO_BIN_EXE_rsrlab"))
        .args(["pretrain", "--config", s(&good)])
        .env("RSRLAB_SEED", "twelve")
        .output()
        .unwrap();
    assert!(!bad_seed.status.success());
    assert!(String::from_utf8_lossy(&bad_seed.stderr).contains("RSRLAB_SEED"));
}

#[test]
fn command_line_overrides_beat_the_environment_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let text = micro(&out)
        .replace("pretrain_iters = 4", "pretrain_iters = 0")
        .replace("l1_warmup_iters = 2", "l1_warmup_iters = 0");
    let cfg = write_config(dir.path(), "run.ini", &text);
    let run = Command::new(env!("CARGO_BIN_EXE_rsrlab"))
        .args(["pretrain", "--config", s(&cfg), "--train.seed", "9"])
        .env("RSRLAB_SEED", "3")
        .output()
        .unwrap();
    assert!(run.status.success());
    let text = fs::read_to_string(out.join("resolved-config-pretrain.ini")).unwrap();
    assert!(text.contains("seed = 9\n"), "{text}");
}
