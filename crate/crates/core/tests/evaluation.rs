mod common;

use common::{median, random_image, tiny_bundle, tiny_pairs};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rsrlab_core::dataio::{make_pair, CorruptionSpec, Image};
use rsrlab_core::metrics::{evaluate, perceptual_distance, MetricReport, CLEAN, PSNR_IDENTICAL};
use rsrlab_core::model::{init_models, GeneratorArch};
use rsrlab_core::rng::stream;

fn corruptions() -> Vec<CorruptionSpec> {
    ["gaussian:0.04", "salt_pepper:0.02", "quantize:16"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect()
}

fn eval_set(n: usize, seed: u64) -> Vec<(String, rsrlab_core::dataio::PatchPair)> {
    tiny_pairs(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, p)| (format!("img{i}"), p))
        .collect()
}

#[test]
fn report_has_one_row_per_image_and_variant() {
    let bundle = tiny_bundle(3);
    let set = eval_set(3, 11);
    let report = evaluate(&bundle, &set, &corruptions()).unwrap();
    assert_eq!(report.rows.len(), 3 * (1 + 3));
    let labels: Vec<_> = report.aggregates().into_iter().map(|a| a.corruption).collect();
    assert_eq!(labels, ["clean", "gaussian:0.04", "salt_pepper:0.02", "quantize:16"]);
    for r in &report.rows {
        assert!(r.psnr >= 0.0 && (-1.0..=1.0).contains(&r.ssim) && r.percep >= 0.0, "{r:?}");
    }
}

#[test]
fn no_corruptions_gives_clean_rows_only() {
    let report = evaluate(&tiny_bundle(3), &eval_set(2, 12), &[]).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.corruption == CLEAN));
}

#[test]
fn evaluation_is_deterministic() {
    let bundle = tiny_bundle(4);
    let set = eval_set(2, 13);
    let a = evaluate(&bundle, &set, &corruptions()).unwrap();
    let b = evaluate(&bundle, &set, &corruptions()).unwrap();
    assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
}

#[test]
fn perfect_generator_scores_perfectly_on_clean_rows() {
    let mut cfg = common::tiny_config();
    cfg.generator = GeneratorArch::NearestStub {
        scale: common::SCALE,
        channels: 3,
    };
    let bundle = init_models(&cfg, 0).unwrap();
    // Nearest upsampling reproduces a constant HR exactly, and dyadic
    // constants survive the downsampler bit for bit.
    let set: Vec<_> = [0.0, 0.125, 0.5, 1.0]
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let hr = Image::constant(common::HR, common::HR, 3, v).unwrap();
            (format!("c{i}"), make_pair(hr, common::SCALE).unwrap())
        })
        .collect();
    let report = evaluate(&bundle, &set, &corruptions()).unwrap();
    for r in report.rows.iter().filter(|r| r.corruption == CLEAN) {
        assert_eq!(r.psnr, PSNR_IDENTICAL);
        assert_eq!(r.ssim, 1.0);
        assert_eq!(r.percep, 0.0);
    }
}

#[test]
fn csv_layout() {
    let report = MetricReport {
        rows: vec![rsrlab_core::metrics::MetricRow {
            image_id: "a".into(),
            corruption: CLEAN.into(),
            psnr: PSNR_IDENTICAL,
            ssim: 1.0,
            percep: 0.0,
        }],
    };
    let text = report.to_csv_string().unwrap();
    assert!(text.starts_with("image_id,corruption,psnr_db,ssim,percep\n"));
    assert!(!text.contains('\r'));
}

#[test]
fn perceptual_distance_is_symmetric_and_zero_on_identity() {
    let fx = tiny_bundle(5).features().clone();
    for k in 0..5 {
        let a = random_image(16, 16, 3, 40 + k);
        let b = random_image(16, 16, 3, 80 + k);
        assert_eq!(perceptual_distance(&fx, &a, &a).unwrap(), 0.0);
        assert_eq!(
            perceptual_distance(&fx, &a, &b).unwrap(),
            perceptual_distance(&fx, &b, &a).unwrap()
        );
    }
}

fn box3(img: &Image) -> Image {
    let (h, w) = (img.height() as isize, img.width() as isize);
    Image::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if (0..h).contains(&yy) && (0..w).contains(&xx) {
                    acc += img.get(yy as usize, xx as usize, c);
                    n += 1.0;
                }
            }
        }
        acc / n
    })
    .unwrap()
}

#[test]
fn denoising_moves_closer_in_perceptual_distance() {
    let fx = tiny_bundle(6).features().clone();
    let noise = Normal::new(0.0, 0.1).unwrap();
    let gains: Vec<f64> = (0..10)
        .map(|t| {
            let mut rng = stream(t, &[0xD0]);
            let (fy, fx_, phase) = (rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen::<f64>());
            let clean = Image::from_fn(32, 32, 3, |y, x, c| {
                0.5 + 0.3 * ((y as f64 * fy + x as f64 * fx_) + phase + c as f64).sin()
            })
            .unwrap();
            let noisy = Image::from_fn(32, 32, 3, |y, x, c| clean.get(y, x, c) + noise.sample(&mut stream(t, &[y as u64, x as u64, c as u64]))).unwrap();
            let denoised = box3(&noisy);
            perceptual_distance(&fx, &clean, &noisy).unwrap() - perceptual_distance(&fx, &clean, &denoised).unwrap()
        })
        .collect();
    assert!(median(gains.clone()) > 0.0, "{gains:?}");
}
