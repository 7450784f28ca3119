//! Brute-force reference implementations checked against the library.

mod common;

use common::oracles::{psnr_oracle, ssim_oracle};
use common::random_image;
use proptest::prelude::*;
use rsrlab_core::dataio::{bicubic_downsample, Image};
use rsrlab_core::metrics::{psnr, ssim, PSNR_IDENTICAL};

/// Keys kernel written out term by term.
fn keys(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Mirror an index into `0..n` by walking the padded sequence
/// `… 1 0 | 0 1 … n−1 | n−1 n−2 …`.
fn mirror(i: i64, n: i64) -> usize {
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

/// Direct 2-D convolution with the stretched kernel, normalised by the
/// 2-D weight sum.
fn bicubic_oracle(img: &Image, s: usize) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let sf = s as f64;
    let reach = 3 * s as i64;
    Image::from_fn(h / s, w / s, c, |oy, ox, ch| {
        let cy = (oy as f64 + 0.5) * sf - 0.5;
        let cx = (ox as f64 + 0.5) * sf - 0.5;
        let (mut acc, mut norm) = (0.0, 0.0);
        for j in cy as i64 - reach..=cy as i64 + reach {
            for i in cx as i64 - reach..=cx as i64 + reach {
                let wt = keys((j as f64 - cy) / sf) * keys((i as f64 - cx) / sf);
                acc += wt * img.get(mirror(j, h as i64), mirror(i, w as i64), ch);
                norm += wt;
            }
        }
        acc / norm
    })
    .unwrap()
}

#[test]
fn bicubic_matches_direct_convolution() {
    for (k, &(h, w, c, s)) in [(8, 8, 3, 2), (8, 8, 1, 2), (12, 8, 3, 4), (9, 6, 3, 3), (16, 16, 3, 4)]
        .iter()
        .enumerate()
    {
        let img = random_image(h, w, c, k as u64);
        let fast = bicubic_downsample(&img, s).unwrap();
        let slow = bicubic_oracle(&img, s);
        for (a, b) in fast.pixels().iter().zip(slow.pixels()) {
            assert!((a - b).abs() < 1e-6, "{h}x{w}x{c} s={s}: {a} vs {b}");
        }
    }
}

#[test]
fn psnr_and_ssim_match_brute_force_on_random_pairs() {
    for k in 0..100u64 {
        let (h, w, c) = (11 + (k % 6) as usize, 11 + (k % 5) as usize, if k % 3 == 0 { 1 } else { 3 });
        let a = random_image(h, w, c, 1000 + k);
        // Correlated partner so SSIM is not trivially near zero.
        let noise = random_image(h, w, c, 5000 + k);
        let b = Image::from_fn(h, w, c, |y, x, ch| 0.7 * a.get(y, x, ch) + 0.3 * noise.get(y, x, ch)).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - psnr_oracle(&a, &b)).abs() < 1e-9, "pair {k}");
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-6, "pair {k}: {s}");
    }
}

#[test]
fn psnr_of_half_offset_constants() {
    let a = Image::constant(16, 16, 3, 0.25).unwrap();
    let b = Image::constant(16, 16, 3, 0.75).unwrap();
    assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-4);
}

#[test]
fn ssim_of_binary_complement_is_below_one() {
    let a = Image::from_fn(16, 16, 1, |y, x, _| ((y / 3 + x / 2) % 2) as f64).unwrap();
    let b = Image::from_fn(16, 16, 1, |y, x, _| 1.0 - a.get(y, x, 0)).unwrap();
    let s = ssim(&a, &b).unwrap();
    assert!((-1.0..1.0).contains(&s), "{s}");
}

fn image_strategy() -> impl Strategy<Value = Image> {
    (11usize..18, 11usize..18, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
        proptest::collection::vec(0.0f64..=1.0, h * w * c).prop_map(move |px| Image::new(h, w, c, px).unwrap())
    })
}

fn pair_strategy() -> impl Strategy<Value = (Image, Image)> {
    image_strategy().prop_flat_map(|a| {
        let (h, w, c) = (a.height(), a.width(), a.channels());
        proptest::collection::vec(0.0f64..=1.0, h * w * c)
            .prop_map(move |px| (a.clone(), Image::new(h, w, c, px).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn identical_images_hit_the_sentinels(a in image_strategy()) {
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(psnr(&a, &a).unwrap(), PSNR_IDENTICAL);
    }

    #[test]
    fn metrics_are_symmetric((a, b) in pair_strategy()) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(psnr(&a, &b).unwrap() >= 0.0);
    }
}
