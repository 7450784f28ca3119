//! Brute-force PSNR and SSIM, shared with the acceptance suite.

use rsrlab_core::dataio::Image;

pub fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..a.channels() {
                let d = a.get(y, x, c) - b.get(y, x, c);
                se += d * d;
                n += 1;
            }
        }
    }
    10.0 * (1.0 / (se / n as f64)).log10()
}

/// Literal sliding window: a 2-D Gaussian built directly, two-pass
/// moments per window.
pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let r = (k / 2) as f64;
    let mut win = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for (u, row) in win.iter_mut().enumerate() {
        for (v, cell) in row.iter_mut().enumerate() {
            let d2 = (u as f64 - r).powi(2) + (v as f64 - r).powi(2);
            *cell = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *cell;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_channel = 0.0;
    for ch in 0..a.channels() {
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=a.height() - k {
            for x0 in 0..=a.width() - k {
                let at = |img: &Image, u: usize, v: usize| img.get(y0 + u, x0 + v, ch);
                let (mut ma, mut mb) = (0.0, 0.0);
                for u in 0..k {
                    for v in 0..k {
                        let wt = win[u][v] / total;
                        ma += wt * at(a, u, v);
                        mb += wt * at(b, u, v);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for u in 0..k {
                    for v in 0..k {
                        let wt = win[u][v] / total;
                        let (da, db) = (at(a, u, v) - ma, at(b, u, v) - mb);
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        per_channel += sum / count as f64;
    }
    per_channel / a.channels() as f64
}
