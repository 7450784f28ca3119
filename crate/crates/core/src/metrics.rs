//! Full-reference image metrics and the clean/corrupted evaluation protocol.

use std::io::Write;
use std::path::Path;

use crate::dataio::{degrade, CorruptionSpec, Image, PatchPair};
use crate::error::{Error, Result};
use crate::model::{FeatureExtractor, ModelBundle};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// PSNR of identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image, what: &str) -> Result<()> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(Error::Dimension(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// `10·log10(1/MSE)`; [`PSNR_IDENTICAL`] when the images are equal.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let se: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum();
    if se == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    let mse = se / a.pixels().len() as f64;
    Ok(-10.0 * mse.log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.pixels().iter().skip(c).step_by(img.channels()).copied().collect()
}

/// Single-scale SSIM, averaged over valid windows and then over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (plane(a, c), plane(b, c));
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&sq(&pa, &pa), h, w, &k);
        let e_bb = filter_valid(&sq(&pb, &pb), h, w, &k);
        let e_ab = filter_valid(&sq(&pa, &pb), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let (maa, mbb, mab) = (ma * ma, mb * mb, ma * mb);
            let va = e_aa[i] - maa;
            let vb = e_bb[i] - mbb;
            let cov = e_ab[i] - mab;
            sum += ((2.0 * mab + c1) * (2.0 * cov + c2)) / ((maa + mbb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Feature vectors scaled to unit length at every spatial position.
fn unit_normalize(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let mut out = t.clone();
    let hw = h * w;
    let d = out.data_mut();
    for b in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (b * c + ch) * hw + p;
            let norm = (0..c).map(|ch| d[idx(ch)] * d[idx(ch)]).sum::<f64>().sqrt();
            for ch in 0..c {
                d[idx(ch)] /= norm + 1e-10;
            }
        }
    }
    out
}

/// Sum over feature stages of the mean squared difference between
/// channel-normalised feature maps. A surrogate for learned perceptual
/// metrics, computed with the training feature extractor.
pub fn perceptual_distance(fx: &FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "perceptual distance")?;
    let fa = fx.features(&a.to_tensor())?;
    let fb = fx.features(&b.to_tensor())?;
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (x, y) = (unit_normalize(x), unit_normalize(y));
        let se: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        total += se / x.len() as f64;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub corruption: String,
    pub psnr: f64,
    pub ssim: f64,
    pub percep: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub corruption: String,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub percep: f64,
}

pub const CLEAN: &str = "clean";
pub const CSV_HEADER: [&str; 5] = ["image_id", "corruption", "psnr_db", "ssim", "percep"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Per-corruption means, in order of first appearance.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut out: Vec<Aggregate> = Vec::new();
        for r in &self.rows {
            let agg = match out.iter_mut().find(|a| a.corruption == r.corruption) {
                Some(a) => a,
                None => {
                    out.push(Aggregate {
                        corruption: r.corruption.clone(),
                        count: 0,
                        psnr: 0.0,
                        ssim: 0.0,
                        percep: 0.0,
                    });
                    out.last_mut().unwrap()
                }
            };
            agg.count += 1;
            agg.psnr += r.psnr;
            agg.ssim += r.ssim;
            agg.percep += r.percep;
        }
        for a in &mut out {
            let n = a.count as f64;
            a.psnr /= n;
            a.ssim /= n;
            a.percep /= n;
        }
        out
    }

    pub fn aggregate(&self, corruption: &str) -> Option<Aggregate> {
        self.aggregates().into_iter().find(|a| a.corruption == corruption)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let fmt = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(fmt)?;
        for r in &self.rows {
            w.write_record([
                r.image_id.clone(),
                r.corruption.clone(),
                r.psnr.to_string(),
                r.ssim.to_string(),
                r.percep.to_string(),
            ])
            .map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::Format(format!("csv: {e}")))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }
}

fn score(bundle: &ModelBundle, lr: &Image, hr: &Image) -> Result<(f64, f64, f64)> {
    let sr = Image::from_tensor(&bundle.generator.infer(&lr.to_tensor())?, 0)?;
    Ok((
        psnr(&sr, hr)?,
        ssim(&sr, hr)?,
        perceptual_distance(bundle.features(), &sr, hr)?,
    ))
}

/// Super-resolve every clean LR input and every corrupted variant, clamp
/// the output to `[0,1]` and score it against HR. Corruption noise for item
/// `i` is seeded from the corruption's seed and `i`.
pub fn evaluate(
    bundle: &ModelBundle,
    eval_set: &[(String, PatchPair)],
    corruptions: &[CorruptionSpec],
) -> Result<MetricReport> {
    if eval_set.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let mut report = MetricReport::default();
    let variants = std::iter::once(None).chain(corruptions.iter().map(Some));
    for spec in variants {
        for (i, (id, pair)) in eval_set.iter().enumerate() {
            let (label, lr) = match spec {
                None => (CLEAN.to_string(), pair.lr().clone()),
                Some(s) => {
                    let seeded = s.with_seed(derive_seed(s.seed, &[i as u64]));
                    (s.label(), degrade(pair.lr(), &seeded)?)
                }
            };
            let (p, s, q) = score(bundle, &lr, pair.hr())?;
            report.rows.push(MetricRow {
                image_id: id.clone(),
                corruption: label,
                psnr: p,
                ssim: s,
                percep: q,
            });
        }
    }
    Ok(report)
}
