//! Images, PNG I/O, the bicubic degradation model, patch extraction and the
//! evaluation-only corruption families.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

/// `H×W×C` interleaved intensities in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("image sides must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Dimension(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{height}×{width}×{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("pixel value {p} outside [0,1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Like [`Image::new`] but clamps values into `[0,1]` (NaN becomes 0).
    pub fn new_clamped(height: usize, width: usize, channels: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for p in &mut pixels {
            *p = clamp01(*p);
        }
        Self::new(height, width, channels, pixels)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self::new_clamped(height, width, channels, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Batch-of-one `[1,C,H,W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0; h * w * c];
        for (i, px) in self.pixels.chunks(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                data[ch * h * w + i] = *v;
            }
        }
        Tensor::from_vec([1, c, h, w], data).expect("shape")
    }

    /// Batch item `n` of `t`, clamped into `[0,1]`.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        let item = t.item_slice(n);
        let mut pixels = vec![0.0; h * w * c];
        for ch in 0..c {
            for i in 0..h * w {
                pixels[i * c + ch] = item[ch * h * w + i];
            }
        }
        Self::new_clamped(h, w, c, pixels)
    }

    /// Copy of the `size_h×size_w` window anchored at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, size_h: usize, size_w: usize) -> Result<Image> {
        if y0 + size_h > self.height || x0 + size_w > self.width {
            return Err(Error::Dimension(format!(
                "crop {size_h}×{size_w}@({y0},{x0}) outside {}×{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(size_h * size_w * c);
        for y in y0..y0 + size_h {
            let start = (y * self.width + x0) * c;
            pixels.extend_from_slice(&self.pixels[start..start + size_w * c]);
        }
        Image::new(size_h, size_w, c, pixels)
    }
}

#[inline]
fn clamp01(p: f64) -> f64 {
    if p.is_nan() {
        0.0
    } else {
        p.clamp(0.0, 1.0)
    }
}

/// Stack images of equal shape into one `[N,C,H,W]` tensor.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let items: Vec<Tensor> = images.into_iter().map(Image::to_tensor).collect();
    Tensor::stack(&items)
}

// --------------------------------------------------------------------- PNG

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let fmt_err = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut reader = decoder.read_info().map_err(fmt_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(fmt_err)?;
    let bytes = &buf[..info.buffer_size()];
    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::Format(format!("{}: unexpanded palette image", path.display())))
        }
    };
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => bytes
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
            .collect(),
        depth => {
            return Err(Error::Format(format!(
                "{}: unsupported bit depth {depth:?}",
                path.display()
            )))
        }
    };
    // Alpha is dropped.
    let pixels = samples
        .chunks_exact(src_channels)
        .flat_map(|px| px[..keep].iter().copied())
        .collect();
    Image::new(info.height as usize, info.width as usize, keep, pixels)
}

/// Quantize `round(p·255)` after clamping to `[0,1]`.
#[inline]
pub fn quantize_u8(p: f64) -> u8 {
    (clamp01(p) * 255.0).round() as u8
}

fn write_png(path: &Path, height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(if channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let enc_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut writer = enc.write_header().map_err(enc_err)?;
    writer.write_image_data(bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img.pixels.iter().map(|&p| quantize_u8(p)).collect();
    write_png(path.as_ref(), img.height, img.width, img.channels, &bytes)
}

/// Save batch item `n` of an unconstrained tensor (e.g. raw generator
/// output); values are clamped before quantization.
pub fn save_tensor(t: &Tensor, n: usize, path: impl AsRef<Path>) -> Result<()> {
    let [_, c, h, w] = t.shape();
    let item = t.item_slice(n);
    let mut bytes = vec![0u8; h * w * c];
    for ch in 0..c {
        for i in 0..h * w {
            bytes[i * c + ch] = quantize_u8(item[ch * h * w + i]);
        }
    }
    write_png(path.as_ref(), h, w, c, &bytes)
}

/// PNG files in `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Load every PNG in `dir` as `(file stem, image)`.
pub fn load_folder(dir: impl AsRef<Path>) -> Result<Vec<(String, Image)>> {
    list_pngs(dir)?
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_image(&p)?))
        })
        .collect()
}

/// Write `images` as `000000.png`, `000001.png`, … into `dir` (created if needed).
pub fn save_patches(dir: impl AsRef<Path>, images: &[Image]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in images.iter().enumerate() {
        save_image(img, dir.join(patch_file_name(i)))?;
    }
    Ok(())
}

pub fn patch_file_name(i: usize) -> String {
    format!("{i:06}.png")
}

// ----------------------------------------------------------------- bicubic

/// Keys cubic convolution kernel.
#[inline]
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

pub const BICUBIC_A: f64 = -0.5;

/// Symmetric (edge-repeating) reflection of `i` into `0..n`.
#[inline]
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Per output index: `(source index, weight)` taps, weights summing to 1.
fn downsample_taps(len: usize, s: usize) -> Vec<Vec<(usize, f64)>> {
    let sf = s as f64;
    let radius = 2 * s as isize;
    (0..len / s)
        .map(|o| {
            let center = (o as f64 + 0.5) * sf - 0.5;
            let lo = center.floor() as isize - radius + 1;
            let hi = center.ceil() as isize + radius - 1;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|j| (reflect(j, len), cubic_kernel((j as f64 - center) / sf, BICUBIC_A)))
                .filter(|(_, w)| *w != 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            // Push the rounding residue into the centre tap so the weights
            // sum to exactly 1 in the order they are applied.
            let centre = (0..taps.len()).max_by(|&a, &b| taps[a].1.total_cmp(&taps[b].1)).expect("taps");
            for _ in 0..4 {
                let sum: f64 = taps.iter().map(|t| t.1).sum();
                if sum == 1.0 {
                    break;
                }
                taps[centre].1 += 1.0 - sum;
            }
            taps
        })
        .collect()
}

/// Anti-aliased bicubic downsampling by an integer factor: the cubic kernel
/// (a = −0.5) is stretched by `s`, taps beyond the border are reflected, and
/// the result is clamped to `[0,1]`.
pub fn bicubic_downsample(img: &Image, s: usize) -> Result<Image> {
    if s == 0 || img.height % s != 0 || img.width % s != 0 {
        return Err(Error::Dimension(format!(
            "{}×{} image is not divisible by factor {s}",
            img.height, img.width
        )));
    }
    let (h, w, c) = (img.height, img.width, img.channels);
    let (oh, ow) = (h / s, w / s);
    let col_taps = downsample_taps(w, s);
    let row_taps = downsample_taps(h, s);
    let mut horiz = vec![0.0; h * ow * c];
    for y in 0..h {
        for (ox, taps) in col_taps.iter().enumerate() {
            for ch in 0..c {
                horiz[(y * ow + ox) * c + ch] = taps.iter().map(|&(x, wt)| wt * img.get(y, x, ch)).sum();
            }
        }
    }
    let mut out = vec![0.0; oh * ow * c];
    for (oy, taps) in row_taps.iter().enumerate() {
        for ox in 0..ow {
            for ch in 0..c {
                let v: f64 = taps.iter().map(|&(y, wt)| wt * horiz[(y * ow + ox) * c + ch]).sum();
                out[(oy * ow + ox) * c + ch] = v;
            }
        }
    }
    Image::new_clamped(oh, ow, c, out)
}

// ----------------------------------------------------------------- patches

/// Anchors `min(a·stride, len − size)` for `a = 0, 1, …`, deduplicated.
pub fn patch_anchors(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = len - size;
    let mut out = Vec::new();
    let mut a = 0;
    loop {
        let pos = (a * stride).min(last);
        if out.last() != Some(&pos) {
            out.push(pos);
        }
        if pos == last {
            return out;
        }
        a += 1;
    }
}

/// Row-major grid of `size×size` crops; the last row and column are pinned
/// to the image edge.
pub fn crop_patches(img: &Image, size: usize, stride: usize) -> Result<Vec<Image>> {
    if size == 0 || stride == 0 {
        return Err(Error::Argument("patch size and stride must be positive".into()));
    }
    if size > img.height.min(img.width) {
        return Err(Error::Dimension(format!(
            "patch size {size} exceeds {}×{} image",
            img.height, img.width
        )));
    }
    let ys = patch_anchors(img.height, size, stride);
    let xs = patch_anchors(img.width, size, stride);
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push(img.crop(y, x, size, size)?);
        }
    }
    Ok(out)
}

/// Aligned HR/LR crops related by the bicubic degradation model.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    hr: Image,
    lr: Image,
    scale: usize,
}

impl PatchPair {
    pub fn new(hr: Image, lr: Image, scale: usize) -> Result<Self> {
        if scale == 0
            || hr.height != scale * lr.height
            || hr.width != scale * lr.width
            || hr.channels != lr.channels
        {
            return Err(Error::Dimension(format!(
                "HR {}×{}×{} and LR {}×{}×{} are not related by factor {scale}",
                hr.height, hr.width, hr.channels, lr.height, lr.width, lr.channels
            )));
        }
        Ok(PatchPair { hr, lr, scale })
    }

    pub fn hr(&self) -> &Image {
        &self.hr
    }

    pub fn lr(&self) -> &Image {
        &self.lr
    }

    pub fn scale(&self) -> usize {
        self.scale
    }
}

pub fn make_pair(hr: Image, s: usize) -> Result<PatchPair> {
    let lr = bicubic_downsample(&hr, s)?;
    PatchPair::new(hr, lr, s)
}

// ------------------------------------------------------------- corruptions

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Gaussian,
    SaltPepper,
    Quantize,
}

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Gaussian => "gaussian",
            CorruptionKind::SaltPepper => "salt_pepper",
            CorruptionKind::Quantize => "quantize",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(CorruptionKind::Gaussian),
            "salt_pepper" => Ok(CorruptionKind::SaltPepper),
            "quantize" => Ok(CorruptionKind::Quantize),
            other => Err(Error::Config(format!("unknown corruption kind '{other}'"))),
        }
    }
}

/// A corruption applied to LR inputs at evaluation time. `strength` is σ for
/// gaussian, the flip probability for salt-and-pepper and the number of
/// levels for quantize.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub strength: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, strength: f64, seed: u64) -> Result<Self> {
        let spec = CorruptionSpec { kind, strength, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.strength;
        let ok = match self.kind {
            CorruptionKind::Gaussian | CorruptionKind::SaltPepper => (0.0..=1.0).contains(&s),
            CorruptionKind::Quantize => s >= 2.0 && s.fract() == 0.0 && s.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid strength {s} for {} corruption",
                self.kind.name()
            )))
        }
    }

    /// Stable label such as `gaussian:0.04`.
    pub fn label(&self) -> String {
        format!("{}:{}", self.kind.name(), self.strength)
    }

    pub fn with_seed(self, seed: u64) -> Self {
        CorruptionSpec { seed, ..self }
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Parses `kind:strength`; the seed is left at 0.
impl FromStr for CorruptionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, strength) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("corruption '{s}' is not kind:strength")))?;
        let strength: f64 = strength
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad corruption strength in '{s}'")))?;
        CorruptionSpec::new(kind.trim().parse()?, strength, 0)
    }
}

pub fn degrade(img: &Image, spec: &CorruptionSpec) -> Result<Image> {
    spec.validate()?;
    let mut rng = stream(spec.seed, &[purpose::CORRUPTION]);
    let c = img.channels;
    let pixels = match spec.kind {
        CorruptionKind::Gaussian => {
            if spec.strength == 0.0 {
                img.pixels.clone()
            } else {
                let noise = Normal::new(0.0, spec.strength).expect("validated sigma");
                img.pixels.iter().map(|&p| p + noise.sample(&mut rng)).collect()
            }
        }
        CorruptionKind::SaltPepper => {
            let p = spec.strength;
            let mut out = img.pixels.clone();
            for px in out.chunks_mut(c) {
                let u: f64 = rng.gen();
                if u < p / 2.0 {
                    px.fill(0.0);
                } else if u < p {
                    px.fill(1.0);
                }
            }
            out
        }
        CorruptionKind::Quantize => {
            let steps = spec.strength - 1.0;
            img.pixels.iter().map(|&p| (p * steps).round() / steps).collect()
        }
    };
    Image::new_clamped(img.height, img.width, c, pixels)
}

// -------------------------------------------------------- synthetic corpus

/// A procedural test image: smooth background, oriented stripes, filled
/// rectangles, discs and a little fine texture. Deterministic in `seed`.
pub fn synthetic_image(height: usize, width: usize, channels: usize, seed: u64) -> Result<Image> {
    let mut rng = stream(seed, &[0x5EED]);
    let color = |rng: &mut rand_chacha::ChaCha8Rng| -> [f64; 3] { [rng.gen(), rng.gen(), rng.gen()] };
    let (hf, wf) = (height as f64, width as f64);
    let bg_a = color(&mut rng);
    let bg_b = color(&mut rng);
    let angle: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let (ca, sa) = (angle.cos(), angle.sin());

    enum Shape {
        Rect { y0: f64, x0: f64, y1: f64, x1: f64, col: [f64; 3] },
        Disc { cy: f64, cx: f64, r: f64, col: [f64; 3] },
        Stripes { cy: f64, cx: f64, r: f64, freq: f64, dir: (f64, f64), col: [f64; 3] },
    }
    let count = rng.gen_range(4..9);
    let shapes: Vec<Shape> = (0..count)
        .map(|_| match rng.gen_range(0..3) {
            0 => {
                let (y0, x0) = (rng.gen::<f64>() * hf, rng.gen::<f64>() * wf);
                let (dh, dw) = (rng.gen_range(0.1..0.5) * hf, rng.gen_range(0.1..0.5) * wf);
                Shape::Rect { y0, x0, y1: y0 + dh, x1: x0 + dw, col: color(&mut rng) }
            }
            1 => Shape::Disc {
                cy: rng.gen::<f64>() * hf,
                cx: rng.gen::<f64>() * wf,
                r: rng.gen_range(0.05..0.3) * hf.min(wf),
                col: color(&mut rng),
            },
            _ => {
                let a: f64 = rng.gen::<f64>() * std::f64::consts::PI;
                Shape::Stripes {
                    cy: rng.gen::<f64>() * hf,
                    cx: rng.gen::<f64>() * wf,
                    r: rng.gen_range(0.15..0.4) * hf.min(wf),
                    freq: rng.gen_range(0.15..0.6),
                    dir: (a.cos(), a.sin()),
                    col: color(&mut rng),
                }
            }
        })
        .collect();
    let texture: Vec<f64> = (0..height * width).map(|_| rng.gen::<f64>() - 0.5).collect();
    let texture_amp = rng.gen_range(0.0..0.06);

    Image::from_fn(height, width, channels, |y, x, c| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let t = 0.5 + 0.5 * ((yf / hf - 0.5) * sa + (xf / wf - 0.5) * ca);
        let ch = if channels == 1 { 0 } else { c };
        let mut v = bg_a[ch] * (1.0 - t) + bg_b[ch] * t;
        for s in &shapes {
            match s {
                Shape::Rect { y0, x0, y1, x1, col } => {
                    if yf >= *y0 && yf < *y1 && xf >= *x0 && xf < *x1 {
                        v = col[ch];
                    }
                }
                Shape::Disc { cy, cx, r, col } => {
                    if (yf - cy).powi(2) + (xf - cx).powi(2) < r * r {
                        v = col[ch];
                    }
                }
                Shape::Stripes { cy, cx, r, freq, dir, col } => {
                    if (yf - cy).powi(2) + (xf - cx).powi(2) < r * r {
                        let phase = (yf * dir.0 + xf * dir.1) * freq;
                        let m = 0.5 + 0.5 * phase.sin();
                        v = v * (1.0 - m) + col[ch] * m;
                    }
                }
            }
        }
        v + texture_amp * texture[y * width + x]
    })
}

pub fn synthetic_corpus(count: usize, height: usize, width: usize, channels: usize, seed: u64) -> Result<Vec<Image>> {
    (0..count)
        .map(|i| synthetic_image(height, width, channels, crate::rng::derive_seed(seed, &[i as u64])))
        .collect()
}
