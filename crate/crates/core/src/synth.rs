//! Auxiliary distortion generators.
//!
//! Every generator is a pure function of its inputs and a seed. `degrade`
//! samples parameters, stores them in a [`DegradationRecord`] and then calls
//! [`replay`], so a record always reproduces its image bit for bit.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::ExtendedColorType;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetManifest, PairItem, PairedDataset};
use crate::error::{DrtlError, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistortionKind {
    Bicubic8,
    AniBicubic4,
    GaussNoise,
    GaussBlur,
    MixedMild,
    MixedModerate,
    MixedSevere,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 7] = [
        DistortionKind::Bicubic8,
        DistortionKind::AniBicubic4,
        DistortionKind::GaussNoise,
        DistortionKind::GaussBlur,
        DistortionKind::MixedMild,
        DistortionKind::MixedModerate,
        DistortionKind::MixedSevere,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::Bicubic8 => "Bicubic8",
            DistortionKind::AniBicubic4 => "AniBicubic4",
            DistortionKind::GaussNoise => "GaussNoise",
            DistortionKind::GaussBlur => "GaussBlur",
            DistortionKind::MixedMild => "MixedMild",
            DistortionKind::MixedModerate => "MixedModerate",
            DistortionKind::MixedSevere => "MixedSevere",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    /// Inclusive range of the level sum for mixed kinds.
    pub fn band(self) -> Option<(u8, u8)> {
        match self {
            DistortionKind::MixedMild => Some((9, 11)),
            DistortionKind::MixedModerate => Some((12, 17)),
            DistortionKind::MixedSevere => Some((18, 20)),
            _ => None,
        }
    }

    pub fn is_mixed(self) -> bool {
        self.band().is_some()
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MixedLevels {
    pub l_noise: u8,
    pub l_blur: u8,
    pub l_jpeg: u8,
}

impl MixedLevels {
    pub fn sum(&self) -> u8 {
        self.l_noise + self.l_blur + self.l_jpeg
    }

    pub fn noise_sigma255(&self) -> f64 {
        5.0 * self.l_noise as f64
    }

    pub fn blur_sigma(&self) -> f64 {
        0.5 * self.l_blur as f64
    }

    /// `None` at level 0, where compression is skipped.
    pub fn jpeg_quality(&self) -> Option<u8> {
        (self.l_jpeg > 0).then(|| 100 - 9 * self.l_jpeg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnisoParams {
    pub sigx: f64,
    pub sigy: f64,
    pub theta: f64,
}

/// Everything needed to regenerate a distorted image from its clean source.
///
/// Steps run in field order: anisotropic blur, down/up scaling, isotropic
/// blur, noise, JPEG. `kind` is `None` for chains outside the auxiliary set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub kind: Option<DistortionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<MixedLevels>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aniso: Option<AnisoParams>,
    /// Downscale factor; the image is brought back to full size afterwards.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blur_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma255: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jpeg_quality: Option<u8>,
    pub seed: u64,
}

impl DegradationRecord {
    fn empty(kind: Option<DistortionKind>, seed: u64) -> Self {
        Self {
            kind,
            levels: None,
            aniso: None,
            scale: None,
            blur_sigma: None,
            noise_sigma255: None,
            jpeg_quality: None,
            seed,
        }
    }
}

/// Adds i.i.d. Gaussian noise with std `sigma255 / 255` and clamps.
pub fn apply_gaussian_noise(img: &Image, sigma255: f64, rng: &mut Rng) -> Result<Image> {
    if !(sigma255 >= 0.0) || !sigma255.is_finite() {
        return Err(DrtlError::Param(format!("noise sigma must be >= 0, got {sigma255}")));
    }
    if sigma255 == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma255 / 255.0).map_err(|e| DrtlError::Param(e.to_string()))?;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Index into `[0, n)` with reflect-101 boundary handling (edge not repeated).
pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Normalized 1-D Gaussian taps over `[-r, r]` with `r = ceil(3 sigma)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Normalized rotated anisotropic Gaussian on a square grid of radius
/// `ceil(3 max(sigx, sigy))`, row-major `(2r+1)^2`.
pub fn anisotropic_kernel(sigx: f64, sigy: f64, theta: f64) -> (usize, Vec<f64>) {
    let r = (3.0 * sigx.max(sigy)).ceil() as isize;
    let (c, s) = (theta.cos(), theta.sin());
    // inverse covariance of R diag(sx^2, sy^2) R^T
    let (ix, iy) = (1.0 / (sigx * sigx), 1.0 / (sigy * sigy));
    let a = c * c * ix + s * s * iy;
    let b = c * s * (ix - iy);
    let d = s * s * ix + c * c * iy;
    let mut k = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for y in -r..=r {
        for x in -r..=r {
            let (xf, yf) = (x as f64, y as f64);
            k.push((-0.5 * (a * xf * xf + 2.0 * b * xf * yf + d * yf * yf)).exp());
        }
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    (r as usize, k)
}

pub fn apply_gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(DrtlError::Param(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma < 0.1 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel_1d(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, ch) = img.dims();
    let src = img.data();
    let mut tmp = vec![0.0f64; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = reflect101(x as isize + t as isize - r, w);
                    acc += kv * src[(y * w + xx) * ch + c] as f64;
                }
                tmp[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = reflect101(y as isize + t as isize - r, h);
                    acc += kv * tmp[(yy * w + x) * ch + c];
                }
                out[(y * w + x) * ch + c] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(h, w, ch, out)
}

pub fn apply_anisotropic_blur(img: &Image, sigx: f64, sigy: f64, theta: f64) -> Result<Image> {
    if !(sigx > 0.0 && sigy > 0.0) || !theta.is_finite() {
        return Err(DrtlError::Param(format!(
            "anisotropic sigmas must be > 0, got ({sigx}, {sigy})"
        )));
    }
    let (r, k) = anisotropic_kernel(sigx, sigy, theta);
    let r = r as isize;
    let side = (2 * r + 1) as usize;
    let (h, w, ch) = img.dims();
    let src = img.data();
    let mut out = vec![0.0f32; h * w * ch];
    let mut acc = vec![0.0f64; ch];
    for y in 0..h {
        for x in 0..w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for dy in -r..=r {
                let yy = reflect101(y as isize + dy, h);
                let krow = &k[(dy + r) as usize * side..][..side];
                for (t, kv) in krow.iter().enumerate() {
                    let xx = reflect101(x as isize + t as isize - r, w);
                    let p = (yy * w + xx) * ch;
                    for c in 0..ch {
                        acc[c] += kv * src[p + c] as f64;
                    }
                }
            }
            for c in 0..ch {
                out[(y * w + x) * ch + c] = acc[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(h, w, ch, out)
}

/// Baseline JPEG round trip through the 8-bit grid.
pub fn apply_jpeg(img: &Image, quality: u8) -> Result<Image> {
    if !(10..=100).contains(&quality) {
        return Err(DrtlError::Param(format!("jpeg quality must be in [10,100], got {quality}")));
    }
    let bytes = encode_jpeg(img, quality)?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)
        .map_err(|e| DrtlError::Synthesis(format!("jpeg decode: {e}")))?;
    let (h, w, c) = img.dims();
    if decoded.width() as usize != w || decoded.height() as usize != h {
        return Err(DrtlError::Synthesis("jpeg decode changed the image size".into()));
    }
    if c == 1 {
        Image::from_u8(h, w, 1, decoded.to_luma8().as_raw())
    } else {
        Image::from_u8(h, w, 3, decoded.to_rgb8().as_raw())
    }
}

pub fn encode_jpeg(img: &Image, quality: u8) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let color = if img.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    JpegEncoder::new_with_quality(&mut Cursor::new(&mut buf), quality)
        .encode(&img.to_u8(), img.width() as u32, img.height() as u32, color)
        .map_err(|e| DrtlError::Synthesis(format!("jpeg encode: {e}")))?;
    Ok(buf)
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per output sample: first source index and normalized tap weights.
fn resize_weights(n_in: usize, n_out: usize) -> Vec<(isize, Vec<f64>)> {
    let scale = n_out as f64 / n_in as f64;
    let support = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    (0..n_out)
        .map(|d| {
            let center = (d as f64 + 0.5) / scale - 0.5;
            let lo = (center - 2.0 * support).floor() as isize + 1;
            let hi = (center + 2.0 * support).ceil() as isize - 1;
            let mut ws: Vec<f64> = (lo..=hi).map(|s| cubic((center - s as f64) / support)).collect();
            let sum: f64 = ws.iter().sum();
            ws.iter_mut().for_each(|v| *v /= sum);
            (lo, ws)
        })
        .collect()
}

/// Bicubic resampling to an explicit size; antialiased when shrinking.
pub fn bicubic_resize_to(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(DrtlError::Param(format!("degenerate output size {out_h}x{out_w}")));
    }
    let (h, w, ch) = img.dims();
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let wx = resize_weights(w, out_w);
    let mut tmp = vec![0.0f64; h * out_w * ch];
    for y in 0..h {
        for (x, (lo, ws)) in wx.iter().enumerate() {
            for c in 0..ch {
                let mut acc = 0.0;
                for (t, wv) in ws.iter().enumerate() {
                    let xx = (lo + t as isize).clamp(0, w as isize - 1) as usize;
                    acc += wv * src[(y * w + xx) * ch + c] as f64;
                }
                tmp[(y * out_w + x) * ch + c] = acc;
            }
        }
    }
    let wy = resize_weights(h, out_h);
    let mut out = vec![0.0f32; out_h * out_w * ch];
    for (y, (lo, ws)) in wy.iter().enumerate() {
        for x in 0..out_w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (t, wv) in ws.iter().enumerate() {
                    let yy = (lo + t as isize).clamp(0, h as isize - 1) as usize;
                    acc += wv * tmp[(yy * out_w + x) * ch + c];
                }
                out[(y * out_w + x) * ch + c] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(out_h, out_w, ch, out)
}

pub fn bicubic_resize(img: &Image, scale: f64) -> Result<Image> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(DrtlError::Param(format!("scale must be positive, got {scale}")));
    }
    let oh = (img.height() as f64 * scale).round() as usize;
    let ow = (img.width() as f64 * scale).round() as usize;
    bicubic_resize_to(img, oh, ow)
}

/// Uniform over integer triples in `[0,10]^3` whose sum lies in the band.
pub fn sample_mixed_levels(kind: DistortionKind, rng: &mut Rng) -> Result<MixedLevels> {
    let (lo, hi) = kind
        .band()
        .ok_or_else(|| DrtlError::Param(format!("{kind} is not a mixed distortion")))?;
    loop {
        let l = MixedLevels {
            l_noise: rng.gen_range(0..=10),
            l_blur: rng.gen_range(0..=10),
            l_jpeg: rng.gen_range(0..=10),
        };
        if (lo..=hi).contains(&l.sum()) {
            return Ok(l);
        }
    }
}

/// Regenerates the distorted image described by `record`.
pub fn replay(clean: &Image, record: &DegradationRecord) -> Result<Image> {
    let (h, w, _) = clean.dims();
    let mut img = clean.clone();
    if let Some(a) = record.aniso {
        img = apply_anisotropic_blur(&img, a.sigx, a.sigy, a.theta)?;
    }
    if let Some(s) = record.scale {
        let small = bicubic_resize(&img, 1.0 / s)?;
        img = bicubic_resize_to(&small, h, w)?;
    }
    if let Some(s) = record.blur_sigma {
        img = apply_gaussian_blur(&img, s)?;
    }
    if let Some(s) = record.noise_sigma255 {
        img = apply_gaussian_noise(&img, s, &mut rng::from_seed(record.seed))?;
    }
    if let Some(q) = record.jpeg_quality {
        img = apply_jpeg(&img, q)?;
    }
    Ok(img.quantize_u8())
}

/// Samples a degradation of the given kind and applies it.
///
/// Output is snapped to the 8-bit grid so it survives PNG storage unchanged.
pub fn degrade(img: &Image, kind: DistortionKind, rng: &mut Rng) -> Result<(Image, DegradationRecord)> {
    let mut rec = DegradationRecord::empty(Some(kind), rng.gen());
    match kind {
        DistortionKind::Bicubic8 => rec.scale = Some(8.0),
        DistortionKind::AniBicubic4 => {
            rec.aniso = Some(AnisoParams {
                sigx: rng.gen_range(1.0..4.0),
                sigy: rng.gen_range(1.0..4.0),
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            });
            rec.scale = Some(4.0);
        }
        DistortionKind::GaussNoise => rec.noise_sigma255 = Some(rng.gen_range(0.0..=50.0)),
        DistortionKind::GaussBlur => rec.blur_sigma = Some(rng.gen_range(0.0..=5.0)),
        DistortionKind::MixedMild | DistortionKind::MixedModerate | DistortionKind::MixedSevere => {
            let l = sample_mixed_levels(kind, rng)?;
            rec.levels = Some(l);
            rec.blur_sigma = (l.l_blur > 0).then(|| l.blur_sigma());
            rec.noise_sigma255 = (l.l_noise > 0).then(|| l.noise_sigma255());
            rec.jpeg_quality = l.jpeg_quality();
        }
    }
    let out = replay(img, &rec)?;
    Ok((out, rec))
}

/// Held-out mixed chain used as a stand-in for a real camera target.
///
/// Parameters are continuous and fall between the level grid points, so the
/// target is never an exact copy of an auxiliary task.
pub fn degrade_pseudo_target(img: &Image, rng: &mut Rng) -> Result<(Image, DegradationRecord)> {
    let mut rec = DegradationRecord::empty(None, rng.gen());
    rec.blur_sigma = Some(rng.gen_range(0.8..1.6));
    rec.noise_sigma255 = Some(rng.gen_range(8.0..18.0));
    rec.jpeg_quality = Some(rng.gen_range(45..=75));
    let out = replay(img, &rec)?;
    Ok((out, rec))
}

/// Degrades every clean image; item `i` draws from its own stream derived
/// from `(seed, kind, i)`.
pub fn synthesize_pairs(clean: &[Image], kind: DistortionKind, seed: u64) -> Result<PairedDataset> {
    pairs_with(clean, kind.name(), seed, |img, r| degrade(img, kind, r))
}

/// Pseudo-target pairs named `name`, seeded like [`synthesize_pairs`].
pub fn synthesize_pseudo_target(clean: &[Image], name: &str, seed: u64) -> Result<PairedDataset> {
    pairs_with(clean, name, seed, degrade_pseudo_target)
}

fn pairs_with(
    clean: &[Image],
    name: &str,
    seed: u64,
    f: impl Fn(&Image, &mut Rng) -> Result<(Image, DegradationRecord)>,
) -> Result<PairedDataset> {
    if clean.is_empty() {
        return Err(DrtlError::Param("clean source is empty".into()));
    }
    let items = clean
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (d, rec) = f(c, &mut rng::stream(seed, name, i as u64))?;
            Ok(PairItem {
                index: i,
                clean: c.clone(),
                distorted: d,
                record: Some(rec),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedDataset {
        kind: name.to_string(),
        items,
    })
}

/// Synthesizes `<root>/<kind>/...`. The dataset is built in a scratch
/// directory and renamed into place, so a failure leaves no partial output.
pub fn make_auxiliary_dataset(
    clean: &[Image],
    kind: DistortionKind,
    out_root: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    let ds = synthesize_pairs(clean, kind, seed)?;
    data::write_paired(out_root, &ds, seed)
}

/// Writes a pseudo-target dataset named `name` under `out_root`.
pub fn make_pseudo_target_dataset(
    clean: &[Image],
    out_root: &Path,
    name: &str,
    seed: u64,
) -> Result<DatasetManifest> {
    let ds = synthesize_pseudo_target(clean, name, seed)?;
    data::write_paired(out_root, &ds, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::generate_scene;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
        let mut r = rng::from_seed(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| r.gen::<f32>()).collect()).unwrap()
    }

    fn brute_conv(img: &Image, r: isize, k: &[f64]) -> Vec<f64> {
        let (h, w, ch) = img.dims();
        let side = (2 * r + 1) as usize;
        let mut out = vec![0.0; h * w * ch];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let yy = reflect101(y as isize + dy, h);
                            let xx = reflect101(x as isize + dx, w);
                            acc += k[(dy + r) as usize * side + (dx + r) as usize]
                                * img.at(yy, xx, c) as f64;
                        }
                    }
                    out[(y * w + x) * ch + c] = acc.clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect101(-7, 1), 0);
        // radius larger than the image folds repeatedly
        assert_eq!(reflect101(9, 3), 1);
    }

    #[test]
    fn blur_matches_brute_force() {
        let img = random_image(1, 32, 32, 3);
        let k1 = gaussian_kernel_1d(1.5);
        let r = (k1.len() / 2) as isize;
        let k2: Vec<f64> = k1.iter().flat_map(|a| k1.iter().map(move |b| a * b)).collect();
        let expect = brute_conv(&img, r, &k2);
        let got = apply_gaussian_blur(&img, 1.5).unwrap();
        for (a, b) in got.data().iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn anisotropic_matches_brute_force_and_isotropic_case() {
        let img = random_image(2, 24, 20, 1);
        let (r, k) = anisotropic_kernel(3.0, 1.0, std::f64::consts::FRAC_PI_4);
        let expect = brute_conv(&img, r as isize, &k);
        let got = apply_anisotropic_blur(&img, 3.0, 1.0, std::f64::consts::FRAC_PI_4).unwrap();
        for (a, b) in got.data().iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        let iso = apply_anisotropic_blur(&img, 1.3, 1.3, 0.7).unwrap();
        let sep = apply_gaussian_blur(&img, 1.3).unwrap();
        for (a, b) in iso.data().iter().zip(sep.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(apply_anisotropic_blur(&img, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn kernels_are_normalized() {
        for s in [0.1, 0.5, 1.0, 2.5, 5.0] {
            assert!((gaussian_kernel_1d(s).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for (x, y, t) in [(1.0, 4.0, 0.3), (2.0, 2.0, 0.0), (3.5, 1.2, 2.0)] {
            assert!((anisotropic_kernel(x, y, t).1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identities_and_constants() {
        let img = random_image(3, 16, 16, 3);
        assert_eq!(apply_gaussian_blur(&img, 0.0).unwrap(), img);
        assert_eq!(bicubic_resize(&img, 1.0).unwrap(), img);
        let mut r = rng::from_seed(0);
        assert_eq!(apply_gaussian_noise(&img, 0.0, &mut r).unwrap(), img);
        assert!(apply_gaussian_noise(&img, -1.0, &mut r).is_err());
        let flat = Image::filled(20, 20, 3, 0.4).unwrap();
        for v in apply_gaussian_blur(&flat, 2.0).unwrap().data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
        for v in apply_anisotropic_blur(&flat, 2.0, 1.0, 1.0).unwrap().data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
        for s in [0.125, 0.5, 3.0] {
            let out = bicubic_resize(&flat, s).unwrap();
            assert_eq!(out.height(), (20.0 * s).round() as usize);
            for v in out.data() {
                assert!((v - 0.4).abs() < 1e-6);
            }
        }
        assert!(bicubic_resize(&flat, 0.01).is_err());
    }

    #[test]
    fn jpeg_is_deterministic_and_shape_preserving() {
        let img = generate_scene(4, 48, 40, 3).unwrap();
        assert_eq!(encode_jpeg(&img, 50).unwrap(), encode_jpeg(&img, 50).unwrap());
        let a = apply_jpeg(&img, 50).unwrap();
        assert_eq!(a, apply_jpeg(&img, 50).unwrap());
        assert_eq!(a.dims(), img.dims());
        assert!(apply_jpeg(&img, 5).is_err());
        let gray = generate_scene(4, 24, 24, 1).unwrap();
        assert_eq!(apply_jpeg(&gray, 70).unwrap().dims(), (24, 24, 1));
    }

    #[test]
    fn degrade_replays_bit_exactly() {
        let img = generate_scene(9, 48, 48, 3).unwrap();
        for kind in DistortionKind::ALL {
            let mut r = rng::from_seed(kind.index() as u64);
            let (d, rec) = degrade(&img, kind, &mut r).unwrap();
            assert_eq!(d.dims(), img.dims());
            let json = serde_json::to_string(&rec).unwrap();
            let back: DegradationRecord = serde_json::from_str(&json).unwrap();
            assert_eq!(replay(&img, &back).unwrap(), d, "{kind}");
            if let Some(l) = rec.levels {
                let (lo, hi) = kind.band().unwrap();
                assert!((lo..=hi).contains(&l.sum()));
            }
        }
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in DistortionKind::ALL {
            assert_eq!(DistortionKind::from_name(k.name()), Some(k));
            let s = serde_json::to_string(&k).unwrap();
            assert_eq!(s, format!("\"{}\"", k.name()));
        }
        assert_eq!(DistortionKind::from_name("nope"), None);
    }
}
