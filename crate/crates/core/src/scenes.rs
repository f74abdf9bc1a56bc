//! Procedural clean images standing in for a natural-image corpus.
//!
//! Each scene is a fractal-noise background with textured occluding shapes
//! (sharp and soft edges, gratings, fine grain) and channel-correlated
//! colour, which gives blur, noise and block artifacts something realistic
//! to act on. Output is snapped to the 8-bit grid so PNG storage is exact.

use rand::Rng as _;

use crate::error::Result;
use crate::image::Image;
use crate::rng::{self, Rng};

struct ValueNoise {
    cells: usize,
    grid: Vec<f32>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut Rng) -> Self {
        let n = cells + 2;
        Self {
            cells,
            grid: (0..n * n).map(|_| rng.gen::<f32>()).collect(),
        }
    }

    /// Smoothly interpolated value at normalized `(u, v)` in `[0,1]`.
    fn sample(&self, u: f32, v: f32) -> f32 {
        let n = self.cells + 2;
        let fx = u * self.cells as f32;
        let fy = v * self.cells as f32;
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - x0 as f32, fy - y0 as f32);
        let s = |t: f32| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (s(tx), s(ty));
        let g = |x: usize, y: usize| self.grid[y.min(n - 1) * n + x.min(n - 1)];
        let a = g(x0, y0) * (1.0 - sx) + g(x0 + 1, y0) * sx;
        let b = g(x0, y0 + 1) * (1.0 - sx) + g(x0 + 1, y0 + 1) * sx;
        a * (1.0 - sy) + b * sy
    }
}

fn fractal(octaves: &[ValueNoise], u: f32, v: f32) -> f32 {
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut norm = 0.0;
    for o in octaves {
        total += amp * o.sample(u, v);
        norm += amp;
        amp *= 0.55;
    }
    total / norm
}

enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Rect { cy: f32, cx: f32, hh: f32, hw: f32, cos: f32, sin: f32 },
}

impl Shape {
    /// Signed distance (in normalized units), negative inside.
    fn sdf(&self, y: f32, x: f32) -> f32 {
        match *self {
            Shape::Disc { cy, cx, r } => ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r,
            Shape::Rect { cy, cx, hh, hw, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                let ry = (dy * cos - dx * sin).abs() - hh;
                let rx = (dy * sin + dx * cos).abs() - hw;
                rx.max(ry)
            }
        }
    }
}

struct Layer {
    shape: Shape,
    base: f32,
    tint: [f32; 3],
    edge: f32,
    grating: Option<(f32, f32, f32, f32)>,
    grain: f32,
}

/// Generates one scene; a pure function of `(seed, size, channels)`.
pub fn generate_scene(seed: u64, height: usize, width: usize, channels: usize) -> Result<Image> {
    let mut rng = rng::from_seed(seed);
    let octaves: Vec<ValueNoise> = [3usize, 6, 12, 24, 48]
        .iter()
        .map(|&c| ValueNoise::new(c, &mut rng))
        .collect();
    let chroma_noise = ValueNoise::new(3, &mut rng);
    let grain_noise = ValueNoise::new((height.max(width) / 2).max(4), &mut rng);
    let bg_tint = random_tint(&mut rng);

    let n_shapes = rng.gen_range(3..9);
    let layers: Vec<Layer> = (0..n_shapes)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                Shape::Disc {
                    cy: rng.gen(),
                    cx: rng.gen(),
                    r: rng.gen_range(0.08..0.35),
                }
            } else {
                let a: f32 = rng.gen_range(0.0..std::f32::consts::PI);
                Shape::Rect {
                    cy: rng.gen(),
                    cx: rng.gen(),
                    hh: rng.gen_range(0.05..0.3),
                    hw: rng.gen_range(0.05..0.3),
                    cos: a.cos(),
                    sin: a.sin(),
                }
            };
            let grating = rng.gen_bool(0.45).then(|| {
                let ang: f32 = rng.gen_range(0.0..std::f32::consts::PI);
                let freq = rng.gen_range(6.0..28.0);
                (ang.cos() * freq, ang.sin() * freq, rng.gen_range(0.05..0.25), rng.gen())
            });
            Layer {
                shape,
                base: rng.gen_range(0.1..0.9),
                tint: random_tint(&mut rng),
                edge: if rng.gen_bool(0.7) { 0.004 } else { rng.gen_range(0.01..0.05) },
                grating,
                grain: rng.gen_range(0.0..0.12),
            }
        })
        .collect();

    let mut data = Vec::with_capacity(height * width * channels);
    for i in 0..height {
        for j in 0..width {
            let v = (i as f32 + 0.5) / height as f32;
            let u = (j as f32 + 0.5) / width as f32;
            let mut lum = 0.15 + 0.7 * fractal(&octaves, u, v);
            let mut tint = bg_tint;
            for layer in &layers {
                let d = layer.shape.sdf(v, u);
                let cover = 1.0 / (1.0 + (d / layer.edge).exp());
                if cover < 1e-4 {
                    continue;
                }
                let mut l = layer.base;
                if let Some((fx, fy, amp, phase)) = layer.grating {
                    l += amp * (std::f32::consts::TAU * (fx * u + fy * v + phase)).sin();
                }
                l += layer.grain * (grain_noise.sample(u, v) - 0.5) * 2.0;
                lum = lum * (1.0 - cover) + l * cover;
                for c in 0..3 {
                    tint[c] = tint[c] * (1.0 - cover) + layer.tint[c] * cover;
                }
            }
            let lum = lum.clamp(0.02, 0.98);
            if channels == 1 {
                data.push(lum);
            } else {
                let shift = (chroma_noise.sample(u, v) - 0.5) * 0.1;
                for (c, t) in tint.iter().enumerate() {
                    let ch = lum * t + if c == 1 { shift } else { -shift * 0.5 };
                    data.push(ch.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(Image::new(height, width, channels, data)?.quantize_u8())
}

fn random_tint(rng: &mut Rng) -> [f32; 3] {
    let mut t = [
        rng.gen_range(0.75..1.15f32),
        rng.gen_range(0.75..1.15f32),
        rng.gen_range(0.75..1.15f32),
    ];
    // keep luma roughly unchanged
    let luma = 0.299 * t[0] + 0.587 * t[1] + 0.114 * t[2];
    for v in &mut t {
        *v /= luma;
    }
    t
}

/// `count` scenes with per-image seeds derived from `(seed, index)`.
pub fn generate_scenes(
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Vec<Image>> {
    (0..count)
        .map(|i| generate_scene(rng::derive_seed(seed, "scene", i as u64), height, width, channels))
        .collect()
}
