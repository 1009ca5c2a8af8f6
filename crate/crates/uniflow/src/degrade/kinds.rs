//! The built-in corruption strategies.

use super::{Corruption, ParamRange, Params};
use crate::error::{Error, Result};
use crate::tensor::{normal, Shape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(super) fn all() -> Vec<Box<dyn Corruption>> {
    vec![
        Box::new(GaussianBlur),
        Box::new(MotionBlur),
        Box::new(GaussianNoise),
        Box::new(SaltPepper),
        Box::new(BlockCompress),
        Box::new(Haze),
        Box::new(Rain),
        Box::new(BlurNoise),
    ]
}

fn get(params: &Params, name: &str) -> f64 {
    params[name]
}

fn clamp01(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Mirror index into [0, n) without repeating the border pixel.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Separable convolution with a normalized 1-D kernel and reflect padding.
fn separable_blur(t: &Tensor, kernel: &[f64]) -> Result<Tensor> {
    let s = t.shape();
    let r = kernel.len() / 2;
    if r >= s.h() || r >= s.w() {
        return Err(Error::Config(format!(
            "blur radius {r} too large for {}x{} frame",
            s.h(),
            s.w()
        )));
    }
    let (h, w) = (s.h(), s.w());
    let mut horiz = vec![0.0; t.data().len()];
    for nc in 0..s.n() * s.c() {
        let src = &t.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut horiz[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xi = reflect(x as i64 + k as i64 - r as i64, w);
                    acc += kv * src[y * w + xi];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    let mut out = Tensor::zeros(s);
    for nc in 0..s.n() * s.c() {
        let src = &horiz[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data_mut()[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yi = reflect(y as i64 + k as i64 - r as i64, h);
                    acc += kv * src[yi * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    if radius == 0 {
        return vec![1.0];
    }
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Normalized line kernel of ~`length` pixels at `angle` radians.
fn line_kernel(length: f64, angle: f64) -> (Vec<f64>, usize) {
    let n = (length.round() as usize).max(1);
    if n == 1 {
        return (vec![1.0], 0);
    }
    let half = (n - 1) as f64 / 2.0;
    let r = half.ceil() as usize;
    let size = 2 * r + 1;
    let mut k = vec![0.0; size * size];
    let (dy, dx) = (angle.sin(), angle.cos());
    for i in 0..n {
        let t = i as f64 - half;
        let y = (t * dy).round() as i64 + r as i64;
        let x = (t * dx).round() as i64 + r as i64;
        k[(y as usize) * size + x as usize] += 1.0;
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    (k, r)
}

/// Dense 2-D convolution with reflect padding, per channel.
fn conv2d_reflect(t: &Tensor, kernel: &[f64], r: usize) -> Result<Tensor> {
    let s = t.shape();
    if r >= s.h() || r >= s.w() {
        return Err(Error::Config(format!(
            "kernel radius {r} too large for {}x{} frame",
            s.h(),
            s.w()
        )));
    }
    let size = 2 * r + 1;
    let (h, w) = (s.h(), s.w());
    let mut out = Tensor::zeros(s);
    for nc in 0..s.n() * s.c() {
        let src = &t.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data_mut()[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..size {
                    let yi = reflect(y as i64 + ky as i64 - r as i64, h);
                    for kx in 0..size {
                        let kv = kernel[ky * size + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        let xi = reflect(x as i64 + kx as i64 - r as i64, w);
                        acc += kv * src[yi * w + xi];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// I.i.d. N(0, sigma^2) field; exposed so noise statistics can be validated
/// before clamping.
pub fn noise_field(shape: Shape, sigma: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = sigma * normal(&mut rng);
    }
    t
}

struct GaussianBlur;

impl Corruption for GaussianBlur {
    fn kind(&self) -> &'static str {
        "gaussian_blur"
    }

    fn param_ranges(&self) -> &'static [ParamRange] {
        &[ParamRange {
            name: "sigma",
            lo: 0.0,
            hi: 4.0,
        }]
    }

    fn apply(&self, clean: &Tensor, params: &Params, _seed: u64) -> Result<Tensor> {
        let sigma = get(params, "sigma");
        let kernel = gaussian_kernel(sigma);
        if kernel.len() == 1 {
            return Ok(clean.clone());
        }
        let mut out = separable_blur(clean, &kernel)?;
        clamp01(&mut out);
        Ok(out)
    }
}

struct MotionBlur;

impl Corruption for MotionBlur {
    fn kind(&self) -> &'static str {
        "motion_blur"
    }

    fn param_ranges(&self) -> &'static [ParamRange] {
        &[
            ParamRange {
                name: "length",
                lo: 1.0,
                hi: 31.0,
            },
            ParamRange {
                name: "angle",
                lo: 0.0,
                hi: std::f64::consts::PI,
            },
        ]
    }

    fn apply(&self, clean: &Tensor, params: &Params, _seed: u64) -> Result<Tensor> {
        let (kernel, r) = line_kernel(get(params, "length"), get(params, "angle"));
        if r == 0 {
            return Ok(clean.clone());
        }
        let mut out = conv2d_reflect(clean, &kernel, r)?;
        clamp01(&mut out);
        Ok(out)
    }
}

struct GaussianNoise;

impl Corruption for GaussianNoise {
    fn kind(&self) -> &'static str {
        "gaussian_noise"
    }

    fn param_ranges(&self) -> &'static [ParamRange] {
        &[ParamRange {
            name: "sigma",
            lo: 0.0,
            hi: 0.5,
        }]
    }

    fn apply(&self, clean: &Tensor, params: &Params, seed: u64) -> Result<Tensor> {
        let sigma = get(params, "sigma");
        if sigma == 0.0 {
            return Ok(clean.clone());
        }
        let field = noise_field(clean.shape(), sigma, seed);
        let mut out = clean.clone();
        for (o, f) in out.data_mut().iter_mut().zip(field.data()) {
            *o += f;
        }
        clamp01(&mut out);
        Ok(out)
    }
}

struct SaltPepper;

impl Corruption for SaltPepper {
    fn kind(&self) -> &'static str {
        "salt_pepper"
    }

    fn param_ranges(&self) -> &'static [ParamRange] {
        &[ParamRange {
            name: "p",
            lo: 0.0,
            hi: 1.0,
        }]
    }

    fn apply(&self, clean: &Tensor, params: &Params, seed: u64) -> Result<Tensor> {
        let p = get(params, "p");
        if p == 0.0 {
            return Ok(clean.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = clean.shape();
        let mut out = clean.clone();
        for n in 0..s.n() {
            for y in 0..s.h() {
                for x in 0..s.w() {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    if u < p {
                        let v = if u < p / 2.0 { 0.0 } else { 1.0 };
                        for c in 0..s.c() {
                            out.set(n, c, y, x, v);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

struct BlockCompress;

const DCT_N: usize = 8;

/// Orthonormal 8x8 DCT-II basis, basis[u][n] = a(u) cos(pi (2n+1) u / 16).
fn dct_basis() -> [[f64; DCT_N]; DCT_N] {
    let mut b = [[0.0; DCT_N]; DCT_N];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 {
            (1.0 / DCT_N as f64).sqrt()
        } else {
            (2.0 / DCT_N as f64).sqrt()
        };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a
                * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * u as f64 / (2.0 * DCT_N as f64))
                    .cos();
        }
    }
    b
}

impl Corruption for BlockCompress {
    fn kind(&self) -> &'static str {
        "block_compress"
    }

    fn param_ranges(&self) -> &'static [ParamRange] {
        &[ParamRange {
            name: "q",
            lo: 0.0,
            hi: 1.0,
        }]
    }

    fn apply(&self, clean: &Tensor, params: &Params, _seed: u64) -> Result<Tensor> {
        let q = get(params, "q");
        if q == 0.0 {
            return Ok(clean.clone());
        }
        let basis = dct_basis();
        let s = clean.shape();
        let (h, w) = (s.h(), s.w());
        let (hp, wp) = (h.div_ceil(DCT_N) * DCT_N, w.div_ceil(DCT_N) * DCT_N);
        let mut out = clean.clone();
        for nc in 0..s.n() * s.c() {
            let src = &clean.data()[nc * h * w..(nc + 1) * h * w];
            // Edge-replicated padded copy of the channel.
            let mut padded = vec![0.0; hp * wp];
            for y in 0..hp {
                let sy = y.min(h - 1);
                for x in 0..wp {
                    padded[y * wp + x] = src[sy * w + x.min(w - 1)];
                }
            }
            for by in (0..hp).step_by(DCT_N) {
                for bx in (0..wp).step_by(DCT_N) {
                    let mut block = [[0.0f64; DCT_N]; DCT_N];
                    for (y, row) in block.iter_mut().enumerate() {
                        for (x, v) in row.iter_mut().enumerate() {
                            *v = padded[(by + y) * wp + bx + x];
                        }
                    }
                    // 2-D DCT, quantize each coefficient by q*(1+u+v), invert.
                    let mut coef = [[0.0f64; DCT_N]; DCT_N];
                    for u in 0..DCT_N {
                        for v in 0..DCT_N {
                            let mut acc = 0.0;
                            for (y, row) in block.iter().enumerate() {
                                for (x, val) in row.iter().enumerate() {
                                    acc += basis[u][y] * basis[v][x] * val;
                                }
                            }
                            let step = q * (1.0 + u as f64 + v as f64);
                            coef[u][v] = (acc / step).round() * step;
                        }
                    }
                    for y in 0..DCT_N {
                        for x in 0..DCT_N {
                            let mut acc = 0.0;
                            for (u, crow) in coef.iter().enumerate() {
                                for (v, cval) in crow.iter().enumerate() {
                                    acc += basis[u][y] * basis[v][x] * cval;
                                }
                            }
                            padded[(by + y) * wp + bx + x] = acc;
                        }
                    }
                }
            }
            let dst = &mut out.data_mut()[nc * h * w..(nc + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = padded[y * wp + x];
                }
            }
        }
        clamp01(&mut out);
        Ok(out)
    }
}

struct Haze;

impl Corruption for Haze {
    fn kind(&self) -> &'static str {
        "haze"
    }

    fn param_ranges(&self) -> &'static [ParamRange] {
        &[
            ParamRange {
                name: "t0",
                lo: 0.0,
                hi: 1.0,
            },
            ParamRange {
                name: "airlight",
                lo: 0.0,
                hi: 1.0,
            },
        ]
    }

    fn apply(&self, clean: &Tensor, params: &Params, _seed: u64) -> Result<Tensor> {
        let t0 = get(params, "t0");
        let airlight = get(params, "airlight");
        let mut out = clean.clone();
        // Scattering model: I = J*t0 + A*(1 - t0).
        let add = airlight * (1.0 - t0);
        for v in out.data_mut() {
            *v = *v * t0 + add;
        }
        clamp01(&mut out);
        Ok(out)
    }
}

struct Rain;

impl Corruption for Rain {
    fn kind(&self) -> &'static str {
        "rain"
    }

    fn param_ranges(&self) -> &'static [ParamRange] {
        &[
            ParamRange {
                name: "density",
                lo: 0.0,
                hi: 0.05,
            },
            ParamRange {
                name: "length",
                lo: 2.0,
                hi: 30.0,
            },
            ParamRange {
                name: "angle",
                lo: 0.0,
                hi: std::f64::consts::PI,
            },
            ParamRange {
                name: "intensity",
                lo: 0.0,
                hi: 1.0,
            },
        ]
    }

    fn apply(&self, clean: &Tensor, params: &Params, seed: u64) -> Result<Tensor> {
        let density = get(params, "density");
        let length = get(params, "length");
        let angle = get(params, "angle");
        let intensity = get(params, "intensity");
        if density == 0.0 || intensity == 0.0 {
            return Ok(clean.clone());
        }
        let s = clean.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Seeded impulse layer, then streak it along the angle.
        let mut impulses = Tensor::zeros(Shape::new(s.n(), 1, s.h(), s.w()));
        for v in impulses.data_mut() {
            if rng.gen_range(0.0..1.0) < density {
                *v = 1.0;
            }
        }
        let (kernel, r) = line_kernel(length, angle);
        let streaks = if r == 0 {
            impulses
        } else {
            conv2d_reflect(&impulses, &kernel, r)?
        };
        let n_points = (length.round() as usize).max(1) as f64;
        let gain = intensity * n_points;
        let mut out = clean.clone();
        let plane = s.h() * s.w();
        for n in 0..s.n() {
            let layer = &streaks.data()[n * plane..(n + 1) * plane];
            for c in 0..s.c() {
                let base = (n * s.c() + c) * plane;
                for (i, l) in layer.iter().enumerate() {
                    out.data_mut()[base + i] += gain * l;
                }
            }
        }
        clamp01(&mut out);
        Ok(out)
    }
}

/// Compound blur-then-noise, realizing the "other" mixture category.
struct BlurNoise;

impl Corruption for BlurNoise {
    fn kind(&self) -> &'static str {
        "blur_noise"
    }

    fn param_ranges(&self) -> &'static [ParamRange] {
        &[
            ParamRange {
                name: "sigma",
                lo: 0.0,
                hi: 3.0,
            },
            ParamRange {
                name: "noise_sigma",
                lo: 0.0,
                hi: 0.3,
            },
        ]
    }

    fn apply(&self, clean: &Tensor, params: &Params, seed: u64) -> Result<Tensor> {
        let blurred = GaussianBlur.apply(
            clean,
            &[("sigma".to_string(), get(params, "sigma"))].into(),
            seed,
        )?;
        GaussianNoise.apply(
            &blurred,
            &[("sigma".to_string(), get(params, "noise_sigma"))].into(),
            seed.wrapping_add(1),
        )
    }
}
