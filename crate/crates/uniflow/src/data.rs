//! Image and clip I/O, dataset manifests, frame sampling, and augmentation.
//!
//! Binary PPM (P6, maxval 255) is the mandatory interchange format; PNG is
//! available behind the `png` feature. Manifests are JSON-lines, one clip
//! per line, with frame paths stored relative to the manifest file.

use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

// ---- images -------------------------------------------------------------------

/// Load an image into a (1, 3, H, W) tensor scaled to [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    match extension(path) {
        Some("ppm") => load_ppm(path),
        #[cfg(feature = "png")]
        Some("png") => png::load(path),
        _ => Err(Error::Config(format!(
            "unsupported image extension on {} (expected .ppm{})",
            path.display(),
            if cfg!(feature = "png") {
                " or .png"
            } else {
                ""
            }
        ))),
    }
}

/// Save a (1, 3, H, W) tensor: values clamped to [0, 1], scaled by 255 and
/// rounded half away from zero to 8 bits.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    match extension(path) {
        Some("ppm") => save_ppm(t, path),
        #[cfg(feature = "png")]
        Some("png") => png::save(t, path),
        _ => Err(Error::Config(format!(
            "unsupported image extension on {}",
            path.display()
        ))),
    }
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

fn check_rgb(t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(Error::Shape(format!(
            "image tensors must be 1x3xHxW, got {s}"
        )));
    }
    Ok(())
}

/// 8-bit quantization used at export: clamp, scale, round half away from zero.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn load_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let err = |pos: usize, reason: &str| Error::Image {
        path: path.to_path_buf(),
        offset: pos as u64,
        reason: reason.to_string(),
    };

    let token = |pos: &mut usize| -> Result<(usize, String)> {
        // Skip whitespace and '#' comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(err(start, "unexpected end of header"));
        }
        Ok((
            start,
            String::from_utf8_lossy(&bytes[start..*pos]).into_owned(),
        ))
    };

    let (at, magic) = token(&mut pos)?;
    if magic != "P6" {
        return Err(err(at, "not a binary P6 ppm"));
    }
    let parse = |pair: (usize, String), what: &str| -> Result<usize> {
        pair.1
            .parse::<usize>()
            .map_err(|_| err(pair.0, &format!("invalid {what} '{}'", pair.1)))
    };
    let width = parse(token(&mut pos)?, "width")?;
    let height = parse(token(&mut pos)?, "height")?;
    let maxval_at = pos;
    let maxval = parse(token(&mut pos)?, "maxval")?;
    if maxval != 255 {
        return Err(err(maxval_at, "maxval must be 255"));
    }
    if width == 0 || height == 0 {
        return Err(err(maxval_at, "zero image extent"));
    }
    // Exactly one whitespace byte separates the header from the payload; the
    // token scan consumed none of the payload, so skip that single byte.
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(err(
            bytes.len(),
            &format!(
                "truncated payload: have {} of {need} bytes",
                bytes.len().saturating_sub(pos)
            ),
        ));
    }
    let payload = &bytes[pos..pos + need];
    let mut t = Tensor::zeros(Shape::new(1, 3, height, width));
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let v = payload[(y * width + x) * 3 + c] as f64 / 255.0;
                t.set(0, c, y, x, v);
            }
        }
    }
    Ok(t)
}

fn save_ppm(t: &Tensor, path: &Path) -> Result<()> {
    check_rgb(t)?;
    let s = t.shape();
    let (h, w) = (s.h(), s.w());
    let mut out = Vec::with_capacity(32 + w * h * 3);
    write!(&mut out, "P6\n{w} {h}\n255\n").expect("vec write");
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize_u8(t.at(0, c, y, x)));
            }
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(feature = "png")]
mod png {
    use super::*;

    pub fn load(path: &Path) -> Result<Tensor> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                offset: 0,
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                t.set(0, c, y as usize, x as usize, p.0[c] as f64 / 255.0);
            }
        }
        Ok(t)
    }

    pub fn save(t: &Tensor, path: &Path) -> Result<()> {
        check_rgb(t)?;
        let s = t.shape();
        let mut img = image::RgbImage::new(s.w() as u32, s.h() as u32);
        for y in 0..s.h() {
            for x in 0..s.w() {
                let px = [
                    quantize_u8(t.at(0, 0, y, x)),
                    quantize_u8(t.at(0, 1, y, x)),
                    quantize_u8(t.at(0, 2, y, x)),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            offset: 0,
            reason: e.to_string(),
        })
    }
}

// ---- manifests ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One clip: an ordered list of frame paths. For training pairs, gen-data
/// additionally records the clean frames and the degradation spec per frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frames: Vec<String>,
    pub fps: u32,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_frames: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specs: Option<Vec<DegradationSpec>>,
}

/// A loaded manifest; `root` is the directory frame paths are relative to.
pub struct Manifest {
    pub records: Vec<ClipRecord>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ClipRecord = serde_json::from_str(line).map_err(|e| {
                Error::Config(format!(
                    "manifest {} line {}: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            records.push(rec);
        }
        let m = Manifest { records, root };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("manifest records serialize"));
            out.push('\n');
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for rec in &self.records {
            if !seen.insert(&rec.clip_id) {
                return Err(Error::Config(format!(
                    "clip_id '{}' appears more than once; splits must be disjoint",
                    rec.clip_id
                )));
            }
            if rec.frames.is_empty() {
                return Err(Error::Config(format!(
                    "clip '{}' has no frames",
                    rec.clip_id
                )));
            }
            if let Some(clean) = &rec.clean_frames {
                if clean.len() != rec.frames.len() {
                    return Err(Error::Config(format!(
                        "clip '{}' has {} clean frames for {} degraded",
                        rec.clip_id,
                        clean.len(),
                        rec.frames.len()
                    )));
                }
            }
            if let Some(specs) = &rec.specs {
                if specs.len() != rec.frames.len() {
                    return Err(Error::Config(format!(
                        "clip '{}' has {} specs for {} frames",
                        rec.clip_id,
                        specs.len(),
                        rec.frames.len()
                    )));
                }
            }
            for f in rec.frames.iter().chain(rec.clean_frames.iter().flatten()) {
                let p = self.root.join(f);
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "clip '{}': frame path {} does not exist",
                        rec.clip_id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, frame: &str) -> PathBuf {
        self.root.join(frame)
    }
}

/// Scan a directory of clean frames into clips: each immediate subdirectory
/// is one clip (frames in sorted order); loose images in the root become
/// single-frame clips.
pub fn scan_clips(dir: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let mut clips: Vec<(String, Vec<PathBuf>)> = Vec::new();
    let mut loose = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            let mut frames: Vec<_> = std::fs::read_dir(&path)
                .map_err(|e| Error::io(&path, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| is_image(p))
                .collect();
            frames.sort();
            if !frames.is_empty() {
                let id = path.file_name().unwrap().to_string_lossy().into_owned();
                clips.push((id, frames));
            }
        } else if is_image(&path) {
            loose.push(path);
        }
    }
    loose.sort();
    for p in loose {
        let id = p.file_stem().unwrap().to_string_lossy().into_owned();
        clips.push((id, vec![p]));
    }
    Ok(clips)
}

fn is_image(p: &Path) -> bool {
    matches!(extension(p), Some("ppm"))
        || (cfg!(feature = "png") && matches!(extension(p), Some("png")))
}

// ---- frame sampling -----------------------------------------------------------

/// Pick frame indices at roughly `rate` per second: each second of footage is
/// divided into `rate` bins and one frame is drawn uniformly from each bin.
/// `rate` is capped at the clip fps; rate == fps selects every frame.
pub fn sample_frames(rec: &ClipRecord, rate: u32, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if rec.frames.is_empty() {
        return Err(Error::Config(format!("clip '{}' is empty", rec.clip_id)));
    }
    if !(3..=10).contains(&rate) {
        return Err(Error::Config(format!(
            "sampling rate must lie in [3, 10], got {rate}"
        )));
    }
    if rec.frames.len() == 1 {
        return Ok(vec![0]);
    }
    let fps = rec.fps.max(1) as usize;
    let rate = (rate as usize).min(fps);
    let mut picked = Vec::new();
    let total = rec.frames.len();
    let mut second_start = 0usize;
    while second_start < total {
        let chunk = (total - second_start).min(fps);
        let bins = rate.min(chunk);
        for b in 0..bins {
            let lo = second_start + b * chunk / bins;
            let hi = second_start + (b + 1) * chunk / bins;
            picked.push(if hi > lo + 1 {
                rng.gen_range(lo..hi)
            } else {
                lo
            });
        }
        second_start += chunk;
    }
    Ok(picked)
}

// ---- augmentation --------------------------------------------------------------

/// Lossless 90-degree rotations (counterclockwise).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

/// A deterministic geometric transform: seeded crop position, exact rotation,
/// optional horizontal flip. The same spec always produces the same transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub crop: usize,
    pub rotation: Rotation,
    pub hflip: bool,
    pub seed: u64,
}

impl AugmentSpec {
    /// Draw rotation, flip, and crop seed from an rng stream.
    pub fn random(crop: usize, rng: &mut ChaCha8Rng) -> AugmentSpec {
        let rotation = match rng.gen_range(0..4u8) {
            0 => Rotation::R0,
            1 => Rotation::R90,
            2 => Rotation::R180,
            _ => Rotation::R270,
        };
        AugmentSpec {
            crop,
            rotation,
            hflip: rng.gen_range(0.0..1.0) < 0.5,
            seed: rng.gen(),
        }
    }
}

fn crop_at(t: &Tensor, oy: usize, ox: usize, size: usize) -> Tensor {
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), size, size));
    for n in 0..s.n() {
        for c in 0..s.c() {
            for y in 0..size {
                for x in 0..size {
                    out.set(n, c, y, x, t.at(n, c, oy + y, ox + x));
                }
            }
        }
    }
    out
}

fn rotate(t: &Tensor, r: Rotation) -> Tensor {
    let s = t.shape();
    let (h, w) = (s.h(), s.w());
    let (oh, ow) = match r {
        Rotation::R0 | Rotation::R180 => (h, w),
        Rotation::R90 | Rotation::R270 => (w, h),
    };
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), oh, ow));
    for n in 0..s.n() {
        for c in 0..s.c() {
            for y in 0..oh {
                for x in 0..ow {
                    let v = match r {
                        Rotation::R0 => t.at(n, c, y, x),
                        Rotation::R90 => t.at(n, c, x, w - 1 - y),
                        Rotation::R180 => t.at(n, c, h - 1 - y, w - 1 - x),
                        Rotation::R270 => t.at(n, c, h - 1 - x, y),
                    };
                    out.set(n, c, y, x, v);
                }
            }
        }
    }
    out
}

fn hflip(t: &Tensor) -> Tensor {
    let s = t.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n() {
        for c in 0..s.c() {
            for y in 0..s.h() {
                for x in 0..s.w() {
                    out.set(n, c, y, x, t.at(n, c, y, s.w() - 1 - x));
                }
            }
        }
    }
    out
}

fn apply_transform(t: &Tensor, spec: &AugmentSpec, oy: usize, ox: usize) -> Tensor {
    let cropped = if t.shape().h() == spec.crop && t.shape().w() == spec.crop {
        t.clone()
    } else {
        crop_at(t, oy, ox, spec.crop)
    };
    let rotated = rotate(&cropped, spec.rotation);
    if spec.hflip {
        hflip(&rotated)
    } else {
        rotated
    }
}

/// Apply the identical geometric transform to both halves of a pair.
pub fn augment_pair(
    degraded: &Tensor,
    clean: &Tensor,
    spec: &AugmentSpec,
) -> Result<(Tensor, Tensor)> {
    if degraded.shape() != clean.shape() {
        return Err(Error::Shape(format!(
            "pair shapes disagree: {} vs {}",
            degraded.shape(),
            clean.shape()
        )));
    }
    let s = degraded.shape();
    if spec.crop > s.h() || spec.crop > s.w() {
        return Err(Error::Config(format!(
            "crop {} too large for {}x{} frame",
            spec.crop,
            s.h(),
            s.w()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let oy = if s.h() > spec.crop {
        rng.gen_range(0..=s.h() - spec.crop)
    } else {
        0
    };
    let ox = if s.w() > spec.crop {
        rng.gen_range(0..=s.w() - spec.crop)
    } else {
        0
    };
    Ok((
        apply_transform(degraded, spec, oy, ox),
        apply_transform(clean, spec, oy, ox),
    ))
}

// ---- synthetic clean frames ------------------------------------------------------

/// Procedural clean frame: a smooth color gradient, a few soft shapes, and a
/// low-frequency sinusoid texture. Deterministic per seed; values stay well
/// inside [0, 1].
pub fn synth_clean_frame(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));

    let base: Vec<[f64; 3]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(0.15..0.75),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ]
        })
        .collect();
    for c in 0..3 {
        let [a, gx, gy] = base[c];
        for y in 0..h {
            for x in 0..w {
                let v = a + gx * x as f64 / w as f64 + gy * y as f64 / h as f64;
                t.set(0, c, y, x, v);
            }
        }
    }

    let shapes = rng.gen_range(2..5);
    for _ in 0..shapes {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let rx = rng.gen_range(w as f64 * 0.08..w as f64 * 0.35);
        let ry = rng.gen_range(h as f64 * 0.08..h as f64 * 0.35);
        let color = [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ];
        let rect = rng.gen_range(0.0..1.0) < 0.4;
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let inside = if rect {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                } else {
                    dx * dx + dy * dy <= 1.0
                };
                if inside {
                    for c in 0..3 {
                        let old = t.at(0, c, y, x);
                        t.set(0, c, y, x, 0.35 * old + 0.65 * color[c]);
                    }
                }
            }
        }
    }

    let fx = rng.gen_range(1.0..4.0);
    let fy = rng.gen_range(1.0..4.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.02..0.06);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let s = amp
                    * (std::f64::consts::TAU
                        * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                        + phase)
                        .sin();
                let v = (t.at(0, c, y, x) + s).clamp(0.02, 0.98);
                t.set(0, c, y, x, v);
            }
        }
    }
    t
}
