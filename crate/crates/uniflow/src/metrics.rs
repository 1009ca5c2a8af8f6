//! Full-reference fidelity metrics and prompt-embedding separation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 10 log10(peak^2 / MSE) over all elements; infinity when MSE is zero.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "psnr shapes disagree: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Windowed SSIM: 11x11 Gaussian window (sigma 1.5), C1 = (0.01 peak)^2 and
/// C2 = (0.03 peak)^2 at peak 1, luminance-contrast-structure product,
/// averaged over all valid window positions and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "ssim shapes disagree: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let s = a.shape();
    if s.h() < SSIM_WINDOW || s.w() < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs H,W >= {SSIM_WINDOW}, got {}x{}",
            s.h(),
            s.w()
        )));
    }
    let kernel = ssim_kernel();
    let plane = s.h() * s.w();
    let mut total = 0.0;
    for nc in 0..s.n() * s.c() {
        let pa = &a.data()[nc * plane..(nc + 1) * plane];
        let pb = &b.data()[nc * plane..(nc + 1) * plane];
        total += plane_ssim(pa, pb, s.h(), s.w(), &kernel);
    }
    Ok(total / (s.n() * s.c()) as f64)
}

/// Separable Gaussian-weighted window sums over valid positions.
fn plane_ssim(a: &[f64], b: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> f64 {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;

    // Horizontal pass over the five product maps.
    let mut maps = vec![vec![0.0; h * ow]; 5];
    for y in 0..h {
        for ox in 0..ow {
            let mut m = [0.0f64; 5];
            for (k, kv) in kernel.iter().enumerate() {
                let va = a[y * w + ox + k];
                let vb = b[y * w + ox + k];
                m[0] += kv * va;
                m[1] += kv * vb;
                m[2] += kv * va * va;
                m[3] += kv * vb * vb;
                m[4] += kv * va * vb;
            }
            for (map, v) in maps.iter_mut().zip(m) {
                map[y * ow + ox] = v;
            }
        }
    }

    let mut acc = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut m = [0.0f64; 5];
            for (k, kv) in kernel.iter().enumerate() {
                for (mi, map) in maps.iter().enumerate() {
                    m[mi] += kv * map[(oy + k) * ow + ox];
                }
            }
            let (mu_a, mu_b, raw_aa, raw_bb, raw_ab) = (m[0], m[1], m[2], m[3], m[4]);
            let var_a = raw_aa - mu_a * mu_a;
            let var_b = raw_bb - mu_b * mu_b;
            let cov = raw_ab - mu_a * mu_b;
            acc += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
        }
    }
    acc / (oh * ow) as f64
}

/// Distance statistics of task-labelled prompt embeddings.
#[derive(Clone, Copy, Debug)]
pub struct SeparationStats {
    /// Mean pairwise distance within a task.
    pub intra: f64,
    /// Mean pairwise distance across tasks.
    pub inter: f64,
    /// inter / intra; infinity when clusters are points, 1 when everything
    /// coincides.
    pub ratio: f64,
}

/// Mean pairwise Euclidean distances within and across tasks. Needs at least
/// two tasks with at least four vectors each.
pub fn prompt_separation(embeddings: &[(Vec<f64>, String)]) -> Result<SeparationStats> {
    let mut by_task: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for (_, task) in embeddings {
        *by_task.entry(task.as_str()).or_default() += 1;
    }
    if by_task.len() < 2 {
        return Err(Error::Config(format!(
            "prompt separation needs >= 2 tasks, got {}",
            by_task.len()
        )));
    }
    if let Some((task, n)) = by_task.iter().find(|(_, n)| **n < 4) {
        return Err(Error::Config(format!(
            "prompt separation needs >= 4 vectors per task, task '{task}' has {n}"
        )));
    }
    let dim = embeddings[0].0.len();
    if embeddings.iter().any(|(v, _)| v.len() != dim) {
        return Err(Error::Shape("embedding widths disagree".into()));
    }

    let mut intra_sum = 0.0;
    let mut intra_n = 0usize;
    let mut inter_sum = 0.0;
    let mut inter_n = 0usize;
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            let d = euclidean(&embeddings[i].0, &embeddings[j].0);
            if embeddings[i].1 == embeddings[j].1 {
                intra_sum += d;
                intra_n += 1;
            } else {
                inter_sum += d;
                inter_n += 1;
            }
        }
    }
    let intra = intra_sum / intra_n as f64;
    let inter = inter_sum / inter_n as f64;
    let ratio = if intra == 0.0 {
        if inter == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        inter / intra
    };
    Ok(SeparationStats {
        intra,
        inter,
        ratio,
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
