//! Shared fixtures for the integration suites: synthetic single-task
//! datasets written as real gen-data style trees.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use uniflow::data::{save_image, synth_clean_frame, ClipRecord, Manifest, Split};
use uniflow::degrade::{DegradationSpec, Registry};
use uniflow::train::derive_seed;

/// One task: a kind name and fixed parameters applied to every frame.
pub struct TaskSpec {
    pub kind: &'static str,
    pub params: Vec<(&'static str, f64)>,
}

pub fn gaussian_noise_task(sigma: f64) -> TaskSpec {
    TaskSpec {
        kind: "gaussian_noise",
        params: vec![("sigma", sigma)],
    }
}

pub fn gaussian_blur_task(sigma: f64) -> TaskSpec {
    TaskSpec {
        kind: "gaussian_blur",
        params: vec![("sigma", sigma)],
    }
}

/// Build a dataset of `frames` synthetic 64x64 clean frames, degraded by the
/// given tasks round-robin, split 70/15/15, and save the manifest. Returns
/// the manifest path.
pub fn build_dataset(
    dir: &Path,
    frames: usize,
    size: usize,
    tasks: &[TaskSpec],
    seed: u64,
) -> PathBuf {
    let registry = Registry::builtin();
    let mut records = Vec::new();
    for i in 0..frames {
        let clean = synth_clean_frame(size, size, derive_seed(seed, i as u64));
        let task = &tasks[i % tasks.len()];
        let spec = DegradationSpec::new(
            task.kind,
            &task.params,
            derive_seed(seed ^ 0xabcd, i as u64),
        );
        let degraded = registry.apply_spec(&spec, &clean).unwrap();
        let deg_rel = format!("frames/c{i:04}/deg.ppm");
        let clean_rel = format!("frames/c{i:04}/clean.ppm");
        save_image(&degraded, &dir.join(&deg_rel)).unwrap();
        save_image(&clean, &dir.join(&clean_rel)).unwrap();
        // Deterministic split: 70/10/20 by index stripe.
        let split = match i % 20 {
            0..=13 => Split::Train,
            14..=15 => Split::Val,
            _ => Split::Test,
        };
        records.push(ClipRecord {
            clip_id: format!("c{i:04}"),
            frames: vec![deg_rel],
            fps: 10,
            split,
            clean_frames: Some(vec![clean_rel]),
            specs: Some(vec![spec]),
        });
    }
    let manifest = Manifest {
        records,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.jsonl");
    manifest.save(&path).unwrap();
    path
}
