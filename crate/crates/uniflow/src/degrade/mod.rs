//! Seeded synthetic corruptions behind a name-keyed strategy registry, plus
//! the category mixture that samples them.
//!
//! Each corruption kind implements [`Corruption`] and is registered by name;
//! manifests and configs select kinds at runtime by that name. Applying the
//! same spec to the same frame is bitwise reproducible and outputs stay in
//! [0, 1].

mod kinds;

pub use kinds::noise_field;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Named real-valued parameters of one corruption.
pub type Params = BTreeMap<String, f64>;

/// A named corruption with parameters and a seed; applying it to a clean
/// frame yields the degraded half of a training pair. Serialized as one JSON
/// object per line in dataset manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub kind: String,
    pub params: Params,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: &str, params: &[(&str, f64)], seed: u64) -> Self {
        DegradationSpec {
            kind: kind.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            seed,
        }
    }
}

/// Documented valid range of one parameter.
#[derive(Clone, Copy, Debug)]
pub struct ParamRange {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

/// One corruption strategy. Implementations must be pure functions of
/// (frame, params, seed).
pub trait Corruption: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Parameter names with their documented valid ranges, in a fixed order.
    fn param_ranges(&self) -> &'static [ParamRange];

    /// Apply to a clean frame in [0, 1]; the output is clamped to [0, 1].
    fn apply(&self, clean: &Tensor, params: &Params, seed: u64) -> Result<Tensor>;
}

/// Name-keyed registry of the built-in corruption strategies.
pub struct Registry {
    entries: Vec<Box<dyn Corruption>>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Registry {
    /// All built-in kinds: gaussian_blur, motion_blur, gaussian_noise,
    /// salt_pepper, block_compress, haze, rain, and the compound blur_noise.
    pub fn builtin() -> Self {
        Registry {
            entries: kinds::all(),
        }
    }

    pub fn get(&self, kind: &str) -> Result<&dyn Corruption> {
        self.entries
            .iter()
            .map(|b| b.as_ref())
            .find(|c| c.kind() == kind)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown degradation kind '{kind}' (known: {})",
                    self.kind_names().collect::<Vec<_>>().join(", ")
                ))
            })
    }

    pub fn kind_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|c| c.kind())
    }

    /// Validate a spec's parameter map against the kind's declaration.
    pub fn validate_spec(&self, spec: &DegradationSpec) -> Result<()> {
        let c = self.get(&spec.kind)?;
        let ranges = c.param_ranges();
        for r in ranges {
            match spec.params.get(r.name) {
                None => {
                    return Err(Error::Config(format!(
                        "degradation '{}' is missing parameter '{}'",
                        spec.kind, r.name
                    )))
                }
                Some(v) if !(r.lo..=r.hi).contains(v) || !v.is_finite() => {
                    return Err(Error::Config(format!(
                        "degradation '{}' parameter '{}'={v} outside documented range [{}, {}]",
                        spec.kind, r.name, r.lo, r.hi
                    )))
                }
                _ => {}
            }
        }
        for name in spec.params.keys() {
            if !ranges.iter().any(|r| r.name == name) {
                return Err(Error::Config(format!(
                    "degradation '{}' has no parameter '{name}'",
                    spec.kind
                )));
            }
        }
        Ok(())
    }

    /// Validate and apply a spec to a clean frame.
    pub fn apply_spec(&self, spec: &DegradationSpec, clean: &Tensor) -> Result<Tensor> {
        self.validate_spec(spec)?;
        if !clean
            .data()
            .iter()
            .all(|v| (-1e-9..=1.0 + 1e-9).contains(v))
        {
            return Err(Error::Config(
                "degradation input frame must lie in [0, 1]".into(),
            ));
        }
        let c = self.get(&spec.kind)?;
        c.apply(clean, &spec.params, spec.seed)
    }
}

/// Weights of the corruption categories; must sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CategoryWeights {
    pub blur: f64,
    pub noise: f64,
    pub compression: f64,
    pub weather: f64,
    pub other: f64,
}

impl Default for CategoryWeights {
    fn default() -> Self {
        CategoryWeights {
            blur: 0.30,
            noise: 0.25,
            compression: 0.20,
            weather: 0.15,
            other: 0.10,
        }
    }
}

/// The corruption mixture: category weights, per-kind sampling ranges, and a
/// master seed. The "other" category is realized as the compound blur_noise
/// kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub weights: CategoryWeights,
    /// Sampling range overrides: kind name -> parameter -> [lo, hi]. Kinds
    /// and parameters must exist; ranges must stay inside the documented
    /// validity ranges.
    pub ranges: BTreeMap<String, BTreeMap<String, (f64, f64)>>,
    /// Sample one spec per clip instead of one per frame.
    pub per_clip: bool,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            weights: CategoryWeights::default(),
            ranges: BTreeMap::new(),
            per_clip: false,
            seed: 0,
        }
    }
}

/// Default sampling ranges, tighter than the validity ranges so sampled
/// corruptions stay in a visually sensible regime.
fn default_sample_range(kind: &str, param: &str) -> (f64, f64) {
    match (kind, param) {
        ("gaussian_blur", "sigma") => (0.5, 2.0),
        ("motion_blur", "length") => (5.0, 15.0),
        ("motion_blur", "angle") => (0.0, std::f64::consts::PI),
        ("gaussian_noise", "sigma") => (0.03, 0.15),
        ("salt_pepper", "p") => (0.01, 0.08),
        ("block_compress", "q") => (0.05, 0.25),
        ("haze", "t0") => (0.4, 0.85),
        ("haze", "airlight") => (0.7, 1.0),
        ("rain", "density") => (0.001, 0.004),
        ("rain", "length") => (6.0, 14.0),
        ("rain", "angle") => (std::f64::consts::PI / 3.0, 2.0 * std::f64::consts::PI / 3.0),
        ("rain", "intensity") => (0.2, 0.5),
        ("blur_noise", "sigma") => (0.5, 1.5),
        ("blur_noise", "noise_sigma") => (0.03, 0.1),
        _ => unreachable!("no default range for {kind}.{param}"),
    }
}

impl MixtureConfig {
    pub fn validate(&self, registry: &Registry) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [
            ("blur", w.blur),
            ("noise", w.noise),
            ("compression", w.compression),
            ("weather", w.weather),
            ("other", w.other),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "mixture weight '{name}'={v} outside [0, 1]"
                )));
            }
        }
        let sum = w.blur + w.noise + w.compression + w.weather + w.other;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mixture weights must sum to 1, got {sum}"
            )));
        }
        for (kind, params) in &self.ranges {
            let c = registry.get(kind)?;
            for (pname, (lo, hi)) in params {
                let Some(r) = c.param_ranges().iter().find(|r| r.name == pname) else {
                    return Err(Error::Config(format!(
                        "degradation '{kind}' has no parameter '{pname}'"
                    )));
                };
                if lo > hi || *lo < r.lo || *hi > r.hi {
                    return Err(Error::Config(format!(
                        "sampling range [{lo}, {hi}] for {kind}.{pname} outside validity [{}, {}]",
                        r.lo, r.hi
                    )));
                }
            }
        }
        Ok(())
    }

    fn sample_range(&self, kind: &str, param: &str) -> (f64, f64) {
        self.ranges
            .get(kind)
            .and_then(|m| m.get(param))
            .copied()
            .unwrap_or_else(|| default_sample_range(kind, param))
    }
}

/// Draw a degradation spec from the mixture. Advancing the rng is the only
/// mutation; the spec carries a freshly derived seed.
pub fn sample_spec(
    mix: &MixtureConfig,
    registry: &Registry,
    rng: &mut ChaCha8Rng,
) -> Result<DegradationSpec> {
    let w = &mix.weights;
    let u: f64 = rng.gen_range(0.0..1.0);
    // Fixed category order: blur, noise, compression, weather, other.
    let kind = if u < w.blur {
        if rng.gen_range(0.0..1.0) < 0.5 {
            "gaussian_blur"
        } else {
            "motion_blur"
        }
    } else if u < w.blur + w.noise {
        if rng.gen_range(0.0..1.0) < 0.5 {
            "gaussian_noise"
        } else {
            "salt_pepper"
        }
    } else if u < w.blur + w.noise + w.compression {
        "block_compress"
    } else if u < w.blur + w.noise + w.compression + w.weather {
        if rng.gen_range(0.0..1.0) < 0.5 {
            "haze"
        } else {
            "rain"
        }
    } else {
        "blur_noise"
    };

    let c = registry.get(kind)?;
    let mut params = Params::new();
    for r in c.param_ranges() {
        let (lo, hi) = mix.sample_range(kind, r.name);
        let v = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        params.insert(r.name.to_string(), v);
    }
    Ok(DegradationSpec {
        kind: kind.to_string(),
        params,
        seed: rng.gen::<u64>(),
    })
}

/// Category of a kind name, for grouping diagnostics.
pub fn category_of(kind: &str) -> &'static str {
    match kind {
        "gaussian_blur" | "motion_blur" => "blur",
        "gaussian_noise" | "salt_pepper" => "noise",
        "block_compress" => "compression",
        "haze" | "rain" => "weather",
        _ => "other",
    }
}

/// Sample a spec and apply it: one training pair.
pub fn make_pair(
    clean: &Tensor,
    mix: &MixtureConfig,
    registry: &Registry,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, DegradationSpec)> {
    let spec = sample_spec(mix, registry, rng)?;
    let degraded = registry.apply_spec(&spec, clean)?;
    Ok((degraded, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;

    fn clean_frame(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(Shape::new(1, 3, 32, 32), 0.1, 0.9, &mut rng)
    }

    #[test]
    fn registry_knows_all_kinds() {
        let reg = Registry::builtin();
        let names: Vec<_> = reg.kind_names().collect();
        for want in [
            "gaussian_blur",
            "motion_blur",
            "gaussian_noise",
            "salt_pepper",
            "block_compress",
            "haze",
            "rain",
            "blur_noise",
        ] {
            assert!(names.contains(&want), "missing {want}");
        }
        assert!(reg.get("unsharp_mask").is_err());
    }

    #[test]
    fn identity_edges_are_exact() {
        let reg = Registry::builtin();
        let clean = clean_frame(1);
        let cases = [
            DegradationSpec::new("gaussian_blur", &[("sigma", 0.0)], 7),
            DegradationSpec::new("motion_blur", &[("length", 1.0), ("angle", 0.3)], 7),
            DegradationSpec::new("gaussian_noise", &[("sigma", 0.0)], 7),
            DegradationSpec::new("salt_pepper", &[("p", 0.0)], 7),
            DegradationSpec::new("block_compress", &[("q", 0.0)], 7),
            DegradationSpec::new("haze", &[("t0", 1.0), ("airlight", 0.8)], 7),
            DegradationSpec::new(
                "rain",
                &[
                    ("density", 0.0),
                    ("length", 8.0),
                    ("angle", 1.0),
                    ("intensity", 0.3),
                ],
                7,
            ),
            DegradationSpec::new("blur_noise", &[("sigma", 0.0), ("noise_sigma", 0.0)], 7),
        ];
        for spec in cases {
            let out = reg.apply_spec(&spec, &clean).unwrap();
            assert_eq!(out.data(), clean.data(), "kind {}", spec.kind);
        }
    }

    #[test]
    fn haze_t0_zero_is_constant_airlight() {
        let reg = Registry::builtin();
        let clean = clean_frame(2);
        let spec = DegradationSpec::new("haze", &[("t0", 0.0), ("airlight", 0.8)], 0);
        let out = reg.apply_spec(&spec, &clean).unwrap();
        assert!(out.data().iter().all(|v| (*v - 0.8).abs() < 1e-12));
    }

    #[test]
    fn every_kind_is_deterministic_and_in_range() {
        let reg = Registry::builtin();
        let mix = MixtureConfig::default();
        let clean = clean_frame(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let spec = sample_spec(&mix, &reg, &mut rng).unwrap();
            let a = reg.apply_spec(&spec, &clean).unwrap();
            let b = reg.apply_spec(&spec, &clean).unwrap();
            assert_eq!(a.data(), b.data(), "kind {}", spec.kind);
            assert!(
                a.data().iter().all(|v| (0.0..=1.0).contains(v)),
                "kind {} out of range",
                spec.kind
            );
        }
    }

    #[test]
    fn spec_validation_catches_bad_params() {
        let reg = Registry::builtin();
        let missing = DegradationSpec::new("gaussian_blur", &[], 0);
        assert!(reg.validate_spec(&missing).is_err());
        let out_of_range = DegradationSpec::new("salt_pepper", &[("p", 1.5)], 0);
        assert!(reg.validate_spec(&out_of_range).is_err());
        let unknown =
            DegradationSpec::new("haze", &[("t0", 0.5), ("airlight", 0.8), ("wind", 1.0)], 0);
        assert!(reg.validate_spec(&unknown).is_err());
    }

    #[test]
    fn salt_pepper_corruption_fraction_tracks_p() {
        let reg = Registry::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clean = Tensor::rand_uniform(Shape::new(1, 3, 128, 128), 0.1, 0.9, &mut rng);
        let spec = DegradationSpec::new("salt_pepper", &[("p", 0.1)], 99);
        let out = reg.apply_spec(&spec, &clean).unwrap();
        let s = clean.shape();
        let mut corrupted = 0usize;
        for y in 0..s.h() {
            for x in 0..s.w() {
                if (0..3).any(|c| out.at(0, c, y, x) != clean.at(0, c, y, x)) {
                    corrupted += 1;
                }
            }
        }
        let frac = corrupted as f64 / (s.h() * s.w()) as f64;
        assert!((frac - 0.1).abs() <= 0.01, "fraction {frac}");
    }

    #[test]
    fn gaussian_noise_field_std_matches_sigma_pre_clamp() {
        let field = noise_field(Shape::new(1, 3, 128, 128), 0.1, 42);
        let n = field.data().len() as f64;
        let mean = field.data().iter().sum::<f64>() / n;
        let var = field
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        assert!((std - 0.1).abs() <= 0.005, "std {std}");
    }

    #[test]
    fn mixture_frequencies_match_weights() {
        let reg = Registry::builtin();
        let mix = MixtureConfig::default();
        mix.validate(&reg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            let spec = sample_spec(&mix, &reg, &mut rng).unwrap();
            *counts.entry(category_of(&spec.kind)).or_default() += 1;
        }
        let expect = [
            ("blur", 0.30),
            ("noise", 0.25),
            ("compression", 0.20),
            ("weather", 0.15),
            ("other", 0.10),
        ];
        for (cat, want) in expect {
            let got = *counts.get(cat).unwrap_or(&0) as f64 / n as f64;
            assert!(
                (got - want).abs() <= 0.02,
                "category {cat}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn degenerate_weights_always_pick_that_category() {
        let reg = Registry::builtin();
        let mix = MixtureConfig {
            weights: CategoryWeights {
                blur: 1.0,
                noise: 0.0,
                compression: 0.0,
                weather: 0.0,
                other: 0.0,
            },
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let spec = sample_spec(&mix, &reg, &mut rng).unwrap();
            assert_eq!(category_of(&spec.kind), "blur");
        }
    }

    #[test]
    fn same_seed_same_draw_index_same_spec() {
        let reg = Registry::builtin();
        let mix = MixtureConfig::default();
        let draw = |n: usize| -> DegradationSpec {
            let mut rng = ChaCha8Rng::seed_from_u64(mix.seed);
            let mut last = None;
            for _ in 0..=n {
                last = Some(sample_spec(&mix, &reg, &mut rng).unwrap());
            }
            last.unwrap()
        };
        assert_eq!(draw(17), draw(17));
    }

    #[test]
    fn make_pair_with_identity_spec_reproduces_clean() {
        let reg = Registry::builtin();
        let clean = clean_frame(6);
        let spec = DegradationSpec::new("salt_pepper", &[("p", 0.0)], 3);
        let degraded = reg.apply_spec(&spec, &clean).unwrap();
        assert_eq!(degraded.data(), clean.data());
    }

    #[test]
    fn weight_validation_rejects_bad_sums() {
        let reg = Registry::builtin();
        let mut mix = MixtureConfig::default();
        mix.weights.blur = 0.5;
        assert!(mix.validate(&reg).is_err());
    }
}
