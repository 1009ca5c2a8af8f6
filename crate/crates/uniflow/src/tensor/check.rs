//! Central finite differences, the independent oracle used to audit
//! reverse-mode gradients throughout the crate.

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which coordinates of the perturbed tensor to probe.
#[derive(Clone, Copy, Debug)]
pub enum CoordSelection {
    All,
    /// A seeded random subset without replacement.
    Random {
        count: usize,
        seed: u64,
    },
}

/// Compare `analytic` against central differences of a scalar function.
///
/// For each selected coordinate i this evaluates (f(x + h e_i) - f(x - h e_i))
/// / 2h and reports the worst relative error, with denominator
/// max(|fd|, |analytic_i|, 1e-8).
pub fn finite_diff_check(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    analytic: &[f64],
    h: f64,
    coords: CoordSelection,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!(
            "finite difference step must lie in [1e-7, 1e-3], got {h}"
        )));
    }
    if analytic.len() != x.data().len() {
        return Err(Error::Shape(format!(
            "analytic gradient has {} entries for a tensor of {}",
            analytic.len(),
            x.data().len()
        )));
    }
    let indices: Vec<usize> = match coords {
        CoordSelection::All => (0..x.data().len()).collect(),
        CoordSelection::Random { count, seed } => {
            let n = x.data().len();
            if count >= n {
                (0..n).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                sample(&mut rng, n, count).into_vec()
            }
        }
    };

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in &indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    Ok(worst)
}

/// Convenience wrapper for auditing a flat parameter vector: `f` maps the
/// perturbed flat vector to a scalar loss.
pub fn finite_diff_check_flat(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    flat: &[f64],
    analytic: &[f64],
    h: f64,
    coords: CoordSelection,
) -> Result<f64> {
    let t = Tensor::new(Shape::new(1, 1, 1, flat.len()), flat.to_vec())?;
    finite_diff_check(&mut |p: &Tensor| f(p.data()), &t, analytic, h, coords)
}
