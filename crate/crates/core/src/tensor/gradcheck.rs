use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, in [1e-6, 1e-3].
    pub eps: f64,
    /// Number of coordinates to probe; all of them when theta is smaller.
    pub coords: usize,
    pub seed: u64,
    /// Smallest relative-error denominator. Central differences of an O(1)
    /// loss carry roundoff near `1e-12`, so gradients that are exactly zero
    /// (e.g. attention key biases) would otherwise show spurious errors.
    pub zero_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            coords: 200,
            seed: 0,
            zero_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
    /// Probed coordinates whose difference interval crossed a kink.
    pub kinks_skipped: usize,
}

/// Compares an analytic gradient against central differences
/// `(f(θ+εe_i) − f(θ−εe_i)) / 2ε` on a seeded subset of coordinates.
///
/// Relative error uses `max(|analytic|, |numeric|, zero_floor)` as
/// denominator.
pub fn grad_check<F, G>(theta: &[f64], mut value: F, gradient: G, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    grad_check_piecewise(theta, |t| Ok((value(t)?, ())), gradient, opts)
}

/// [`grad_check`] for piecewise-smooth objectives. `value` also returns an
/// identifier of the smooth piece the point lies in (e.g. relu sign
/// patterns); a coordinate whose `θ±ε` probes leave θ's piece straddles a
/// kink, where central differences do not estimate the derivative. Such
/// coordinates are skipped and counted, and the next coordinate in the
/// seeded order is checked instead.
pub fn grad_check_piecewise<F, G, P>(
    theta: &[f64],
    mut value: F,
    mut gradient: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, P)>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
    P: PartialEq,
{
    if !(opts.zero_floor > 0.0) {
        return Err(Error::input("grad_check zero_floor must be > 0"));
    }
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::input(format!(
            "grad_check eps {} outside [1e-6, 1e-3]",
            opts.eps
        )));
    }
    let analytic = gradient(theta)?;
    if analytic.len() != theta.len() {
        return Err(Error::shape(
            "grad_check",
            format!("gradient has {} entries for {} parameters", analytic.len(), theta.len()),
        ));
    }
    let (_, piece) = value(theta)?;
    let mut order: Vec<usize> = (0..theta.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));

    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
        kinks_skipped: 0,
    };
    for &i in &order {
        if report.coords_checked == opts.coords {
            break;
        }
        let orig = probe[i];
        probe[i] = orig + opts.eps;
        let (plus, plus_piece) = value(&probe)?;
        probe[i] = orig - opts.eps;
        let (minus, minus_piece) = value(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite objective while probing coordinate {i}"
            )));
        }
        if plus_piece != piece || minus_piece != piece {
            report.kinks_skipped += 1;
            continue;
        }
        report.coords_checked += 1;
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(opts.zero_floor);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error || report.coords_checked == 1 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
