use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many coordinates (sampled without replacement);
    /// `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Skip coordinates whose finite-difference window straddles a point of
    /// non-differentiability (ReLU or L1 kink).
    pub skip_kinks: bool,
    /// Use the fourth-order stencil
    /// `(8(f(θ+ε) - f(θ-ε)) - (f(θ+2ε) - f(θ-2ε))) / 12ε`, which tolerates a
    /// wider step. Costs two extra evaluations per coordinate.
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
            skip_kinks: true,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate achieving `max_rel_error`.
    pub worst_coord: Option<usize>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Compares an analytic gradient against central finite differences.
///
/// For every sampled coordinate `i` the error is
/// `|analytic[i] - (f(θ+εe_i) - f(θ-εe_i)) / 2ε| / max(|analytic[i]|, 1e-8)`
/// and the maximum over coordinates is reported.
///
/// A coordinate is treated as straddling a kink when the gap between its
/// one-sided differences fails to shrink linearly with the step: for a
/// smooth function, cutting the step tenfold cuts the gap tenfold.
pub fn grad_check<F>(
    theta: &[f64],
    analytic: &[f64],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if theta.len() != analytic.len() {
        return Err(Error::dim(
            "grad_check",
            format!("{} parameters but {} gradient entries", theta.len(), analytic.len()),
        ));
    }
    if opts.eps <= 0.0 {
        return Err(Error::Argument(format!("step must be positive, got {}", opts.eps)));
    }
    let mut point = theta.to_vec();
    let f0 = f(&point)?;
    let again = f(&point)?;
    if f0.to_bits() != again.to_bits() {
        return Err(Error::UnreliableCheck(format!(
            "repeated evaluation differs: {f0:e} vs {again:e}"
        )));
    }

    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < theta.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = sample(&mut rng, theta.len(), k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..theta.len()).collect(),
    };

    let mut eval = |point: &mut Vec<f64>, i: usize, h: f64| -> Result<(f64, f64)> {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(point)?;
        point[i] = orig - h;
        let minus = f(point)?;
        point[i] = orig;
        Ok((plus, minus))
    };

    let noise = 1e-9 * f0.abs().max(1.0);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: None,
        checked: 0,
        skipped_kinks: 0,
    };
    for i in coords {
        let eps = opts.eps;
        let (plus, minus) = eval(&mut point, i, eps)?;
        let wide = if opts.five_point {
            Some(eval(&mut point, i, 2.0 * eps)?)
        } else {
            None
        };
        let central = match wide {
            Some((p2, m2)) => (8.0 * (plus - minus) - (p2 - m2)) / (12.0 * eps),
            None => (plus - minus) / (2.0 * eps),
        };
        let rel = (analytic[i] - central).abs() / analytic[i].abs().max(1e-8);

        if opts.skip_kinks && rel > 1e-7 {
            let gap = ((plus - f0) - (f0 - minus)).abs() / eps;
            let mut kink = false;
            if gap > noise {
                let fine = eps / 10.0;
                let (p2, m2) = eval(&mut point, i, fine)?;
                let gap_fine = ((p2 - f0) - (f0 - m2)).abs() / fine;
                kink = !(0.05..=0.2).contains(&(gap_fine / gap));
            }
            // the wide points must sit on the same smooth piece: doubling
            // the step doubles the gap
            if let Some((p2, m2)) = wide {
                let gap_wide = ((p2 - f0) - (f0 - m2)).abs() / (2.0 * eps);
                if gap_wide > noise {
                    kink |= !(0.35..=0.65).contains(&(gap / gap_wide));
                }
            }
            if kink {
                report.skipped_kinks += 1;
                continue;
            }
        }

        report.checked += 1;
        if rel > report.max_rel_error || report.worst_coord.is_none() {
            report.max_rel_error = rel;
            report.worst_coord = Some(i);
        }
    }
    Ok(report)
}
