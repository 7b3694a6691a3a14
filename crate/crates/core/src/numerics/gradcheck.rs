//! Central-difference gradient validation.

use serde::Serialize;

use super::{NumericsError, RngStream};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation size for central differences.
    pub epsilon: f64,
    /// Upper bound on the number of coordinates checked; 0 checks all.
    pub max_coords: usize,
    /// Seed for coordinate sampling when `max_coords` truncates.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// The per-coordinate error is `|g_fd − g_an| / max(1e-8, |g_fd| + |g_an|)`;
/// the report carries the maximum over checked coordinates.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    config: GradCheckConfig,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    super::check_len(params.len(), analytic.len())?;
    let coords: Vec<usize> = if config.max_coords == 0 || config.max_coords >= params.len() {
        (0..params.len()).collect()
    } else {
        let mut picked =
            RngStream::new(config.seed).sample_indices(params.len(), config.max_coords);
        picked.sort_unstable();
        picked
    };

    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        coords_checked: coords.len(),
    };
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + config.epsilon;
        let up = loss(&x);
        x[i] = orig - config.epsilon;
        let down = loss(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFiniteLoss(i));
        }
        let fd = (up - down) / (2.0 * config.epsilon);
        let err = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-8);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_sq(x: &[f64]) -> f64 {
        0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn quadratic_passes() {
        let theta = RngStream::new(2).normal_vec(20, 1.0);
        let r = finite_diff_check(half_sq, &theta, &theta, GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error <= 1e-7, "{}", r.max_rel_error);
        assert_eq!(r.coords_checked, 20);
    }

    #[test]
    fn doubled_gradient_reports_one_third() {
        let theta = RngStream::new(2).normal_vec(20, 1.0);
        let wrong: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        let r = finite_diff_check(half_sq, &theta, &wrong, GradCheckConfig::default()).unwrap();
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let err = finite_diff_check(|_| f64::NAN, &[1.0], &[0.0], GradCheckConfig::default());
        assert_eq!(err.unwrap_err(), NumericsError::NonFiniteLoss(0));
    }

    #[test]
    fn sampling_limits_coordinates() {
        let theta = vec![1.0; 100];
        let cfg = GradCheckConfig {
            max_coords: 7,
            ..Default::default()
        };
        let r = finite_diff_check(half_sq, &theta, &theta, cfg).unwrap();
        assert_eq!(r.coords_checked, 7);
    }
}
