//! Finite-difference gradient oracle.
//!
//! Every hand-derived backward pass in this crate is checked against the
//! central-difference estimate produced here. The oracle never calls into the
//! analytic backward code: it only re-evaluates the forward function at
//! perturbed parameter values.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Differencing scheme. Central is the default and what all tolerances are
/// calibrated for; forward differencing exists for quick smoke probes only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffMode {
    Central,
    Forward,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation step per coordinate.
    pub epsilon: f64,
    /// Maximum allowed relative error between analytic and numeric gradients.
    pub tolerance: f64,
    pub mode: DiffMode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            mode: DiffMode::Central,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig(
                "gradcheck epsilon and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Numeric gradient of a scalar-valued `f` at `theta`, one coordinate at a
/// time. Errors if `f` fails or returns a non-finite value at any probe.
pub fn finite_difference_gradient<F>(
    mut f: F,
    theta: &Tensor,
    cfg: &GradCheckConfig,
) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    cfg.validate()?;
    let mut probe = theta.clone();
    let mut grad = vec![0.0; theta.len()];
    let base = if cfg.mode == DiffMode::Forward {
        let v = f(&probe)?;
        check_finite(v)?;
        Some(v)
    } else {
        None
    };
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        match cfg.mode {
            DiffMode::Central => {
                probe.data_mut()[i] = orig + cfg.epsilon;
                let plus = f(&probe)?;
                probe.data_mut()[i] = orig - cfg.epsilon;
                let minus = f(&probe)?;
                check_finite(plus)?;
                check_finite(minus)?;
                grad[i] = (plus - minus) / (2.0 * cfg.epsilon);
            }
            DiffMode::Forward => {
                probe.data_mut()[i] = orig + cfg.epsilon;
                let plus = f(&probe)?;
                check_finite(plus)?;
                grad[i] = (plus - base.expect("base value computed")) / cfg.epsilon;
            }
        }
        probe.data_mut()[i] = orig;
    }
    Tensor::new(theta.shape().to_vec(), grad)
}

fn check_finite(v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "finite-difference probe produced non-finite value {v}"
        )));
    }
    Ok(())
}

/// Relative error between two gradient coordinates. The denominator floor
/// keeps near-zero coordinates from turning difference-quotient noise
/// (~1e-11 absolute) into spurious failures.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Maximum relative error over all coordinates of two same-shape gradients.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Outcome of checking one named parameter block.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BlockCheck {
    pub block: String,
    pub params: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares an analytic gradient for one parameter block against the
/// finite-difference oracle of `f` at `theta`.
pub fn check_block<F>(
    block: &str,
    f: F,
    theta: &Tensor,
    analytic: &Tensor,
    cfg: &GradCheckConfig,
) -> Result<BlockCheck>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let numeric = finite_difference_gradient(f, theta, cfg)?;
    let max_rel_err = max_relative_error(analytic, &numeric);
    Ok(BlockCheck {
        block: block.to_string(),
        params: theta.len(),
        max_rel_err,
        passed: max_rel_err <= cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let theta = Tensor::vector(vec![3.0]).unwrap();
        let cfg = GradCheckConfig::default();
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &theta, &cfg).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let theta = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let cfg = GradCheckConfig::default();
        let g = finite_difference_gradient(|_| Ok(7.0), &theta, &cfg).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_function_gradient_is_coefficients() {
        let a = [2.0, -1.5, 0.25];
        let theta = Tensor::vector(vec![0.3, 0.7, -0.2]).unwrap();
        let cfg = GradCheckConfig::default();
        let g = finite_difference_gradient(
            |t| Ok(t.data().iter().zip(a.iter()).map(|(x, c)| x * c).sum()),
            &theta,
            &cfg,
        )
        .unwrap();
        for (got, want) in g.data().iter().zip(a.iter()) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        // the -epsilon probe lands on ln of a negative number
        let theta = Tensor::vector(vec![0.0]).unwrap();
        let cfg = GradCheckConfig::default();
        let r = finite_difference_gradient(|t| Ok(t.data()[0].ln()), &theta, &cfg);
        assert!(r.is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = GradCheckConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn corrupted_analytic_gradient_fails_and_names_block() {
        // harness sanity: a deliberately wrong backward must be caught
        let theta = Tensor::vector(vec![1.2]).unwrap();
        let cfg = GradCheckConfig::default();
        let wrong = Tensor::vector(vec![1.0]).unwrap(); // true grad is 2*theta = 2.4
        let report = check_block("corrupted", |t| Ok(t.data()[0] * t.data()[0]), &theta, &wrong, &cfg).unwrap();
        assert!(!report.passed);
        assert_eq!(report.block, "corrupted");
        assert!(report.max_rel_err > 0.1);
    }

    #[test]
    fn forward_mode_is_coarser_but_close() {
        let theta = Tensor::vector(vec![1.0]).unwrap();
        let cfg = GradCheckConfig {
            mode: DiffMode::Forward,
            ..Default::default()
        };
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &theta, &cfg).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-4);
    }
}
