//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};

/// A scalar function with an analytic gradient.
pub trait ScalarFunction {
    fn value(&self, params: &[f64]) -> Result<f64>;
    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> ScalarFunction for F
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn value(&self, params: &[f64]) -> Result<f64> {
        self(params).map(|(v, _)| v)
    }

    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(params)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central difference step.
    pub h: f64,
    /// Relative tolerance.
    pub tol: f64,
    /// Below this magnitude (both sides) the absolute tolerance applies.
    pub small_magnitude: f64,
    pub abs_tol: f64,
    /// Restrict the check to these coordinates; all coordinates when `None`.
    pub coordinates: Option<Vec<usize>>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            tol: 1e-4,
            small_magnitude: 1e-6,
            abs_tol: 1e-7,
            coordinates: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Relative error, or absolute error when `absolute` is set.
    pub error: f64,
    pub absolute: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Compares the analytic gradient of `f` at `params` with central differences.
pub fn finite_diff_check<F: ScalarFunction + ?Sized>(
    f: &F,
    params: &[f64],
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, analytic) = f.value_and_gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    if let Some(index) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }

    let coords: Vec<usize> = match &config.coordinates {
        Some(c) => c.clone(),
        None => (0..params.len()).collect(),
    };
    let mut point = params.to_vec();
    let mut checks = Vec::with_capacity(coords.len());
    for &i in &coords {
        if i >= params.len() {
            return Err(Error::shape(format!(
                "coordinate {i} outside {} parameters",
                params.len()
            )));
        }
        point[i] = params[i] + config.h;
        let up = f.value(&point)?;
        point[i] = params[i] - config.h;
        let down = f.value(&point)?;
        point[i] = params[i];
        let numeric = (up - down) / (2.0 * config.h);
        if !numeric.is_finite() {
            return Err(Error::NonFiniteGradient { index: i });
        }

        let a = analytic[i];
        let diff = (a - numeric).abs();
        let magnitude = a.abs().max(numeric.abs());
        let check = if magnitude < config.small_magnitude {
            CoordinateCheck {
                index: i,
                analytic: a,
                numeric,
                error: diff,
                absolute: true,
                passed: diff <= config.abs_tol,
            }
        } else {
            let rel = diff / magnitude;
            CoordinateCheck {
                index: i,
                analytic: a,
                numeric,
                error: rel,
                absolute: false,
                passed: rel <= config.tol,
            }
        };
        checks.push(check);
    }

    let max_rel_error = checks
        .iter()
        .filter(|c| !c.absolute)
        .map(|c| c.error)
        .fold(0.0, f64::max);
    let max_abs_error = checks
        .iter()
        .map(|c| (c.analytic - c.numeric).abs())
        .fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        checks,
        max_rel_error,
        max_abs_error,
        passed,
    })
}
