//! Separation of detection efficiency and dark-count probability from runs
//! at several known mean photon numbers.
//!
//! `ln q = -η·μ + ln(1 - P_d)`, so a straight line through `(μ, ln q̂)` gives
//! `η` from the slope and `P_d` from the intercept.

use super::regression::weighted_line;
use super::{FitError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionResult {
    /// Clamped to `[0, 1]`.
    pub eta_hat: f64,
    /// Clamped to `[0, 1)`.
    pub p_dark_hat: f64,
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: Option<f64>,
    pub intercept_se: Option<f64>,
    pub eta_se: Option<f64>,
    pub p_dark_se: Option<f64>,
    pub runs: usize,
}

/// `runs` holds `(μ_known, q̂)` pairs.
pub fn decompose_efficiency(runs: &[(f64, f64)]) -> Result<DecompositionResult> {
    if runs.len() < 2 {
        return Err(FitError::InsufficientRuns(runs.len()));
    }
    for (index, &(mu, q)) in runs.iter().enumerate() {
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(FitError::InvalidRun {
                index,
                reason: format!("mu {mu} must be finite and non-negative"),
            });
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(FitError::InvalidRun {
                index,
                reason: format!("q {q} outside (0, 1]"),
            });
        }
    }
    let xs: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let ys: Vec<f64> = runs.iter().map(|r| r.1.ln()).collect();
    let line = weighted_line(&xs, &ys, &vec![1.0; xs.len()]).ok_or(FitError::DegenerateDesign)?;
    let survive_dark = line.intercept.exp();
    Ok(DecompositionResult {
        eta_hat: (-line.slope).clamp(0.0, 1.0),
        p_dark_hat: (-line.intercept.exp_m1()).clamp(0.0, 1.0 - f64::EPSILON),
        slope: line.slope,
        intercept: line.intercept,
        slope_se: line.slope_se,
        intercept_se: line.intercept_se,
        eta_se: line.slope_se,
        p_dark_se: line.intercept_se.map(|se| se * survive_dark),
        runs: runs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{geometric_slope, DetectorParams};

    #[test]
    fn noise_free_recovery() {
        let runs: Vec<(f64, f64)> = [0.04, 0.08, 0.16, 0.32]
            .iter()
            .map(|&mu| {
                let p = DetectorParams::new(mu, 0.15, 2e-4, 0.0, 1.0, 1.0).unwrap();
                (mu, geometric_slope(&p).unwrap())
            })
            .collect();
        let d = decompose_efficiency(&runs).unwrap();
        assert!((d.eta_hat - 0.15).abs() < 1e-12);
        assert!((d.p_dark_hat - 2e-4).abs() < 1e-14);
        assert!(d.eta_se.unwrap() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(
            decompose_efficiency(&[(0.08, 0.98)]),
            Err(FitError::InsufficientRuns(1))
        );
        assert_eq!(
            decompose_efficiency(&[(0.08, 0.98), (0.08, 0.97)]),
            Err(FitError::DegenerateDesign)
        );
        assert!(matches!(
            decompose_efficiency(&[(0.08, 0.98), (0.16, 0.0)]),
            Err(FitError::InvalidRun { index: 1, .. })
        ));
        let two = decompose_efficiency(&[(0.08, 0.98), (0.16, 0.97)]).unwrap();
        assert!(two.eta_se.is_none());
    }
}
