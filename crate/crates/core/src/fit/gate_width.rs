//! Effective gate width from a delay scan of the detector response.

use super::{FitError, Result};

/// `(delay, rate)` samples with strictly increasing delays and rates scaled
/// to a unit peak.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayScanProfile {
    delays_s: Vec<f64>,
    rates: Vec<f64>,
}

impl DelayScanProfile {
    pub fn new(samples: &[(f64, f64)]) -> Result<Self> {
        let bad = |msg: String| Err(FitError::InvalidProfile(msg));
        if samples.len() < 3 {
            return bad(format!("need at least 3 samples, got {}", samples.len()));
        }
        if let Some(i) = samples
            .iter()
            .position(|s| !s.0.is_finite() || !s.1.is_finite())
        {
            return bad(format!("sample {i} is not finite"));
        }
        if let Some(i) = samples.windows(2).position(|w| w[1].0 <= w[0].0) {
            return bad(format!("delay at sample {} does not increase", i + 1));
        }
        if let Some(i) = samples.iter().position(|s| !(0.0..=1.0).contains(&s.1)) {
            return bad(format!("rate at sample {i} outside [0, 1]"));
        }
        let peak = samples.iter().map(|s| s.1).fold(0.0, f64::max);
        if (peak - 1.0).abs() > 1e-9 {
            return bad(format!("rates must peak at 1, peak is {peak}"));
        }
        Ok(Self {
            delays_s: samples.iter().map(|s| s.0).collect(),
            rates: samples.iter().map(|s| s.1).collect(),
        })
    }

    /// Normalizes raw counts by their maximum.
    pub fn from_counts(samples: &[(f64, f64)]) -> Result<Self> {
        let peak = samples
            .iter()
            .map(|s| s.1)
            .fold(f64::NEG_INFINITY, f64::max);
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(FitError::InvalidProfile(
                "counts have no positive peak".into(),
            ));
        }
        if samples.iter().any(|s| s.1 < 0.0) {
            return Err(FitError::InvalidProfile("negative counts".into()));
        }
        let scaled: Vec<(f64, f64)> = samples.iter().map(|&(t, c)| (t, c / peak)).collect();
        Self::new(&scaled)
    }

    pub fn delays_s(&self) -> &[f64] {
        &self.delays_s
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }
}

/// Equivalent-area width `∫ r(t) dt / max r`, by the trapezoidal rule.
pub fn effective_gate_width(profile: &DelayScanProfile) -> f64 {
    let area: f64 = profile
        .delays_s
        .windows(2)
        .zip(profile.rates.windows(2))
        .map(|(t, r)| 0.5 * (t[1] - t[0]) * (r[0] + r[1]))
        .sum();
    let peak = profile.rates.iter().copied().fold(0.0, f64::max);
    area / peak
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangular_profile() {
        // zero samples one step outside the 5 ns plateau; the trapezoid edges
        // contribute half a step on each side
        let samples: Vec<(f64, f64)> = (-1..=5)
            .map(|i| {
                (
                    i as f64 * 1e-9,
                    if (0..=4).contains(&i) { 1.0 } else { 0.0 },
                )
            })
            .collect();
        let p = DelayScanProfile::new(&samples).unwrap();
        assert!((effective_gate_width(&p) - 5e-9).abs() < 1e-24);
    }

    #[test]
    fn triangular_profile() {
        let base = 4e-9;
        let samples: Vec<(f64, f64)> = (0..=8)
            .map(|i| {
                let t = i as f64 * 0.5e-9;
                (t, 1.0 - ((t - base / 2.0).abs() / (base / 2.0)))
            })
            .collect();
        let p = DelayScanProfile::new(&samples).unwrap();
        assert!((effective_gate_width(&p) - base / 2.0).abs() < 1e-24);
    }

    #[test]
    fn rejects_bad_profiles() {
        assert!(DelayScanProfile::new(&[(0.0, 1.0), (1.0, 0.5)]).is_err());
        assert!(DelayScanProfile::new(&[(0.0, 1.0), (1.0, 0.5), (1.0, 0.2)]).is_err());
        assert!(DelayScanProfile::new(&[(0.0, 0.9), (1.0, 0.5), (2.0, 0.2)]).is_err());
        assert!(DelayScanProfile::from_counts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]).is_err());
        let p = DelayScanProfile::from_counts(&[(0.0, 10.0), (1.0, 40.0), (2.0, 20.0)]).unwrap();
        assert_eq!(p.rates(), &[0.25, 1.0, 0.5]);
    }
}
