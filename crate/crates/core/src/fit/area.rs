//! Afterpulse estimate from the area above the straight-line tail.

use super::tail::{fit_tail, TailLine};
use super::{BinPolicy, Result};
use crate::intervals::IntervalHistogram;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRatio {
    /// `1 - Σ line / Σ data` over gaps `1..=m_end`, clamped to `[0, 1]`.
    pub p_total: f64,
    pub tail: TailLine,
}

/// Treats all probability above the extrapolated tail line as afterpulsing.
///
/// `knee_exclusion` skips that many initial gaps when fitting the line;
/// `None` locates the knee from the counting noise.
pub fn area_ratio_afterpulse(
    hist: &IntervalHistogram,
    knee_exclusion: Option<u64>,
) -> Result<AreaRatio> {
    area_ratio_afterpulse_with(hist, knee_exclusion, BinPolicy::default().k_min)
}

pub fn area_ratio_afterpulse_with(
    hist: &IntervalHistogram,
    knee_exclusion: Option<u64>,
    k_min: u64,
) -> Result<AreaRatio> {
    let tail = fit_tail(hist, k_min, hist.m_max(), knee_exclusion)?;
    let (line, data) = (1..=tail.m_end).fold((0.0, 0.0), |(l, d), m| {
        (l + tail.pmf(m), d + hist.empirical_pmf(m))
    });
    Ok(AreaRatio {
        p_total: (1.0 - line / data).clamp(0.0, 1.0),
        tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GateModel, PmfMode};

    fn analytic_hist(model: &GateModel, total: f64, m_max: u64) -> IntervalHistogram {
        let pmf = model.pmf_table(m_max, PmfMode::ExactProduct).unwrap();
        let counts = pmf.iter().map(|p| (p * total).round() as u64).collect();
        IntervalHistogram::from_counts(counts, 0).unwrap()
    }

    #[test]
    fn geometric_data_has_no_excess() {
        let h = analytic_hist(&GateModel::new(0.95, 0.0, 1.0).unwrap(), 1e9, 300);
        let a = area_ratio_afterpulse(&h, None).unwrap();
        assert!(a.p_total < 1e-6, "{}", a.p_total);
        assert_eq!(a.tail.knee, 1);
    }

    #[test]
    fn analytic_five_percent() {
        let decay = 0.3f64;
        let model = GateModel::new(0.988, 0.05 * decay.exp_m1(), decay).unwrap();
        assert!((model.total_afterpulse() - 0.05).abs() < 1e-15);
        let h = analytic_hist(&model, 1e9, 2000);
        let a = area_ratio_afterpulse(&h, None).unwrap();
        assert!((a.p_total - 0.05).abs() / 0.05 < 0.05, "{}", a.p_total);
    }

    #[test]
    fn explicit_knee_exclusion() {
        let decay = 0.3f64;
        let model = GateModel::new(0.988, 0.05 * decay.exp_m1(), decay).unwrap();
        let h = analytic_hist(&model, 1e9, 2000);
        let a = area_ratio_afterpulse(&h, Some(80)).unwrap();
        assert_eq!(a.tail.knee, 81);
        assert!((a.p_total - 0.05).abs() / 0.05 < 0.05, "{}", a.p_total);
        assert!(area_ratio_afterpulse(&h, Some(5000)).is_err());
    }
}
