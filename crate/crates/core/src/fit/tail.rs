//! Straight-line fit to the log of the histogram tail, past the afterpulse
//! knee.

use super::regression::{weighted_line, LineFit};
use super::FitError;
use crate::intervals::IntervalHistogram;

/// `log10 pmf(m) ≈ intercept + slope·m` over gaps `knee..=m_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailLine {
    pub line: LineFit,
    /// First gap of the tail region.
    pub knee: u64,
    /// Last gap with enough counts to enter the fit.
    pub m_end: u64,
    pub bins: usize,
}

impl TailLine {
    /// Extrapolated probability at gap `m`.
    pub fn pmf(&self, m: u64) -> f64 {
        10f64.powf(self.line.at(m as f64))
    }

    /// Per-gate geometric ratio implied by the slope.
    pub fn ratio(&self) -> f64 {
        10f64.powf(self.line.slope)
    }
}

struct Usable {
    m: Vec<u64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

fn usable_bins(hist: &IntervalHistogram, k_min: u64, m_limit: u64) -> Usable {
    let total = hist.total() as f64;
    let mut out = Usable {
        m: Vec::new(),
        y: Vec::new(),
        w: Vec::new(),
    };
    let Some(m_end) = hist.last_bin_with_at_least(k_min) else {
        return out;
    };
    for m in 1..=m_end.min(m_limit) {
        let c = hist.count(m);
        if c >= k_min.max(1) {
            out.m.push(m);
            out.y.push((c as f64 / total).log10());
            out.w.push(c as f64);
        }
    }
    out
}

fn line_over(u: &Usable, from: usize) -> Option<LineFit> {
    let xs: Vec<f64> = u.m[from..].iter().map(|&m| m as f64).collect();
    weighted_line(&xs, &u.y[from..], &u.w[from..])
}

/// Fits the tail line with count-weighted regression on `log10 pmf`.
///
/// With `knee_exclusion = Some(k)` the first `k` gaps are skipped. Otherwise
/// the knee is the smallest gap whose excess over the line drops below twice
/// its counting noise, found by refitting from the upper half of the usable
/// bins until the knee is stable.
pub fn fit_tail(
    hist: &IntervalHistogram,
    k_min: u64,
    m_limit: u64,
    knee_exclusion: Option<u64>,
) -> Result<TailLine, FitError> {
    let u = usable_bins(hist, k_min, m_limit);
    let insufficient = |got: usize| FitError::InsufficientStatistics {
        needed: 2,
        got,
        what: "tail bins",
    };
    if u.m.len() < 2 {
        return Err(insufficient(u.m.len()));
    }
    let m_end = *u.m.last().expect("non-empty");

    if let Some(k) = knee_exclusion {
        let from = u.m.partition_point(|&m| m <= k);
        if u.m.len() - from < 2 {
            return Err(insufficient(u.m.len() - from));
        }
        let line = line_over(&u, from).ok_or_else(|| insufficient(u.m.len() - from))?;
        return Ok(TailLine {
            line,
            knee: u.m[from],
            m_end,
            bins: u.m.len() - from,
        });
    }

    let total = hist.total() as f64;
    let mut from = if u.m.len() < 4 { 0 } else { u.m.len() / 2 };
    let mut line = line_over(&u, from).ok_or_else(|| insufficient(u.m.len()))?;
    for _ in 0..10 {
        let knee_idx = (0..u.m.len())
            .find(|&i| {
                let m = u.m[i];
                let count = hist.count(m) as f64;
                let excess = count / total - 10f64.powf(line.at(m as f64));
                excess < 2.0 * count.sqrt() / total
            })
            .unwrap_or(u.m.len() - 2)
            .min(u.m.len() - 2);
        if knee_idx == from {
            break;
        }
        from = knee_idx;
        line = line_over(&u, from).ok_or_else(|| insufficient(u.m.len() - from))?;
    }
    Ok(TailLine {
        line,
        knee: u.m[from],
        m_end,
        bins: u.m.len() - from,
    })
}
