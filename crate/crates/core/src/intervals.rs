//! Inter-detection gap histograms and the bounded sliding window used for
//! real-time operation.

use std::collections::VecDeque;

use thiserror::Error;

use crate::simulate::EventStream;

/// Default largest tracked gap; longer gaps go to the overflow bin.
pub const DEFAULT_M_MAX: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IntervalError {
    #[error("largest tracked gap must be at least 1")]
    InvalidMaxGap,
    #[error("gate gaps must be at least 1")]
    ZeroGap,
    #[error("cannot merge histograms tracking {0} and {1} gaps")]
    MismatchedMaxGap(u64, u64),
    #[error("window capacity must be at least 1")]
    ZeroCapacity,
}

pub type Result<T> = std::result::Result<T, IntervalError>;

/// Counts of gate gaps `1..=m_max` plus an overflow bin.
///
/// Bins with zero counts are kept; whether they enter a fit is the fitter's
/// decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalHistogram {
    counts: Vec<u64>,
    overflow: u64,
    total: u64,
}

impl IntervalHistogram {
    pub fn new(m_max: u64) -> Result<Self> {
        if m_max == 0 {
            return Err(IntervalError::InvalidMaxGap);
        }
        Ok(Self {
            counts: vec![0; m_max as usize],
            overflow: 0,
            total: 0,
        })
    }

    /// Histogram with the given per-bin counts for gaps `1..=counts.len()`.
    pub fn from_counts(counts: Vec<u64>, overflow: u64) -> Result<Self> {
        if counts.is_empty() {
            return Err(IntervalError::InvalidMaxGap);
        }
        let total = counts.iter().sum::<u64>() + overflow;
        Ok(Self {
            counts,
            overflow,
            total,
        })
    }

    pub fn m_max(&self) -> u64 {
        self.counts.len() as u64
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn overflow(&self) -> u64 {
        self.overflow
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Count in bin `m`; zero outside `1..=m_max`.
    pub fn count(&self, m: u64) -> u64 {
        if m == 0 {
            return 0;
        }
        self.counts.get(m as usize - 1).copied().unwrap_or(0)
    }

    /// Counts for gaps `1..=m_max`, index `m - 1`.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn record(&mut self, gap: u64) -> Result<()> {
        match gap {
            0 => return Err(IntervalError::ZeroGap),
            g if g > self.m_max() => self.overflow += 1,
            g => self.counts[g as usize - 1] += 1,
        }
        self.total += 1;
        Ok(())
    }

    fn forget(&mut self, gap: u64) {
        if gap > self.m_max() {
            self.overflow -= 1;
        } else {
            self.counts[gap as usize - 1] -= 1;
        }
        self.total -= 1;
    }

    /// Empirical probability of gap `m` as an exact fraction `(count, total)`.
    pub fn pmf_fraction(&self, m: u64) -> (u64, u64) {
        (self.count(m), self.total)
    }

    pub fn empirical_pmf(&self, m: u64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.count(m) as f64 / self.total as f64
    }

    pub fn overflow_fraction(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.overflow as f64 / self.total as f64
    }

    /// Largest gap whose bin holds at least `k` counts.
    pub fn last_bin_with_at_least(&self, k: u64) -> Option<u64> {
        self.counts
            .iter()
            .rposition(|&c| c >= k.max(1))
            .map(|i| i as u64 + 1)
    }

    /// Gaps in `1..=m_max` whose bins are empty.
    pub fn zero_bins(&self) -> impl Iterator<Item = u64> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i as u64 + 1)
    }

    pub fn mean_gap(&self) -> Option<f64> {
        let in_range = self.total - self.overflow;
        if in_range == 0 {
            return None;
        }
        let sum: f64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (i + 1) as f64 * c as f64)
            .sum();
        Some(sum / in_range as f64)
    }
}

/// Consecutive differences of the detection gates.
pub fn extract_intervals(stream: &EventStream) -> Vec<u64> {
    stream.gates().windows(2).map(|w| w[1] - w[0]).collect()
}

pub fn build_histogram(gaps: &[u64], m_max: u64) -> Result<IntervalHistogram> {
    let mut hist = IntervalHistogram::new(m_max)?;
    for &gap in gaps {
        hist.record(gap)?;
    }
    Ok(hist)
}

/// Pointwise sum of two histograms over the same gap range.
///
/// When the histograms come from consecutive chunks of one stream, the gap
/// spanning the seam belongs to the later chunk: the caller must include the
/// last detection of the earlier chunk when extracting its intervals.
pub fn merge(a: &IntervalHistogram, b: &IntervalHistogram) -> Result<IntervalHistogram> {
    if a.m_max() != b.m_max() {
        return Err(IntervalError::MismatchedMaxGap(a.m_max(), b.m_max()));
    }
    let counts = a.counts.iter().zip(&b.counts).map(|(x, y)| x + y).collect();
    Ok(IntervalHistogram {
        counts,
        overflow: a.overflow + b.overflow,
        total: a.total + b.total,
    })
}

/// The most recent `capacity` gaps and their histogram, updated incrementally.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    capacity: usize,
    ring: VecDeque<u64>,
    hist: IntervalHistogram,
}

impl SlidingWindow {
    pub fn new(capacity: usize, m_max: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(IntervalError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            ring: VecDeque::with_capacity(capacity),
            hist: IntervalHistogram::new(m_max)?,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.ring.len() == self.capacity
    }

    pub fn push(&mut self, gap: u64) -> Result<()> {
        self.hist.record(gap)?;
        self.ring.push_back(gap);
        if self.ring.len() > self.capacity {
            let oldest = self.ring.pop_front().expect("ring over capacity");
            self.hist.forget(oldest);
        }
        Ok(())
    }

    pub fn histogram(&self) -> &IntervalHistogram {
        &self.hist
    }

    /// Owned copy of the current histogram, independent of later pushes.
    pub fn snapshot(&self) -> IntervalHistogram {
        self.hist.clone()
    }

    pub fn contents(&self) -> impl Iterator<Item = u64> + '_ {
        self.ring.iter().copied()
    }

    /// Histogram rebuilt from the ring contents.
    pub fn recompute(&self) -> IntervalHistogram {
        let mut hist = IntervalHistogram::new(self.hist.m_max()).expect("m_max already validated");
        for &gap in &self.ring {
            hist.record(gap).expect("gaps already validated");
        }
        hist
    }
}

/// Pushes a gap into the window, returning the updated window.
pub fn window_push(mut window: SlidingWindow, gap: u64) -> Result<SlidingWindow> {
    window.push(gap)?;
    Ok(window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extract_examples() {
        let s = EventStream::from_gates(vec![3, 5, 10, 11]).unwrap();
        assert_eq!(extract_intervals(&s), vec![2, 5, 1]);
        let s = EventStream::from_gates(vec![7]).unwrap();
        assert!(extract_intervals(&s).is_empty());
    }

    #[test]
    fn build_examples() {
        let h = build_histogram(&[1, 1, 2], 10).unwrap();
        assert_eq!(h.count(1), 2);
        assert_eq!(h.count(2), 1);
        assert_eq!(h.overflow(), 0);
        assert_eq!(h.pmf_fraction(1), (2, 3));
        assert_eq!(h.pmf_fraction(2), (1, 3));
        assert_eq!(h.zero_bins().count(), 8);

        let h = build_histogram(&[5], 3).unwrap();
        assert_eq!(h.overflow(), 1);
        assert_eq!(h.total(), 1);
        assert_eq!(h.overflow_fraction(), 1.0);

        assert_eq!(build_histogram(&[1], 0), Err(IntervalError::InvalidMaxGap));
        assert_eq!(build_histogram(&[0], 4), Err(IntervalError::ZeroGap));
    }

    #[test]
    fn window_examples() {
        let w = SlidingWindow::new(2, 10).unwrap();
        let w = window_push(w, 1).unwrap();
        let w = window_push(w, 1).unwrap();
        let w = window_push(w, 3).unwrap();
        assert_eq!(w.contents().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(w.histogram().count(1), 1);
        assert_eq!(w.histogram().count(3), 1);
        assert_eq!(w.histogram().total(), 2);
        assert_eq!(w.histogram(), &w.recompute());
        assert!(SlidingWindow::new(0, 10).is_err());
    }

    #[test]
    fn merge_rejects_mismatch() {
        let a = IntervalHistogram::new(5).unwrap();
        let b = IntervalHistogram::new(6).unwrap();
        assert_eq!(merge(&a, &b), Err(IntervalError::MismatchedMaxGap(5, 6)));
    }

    #[test]
    fn merge_halves_of_a_stream() {
        let gates: Vec<u64> = (1..200u64).map(|i| i * i / 3 + i).collect();
        let whole = build_histogram(
            &extract_intervals(&EventStream::from_gates(gates.clone()).unwrap()),
            50,
        )
        .unwrap();
        // the later chunk starts with the bridging detection
        let first = EventStream::from_gates(gates[..100].to_vec()).unwrap();
        let second = EventStream::from_gates(gates[99..].to_vec()).unwrap();
        let a = build_histogram(&extract_intervals(&first), 50).unwrap();
        let b = build_histogram(&extract_intervals(&second), 50).unwrap();
        assert_eq!(merge(&a, &b).unwrap(), whole);
    }

    fn hist_strategy() -> impl Strategy<Value = IntervalHistogram> {
        (prop::collection::vec(0u64..1000, 8), 0u64..50)
            .prop_map(|(c, o)| IntervalHistogram::from_counts(c, o).unwrap())
    }

    proptest! {
        #[test]
        fn merge_laws(a in hist_strategy(), b in hist_strategy(), c in hist_strategy()) {
            let empty = IntervalHistogram::new(8).unwrap();
            prop_assert_eq!(merge(&a, &empty).unwrap(), a.clone());
            prop_assert_eq!(merge(&a, &b).unwrap(), merge(&b, &a).unwrap());
            prop_assert_eq!(
                merge(&merge(&a, &b).unwrap(), &c).unwrap(),
                merge(&a, &merge(&b, &c).unwrap()).unwrap()
            );
        }

        #[test]
        fn totals_balance(gaps in prop::collection::vec(1u64..40, 0..300), m_max in 1u64..30) {
            let h = build_histogram(&gaps, m_max).unwrap();
            prop_assert_eq!(h.total(), gaps.len() as u64);
            prop_assert_eq!(h.counts().iter().sum::<u64>() + h.overflow(), h.total());
        }

        #[test]
        fn window_holds_last_n(gaps in prop::collection::vec(1u64..20, 0..400), cap in 1usize..50) {
            let mut w = SlidingWindow::new(cap, 12).unwrap();
            for &g in &gaps {
                w.push(g).unwrap();
            }
            let start = gaps.len().saturating_sub(cap);
            prop_assert_eq!(w.contents().collect::<Vec<_>>(), gaps[start..].to_vec());
            prop_assert_eq!(w.histogram(), &w.recompute());
        }
    }
}
