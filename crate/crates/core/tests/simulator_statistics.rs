use spadchar::intervals::{build_histogram, extract_intervals, IntervalHistogram};
use spadchar::model::{DetectorParams, PmfMode};
use spadchar::simulate::{
    simulate_stream, simulate_stream_gatewise, simulate_with_stats, AfterpulseMemory, SimConfig,
    StopCondition,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const M_MAX: u64 = 2000;

fn params(mu: f64, p_total: f64) -> DetectorParams {
    DetectorParams::with_total_afterpulse(mu, 0.15, 2e-4, p_total, 5e-6, 1.0 / 600e3).unwrap()
}

fn hist_of(gates: &[u64]) -> IntervalHistogram {
    let gaps: Vec<u64> = gates.windows(2).map(|w| w[1] - w[0]).collect();
    build_histogram(&gaps, M_MAX).unwrap()
}

/// Two-sample chi-square on binned counts, pooling sparse bins into the next
/// one; returns the upper tail probability.
fn two_sample_p(a: &IntervalHistogram, b: &IntervalHistogram) -> f64 {
    let (na, nb) = (a.total() as f64, b.total() as f64);
    let (ka, kb) = ((nb / na).sqrt(), (na / nb).sqrt());
    let mut stat = 0.0;
    let mut dof = 0usize;
    let (mut ca, mut cb) = (0.0, 0.0);
    let cells = a
        .counts()
        .iter()
        .zip(b.counts())
        .map(|(&x, &y)| (x as f64, y as f64))
        .chain(std::iter::once((a.overflow() as f64, b.overflow() as f64)));
    for (x, y) in cells {
        ca += x;
        cb += y;
        if ca + cb >= 20.0 {
            stat += (ka * ca - kb * cb).powi(2) / (ca + cb);
            dof += 1;
            ca = 0.0;
            cb = 0.0;
        }
    }
    if ca + cb > 0.0 {
        stat += (ka * ca - kb * cb).powi(2) / (ca + cb);
        dof += 1;
    }
    1.0 - ChiSquared::new((dof - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn last_only_histogram_matches_model_bin_by_bin() {
    let p = params(0.08, 0.065);
    let cfg = SimConfig::new(p, StopCondition::Detections(2_000_001), 11);
    let h = build_histogram(&extract_intervals(&simulate_stream(&cfg).unwrap()), M_MAX).unwrap();
    let pmf = p
        .gate_model()
        .unwrap()
        .pmf_table(M_MAX, PmfMode::ExactProduct)
        .unwrap();
    let n = h.total() as f64;
    let mut bins = 0;
    let mut beyond = 0;
    let mut stat = 0.0;
    for (m, &prob) in (1..=M_MAX).zip(&pmf) {
        let expected = n * prob;
        if expected < 5.0 {
            continue;
        }
        let z = (h.count(m) as f64 - expected) / expected.sqrt();
        bins += 1;
        stat += z * z;
        if z.abs() > 3.0 {
            beyond += 1;
        }
    }
    assert!(bins > 500, "{bins}");
    assert!((beyond as f64) < 0.01 * bins as f64, "{beyond} of {bins}");
    let p_value = 1.0 - ChiSquared::new(bins as f64).unwrap().cdf(stat);
    assert!(
        p_value > 1e-3,
        "chi-square {stat} over {bins} bins, p {p_value}"
    );
}

#[test]
fn first_and_second_half_agree() {
    let cfg = SimConfig::new(
        params(0.08, 0.135),
        StopCondition::Detections(2_000_000),
        12,
    );
    let gates = simulate_stream(&cfg).unwrap().into_gates();
    let (first, second) = gates.split_at(gates.len() / 2);
    let p = two_sample_p(&hist_of(first), &hist_of(second));
    assert!(p > 1e-3, "p {p}");
}

#[test]
fn gatewise_reference_matches_fast_sampler() {
    let p = params(0.16, 0.135);
    for memory in [
        AfterpulseMemory::LastAvalancheOnly,
        AfterpulseMemory::Accumulating,
    ] {
        let fast = SimConfig::new(p, StopCondition::Detections(200_000), 13).with_memory(memory);
        let slow = fast.with_stream(1);
        let a = hist_of(simulate_stream(&fast).unwrap().gates());
        let b = hist_of(simulate_stream_gatewise(&slow).unwrap().gates());
        let pv = two_sample_p(&a, &b);
        assert!(pv > 1e-3, "{memory:?}: p {pv}");
    }
}

#[test]
fn accumulating_memory_adds_afterpulses() {
    let p = params(0.08, 0.135);
    let rate = |memory: AfterpulseMemory| -> f64 {
        (0..20)
            .map(|s| {
                let cfg = SimConfig::new(p, StopCondition::Detections(100_000), 14)
                    .with_stream(s)
                    .with_memory(memory);
                let (_, stats) = simulate_with_stats(&cfg).unwrap();
                stats.afterpulse_gates as f64 / stats.detections as f64
            })
            .sum::<f64>()
            / 20.0
    };
    let last = rate(AfterpulseMemory::LastAvalancheOnly);
    let accumulating = rate(AfterpulseMemory::Accumulating);
    assert!(accumulating >= last, "{accumulating} < {last}");
}

#[test]
fn streams_are_independent_and_reproducible() {
    let base = SimConfig::new(params(0.08, 0.065), StopCondition::Detections(100_000), 15);
    let a = simulate_stream(&base).unwrap();
    let b = simulate_stream(&base.with_stream(1)).unwrap();
    assert_eq!(a, simulate_stream(&base).unwrap());
    assert_ne!(a, b);
    let p = two_sample_p(&hist_of(a.gates()), &hist_of(b.gates()));
    assert!(p > 1e-3, "p {p}");
}

#[test]
fn structural_shape_of_a_stream() {
    let cfg = SimConfig::new(params(0.08, 0.065), StopCondition::Detections(100_000), 16);
    let s = simulate_stream(&cfg).unwrap();
    let gaps = extract_intervals(&s);
    assert_eq!(s.len(), 100_000);
    assert_eq!(gaps.len(), 99_999);
    assert!(gaps.iter().all(|&g| g >= 1));
    assert!(s.gates()[0] >= 1);
}
