use spadchar::fit::{
    area_ratio_afterpulse, fit_model, fit_model_from, initial_guess, r_squared, FitOptions, Pin,
    Weighting,
};
use spadchar::intervals::{build_histogram, extract_intervals, IntervalHistogram, DEFAULT_M_MAX};
use spadchar::model::{DetectorParams, PmfMode};
use spadchar::simulate::{simulate_stream, SimConfig, StopCondition};

const T: f64 = 1.0 / 600e3;

fn params(mu: f64, p_total: f64) -> DetectorParams {
    DetectorParams::with_total_afterpulse(mu, 0.15, 2e-4, p_total, 5e-6, T).unwrap()
}

fn sample(p: DetectorParams, intervals: u64, seed: u64, stream: u64) -> IntervalHistogram {
    let cfg = SimConfig::new(p, StopCondition::Detections(intervals + 1), seed).with_stream(stream);
    build_histogram(
        &extract_intervals(&simulate_stream(&cfg).unwrap()),
        DEFAULT_M_MAX,
    )
    .unwrap()
}

fn pinned(weighting: Weighting) -> FitOptions {
    FitOptions {
        pin: Pin::PDark(2e-4),
        weighting,
        ..FitOptions::default()
    }
}

fn sd(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn closure_at_the_reference_point() {
    let p = params(0.08, 0.0647);
    let h = sample(p, 2_000_000, 21, 0);
    let r = fit_model(&h, T, &pinned(Weighting::InverseVariance)).unwrap();
    assert!(
        ((r.p_total_hat - 0.0647) / 0.0647).abs() < 0.05,
        "{}",
        r.p_total_hat
    );
    let me = r.decoupled.mu_eta().unwrap();
    assert!(((me - 0.012) / 0.012).abs() < 0.02, "{me}");
    assert!(r.converged && !r.at_bound.any());
    assert!((r.tau_s - T / r.decay_hat).abs() < 1e-18);
}

#[test]
fn geometric_data_yields_no_afterpulsing() {
    let p = params(0.08, 0.0);
    let h = sample(p, 1_000_000, 22, 0);
    let q = p.gate_model().unwrap().q();
    let g = initial_guess(&h, &FitOptions::default()).unwrap();
    assert!((g.q - q).abs() < 1e-3, "{} vs {q}", g.q);
    let r = fit_model(
        &h,
        T,
        &FitOptions {
            weighting: Weighting::InverseVariance,
            ..FitOptions::default()
        },
    )
    .unwrap();
    assert!(r.p_total_hat < 1e-3, "{}", r.p_total_hat);
    // standard error of the geometric ratio from the interval count
    let se = (q * (1.0 - q) * (1.0 - q) / h.total() as f64).sqrt();
    assert!(
        (r.q_hat - q).abs() < 3.0 * se,
        "{} vs {q} (se {se})",
        r.q_hat
    );
}

#[test]
fn spread_shrinks_like_inverse_square_root() {
    let p = params(0.08, 0.065);
    let opts = pinned(Weighting::InverseVariance);
    let spread = |n: u64| -> f64 {
        let v: Vec<f64> = (0..20)
            .map(|s| {
                fit_model(&sample(p, n, 23, s), T, &opts)
                    .unwrap()
                    .decoupled
                    .mu_eta()
                    .unwrap()
            })
            .collect();
        sd(&v)
    };
    let (small, large) = (spread(30_000), spread(300_000));
    let slope = (large / small).log10();
    assert!((slope + 0.5).abs() < 0.15, "log-log slope {slope}");
}

#[test]
fn r_squared_grows_with_statistics() {
    let p = params(0.32, 0.065);
    let opts = pinned(Weighting::InverseVariance);
    let mean_r2 = |n: u64| -> f64 {
        (0..5)
            .map(|s| {
                fit_model(&sample(p, n, 24, s), T, &opts)
                    .unwrap()
                    .r_squared
                    .unwrap()
            })
            .sum::<f64>()
            / 5.0
    };
    let (a, b) = (mean_r2(30_000), mean_r2(300_000));
    assert!(a < b && b < 1.0, "{a} {b}");
}

#[test]
fn refit_from_own_result_is_stable() {
    let h = sample(params(0.08, 0.065), 300_000, 25, 0);
    let opts = pinned(Weighting::Uniform);
    let r = fit_model(&h, T, &opts).unwrap();
    let again = fit_model_from(&h, T, &opts, Some(&r)).unwrap();
    assert!(((again.q_hat - r.q_hat) / (1.0 - r.q_hat)).abs() < 1e-6);
    assert!(((again.p_total_hat - r.p_total_hat) / r.p_total_hat).abs() < 1e-4);
    let r2 = r_squared(&h, &r, &opts).unwrap();
    assert!((r2 - r.r_squared.unwrap()).abs() < 1e-12);
}

#[test]
fn exact_and_second_order_fits_agree_at_moderate_afterpulsing() {
    let h = sample(params(0.08, 0.065), 2_000_000, 26, 0);
    let second = fit_model(&h, T, &pinned(Weighting::InverseVariance)).unwrap();
    let exact = fit_model(
        &h,
        T,
        &FitOptions {
            mode: PmfMode::ExactProduct,
            ..pinned(Weighting::InverseVariance)
        },
    )
    .unwrap();
    assert!(((second.p_total_hat - exact.p_total_hat) / exact.p_total_hat).abs() < 0.01);
}

#[test]
fn area_ratio_tracks_the_fit() {
    let h = sample(params(0.08, 0.065), 2_000_000, 27, 0);
    let fit = fit_model(&h, T, &pinned(Weighting::InverseVariance)).unwrap();
    let area = area_ratio_afterpulse(&h, None).unwrap();
    assert!(((area.p_total - fit.p_total_hat) / fit.p_total_hat).abs() < 0.1);
    assert!(area.tail.knee > 1);
}

#[test]
fn fits_are_deterministic() {
    let h = sample(params(0.16, 0.135), 100_000, 28, 0);
    let opts = pinned(Weighting::ModelVariance);
    assert_eq!(
        fit_model(&h, T, &opts).unwrap(),
        fit_model(&h, T, &opts).unwrap()
    );
}
