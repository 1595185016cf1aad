//! Parameter extraction from interval histograms.
//!
//! The fitter minimizes the weighted squared difference between `log10` of
//! the empirical interval distribution and `log10` of the model over the
//! included bins. The photon and dark-count probabilities enter the model
//! only through `q = exp(-μη)·(1 - P_d)`, so a single histogram identifies
//! `q`, the afterpulse amplitude and the per-gate decay. `μη` or `P_d` is
//! reported only when the other one is pinned ([`Pin`]); separating both
//! needs several runs at known `μ` ([`decompose_efficiency`]).

mod area;
mod decompose;
mod gate_width;
mod optim;
pub mod regression;
mod tail;

use std::f64::consts::LN_10;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use thiserror::Error;

use crate::intervals::IntervalHistogram;
use crate::model::{GateModel, ModelError, PmfMode};
use crate::simulate::sim_rng;

pub use area::{area_ratio_afterpulse, area_ratio_afterpulse_with, AreaRatio};
pub use decompose::{decompose_efficiency, DecompositionResult};
pub use gate_width::{effective_gate_width, DelayScanProfile};
pub use tail::{fit_tail, TailLine};

use optim::{nelder_mead, NmOptions, NmOutcome};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("insufficient statistics: need at least {needed} {what}, have {got}")]
    InsufficientStatistics {
        needed: usize,
        got: usize,
        what: &'static str,
    },
    #[error("fit did not converge after {} objective evaluations", .0.evaluations)]
    NotConverged(Box<FitResult>),
    #[error("invalid fit options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("need runs at two or more distinct mu values, got {0} run(s)")]
    InsufficientRuns(usize),
    #[error("all runs share the same mu; eta and P_d cannot be separated")]
    DegenerateDesign,
    #[error("invalid run {index}: {reason}")]
    InvalidRun { index: usize, reason: String },
    #[error("invalid delay-scan profile: {0}")]
    InvalidProfile(String),
}

pub type Result<T> = std::result::Result<T, FitError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Equal weight for every log residual.
    #[default]
    Uniform,
    /// Weight each bin by its count, the inverse variance of its log.
    InverseVariance,
    /// Weight each bin by its expected count under the fitted model,
    /// refitting until the weights settle.
    ModelVariance,
}

/// Which bins enter the fit.
///
/// The fit range ends at the last bin holding at least `k_min` counts; inside
/// it, bins with fewer than `min_count` counts are dropped (`min_count = 1`
/// drops only empty bins, whose log is undefined).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinPolicy {
    pub min_count: u64,
    pub k_min: u64,
}

impl Default for BinPolicy {
    fn default() -> Self {
        Self {
            min_count: 1,
            k_min: 5,
        }
    }
}

/// A parameter held fixed during the fit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Pin {
    /// Fit `q` directly.
    #[default]
    None,
    /// Dark-count probability known; fit `μη`.
    PDark(f64),
    /// `μη` known; fit the dark-count probability.
    MuEta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bootstrap {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for Bootstrap {
    fn default() -> Self {
        Self {
            resamples: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub mode: PmfMode,
    pub bins: BinPolicy,
    /// Largest gap considered; defaults to the histogram's range.
    pub m_fit_max: Option<u64>,
    pub weighting: Weighting,
    pub pin: Pin,
    /// Simplex restarts from perturbed starting points after the first descent.
    pub restarts: usize,
    /// Objective evaluation budget per descent.
    pub max_evals: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    pub bootstrap: Option<Bootstrap>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            mode: PmfMode::SecondOrder,
            bins: BinPolicy::default(),
            m_fit_max: None,
            weighting: Weighting::Uniform,
            pin: Pin::None,
            restarts: 3,
            max_evals: 4000,
            f_tol: 1e-11,
            x_tol: 1e-7,
            bootstrap: None,
        }
    }
}

impl FitOptions {
    fn validate(&self, hist: &IntervalHistogram) -> Result<()> {
        let bad = |msg: String| Err(FitError::InvalidOptions(msg));
        if let Some(m) = self.m_fit_max {
            if m == 0 || m > hist.m_max() {
                return bad(format!(
                    "m_fit_max {m} must lie in 1..={} (histogram range)",
                    hist.m_max()
                ));
            }
        }
        if self.bins.min_count == 0 || self.bins.k_min == 0 {
            return bad("bin count thresholds must be at least 1".into());
        }
        match self.pin {
            Pin::PDark(p) if !(0.0..1.0).contains(&p) => {
                return bad(format!("pinned P_d {p} outside [0, 1)"))
            }
            Pin::MuEta(v) if !(v.is_finite() && v > 0.0) => {
                return bad(format!("pinned mu*eta {v} must be positive"))
            }
            _ => {}
        }
        if let Some(b) = self.bootstrap {
            if b.resamples < 2 {
                return bad("bootstrap needs at least 2 resamples".into());
            }
        }
        Ok(())
    }

    fn m_limit(&self, hist: &IntervalHistogram) -> u64 {
        self.m_fit_max.unwrap_or(hist.m_max())
    }
}

/// Photon/dark split of the fitted `q`; never both free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoupled {
    /// Only `q` is identified.
    QOnly,
    MuEta {
        mu_eta: f64,
        p_dark_pinned: f64,
    },
    PDark {
        p_dark: f64,
        mu_eta_pinned: f64,
    },
}

impl Decoupled {
    pub fn mu_eta(&self) -> Option<f64> {
        match *self {
            Decoupled::QOnly => None,
            Decoupled::MuEta { mu_eta, .. } => Some(mu_eta),
            Decoupled::PDark { mu_eta_pinned, .. } => Some(mu_eta_pinned),
        }
    }

    pub fn p_dark(&self) -> Option<f64> {
        match *self {
            Decoupled::QOnly => None,
            Decoupled::MuEta { p_dark_pinned, .. } => Some(p_dark_pinned),
            Decoupled::PDark { p_dark, .. } => Some(p_dark),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinResidual {
    pub m: u64,
    pub count: u64,
    pub observed_log10: f64,
    pub model_log10: f64,
    pub weight: f64,
}

impl BinResidual {
    pub fn residual(&self) -> f64 {
        self.observed_log10 - self.model_log10
    }
}

/// Bootstrap standard deviations of the fitted quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StdErrors {
    pub q: f64,
    pub p0: f64,
    pub decay: f64,
    pub p_total: f64,
    pub mu_eta: Option<f64>,
    pub resamples_used: usize,
}

/// Parameters that ended on the edge of their search box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BoundHits {
    pub rate: bool,
    pub p0: bool,
    pub decay: bool,
}

impl BoundHits {
    pub fn any(&self) -> bool {
        self.rate || self.p0 || self.decay
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub q_hat: f64,
    /// `1 - q`, kept separately for precision.
    pub one_minus_q_hat: f64,
    pub p0_hat: f64,
    /// Per-gate decay `T/τ`.
    pub decay_hat: f64,
    pub gate_period_s: f64,
    pub tau_s: f64,
    pub p_total_hat: f64,
    pub decoupled: Decoupled,
    pub r_squared: Option<f64>,
    pub residuals: Vec<BinResidual>,
    pub objective: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub at_bound: BoundHits,
    pub std_errors: Option<StdErrors>,
    pub mode: PmfMode,
}

impl FitResult {
    pub fn model(&self) -> GateModel {
        GateModel::from_miss(self.one_minus_q_hat, self.p0_hat, self.decay_hat)
            .expect("fitted parameters lie inside the search box")
    }

    pub fn bins_used(&self) -> usize {
        self.residuals.len()
    }

    pub fn fit_range_end(&self) -> Option<u64> {
        self.residuals.last().map(|r| r.m)
    }
}

/// Bins entering the fit: `log10` of the empirical pmf and the weights.
#[derive(Debug, Clone)]
struct BinData {
    m: Vec<u64>,
    count: Vec<u64>,
    y: Vec<f64>,
    w: Vec<f64>,
    m_end: u64,
}

impl BinData {
    fn collect(hist: &IntervalHistogram, options: &FitOptions) -> Self {
        let mut data = BinData {
            m: Vec::new(),
            count: Vec::new(),
            y: Vec::new(),
            w: Vec::new(),
            m_end: 0,
        };
        let Some(last) = hist.last_bin_with_at_least(options.bins.k_min) else {
            return data;
        };
        let total = hist.total() as f64;
        data.m_end = last.min(options.m_limit(hist));
        for m in 1..=data.m_end {
            let c = hist.count(m);
            if c >= options.bins.min_count {
                data.m.push(m);
                data.count.push(c);
                data.y.push((c as f64 / total).log10());
                data.w.push(match options.weighting {
                    Weighting::Uniform => 1.0,
                    Weighting::InverseVariance | Weighting::ModelVariance => c as f64,
                });
            }
        }
        data
    }

    fn len(&self) -> usize {
        self.m.len()
    }

    /// Expected counts under the model, as weights.
    fn reweight(&mut self, fitted_log10: &[f64], total: f64) {
        self.w = fitted_log10
            .iter()
            .map(|f| total * 10f64.powf(*f))
            .collect();
    }

    fn model_log10(&self, model: &GateModel, mode: PmfMode) -> Option<Vec<f64>> {
        let table = model.ln_pmf_table(self.m_end, mode).ok()?;
        Some(
            self.m
                .iter()
                .map(|&m| table[m as usize - 1] / LN_10)
                .collect(),
        )
    }

    fn objective(&self, model: &GateModel, mode: PmfMode) -> f64 {
        let Some(fitted) = self.model_log10(model, mode) else {
            return f64::INFINITY;
        };
        self.y
            .iter()
            .zip(&fitted)
            .zip(&self.w)
            .map(|((y, f), w)| w * (y - f).powi(2))
            .sum()
    }

    fn r_squared(&self, fitted: &[f64]) -> Option<f64> {
        let sw: f64 = self.w.iter().sum();
        let mean = self.y.iter().zip(&self.w).map(|(y, w)| y * w).sum::<f64>() / sw;
        let ss_tot: f64 = self
            .y
            .iter()
            .zip(&self.w)
            .map(|(y, w)| w * (y - mean).powi(2))
            .sum();
        if ss_tot <= 0.0 {
            return None;
        }
        let ss_res: f64 = self
            .y
            .iter()
            .zip(fitted)
            .zip(&self.w)
            .map(|((y, f), w)| w * (y - f).powi(2))
            .sum();
        Some(1.0 - ss_res / ss_tot)
    }
}

/// Search coordinates: a log-transformed rate parameter (depending on the
/// pin), `ln p0` and `ln d`.
struct Space {
    pin: Pin,
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Space {
    fn new(pin: Pin) -> Self {
        let rate = match pin {
            Pin::None => (1e-9f64.ln(), (-1e-9f64).ln_1p()),
            Pin::PDark(_) => (1e-9f64.ln(), 50f64.ln()),
            Pin::MuEta(_) => (1e-12f64.ln(), 0.999f64.ln()),
        };
        Self {
            pin,
            lo: [rate.0, 1e-10f64.ln(), 1e-3f64.ln()],
            hi: [rate.1, 0.999f64.ln(), 50f64.ln()],
        }
    }

    fn one_minus_q(&self, x0: f64) -> f64 {
        match self.pin {
            Pin::None => x0.exp(),
            Pin::PDark(pd) => -(-x0.exp() + (-pd).ln_1p()).exp_m1(),
            Pin::MuEta(me) => -(-me + (-x0.exp()).ln_1p()).exp_m1(),
        }
    }

    fn decode(&self, x: &[f64]) -> Option<GateModel> {
        GateModel::from_miss(self.one_minus_q(x[0]), x[1].exp(), x[2].exp()).ok()
    }

    fn encode(&self, one_minus_q: f64, p0: f64, decay: f64) -> [f64; 3] {
        let ln_q = (-one_minus_q).ln_1p();
        let rate = match self.pin {
            Pin::None => one_minus_q.ln(),
            Pin::PDark(pd) => ((-pd).ln_1p() - ln_q).max(1e-12).ln(),
            Pin::MuEta(me) => (-(ln_q + me).exp_m1()).max(1e-15).ln(),
        };
        let mut x = [rate, p0.max(1e-12).ln(), decay.ln()];
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
        x
    }

    fn bound_hits(&self, x: &[f64]) -> BoundHits {
        let hit = |i: usize| {
            let tol = 1e-6 * (self.hi[i] - self.lo[i]);
            x[i] <= self.lo[i] + tol || x[i] >= self.hi[i] - tol
        };
        BoundHits {
            rate: hit(0),
            p0: hit(1),
            decay: hit(2),
        }
    }

    fn decoupled(&self, model: &GateModel) -> Decoupled {
        let ln_q = (-model.one_minus_q()).ln_1p();
        match self.pin {
            Pin::None => Decoupled::QOnly,
            Pin::PDark(pd) => Decoupled::MuEta {
                mu_eta: (-pd).ln_1p() - ln_q,
                p_dark_pinned: pd,
            },
            Pin::MuEta(me) => Decoupled::PDark {
                p_dark: -(ln_q + me).exp_m1(),
                mu_eta_pinned: me,
            },
        }
    }
}

/// Starting values from the straight-line tail and the early-bin excess.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialGuess {
    pub q: f64,
    pub p0: f64,
    pub decay: f64,
    pub tail: TailLine,
}

/// Seeds `q` from the slope of the tail line and the afterpulse amplitude and
/// decay from a log-linear regression of the early-bin excess over that line.
pub fn initial_guess(hist: &IntervalHistogram, options: &FitOptions) -> Result<InitialGuess> {
    let tail = fit_tail(hist, options.bins.k_min, options.m_limit(hist), None)?;
    let q = tail.ratio().clamp(1e-9, 1.0 - 1e-9);
    let total = hist.total() as f64;

    // excess(m)/line(m) ≈ q·P_a(m)/(1 - q) before the knee
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    for m in 1..tail.knee {
        let c = hist.count(m);
        if c < options.bins.k_min {
            continue;
        }
        let ratio = c as f64 / total / tail.pmf(m) - 1.0;
        if ratio > 0.0 {
            xs.push(m as f64);
            zs.push((ratio * (1.0 - q) / q).ln());
        }
    }
    let (p0, decay) = match xs.len() {
        0 => (1e-6, 1.0),
        1 => {
            let d = 1.0;
            ((zs[0] + d * xs[0]).exp(), d)
        }
        _ => {
            let line =
                regression::weighted_line(&xs, &zs, &vec![1.0; xs.len()]).expect("distinct gaps");
            (line.intercept.exp(), -line.slope)
        }
    };
    Ok(InitialGuess {
        q,
        p0: p0.clamp(1e-6, 0.5),
        decay: decay.clamp(0.01, 10.0),
        tail,
    })
}

const MODEL_WEIGHT_PASSES: usize = 3;

/// Simplex descent with the configured restarts and a final polish.
fn descend(
    data: &BinData,
    space: &Space,
    x_start: &[f64],
    options: &FitOptions,
) -> (NmOutcome, usize, bool) {
    let mode = options.mode;
    let objective = |x: &[f64]| match space.decode(x) {
        Some(model) => data.objective(&model, mode),
        None => f64::INFINITY,
    };
    let nm = NmOptions {
        max_evals: options.max_evals,
        f_tol: options.f_tol,
        x_tol: options.x_tol,
    };
    let step = [0.3, 0.5, 0.5];
    let mut best = nelder_mead(objective, x_start, &step, &space.lo, &space.hi, nm);
    let mut evaluations = best.evals;
    const SIGNS: [[f64; 3]; 3] = [[1.0, -1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, 1.0, -1.0]];
    for r in 0..options.restarts {
        let signs = SIGNS[r % SIGNS.len()];
        let shrink = 0.5f64.powi((r / SIGNS.len()) as i32 + 1);
        let perturbed: Vec<f64> = (0..3)
            .map(|i| best.x[i] + signs[i] * step[i] * shrink)
            .collect();
        let run = nelder_mead(objective, &perturbed, &step, &space.lo, &space.hi, nm);
        evaluations += run.evals;
        if run.f < best.f {
            best = run;
        }
    }
    let polish_step = step.map(|s| s * 0.05);
    let polish = nelder_mead(objective, &best.x, &polish_step, &space.lo, &space.hi, nm);
    evaluations += polish.evals;
    let converged = polish.converged;
    if polish.f <= best.f {
        best = polish;
    }

    (best, evaluations, converged)
}

pub fn fit_model(
    hist: &IntervalHistogram,
    gate_period_s: f64,
    options: &FitOptions,
) -> Result<FitResult> {
    fit_model_from(hist, gate_period_s, options, None)
}

/// Like [`fit_model`], starting the descent from `start` instead of the
/// tail-line seed.
pub fn fit_model_from(
    hist: &IntervalHistogram,
    gate_period_s: f64,
    options: &FitOptions,
    start: Option<&FitResult>,
) -> Result<FitResult> {
    options.validate(hist)?;
    if !(gate_period_s.is_finite() && gate_period_s > 0.0) {
        return Err(FitError::InvalidOptions(format!(
            "gate period must be positive, got {gate_period_s}"
        )));
    }
    let mut data = BinData::collect(hist, options);
    if data.len() < 4 {
        return Err(FitError::InsufficientStatistics {
            needed: 4,
            got: data.len(),
            what: "populated bins",
        });
    }
    let space = Space::new(options.pin);
    let x_start = match start {
        Some(s) => space.encode(s.one_minus_q_hat, s.p0_hat, s.decay_hat),
        None => {
            let g = initial_guess(hist, options)?;
            space.encode(1.0 - g.q, g.p0, g.decay)
        }
    };

    let mode = options.mode;
    let (mut best, mut evaluations, mut converged) = descend(&data, &space, &x_start, options);
    if options.weighting == Weighting::ModelVariance {
        let total = hist.total() as f64;
        for _ in 0..MODEL_WEIGHT_PASSES {
            let Some(model) = space.decode(&best.x) else {
                break;
            };
            let Some(fitted) = data.model_log10(&model, mode) else {
                break;
            };
            data.reweight(&fitted, total);
            let (run, evals, conv) = descend(&data, &space, &best.x, options);
            evaluations += evals;
            converged = conv;
            best = run;
        }
    }

    let model = space
        .decode(&best.x)
        .ok_or_else(|| FitError::InvalidOptions("search box excludes all valid models".into()))?;
    let fitted = data
        .model_log10(&model, mode)
        .ok_or(FitError::Model(ModelError::NonNormalizable))?;
    let residuals = data
        .m
        .iter()
        .enumerate()
        .map(|(i, &m)| BinResidual {
            m,
            count: data.count[i],
            observed_log10: data.y[i],
            model_log10: fitted[i],
            weight: data.w[i],
        })
        .collect();
    let mut result = FitResult {
        q_hat: model.q(),
        one_minus_q_hat: model.one_minus_q(),
        p0_hat: model.p0(),
        decay_hat: model.decay(),
        gate_period_s,
        tau_s: gate_period_s / model.decay(),
        p_total_hat: model.total_afterpulse(),
        decoupled: space.decoupled(&model),
        r_squared: data.r_squared(&fitted),
        residuals,
        objective: best.f,
        evaluations,
        converged,
        at_bound: space.bound_hits(&best.x),
        std_errors: None,
        mode,
    };
    if !converged {
        return Err(FitError::NotConverged(Box::new(result)));
    }
    if let Some(b) = options.bootstrap {
        result.std_errors = bootstrap(hist, gate_period_s, options, &result, b);
    }
    Ok(result)
}

/// Coefficient of determination of `result` on `hist`'s included `log10`
/// bins, using the option's weights. `None` when the data have no spread.
pub fn r_squared(
    hist: &IntervalHistogram,
    result: &FitResult,
    options: &FitOptions,
) -> Option<f64> {
    let mut data = BinData::collect(hist, options);
    if data.len() == 0 {
        return None;
    }
    let fitted = data.model_log10(&result.model(), options.mode)?;
    if options.weighting == Weighting::ModelVariance {
        data.reweight(&fitted, hist.total() as f64);
    }
    data.r_squared(&fitted)
}

/// Multinomial resample of a histogram: the same as drawing its intervals
/// with replacement.
pub fn resample_histogram<R: Rng>(hist: &IntervalHistogram, rng: &mut R) -> IntervalHistogram {
    let mut remaining_draws = hist.total();
    let mut remaining_mass = hist.total();
    let mut counts = Vec::with_capacity(hist.counts().len());
    for &c in hist.counts() {
        let k = if remaining_draws == 0 || c == 0 {
            0
        } else if c == remaining_mass {
            remaining_draws
        } else {
            let p = c as f64 / remaining_mass as f64;
            Binomial::new(remaining_draws, p)
                .expect("probability in [0, 1]")
                .sample(rng)
        };
        counts.push(k);
        remaining_draws -= k;
        remaining_mass -= c;
    }
    IntervalHistogram::from_counts(counts, remaining_draws).expect("non-empty range")
}

fn bootstrap(
    hist: &IntervalHistogram,
    gate_period_s: f64,
    options: &FitOptions,
    base: &FitResult,
    b: Bootstrap,
) -> Option<StdErrors> {
    let mut inner = options.clone();
    inner.bootstrap = None;
    let fits: Vec<[f64; 5]> = (0..b.resamples)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = sim_rng(b.seed, i as u64);
            let h = resample_histogram(hist, &mut rng);
            let r = fit_model_from(&h, gate_period_s, &inner, Some(base)).ok()?;
            let mu_eta = r.decoupled.mu_eta().unwrap_or(f64::NAN);
            Some([r.q_hat, r.p0_hat, r.decay_hat, r.p_total_hat, mu_eta])
        })
        .collect();
    if fits.len() < 2 {
        return None;
    }
    let sd = |k: usize| {
        let n = fits.len() as f64;
        let mean = fits.iter().map(|f| f[k]).sum::<f64>() / n;
        (fits.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let mu_eta = match base.decoupled {
        Decoupled::MuEta { .. } => Some(sd(4)),
        _ => None,
    };
    Some(StdErrors {
        q: sd(0),
        p0: sd(1),
        decay: sd(2),
        p_total: sd(3),
        mu_eta,
        resamples_used: fits.len(),
    })
}
