//! Analytic distribution of the number of gates between consecutive detections.
//!
//! A gated detector fires in gate `m` after a detection with probability
//! `1 - P_nc(m)`, where the no-count probability is
//!
//! ```text
//! P_nc(m) = exp(-μη) · (1 - P_d) · (1 - P_a(m)),    P_a(m) = P0 · exp(-m·T/τ)
//! ```
//!
//! The interval distribution is then
//!
//! ```text
//! P(m) = [1 - q·(1 - P_a(m))] · q^(m-1) · S(m),     q = exp(-μη)·(1 - P_d)
//! ```
//!
//! with `S(m) = ∏_{x<m} (1 - P_a(x))`. [`PmfMode::SecondOrder`] replaces the
//! survival product with its expansion `1 - α + β`, where `α` is the sum of the
//! afterpulse probabilities over the elapsed gates and `β` the sum over
//! unordered pairs of them.
//!
//! Internally the afterpulse decay is carried as the dimensionless per-gate
//! decay `d = T/τ`; [`GateModel`] holds the per-gate parameterization that
//! the fitter works with.

use thiserror::Error;

/// Below this per-gate decay the closed forms for `α` and `β` are replaced by
/// direct summation.
pub const DIRECT_SUM_DECAY: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("gate count must be at least 1")]
    ZeroGate,
    #[error("invalid parameter `{name}` = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("interval distribution is not normalizable: photon and dark-count probabilities are both zero")]
    NonNormalizable,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How the product of prior no-afterpulse factors is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PmfMode {
    /// Literal product `∏ (1 - P_a(x))`.
    ExactProduct,
    /// Second-order expansion `1 - α + β`.
    #[default]
    SecondOrder,
}

/// Physical detector and source parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams {
    /// Mean photon number per effective gate.
    pub mu: f64,
    /// Overall detection efficiency.
    pub eta: f64,
    /// Dark-count probability per gate.
    pub p_dark: f64,
    /// Afterpulse amplitude.
    pub p0: f64,
    /// Detrapping lifetime in seconds.
    pub tau_s: f64,
    /// Gate period in seconds.
    pub gate_period_s: f64,
}

impl DetectorParams {
    pub fn new(
        mu: f64,
        eta: f64,
        p_dark: f64,
        p0: f64,
        tau_s: f64,
        gate_period_s: f64,
    ) -> Result<Self> {
        let params = Self {
            mu,
            eta,
            p_dark,
            p0,
            tau_s,
            gate_period_s,
        };
        params.validate()?;
        Ok(params)
    }

    /// Builds parameters whose afterpulse amplitude yields the requested
    /// total afterpulse probability at the given per-gate decay.
    pub fn with_total_afterpulse(
        mu: f64,
        eta: f64,
        p_dark: f64,
        p_total: f64,
        tau_s: f64,
        gate_period_s: f64,
    ) -> Result<Self> {
        let decay = gate_period_s / tau_s;
        Self::new(
            mu,
            eta,
            p_dark,
            p_total * decay.exp_m1(),
            tau_s,
            gate_period_s,
        )
    }

    pub fn validate(&self) -> Result<()> {
        check(self.mu.is_finite() && self.mu >= 0.0, "mu", self.mu)?;
        check((0.0..=1.0).contains(&self.eta), "eta", self.eta)?;
        // P_d = 1 is allowed: it describes a detector that fires every gate.
        check((0.0..=1.0).contains(&self.p_dark), "p_dark", self.p_dark)?;
        check((0.0..1.0).contains(&self.p0), "p0", self.p0)?;
        check(
            self.tau_s.is_finite() && self.tau_s > 0.0,
            "tau_s",
            self.tau_s,
        )?;
        check(
            self.gate_period_s.is_finite() && self.gate_period_s > 0.0,
            "gate_period_s",
            self.gate_period_s,
        )?;
        Ok(())
    }

    pub fn mu_eta(&self) -> f64 {
        self.mu * self.eta
    }

    /// Per-gate afterpulse decay `T/τ`.
    pub fn decay_per_gate(&self) -> f64 {
        self.gate_period_s / self.tau_s
    }

    pub fn gate_model(&self) -> Result<GateModel> {
        self.validate()?;
        let log_q = -self.mu_eta() + (-self.p_dark).ln_1p();
        Ok(GateModel {
            q: log_q.exp(),
            one_minus_q: -log_q.exp_m1(),
            p0: self.p0,
            decay: self.decay_per_gate(),
        })
    }
}

fn check(ok: bool, name: &'static str, value: f64) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter { name, value })
    }
}

/// Per-gate parameterization: the geometric ratio `q`, the afterpulse
/// amplitude and the per-gate decay `d = T/τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateModel {
    q: f64,
    one_minus_q: f64,
    p0: f64,
    decay: f64,
}

impl GateModel {
    pub fn new(q: f64, p0: f64, decay: f64) -> Result<Self> {
        check((0.0..=1.0).contains(&q), "q", q)?;
        Self::from_miss(1.0 - q, p0, decay)
    }

    /// Builds the model from `1 - q`, which keeps full precision when the
    /// per-gate count probability is tiny.
    pub fn from_miss(one_minus_q: f64, p0: f64, decay: f64) -> Result<Self> {
        check((0.0..=1.0).contains(&one_minus_q), "1 - q", one_minus_q)?;
        check((0.0..1.0).contains(&p0), "p0", p0)?;
        check(decay.is_finite() && decay > 0.0, "decay", decay)?;
        Ok(Self {
            q: 1.0 - one_minus_q,
            one_minus_q,
            p0,
            decay,
        })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn one_minus_q(&self) -> f64 {
        self.one_minus_q
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    #[inline]
    fn pa(&self, m: u64) -> f64 {
        self.p0 * (-(m as f64) * self.decay).exp()
    }

    pub fn afterpulse(&self, m: u64) -> Result<f64> {
        nonzero(m)?;
        Ok(self.pa(m))
    }

    pub fn no_count(&self, m: u64) -> Result<f64> {
        nonzero(m)?;
        Ok(self.q * (1.0 - self.pa(m)))
    }

    /// Probability of a detection in a gate `m` gates after the previous one,
    /// or in any gate when there is no previous detection.
    pub fn count_prob(&self, gates_since_last: Option<u64>) -> Result<f64> {
        match gates_since_last {
            None => Ok(self.one_minus_q),
            Some(m) => {
                nonzero(m)?;
                Ok(self.one_minus_q + self.q * self.pa(m))
            }
        }
    }

    pub fn survival_exact(&self, m: u64) -> Result<f64> {
        nonzero(m)?;
        Ok(self.survival_exact_unchecked(m))
    }

    fn survival_exact_unchecked(&self, m: u64) -> f64 {
        // sum of remaining terms ≤ pa(x) / (1 - e^{-d})
        let tail_factor = 1.0 / -(-self.decay).exp_m1();
        let mut log_s = 0.0;
        for x in 1..m {
            let pa = self.pa(x);
            if pa * tail_factor < 1e-18 {
                break;
            }
            log_s += (-pa).ln_1p();
        }
        log_s.exp()
    }

    /// First-order term: `Σ_{x=1}^{m-1} P_a(x)`.
    pub fn alpha(&self, m: u64) -> Result<f64> {
        nonzero(m)?;
        Ok(self.alpha_unchecked(m))
    }

    fn alpha_unchecked(&self, m: u64) -> f64 {
        let n = m - 1;
        if n == 0 || self.p0 == 0.0 {
            return 0.0;
        }
        if self.decay < DIRECT_SUM_DECAY {
            return (1..=n).map(|x| self.pa(x)).sum();
        }
        let d = self.decay;
        self.p0 * (-d).exp() * (-(n as f64) * d).exp_m1() / (-d).exp_m1()
    }

    /// Second-order term: `Σ_{1≤x<y≤m-1} P_a(x)·P_a(y)`.
    ///
    /// The published geometric-progression form factors into
    /// `P0² r³ (r^k - 1)(r^(k+1) - 1) / ((r - 1)² (1 + r))` with `r = e^{-d}`
    /// and `k = m - 2`, which is evaluated with `expm1` throughout and has no
    /// subtractive cancellation.
    pub fn beta(&self, m: u64) -> Result<f64> {
        nonzero(m)?;
        Ok(self.beta_unchecked(m))
    }

    fn beta_unchecked(&self, m: u64) -> f64 {
        if m < 3 || self.p0 == 0.0 {
            return 0.0;
        }
        if self.decay < DIRECT_SUM_DECAY {
            let mut below = 0.0;
            let mut pairs = 0.0;
            for y in 1..m {
                let pa = self.pa(y);
                pairs += pa * below;
                below += pa;
            }
            return pairs;
        }
        let d = self.decay;
        let k = (m - 2) as f64;
        let r = (-d).exp();
        let em1 = (-d).exp_m1();
        self.p0 * self.p0 * r.powi(3) * (-k * d).exp_m1() * (-(k + 1.0) * d).exp_m1()
            / (em1 * em1 * (1.0 + r))
    }

    fn survival(&self, m: u64, mode: PmfMode) -> f64 {
        match mode {
            PmfMode::ExactProduct => self.survival_exact_unchecked(m),
            PmfMode::SecondOrder => 1.0 - self.alpha_unchecked(m) + self.beta_unchecked(m),
        }
    }

    fn ensure_normalizable(&self) -> Result<()> {
        if self.one_minus_q > 0.0 {
            Ok(())
        } else {
            Err(ModelError::NonNormalizable)
        }
    }

    pub fn pmf(&self, m: u64, mode: PmfMode) -> Result<f64> {
        nonzero(m)?;
        self.ensure_normalizable()?;
        let first = self.one_minus_q + self.q * self.pa(m);
        let geometric = ((m - 1) as f64 * self.ln_q()).exp();
        Ok(first * geometric * self.survival(m, mode))
    }

    fn ln_q(&self) -> f64 {
        (-self.one_minus_q).ln_1p()
    }

    /// `P(m)` for `m = 1..=m_max`, evaluated in a single pass.
    pub fn pmf_table(&self, m_max: u64, mode: PmfMode) -> Result<Vec<f64>> {
        Ok(self
            .ln_pmf_table(m_max, mode)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// Natural log of `P(m)` for `m = 1..=m_max`.
    ///
    /// In second-order mode the expansion may turn non-positive for large
    /// afterpulse sums; those entries are NaN.
    pub fn ln_pmf_table(&self, m_max: u64, mode: PmfMode) -> Result<Vec<f64>> {
        self.ensure_normalizable()?;
        let ln_q = self.ln_q();
        let mut out = Vec::with_capacity(m_max as usize);
        let mut ln_surv = 0.0;
        let mut pa_prev = 0.0_f64;
        for m in 1..=m_max {
            let pa = self.pa(m);
            let ln_s = match mode {
                PmfMode::ExactProduct => {
                    ln_surv += (-pa_prev).ln_1p();
                    ln_surv
                }
                PmfMode::SecondOrder => {
                    let s = 1.0 - self.alpha_unchecked(m) + self.beta_unchecked(m);
                    if s > 0.0 {
                        s.ln()
                    } else {
                        f64::NAN
                    }
                }
            };
            pa_prev = pa;
            let first = self.one_minus_q + self.q * pa;
            out.push(first.ln() + (m - 1) as f64 * ln_q + ln_s);
        }
        Ok(out)
    }

    /// `P_T = P0 / (e^{d} - 1)`.
    pub fn total_afterpulse(&self) -> f64 {
        self.p0 / self.decay.exp_m1()
    }
}

fn nonzero(m: u64) -> Result<()> {
    if m == 0 {
        Err(ModelError::ZeroGate)
    } else {
        Ok(())
    }
}

pub fn afterpulse_prob(params: &DetectorParams, m: u64) -> Result<f64> {
    params.gate_model()?.afterpulse(m)
}

pub fn no_count_prob(params: &DetectorParams, m: u64) -> Result<f64> {
    params.gate_model()?.no_count(m)
}

pub fn survival_product_exact(params: &DetectorParams, m: u64) -> Result<f64> {
    params.gate_model()?.survival_exact(m)
}

pub fn alpha(params: &DetectorParams, m: u64) -> Result<f64> {
    params.gate_model()?.alpha(m)
}

pub fn beta(params: &DetectorParams, m: u64) -> Result<f64> {
    params.gate_model()?.beta(m)
}

pub fn interval_pmf(params: &DetectorParams, m: u64, mode: PmfMode) -> Result<f64> {
    params.gate_model()?.pmf(m, mode)
}

pub fn total_afterpulse(params: &DetectorParams) -> Result<f64> {
    Ok(params.gate_model()?.total_afterpulse())
}

/// Geometric tail ratio `q = exp(-μη)·(1 - P_d)`.
pub fn geometric_slope(params: &DetectorParams) -> Result<f64> {
    Ok(params.gate_model()?.q())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn params(mu_eta: f64, p_dark: f64, p0: f64, decay: f64) -> DetectorParams {
        DetectorParams::new(mu_eta, 1.0, p_dark, p0, 1.0, decay).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn afterpulse_examples() {
        assert_eq!(
            afterpulse_prob(&params(0.01, 0.0, 0.0, 0.3), 7).unwrap(),
            0.0
        );
        let half = afterpulse_prob(&params(0.01, 0.0, 0.05, LN2), 1).unwrap();
        assert!((half - 0.025).abs() < 1e-16);
        let v = afterpulse_prob(&params(0.01, 0.0, 0.04, 1.0), 1).unwrap();
        assert!(rel(v, 0.014_715_177_646_857_693) < 1e-15);
        assert_eq!(
            afterpulse_prob(&params(0.01, 0.0, 0.04, 1.0), 0),
            Err(ModelError::ZeroGate)
        );
    }

    #[test]
    fn afterpulse_strictly_decreasing() {
        let p = params(0.01, 0.0, 0.08, 0.2);
        let values: Vec<f64> = (1..50).map(|m| afterpulse_prob(&p, m).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]));
        assert!(values[0] < 0.08);
    }

    #[test]
    fn no_count_examples() {
        assert_eq!(no_count_prob(&params(0.0, 0.0, 0.0, 1.0), 3).unwrap(), 1.0);
        assert_eq!(no_count_prob(&params(0.0, 1.0, 0.1, 1.0), 3).unwrap(), 0.0);
        let p = DetectorParams::new(0.08, 0.15, 0.0, 0.0, 1.0, 1.0).unwrap();
        let v = no_count_prob(&p, 4).unwrap();
        assert!(rel(v, 0.988_071_712_861_930_5) < 1e-15);
    }

    #[test]
    fn survival_examples() {
        let p = params(0.01, 0.0, 0.1, 0.2);
        assert_eq!(survival_product_exact(&p, 1).unwrap(), 1.0);
        let two = survival_product_exact(&p, 2).unwrap();
        assert!(rel(two, 1.0 - 0.1 * (-0.2f64).exp()) < 1e-15);
        let fifty = survival_product_exact(&p, 50).unwrap();
        assert!(rel(fifty, 0.629_875_038_235_703_9) < 1e-13);
    }

    #[test]
    fn alpha_beta_examples() {
        let p = params(0.01, 0.0, 0.05, 0.3);
        assert_eq!(alpha(&p, 1).unwrap(), 0.0);
        assert!(rel(alpha(&p, 2).unwrap(), 0.05 * (-0.3f64).exp()) < 1e-15);
        assert!(rel(alpha(&p, 20).unwrap(), 0.142_436_607_705_812_33) < 1e-13);
        assert_eq!(beta(&p, 1).unwrap(), 0.0);
        assert_eq!(beta(&p, 2).unwrap(), 0.0);
        assert!(rel(beta(&p, 3).unwrap(), 0.05 * 0.05 * (-0.9f64).exp()) < 1e-14);
        assert!(rel(beta(&p, 20).unwrap(), 0.008_623_649_110_722_54) < 1e-13);
    }

    #[test]
    fn tiny_decay_uses_direct_sums() {
        let m = GateModel::new(0.99, 0.01, 1e-7).unwrap();
        let a = m.alpha(10).unwrap();
        assert!(rel(a, 9.0 * 0.01) < 1e-5);
        let b = m.beta(10).unwrap();
        assert!(rel(b, 36.0 * 1e-4) < 1e-5);
    }

    #[test]
    fn pmf_examples() {
        let no_ap = GateModel::new(0.9, 0.0, 1.0).unwrap();
        for mode in [PmfMode::ExactProduct, PmfMode::SecondOrder] {
            assert!((no_ap.pmf(1, mode).unwrap() - 0.1).abs() < 1e-15);
        }
        let g = GateModel::new(0.95, 0.07, 0.4).unwrap();
        let expected = 1.0 - 0.95 * (1.0 - 0.07 * (-0.4f64).exp());
        for mode in [PmfMode::ExactProduct, PmfMode::SecondOrder] {
            assert!(rel(g.pmf(1, mode).unwrap(), expected) < 1e-14);
        }
        let p = DetectorParams::new(0.012, 1.0, 2e-4, 0.02, 4.0, 1.0).unwrap();
        let v = interval_pmf(&p, 5, PmfMode::ExactProduct).unwrap();
        assert!(rel(v, 0.016_197_551_379_720_154) < 1e-13);
    }

    #[test]
    fn pmf_matches_no_count_chain() {
        let p = DetectorParams::new(0.012, 1.0, 2e-4, 0.02, 4.0, 1.0).unwrap();
        for m in 1..40 {
            let mut chain = 1.0 - no_count_prob(&p, m).unwrap();
            for x in 1..m {
                chain *= no_count_prob(&p, x).unwrap();
            }
            let v = interval_pmf(&p, m, PmfMode::ExactProduct).unwrap();
            assert!(rel(v, chain) < 1e-12, "m={m}");
        }
    }

    #[test]
    fn non_normalizable_rejected() {
        let p = params(0.0, 0.0, 0.2, 0.5);
        assert_eq!(
            interval_pmf(&p, 1, PmfMode::SecondOrder),
            Err(ModelError::NonNormalizable)
        );
    }

    #[test]
    fn total_afterpulse_examples() {
        assert_eq!(total_afterpulse(&params(0.01, 0.0, 0.0, 0.3)).unwrap(), 0.0);
        assert!(
            rel(
                total_afterpulse(&params(0.01, 0.0, 0.05, LN2)).unwrap(),
                0.05
            ) < 1e-15
        );
        let v = total_afterpulse(&params(0.01, 0.0, 0.02, 0.1)).unwrap();
        assert!(rel(v, 0.190_166_638_895_500_99) < 1e-14);
    }

    #[test]
    fn geometric_slope_examples() {
        assert_eq!(geometric_slope(&params(0.0, 0.0, 0.0, 1.0)).unwrap(), 1.0);
        assert_eq!(geometric_slope(&params(0.0, 0.25, 0.0, 1.0)).unwrap(), 0.75);
        let p = DetectorParams::new(0.16, 0.15, 2e-4, 0.0, 1.0, 1.0).unwrap();
        assert!(rel(geometric_slope(&p).unwrap(), 0.976_090_452_615_957_7) < 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(DetectorParams::new(0.1, 1.2, 0.0, 0.0, 1.0, 1.0).is_err());
        assert!(DetectorParams::new(0.1, 0.5, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(DetectorParams::new(0.1, 0.5, 0.0, 0.1, 0.0, 1.0).is_err());
        assert!(DetectorParams::new(-0.1, 0.5, 0.0, 0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn table_matches_pointwise() {
        let g = GateModel::new(0.97, 0.09, 0.15).unwrap();
        for mode in [PmfMode::ExactProduct, PmfMode::SecondOrder] {
            let table = g.pmf_table(200, mode).unwrap();
            for (i, v) in table.iter().enumerate() {
                let direct = g.pmf(i as u64 + 1, mode).unwrap();
                assert!(rel(*v, direct) < 1e-12, "{mode:?} m={}", i + 1);
            }
        }
    }
}
