//! Characterization reports, plot tables and the simulator's truth sidecar.
//!
//! Reports are TOML documents written by hand so that every number carries
//! 17 significant digits and the key order is fixed.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::events::EventKind;
use super::{CliError, Result, RunConfig, MIN_INTERVALS, TOOL_VERSION, WARN_INTERVALS};
use crate::fit::{
    area_ratio_afterpulse_with, fit_model, AreaRatio, Decoupled, FitResult, Pin, Weighting,
};
use crate::intervals::IntervalHistogram;
use crate::model::PmfMode;

pub const SCHEMA_VERSION: u32 = 1;
const REPORT_SCHEMA: &str = "spadchar-report";
const TRUTH_SCHEMA: &str = "spadchar-truth";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.16e}")
    }
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Default)]
pub(crate) struct TomlOut {
    pub text: String,
}

impl TomlOut {
    pub fn table(&mut self, name: &str) {
        if !self.text.is_empty() {
            self.text.push('\n');
        }
        let _ = writeln!(self.text, "[{name}]");
    }

    pub fn array_table(&mut self, name: &str) {
        if !self.text.is_empty() {
            self.text.push('\n');
        }
        let _ = writeln!(self.text, "[[{name}]]");
    }

    pub fn raw(&mut self, key: &str, value: &str) {
        let _ = writeln!(self.text, "{key} = {value}");
    }

    pub fn num(&mut self, key: &str, x: f64) {
        self.raw(key, &fmt_num(x));
    }

    pub fn opt_num(&mut self, key: &str, x: Option<f64>) {
        if let Some(x) = x {
            self.num(key, x);
        }
    }

    pub fn int(&mut self, key: &str, n: u64) {
        self.raw(key, &n.to_string());
    }

    pub fn opt_int(&mut self, key: &str, n: Option<u64>) {
        if let Some(n) = n {
            self.int(key, n);
        }
    }

    pub fn str(&mut self, key: &str, s: &str) {
        self.raw(key, &quoted(s));
    }

    pub fn bool(&mut self, key: &str, b: bool) {
        self.raw(key, if b { "true" } else { "false" });
    }

    pub fn str_array(&mut self, key: &str, items: &[String]) {
        let body: Vec<String> = items.iter().map(|s| quoted(s)).collect();
        self.raw(key, &format!("[{}]", body.join(", ")));
    }
}

pub(crate) fn mode_name(mode: PmfMode) -> &'static str {
    match mode {
        PmfMode::ExactProduct => "exact",
        PmfMode::SecondOrder => "second-order",
    }
}

pub(crate) fn weighting_name(w: Weighting) -> &'static str {
    match w {
        Weighting::Uniform => "uniform",
        Weighting::InverseVariance => "inverse-variance",
        Weighting::ModelVariance => "model-variance",
    }
}

/// Where the histogram came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InputSummary {
    pub origin: String,
    /// Digest of the input file bytes.
    pub sha256: Option<String>,
    pub kind: Option<EventKind>,
    pub records: u64,
    pub rejects: u64,
    pub duplicates: u64,
    /// Seed recorded in a truth sidecar next to the input, if any.
    pub simulation_seed: Option<u64>,
}

/// Quantities computed from the fit and the known settings.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Derived {
    pub mu_effective: Option<f64>,
    pub mu_eta_hat: Option<f64>,
    pub p_dark_hat: Option<f64>,
    /// `μη̂ / μ` with `μ` per effective gate.
    pub eta_hat: Option<f64>,
    /// `μη̂ / η` from the nominal efficiency.
    pub mu_hat: Option<f64>,
}

impl Derived {
    fn compute(fit: &FitResult, cfg: &RunConfig) -> Self {
        let mu_effective = cfg.mu_effective();
        // only fitted values; pinned ones are echoed in the config
        let (mu_eta_hat, p_dark_hat) = match fit.decoupled {
            Decoupled::QOnly => (None, None),
            Decoupled::MuEta { mu_eta, .. } => (Some(mu_eta), None),
            Decoupled::PDark { p_dark, .. } => (None, Some(p_dark)),
        };
        Derived {
            mu_effective,
            mu_eta_hat,
            p_dark_hat,
            eta_hat: mu_eta_hat.zip(mu_effective).map(|(me, mu)| me / mu),
            mu_hat: mu_eta_hat.zip(cfg.eta_nominal).map(|(me, eta)| me / eta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub generated_at_unix_s: u64,
    pub input: InputSummary,
    pub config: RunConfig,
    pub histogram: IntervalHistogram,
    pub fit: FitResult,
    pub derived: Derived,
    pub area_ratio: Option<AreaRatio>,
    pub warnings: Vec<String>,
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Fits `hist` and assembles the report around it.
pub fn build_report(
    hist: IntervalHistogram,
    cfg: &RunConfig,
    input: InputSummary,
    mut warnings: Vec<String>,
) -> Result<Report> {
    cfg.validate()?;
    let n = hist.total();
    if n < MIN_INTERVALS {
        return Err(CliError::InsufficientData(format!(
            "{n} intervals; at least {MIN_INTERVALS} are needed for a fit"
        )));
    }
    if n < WARN_INTERVALS {
        warnings.push(format!(
            "only {n} intervals; estimates below {WARN_INTERVALS} intervals are noisy"
        ));
    }
    if hist.overflow() > 0 {
        warnings.push(format!(
            "{} intervals exceed m_max = {} and sit in the overflow bin",
            hist.overflow(),
            hist.m_max()
        ));
    }
    if input.duplicates > 0 {
        warnings.push(format!(
            "{} records repeated an already detected gate and were collapsed",
            input.duplicates
        ));
    }
    let fit = fit_model(&hist, cfg.gate_period_s(), &cfg.fit)?;
    if fit.at_bound.any() {
        warnings.push("fit ended on a search bound; check the fit range and pins".into());
    }
    if matches!(fit.decoupled, Decoupled::QOnly) && cfg.mu_known.is_some() {
        warnings.push("mu is known but no parameter is pinned; eta needs a pinned P_d".into());
    }
    let area_ratio = match area_ratio_afterpulse_with(&hist, cfg.area_knee, cfg.fit.bins.k_min) {
        Ok(a) => Some(a),
        Err(e) => {
            warnings.push(format!("area-ratio estimate unavailable: {e}"));
            None
        }
    };
    let derived = Derived::compute(&fit, cfg);
    Ok(Report {
        generated_at_unix_s: unix_now(),
        input,
        config: cfg.clone(),
        histogram: hist,
        fit,
        derived,
        area_ratio,
        warnings,
    })
}

impl Report {
    pub fn render(&self) -> String {
        let mut t = TomlOut::default();
        t.str("schema", REPORT_SCHEMA);
        t.int("schema_version", SCHEMA_VERSION as u64);
        t.str("tool_version", TOOL_VERSION);
        t.int("generated_at_unix_s", self.generated_at_unix_s);
        t.str_array("warnings", &self.warnings);

        let i = &self.input;
        t.table("input");
        t.str("origin", &i.origin);
        if let Some(d) = &i.sha256 {
            t.str("sha256", d);
        }
        if let Some(k) = i.kind {
            t.str("kind", &k.to_string());
        }
        t.int("records", i.records);
        t.int("rejects", i.rejects);
        t.int("duplicates", i.duplicates);
        t.opt_int("simulation_seed", i.simulation_seed);

        let c = &self.config;
        t.table("config");
        t.num("gate_frequency_hz", c.gate_frequency_hz);
        t.num("gate_period_s", c.gate_period_s());
        t.opt_num("mu_known", c.mu_known);
        t.opt_num("eta_nominal", c.eta_nominal);
        if let Some(w) = c.gate_widths {
            t.num("effective_gate_width_s", w.effective_s);
            t.num("nominal_gate_width_s", w.nominal_s);
        }
        t.int("m_max", c.m_max);
        t.num("phase_tolerance", c.phase_tolerance);
        t.opt_int("area_knee", c.area_knee);

        let f = &c.fit;
        t.table("config.fit");
        t.str("mode", mode_name(f.mode));
        t.str("weighting", weighting_name(f.weighting));
        t.int("min_count", f.bins.min_count);
        t.int("k_min", f.bins.k_min);
        t.opt_int("m_fit_max", f.m_fit_max);
        match f.pin {
            Pin::None => t.str("pin", "none"),
            Pin::PDark(v) => {
                t.str("pin", "p_dark");
                t.num("pin_value", v);
            }
            Pin::MuEta(v) => {
                t.str("pin", "mu_eta");
                t.num("pin_value", v);
            }
        }
        t.int("restarts", f.restarts as u64);
        t.int("max_evals", f.max_evals as u64);
        t.num("f_tol", f.f_tol);
        t.num("x_tol", f.x_tol);
        if let Some(b) = f.bootstrap {
            t.int("bootstrap_resamples", b.resamples as u64);
            t.int("bootstrap_seed", b.seed);
        }

        let h = &self.histogram;
        t.table("histogram");
        t.int("intervals", h.total());
        t.int("m_max", h.m_max());
        t.int("overflow", h.overflow());
        t.num("overflow_fraction", h.overflow_fraction());
        t.opt_num("mean_gap", h.mean_gap());
        let fit_end = self.fit.fit_range_end().unwrap_or(0);
        t.int("fit_range_end", fit_end);
        t.int("bins_used", self.fit.bins_used() as u64);
        t.int(
            "zero_bins_in_fit_range",
            h.zero_bins().take_while(|&m| m <= fit_end).count() as u64,
        );

        let r = &self.fit;
        t.table("fit");
        t.num("q_hat", r.q_hat);
        t.num("one_minus_q_hat", r.one_minus_q_hat);
        t.num("p0_hat", r.p0_hat);
        t.num("decay_hat", r.decay_hat);
        t.num("tau_s", r.tau_s);
        t.num("p_total_hat", r.p_total_hat);
        t.opt_num("r_squared", r.r_squared);
        t.num("objective", r.objective);
        t.int("evaluations", r.evaluations as u64);
        t.bool("converged", r.converged);
        t.bool("rate_at_bound", r.at_bound.rate);
        t.bool("p0_at_bound", r.at_bound.p0);
        t.bool("decay_at_bound", r.at_bound.decay);
        match r.decoupled {
            Decoupled::QOnly => t.str("free_rate", "q"),
            Decoupled::MuEta { mu_eta, .. } => {
                t.str("free_rate", "mu_eta");
                t.num("mu_eta_hat", mu_eta);
            }
            Decoupled::PDark { p_dark, .. } => {
                t.str("free_rate", "p_dark");
                t.num("p_dark_hat", p_dark);
            }
        }
        if let Some(se) = r.std_errors {
            t.table("fit.std_errors");
            t.num("q", se.q);
            t.num("p0", se.p0);
            t.num("decay", se.decay);
            t.num("p_total", se.p_total);
            t.opt_num("mu_eta", se.mu_eta);
            t.int("resamples_used", se.resamples_used as u64);
        }

        let d = &self.derived;
        t.table("derived");
        t.opt_num("mu_effective", d.mu_effective);
        t.opt_num("mu_eta_hat", d.mu_eta_hat);
        t.opt_num("p_dark_hat", d.p_dark_hat);
        t.opt_num("eta_hat", d.eta_hat);
        t.opt_num("mu_hat", d.mu_hat);

        if let Some(a) = &self.area_ratio {
            t.table("area_ratio");
            t.num("p_total", a.p_total);
            t.num("relative_gap", (a.p_total - r.p_total_hat) / r.p_total_hat);
            t.int("knee", a.tail.knee);
            t.int("m_end", a.tail.m_end);
            t.num("tail_log10_slope", a.tail.line.slope);
            t.num("tail_ratio", a.tail.ratio());
        }
        t.text
    }

    /// Short human-readable summary.
    pub fn render_text(&self) -> String {
        let r = &self.fit;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "intervals     {} (fit bins {}, range 1..={})",
            self.histogram.total(),
            r.bins_used(),
            r.fit_range_end().unwrap_or(0)
        );
        let _ = writeln!(s, "q             {:.8}", r.q_hat);
        let _ = writeln!(s, "1 - q         {:.6e}", r.one_minus_q_hat);
        if let Some(v) = self.derived.mu_eta_hat {
            let _ = writeln!(s, "mu*eta        {v:.6e}");
        }
        if let Some(v) = self.derived.p_dark_hat {
            let _ = writeln!(s, "P_d           {v:.6e}");
        }
        if let Some(v) = self.derived.eta_hat {
            let _ = writeln!(s, "eta           {v:.6}");
        }
        if let Some(v) = self.derived.mu_hat {
            let _ = writeln!(s, "mu            {v:.6}");
        }
        let _ = writeln!(s, "P_0           {:.6e}", r.p0_hat);
        let _ = writeln!(s, "tau           {:.6e} s", r.tau_s);
        let _ = writeln!(s, "P_T           {:.6}", r.p_total_hat);
        if let Some(a) = &self.area_ratio {
            let _ = writeln!(s, "P_T (area)    {:.6}", a.p_total);
        }
        if let Some(r2) = r.r_squared {
            let _ = writeln!(s, "R^2           {r2:.6}");
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    /// CSV of `m, count, empirical pmf, model pmf, log10 residual` over the
    /// fit range; the residual is empty for bins left out of the fit.
    pub fn plot_table(&self) -> String {
        let mut s = String::from("m,count,empirical_pmf,model_pmf,residual_log10,in_fit\n");
        let end = self.fit.fit_range_end().unwrap_or(0);
        let model = self
            .fit
            .model()
            .pmf_table(end, self.fit.mode)
            .unwrap_or_default();
        let mut residuals = self.fit.residuals.iter().peekable();
        for m in 1..=end {
            let fitted = residuals.next_if(|r| r.m == m);
            let _ = writeln!(
                s,
                "{m},{},{},{},{},{}",
                self.histogram.count(m),
                fmt_num(self.histogram.empirical_pmf(m)),
                model
                    .get(m as usize - 1)
                    .map_or(String::new(), |&p| fmt_num(p)),
                fitted.map_or(String::new(), |r| fmt_num(r.residual())),
                u8::from(fitted.is_some())
            );
        }
        s
    }
}

/// The values a report contributes to a multi-run decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportSummary {
    /// Mean photon number per effective gate, when the run recorded one.
    pub mu: Option<f64>,
    pub q_hat: f64,
    pub p_total_hat: f64,
}

impl ReportSummary {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let bad = |message: String| CliError::Parse {
            origin: origin.to_string(),
            line: 1,
            message,
        };
        let doc: toml::Table = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        if doc.get("schema").and_then(|v| v.as_str()) != Some(REPORT_SCHEMA) {
            return Err(bad("not a characterization report".into()));
        }
        let num = |table: &str, key: &str| {
            doc.get(table)
                .and_then(|t| t.get(key))
                .and_then(|v| v.as_float())
        };
        let q_hat = num("fit", "q_hat").ok_or_else(|| bad("missing fit.q_hat".into()))?;
        let p_total_hat =
            num("fit", "p_total_hat").ok_or_else(|| bad("missing fit.p_total_hat".into()))?;
        Ok(Self {
            mu: num("derived", "mu_effective"),
            q_hat,
            p_total_hat,
        })
    }
}

/// Generating parameters of a simulated event file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub schema: String,
    pub schema_version: u32,
    pub mu: f64,
    pub eta: f64,
    pub p_dark: f64,
    pub p0: f64,
    pub tau_s: f64,
    pub gate_frequency_hz: f64,
    pub mu_eta: f64,
    pub q: f64,
    pub p_total: f64,
    pub seed: u64,
    pub stream: u64,
    pub memory: String,
    pub horizon_eps: f64,
    pub event_kind: String,
    pub jitter_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_detections: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_gates: Option<u64>,
    pub detections: u64,
    pub gates_elapsed: u64,
}

impl Truth {
    pub(crate) fn schema_tag() -> String {
        TRUTH_SCHEMA.to_string()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("truth record: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let truth: Truth = toml::from_str(&text).map_err(|e| CliError::Parse {
            origin: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?;
        if truth.schema != TRUTH_SCHEMA {
            return Err(CliError::Parse {
                origin: path.display().to_string(),
                line: 1,
                message: "not a truth record".into(),
            });
        }
        Ok(truth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::FitOptions;
    use crate::model::GateModel;

    fn analytic_hist(model: &GateModel, total: f64, m_max: u64) -> IntervalHistogram {
        let pmf = model.pmf_table(m_max, PmfMode::ExactProduct).unwrap();
        let counts: Vec<u64> = pmf.iter().map(|p| (p * total).round() as u64).collect();
        IntervalHistogram::from_counts(counts, 0).unwrap()
    }

    fn sample_report() -> Report {
        let model = GateModel::new(0.97, 0.04, 0.3).unwrap();
        let hist = analytic_hist(&model, 1e8, 2000);
        let mut cfg = RunConfig::new(1e6);
        cfg.mu_known = Some(0.2);
        cfg.fit = FitOptions {
            pin: Pin::PDark(1e-4),
            ..FitOptions::default()
        };
        build_report(hist, &cfg, InputSummary::default(), vec![]).unwrap()
    }

    #[test]
    fn numbers_carry_17_digits() {
        assert_eq!(fmt_num(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_num(-2.5), "-2.5000000000000000e0");
        assert_eq!(fmt_num(f64::NAN), "nan");
        let v: toml::Table = toml::from_str(&format!("x = {}", fmt_num(1.0 / 3.0))).unwrap();
        assert_eq!(v["x"].as_float(), Some(1.0 / 3.0));
    }

    #[test]
    fn report_is_valid_toml_and_parses_back() {
        let report = sample_report();
        let text = report.render();
        let doc: toml::Table = toml::from_str(&text).unwrap();
        assert_eq!(doc["schema_version"].as_integer(), Some(1));
        assert_eq!(doc["fit"]["q_hat"].as_float(), Some(report.fit.q_hat));
        let summary = ReportSummary::parse(&text, "r").unwrap();
        assert_eq!(summary.mu, Some(0.2));
        assert_eq!(summary.q_hat, report.fit.q_hat);
    }

    #[test]
    fn eta_is_mu_eta_over_mu() {
        let report = sample_report();
        let d = report.derived;
        assert_eq!(d.eta_hat, Some(d.mu_eta_hat.unwrap() / 0.2));
        assert!(d.p_dark_hat.is_none());
    }

    #[test]
    fn plot_table_covers_fit_range() {
        let report = sample_report();
        let table = report.plot_table();
        let rows: Vec<&str> = table.lines().collect();
        assert_eq!(rows.len() as u64, report.fit.fit_range_end().unwrap() + 1);
        let first: Vec<&str> = rows[1].split(',').collect();
        assert_eq!(first[0], "1");
        assert_eq!(first[5], "1");
    }

    #[test]
    fn too_few_intervals_is_an_error() {
        let hist = IntervalHistogram::from_counts(vec![500, 300, 100], 0).unwrap();
        let err = build_report(hist, &RunConfig::new(1e6), InputSummary::default(), vec![]);
        assert!(matches!(err, Err(CliError::InsufficientData(_))));
    }
}
