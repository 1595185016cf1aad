//! The `simulate`, `characterize`, `decompose` and `gate-width` commands.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::events::{
    write_gate_events, write_timestamp_events, EventKind, EventReader, GateMapper,
};
use super::report::{
    build_report, sha256_hex, unix_now, InputSummary, Report, ReportSummary, TomlOut, Truth,
    SCHEMA_VERSION,
};
use super::{CliError, Result, RunConfig, TOOL_VERSION};
use crate::fit::{
    decompose_efficiency, effective_gate_width, DecompositionResult, DelayScanProfile, Pin,
};
use crate::intervals::{build_histogram, extract_intervals};
use crate::simulate::{
    sim_rng, simulate_stream, AfterpulseMemory, EventStream, SimConfig, StopCondition,
};

/// Sidecar path for an event file: the file name with `.truth.toml` appended.
pub fn truth_path(events: &Path) -> PathBuf {
    let mut name = events.file_name().unwrap_or_default().to_os_string();
    name.push(".truth.toml");
    events.with_file_name(name)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateArgs {
    pub config: SimConfig,
    pub kind: EventKind,
    /// Timestamp jitter, uniform within `±jitter_fraction` gate periods.
    pub jitter_fraction: f64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub events_path: PathBuf,
    pub truth_path: PathBuf,
    pub truth: Truth,
}

/// Simulates a detection stream and writes it with its truth sidecar.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimulateSummary> {
    if !(0.0..0.5).contains(&args.jitter_fraction) {
        return Err(CliError::Config(format!(
            "jitter fraction must lie in [0, 0.5), got {}",
            args.jitter_fraction
        )));
    }
    let cfg = &args.config;
    let p = &cfg.params;
    let stream = simulate_stream(cfg)?;
    let model = p.gate_model()?;
    let frequency = 1.0 / p.gate_period_s;

    let mut w = create(&args.out)?;
    let written = match args.kind {
        EventKind::Gate => write_gate_events(&mut w, stream.gates()),
        EventKind::Timestamp => {
            // a stream distinct from the simulation's, so jitter never
            // perturbs the gate sequence
            let mut rng = sim_rng(cfg.seed, !cfg.stream);
            let times: Vec<f64> = stream
                .gates()
                .iter()
                .map(|&g| {
                    let u: f64 = rng.random_range(-1.0..=1.0);
                    (g as f64 + u * args.jitter_fraction) / frequency
                })
                .collect();
            write_timestamp_events(&mut w, &times)
        }
    };
    written.map_err(|e| CliError::io(&args.out, e))?;

    let (stop_detections, stop_gates) = match cfg.stop {
        StopCondition::Detections(n) => (Some(n), None),
        StopCondition::Gates(n) => (None, Some(n)),
    };
    let truth = Truth {
        schema: Truth::schema_tag(),
        schema_version: SCHEMA_VERSION,
        mu: p.mu,
        eta: p.eta,
        p_dark: p.p_dark,
        p0: p.p0,
        tau_s: p.tau_s,
        gate_frequency_hz: frequency,
        mu_eta: p.mu_eta(),
        q: model.q(),
        p_total: model.total_afterpulse(),
        seed: cfg.seed,
        stream: cfg.stream,
        memory: match cfg.memory {
            AfterpulseMemory::LastAvalancheOnly => "last-avalanche-only",
            AfterpulseMemory::Accumulating => "accumulating",
        }
        .into(),
        horizon_eps: cfg.horizon_eps,
        event_kind: args.kind.to_string(),
        jitter_fraction: args.jitter_fraction,
        stop_detections,
        stop_gates,
        detections: stream.len() as u64,
        gates_elapsed: stream.n_gates_simulated(),
    };
    let truth_file = truth_path(&args.out);
    let text = truth.to_toml()?;
    std::fs::write(&truth_file, text).map_err(|e| CliError::io(&truth_file, e))?;
    Ok(SimulateSummary {
        events_path: args.out.clone(),
        truth_path: truth_file,
        truth,
    })
}

/// Reads an event file and converts it to gates, applying the reject rule
/// to timestamp files.
pub fn load_gates(path: &Path, cfg: &RunConfig) -> Result<(EventStream, InputSummary)> {
    let bytes = read_bytes(path)?;
    let origin = path.display().to_string();
    let reader = EventReader::new(bytes.as_slice(), &origin)?;
    let kind = reader.kind();
    let mut mapper = GateMapper::new(cfg.gate_frequency_hz, cfg.phase_tolerance)?;
    let mut gates = Vec::new();
    for record in reader {
        if let Some(g) = mapper.map(record?) {
            gates.push(g);
        }
    }
    mapper.check_rejects()?;
    let simulation_seed = Truth::read(&truth_path(path)).ok().map(|t| t.seed);
    let input = InputSummary {
        origin,
        sha256: Some(sha256_hex(&bytes)),
        kind: Some(kind),
        records: mapper.records,
        rejects: mapper.rejects,
        duplicates: mapper.duplicates,
        simulation_seed,
    };
    Ok((EventStream::from_gates(gates)?, input))
}

/// Event file to report: gates, intervals, histogram, fit.
pub fn cmd_characterize(path: &Path, cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let (stream, input) = load_gates(path, cfg)?;
    if stream.len() < 2 {
        return Err(CliError::InsufficientData(format!(
            "{} detection(s) in {}; intervals need at least two",
            stream.len(),
            input.origin
        )));
    }
    let hist = build_histogram(&extract_intervals(&stream), cfg.m_max)?;
    build_report(hist, cfg, input, Vec::new())
}

/// A run entering the decomposition: a report, or an event file to be
/// characterized first. `mu` (per nominal gate) overrides a report's value
/// and is required for event files.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposeInput {
    pub path: PathBuf,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposeRun {
    pub origin: String,
    /// Per effective gate.
    pub mu: f64,
    pub q_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub generated_at_unix_s: u64,
    pub runs: Vec<DecomposeRun>,
    pub result: DecompositionResult,
}

/// Fits `ln q̂` against the known `μ` of several runs. `cfg` supplies the
/// gate frequency and fit options for event-file inputs, and the gate-width
/// correction applied to explicit `mu` values.
pub fn cmd_decompose(
    inputs: &[DecomposeInput],
    cfg: Option<&RunConfig>,
) -> Result<DecompositionReport> {
    let correction = cfg
        .and_then(|c| c.gate_widths)
        .map_or(1.0, |w| w.correction());
    let mut runs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let origin = input.path.display().to_string();
        let bytes = read_bytes(&input.path)?;
        let text = String::from_utf8_lossy(&bytes);
        let is_events = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .is_some_and(|l| l.trim_start().starts_with("# spadchar-events"));
        let (mu, q_hat) = if is_events {
            let cfg = cfg.ok_or_else(|| {
                CliError::Config(format!("{origin}: event files need a gate frequency"))
            })?;
            let mu = input.mu.ok_or_else(|| {
                CliError::Config(format!("{origin}: event files need a known mu"))
            })?;
            let mut run_cfg = cfg.clone();
            run_cfg.fit.pin = Pin::None;
            run_cfg.fit.bootstrap = None;
            run_cfg.mu_known = None;
            let report = cmd_characterize(&input.path, &run_cfg)?;
            (mu * correction, report.fit.q_hat)
        } else {
            let summary = ReportSummary::parse(&text, &origin)?;
            let mu = match input.mu {
                Some(mu) => mu * correction,
                None => summary.mu.ok_or_else(|| {
                    CliError::Config(format!("{origin}: report records no mu; pass one"))
                })?,
            };
            (mu, summary.q_hat)
        };
        runs.push(DecomposeRun { origin, mu, q_hat });
    }
    let pairs: Vec<(f64, f64)> = runs.iter().map(|r| (r.mu, r.q_hat)).collect();
    let result = decompose_efficiency(&pairs)?;
    Ok(DecompositionReport {
        generated_at_unix_s: unix_now(),
        runs,
        result,
    })
}

impl DecompositionReport {
    pub fn render(&self) -> String {
        let mut t = TomlOut::default();
        t.str("schema", "spadchar-decomposition");
        t.int("schema_version", SCHEMA_VERSION as u64);
        t.str("tool_version", TOOL_VERSION);
        t.int("generated_at_unix_s", self.generated_at_unix_s);
        let r = &self.result;
        t.table("decomposition");
        t.num("eta_hat", r.eta_hat);
        t.num("p_dark_hat", r.p_dark_hat);
        t.opt_num("eta_se", r.eta_se);
        t.opt_num("p_dark_se", r.p_dark_se);
        t.num("slope", r.slope);
        t.num("intercept", r.intercept);
        t.int("runs", r.runs as u64);
        for run in &self.runs {
            t.array_table("run");
            t.str("origin", &run.origin);
            t.num("mu", run.mu);
            t.num("q_hat", run.q_hat);
        }
        t.text
    }

    pub fn render_text(&self) -> String {
        let r = &self.result;
        let mut s = String::new();
        for run in &self.runs {
            let _ = writeln!(s, "mu {:<10.6} q {:.8}  {}", run.mu, run.q_hat, run.origin);
        }
        let se = |v: Option<f64>| v.map_or(String::new(), |v| format!(" +- {v:.3e}"));
        let _ = writeln!(s, "eta  {:.6}{}", r.eta_hat, se(r.eta_se));
        let _ = writeln!(s, "P_d  {:.6e}{}", r.p_dark_hat, se(r.p_dark_se));
        s
    }
}

/// `(delay_s, counts)` pairs, comma or whitespace separated, with an
/// optional header line and `#` comments.
pub fn parse_delay_scan(text: &str, origin: &str) -> Result<Vec<(f64, f64)>> {
    let mut samples = Vec::new();
    let mut seen_content = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        let first = !seen_content;
        seen_content = true;
        match parsed {
            Some(v) if v.len() == 2 => samples.push((v[0], v[1])),
            None if first => continue,
            _ => {
                return Err(CliError::Parse {
                    origin: origin.to_string(),
                    line: i + 1,
                    message: format!("expected `delay_s,counts`, got `{line}`"),
                })
            }
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateWidthReport {
    pub generated_at_unix_s: u64,
    pub origin: String,
    pub sha256: String,
    pub samples: usize,
    pub width_s: f64,
    pub nominal_s: Option<f64>,
}

impl GateWidthReport {
    /// Factor applied to a mean photon number quoted per nominal gate.
    pub fn mu_correction(&self) -> Option<f64> {
        self.nominal_s.map(|n| self.width_s / n)
    }

    pub fn render(&self) -> String {
        let mut t = TomlOut::default();
        t.str("schema", "spadchar-gate-width");
        t.int("schema_version", SCHEMA_VERSION as u64);
        t.str("tool_version", TOOL_VERSION);
        t.int("generated_at_unix_s", self.generated_at_unix_s);
        t.table("input");
        t.str("origin", &self.origin);
        t.str("sha256", &self.sha256);
        t.int("samples", self.samples as u64);
        t.table("gate_width");
        t.num("effective_width_s", self.width_s);
        t.opt_num("nominal_width_s", self.nominal_s);
        t.opt_num("mu_correction", self.mu_correction());
        t.text
    }

    pub fn render_text(&self) -> String {
        let mut s = format!("effective gate width {:.6e} s\n", self.width_s);
        if let (Some(n), Some(c)) = (self.nominal_s, self.mu_correction()) {
            let _ = writeln!(s, "nominal gate width   {n:.6e} s");
            let _ = writeln!(s, "mu correction        {c:.6}");
        }
        s
    }
}

pub fn cmd_gate_width(path: &Path, nominal_s: Option<f64>) -> Result<GateWidthReport> {
    if let Some(n) = nominal_s {
        if !(n.is_finite() && n > 0.0) {
            return Err(CliError::Config(format!(
                "nominal width must be positive, got {n}"
            )));
        }
    }
    let bytes = read_bytes(path)?;
    let origin = path.display().to_string();
    let samples = parse_delay_scan(&String::from_utf8_lossy(&bytes), &origin)?;
    let profile = DelayScanProfile::from_counts(&samples)?;
    Ok(GateWidthReport {
        generated_at_unix_s: unix_now(),
        origin,
        sha256: sha256_hex(&bytes),
        samples: samples.len(),
        width_s: effective_gate_width(&profile),
        nominal_s,
    })
}
