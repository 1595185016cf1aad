//! File formats, reports and the command implementations behind the
//! `spadchar` binary.

mod commands;
mod events;
mod monitor;
mod report;

use std::path::Path;

use thiserror::Error;

use crate::fit::{FitError, FitOptions};
use crate::intervals::{IntervalError, DEFAULT_M_MAX};
use crate::model::ModelError;
use crate::simulate::SimError;

pub use commands::{
    cmd_characterize, cmd_decompose, cmd_gate_width, cmd_simulate, load_gates, parse_delay_scan,
    truth_path, DecomposeInput, DecomposeRun, DecompositionReport, GateWidthReport, SimulateArgs,
    SimulateSummary,
};
pub use events::{
    parse_events, read_events, timestamps_to_gates, write_gate_events, write_timestamp_events,
    EventKind, EventReader, EventRecord, EventRecords, GateMapper, GateMapping,
    DEFAULT_PHASE_TOLERANCE, MAX_REJECT_FRACTION,
};
pub use monitor::{
    cmd_monitor, monitor_gates, run_monitor, series_csv_header, MonitorConfig, MonitorSample,
    MonitorSummary,
};
pub use report::{
    build_report, sha256_hex, Derived, InputSummary, Report, ReportSummary, Truth, SCHEMA_VERSION,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fewer intervals than this is an error.
pub const MIN_INTERVALS: u64 = 1_000;
/// Fewer intervals than this draws a warning.
pub const WARN_INTERVALS: u64 = 3_000;
/// Smallest window accepted by the monitor.
pub const MIN_WINDOW: usize = 1_000;

pub mod exit_code {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const PARSE: i32 = 3;
    pub const STATISTICS: i32 = 4;
    pub const CONVERGENCE: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{origin}:{line}: {message}")]
    Parse {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(
        "{rejects} of {records} timestamps fall outside the gate window; \
         check the gate frequency and phase"
    )]
    TooManyRejects { rejects: u64, records: u64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Interval(#[from] IntervalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use exit_code::*;
        match self {
            CliError::Io { .. } => IO,
            CliError::Parse { .. } | CliError::TooManyRejects { .. } => PARSE,
            CliError::Config(_) => USAGE,
            CliError::InsufficientData(_) => STATISTICS,
            CliError::Fit(e) => match e {
                FitError::InsufficientStatistics { .. }
                | FitError::InsufficientRuns(_)
                | FitError::DegenerateDesign => STATISTICS,
                FitError::NotConverged(_) => CONVERGENCE,
                FitError::InvalidProfile(_) => PARSE,
                FitError::InvalidOptions(_) | FitError::InvalidRun { .. } | FitError::Model(_) => {
                    USAGE
                }
            },
            CliError::Sim(_) | CliError::Interval(_) | CliError::Model(_) => USAGE,
        }
    }
}

/// Effective and nominal gate widths; their ratio rescales the configured
/// mean photon number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateWidths {
    pub effective_s: f64,
    pub nominal_s: f64,
}

impl GateWidths {
    pub fn correction(&self) -> f64 {
        self.effective_s / self.nominal_s
    }
}

/// Everything a characterization or monitoring run is configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gate_frequency_hz: f64,
    /// Mean photon number per nominal gate.
    pub mu_known: Option<f64>,
    pub eta_nominal: Option<f64>,
    pub gate_widths: Option<GateWidths>,
    pub fit: FitOptions,
    pub m_max: u64,
    /// Largest accepted distance of `t·f` from an integer, in gate periods.
    pub phase_tolerance: f64,
    /// Gaps skipped before the area-ratio tail line; `None` locates the knee.
    pub area_knee: Option<u64>,
    pub window: usize,
    /// New intervals between monitor refreshes; `None` means `window / 10`.
    pub refresh_every: Option<usize>,
}

impl RunConfig {
    pub fn new(gate_frequency_hz: f64) -> Self {
        Self {
            gate_frequency_hz,
            mu_known: None,
            eta_nominal: None,
            gate_widths: None,
            fit: FitOptions::default(),
            m_max: DEFAULT_M_MAX,
            phase_tolerance: DEFAULT_PHASE_TOLERANCE,
            area_knee: None,
            window: 30_000,
            refresh_every: None,
        }
    }

    pub fn gate_period_s(&self) -> f64 {
        1.0 / self.gate_frequency_hz
    }

    /// Mean photon number per effective gate.
    pub fn mu_effective(&self) -> Option<f64> {
        let mu = self.mu_known?;
        Some(match self.gate_widths {
            Some(w) => mu * w.correction(),
            None => mu,
        })
    }

    pub fn refresh_interval(&self) -> usize {
        self.refresh_every.unwrap_or(self.window / 10).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.gate_frequency_hz) {
            return bad(format!(
                "gate frequency must be positive, got {}",
                self.gate_frequency_hz
            ));
        }
        if let Some(mu) = self.mu_known {
            if !positive(mu) {
                return bad(format!("mu must be positive, got {mu}"));
            }
        }
        if let Some(eta) = self.eta_nominal {
            if !(positive(eta) && eta <= 1.0) {
                return bad(format!("eta must lie in (0, 1], got {eta}"));
            }
        }
        if let Some(w) = self.gate_widths {
            if !(positive(w.effective_s) && positive(w.nominal_s)) {
                return bad("gate widths must be positive".into());
            }
        }
        if !(self.phase_tolerance > 0.0 && self.phase_tolerance <= 0.5) {
            return bad(format!(
                "phase tolerance must lie in (0, 0.5], got {}",
                self.phase_tolerance
            ));
        }
        if self.m_max == 0 {
            return bad("m_max must be at least 1".into());
        }
        Ok(())
    }

    pub fn validate_monitor(&self) -> Result<()> {
        self.validate()?;
        if self.window < MIN_WINDOW {
            return Err(CliError::Config(format!(
                "monitor window must hold at least {MIN_WINDOW} intervals, got {}",
                self.window
            )));
        }
        if self.refresh_every == Some(0) {
            return Err(CliError::Config(
                "refresh interval must be at least 1".into(),
            ));
        }
        Ok(())
    }
}
