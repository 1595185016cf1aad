//! Real-time monitoring: ingestion keeps a sliding window of the latest
//! intervals and hands snapshots to a fitting thread, which emits one sample
//! per refresh in refresh order.

use std::fmt::Write as _;
use std::io::BufRead;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use super::events::{EventReader, GateMapper};
use super::report::{build_report, fmt_num, InputSummary, Report};
use super::{Result, RunConfig};
use crate::intervals::{IntervalHistogram, SlidingWindow};

/// Snapshots queued for fitting before ingestion waits.
const FIT_QUEUE: usize = 2;
/// Records read before the reject fraction is enforced.
const REJECT_CHECK_AFTER: u64 = 1_000;

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorConfig {
    pub run: RunConfig,
    /// Silence on the source longer than this emits a stale heartbeat.
    pub stall_timeout: Duration,
    /// Names the source in the emitted reports.
    pub origin: String,
}

impl MonitorConfig {
    pub fn new(run: RunConfig) -> Self {
        Self {
            run,
            stall_timeout: Duration::from_secs(5),
            origin: "monitor".into(),
        }
    }
}

/// One refresh or heartbeat.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorSample {
    /// Position in the emitted series, heartbeats included.
    pub sequence: u64,
    /// Intervals ingested when the snapshot was taken.
    pub intervals_seen: u64,
    pub window_len: usize,
    /// Set on heartbeats: the report, if any, is the previous one.
    pub stale: bool,
    pub report: Option<Report>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MonitorSummary {
    pub intervals: u64,
    pub refreshes: u64,
    pub heartbeats: u64,
    pub records: u64,
    pub rejects: u64,
    pub duplicates: u64,
}

enum Job {
    Fit {
        sequence: u64,
        intervals_seen: u64,
        window_len: usize,
        hist: IntervalHistogram,
    },
    Heartbeat {
        sequence: u64,
        intervals_seen: u64,
        window_len: usize,
    },
}

fn fit_worker<F: FnMut(MonitorSample)>(jobs: Receiver<Job>, cfg: &MonitorConfig, mut sink: F) {
    let mut last: Option<Report> = None;
    for job in jobs {
        let sample = match job {
            Job::Fit {
                sequence,
                intervals_seen,
                window_len,
                hist,
            } => {
                let input = InputSummary {
                    origin: cfg.origin.clone(),
                    records: intervals_seen,
                    ..InputSummary::default()
                };
                let (report, error) = match build_report(hist, &cfg.run, input, Vec::new()) {
                    Ok(r) => {
                        last = Some(r.clone());
                        (Some(r), None)
                    }
                    Err(e) => (None, Some(e.to_string())),
                };
                MonitorSample {
                    sequence,
                    intervals_seen,
                    window_len,
                    stale: false,
                    report,
                    error,
                }
            }
            Job::Heartbeat {
                sequence,
                intervals_seen,
                window_len,
            } => MonitorSample {
                sequence,
                intervals_seen,
                window_len,
                stale: true,
                report: last.clone(),
                error: None,
            },
        };
        sink(sample);
    }
}

/// Consumes strictly increasing gate indices from `source` until it closes.
///
/// The first refresh happens when the window first fills, then after every
/// `refresh_interval()` new intervals. Repeated or decreasing gates are
/// ignored.
pub fn run_monitor<F>(source: Receiver<u64>, cfg: &MonitorConfig, sink: F) -> Result<MonitorSummary>
where
    F: FnMut(MonitorSample) + Send,
{
    cfg.run.validate_monitor()?;
    let mut window = SlidingWindow::new(cfg.run.window, cfg.run.m_max)?;
    let refresh = cfg.run.refresh_interval();
    let (jobs, queue) = mpsc::sync_channel::<Job>(FIT_QUEUE);

    thread::scope(|s| {
        s.spawn(move || fit_worker(queue, cfg, sink));

        let mut summary = MonitorSummary::default();
        let mut sequence = 0u64;
        let mut last_gate: Option<u64> = None;
        let mut since_refresh = 0usize;
        let mut refreshed = false;
        loop {
            match source.recv_timeout(cfg.stall_timeout) {
                Ok(gate) => {
                    let Some(prev) = last_gate else {
                        last_gate = Some(gate);
                        continue;
                    };
                    if gate <= prev {
                        continue;
                    }
                    last_gate = Some(gate);
                    window.push(gate - prev)?;
                    summary.intervals += 1;
                    since_refresh += 1;
                    if window.is_full() && (!refreshed || since_refresh >= refresh) {
                        let job = Job::Fit {
                            sequence,
                            intervals_seen: summary.intervals,
                            window_len: window.len(),
                            hist: window.snapshot(),
                        };
                        if jobs.send(job).is_err() {
                            break;
                        }
                        sequence += 1;
                        summary.refreshes += 1;
                        since_refresh = 0;
                        refreshed = true;
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    let job = Job::Heartbeat {
                        sequence,
                        intervals_seen: summary.intervals,
                        window_len: window.len(),
                    };
                    if jobs.send(job).is_err() {
                        break;
                    }
                    sequence += 1;
                    summary.heartbeats += 1;
                }
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        drop(jobs);
        Ok(summary)
    })
}

/// Replays a gate sequence through the monitor and collects the samples.
pub fn monitor_gates(gates: &[u64], cfg: &MonitorConfig) -> Result<Vec<MonitorSample>> {
    let (tx, rx) = mpsc::channel();
    for &g in gates {
        tx.send(g).expect("receiver alive");
    }
    drop(tx);
    let mut samples = Vec::new();
    run_monitor(rx, cfg, |s| samples.push(s))?;
    Ok(samples)
}

/// Monitors an event stream read incrementally from `source`.
pub fn cmd_monitor<R, F>(source: R, cfg: &MonitorConfig, sink: F) -> Result<MonitorSummary>
where
    R: BufRead + Send,
    F: FnMut(MonitorSample) + Send,
{
    cfg.run.validate_monitor()?;
    let (tx, rx) = mpsc::channel();
    let run = &cfg.run;
    let origin = cfg.origin.as_str();
    thread::scope(|s| {
        let reader = s.spawn(move || -> Result<GateMapper> {
            let mut mapper = GateMapper::new(run.gate_frequency_hz, run.phase_tolerance)?;
            for record in EventReader::new(source, origin)? {
                if let Some(g) = mapper.map(record?) {
                    if tx.send(g).is_err() {
                        break;
                    }
                }
                if mapper.records >= REJECT_CHECK_AFTER {
                    mapper.check_rejects()?;
                }
            }
            Ok(mapper)
        });
        let summary = run_monitor(rx, cfg, sink);
        let mapper = reader.join().expect("reader thread panicked")?;
        let mut summary = summary?;
        summary.records = mapper.records;
        summary.rejects = mapper.rejects;
        summary.duplicates = mapper.duplicates;
        Ok(summary)
    })
}

pub fn series_csv_header() -> &'static str {
    "sequence,intervals_seen,window_len,stale,q_hat,one_minus_q_hat,p0_hat,tau_s,\
     p_total_hat,mu_eta_hat,p_dark_hat,eta_hat,r_squared,converged,error"
}

impl MonitorSample {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), fmt_num);
        let mut row = format!(
            "{},{},{},{}",
            self.sequence,
            self.intervals_seen,
            self.window_len,
            u8::from(self.stale)
        );
        match &self.report {
            Some(r) => {
                let f = &r.fit;
                let _ = write!(
                    row,
                    ",{},{},{},{},{},{},{},{},{},{}",
                    fmt_num(f.q_hat),
                    fmt_num(f.one_minus_q_hat),
                    fmt_num(f.p0_hat),
                    fmt_num(f.tau_s),
                    fmt_num(f.p_total_hat),
                    opt(r.derived.mu_eta_hat),
                    opt(r.derived.p_dark_hat),
                    opt(r.derived.eta_hat),
                    opt(f.r_squared),
                    u8::from(f.converged)
                );
            }
            None => row.push_str(",,,,,,,,,,"),
        }
        let error = self
            .error
            .as_deref()
            .unwrap_or("")
            .replace([',', '\n'], ";");
        let _ = write!(row, ",{error}");
        row
    }
}
