//! Event files: a header line naming the record kind, then one detection per
//! line as a gate index or a timestamp in seconds.
//!
//! ```text
//! # spadchar-events v1 gate
//! 17
//! 42
//! ```
//!
//! Blank lines and further `#` lines are ignored.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use super::{CliError, Result};
use crate::simulate::EventStream;

const HEADER_PREFIX: &str = "# spadchar-events v1";

pub const DEFAULT_PHASE_TOLERANCE: f64 = 0.25;
/// Reject fraction above which timestamp conversion aborts.
pub const MAX_REJECT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Gate,
    Timestamp,
}

impl EventKind {
    fn tag(self) -> &'static str {
        match self {
            EventKind::Gate => "gate",
            EventKind::Timestamp => "timestamp_s",
        }
    }

    pub fn header(self) -> String {
        format!("{HEADER_PREFIX} {}", self.tag())
    }
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventRecord {
    Gate(u64),
    Timestamp(f64),
}

/// Streaming parser; checks ordering as it goes and stops at the first error.
pub struct EventReader<R> {
    lines: io::Lines<R>,
    kind: EventKind,
    origin: String,
    line: usize,
    last: Option<EventRecord>,
    failed: bool,
}

impl<R: BufRead> EventReader<R> {
    /// Reads the header. `origin` names the source in diagnostics.
    pub fn new(reader: R, origin: &str) -> Result<Self> {
        let mut lines = reader.lines();
        let mut line = 0;
        let parse_err = |line: usize, message: String| CliError::Parse {
            origin: origin.to_string(),
            line,
            message,
        };
        let header = loop {
            line += 1;
            match lines.next() {
                None => return Err(parse_err(line, "missing event file header".into())),
                Some(Err(e)) => return Err(CliError::io(Path::new(origin), e)),
                Some(Ok(text)) if text.trim().is_empty() => continue,
                Some(Ok(text)) => break text,
            }
        };
        let tag = header
            .trim()
            .strip_prefix(HEADER_PREFIX)
            .map(str::trim)
            .ok_or_else(|| {
                parse_err(
                    line,
                    format!("expected header `{HEADER_PREFIX} gate|timestamp_s`"),
                )
            })?;
        let kind = match tag {
            "gate" => EventKind::Gate,
            "timestamp_s" => EventKind::Timestamp,
            other => {
                return Err(parse_err(
                    line,
                    format!("unknown record kind `{other}`; expected gate or timestamp_s"),
                ))
            }
        };
        Ok(Self {
            lines,
            kind,
            origin: origin.to_string(),
            line,
            last: None,
            failed: false,
        })
    }

    pub fn kind(&self) -> EventKind {
        self.kind
    }

    fn error(&mut self, message: String) -> CliError {
        self.failed = true;
        CliError::Parse {
            origin: self.origin.clone(),
            line: self.line,
            message,
        }
    }

    fn parse(&mut self, text: &str) -> Result<EventRecord> {
        let record = match self.kind {
            EventKind::Gate => {
                let g: u64 = text
                    .parse()
                    .map_err(|_| self.error(format!("`{text}` is not a gate index")))?;
                if g == 0 {
                    return Err(self.error("gate indices start at 1".into()));
                }
                if let Some(EventRecord::Gate(prev)) = self.last {
                    if g < prev {
                        return Err(self.error(format!("gate {g} precedes gate {prev}")));
                    }
                }
                EventRecord::Gate(g)
            }
            EventKind::Timestamp => {
                let t: f64 = text
                    .parse()
                    .map_err(|_| self.error(format!("`{text}` is not a timestamp")))?;
                if !t.is_finite() {
                    return Err(self.error(format!("timestamp `{text}` is not finite")));
                }
                if let Some(EventRecord::Timestamp(prev)) = self.last {
                    if t < prev {
                        return Err(self.error(format!("timestamp {t} precedes {prev}")));
                    }
                }
                EventRecord::Timestamp(t)
            }
        };
        self.last = Some(record);
        Ok(record)
    }
}

impl<R: BufRead> Iterator for EventReader<R> {
    type Item = Result<EventRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(CliError::io(Path::new(&self.origin), e)));
                }
            };
            self.line += 1;
            let text = text.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            return Some(self.parse(text));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventRecords {
    Gates(Vec<u64>),
    Timestamps(Vec<f64>),
}

impl EventRecords {
    pub fn len(&self) -> usize {
        match self {
            EventRecords::Gates(g) => g.len(),
            EventRecords::Timestamps(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> EventKind {
        match self {
            EventRecords::Gates(_) => EventKind::Gate,
            EventRecords::Timestamps(_) => EventKind::Timestamp,
        }
    }
}

fn collect<R: BufRead>(reader: EventReader<R>) -> Result<EventRecords> {
    let kind = reader.kind();
    let mut gates = Vec::new();
    let mut times = Vec::new();
    for record in reader {
        match record? {
            EventRecord::Gate(g) => gates.push(g),
            EventRecord::Timestamp(t) => times.push(t),
        }
    }
    Ok(match kind {
        EventKind::Gate => EventRecords::Gates(gates),
        EventKind::Timestamp => EventRecords::Timestamps(times),
    })
}

pub fn parse_events(text: &str, origin: &str) -> Result<EventRecords> {
    collect(EventReader::new(text.as_bytes(), origin)?)
}

pub fn read_events(path: &Path) -> Result<EventRecords> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    collect(EventReader::new(
        BufReader::new(file),
        &path.display().to_string(),
    )?)
}

pub fn write_gate_events<W: Write>(mut w: W, gates: &[u64]) -> io::Result<()> {
    writeln!(w, "{}", EventKind::Gate.header())?;
    for g in gates {
        writeln!(w, "{g}")?;
    }
    w.flush()
}

/// Timestamps are written in shortest round-trip form.
pub fn write_timestamp_events<W: Write>(mut w: W, times_s: &[f64]) -> io::Result<()> {
    writeln!(w, "{}", EventKind::Timestamp.header())?;
    for t in times_s {
        writeln!(w, "{t:e}")?;
    }
    w.flush()
}

/// Incremental conversion of ordered records to strictly increasing gates.
#[derive(Debug, Clone)]
pub struct GateMapper {
    frequency_hz: f64,
    tolerance: f64,
    last: Option<u64>,
    pub records: u64,
    pub rejects: u64,
    pub duplicates: u64,
}

impl GateMapper {
    pub fn new(frequency_hz: f64, tolerance: f64) -> Result<Self> {
        if !(frequency_hz.is_finite() && frequency_hz > 0.0) {
            return Err(CliError::Config(format!(
                "gate frequency must be positive, got {frequency_hz}"
            )));
        }
        if !(tolerance > 0.0 && tolerance <= 0.5) {
            return Err(CliError::Config(format!(
                "phase tolerance must lie in (0, 0.5], got {tolerance}"
            )));
        }
        Ok(Self {
            frequency_hz,
            tolerance,
            last: None,
            records: 0,
            rejects: 0,
            duplicates: 0,
        })
    }

    fn admit(&mut self, gate: u64) -> Option<u64> {
        match self.last {
            Some(prev) if gate <= prev => {
                self.duplicates += 1;
                None
            }
            _ => {
                self.last = Some(gate);
                Some(gate)
            }
        }
    }

    /// Gate of a timestamp, or `None` for a reject or a repeat of the
    /// previous gate.
    pub fn map_timestamp(&mut self, t_s: f64) -> Option<u64> {
        self.records += 1;
        let x = t_s * self.frequency_hz;
        let nearest = x.round();
        if !((x - nearest).abs() <= self.tolerance && nearest >= 1.0) {
            self.rejects += 1;
            return None;
        }
        self.admit(nearest as u64)
    }

    pub fn map_gate(&mut self, gate: u64) -> Option<u64> {
        self.records += 1;
        if gate == 0 {
            self.rejects += 1;
            return None;
        }
        self.admit(gate)
    }

    pub fn map(&mut self, record: EventRecord) -> Option<u64> {
        match record {
            EventRecord::Gate(g) => self.map_gate(g),
            EventRecord::Timestamp(t) => self.map_timestamp(t),
        }
    }

    pub fn reject_fraction(&self) -> f64 {
        if self.records == 0 {
            0.0
        } else {
            self.rejects as f64 / self.records as f64
        }
    }

    pub fn check_rejects(&self) -> Result<()> {
        if self.reject_fraction() > MAX_REJECT_FRACTION {
            return Err(CliError::TooManyRejects {
                rejects: self.rejects,
                records: self.records,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateMapping {
    pub stream: EventStream,
    pub records: u64,
    pub rejects: u64,
    pub duplicates: u64,
}

/// Maps each timestamp to `round(t·f)` when it lies within `tolerance`
/// gate periods of that gate; everything else is a reject.
pub fn timestamps_to_gates(
    times_s: &[f64],
    frequency_hz: f64,
    tolerance: f64,
) -> Result<GateMapping> {
    let mut mapper = GateMapper::new(frequency_hz, tolerance)?;
    let mut gates = Vec::with_capacity(times_s.len());
    for (i, w) in times_s.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(CliError::Parse {
                origin: "timestamps".into(),
                line: i + 2,
                message: format!("timestamp {} precedes {}", w[1], w[0]),
            });
        }
    }
    gates.extend(times_s.iter().filter_map(|&t| mapper.map_timestamp(t)));
    mapper.check_rejects()?;
    Ok(GateMapping {
        stream: EventStream::from_gates(gates)?,
        records: mapper.records,
        rejects: mapper.rejects,
        duplicates: mapper.duplicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn microsecond_timestamps_map_to_gates() {
        let m = timestamps_to_gates(&[1.0e-6, 3.0e-6], 1e6, 0.25).unwrap();
        assert_eq!(m.stream.gates(), &[1, 3]);
        assert_eq!((m.rejects, m.duplicates), (0, 0));
    }

    #[test]
    fn off_phase_timestamp_rejected() {
        let mut mapper = GateMapper::new(1e6, 0.25).unwrap();
        assert_eq!(mapper.map_timestamp(1.4e-6), None);
        assert_eq!(mapper.rejects, 1);
        assert_eq!(mapper.map_timestamp(2.2e-6), Some(2));
    }

    #[test]
    fn duplicates_collapse() {
        let m = timestamps_to_gates(&[1.0e-6, 1.1e-6, 2.0e-6], 1e6, 0.25).unwrap();
        assert_eq!(m.stream.gates(), &[1, 2]);
        assert_eq!(m.duplicates, 1);
    }

    #[test]
    fn excessive_rejects_abort() {
        let mut times: Vec<f64> = (1..=99).map(|g| g as f64 * 1e-6).collect();
        times.push(99.5e-6);
        assert!(timestamps_to_gates(&times, 1e6, 0.25).is_ok());
        times.push(99.6e-6);
        assert!(matches!(
            timestamps_to_gates(&times, 1e6, 0.25),
            Err(CliError::TooManyRejects {
                rejects: 2,
                records: 101
            })
        ));
    }

    #[test]
    fn parses_both_kinds() {
        let gates = parse_events("# spadchar-events v1 gate\n3\n\n# note\n7\n", "g").unwrap();
        assert_eq!(gates, EventRecords::Gates(vec![3, 7]));
        let times = parse_events("# spadchar-events v1 timestamp_s\n1e-6\n2.5e-6\n", "t").unwrap();
        assert_eq!(times, EventRecords::Timestamps(vec![1e-6, 2.5e-6]));
    }

    #[test]
    fn non_monotone_input_names_the_line() {
        let err = parse_events("# spadchar-events v1 gate\n3\n7\n5\n", "f.txt").unwrap_err();
        match err {
            CliError::Parse { origin, line, .. } => {
                assert_eq!(origin, "f.txt");
                assert_eq!(line, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_events("# spadchar-events v1 timestamp_s\n2e-6\n1e-6\n", "t").unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 3, .. }));
    }

    #[test]
    fn malformed_files() {
        assert!(matches!(
            parse_events("", "e"),
            Err(CliError::Parse { line: 1, .. })
        ));
        assert!(parse_events("17\n", "e").is_err());
        assert!(parse_events("# spadchar-events v1 volts\n", "e").is_err());
        assert!(matches!(
            parse_events("# spadchar-events v1 gate\n0\n", "e"),
            Err(CliError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_events("# spadchar-events v1 gate\n1\nabc\n", "e"),
            Err(CliError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn written_files_parse_back() {
        let mut buf = Vec::new();
        write_gate_events(&mut buf, &[2, 5, 9]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            parse_events(&text, "w").unwrap(),
            EventRecords::Gates(vec![2, 5, 9])
        );
        let times = [1.0 / 3.0 * 1e-6, 0.1 + 2e-17];
        let mut buf = Vec::new();
        write_timestamp_events(&mut buf, &times).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            parse_events(&text, "w").unwrap(),
            EventRecords::Timestamps(times.to_vec())
        );
    }
}
