use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spadchar::cli::{
    cmd_characterize, cmd_decompose, cmd_gate_width, cmd_monitor, cmd_simulate, series_csv_header,
    CliError, DecomposeInput, EventKind, GateWidths, MonitorConfig, RunConfig, SimulateArgs,
};
use spadchar::fit::{BinPolicy, Bootstrap, FitOptions, Pin, Weighting};
use spadchar::intervals::DEFAULT_M_MAX;
use spadchar::model::{DetectorParams, PmfMode};
use spadchar::simulate::{AfterpulseMemory, SimConfig, StopCondition};

#[derive(Parser)]
#[command(
    name = "spadchar",
    version,
    about = "Characterize gated single-photon detectors from the gate counts between detections"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a detection stream and write it with a truth sidecar.
    Simulate(SimulateCmd),
    /// Fit an event file and report the detector parameters.
    Characterize(CharacterizeCmd),
    /// Refit a sliding window of a live or replayed event stream.
    Monitor(MonitorCmd),
    /// Separate efficiency and dark-count probability across runs at known mu.
    Decompose(DecomposeCmd),
    /// Effective gate width from a delay scan.
    GateWidth(GateWidthCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    SecondOrder,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Uniform,
    InverseVariance,
    ModelVariance,
}

#[derive(Clone, Copy, ValueEnum)]
enum Memory {
    Last,
    Accumulating,
}

#[derive(Clone, Copy, ValueEnum)]
enum EventFormat {
    Gate,
    Timestamp,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Text,
    Toml,
}

const SEED_MAX: u64 = i64::MAX as u64;

#[derive(Args)]
struct SimulateCmd {
    /// Mean photon number per gate.
    #[arg(long)]
    mu: f64,
    /// Overall detection efficiency.
    #[arg(long)]
    eta: f64,
    /// Dark-count probability per gate.
    #[arg(long, default_value_t = 0.0)]
    p_dark: f64,
    /// Afterpulse amplitude.
    #[arg(long, required_unless_present = "p_total", conflicts_with = "p_total")]
    p0: Option<f64>,
    /// Total afterpulse probability; sets the amplitude.
    #[arg(long)]
    p_total: Option<f64>,
    /// Detrapping lifetime in seconds.
    #[arg(long)]
    tau_s: f64,
    #[arg(long)]
    gate_freq_hz: f64,
    /// Stop after this many detections.
    #[arg(long, required_unless_present = "gates", conflicts_with = "gates")]
    detections: Option<u64>,
    /// Stop after this many gates.
    #[arg(long)]
    gates: Option<u64>,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(0..=SEED_MAX))]
    seed: u64,
    /// Independent random stream under the same seed.
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(0..=SEED_MAX))]
    stream: u64,
    #[arg(long, value_enum, default_value_t = Memory::Last)]
    memory: Memory,
    #[arg(long, value_enum, default_value_t = EventFormat::Gate)]
    event_format: EventFormat,
    /// Timestamp jitter as a fraction of the gate period.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Event file to write; the truth sidecar goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_enum, default_value_t = Mode::SecondOrder)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = WeightingArg::Uniform)]
    weighting: WeightingArg,
    /// Bins with fewer counts are left out of the fit.
    #[arg(long, default_value_t = 1)]
    min_count: u64,
    /// The fit range ends at the last bin with at least this many counts.
    #[arg(long, default_value_t = 5)]
    k_min: u64,
    /// Largest gap entering the fit.
    #[arg(long)]
    m_fit_max: Option<u64>,
    /// Largest tracked gap; longer gaps are counted as overflow.
    #[arg(long, default_value_t = DEFAULT_M_MAX)]
    m_max: u64,
    #[arg(long, default_value_t = 3)]
    restarts: usize,
    #[arg(long, default_value_t = 4000)]
    max_evals: usize,
    /// Accepted timestamp distance from a gate, in gate periods.
    #[arg(long, default_value_t = 0.25)]
    phase_tolerance: f64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    gate_freq_hz: f64,
    /// Known mean photon number per nominal gate.
    #[arg(long)]
    mu: Option<f64>,
    /// Known detection efficiency, to infer mu.
    #[arg(long)]
    eta_nominal: Option<f64>,
    #[arg(long, requires = "nominal_gate_width_s")]
    effective_gate_width_s: Option<f64>,
    #[arg(long, requires = "effective_gate_width_s")]
    nominal_gate_width_s: Option<f64>,
    /// Hold the dark-count probability fixed and fit mu*eta.
    #[arg(long, conflicts_with = "pin_mu_eta")]
    pin_pdark: Option<f64>,
    /// Hold mu*eta fixed and fit the dark-count probability.
    #[arg(long)]
    pin_mu_eta: Option<f64>,
    /// Initial gaps skipped by the area-ratio tail line.
    #[arg(long)]
    knee: Option<u64>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
struct CharacterizeCmd {
    input: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Bootstrap resamples for standard errors.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(0..=SEED_MAX))]
    seed: u64,
    /// Write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the plot table (CSV) here.
    #[arg(long)]
    plot_table: Option<PathBuf>,
    /// What to print on stdout.
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

#[derive(Args)]
struct MonitorCmd {
    /// Event file, or `-` for standard input.
    input: String,
    #[command(flatten)]
    run: RunArgs,
    /// Intervals in the sliding window.
    #[arg(long, default_value_t = 30_000)]
    window: usize,
    /// New intervals between refreshes; defaults to a tenth of the window.
    #[arg(long)]
    refresh: Option<usize>,
    /// Seconds without input before a stale heartbeat.
    #[arg(long, default_value_t = 5.0)]
    stall_timeout_s: f64,
    /// Parameter time series (CSV); defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write each refresh's full report into this directory.
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeCmd {
    /// Reports or event files, at least two.
    #[arg(required = true, num_args = 2..)]
    inputs: Vec<PathBuf>,
    /// Mean photon number per nominal gate for each input, in order.
    #[arg(long, value_delimiter = ',')]
    mu: Vec<f64>,
    /// Needed for event-file inputs.
    #[arg(long)]
    gate_freq_hz: Option<f64>,
    #[arg(long, requires = "nominal_gate_width_s")]
    effective_gate_width_s: Option<f64>,
    #[arg(long, requires = "effective_gate_width_s")]
    nominal_gate_width_s: Option<f64>,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

#[derive(Args)]
struct GateWidthCmd {
    /// Delay scan: `delay_s,counts` per line.
    input: PathBuf,
    #[arg(long)]
    nominal_width_s: Option<f64>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

fn fit_options(f: &FitArgs, pin: Pin) -> FitOptions {
    FitOptions {
        mode: match f.mode {
            Mode::Exact => PmfMode::ExactProduct,
            Mode::SecondOrder => PmfMode::SecondOrder,
        },
        bins: BinPolicy {
            min_count: f.min_count,
            k_min: f.k_min,
        },
        m_fit_max: f.m_fit_max,
        weighting: match f.weighting {
            WeightingArg::Uniform => Weighting::Uniform,
            WeightingArg::InverseVariance => Weighting::InverseVariance,
            WeightingArg::ModelVariance => Weighting::ModelVariance,
        },
        pin,
        restarts: f.restarts,
        max_evals: f.max_evals,
        ..FitOptions::default()
    }
}

fn gate_widths(effective: Option<f64>, nominal: Option<f64>) -> Option<GateWidths> {
    effective
        .zip(nominal)
        .map(|(effective_s, nominal_s)| GateWidths {
            effective_s,
            nominal_s,
        })
}

fn run_config(a: &RunArgs) -> RunConfig {
    let pin = match (a.pin_pdark, a.pin_mu_eta) {
        (Some(p), _) => Pin::PDark(p),
        (None, Some(v)) => Pin::MuEta(v),
        (None, None) => Pin::None,
    };
    let mut cfg = RunConfig::new(a.gate_freq_hz);
    cfg.mu_known = a.mu;
    cfg.eta_nominal = a.eta_nominal;
    cfg.gate_widths = gate_widths(a.effective_gate_width_s, a.nominal_gate_width_s);
    cfg.fit = fit_options(&a.fit, pin);
    cfg.m_max = a.fit.m_max;
    cfg.phase_tolerance = a.fit.phase_tolerance;
    cfg.area_knee = a.knee;
    cfg
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn stdout_err(source: io::Error) -> CliError {
    CliError::Io {
        path: "stdout".into(),
        source,
    }
}

fn simulate(c: SimulateCmd) -> Result<(), CliError> {
    let period = 1.0 / c.gate_freq_hz;
    let params = match (c.p0, c.p_total) {
        (Some(p0), _) => DetectorParams::new(c.mu, c.eta, c.p_dark, p0, c.tau_s, period)?,
        (None, Some(pt)) => {
            DetectorParams::with_total_afterpulse(c.mu, c.eta, c.p_dark, pt, c.tau_s, period)?
        }
        (None, None) => unreachable!("clap requires one of --p0 and --p-total"),
    };
    let stop = match (c.detections, c.gates) {
        (Some(n), _) => StopCondition::Detections(n),
        (None, Some(n)) => StopCondition::Gates(n),
        (None, None) => unreachable!("clap requires one of --detections and --gates"),
    };
    let memory = match c.memory {
        Memory::Last => AfterpulseMemory::LastAvalancheOnly,
        Memory::Accumulating => AfterpulseMemory::Accumulating,
    };
    let args = SimulateArgs {
        config: SimConfig::new(params, stop, c.seed)
            .with_stream(c.stream)
            .with_memory(memory),
        kind: match c.event_format {
            EventFormat::Gate => EventKind::Gate,
            EventFormat::Timestamp => EventKind::Timestamp,
        },
        jitter_fraction: c.jitter,
        out: c.out,
    };
    let s = cmd_simulate(&args)?;
    println!(
        "{} detections over {} gates -> {} (truth: {})",
        s.truth.detections,
        s.truth.gates_elapsed,
        s.events_path.display(),
        s.truth_path.display()
    );
    Ok(())
}

fn characterize(c: CharacterizeCmd) -> Result<(), CliError> {
    let mut cfg = run_config(&c.run);
    cfg.fit.bootstrap = c.bootstrap.map(|resamples| Bootstrap {
        resamples,
        seed: c.seed,
    });
    let report = cmd_characterize(&c.input, &cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let toml = report.render();
    if let Some(path) = &c.report {
        write_file(path, &toml)?;
    }
    if let Some(path) = &c.plot_table {
        write_file(path, &report.plot_table())?;
    }
    let out = match c.format {
        OutputFormat::Text => report.render_text(),
        OutputFormat::Toml => toml,
    };
    print!("{out}");
    Ok(())
}

fn monitor(c: MonitorCmd) -> Result<(), CliError> {
    let mut run = run_config(&c.run);
    run.window = c.window;
    run.refresh_every = c.refresh;
    if !(c.stall_timeout_s.is_finite() && c.stall_timeout_s > 0.0) {
        return Err(CliError::Config("stall timeout must be positive".into()));
    }
    let cfg = MonitorConfig {
        run,
        stall_timeout: Duration::from_secs_f64(c.stall_timeout_s),
        origin: c.input.clone(),
    };
    let source: Box<dyn BufRead + Send> = if c.input == "-" {
        Box::new(BufReader::new(io::stdin()))
    } else {
        let path = Path::new(&c.input);
        let file = File::open(path).map_err(|source| CliError::Io {
            path: c.input.clone(),
            source,
        })?;
        Box::new(BufReader::new(file))
    };
    let (mut out, out_name): (Box<dyn Write + Send>, String) = match &c.out {
        Some(p) => (
            Box::new(BufWriter::new(File::create(p).map_err(|source| {
                CliError::Io {
                    path: p.display().to_string(),
                    source,
                }
            })?)),
            p.display().to_string(),
        ),
        None => (Box::new(io::stdout()), "stdout".into()),
    };
    if let Some(dir) = &c.report_dir {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let io_err = |source| CliError::Io {
        path: out_name.clone(),
        source,
    };
    writeln!(out, "{}", series_csv_header()).map_err(io_err)?;
    let mut failure: Option<CliError> = None;
    let summary = cmd_monitor(source, &cfg, |sample| {
        if failure.is_some() {
            return;
        }
        let mut step = || -> Result<(), CliError> {
            writeln!(out, "{}", sample.csv_row())
                .and_then(|_| out.flush())
                .map_err(io_err)?;
            if let (Some(dir), Some(report), false) = (&c.report_dir, &sample.report, sample.stale)
            {
                let path = dir.join(format!("report-{:06}.toml", sample.sequence));
                write_file(&path, &report.render())?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    eprintln!(
        "{} intervals, {} refreshes, {} heartbeats, {} rejects, {} duplicates",
        summary.intervals,
        summary.refreshes,
        summary.heartbeats,
        summary.rejects,
        summary.duplicates
    );
    Ok(())
}

fn decompose(c: DecomposeCmd) -> Result<(), CliError> {
    if !c.mu.is_empty() && c.mu.len() != c.inputs.len() {
        return Err(CliError::Config(format!(
            "{} mu values for {} inputs",
            c.mu.len(),
            c.inputs.len()
        )));
    }
    let inputs: Vec<DecomposeInput> = c
        .inputs
        .iter()
        .enumerate()
        .map(|(i, path)| DecomposeInput {
            path: path.clone(),
            mu: c.mu.get(i).copied(),
        })
        .collect();
    let widths = gate_widths(c.effective_gate_width_s, c.nominal_gate_width_s);
    let cfg = c.gate_freq_hz.map(|f| {
        let mut cfg = RunConfig::new(f);
        cfg.fit = fit_options(&c.fit, Pin::None);
        cfg.m_max = c.fit.m_max;
        cfg.phase_tolerance = c.fit.phase_tolerance;
        cfg.gate_widths = widths;
        cfg
    });
    if cfg.is_none() && widths.is_some() {
        return Err(CliError::Config(
            "gate-width correction needs --gate-freq-hz".into(),
        ));
    }
    let report = cmd_decompose(&inputs, cfg.as_ref())?;
    let toml = report.render();
    if let Some(path) = &c.report {
        write_file(path, &toml)?;
    }
    match c.format {
        OutputFormat::Text => print!("{}", report.render_text()),
        OutputFormat::Toml => print!("{toml}"),
    }
    Ok(())
}

fn gate_width(c: GateWidthCmd) -> Result<(), CliError> {
    let report = cmd_gate_width(&c.input, c.nominal_width_s)?;
    let toml = report.render();
    if let Some(path) = &c.report {
        write_file(path, &toml)?;
    }
    match c.format {
        OutputFormat::Text => print!("{}", report.render_text()),
        OutputFormat::Toml => print!("{toml}"),
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Characterize(c) => characterize(c),
        Command::Monitor(c) => monitor(c),
        Command::Decompose(c) => decompose(c),
        Command::GateWidth(c) => gate_width(c),
    };
    if let Err(e) = result.and_then(|_| io::stdout().flush().map_err(stdout_err)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
