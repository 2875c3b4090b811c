//! `tapid`: replay or live runs of the identification plugins, tap-loss
//! experiments, and audit log checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use tapid_core::audit::{
    parse_entered_time, render_text, verify_chain, AuditConfig, AuditError, ChainStatus, FileStore,
};
use tapid_core::capture::{CaptureError, DEFAULT_SNAP_LENGTH};
use tapid_core::config::{load_params, load_profile, ConfigError};
use tapid_core::tap::{apply_tap, icmp_experiment, TapLossProfile};
use tapid_core::{open_source, CaptureSource, Registry, RunOrigin, Session, SessionError, Verdict};

const EXIT_CODES: &str = "\
Exit codes:
  0  success (verify: chain intact)
  1  verify: chain broken
  2  usage or configuration error
  3  capture source or log file unreadable
  4  runtime failure, including audit storage failure";

#[derive(Parser)]
#[command(name = "tapid", version, about = "Passive tap server identification", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one plugin over a capture file or a live interface.
    #[command(after_help = EXIT_CODES)]
    Run(RunArgs),
    /// Check the digest chain of an audit log.
    #[command(after_help = EXIT_CODES)]
    Verify { log: PathBuf },
    /// Print an audit log in readable form.
    #[command(after_help = EXIT_CODES)]
    Export { log: PathBuf },
    /// Simulate echo request/response exchanges through a lossy tap.
    #[command(after_help = EXIT_CODES)]
    TapExperiment(ExperimentArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["replay", "interface"])))]
#[command(group(ArgGroup::new("logging").required(true).args(["log", "no_log"])))]
struct RunArgs {
    /// Classic pcap file to replay.
    #[arg(long, value_name = "FILE")]
    replay: Option<PathBuf>,
    /// Network interface to capture from (needs capture privileges).
    #[arg(long, value_name = "NAME")]
    interface: Option<String>,
    /// Plugin id, e.g. source_addr or known_ip.
    #[arg(long)]
    plugin: String,
    /// Plugin parameter as key=value; repeatable, overrides --params-file.
    #[arg(long = "param", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    params: Vec<(String, String)>,
    /// TOML table of plugin parameters.
    #[arg(long, value_name = "FILE")]
    params_file: Option<PathBuf>,
    /// Record an audit log (requires --now).
    #[arg(long)]
    log: bool,
    /// Run without an audit log.
    #[arg(long)]
    no_log: bool,
    /// Current date and time as read by the operator, e.g. "2015-06-01 12:00".
    #[arg(long, value_name = "DATETIME")]
    now: Option<String>,
    /// Audit log path; must not exist yet. Defaults to audit-<date>-<time>.log.
    #[arg(long, value_name = "FILE")]
    audit_out: Option<PathBuf>,
    /// Octets kept per frame.
    #[arg(long, default_value_t = DEFAULT_SNAP_LENGTH)]
    snap: u32,
    /// TOML tap-loss profile applied to the stream.
    #[arg(long, value_name = "FILE")]
    tap_profile: Option<PathBuf>,
    /// Pace replay by recorded timestamps.
    #[arg(long)]
    realtime: bool,
    /// Relevance decision recorded once the run ends. Irrelevant results
    /// are destroyed and not printed.
    #[arg(long, value_enum, default_value_t = Relevance::Relevant)]
    relevance: Relevance,
}

#[derive(Clone, Copy, ValueEnum)]
enum Relevance {
    Relevant,
    Irrelevant,
}

#[derive(Args)]
#[command(group(ArgGroup::new("loss_model").args(["loss", "exchange_loss", "profile"])))]
struct ExperimentArgs {
    /// Echo requests sent per trial.
    #[arg(long, default_value_t = 10_000)]
    sent: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// Per-frame loss probability.
    #[arg(long)]
    loss: Option<f64>,
    /// Per-exchange loss probability; converted to a per-frame probability.
    #[arg(long)]
    exchange_loss: Option<f64>,
    /// TOML tap-loss profile.
    #[arg(long, value_name = "FILE")]
    profile: Option<PathBuf>,
    /// Seed of the first trial; trial i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    if k.trim().is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    Ok((k.trim().to_string(), v.to_string()))
}

struct Failure {
    exit: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            exit: 2,
            message: message.into(),
        }
    }
}

impl From<CaptureError> for Failure {
    fn from(e: CaptureError) -> Self {
        let exit = match e {
            CaptureError::InvalidSnapLength(_) => 2,
            CaptureError::Unsupported | CaptureError::PermissionDenied(_) => 4,
            _ => 3,
        };
        Self {
            exit,
            message: format!("{}: {e}", e.code()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        let exit = match &e {
            SessionError::Plugin(_) | SessionError::Audit(AuditError::MissingTimeAnchor) => 2,
            SessionError::Audit(AuditError::UnreadableLog(_)) => 3,
            _ => 4,
        };
        Self {
            exit,
            message: format!("{}: {e}", e.code()),
        }
    }
}

impl From<AuditError> for Failure {
    fn from(e: AuditError) -> Self {
        SessionError::from(e).into()
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse_from(with_implicit_run(std::env::args_os().collect()));
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Verify { log } => verify(&log),
        Command::Export { log } => export(&log),
        Command::TapExperiment(args) => experiment(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("tapid: {}", f.message.replace('\n', " "));
            ExitCode::from(f.exit)
        }
    }
}

/// `tapid --replay f.pcap ...` is shorthand for `tapid run --replay f.pcap ...`.
fn with_implicit_run(mut argv: Vec<std::ffi::OsString>) -> Vec<std::ffi::OsString> {
    let first = argv.get(1).and_then(|a| a.to_str()).unwrap_or("");
    let top_level = ["-h", "--help", "-V", "--version"];
    if first.starts_with('-') && !top_level.contains(&first) {
        argv.insert(1, "run".into());
    }
    argv
}

fn run(args: RunArgs) -> Result<u8, Failure> {
    let mut params = match &args.params_file {
        Some(path) => load_params(path)?,
        None => BTreeMap::new(),
    };
    params.extend(args.params.iter().cloned());

    let source = match (&args.replay, &args.interface) {
        (Some(path), _) => CaptureSource::replay(path),
        (None, Some(name)) => CaptureSource::live(name),
        (None, None) => unreachable!("clap requires a source"),
    }
    .with_snap_length(args.snap)
    .with_realtime(args.realtime);
    let profile = args.tap_profile.as_deref().map(load_profile).transpose()?;

    let entered = args
        .now
        .as_deref()
        .map(parse_entered_time)
        .transpose()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let registry = Arc::new(Registry::with_defaults());
    // Check the plugin and its parameters before touching the source or
    // creating an audit file.
    let descriptor = registry
        .get(&args.plugin)
        .map_err(SessionError::from)?
        .descriptor();
    tapid_core::plugin::validate_params(&descriptor, &params).map_err(SessionError::from)?;

    let audit = if args.log {
        let entered = entered.ok_or(AuditError::MissingTimeAnchor)?;
        let path = args
            .audit_out
            .clone()
            .unwrap_or_else(|| PathBuf::from(entered.format("audit-%Y%m%d-%H%M.log").to_string()));
        // Probe first so an unreadable source leaves no empty log behind.
        drop(open_source(&source)?);
        let store = FileStore::create(&path).map_err(|e| Failure {
            exit: 3,
            message: format!("cannot create {}: {e}", path.display()),
        })?;
        AuditConfig::enabled(entered, Box::new(store))
    } else {
        AuditConfig::bypassed()
    };

    let stream = open_source(&source)?;
    let stream = match &profile {
        Some(p) => apply_tap(stream, p),
        None => stream,
    };
    let mut session = Session::begin(registry, audit)?;
    let run = session.start_run(&args.plugin, &params, stream, RunOrigin::Operator)?;

    let interrupted = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&interrupted);
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).map_err(|e| Failure {
        exit: 4,
        message: format!("cannot install interrupt handler: {e}"),
    })?;
    while !interrupted.load(Ordering::SeqCst) {
        if session.wait_for_stream_end(run.run_id, Duration::from_millis(50))? {
            break;
        }
    }

    let result = session.stop_run(run.run_id)?;
    let verdict = match args.relevance {
        Relevance::Relevant => Verdict::Relevant,
        Relevance::Irrelevant => Verdict::Irrelevant,
    };
    session.mark_relevance(run.run_id, verdict)?;
    match verdict {
        Verdict::Relevant => print!("{}", result.to_text()),
        Verdict::Irrelevant => eprintln!(
            "tapid: run {} marked irrelevant; result destroyed",
            run.run_id
        ),
    }
    Ok(0)
}

fn verify(log: &Path) -> Result<u8, Failure> {
    let status = verify_chain(log)?;
    println!("{status}");
    Ok(match status {
        ChainStatus::Intact => 0,
        ChainStatus::BrokenAt(_) => 1,
    })
}

fn export(log: &Path) -> Result<u8, Failure> {
    let bytes = std::fs::read(log)
        .map_err(|e| Failure::from(AuditError::UnreadableLog(format!("{}: {e}", log.display()))))?;
    print!("{}", render_text(&bytes)?);
    Ok(0)
}

fn experiment(args: ExperimentArgs) -> Result<u8, Failure> {
    let base = match (&args.profile, args.loss, args.exchange_loss) {
        (Some(path), _, _) => load_profile(path)?,
        (_, Some(p), _) => {
            TapLossProfile::new(p, Vec::new(), 0).map_err(|e| Failure::usage(e.to_string()))?
        }
        (_, _, Some(q)) => TapLossProfile::calibrated_for_exchange_loss(q, 0)
            .map_err(|e| Failure::usage(e.to_string()))?,
        _ => TapLossProfile::lossless(),
    };
    let seed = args.seed.unwrap_or(base.rng_seed);
    let mut received_total = 0u64;
    for i in 0..args.trials {
        let profile = base.clone().with_seed(seed.wrapping_add(i));
        let received = icmp_experiment(args.sent, &profile);
        received_total += received;
        println!("{} {}", grouped(args.sent), grouped(received));
    }
    let mean = received_total as f64 / args.trials as f64;
    println!("mean {} {}", grouped(args.sent), grouped_decimal(mean));
    Ok(0)
}

/// `10000` as `10,000`.
fn grouped(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn grouped_decimal(x: f64) -> String {
    let tenths = (x * 10.0).round() as u64;
    format!("{}.{}", grouped(tenths / 10), tenths % 10)
}
