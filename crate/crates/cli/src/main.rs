use std::io::Write;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use ipnet::Ipv4Net;
use trendnet_core::actioner::Policy;
use trendnet_core::config::SystemConfig;
use trendnet_core::netsim::MS_PER_HOUR;
use trendnet_core::system::{Command, EventBody, TrendSystem};
use trendnet_service::{Engine, EngineError, EventEnvelope, ServeError};

const WATCH_POLL: Duration = Duration::from_millis(200);

#[derive(Debug, Parser)]
#[command(name = "trendnet", version, about = "Trend-based load balancing over a simulated hybrid network")]
struct Cli {
    /// Data directory; overrides the config's data_dir.
    #[arg(long, global = true, value_name = "PATH")]
    data_dir: Option<PathBuf>,
    /// Config file used when creating a data directory.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the HTTP service until interrupted.
    Serve {
        /// Plan decisions but wait for approval before applying them.
        #[arg(long)]
        require_approval: bool,
    },
    /// Advance virtual time, polling and evaluating as it goes.
    Simulate {
        #[arg(long)]
        hours: f64,
        /// Poll and sample period, e.g. 1h or 15m. Fixed at creation.
        #[arg(long, value_parser = humantime::parse_duration)]
        period: Option<Duration>,
        /// Traffic noise seed. Fixed at creation.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Benchmark operations.
    Benchmark {
        #[command(subcommand)]
        cmd: BenchmarkCmd,
    },
    /// Scale one demand's offered load for a while, starting now.
    Inject {
        #[arg(long, value_name = "CIDR")]
        src: Ipv4Net,
        #[arg(long, value_name = "CIDR")]
        dst: Ipv4Net,
        #[arg(long)]
        factor: f64,
        #[arg(long)]
        hours: f64,
    },
    /// Print trend and decision transitions as line-delimited JSON.
    Watch {
        /// Only these links, as host_ip/interface or device/interface.
        #[arg(long, num_args = 1.., value_name = "LINK")]
        links: Vec<String>,
        /// Exit after printing the transitions recorded so far.
        #[arg(long)]
        no_follow: bool,
    },
    /// Write the per-hour benchmark report.
    Report {
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Debug, Subcommand)]
enum BenchmarkCmd {
    /// Build benchmarks for every monitored link from stored history.
    Build {
        #[arg(long)]
        days: Option<u32>,
        /// Write the report here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

/// A failure of the requested operation, as opposed to bad usage.
#[derive(Debug)]
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => exit_usage(e),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Prints a clap error, adding the synopsis when clap left it out, and exits.
fn exit_usage(e: clap::Error) -> ! {
    if !e.use_stderr() {
        e.exit();
    }
    let text = e.render().to_string();
    eprint!("{text}");
    if !text.contains("Usage:") {
        eprintln!("\n{}", Cli::command().render_usage());
    }
    std::process::exit(e.exit_code())
}

fn usage_error(kind: clap::error::ErrorKind, msg: &str) -> ! {
    exit_usage(Cli::command().error(kind, msg))
}

fn hours_ms(hours: f64) -> u64 {
    if !hours.is_finite() || hours <= 0.0 {
        usage_error(clap::error::ErrorKind::ValueValidation, "--hours must be a positive number");
    }
    (hours * MS_PER_HOUR as f64).round() as u64
}

/// The config a command should open the data directory with: the explicit
/// file, else the directory's stored config, else defaults.
fn resolve_config(cli: &Cli) -> Result<SystemConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => trendnet_service::load_config(p)?,
        None => {
            let dir = cli.data_dir.clone().unwrap_or_else(|| SystemConfig::default().data_dir);
            Engine::stored_config(&dir)?.unwrap_or_default()
        }
    };
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    Ok(cfg)
}

fn open(cfg: SystemConfig) -> Result<Engine, Failure> {
    Engine::open(cfg).map_err(|e| match e {
        EngineError::ConfigMismatch { .. } => Failure(format!(
            "{e}; use a fresh --data-dir for a different scenario"
        )),
        e => e.into(),
    })
}

fn data_dir(cli: &Cli) -> Result<PathBuf, Failure> {
    Ok(resolve_config(cli)?.data_dir)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Serve { require_approval } => {
            let Some(path) = &cli.config else {
                usage_error(clap::error::ErrorKind::MissingRequiredArgument, "serve requires --config PATH");
            };
            let mut cfg = trendnet_service::load_config(path)?;
            if let Some(d) = &cli.data_dir {
                cfg.data_dir = d.clone();
            }
            if *require_approval {
                cfg.actioner.policy = Policy::Manual;
            }
            serve(cfg)
        }
        Cmd::Simulate { hours, period, seed } => {
            let ms = hours_ms(*hours);
            let mut cfg = resolve_config(&cli)?;
            if let Some(p) = period {
                let p = u64::try_from(p.as_millis()).unwrap_or(u64::MAX);
                cfg.poll.period_ms = p;
                cfg.analytics.sample_period_ms = p;
            }
            if let Some(s) = seed {
                cfg.traffic.rng_seed = *s;
            }
            let cfg = cfg.validated()?;
            let mut engine = open(cfg)?;
            let before = engine.system().poll_rounds();
            let events = engine.execute(Command::Advance { ms })?;
            let sys = engine.system();
            let samples = events.iter().filter(|e| matches!(e.event.body, EventBody::Sample(_))).count();
            let summary = serde_json::json!({
                "now_ms": sys.now_ms(),
                "polls": sys.poll_rounds() - before,
                "samples": samples,
                "links": sys.links().len(),
                "trends": sys.trends().len(),
                "decisions": sys.decisions().len(),
            });
            println!("{summary}");
            Ok(())
        }
        Cmd::Benchmark {
            cmd: BenchmarkCmd::Build { days, out },
        } => {
            let mut engine = open(resolve_config(&cli)?)?;
            engine.execute(Command::BuildBenchmarks { days: *days })?;
            let doc = engine.system().report().ok_or_else(|| Failure("no monitored links".into()))?;
            let text = serde_json::to_string_pretty(&doc)? + "\n";
            match out {
                Some(p) => write_file(p, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Cmd::Inject {
            src,
            dst,
            factor,
            hours,
        } => {
            let duration_ms = hours_ms(*hours);
            let mut engine = open(resolve_config(&cli)?)?;
            engine.execute(Command::Inject {
                src_prefix: *src,
                dst_prefix: *dst,
                factor: *factor,
                duration_ms,
            })?;
            let inj = engine.system().net().injections().last().cloned();
            println!("{}", serde_json::to_string(&inj)?);
            Ok(())
        }
        Cmd::Watch { links, no_follow } => watch(&data_dir(&cli)?, links, !*no_follow),
        Cmd::Report { out, format } => {
            let engine = Engine::open_read_only(&data_dir(&cli)?)?;
            let doc = engine
                .system()
                .report()
                .ok_or_else(|| Failure("no benchmarks yet; run `benchmark build` first".into()))?;
            let text = match format {
                Format::Json => serde_json::to_string_pretty(&doc)? + "\n",
                Format::Csv => doc.to_csv(),
            };
            write_file(out, &text)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn serve(cfg: SystemConfig) -> Result<(), Failure> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(trendnet_service::serve(
        cfg,
        |addr| {
            println!("listening on http://{addr}");
            let _ = std::io::stdout().flush();
        },
        trendnet_service::shutdown_signal(),
    ))
    .map_err(|e: ServeError| Failure(e.to_string()))
}

/// A `--links` entry resolved to (device, interface).
fn resolve_link(sys: &TrendSystem, spec: &str) -> Result<(String, String), Failure> {
    let (head, iface) = spec
        .split_once('/')
        .ok_or_else(|| Failure(format!("link {spec:?} must be host_ip/interface or device/interface")))?;
    match head.parse::<Ipv4Addr>() {
        Ok(ip) => sys
            .link(ip, iface)
            .map(|l| (l.device.clone(), l.interface.clone()))
            .ok_or_else(|| Failure(format!("{spec} is not a monitored link"))),
        Err(_) => Ok((head.to_string(), iface.to_string())),
    }
}

fn matches(sys: &TrendSystem, filter: &[(String, String)], env: &EventEnvelope) -> bool {
    let hop = match &env.event.body {
        EventBody::Trend(t) => {
            let link = &t.event().link;
            match sys.link(link.host_ip, &link.interface) {
                Some(l) => (l.device.clone(), l.interface.clone()),
                None => return filter.is_empty(),
            }
        }
        EventBody::Decision(d) => (d.congested.device.clone(), d.congested.egress.clone()),
        _ => return false,
    };
    filter.is_empty() || filter.contains(&hop)
}

fn watch(dir: &Path, links: &[String], follow: bool) -> Result<(), Failure> {
    let mut engine = Engine::open_read_only(dir)?;
    let filter = links
        .iter()
        .map(|s| resolve_link(engine.system(), s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = std::io::stdout().lock();
    let mut batch: Vec<EventEnvelope> = engine.events().to_vec();
    loop {
        for env in batch.iter().filter(|e| matches(engine.system(), &filter, e)) {
            if writeln!(out, "{}", serde_json::to_string(env)?).is_err() {
                return Ok(());
            }
        }
        out.flush().ok();
        if !follow {
            return Ok(());
        }
        std::thread::sleep(WATCH_POLL);
        batch = engine.catch_up()?;
    }
}
