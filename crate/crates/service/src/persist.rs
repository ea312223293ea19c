//! Data-directory persistence. `commands.jsonl` is authoritative: opening a
//! directory replays it against the stored config. The other journals are
//! derived views rewritten on open and appended on every mutation.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use trendnet_core::config::{ConfigError, SystemConfig, RUNTIME_KEYS};
use trendnet_core::system::{Command, EventBody, Outputs, SystemError, SystemEvent, TrendSystem};
use trendnet_core::tsdb::format_journal_line;

pub const CONFIG_FILE: &str = "config.json";
pub const COMMANDS_FILE: &str = "commands.jsonl";
pub const POINTS_FILE: &str = "points.log";
pub const TRENDS_FILE: &str = "trends.jsonl";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const BENCHMARKS_FILE: &str = "benchmarks.jsonl";
pub const LOCK_FILE: &str = "lock";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{}: {source}", file.display())]
    Io { file: PathBuf, source: io::Error },
    #[error("{}: line {line}: {message}", file.display())]
    Corrupt {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: data directory was created with a different topology, traffic, poll or pipeline config", file.display())]
    ConfigMismatch { file: PathBuf },
    #[error("{}: data directory is in use by another process", .0.display())]
    Locked(PathBuf),
    #[error("{}: no data directory", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: replaying line {line}: {source}", file.display())]
    Replay {
        file: PathBuf,
        line: usize,
        source: SystemError,
    },
    #[error(transparent)]
    System(#[from] SystemError),
}

fn io_err(file: &Path) -> impl FnOnce(io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        file: file.to_path_buf(),
        source,
    }
}

/// One event as delivered to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEnvelope {
    pub seq: u64,
    #[serde(flatten)]
    pub event: SystemEvent,
}

impl EventEnvelope {
    pub fn kind(&self) -> &'static str {
        match self.event.body {
            EventBody::Sample(_) => "sample",
            EventBody::Benchmark(_) => "benchmark",
            EventBody::Trend(_) => "trend",
            EventBody::Decision(_) => "decision",
        }
    }
}

/// Config sections that must not change under an existing journal.
fn structural(cfg: &SystemConfig) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    let map = v.as_object_mut().expect("object");
    for k in RUNTIME_KEYS.iter().chain(&["server", "data_dir"]) {
        map.remove(*k);
    }
    v
}

struct Journals {
    commands: File,
    points: BufWriter<File>,
    trends: BufWriter<File>,
    decisions: BufWriter<File>,
    benchmarks: BufWriter<File>,
}

impl Journals {
    fn record(&mut self, out: &Outputs) -> io::Result<()> {
        for (k, p) in &out.points {
            writeln!(self.points, "{}", format_journal_line(k, p))?;
        }
        for e in &out.events {
            let (w, v) = match &e.body {
                EventBody::Trend(t) => (&mut self.trends, serde_json::to_string(t)),
                EventBody::Decision(d) => (&mut self.decisions, serde_json::to_string(d)),
                EventBody::Benchmark(b) => (&mut self.benchmarks, serde_json::to_string(b)),
                EventBody::Sample(_) => continue,
            };
            writeln!(w, "{}", v.expect("serializes"))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.points.flush()?;
        self.trends.flush()?;
        self.decisions.flush()?;
        self.benchmarks.flush()
    }
}

/// The system plus its event log and, unless read-only, its journals.
pub struct Engine {
    dir: PathBuf,
    system: TrendSystem,
    events: Vec<EventEnvelope>,
    journals: Option<Journals>,
    commands_applied: usize,
    _lock: Option<File>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("dir", &self.dir)
            .field("now_ms", &self.system.now_ms())
            .field("events", &self.events.len())
            .finish()
    }
}

/// Takes the advisory writer lock, released when the file closes.
fn lock_dir(dir: &Path) -> Result<File, EngineError> {
    let path = dir.join(LOCK_FILE);
    let f = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(io_err(&path))?;
    match f.try_lock() {
        Ok(()) => Ok(f),
        Err(fs::TryLockError::WouldBlock) => Err(EngineError::Locked(dir.to_path_buf())),
        Err(fs::TryLockError::Error(e)) => Err(io_err(&path)(e)),
    }
}

/// Reads the command log, dropping a corrupt final line. Returns the
/// commands and whether the file needs truncating to `valid_len` bytes.
fn read_commands(path: &Path) -> Result<(Vec<Command>, Option<u64>), EngineError> {
    let text = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), None)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut cmds = Vec::new();
    let mut offset = 0u64;
    let lines: Vec<&[u8]> = text.split_inclusive(|b| *b == b'\n').collect();
    for (i, raw) in lines.iter().enumerate() {
        let line = std::str::from_utf8(raw).unwrap_or("").trim_end_matches(['\n', '\r']);
        let complete = raw.ends_with(b"\n");
        match serde_json::from_str::<Command>(line) {
            Ok(c) if !line.is_empty() => {
                cmds.push(c);
                offset += raw.len() as u64;
                if !complete {
                    // valid but unterminated: keep it, fix the newline on reopen
                    return Ok((cmds, Some(u64::MAX)));
                }
            }
            res if i + 1 == lines.len() => {
                let why = res.err().map_or("empty line".to_string(), |e| e.to_string());
                tracing::warn!(
                    file = %path.display(),
                    line = i + 1,
                    "truncating corrupt trailing journal line: {why}"
                );
                return Ok((cmds, Some(offset)));
            }
            res => {
                return Err(EngineError::Corrupt {
                    file: path.to_path_buf(),
                    line: i + 1,
                    message: res.err().map_or("empty line".to_string(), |e| e.to_string()),
                })
            }
        }
    }
    Ok((cmds, None))
}

impl Engine {
    /// Opens (creating if needed) `cfg.data_dir`. An existing directory must
    /// have been created with the same structural config; differing runtime
    /// sections are applied as a journaled reconfiguration.
    pub fn open(cfg: SystemConfig) -> Result<Self, EngineError> {
        let dir = cfg.data_dir.clone();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let lock = lock_dir(&dir)?;
        let cfg_path = dir.join(CONFIG_FILE);
        let stored = match fs::read_to_string(&cfg_path) {
            Ok(text) => {
                let mut stored = SystemConfig::from_json(&text)?;
                if structural(&stored) != structural(&cfg) {
                    return Err(EngineError::ConfigMismatch { file: cfg_path });
                }
                stored.data_dir = dir.clone();
                stored.server = cfg.server.clone();
                stored
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
                fs::write(&cfg_path, text + "\n").map_err(io_err(&cfg_path))?;
                cfg.clone()
            }
            Err(e) => return Err(io_err(&cfg_path)(e)),
        };
        let mut engine = Self::replay(stored, true)?;
        engine._lock = Some(lock);
        let sys = engine.system.config();
        if sys.analytics != cfg.analytics || sys.actioner != cfg.actioner {
            engine.execute(Command::Configure {
                analytics: cfg.analytics.clone(),
                actioner: cfg.actioner.clone(),
            })?;
        }
        Ok(engine)
    }

    /// Opens an existing directory with its stored config, writing nothing.
    pub fn open_read_only(dir: &Path) -> Result<Self, EngineError> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = match fs::read_to_string(&cfg_path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(EngineError::Missing(dir.to_path_buf())),
            Err(e) => return Err(io_err(&cfg_path)(e)),
        };
        let mut cfg = SystemConfig::from_json(&text)?;
        cfg.data_dir = dir.to_path_buf();
        Self::replay(cfg, false)
    }

    /// Reads the stored config of an existing data directory, if any.
    pub fn stored_config(dir: &Path) -> Result<Option<SystemConfig>, EngineError> {
        let cfg_path = dir.join(CONFIG_FILE);
        match fs::read_to_string(&cfg_path) {
            Ok(t) => Ok(Some(SystemConfig::from_json(&t)?)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&cfg_path)(e)),
        }
    }

    fn replay(cfg: SystemConfig, writable: bool) -> Result<Self, EngineError> {
        let dir = cfg.data_dir.clone();
        let cmd_path = dir.join(COMMANDS_FILE);
        let (cmds, fix) = read_commands(&cmd_path)?;
        let mut journals = None;
        if writable {
            let mut commands = OpenOptions::new()
                .create(true)
                .read(true)
                .append(true)
                .open(&cmd_path)
                .map_err(io_err(&cmd_path))?;
            match fix {
                Some(u64::MAX) => commands.write_all(b"\n").map_err(io_err(&cmd_path))?,
                Some(len) => commands.set_len(len).map_err(io_err(&cmd_path))?,
                None => {}
            }
            let fresh = |name: &str| -> Result<BufWriter<File>, EngineError> {
                let p = dir.join(name);
                File::create(&p).map(BufWriter::new).map_err(io_err(&p))
            };
            journals = Some(Journals {
                commands,
                points: fresh(POINTS_FILE)?,
                trends: fresh(TRENDS_FILE)?,
                decisions: fresh(DECISIONS_FILE)?,
                benchmarks: fresh(BENCHMARKS_FILE)?,
            });
        }
        let mut engine = Engine {
            system: TrendSystem::new(cfg)?,
            dir,
            events: Vec::new(),
            journals,
            commands_applied: 0,
            _lock: None,
        };
        for (i, cmd) in cmds.iter().enumerate() {
            let out = engine.system.apply(cmd).map_err(|source| EngineError::Replay {
                file: cmd_path.clone(),
                line: i + 1,
                source,
            })?;
            engine.absorb(out, false)?;
        }
        if let Some(j) = &mut engine.journals {
            j.flush().map_err(io_err(&engine.dir))?;
        }
        Ok(engine)
    }

    fn absorb(&mut self, out: Outputs, flush: bool) -> Result<Vec<EventEnvelope>, EngineError> {
        self.commands_applied += 1;
        if let Some(j) = &mut self.journals {
            j.record(&out).map_err(io_err(&self.dir))?;
            if flush {
                j.flush().map_err(io_err(&self.dir))?;
            }
        }
        let start = self.events.len() as u64;
        let fresh: Vec<EventEnvelope> = out
            .events
            .into_iter()
            .enumerate()
            .map(|(i, event)| EventEnvelope {
                seq: start + i as u64 + 1,
                event,
            })
            .collect();
        self.events.extend(fresh.iter().cloned());
        Ok(fresh)
    }

    /// Applies a command and journals it before returning its events.
    /// Rejected commands leave no trace.
    pub fn execute(&mut self, cmd: Command) -> Result<Vec<EventEnvelope>, EngineError> {
        let out = self.system.apply(&cmd)?;
        if let Some(j) = &mut self.journals {
            let path = self.dir.join(COMMANDS_FILE);
            let line = serde_json::to_string(&cmd).expect("command serializes");
            writeln!(j.commands, "{line}").map_err(io_err(&path))?;
            j.commands.sync_data().map_err(io_err(&path))?;
        }
        self.absorb(out, true)
    }

    /// Re-reads the command log and applies commands appended by another
    /// process since this engine last looked.
    pub fn catch_up(&mut self) -> Result<Vec<EventEnvelope>, EngineError> {
        let path = self.dir.join(COMMANDS_FILE);
        let (cmds, _) = read_commands(&path)?;
        let mut fresh = Vec::new();
        for (i, cmd) in cmds.iter().enumerate().skip(self.commands_applied) {
            let out = self.system.apply(cmd).map_err(|source| EngineError::Replay {
                file: path.clone(),
                line: i + 1,
                source,
            })?;
            fresh.extend(self.absorb(out, true)?);
        }
        Ok(fresh)
    }

    pub fn system(&self) -> &TrendSystem {
        &self.system
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn events(&self) -> &[EventEnvelope] {
        &self.events
    }

    pub fn last_seq(&self) -> u64 {
        self.events.len() as u64
    }

    /// Events with `seq > after`.
    pub fn events_after(&self, after: u64) -> &[EventEnvelope] {
        let start = usize::try_from(after).unwrap_or(usize::MAX).min(self.events.len());
        &self.events[start..]
    }
}

/// Lines of a journal file, for inspection.
pub fn read_lines(path: &Path) -> io::Result<Vec<String>> {
    BufReader::new(File::open(path)?).lines().collect()
}
