use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mobit_core::docio::parse_document;
use mobit_core::flow::{compile, replay, scene_at, CompileError, CompileOptions, FlowScript};
use mobit_core::model::Document;
use mobit_core::store::DirStore;
use mobit_core::validate::{validate, Mode};
use mobit_runtime::client::{self, insufficient_lead, ClientError, ClientOptions, ClockMode, NetEstimate, PlaybackReport};
use mobit_runtime::harness::{simulate_with_store, NetModel, SimError, SimOptions};
use mobit_runtime::server::{CompiledDoc, DocStore, Server, SessionOptions, DEFAULT_CHUNK_SIZE};
use mobit_runtime::subserver::{DataHandles, EventSink, RegistryConfig};
use mobit_runtime::trace::format_trace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_PROTOCOL: u8 = 4;

#[derive(Parser)]
#[command(name = "mobit", version, about = "Compile, serve and play hierarchical timeline documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check structure and containment; prints one line per violation.
    Validate {
        file: PathBuf,
        #[arg(long)]
        strict: bool,
    },
    /// Linearize a document into a flow script.
    Compile {
        file: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        compile: CompileArgs,
        /// Warn when the lead is too short for this latency (needs --assume-bandwidth).
        #[arg(long, value_name = "MS", requires = "assume_bandwidth")]
        assume_latency: Option<u64>,
        #[arg(long, value_name = "BPS", requires = "assume_latency")]
        assume_bandwidth: Option<u64>,
    },
    /// Serve documents over TCP until killed.
    Serve {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, env = "MOBIT_PORT")]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, value_name = "BYTES", default_value_t = DEFAULT_CHUNK_SIZE)]
        chunk: usize,
        #[command(flatten)]
        compile: CompileArgs,
        /// Plugin registry file.
        #[arg(long, value_name = "CONFIG", conflicts_with = "text_sender")]
        plugins: Option<PathBuf>,
        /// Run the text sender on the port after --port.
        #[arg(long)]
        text_sender: bool,
    },
    /// Play a served document headlessly and report stalls.
    Play {
        #[arg(long, value_name = "HOST:PORT")]
        connect: String,
        #[arg(long, value_enum, default_value_t = Clock::Real)]
        clock: Clock,
        /// Virtual time per wall time with --clock sim.
        #[arg(long, default_value_t = 10.0)]
        speed: f64,
        /// Trace destination; `-` for stdout.
        #[arg(long, value_name = "OUT")]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "")]
        doc: String,
        #[arg(long, value_name = "BYTES")]
        budget: Option<u64>,
    },
    /// Compare the compiled script against direct evaluation of the document.
    Oracle {
        file: PathBuf,
        /// Random probe times in addition to event times and midpoints.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        strict: bool,
    },
    /// Play a document over a modeled network on a virtual clock.
    Simulate {
        file: PathBuf,
        #[arg(long, value_name = "MS")]
        latency: u64,
        #[arg(long, value_name = "BPS", value_parser = clap::value_parser!(u64).range(1..))]
        bandwidth: u64,
        #[arg(long, value_name = "MS", default_value_t = 0)]
        jitter: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "BYTES", default_value_t = DEFAULT_CHUNK_SIZE)]
        chunk: usize,
        #[command(flatten)]
        compile: CompileArgs,
        #[arg(long, value_name = "OUT")]
        trace: Option<PathBuf>,
        /// Text sender message as MS:TEXT; repeatable.
        #[arg(long, value_name = "MS:TEXT", value_parser = parse_injection)]
        inject: Vec<(u64, String)>,
        #[arg(long, default_value_t = 7001)]
        text_sender_port: u16,
    },
    /// Send one line to a running text sender.
    Send {
        #[arg(long, env = "MOBIT_SEND_PORT")]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        text: String,
    },
}

#[derive(Args)]
struct CompileArgs {
    #[arg(long, conflicts_with = "clamp")]
    strict: bool,
    /// Clip placements to their parent (default).
    #[arg(long)]
    clamp: bool,
    #[arg(long, value_name = "MS", default_value_t = 1000)]
    prefetch_lead: u64,
}

impl CompileArgs {
    fn options(&self) -> CompileOptions {
        CompileOptions {
            mode: if self.strict { Mode::Strict } else { Mode::Clamp },
            prefetch_lead_ms: self.prefetch_lead,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    Real,
    Sim,
}

fn parse_injection(s: &str) -> Result<(u64, String), String> {
    let (at, text) = s.split_once(':').ok_or("expected MS:TEXT")?;
    let at = at.parse().map_err(|e| format!("bad time {at:?}: {e}"))?;
    Ok((at, text.to_string()))
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Failure { code, msg: msg.into() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::new(EXIT_IO, e.to_string())
    }
}

impl From<CompileError> for Failure {
    fn from(e: CompileError) -> Self {
        match e {
            CompileError::Payload { .. } => Failure::new(EXIT_IO, e.to_string()),
            CompileError::Rejected(violations) => {
                let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                Failure::new(EXIT_FAILED, format!("rejected in strict mode:\n{}", lines.join("\n")))
            }
            other => Failure::new(EXIT_FAILED, other.to_string()),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let code = match e {
            ClientError::Io(_) | ClientError::ConnectionLost { .. } => EXIT_IO,
            ClientError::Protocol(_) | ClientError::Server { .. } => EXIT_PROTOCOL,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load(path: &Path) -> Result<(Document, DirStore), Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    let doc = parse_document(&bytes).map_err(|e| Failure::new(EXIT_FAILED, format!("{}: {e}", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((doc, DirStore::new(dir)))
}

fn trace_sink(path: &Path) -> io::Result<Box<dyn Write>> {
    if path == Path::new("-") {
        Ok(Box::new(io::stdout().lock()))
    } else {
        Ok(Box::new(BufWriter::new(File::create(path)?)))
    }
}

fn print_report(report: &PlaybackReport) {
    println!("state\t{}", report.state);
    println!("stalls\t{}", report.stall_count);
    println!("stall_ms\t{:.3}", report.total_stall_ms);
    println!("startup_ms\t{:.3}", report.startup_ms);
    println!("max_buffer_bytes\t{}", report.max_buffer_bytes);
    println!("budget_violations\t{}", report.budget_violations);
}

fn warn_short_leads(script: &FlowScript, net: NetEstimate) {
    for (local_ref, needed) in insufficient_lead(script, net) {
        eprintln!(
            "warning: r{local_ref} needs {needed} ms of lead, script has {}",
            script.header.prefetch_lead_ms
        );
    }
}

fn cmd_validate(file: &Path, strict: bool) -> Outcome {
    let (doc, _) = load(file)?;
    let report = validate(&doc, if strict { Mode::Strict } else { Mode::Clamp });
    for v in &report.violations {
        println!("{v}");
    }
    let s = report.stats;
    if report.is_ok() {
        println!("ok\tnodes={} entries={} depth={}", s.nodes, s.entries, s.max_depth);
        Ok(())
    } else {
        Err(Failure::new(EXIT_FAILED, format!("{} violation(s)", report.violations.len())))
    }
}

fn cmd_compile(file: &Path, output: &Path, args: &CompileArgs, net: Option<NetEstimate>) -> Outcome {
    let (doc, store) = load(file)?;
    let compiled = compile(&doc, &args.options(), &store)?;
    for w in &compiled.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(net) = net {
        warn_short_leads(&compiled.script, net);
    }
    std::fs::write(output, compiled.script.to_bytes())?;
    Ok(())
}

enum Plugins {
    None,
    /// Text sender on the port after the server's.
    TextSender,
    Registry(RegistryConfig),
}

fn cmd_serve(files: &[PathBuf], host: &str, port: u16, chunk: usize, args: &CompileArgs, plugins: Plugins) -> Outcome {
    if chunk == 0 {
        return Err(Failure::new(EXIT_USAGE, "--chunk must be positive"));
    }
    let mut docs = DocStore::new();
    for file in files {
        let (doc, store) = load(file)?;
        let (compiled, warnings) = CompiledDoc::new(&doc, &args.options(), &store)?;
        for w in &warnings {
            eprintln!("warning: {}: {w}", file.display());
        }
        docs.insert(compiled);
    }
    let listener = TcpListener::bind((host, port))?;
    let addr = listener.local_addr()?;

    let first_free = addr.port().wrapping_add(1);
    let registry = match plugins {
        Plugins::None => None,
        Plugins::TextSender => Some(RegistryConfig::text_sender(first_free)),
        Plugins::Registry(r) => Some(r),
    };
    let (plugins, events) = match registry {
        Some(registry) => {
            let (sink, events) = EventSink::channel();
            let origin = Instant::now();
            let handles = DataHandles {
                sink,
                clock: Arc::new(move || origin.elapsed().as_millis() as u64),
                bind_host: Some(host.to_string()),
            };
            let started = registry
                .start(first_free, &handles)
                .map_err(|e| Failure::new(EXIT_FAILED, format!("plugins: {e}")))?;
            (started, Some(events))
        }
        None => (Vec::new(), None),
    };

    let ids: Vec<&str> = docs.ids().collect();
    let ids = ids.join(",");
    let server = Server::start(listener, Arc::new(docs), SessionOptions { chunk_size: chunk }, plugins, events)?;
    let mut out = io::stdout().lock();
    writeln!(out, "listening\t{addr}\t{ids}")?;
    for d in server.descriptors() {
        let ports: Vec<String> = d.ports.iter().map(u16::to_string).collect();
        writeln!(out, "plugin\t{}\t{}\t{}", d.name, d.target_mime, ports.join(","))?;
    }
    out.flush()?;
    drop(out);
    server.wait();
    Ok(())
}

fn cmd_play(connect: &str, clock: Clock, speed: f64, trace: Option<&Path>, doc: &str, budget: Option<u64>) -> Outcome {
    let clock = match clock {
        Clock::Real => ClockMode::Real,
        Clock::Sim if speed > 0.0 && speed.is_finite() => ClockMode::Simulated { speed },
        Clock::Sim => return Err(Failure::new(EXIT_USAGE, "--speed must be positive")),
    };
    let mut sink = trace.map(trace_sink).transpose()?;
    let opts = ClientOptions {
        doc_id: doc.to_string(),
        buffer_budget: budget,
    };
    let result = client::run(connect, clock, opts, sink.as_mut().map(|s| s.as_mut() as &mut dyn Write));
    if let Some(mut s) = sink {
        s.flush()?;
    }
    match result {
        Ok(report) => {
            print_report(&report);
            Ok(())
        }
        Err(ClientError::ConnectionLost { report }) => {
            print_report(&report);
            Err(Failure::new(EXIT_IO, format!("connection lost in state {}", report.state)))
        }
        Err(e) => Err(e.into()),
    }
}

/// Event times, midpoints between consecutive event times and `samples`
/// uniform draws from the presentation.
fn probe_times(script: &FlowScript, samples: usize, seed: u64) -> BTreeSet<u64> {
    let events = script.timestamps();
    let mut times: BTreeSet<u64> = events.iter().copied().collect();
    for w in events.windows(2) {
        times.insert(w[0] + (w[1] - w[0]) / 2);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = script.header.total_duration.max(1);
    times.extend((0..samples).map(|_| rng.random_range(0..total)));
    times
}

fn cmd_oracle(file: &Path, samples: usize, seed: u64, strict: bool) -> Outcome {
    let (doc, store) = load(file)?;
    let mode = if strict { Mode::Strict } else { Mode::Clamp };
    let opts = CompileOptions {
        mode,
        ..CompileOptions::default()
    };
    let script = compile(&doc, &opts, &store)?.script;
    let times = probe_times(&script, samples, seed);
    let mut mismatches = 0;
    for &t in &times {
        let direct = scene_at(&doc, t, mode).map_err(|e| Failure::new(EXIT_FAILED, e.to_string()))?;
        let replayed = replay(&script, t).map_err(|e| Failure::new(EXIT_FAILED, e.to_string()))?;
        if let Some(diff) = replayed.diff(&direct, 1e-6) {
            mismatches += 1;
            println!("mismatch\t{t}\t{diff}");
        }
    }
    if mismatches > 0 {
        return Err(Failure::new(EXIT_FAILED, format!("{mismatches} of {} probes disagree", times.len())));
    }
    println!("agree\t{} probes", times.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    file: &Path,
    net: NetModel,
    seed: u64,
    chunk: usize,
    args: &CompileArgs,
    trace: Option<&Path>,
    inject: Vec<(u64, String)>,
    text_sender_port: u16,
) -> Outcome {
    if chunk == 0 {
        return Err(Failure::new(EXIT_USAGE, "--chunk must be positive"));
    }
    let (doc, store) = load(file)?;
    let opts = SimOptions {
        compile: args.options(),
        chunk_size: chunk,
        text_sender_port: (!inject.is_empty()).then_some(text_sender_port),
        injections: inject,
        ..SimOptions::default()
    };
    let sim = simulate_with_store(&doc, &store, net, &opts, seed).map_err(|e| match e {
        SimError::Compile(c) => c.into(),
        SimError::Client(c) => c.into(),
        other => Failure::new(EXIT_FAILED, other.to_string()),
    })?;
    warn_short_leads(&sim.script, NetEstimate {
        latency_ms: net.latency_ms,
        bytes_per_s: net.bytes_per_s,
    });
    if let Some(path) = trace {
        let mut sink = trace_sink(path)?;
        sink.write_all(format_trace(&sim.report.trace).as_bytes())?;
        sink.flush()?;
    }
    print_report(&sim.report);
    Ok(())
}

fn cmd_send(host: &str, port: u16, text: &str) -> Outcome {
    if text.contains('\n') {
        return Err(Failure::new(EXIT_USAGE, "text must be a single line"));
    }
    let mut stream = TcpStream::connect((host, port))?;
    stream.write_all(format!("{text}\n").as_bytes())?;
    stream.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Validate { file, strict } => cmd_validate(&file, strict),
        Command::Compile {
            file,
            output,
            compile,
            assume_latency,
            assume_bandwidth,
        } => {
            let net = assume_latency.zip(assume_bandwidth).map(|(latency_ms, bytes_per_s)| NetEstimate {
                latency_ms,
                bytes_per_s,
            });
            cmd_compile(&file, &output, &compile, net)
        }
        Command::Serve {
            files,
            port,
            host,
            chunk,
            compile,
            plugins,
            text_sender,
        } => {
            let registry = match (plugins, text_sender) {
                (Some(path), _) => RegistryConfig::load(&path).map(Plugins::Registry).map_err(|e| Failure::new(EXIT_IO, e.to_string())),
                (None, true) => Ok(Plugins::TextSender),
                (None, false) => Ok(Plugins::None),
            };
            registry.and_then(|r| cmd_serve(&files, &host, port, chunk, &compile, r))
        }
        Command::Play {
            connect,
            clock,
            speed,
            trace,
            doc,
            budget,
        } => cmd_play(&connect, clock, speed, trace.as_deref(), &doc, budget),
        Command::Oracle {
            file,
            samples,
            seed,
            strict,
        } => cmd_oracle(&file, samples, seed, strict),
        Command::Simulate {
            file,
            latency,
            bandwidth,
            jitter,
            seed,
            chunk,
            compile,
            trace,
            inject,
            text_sender_port,
        } => {
            let mut net = NetModel::new(latency, bandwidth);
            net.jitter_ms = jitter;
            cmd_simulate(&file, net, seed, chunk, &compile, trace.as_deref(), inject, text_sender_port)
        }
        Command::Send { port, host, text } => cmd_send(&host, port, &text),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mobit: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
