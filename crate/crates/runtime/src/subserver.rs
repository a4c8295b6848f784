//! Live data sources attached to the server.
//!
//! A plugin is configured in three steps: the server asks how many ports
//! it needs (`get_port_count`), assigns them (`set_ports`), then hands over
//! the data handles and the plugin's init blob (`set_data`). From then on
//! the plugin runs on its own threads and pushes timestamped payloads into
//! the event sink; the server forwards them to subscribed sessions as
//! STREAM_EVENT frames.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::Deserialize;
use thiserror::Error;

pub use crate::wire::SubserverDescriptor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamEvent {
    pub port: u16,
    /// Plugin clock reading in ms when the payload was produced.
    pub at: u64,
    pub bytes: Vec<u8>,
}

/// Where plugins deliver their payloads. Cloneable across threads.
#[derive(Debug, Clone)]
pub struct EventSink(Sender<StreamEvent>);

impl EventSink {
    pub fn channel() -> (EventSink, Receiver<StreamEvent>) {
        let (tx, rx) = mpsc::channel();
        (EventSink(tx), rx)
    }

    /// Returns false once the receiving side is gone.
    pub fn send(&self, event: StreamEvent) -> bool {
        self.0.send(event).is_ok()
    }
}

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

/// What a plugin receives in `set_data` besides its init blob.
#[derive(Clone)]
pub struct DataHandles {
    pub sink: EventSink,
    pub clock: Clock,
    /// Host to bind the plugin's own listeners on; `None` keeps the plugin
    /// in-process only.
    pub bind_host: Option<String>,
}

#[derive(Debug, Error)]
pub enum SubserverError {
    #[error("plugin needs {expected} ports, got {got}")]
    PortCountMismatch { expected: usize, got: usize },
    #[error("init rejected: {0}")]
    InitRejected(String),
    #[error("ports must be assigned before set_data")]
    PortsUnassigned,
    #[error("plugin is not running")]
    NotRunning,
    #[error("unknown plugin {0:?}")]
    UnknownPlugin(String),
    #[error("registry config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub trait Subserver: Send {
    fn name(&self) -> &str;

    /// MIME type of the live Elements this plugin feeds.
    fn target_mime(&self) -> &str;

    /// Constant for a given plugin, at least 1.
    fn get_port_count(&self) -> usize;

    fn set_ports(&mut self, ports: &[u16]) -> Result<(), SubserverError>;

    fn set_data(&mut self, handles: DataHandles, init: &[u8]) -> Result<(), SubserverError>;

    /// Assigned ports, empty before `set_ports`.
    fn ports(&self) -> &[u16];

    fn descriptor(&self) -> SubserverDescriptor {
        SubserverDescriptor {
            name: self.name().to_string(),
            target_mime: self.target_mime().to_string(),
            ports: self.ports().to_vec(),
        }
    }

    fn stop(&mut self) {}
}

pub fn check_port_count(plugin: &dyn Subserver, ports: &[u16]) -> Result<(), SubserverError> {
    let expected = plugin.get_port_count();
    if ports.len() != expected {
        return Err(SubserverError::PortCountMismatch {
            expected,
            got: ports.len(),
        });
    }
    Ok(())
}

pub const TEXT_SENDER: &str = "text-sender";
pub const LIVE_TEXT_MIME: &str = "text/x-live";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TextSenderConfig {
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_max_len() -> usize {
    4096
}

impl Default for TextSenderConfig {
    fn default() -> Self {
        TextSenderConfig {
            max_len: default_max_len(),
        }
    }
}

#[derive(Clone)]
struct Emitter {
    port: u16,
    sink: EventSink,
    clock: Clock,
    max_len: usize,
}

impl Emitter {
    fn emit(&self, text: &str) -> bool {
        let mut end = text.len().min(self.max_len);
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        self.sink.send(StreamEvent {
            port: self.port,
            at: (self.clock)(),
            bytes: text.as_bytes()[..end].to_vec(),
        })
    }
}

/// Lets a host inject messages into a running text sender.
#[derive(Clone)]
pub struct TextSenderHandle(Emitter);

impl TextSenderHandle {
    pub fn submit(&self, text: &str) -> Result<(), SubserverError> {
        if self.0.emit(text) {
            Ok(())
        } else {
            Err(SubserverError::NotRunning)
        }
    }
}

/// Sends text messages to ongoing presentations. Accepts one message per
/// line on its TCP port when a bind host is given, or through
/// [`TextSenderHandle::submit`].
#[derive(Default)]
pub struct TextSender {
    ports: Vec<u16>,
    emitter: Option<Emitter>,
    stop: Arc<AtomicBool>,
    listener: Option<(std::net::SocketAddr, JoinHandle<()>)>,
}

impl TextSender {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn handle(&self) -> Option<TextSenderHandle> {
        self.emitter.clone().map(TextSenderHandle)
    }

    /// Address of the line listener, if one is running.
    pub fn listen_addr(&self) -> Option<std::net::SocketAddr> {
        self.listener.as_ref().map(|(a, _)| *a)
    }
}

fn serve_lines(stream: TcpStream, emitter: Emitter) {
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        let line = line.trim_end_matches('\r');
        if !line.is_empty() && !emitter.emit(line) {
            break;
        }
    }
}

impl Subserver for TextSender {
    fn name(&self) -> &str {
        TEXT_SENDER
    }

    fn target_mime(&self) -> &str {
        LIVE_TEXT_MIME
    }

    fn get_port_count(&self) -> usize {
        1
    }

    fn set_ports(&mut self, ports: &[u16]) -> Result<(), SubserverError> {
        check_port_count(self, ports)?;
        self.ports = ports.to_vec();
        Ok(())
    }

    fn set_data(&mut self, handles: DataHandles, init: &[u8]) -> Result<(), SubserverError> {
        let &[port] = self.ports.as_slice() else {
            return Err(SubserverError::PortsUnassigned);
        };
        let text = std::str::from_utf8(init).map_err(|_| SubserverError::InitRejected("init is not UTF-8".into()))?;
        let config: TextSenderConfig = toml::from_str(text).map_err(|e| SubserverError::InitRejected(e.message().to_string()))?;
        if config.max_len == 0 {
            return Err(SubserverError::InitRejected("max-len must be positive".into()));
        }
        let emitter = Emitter {
            port,
            sink: handles.sink,
            clock: handles.clock,
            max_len: config.max_len,
        };
        if let Some(host) = handles.bind_host {
            let listener = TcpListener::bind((host.as_str(), port))?;
            let addr = listener.local_addr()?;
            let stop = Arc::clone(&self.stop);
            let em = emitter.clone();
            let join = thread::Builder::new().name("text-sender".into()).spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    match conn {
                        Ok(stream) => {
                            let em = em.clone();
                            thread::spawn(move || serve_lines(stream, em));
                        }
                        Err(e) => log::warn!("text-sender accept failed: {e}"),
                    }
                }
            })?;
            self.listener = Some((addr, join));
        }
        self.emitter = Some(emitter);
        Ok(())
    }

    fn ports(&self) -> &[u16] {
        &self.ports
    }

    fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some((addr, join)) = self.listener.take() {
            let _ = TcpStream::connect(addr);
            let _ = join.join();
        }
        self.emitter = None;
    }
}

impl Drop for TextSender {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Instantiates a plugin by name.
pub fn create(name: &str) -> Result<Box<dyn Subserver>, SubserverError> {
    match name {
        TEXT_SENDER => Ok(Box::new(TextSender::new())),
        other => Err(SubserverError::UnknownPlugin(other.to_string())),
    }
}

pub fn get_port_count(name: &str) -> Result<usize, SubserverError> {
    Ok(create(name)?.get_port_count())
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PluginEntry {
    #[serde(default = "enabled_default")]
    pub enabled: bool,
    /// Path of the init blob, relative to the config file.
    pub init: Option<PathBuf>,
    pub ports: Option<Vec<u16>>,
}

fn enabled_default() -> bool {
    true
}

/// Plugin registry file: one table per plugin name.
///
/// ```toml
/// [text-sender]
/// enabled = true
/// init = "text-sender.toml"
/// ports = [7001]
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegistryConfig {
    pub plugins: BTreeMap<String, PluginEntry>,
    base_dir: PathBuf,
}

impl RegistryConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, SubserverError> {
        let plugins = toml::from_str(text).map_err(|e| SubserverError::Config(e.message().to_string()))?;
        Ok(RegistryConfig {
            plugins,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SubserverError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Only the text sender, on `port`.
    pub fn text_sender(port: u16) -> Self {
        let entry = PluginEntry {
            enabled: true,
            init: None,
            ports: Some(vec![port]),
        };
        RegistryConfig {
            plugins: BTreeMap::from([(TEXT_SENDER.to_string(), entry)]),
            base_dir: PathBuf::new(),
        }
    }

    /// Creates and starts every enabled plugin. Plugins without explicit
    /// ports get consecutive ports starting at `first_free_port`.
    pub fn start(&self, first_free_port: u16, handles: &DataHandles) -> Result<Vec<Box<dyn Subserver>>, SubserverError> {
        let mut next = first_free_port;
        let mut started = Vec::new();
        for (name, entry) in self.plugins.iter().filter(|(_, e)| e.enabled) {
            let mut plugin = create(name)?;
            let ports = match &entry.ports {
                Some(p) => p.clone(),
                None => {
                    let n = plugin.get_port_count() as u16;
                    let p: Vec<u16> = (next..next + n).collect();
                    next += n;
                    p
                }
            };
            plugin.set_ports(&ports)?;
            let init = match &entry.init {
                Some(path) => std::fs::read(self.base_dir.join(path))?,
                None => Vec::new(),
            };
            plugin.set_data(handles.clone(), &init)?;
            started.push(plugin);
        }
        Ok(started)
    }
}
