//! Document server: compiled document store, the per-session protocol state
//! machine, and a TCP driver running one session per connection.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use mobit_core::flow::{compile, CompileError, CompileOptions, FlowScript, Warning};
use mobit_core::model::Document;
use mobit_core::store::{payload_bytes, PayloadStore};

use crate::subserver::{StreamEvent, Subserver, SubserverDescriptor};
use crate::wire::{encode_frame, error_code, read_frame, Message, ReadError, PROTOCOL_VERSION};

pub const DEFAULT_CHUNK_SIZE: usize = 64 * 1024;

/// A document compiled at load time together with its payloads, indexed
/// by local ref.
#[derive(Debug)]
pub struct CompiledDoc {
    pub script: FlowScript,
    pub script_bytes: Vec<u8>,
    payloads: Vec<Vec<u8>>,
    /// Position of each ref's Prefetch in the script.
    rank: Vec<usize>,
}

impl CompiledDoc {
    pub fn new(doc: &Document, opts: &CompileOptions, store: &dyn PayloadStore) -> Result<(Self, Vec<Warning>), CompileError> {
        let compiled = compile(doc, opts, store)?;
        let script = compiled.script;
        let mut payloads = Vec::with_capacity(script.header.ref_table.objects.len());
        for obj in &script.header.ref_table.objects {
            let element = doc.element(obj.id).expect("ref table lists elements only");
            let bytes = payload_bytes(element, store).map_err(|source| CompileError::Payload { id: obj.id, source })?;
            if bytes.len() as u64 != obj.payload_size {
                let source = io::Error::other("payload changed size while loading");
                return Err(CompileError::Payload { id: obj.id, source });
            }
            payloads.push(bytes);
        }
        let mut rank = vec![usize::MAX; payloads.len()];
        for (i, r) in script.prefetch_order().into_iter().enumerate() {
            rank[r as usize] = i;
        }
        let script_bytes = script.to_bytes();
        Ok((
            CompiledDoc {
                script,
                script_bytes,
                payloads,
                rank,
            },
            compiled.warnings,
        ))
    }

    pub fn id(&self) -> &str {
        &self.script.header.doc_id
    }

    pub fn payload(&self, local_ref: u32) -> Option<&[u8]> {
        self.payloads.get(local_ref as usize).map(Vec::as_slice)
    }
}

/// Read-only after startup.
#[derive(Debug, Default)]
pub struct DocStore {
    docs: BTreeMap<String, Arc<CompiledDoc>>,
}

impl DocStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc: CompiledDoc) {
        self.docs.insert(doc.id().to_string(), Arc::new(doc));
    }

    /// An empty id selects the only document of a single-document store.
    pub fn get(&self, id: &str) -> Option<Arc<CompiledDoc>> {
        if id.is_empty() && self.docs.len() == 1 {
            return self.docs.values().next().cloned();
        }
        self.docs.get(id).cloned()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.docs.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionOptions {
    pub chunk_size: usize,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    AwaitHello,
    Active,
    /// No more input is processed; queued control frames still drain.
    Closed,
}

/// Protocol state of one session, independent of any transport. Feed it
/// client messages with [`handle`](Self::handle) and drain outgoing frames
/// with [`poll_frame`](Self::poll_frame).
///
/// Outgoing priority: control replies, then stream events, then data
/// chunks. Chunks of one ref are sent contiguously; when several refs are
/// pending, the one whose Prefetch comes first in the script goes next.
#[derive(Debug)]
pub struct ServerSession {
    store: Arc<DocStore>,
    subservers: Arc<Vec<SubserverDescriptor>>,
    opts: SessionOptions,
    state: SessionState,
    doc: Option<Arc<CompiledDoc>>,
    control: VecDeque<Message>,
    stream: VecDeque<Message>,
    pending: BTreeSet<(usize, u32)>,
    current: Option<(u32, usize)>,
}

impl ServerSession {
    pub fn new(store: Arc<DocStore>, subservers: Arc<Vec<SubserverDescriptor>>, opts: SessionOptions) -> Self {
        assert!(opts.chunk_size > 0, "chunk size must be positive");
        ServerSession {
            store,
            subservers,
            opts,
            state: SessionState::AwaitHello,
            doc: None,
            control: VecDeque::new(),
            stream: VecDeque::new(),
            pending: BTreeSet::new(),
            current: None,
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    /// True after SERVER_INFO was queued and while the session is open.
    pub fn subscribed(&self) -> bool {
        self.state == SessionState::Active
    }

    /// Closed with nothing left to send.
    pub fn is_finished(&self) -> bool {
        self.state == SessionState::Closed && self.control.is_empty()
    }

    pub fn has_output(&self) -> bool {
        !self.control.is_empty() || !self.stream.is_empty() || self.current.is_some() || !self.pending.is_empty()
    }

    fn fail(&mut self, code: u16, msg: impl Into<String>) {
        let msg = msg.into();
        log::debug!("session error {code}: {msg}");
        self.stream.clear();
        self.pending.clear();
        self.current = None;
        self.control.push_back(Message::Error { code, msg });
        self.state = SessionState::Closed;
    }

    /// Reports an undecodable frame from the client.
    pub fn protocol_error(&mut self, reason: &str) {
        if self.state != SessionState::Closed {
            self.fail(error_code::PROTOCOL, reason);
        }
    }

    /// The peer went away; drop everything.
    pub fn disconnect(&mut self) {
        self.state = SessionState::Closed;
        self.control.clear();
        self.stream.clear();
        self.pending.clear();
        self.current = None;
    }

    pub fn handle(&mut self, msg: Message) {
        match (self.state, msg) {
            (SessionState::Closed, _) => {}
            (SessionState::AwaitHello, Message::Hello { version, doc_id }) => {
                if version != PROTOCOL_VERSION {
                    return self.fail(error_code::PROTOCOL, format!("unsupported version {version}"));
                }
                let Some(doc) = self.store.get(&doc_id) else {
                    return self.fail(error_code::UNKNOWN_DOC, format!("unknown document {doc_id:?}"));
                };
                self.control.push_back(Message::ServerInfo {
                    subservers: self.subservers.as_ref().clone(),
                });
                self.control.push_back(Message::Script(doc.script_bytes.clone()));
                self.doc = Some(doc);
                self.state = SessionState::Active;
            }
            (SessionState::Active, Message::DataReq { local_ref }) => {
                let doc = self.doc.as_ref().expect("active sessions have a document");
                if doc.payload(local_ref).is_none() {
                    return self.fail(error_code::UNKNOWN_REF, format!("unknown local ref {local_ref}"));
                }
                let busy = self.current.is_some_and(|(r, _)| r == local_ref);
                if !busy {
                    self.pending.insert((doc.rank[local_ref as usize], local_ref));
                }
            }
            (SessionState::Active, Message::Bye) => self.disconnect(),
            (_, other) => self.fail(error_code::PROTOCOL, format!("unexpected {}", other.name())),
        }
    }

    /// Queues a live event if the session is subscribed.
    pub fn push_stream_event(&mut self, event: &StreamEvent) -> bool {
        if !self.subscribed() {
            return false;
        }
        self.stream.push_back(Message::StreamEvent {
            port: event.port,
            at: event.at,
            bytes: event.bytes.clone(),
        });
        true
    }

    pub fn poll_frame(&mut self) -> Option<Message> {
        if let Some(m) = self.control.pop_front() {
            return Some(m);
        }
        if let Some(m) = self.stream.pop_front() {
            return Some(m);
        }
        if self.current.is_none() {
            let (_, r) = self.pending.pop_first()?;
            self.current = Some((r, 0));
        }
        let (r, offset) = self.current.expect("set above");
        let payload = self.doc.as_ref()?.payload(r).expect("validated on request");
        let end = (offset + self.opts.chunk_size).min(payload.len());
        self.current = (end < payload.len()).then_some((r, end));
        Some(Message::DataChunk {
            local_ref: r,
            offset: offset as u64,
            total: payload.len() as u64,
            bytes: payload[offset..end].to_vec(),
        })
    }
}

struct Shared {
    session: Mutex<ServerSession>,
    wake: Condvar,
    stream: TcpStream,
}

impl Shared {
    fn with<T>(&self, f: impl FnOnce(&mut ServerSession) -> T) -> T {
        let out = f(&mut self.session.lock().unwrap());
        self.wake.notify_all();
        out
    }
}

fn run_writer(shared: Arc<Shared>) {
    let mut out = shared.stream.try_clone().expect("clone socket");
    loop {
        let next = {
            let mut s = shared.session.lock().unwrap();
            while !s.has_output() && !s.is_finished() {
                s = shared.wake.wait(s).unwrap();
            }
            if s.is_finished() && !s.has_output() {
                break;
            }
            s.poll_frame()
        };
        let Some(msg) = next else { continue };
        let bytes = encode_frame(&msg).expect("server frames fit the size limit");
        if let Err(e) = out.write_all(&bytes) {
            log::debug!("write failed: {e}");
            shared.with(ServerSession::disconnect);
            break;
        }
    }
    let _ = shared.stream.shutdown(Shutdown::Both);
}

fn run_reader(shared: Arc<Shared>) {
    let mut input = shared.stream.try_clone().expect("clone socket");
    loop {
        match read_frame(&mut input) {
            Ok(Some(msg)) => shared.with(|s| s.handle(msg)),
            Ok(None) => {
                shared.with(ServerSession::disconnect);
                break;
            }
            Err(ReadError::Wire(e)) => {
                shared.with(|s| s.protocol_error(&e.to_string()));
                break;
            }
            Err(ReadError::Io(e)) => {
                log::debug!("read failed: {e}");
                shared.with(ServerSession::disconnect);
                break;
            }
        }
        if shared.session.lock().unwrap().state() == SessionState::Closed {
            break;
        }
    }
}

type Sessions = Arc<Mutex<Vec<Weak<Shared>>>>;

/// A running TCP server. Dropping it without [`shutdown`](Self::shutdown)
/// leaves the threads running until the process exits.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    fanout: Option<JoinHandle<()>>,
    sessions: Sessions,
    plugins: Vec<Box<dyn Subserver>>,
}

impl Server {
    /// Starts accepting on `listener`. `events` carries the plugins' output
    /// and is fanned out to every subscribed session.
    pub fn start(
        listener: TcpListener,
        store: Arc<DocStore>,
        opts: SessionOptions,
        plugins: Vec<Box<dyn Subserver>>,
        events: Option<Receiver<StreamEvent>>,
    ) -> io::Result<Server> {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let sessions: Sessions = Arc::default();
        let descriptors = Arc::new(plugins.iter().map(|p| p.descriptor()).collect::<Vec<_>>());

        let acceptor = {
            let stop = Arc::clone(&stop);
            let sessions = Arc::clone(&sessions);
            thread::Builder::new().name("mobit-accept".into()).spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match conn {
                        Ok(s) => s,
                        Err(e) => {
                            log::warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    let _ = stream.set_nodelay(true);
                    log::info!("session from {:?}", stream.peer_addr().ok());
                    let session = ServerSession::new(Arc::clone(&store), Arc::clone(&descriptors), opts);
                    let shared = Arc::new(Shared {
                        session: Mutex::new(session),
                        wake: Condvar::new(),
                        stream,
                    });
                    {
                        let mut list = sessions.lock().unwrap();
                        list.retain(|w| w.strong_count() > 0);
                        list.push(Arc::downgrade(&shared));
                    }
                    let r = Arc::clone(&shared);
                    thread::spawn(move || run_reader(r));
                    thread::spawn(move || run_writer(shared));
                }
            })?
        };

        let fanout = match events {
            Some(rx) => {
                let stop = Arc::clone(&stop);
                let sessions = Arc::clone(&sessions);
                Some(thread::Builder::new().name("mobit-fanout".into()).spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        let event = match rx.recv_timeout(Duration::from_millis(50)) {
                            Ok(e) => e,
                            Err(RecvTimeoutError::Timeout) => continue,
                            Err(RecvTimeoutError::Disconnected) => break,
                        };
                        let live: Vec<Arc<Shared>> = sessions.lock().unwrap().iter().filter_map(Weak::upgrade).collect();
                        for s in live {
                            s.with(|s| s.push_stream_event(&event));
                        }
                    }
                })?)
            }
            None => None,
        };

        Ok(Server {
            addr,
            stop,
            acceptor: Some(acceptor),
            fanout,
            sessions,
            plugins,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn descriptors(&self) -> Vec<SubserverDescriptor> {
        self.plugins.iter().map(|p| p.descriptor()).collect()
    }

    /// Blocks until the acceptor exits, which only happens on shutdown.
    pub fn wait(mut self) {
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        for p in &mut self.plugins {
            p.stop();
        }
        if let Some(f) = self.fanout.take() {
            let _ = f.join();
        }
        for s in self.sessions.lock().unwrap().iter().filter_map(Weak::upgrade) {
            s.with(ServerSession::disconnect);
            let _ = s.stream.shutdown(Shutdown::Both);
        }
    }
}
