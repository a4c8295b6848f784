//! Headless client.
//!
//! [`Player`] is the time state machine. It owns no socket and no clock:
//! drivers pass the current client time in microseconds with every call
//! and forward the messages it returns. The TCP driver is [`run`]; the
//! simulation harness drives the same type on a virtual clock.
//!
//! Presentation time (pt) advances with the client clock only while
//! Playing. A Show whose payload is incomplete freezes pt at the Show's
//! timestamp until the last chunk arrives.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use mobit_core::flow::{EventKind, FlowScript};
use thiserror::Error;

use crate::subserver::SubserverDescriptor;
use crate::trace::{Action, Subject, TraceRecord};
use crate::wire::{encode_frame, read_frame, Message, ReadError, PROTOCOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlayerState {
    Init,
    Buffering,
    Playing,
    Stalled,
    Paused,
    Finished,
}

impl fmt::Display for PlayerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferEntry {
    pub local_ref: u32,
    pub expected: u64,
    pub received: u64,
    pub complete: bool,
    /// Timestamp of the ref's last Hide in the script, in ms.
    pub last_use_at: u64,
    data: Vec<u8>,
}

impl BufferEntry {
    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Received payloads. Entries appear with their first chunk.
#[derive(Debug, Clone, Default)]
pub struct BufferManager {
    entries: BTreeMap<u32, BufferEntry>,
    budget: Option<u64>,
    bytes: u64,
    max_bytes: u64,
    violations: u64,
}

impl BufferManager {
    pub fn new(budget: Option<u64>) -> Self {
        BufferManager {
            budget,
            ..Self::default()
        }
    }

    pub fn get(&self, local_ref: u32) -> Option<&BufferEntry> {
        self.entries.get(&local_ref)
    }

    pub fn is_complete(&self, local_ref: u32) -> bool {
        self.entries.get(&local_ref).is_some_and(|e| e.complete)
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn max_bytes(&self) -> u64 {
        self.max_bytes
    }

    /// Times the buffer stayed over budget because nothing was evictable.
    pub fn budget_violations(&self) -> u64 {
        self.violations
    }

    /// Appends one chunk. Chunks must arrive in offset order.
    pub fn receive(&mut self, local_ref: u32, offset: u64, total: u64, bytes: &[u8], last_use_at: u64) -> Result<&BufferEntry, String> {
        let entry = self.entries.entry(local_ref).or_insert_with(|| BufferEntry {
            local_ref,
            expected: total,
            received: 0,
            complete: false,
            last_use_at,
            data: Vec::new(),
        });
        if entry.complete {
            return Err(format!("r{local_ref} is already complete"));
        }
        if total != entry.expected || offset != entry.received {
            return Err(format!(
                "chunk for r{local_ref} at {offset}/{total}, expected {}/{}",
                entry.received, entry.expected
            ));
        }
        if offset + bytes.len() as u64 > total {
            return Err(format!("chunk for r{local_ref} overruns its total"));
        }
        entry.data.extend_from_slice(bytes);
        entry.received += bytes.len() as u64;
        entry.complete = entry.received == entry.expected;
        self.bytes += bytes.len() as u64;
        self.max_bytes = self.max_bytes.max(self.bytes);
        Ok(entry)
    }

    /// Frees refs whose last use lies at or before `now_ms`, largest first,
    /// until the buffer fits its budget.
    pub fn evict(&mut self, now_ms: u64) -> Vec<u32> {
        let Some(budget) = self.budget else { return vec![] };
        if self.bytes <= budget {
            return vec![];
        }
        let mut candidates: Vec<(u64, u32)> = self
            .entries
            .values()
            .filter(|e| e.complete && e.last_use_at <= now_ms)
            .map(|e| (e.received, e.local_ref))
            .collect();
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut freed = Vec::new();
        for (size, r) in candidates {
            if self.bytes <= budget {
                break;
            }
            self.entries.remove(&r);
            self.bytes -= size;
            freed.push(r);
        }
        if self.bytes > budget {
            self.violations += 1;
        }
        freed
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetEstimate {
    pub latency_ms: u64,
    pub bytes_per_s: u64,
}

/// Lead each ref needs so its payload is complete by its first Show:
/// `latency + ceil(size * 1000 / bytes_per_s)` ms.
pub fn buffer_plan(script: &FlowScript, net: NetEstimate) -> BTreeMap<u32, u64> {
    assert!(net.bytes_per_s > 0, "bandwidth must be positive");
    script
        .header
        .ref_table
        .objects
        .iter()
        .map(|o| {
            let transfer = (o.payload_size as u128 * 1000).div_ceil(net.bytes_per_s as u128) as u64;
            (o.local_ref, net.latency_ms + transfer)
        })
        .collect()
}

/// Refs whose planned lead exceeds the script's prefetch lead, with the
/// lead they would need.
pub fn insufficient_lead(script: &FlowScript, net: NetEstimate) -> Vec<(u32, u64)> {
    buffer_plan(script, net)
        .into_iter()
        .filter(|&(_, lead)| lead > script.header.prefetch_lead_ms)
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct ClientOptions {
    pub doc_id: String,
    pub buffer_budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaybackReport {
    pub state: PlayerState,
    pub stall_count: u32,
    pub total_stall_ms: f64,
    /// Client time spent before playback started.
    pub startup_ms: f64,
    pub max_buffer_bytes: u64,
    pub budget_violations: u64,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection lost in state {}", .report.state)]
    ConnectionLost { report: Box<PlaybackReport> },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error {code}: {msg}")]
    Server { code: u16, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy)]
struct Stall {
    instance: u32,
    local_ref: u32,
    since_us: u64,
}

pub struct Player {
    opts: ClientOptions,
    state: PlayerState,
    script: Option<FlowScript>,
    server_info: Vec<SubserverDescriptor>,
    last_hide: Vec<u64>,
    cursor: usize,
    requested: BTreeSet<u32>,
    buffer: BufferManager,
    /// pt in µs at `wall_base`.
    pt_base: u64,
    wall_base: u64,
    started_at: u64,
    startup_us: u64,
    stall: Option<Stall>,
    stall_count: u32,
    stall_us: u64,
    visible: BTreeMap<u32, u32>,
    trace: Vec<TraceRecord>,
}

fn protocol(msg: impl Into<String>) -> ClientError {
    ClientError::Protocol(msg.into())
}

impl Player {
    pub fn new(opts: ClientOptions) -> Self {
        let budget = opts.buffer_budget;
        Player {
            opts,
            state: PlayerState::Init,
            script: None,
            server_info: Vec::new(),
            last_hide: Vec::new(),
            cursor: 0,
            requested: BTreeSet::new(),
            buffer: BufferManager::new(budget),
            pt_base: 0,
            wall_base: 0,
            started_at: 0,
            startup_us: 0,
            stall: None,
            stall_count: 0,
            stall_us: 0,
            visible: BTreeMap::new(),
            trace: Vec::new(),
        }
    }

    pub fn state(&self) -> PlayerState {
        self.state
    }

    pub fn script(&self) -> Option<&FlowScript> {
        self.script.as_ref()
    }

    pub fn buffer(&self) -> &BufferManager {
        &self.buffer
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn set_server_info(&mut self, info: Vec<SubserverDescriptor>) {
        self.server_info = info;
    }

    /// Empty until SERVER_INFO arrives.
    pub fn get_server_info(&self) -> &[SubserverDescriptor] {
        &self.server_info
    }

    /// Instances currently displayed.
    pub fn visible(&self) -> BTreeSet<u32> {
        self.visible.keys().copied().collect()
    }

    pub fn report(&self) -> PlaybackReport {
        PlaybackReport {
            state: self.state,
            stall_count: self.stall_count,
            total_stall_ms: self.stall_us as f64 / 1000.0,
            startup_ms: self.startup_us as f64 / 1000.0,
            max_buffer_bytes: self.buffer.max_bytes(),
            budget_violations: self.buffer.budget_violations(),
            trace: self.trace.clone(),
        }
    }

    fn record(&mut self, now: u64, action: Action, subject: Subject, detail: String) {
        self.trace.push(TraceRecord {
            wall_us: now,
            action,
            subject,
            detail,
        });
    }

    fn set_state(&mut self, now: u64, to: PlayerState) {
        let detail = format!("{}->{}", self.state, to);
        self.state = to;
        self.record(now, Action::StateChange, Subject::None, detail);
    }

    fn pt_now(&self, now: u64) -> u64 {
        match self.state {
            PlayerState::Playing => self.pt_base + now.saturating_sub(self.wall_base),
            _ => self.pt_base,
        }
    }

    /// Opens the session.
    pub fn start(&mut self, now: u64) -> Vec<Message> {
        self.started_at = now;
        vec![Message::Hello {
            version: PROTOCOL_VERSION,
            doc_id: self.opts.doc_id.clone(),
        }]
    }

    pub fn handle_message(&mut self, now: u64, msg: Message) -> Result<Vec<Message>, ClientError> {
        let mut out = Vec::new();
        match msg {
            Message::ServerInfo { subservers } if self.state == PlayerState::Init => {
                self.set_server_info(subservers);
            }
            Message::Script(bytes) if self.state == PlayerState::Init => {
                let text = std::str::from_utf8(&bytes).map_err(|_| protocol("script is not UTF-8"))?;
                let script = FlowScript::parse(text).map_err(|e| protocol(e.to_string()))?;
                script.check().map_err(|e| protocol(e.to_string()))?;
                self.load(now, script, &mut out);
            }
            Message::DataChunk {
                local_ref,
                offset,
                total,
                bytes,
            } => self.receive(now, local_ref, offset, total, &bytes, &mut out)?,
            Message::StreamEvent { port, at, bytes } => self.deliver(now, port, at, &bytes),
            Message::Error { code, msg } => return Err(ClientError::Server { code, msg }),
            other => return Err(protocol(format!("unexpected {} in state {}", other.name(), self.state))),
        }
        Ok(out)
    }

    fn load(&mut self, now: u64, script: FlowScript, out: &mut Vec<Message>) {
        let table = &script.header.ref_table;
        let mut last_hide = vec![script.header.total_duration; table.objects.len()];
        for e in &script.events {
            if let EventKind::Hide { instance_id } = e.kind {
                let r = table.instance(instance_id).expect("checked script").local_ref;
                last_hide[r as usize] = e.at;
            }
        }
        self.last_hide = last_hide;
        let initial: Vec<u32> = script
            .events
            .iter()
            .take_while(|e| e.at == 0)
            .filter_map(|e| match e.kind {
                EventKind::Prefetch { local_ref } => Some(local_ref),
                _ => None,
            })
            .collect();
        self.script = Some(script);
        self.set_state(now, PlayerState::Buffering);
        for r in initial {
            self.request(r, out);
        }
        self.try_begin(now, out);
    }

    fn request(&mut self, local_ref: u32, out: &mut Vec<Message>) {
        if self.requested.insert(local_ref) {
            out.push(Message::DataReq { local_ref });
        }
    }

    fn try_begin(&mut self, now: u64, out: &mut Vec<Message>) {
        if self.state != PlayerState::Buffering {
            return;
        }
        if self.requested.iter().all(|&r| self.buffer.is_complete(r)) {
            self.startup_us = now - self.started_at;
            self.pt_base = 0;
            self.wall_base = now;
            self.set_state(now, PlayerState::Playing);
            self.advance(now, out);
        }
    }

    fn receive(&mut self, now: u64, r: u32, offset: u64, total: u64, bytes: &[u8], out: &mut Vec<Message>) -> Result<(), ClientError> {
        let script = self.script.as_ref().ok_or_else(|| protocol("data before script"))?;
        let expected = script
            .header
            .ref_table
            .object(r)
            .ok_or_else(|| protocol(format!("chunk for unknown ref {r}")))?
            .payload_size;
        if !self.requested.contains(&r) || total != expected {
            return Err(protocol(format!("unsolicited or mis-sized chunk for r{r}")));
        }
        let complete = self.buffer.receive(r, offset, total, bytes, self.last_hide[r as usize]).map_err(protocol)?.complete;
        self.record(
            now,
            Action::Receive,
            Subject::Ref(r),
            format!("offset={offset} len={} total={total}", bytes.len()),
        );
        if complete {
            match self.stall {
                Some(s) if s.local_ref == r => {
                    self.stall = None;
                    self.stall_us += now - s.since_us;
                    self.record(
                        now,
                        Action::Resume,
                        Subject::Instance(s.instance),
                        format!("r={r} stalled_us={}", now - s.since_us),
                    );
                    self.wall_base = now;
                    self.set_state(now, PlayerState::Playing);
                    self.advance(now, out);
                }
                _ => self.try_begin(now, out),
            }
        }
        let pt_ms = self.pt_now(now) / 1000;
        self.buffer.evict(pt_ms);
        Ok(())
    }

    fn deliver(&mut self, now: u64, port: u16, at: u64, bytes: &[u8]) {
        let text: String = String::from_utf8_lossy(bytes)
            .chars()
            .map(|c| if c.is_control() { ' ' } else { c })
            .collect();
        let Some(mime) = self
            .server_info
            .iter()
            .find(|d| d.ports.contains(&port))
            .map(|d| d.target_mime.clone())
        else {
            self.record(now, Action::Warning, Subject::None, format!("unknown-port port={port} at={at}"));
            return;
        };
        let table = &self.script.as_ref().expect("visible instances imply a script").header.ref_table;
        let targets: Vec<u32> = self
            .visible
            .iter()
            .filter(|(_, &r)| table.object(r).is_some_and(|o| o.mime_type.to_string() == mime))
            .map(|(&i, _)| i)
            .collect();
        if targets.is_empty() {
            self.record(now, Action::Warning, Subject::None, format!("no-target port={port} at={at}"));
        }
        let pt = self.pt_now(now) / 1000;
        for i in targets {
            self.record(
                now,
                Action::StreamDeliver,
                Subject::Instance(i),
                format!("port={port} at={at} pt={pt} text={text}"),
            );
        }
    }

    fn advance(&mut self, now: u64, out: &mut Vec<Message>) {
        let pt = self.pt_now(now);
        while self.state == PlayerState::Playing {
            let script = self.script.as_ref().expect("playing implies a script");
            let Some(event) = script.events.get(self.cursor) else { break };
            if event.at * 1000 > pt {
                break;
            }
            let at = event.at;
            match event.kind.clone() {
                EventKind::Prefetch { local_ref } => self.request(local_ref, out),
                EventKind::Show {
                    instance_id,
                    local_ref,
                    rect,
                    z,
                    params,
                } => {
                    if !self.buffer.is_complete(local_ref) {
                        self.pt_base = at * 1000;
                        self.stall = Some(Stall {
                            instance: instance_id,
                            local_ref,
                            since_us: now,
                        });
                        self.stall_count += 1;
                        self.set_state(now, PlayerState::Stalled);
                        self.record(now, Action::Stall, Subject::Instance(instance_id), format!("r={local_ref} pt={at}"));
                        return;
                    }
                    let bg = params.background_color.map_or("-".to_string(), |c| c.to_string());
                    self.record(
                        now,
                        Action::Compose,
                        Subject::Instance(instance_id),
                        format!(
                            "r={local_ref} rect={},{},{},{} z={z} bg={bg} font-scale={} scale={} pt={at}",
                            mobit_core::flow::format_px(rect.x),
                            mobit_core::flow::format_px(rect.y),
                            mobit_core::flow::format_px(rect.w),
                            mobit_core::flow::format_px(rect.h),
                            params.font_scale,
                            params.scale_mode.as_str(),
                        ),
                    );
                    self.record(now, Action::Display, Subject::Instance(instance_id), format!("pt={at}"));
                    self.visible.insert(instance_id, local_ref);
                }
                EventKind::Hide { instance_id } => {
                    self.visible.remove(&instance_id);
                    self.record(now, Action::Delete, Subject::Instance(instance_id), format!("pt={at}"));
                    self.buffer.evict(at);
                }
                EventKind::End => {
                    self.pt_base = at * 1000;
                    self.set_state(now, PlayerState::Finished);
                    out.push(Message::Bye);
                }
            }
            self.cursor += 1;
        }
    }

    /// Executes every event due at `now`.
    pub fn poll_timers(&mut self, now: u64) -> Vec<Message> {
        let mut out = Vec::new();
        self.advance(now, &mut out);
        out
    }

    /// Client time at which the next event falls due, if the timeline is
    /// running.
    pub fn next_deadline(&self) -> Option<u64> {
        if self.state != PlayerState::Playing {
            return None;
        }
        let event = self.script.as_ref()?.events.get(self.cursor)?;
        Some(self.wall_base + (event.at * 1000).saturating_sub(self.pt_base))
    }

    pub fn pause(&mut self, now: u64) -> bool {
        if self.state != PlayerState::Playing {
            return false;
        }
        self.pt_base = self.pt_now(now);
        self.set_state(now, PlayerState::Paused);
        true
    }

    /// Returns `None` unless paused.
    pub fn resume(&mut self, now: u64) -> Option<Vec<Message>> {
        if self.state != PlayerState::Paused {
            return None;
        }
        self.wall_base = now;
        self.set_state(now, PlayerState::Playing);
        Some(self.poll_timers(now))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClockMode {
    Real,
    /// Wall time scaled by `speed`.
    Simulated { speed: f64 },
}

enum Inbound {
    Frame(Message),
    Closed,
    Failed(String),
}

/// Plays a document from a server over TCP. Trace records are written to
/// `sink` as they are produced.
pub fn run(
    addr: impl ToSocketAddrs,
    clock: ClockMode,
    opts: ClientOptions,
    mut sink: Option<&mut dyn Write>,
) -> Result<PlaybackReport, ClientError> {
    let speed = match clock {
        ClockMode::Real => 1.0,
        ClockMode::Simulated { speed } if speed > 0.0 && speed.is_finite() => speed,
        ClockMode::Simulated { speed } => return Err(protocol(format!("invalid clock speed {speed}"))),
    };
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = stream.try_clone()?;
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || loop {
        let item = match read_frame(&mut reader) {
            Ok(Some(m)) => Inbound::Frame(m),
            Ok(None) => Inbound::Closed,
            Err(ReadError::Io(e)) => Inbound::Failed(e.to_string()),
            Err(ReadError::Wire(e)) => Inbound::Failed(e.to_string()),
        };
        let last = !matches!(item, Inbound::Frame(_));
        if tx.send(item).is_err() || last {
            break;
        }
    });

    let origin = Instant::now();
    let now = || (origin.elapsed().as_secs_f64() * 1e6 * speed) as u64;
    let mut player = Player::new(opts);
    let mut written = 0;
    let mut send = |msgs: Vec<Message>| -> io::Result<()> {
        for m in msgs {
            writer.write_all(&encode_frame(&m).expect("client frames are small"))?;
        }
        Ok(())
    };
    send(player.start(now()))?;

    let result = loop {
        let item = match player.next_deadline() {
            Some(deadline) => {
                let wait_us = deadline.saturating_sub(now()) as f64 / speed;
                match rx.recv_timeout(Duration::from_secs_f64(wait_us / 1e6)) {
                    Ok(item) => Some(item),
                    Err(mpsc::RecvTimeoutError::Timeout) => None,
                    Err(mpsc::RecvTimeoutError::Disconnected) => Some(Inbound::Closed),
                }
            }
            None => Some(rx.recv().unwrap_or(Inbound::Closed)),
        };
        let step = match item {
            None => Ok(player.poll_timers(now())),
            Some(Inbound::Frame(m)) => player.handle_message(now(), m),
            Some(Inbound::Closed) | Some(Inbound::Failed(_)) if player.state() == PlayerState::Finished => break Ok(()),
            Some(Inbound::Closed) => break Err(None),
            Some(Inbound::Failed(e)) => break Err(Some(e)),
        };
        if let Some(out) = sink.as_deref_mut() {
            for r in &player.trace()[written..] {
                writeln!(out, "{r}")?;
            }
            written = player.trace().len();
        }
        match step {
            Ok(msgs) => send(msgs)?,
            Err(e) => {
                let _ = stream.shutdown(Shutdown::Both);
                return Err(e);
            }
        }
        if player.state() == PlayerState::Finished {
            break Ok(());
        }
    };
    let _ = stream.shutdown(Shutdown::Both);
    if let Some(out) = sink {
        out.flush()?;
    }
    match result {
        Ok(()) => Ok(player.report()),
        Err(reason) => {
            if let Some(e) = reason {
                log::warn!("connection failed: {e}");
            }
            Err(ClientError::ConnectionLost {
                report: Box::new(player.report()),
            })
        }
    }
}
