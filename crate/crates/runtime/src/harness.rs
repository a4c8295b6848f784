//! Deterministic simulation: server session and player on one virtual
//! clock, joined by a shaped in-process link.
//!
//! Link model, per frame of N bytes leaving the server:
//! transmission takes `ceil(N * 10^6 / bytes_per_s)` µs and frames are
//! serialised one at a time; a frame arrives `latency + jitter` after its
//! transmission ends, but never before the frame sent ahead of it. The
//! server hands the link its next frame only when the link is free, so
//! its priorities apply at every frame boundary. Client-to-server frames
//! are small control messages and are delivered instantly.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::Receiver;
use std::sync::Arc;

use mobit_core::flow::{CompileError, CompileOptions, FlowScript};
use mobit_core::model::Document;
use mobit_core::store::{NoStore, PayloadStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::client::{ClientError, ClientOptions, PlaybackReport, Player, PlayerState};
use crate::server::{CompiledDoc, DocStore, ServerSession, SessionOptions};
use crate::subserver::{DataHandles, EventSink, StreamEvent, Subserver, SubserverError, TextSender, TextSenderHandle};
use crate::wire::{Message, HEADER_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetModel {
    pub latency_ms: u64,
    pub bytes_per_s: u64,
    /// Upper bound of the uniform per-frame extra delay.
    pub jitter_ms: u64,
}

impl NetModel {
    pub fn new(latency_ms: u64, bytes_per_s: u64) -> Self {
        assert!(bytes_per_s > 0, "bandwidth must be positive");
        NetModel {
            latency_ms,
            bytes_per_s,
            jitter_ms: 0,
        }
    }

    pub fn transmit_us(&self, frame_len: usize) -> u64 {
        (frame_len as u128 * 1_000_000).div_ceil(self.bytes_per_s as u128) as u64
    }

    /// Time from request to last byte for a payload sent in `chunk_size`
    /// pieces over an idle link, without jitter. This is the lead a Prefetch
    /// needs in this model, framing overhead included.
    pub fn payload_delivery_us(&self, size: u64, chunk_size: usize) -> u64 {
        let chunk = chunk_size as u64;
        let frames = size.div_ceil(chunk).max(1);
        let overhead = (HEADER_LEN + 20) as u64;
        let tx: u64 = (0..frames)
            .map(|i| {
                let body = if i + 1 == frames { size - i * chunk } else { chunk };
                self.transmit_us((body + overhead) as usize)
            })
            .sum();
        tx + self.latency_ms * 1000
    }
}

struct Scheduled<E> {
    at: u64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Time-ordered event queue in µs. Events at the same instant fire in
/// scheduling order. Time never decreases.
pub struct VirtualClock<E> {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Scheduled<E>>,
}

impl<E> Default for VirtualClock<E> {
    fn default() -> Self {
        VirtualClock {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
        }
    }
}

impl<E> VirtualClock<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Panics if `at` lies in the past.
    pub fn schedule(&mut self, at: u64, event: E) {
        assert!(at >= self.now, "cannot schedule at {at} before now {}", self.now);
        self.queue.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    /// Advances to the earliest pending event and returns it.
    pub fn pop(&mut self) -> Option<(u64, E)> {
        let s = self.queue.pop()?;
        self.now = s.at;
        Some((s.at, s.event))
    }

    /// Fires every event at or before `t` in order, then sets now to `t`.
    pub fn advance_to(&mut self, t: u64) -> Vec<(u64, E)> {
        assert!(t >= self.now, "time never decreases");
        let mut fired = Vec::new();
        while self.queue.peek().is_some_and(|s| s.at <= t) {
            fired.extend(self.pop());
        }
        self.now = t;
        fired
    }
}

/// One frame's passage over the downstream link, times in µs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkRecord {
    pub kind: &'static str,
    pub bytes: usize,
    pub tx_start: u64,
    pub tx_end: u64,
    pub arrive: u64,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub compile: CompileOptions,
    pub client: ClientOptions,
    pub chunk_size: usize,
    /// Runs a text sender announced on this port.
    pub text_sender_port: Option<u16>,
    /// Messages submitted to the text sender at the given virtual ms.
    pub injections: Vec<(u64, String)>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            compile: CompileOptions::default(),
            client: ClientOptions::default(),
            chunk_size: SessionOptions::default().chunk_size,
            text_sender_port: None,
            injections: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub report: PlaybackReport,
    pub script: FlowScript,
    pub link: Vec<LinkRecord>,
    /// Payloads still held by the client at the end, by local ref.
    pub payloads: BTreeMap<u32, Vec<u8>>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Subserver(#[from] SubserverError),
    #[error("injections need a text sender")]
    NoTextSender,
}

enum Ev {
    Timer(u64),
    ToClient(Message),
    LinkFree,
    Inject(String),
}

struct Live {
    plugin: TextSender,
    handle: TextSenderHandle,
    events: Receiver<StreamEvent>,
    now_us: Arc<AtomicU64>,
}

struct World {
    net: NetModel,
    clock: VirtualClock<Ev>,
    session: ServerSession,
    player: Player,
    link_busy: bool,
    last_arrival: u64,
    data_rng: ChaCha8Rng,
    stream_rng: ChaCha8Rng,
    timer: Option<(u64, u64)>,
    timer_gen: u64,
    link: Vec<LinkRecord>,
    live: Option<Live>,
}

impl World {
    fn send_to_server(&mut self, msgs: Vec<Message>) {
        for m in msgs {
            self.session.handle(m);
        }
        self.pump_link();
        self.rearm_timer();
    }

    fn pump_link(&mut self) {
        if self.link_busy {
            return;
        }
        let Some(frame) = self.session.poll_frame() else { return };
        let now = self.clock.now();
        let len = frame.frame_len();
        let tx_end = now + self.net.transmit_us(len);
        let rng = if matches!(frame, Message::StreamEvent { .. }) {
            &mut self.stream_rng
        } else {
            &mut self.data_rng
        };
        let jitter = match self.net.jitter_ms {
            0 => 0,
            j => rng.random_range(0..=j * 1000),
        };
        let arrive = (tx_end + self.net.latency_ms * 1000 + jitter).max(self.last_arrival);
        self.last_arrival = arrive;
        self.link.push(LinkRecord {
            kind: frame.name(),
            bytes: len,
            tx_start: now,
            tx_end,
            arrive,
        });
        self.link_busy = true;
        self.clock.schedule(tx_end, Ev::LinkFree);
        self.clock.schedule(arrive, Ev::ToClient(frame));
    }

    fn rearm_timer(&mut self) {
        let due = self.player.next_deadline().map(|d| d.max(self.clock.now()));
        if due != self.timer.map(|(at, _)| at) {
            self.timer_gen += 1;
            self.timer = due.map(|at| (at, self.timer_gen));
            if let Some(at) = due {
                self.clock.schedule(at, Ev::Timer(self.timer_gen));
            }
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        let hello = self.player.start(0);
        self.send_to_server(hello);
        while let Some((now, ev)) = self.clock.pop() {
            if let Some(live) = &self.live {
                live.now_us.store(now, Ordering::SeqCst);
            }
            match ev {
                Ev::LinkFree => {
                    self.link_busy = false;
                    self.pump_link();
                }
                Ev::ToClient(m) => {
                    if self.player.state() == PlayerState::Finished {
                        continue;
                    }
                    let out = self.player.handle_message(now, m)?;
                    self.send_to_server(out);
                }
                Ev::Timer(gen) => {
                    if self.timer.map(|(_, g)| g) != Some(gen) {
                        continue;
                    }
                    self.timer = None;
                    let out = self.player.poll_timers(now);
                    self.send_to_server(out);
                }
                Ev::Inject(text) => {
                    let live = self.live.as_ref().ok_or(SimError::NoTextSender)?;
                    live.handle.submit(&text)?;
                    let events: Vec<StreamEvent> = live.events.try_iter().collect();
                    for e in &events {
                        self.session.push_stream_event(e);
                    }
                    self.pump_link();
                }
            }
        }
        Ok(())
    }
}

/// Runs a full session for `doc` with inline payloads.
pub fn simulate(doc: &Document, net: NetModel, opts: &SimOptions, seed: u64) -> Result<Simulation, SimError> {
    simulate_with_store(doc, &NoStore, net, opts, seed)
}

pub fn simulate_with_store(
    doc: &Document,
    store: &dyn PayloadStore,
    net: NetModel,
    opts: &SimOptions,
    seed: u64,
) -> Result<Simulation, SimError> {
    assert!(net.bytes_per_s > 0, "bandwidth must be positive");
    let (compiled, _) = CompiledDoc::new(doc, &opts.compile, store)?;
    let script = compiled.script.clone();
    let mut docs = DocStore::new();
    docs.insert(compiled);

    let live = match opts.text_sender_port {
        Some(port) => {
            let now_us = Arc::new(AtomicU64::new(0));
            let (sink, events) = EventSink::channel();
            let clock_src = Arc::clone(&now_us);
            let handles = DataHandles {
                sink,
                clock: Arc::new(move || clock_src.load(Ordering::SeqCst) / 1000),
                bind_host: None,
            };
            let mut plugin = TextSender::new();
            plugin.set_ports(&[port])?;
            plugin.set_data(handles, b"")?;
            let handle = plugin.handle().expect("running after set_data");
            Some(Live {
                plugin,
                handle,
                events,
                now_us,
            })
        }
        None if opts.injections.is_empty() => None,
        None => return Err(SimError::NoTextSender),
    };
    let descriptors = live.iter().map(|l| l.plugin.descriptor()).collect();

    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(0);
    let mut stream_rng = ChaCha8Rng::seed_from_u64(seed);
    stream_rng.set_stream(1);

    let mut world = World {
        net,
        clock: VirtualClock::new(),
        session: ServerSession::new(
            Arc::new(docs),
            Arc::new(descriptors),
            SessionOptions {
                chunk_size: opts.chunk_size,
            },
        ),
        player: Player::new(opts.client.clone()),
        link_busy: false,
        last_arrival: 0,
        data_rng,
        stream_rng,
        timer: None,
        timer_gen: 0,
        link: Vec::new(),
        live,
    };
    for (at_ms, text) in &opts.injections {
        world.clock.schedule(at_ms * 1000, Ev::Inject(text.clone()));
    }
    world.run()?;

    let payloads = script
        .header
        .ref_table
        .objects
        .iter()
        .filter_map(|o| {
            let e = world.player.buffer().get(o.local_ref)?;
            e.complete.then(|| (o.local_ref, e.data().to_vec()))
        })
        .collect();
    Ok(Simulation {
        report: world.player.report(),
        script,
        link: world.link,
        payloads,
    })
}
