//! End-to-end acceptance run. Prints one PASS or FAIL line per criterion
//! and exits non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, BufReader};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::Instant;

use base64::prelude::*;
use mobit_core::docio::{parse_document, serialize_document};
use mobit_core::flow::{linearize, replay, scene_at, CompileError, CompileOptions, EventKind, FlowScript};
use mobit_core::model::{Document, ObjectId, Payload};
use mobit_core::testing::{inject_cycle, random_document, GenConfig};
use mobit_core::validate::{check_acyclic, Mode, StructureError};
use mobit_runtime::client::{buffer_plan, NetEstimate, PlayerState};
use mobit_runtime::harness::{simulate, NetModel, SimOptions, Simulation};
use mobit_runtime::trace::{check_scene_fidelity, format_trace, parse_trace, validate_trace, Action};
use mobit_runtime::wire::{decode_frame, encode_frame, FrameReader, Message, SubserverDescriptor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn load(name: &str) -> Document {
    parse_document(&std::fs::read(fixture(name)).unwrap()).unwrap()
}

fn generated(seed: u64, overflow: bool) -> Document {
    let cfg = GenConfig {
        max_depth: 5,
        max_entries: 50,
        allow_overflow: overflow,
        ..GenConfig::default()
    };
    random_document(&mut ChaCha8Rng::seed_from_u64(seed), &cfg)
}

fn entry_count(doc: &Document) -> usize {
    doc.mobs().map(|m| m.playlist.len()).sum()
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut probes = 0usize;
    let mut depth = 0;
    for seed in 0..500u64 {
        let doc = generated(seed, true);
        ensure!(entry_count(&doc) <= 50, "seed {seed}: too many entries");
        let script = linearize(&doc, &CompileOptions::default()).map_err(|e| format!("seed {seed}: {e}"))?;
        let stamps: Vec<u64> = script.events.iter().map(|e| e.at).collect::<BTreeSet<_>>().into_iter().collect();
        let mut times = stamps.clone();
        times.extend(stamps.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2));
        for t in times {
            let direct = scene_at(&doc, t, Mode::Clamp).map_err(|e| e.to_string())?;
            let replayed = replay(&script, t).map_err(|e| e.to_string())?;
            if let Some(diff) = replayed.diff(&direct, 1e-6) {
                return Err(format!("seed {seed} t={t}: {diff}"));
            }
            probes += 1;
        }
        depth = depth.max(tree_depth(&doc, doc.root()));
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(depth <= 5, "generated depth {depth}");
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("500 documents, {probes} probes agree, max depth {depth}, {secs:.2} s"))
}

fn tree_depth(doc: &Document, id: ObjectId) -> usize {
    match doc.mob(id) {
        Some(m) => 1 + m.playlist.iter().map(|e| tree_depth(doc, e.target)).max().unwrap_or(0),
        None => 1,
    }
}

/// True when `cycle` closes on itself, every hop is a playlist entry and
/// its first node is reachable from the root.
fn genuine_cycle(doc: &Document, cycle: &[ObjectId]) -> bool {
    if cycle.len() < 2 || cycle.first() != cycle.last() {
        return false;
    }
    let hops_exist = cycle.windows(2).all(|w| {
        doc.mob(w[0])
            .is_some_and(|m| m.playlist.iter().any(|e| e.target == w[1]))
    });
    let mut seen = BTreeSet::from([doc.root()]);
    let mut queue = VecDeque::from([doc.root()]);
    while let Some(id) = queue.pop_front() {
        for e in doc.mob(id).map(|m| m.playlist.as_slice()).unwrap_or_default() {
            if seen.insert(e.target) {
                queue.push_back(e.target);
            }
        }
    }
    hops_exist && seen.contains(&cycle[0])
}

fn acyclicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let doc = inject_cycle(&mut rng, &generated(10_000 + i, true));
        match check_acyclic(&doc) {
            Err(StructureError::Cycle(path)) => ensure!(genuine_cycle(&doc, &path), "case {i}: {path:?} is not a cycle"),
            other => return Err(format!("case {i}: got {other:?}")),
        }
    }
    Ok("200 injected cycles found, every path re-walked".into())
}

fn clamp_soundness() -> Outcome {
    let mut modified = 0;
    let mut shows = 0;
    for seed in 0..500u64 {
        let doc = generated(20_000 + seed, true);
        let canvas = doc.canvas();
        let total = doc.total_duration();
        let compiled = mobit_core::flow::compile(&doc, &CompileOptions::default(), &mobit_core::store::NoStore)
            .map_err(|e| e.to_string())?;
        let mut open = BTreeMap::new();
        for ev in &compiled.script.events {
            match &ev.kind {
                EventKind::Show { instance_id, rect: r, .. } => {
                    let inside = r.x >= -1e-6
                        && r.y >= -1e-6
                        && r.x + r.w <= canvas.width as f64 + 1e-6
                        && r.y + r.h <= canvas.height as f64 + 1e-6;
                    ensure!(inside, "seed {seed}: rect {r:?} leaves the canvas");
                    ensure!(ev.at < total, "seed {seed}: show at {} ≥ {total}", ev.at);
                    open.insert(*instance_id, ev.at);
                    shows += 1;
                }
                EventKind::Hide { instance_id } => {
                    let shown = open.remove(instance_id).ok_or(format!("seed {seed}: hide without show"))?;
                    ensure!(shown < ev.at && ev.at <= total, "seed {seed}: interval [{shown}, {}) escapes", ev.at);
                }
                _ => {}
            }
        }
        ensure!(open.is_empty(), "seed {seed}: instances never hidden");
        if !compiled.warnings.is_empty() {
            modified += 1;
            let strict = CompileOptions {
                mode: Mode::Strict,
                ..CompileOptions::default()
            };
            match linearize(&doc, &strict) {
                Err(CompileError::Rejected(_)) => {}
                other => return Err(format!("seed {seed}: strict accepted a clamped document: {:?}", other.map(|_| ()))),
            }
        }
    }
    ensure!(modified > 50, "only {modified} documents exercised clamping");
    Ok(format!("500 documents, {shows} shows inside canvas and duration, {modified} clamped ones rejected by strict"))
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn sim_digest(sim: &Simulation) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(format_trace(&sim.report.trace));
    for r in &sim.link {
        h.update(format!("{} {} {} {} {}\n", r.kind, r.bytes, r.tx_start, r.tx_end, r.arrive));
    }
    h.finalize().into()
}

fn determinism() -> Outcome {
    for case in 0..20u64 {
        let doc = generated(30_000 + case, true);
        let compile_once = || linearize(&doc, &CompileOptions::default()).map(|s| digest(&s.to_bytes()));
        ensure!(compile_once().ok() == compile_once().ok(), "case {case}: compile differs");

        let ser = digest(&serialize_document(&doc));
        ensure!(ser == digest(&serialize_document(&doc)), "case {case}: serialize differs");
        let reparsed = parse_document(&serialize_document(&doc)).map_err(|e| e.to_string())?;
        ensure!(ser == digest(&serialize_document(&reparsed)), "case {case}: serialize not stable");

        let mut net = NetModel::new(case * 10, 5_000 + case * 3_000);
        net.jitter_ms = 30;
        let run = || simulate(&doc, net, &SimOptions::default(), case).map(|s| sim_digest(&s));
        let a = run().map_err(|e| e.to_string())?;
        ensure!(a == run().map_err(|e| e.to_string())?, "case {case}: simulation differs");
    }
    Ok("20 cases, compile/simulate/serialize hashes identical".into())
}

fn latency_hiding() -> Outcome {
    let mut doc_xml = String::from(
        r#"<mobit version="1" id="hide" root="1" canvas="640x480" duration="5000"><mob id="1" name="root"><entry ref="2" x="0" y="0" w="1" h="1" start="2000" dur="3000"/></mob><element id="2" name="big" mime="application/octet-stream">"#,
    );
    doc_xml.push_str(&BASE64_STANDARD.encode(vec![0x5A; 1_000_000]));
    doc_xml.push_str("</element></mobit>");
    let doc = parse_document(doc_xml.as_bytes()).map_err(|e| e.to_string())?;
    let net = NetModel::new(200, 1_000_000);
    let lead = |ms| SimOptions {
        compile: CompileOptions {
            prefetch_lead_ms: ms,
            ..CompileOptions::default()
        },
        ..SimOptions::default()
    };

    let started = Instant::now();
    let late = simulate(&doc, net, &lead(0), 1).map_err(|e| e.to_string())?;
    let plan = buffer_plan(&late.script, NetEstimate {
        latency_ms: 200,
        bytes_per_s: 1_000_000,
    });
    ensure!(plan.values().copied().collect::<Vec<_>>() == [1200], "plan {plan:?}");
    let early = simulate(&doc, net, &lead(1300), 1).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();

    let stall = late.report.total_stall_ms;
    ensure!(late.report.stall_count == 1, "lead 0: {} stalls", late.report.stall_count);
    ensure!((stall - 1200.0).abs() <= 1.0, "lead 0: stalled {stall} ms");
    ensure!(early.report.stall_count == 0, "lead 1300: {} stalls", early.report.stall_count);
    ensure!(secs < 1.0, "took {secs:.2} s");
    for sim in [&late, &early] {
        ensure!(sim.report.state == PlayerState::Finished, "not finished");
    }
    Ok(format!("lead 0 stalls {stall:.1} ms, plan 1200 ms, lead 1300 stalls 0, {:.0} ms wall", secs * 1e3))
}

fn hex(s: &str) -> Vec<u8> {
    let s: String = s.split_whitespace().collect();
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let bytes = |rng: &mut ChaCha8Rng| (0..rng.random_range(0..200)).map(|_| rng.random()).collect::<Vec<u8>>();
    let text = |rng: &mut ChaCha8Rng| (0..rng.random_range(0..12)).map(|_| rng.random_range('a'..='z')).collect::<String>();
    match rng.random_range(1..=8u8) {
        1 => Message::Hello { version: rng.random(), doc_id: text(rng) },
        2 => Message::ServerInfo {
            subservers: (0..rng.random_range(0..3))
                .map(|_| SubserverDescriptor {
                    name: text(rng),
                    target_mime: text(rng),
                    ports: (0..rng.random_range(0..3)).map(|_| rng.random()).collect(),
                })
                .collect(),
        },
        3 => Message::Script(bytes(rng)),
        4 => Message::DataReq { local_ref: rng.random() },
        5 => Message::DataChunk { local_ref: rng.random(), offset: rng.random(), total: rng.random(), bytes: bytes(rng) },
        6 => Message::StreamEvent { port: rng.random(), at: rng.random(), bytes: bytes(rng) },
        7 => Message::Error { code: rng.random(), msg: text(rng) },
        _ => Message::Bye,
    }
}

fn protocol() -> Outcome {
    let golden = [
        (Message::Hello { version: 1, doc_id: "demo".into() }, "01 00000008 0001 0004 64656D6F"),
        (
            Message::ServerInfo {
                subservers: vec![SubserverDescriptor { name: "ts".into(), target_mime: "t/x".into(), ports: vec![7001] }],
            },
            "02 0000000F 0001 0002 7473 0003 742F78 0001 1B59",
        ),
        (Message::Script(b"ab".to_vec()), "03 00000002 6162"),
        (Message::DataReq { local_ref: 258 }, "04 00000004 00000102"),
        (
            Message::DataChunk { local_ref: 1, offset: 65536, total: 153600, bytes: vec![0xAA, 0xBB] },
            "05 00000016 00000001 0000000000010000 0000000000025800 AABB",
        ),
        (Message::StreamEvent { port: 7001, at: 4000, bytes: b"hi".to_vec() }, "06 0000000C 1B59 0000000000000FA0 6869"),
        (Message::Error { code: 1, msg: "no".into() }, "07 00000006 0001 0002 6E6F"),
        (Message::Bye, "08 00000000"),
    ];
    for (msg, want) in &golden {
        let got = encode_frame(msg).map_err(|e| e.to_string())?;
        ensure!(got == hex(want), "{} encodes to {got:02X?}", msg.name());
    }
    ensure!(decode_frame(&hex("07 00000003 0001")).is_err(), "short ERROR decoded");

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let msgs: Vec<Message> = (0..10_000).map(|_| random_message(&mut rng)).collect();
    let stream: Vec<u8> = msgs.iter().flat_map(|m| encode_frame(m).unwrap()).collect();
    let mut reader = FrameReader::new();
    let mut back = Vec::new();
    let mut pos = 0;
    while pos < stream.len() {
        let end = (pos + rng.random_range(1..4096)).min(stream.len());
        reader.push(&stream[pos..end]);
        pos = end;
        while let Some(m) = reader.next_frame().map_err(|e| e.to_string())? {
            back.push(m);
        }
    }
    ensure!(back == msgs, "round trip lost or changed messages");

    let doc = load("three-level.mobit.xml");
    let opts = SimOptions {
        chunk_size: 4096,
        ..SimOptions::default()
    };
    let sim = simulate(&doc, NetModel::new(20, 100_000), &opts, 6).map_err(|e| e.to_string())?;
    for obj in &sim.script.header.ref_table.objects {
        let Some(Payload::Inline(stored)) = doc.element(obj.id).map(|e| &e.payload) else {
            return Err(format!("element {} has no inline payload", obj.id));
        };
        let got = sim.payloads.get(&obj.local_ref).ok_or(format!("r{} never arrived", obj.local_ref))?;
        ensure!(digest(got) == digest(stored), "r{} hash mismatch", obj.local_ref);
    }
    Ok(format!(
        "8 golden frames, 10000 messages round-tripped, {} payload hashes match",
        sim.payloads.len()
    ))
}

struct Served(Child);

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn end_to_end() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_mobit");
    let file = fixture("three-level.mobit.xml");
    let mut server = Served(
        Command::new(bin)
            .arg("serve")
            .arg(&file)
            .args(["--port", "0"])
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())?,
    );
    let mut line = String::new();
    BufReader::new(server.0.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
    let addr = line.split('\t').nth(1).ok_or(format!("unexpected banner {line:?}"))?.to_string();

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let trace_path = dir.path().join("trace.tsv");
    let out = Command::new(bin)
        .args(["play", "--connect", &addr, "--clock", "sim", "--speed", "100", "--trace"])
        .arg(&trace_path)
        .output()
        .map_err(|e| e.to_string())?;
    drop(server);
    ensure!(out.status.success(), "play failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure!(stdout.contains("state\tFinished"), "report: {stdout}");
    ensure!(stdout.contains("stalls\t0\n"), "report: {stdout}");

    let trace = parse_trace(&std::fs::read_to_string(&trace_path).map_err(|e| e.to_string())?)?;
    validate_trace(&trace)?;
    let script: FlowScript = linearize(&load("three-level.mobit.xml"), &CompileOptions::default()).map_err(|e| e.to_string())?;
    check_scene_fidelity(&trace, &script)?;
    let displays = trace.iter().filter(|r| r.action == Action::Display).count();
    Ok(format!("loopback play finished, 0 stalls, {} records, {displays} displays match replay", trace.len()))
}

fn sub_server() -> Outcome {
    let doc = load("live.mobit.xml");
    let (latency_ms, bps) = (50, 1_000_000);
    let net = NetModel::new(latency_ms, bps);
    let quiet = SimOptions {
        text_sender_port: Some(7001),
        ..SimOptions::default()
    };
    let chatty = SimOptions {
        injections: vec![(4000, "hello".into())],
        ..quiet.clone()
    };
    let a = simulate(&doc, net, &quiet, 8).map_err(|e| e.to_string())?;
    let b = simulate(&doc, net, &chatty, 8).map_err(|e| e.to_string())?;

    // header 5, port 2, timestamp 8, text
    let frame_bytes = 5 + 2 + 8 + "hello".len() as u64;
    let expected_us = 4_000_000 + latency_ms * 1000 + (frame_bytes * 1_000_000).div_ceil(bps);
    let delivered: Vec<_> = b.report.trace.iter().filter(|r| r.action == Action::StreamDeliver).collect();
    ensure!(delivered.len() == 1, "{} deliveries", delivered.len());
    let got = delivered[0].wall_us;
    ensure!(got == expected_us, "delivered at {got} µs, expected {expected_us}");
    ensure!(delivered[0].field("text") == Some("hello"), "text {:?}", delivered[0].field("text"));

    let shows_hides = |s: &Simulation| {
        s.report
            .trace
            .iter()
            .filter(|r| matches!(r.action, Action::Compose | Action::Display | Action::Delete))
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
    };
    ensure!(shows_hides(&a) == shows_hides(&b), "live traffic changed the timeline");
    Ok(format!(
        "StreamDeliver at {}.{:03} ms as modeled, Show/Hide trace unchanged",
        got / 1000,
        got % 1000
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("oracle equivalence", oracle_equivalence),
        ("acyclicity", acyclicity),
        ("clamp soundness", clamp_soundness),
        ("determinism", determinism),
        ("latency hiding", latency_hiding),
        ("protocol", protocol),
        ("end-to-end loopback", end_to_end),
        ("sub-server delivery", sub_server),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
