use mobit_core::docio::parse_document;
use mobit_core::flow::CompileOptions;
use mobit_core::model::{Canvas, Document, Element, Mob, ObjectId, Payload, PlaylistEntry, TimeSpec};
use mobit_core::testing::{random_document, GenConfig};
use mobit_runtime::client::{buffer_plan, NetEstimate, PlayerState};
use mobit_runtime::harness::{simulate, NetModel, SimOptions, Simulation};
use mobit_runtime::trace::{check_scene_fidelity, format_trace, validate_trace, Action};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn oid(v: u64) -> ObjectId {
    ObjectId::new(v).unwrap()
}

fn blob(id: u64, size: usize) -> Element {
    Element {
        id: oid(id),
        name: format!("blob-{id}"),
        mime_type: "application/octet-stream".parse().unwrap(),
        payload: Payload::Inline((0..size).map(|i| (i * 7 + id as usize) as u8).collect()),
        intrinsic_size: None,
    }
}

/// Root mob placing each `(element, start, duration)` full-canvas.
fn flat_doc(total: u64, shows: &[(u64, u64, u64)], elements: Vec<Element>) -> Document {
    let root = Mob {
        id: oid(1),
        name: "root".into(),
        playlist: shows
            .iter()
            .map(|&(e, start, dur)| PlaylistEntry::full(oid(e), TimeSpec::finite(start, dur).unwrap()))
            .collect(),
    };
    Document::new("flat", oid(1), Canvas { width: 640, height: 480 }, total, [root], elements).unwrap()
}

fn with_lead(lead: u64) -> SimOptions {
    SimOptions {
        compile: CompileOptions {
            prefetch_lead_ms: lead,
            ..CompileOptions::default()
        },
        ..SimOptions::default()
    }
}

fn assert_sound(sim: &Simulation) {
    assert_eq!(sim.report.state, PlayerState::Finished);
    validate_trace(&sim.report.trace).unwrap();
    check_scene_fidelity(&sim.report.trace, &sim.script).unwrap();
}

fn one_megabyte_at_2000() -> Document {
    flat_doc(5000, &[(10, 2000, 3000)], vec![blob(10, 1_000_000)])
}

#[test]
fn prefetch_hides_latency() {
    let net = NetModel::new(200, 1_000_000);
    let doc = one_megabyte_at_2000();

    let late = simulate(&doc, net, &with_lead(0), 1).unwrap();
    assert_sound(&late);
    assert_eq!(late.report.stall_count, 1);
    // 16 chunk frames of 25 framing bytes each add 0.4 ms to 200 + 1000
    assert_eq!(late.report.total_stall_ms, 1200.4);

    let plan = buffer_plan(&late.script, NetEstimate {
        latency_ms: 200,
        bytes_per_s: 1_000_000,
    });
    assert_eq!(plan[&0], 1200);

    let early = simulate(&doc, net, &with_lead(1300), 1).unwrap();
    assert_sound(&early);
    assert_eq!(early.report.stall_count, 0);
    assert_eq!(early.report.total_stall_ms, 0.0);
}

#[test]
fn stall_freezes_the_whole_timeline() {
    let net = NetModel::new(200, 1_000_000);
    let sim = simulate(&one_megabyte_at_2000(), net, &with_lead(0), 1).unwrap();
    let t = &sim.report.trace;
    let display = t.iter().find(|r| r.action == Action::Display).unwrap();
    let delete = t.iter().find(|r| r.action == Action::Delete).unwrap();
    // displayed after the stall, then kept for its full 3000 ms
    assert_eq!(delete.wall_us - display.wall_us, 3_000_000);
    assert_eq!(display.pt(), Some(2000));
    let stall = t.iter().find(|r| r.action == Action::Stall).unwrap();
    assert_eq!(display.wall_us - stall.wall_us, 1_200_400);
}

#[test]
fn contention_defeats_per_ref_planning() {
    // each ref alone needs 1200 ms; fetched together the second waits
    let doc = flat_doc(
        5000,
        &[(10, 2000, 1000), (11, 2000, 1000)],
        vec![blob(10, 1_000_000), blob(11, 1_000_000)],
    );
    let sim = simulate(&doc, NetModel::new(200, 1_000_000), &with_lead(1300), 1).unwrap();
    assert_sound(&sim);
    assert_eq!(sim.report.stall_count, 1);
    assert!((sim.report.total_stall_ms - 900.8).abs() < 1e-9, "{}", sim.report.total_stall_ms);
}

#[test]
fn payloads_reassemble_exactly() {
    let doc = parse_document(include_bytes!("../../../fixtures/three-level.mobit.xml")).unwrap();
    let opts = SimOptions {
        chunk_size: 1000,
        ..SimOptions::default()
    };
    let sim = simulate(&doc, NetModel::new(30, 250_000), &opts, 3).unwrap();
    assert_sound(&sim);
    assert_eq!(sim.payloads.len(), sim.script.header.ref_table.objects.len());
    for obj in &sim.script.header.ref_table.objects {
        let Payload::Inline(stored) = &doc.element(obj.id).unwrap().payload else { panic!() };
        assert_eq!(Sha256::digest(&sim.payloads[&obj.local_ref]), Sha256::digest(stored), "r{}", obj.local_ref);
    }
}

#[test]
fn link_conserves_bytes_and_order() {
    let doc = parse_document(include_bytes!("../../../fixtures/three-level.mobit.xml")).unwrap();
    let mut net = NetModel::new(40, 100_000);
    net.jitter_ms = 25;
    let sim = simulate(&doc, net, &SimOptions::default(), 11).unwrap();
    assert_sound(&sim);
    let link = &sim.link;
    assert!(link.windows(2).all(|w| w[0].arrive <= w[1].arrive && w[0].tx_end <= w[1].tx_start));
    for r in link {
        assert_eq!(r.tx_end - r.tx_start, net.transmit_us(r.bytes));
        assert!(r.arrive >= r.tx_end + 40_000);
    }
    let received: u64 = sim
        .report
        .trace
        .iter()
        .filter(|r| r.action == Action::Receive)
        .map(|r| r.field_u64("len").unwrap())
        .sum();
    let sent: u64 = link.iter().filter(|r| r.kind == "DATA_CHUNK").map(|r| r.bytes as u64 - 25).sum();
    assert_eq!(received, sent);
    let total: u64 = sim.script.header.ref_table.objects.iter().map(|o| o.payload_size).sum();
    assert_eq!(sent, total);
}

#[test]
fn same_seed_same_trace() {
    let doc = parse_document(include_bytes!("../../../fixtures/three-level.mobit.xml")).unwrap();
    let mut net = NetModel::new(80, 20_000);
    net.jitter_ms = 60;
    let a = simulate(&doc, net, &SimOptions::default(), 99).unwrap();
    let b = simulate(&doc, net, &SimOptions::default(), 99).unwrap();
    assert_eq!(format_trace(&a.report.trace), format_trace(&b.report.trace));
    assert_eq!(a.link, b.link);
    assert_sound(&a);
}

#[test]
fn live_text_reaches_the_visible_element() {
    let doc = parse_document(include_bytes!("../../../fixtures/live.mobit.xml")).unwrap();
    let net = NetModel::new(50, 1_000_000);
    let quiet = SimOptions {
        text_sender_port: Some(7001),
        ..SimOptions::default()
    };
    let chatty = SimOptions {
        injections: vec![(4000, "hello".into())],
        ..quiet.clone()
    };
    let a = simulate(&doc, net, &quiet, 5).unwrap();
    let b = simulate(&doc, net, &chatty, 5).unwrap();
    assert_sound(&a);
    assert_sound(&b);

    let delivered: Vec<_> = b.report.trace.iter().filter(|r| r.action == Action::StreamDeliver).collect();
    assert_eq!(delivered.len(), 1);
    // 20-byte frame at 1 MB/s is 20 µs, plus 50 ms latency
    assert_eq!(delivered[0].wall_us, 4_050_020);
    assert_eq!(delivered[0].field("text"), Some("hello"));
    assert_eq!(delivered[0].field_u64("at"), Some(4000));
    let frame = b.link.iter().find(|r| r.kind == "STREAM_EVENT").unwrap();
    assert_eq!((frame.tx_start, frame.arrive), (4_000_000, delivered[0].wall_us));

    let timeline = |s: &Simulation| {
        s.report
            .trace
            .iter()
            .filter(|r| matches!(r.action, Action::Compose | Action::Display | Action::Delete))
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(timeline(&a), timeline(&b));
}

#[test]
fn injections_without_a_sender_are_refused() {
    let doc = parse_document(include_bytes!("../../../fixtures/live.mobit.xml")).unwrap();
    let opts = SimOptions {
        injections: vec![(1, "x".into())],
        ..SimOptions::default()
    };
    assert!(simulate(&doc, NetModel::new(0, 1000), &opts, 0).is_err());
}

#[test]
fn budget_pressure_evicts_finished_refs() {
    // three 40 kB blobs in sequence under a 100 kB budget
    let doc = flat_doc(
        10_000,
        &[(10, 0, 2000), (11, 3000, 2000), (12, 6000, 2000)],
        vec![blob(10, 40_000), blob(11, 40_000), blob(12, 40_000)],
    );
    let mut opts = with_lead(1000);
    opts.client.buffer_budget = Some(100_000);
    let sim = simulate(&doc, NetModel::new(10, 1_000_000), &opts, 0).unwrap();
    assert_sound(&sim);
    assert_eq!(sim.report.budget_violations, 0);
    assert!(sim.report.max_buffer_bytes <= 120_000);
    assert!(sim.payloads.len() < 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Random documents over random networks always play through with a
    /// valid trace that matches the script.
    #[test]
    fn playback_matches_script(seed in any::<u64>(), latency in 0u64..300, bps in 2_000u64..2_000_000, jitter in 0u64..50, lead in 0u64..3000) {
        let doc = random_document(&mut ChaCha8Rng::seed_from_u64(seed), &GenConfig::default());
        let mut net = NetModel::new(latency, bps);
        net.jitter_ms = jitter;
        let sim = simulate(&doc, net, &with_lead(lead), seed).unwrap();
        prop_assert_eq!(sim.report.state, PlayerState::Finished);
        validate_trace(&sim.report.trace).map_err(TestCaseError::fail)?;
        check_scene_fidelity(&sim.report.trace, &sim.script).map_err(TestCaseError::fail)?;
    }

    /// With a lead covering the modeled delivery time and fetch windows
    /// that do not overlap, nothing stalls.
    #[test]
    fn sufficient_lead_never_stalls(
        sizes in prop::collection::vec(0usize..150_000, 1..5),
        gaps in prop::collection::vec(0u64..2000, 5),
        latency in 0u64..300,
        bps in 20_000u64..5_000_000,
        jitter in 0u64..40,
        chunk in prop::sample::select(vec![1024usize, 8192, 65_536]),
        seed in any::<u64>(),
    ) {
        let mut net = NetModel::new(latency, bps);
        net.jitter_ms = jitter;
        let lead = sizes
            .iter()
            .map(|&s| (net.payload_delivery_us(s as u64, chunk) + jitter * 1000).div_ceil(1000))
            .max()
            .unwrap();
        let mut shows = Vec::new();
        let mut t = 0;
        for (i, &gap) in gaps.iter().take(sizes.len()).enumerate() {
            t += lead + gap;
            shows.push((10 + i as u64, t, 500 + gap));
        }
        let total = t + 3000;
        let elements = sizes.iter().enumerate().map(|(i, &s)| blob(10 + i as u64, s)).collect();
        let doc = flat_doc(total, &shows, elements);
        let mut opts = with_lead(lead);
        opts.chunk_size = chunk;
        let sim = simulate(&doc, net, &opts, seed).unwrap();
        prop_assert_eq!(sim.report.stall_count, 0, "lead {}", lead);
        prop_assert_eq!(sim.report.state, PlayerState::Finished);
    }
}
