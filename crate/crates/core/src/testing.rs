//! Seeded random document generation for property tests and the oracle
//! command.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::model::{
    Canvas, Document, Element, Mob, MimeType, ObjectId, ParamSet, Payload, PlaylistEntry, Region,
    Rgba, ScaleMode, TimeSpec,
};

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    /// Maximum nodes on any root path, Elements included.
    pub max_depth: usize,
    pub max_entries: usize,
    /// When false every placement fits its parent in space and time.
    pub allow_overflow: bool,
    pub max_payload: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_depth: 5,
            max_entries: 50,
            allow_overflow: true,
            max_payload: 2048,
        }
    }
}

fn id(v: u64) -> ObjectId {
    ObjectId::new(v).expect("generated ids start at 1")
}

fn random_region(rng: &mut impl Rng, overflow: bool) -> Region {
    if overflow && rng.random_bool(0.4) {
        let w = rng.random_range(0.05..1.2);
        let h = rng.random_range(0.05..1.2);
        let x = rng.random_range(-0.4..1.1);
        let y = rng.random_range(-0.4..1.1);
        Region::new(x, y, w, h).unwrap()
    } else {
        let w: f64 = rng.random_range(0.05..=1.0);
        let h: f64 = rng.random_range(0.05..=1.0);
        let x = rng.random_range(0.0..=1.0 - w);
        let y = rng.random_range(0.0..=1.0 - h);
        Region::new(x, y, w, h).unwrap()
    }
}

fn random_params(rng: &mut impl Rng) -> ParamSet {
    if rng.random_bool(0.7) {
        return ParamSet::default();
    }
    let bg = rng
        .random_bool(0.5)
        .then(|| Rgba([rng.random(), rng.random(), rng.random(), rng.random()]));
    let font = rng.random_bool(0.5).then(|| rng.random_range(0.5..2.0));
    let scale = rng
        .random_bool(0.5)
        .then(|| *[ScaleMode::Fit, ScaleMode::Fill, ScaleMode::Stretch].choose(rng).unwrap());
    ParamSet::new(bg, font, scale).unwrap()
}

/// Generates an acyclic document. Mobs are arranged in levels and only
/// reference deeper levels, so sharing happens but cycles cannot.
pub fn random_document(rng: &mut impl Rng, cfg: &GenConfig) -> Document {
    let total_duration = rng.random_range(2_000..=20_000u64);
    let mob_levels = cfg.max_depth.saturating_sub(1).max(1);
    let mut levels: Vec<Vec<u64>> = vec![vec![1]];
    let mut next_id = 2;
    for _ in 1..mob_levels {
        let n = rng.random_range(0..=3);
        levels.push((0..n).map(|i| next_id + i).collect());
        next_id += n;
    }
    let element_count = rng.random_range(1..=6u64);
    let element_ids: Vec<u64> = (next_id..next_id + element_count).collect();

    let mimes = ["image/png", "text/plain", "audio/wav", "text/html"];
    let elements: Vec<Element> = element_ids
        .iter()
        .map(|&e| {
            let size = rng.random_range(1..=cfg.max_payload.max(1));
            Element {
                id: id(e),
                name: format!("element-{e}"),
                mime_type: mimes.choose(rng).unwrap().parse::<MimeType>().unwrap(),
                payload: Payload::Inline((0..size).map(|i| (i as u8).wrapping_mul(31)).collect()),
                intrinsic_size: None,
            }
        })
        .collect();

    let mut budget = rng.random_range(0..=cfg.max_entries);
    let mut mobs = Vec::new();
    for (level, ids) in levels.iter().enumerate() {
        let deeper: Vec<u64> = levels[level + 1..].iter().flatten().copied().collect();
        for &mob_id in ids {
            let n = rng.random_range(0..=6).min(budget);
            budget -= n;
            let mut playlist = Vec::new();
            for _ in 0..n {
                let target = if !deeper.is_empty() && rng.random_bool(0.4) {
                    *deeper.choose(rng).unwrap()
                } else {
                    *element_ids.choose(rng).unwrap()
                };
                let time = if cfg.allow_overflow {
                    let start = rng.random_range(0..=total_duration * 3 / 4);
                    if rng.random_bool(0.3) {
                        TimeSpec::open(start)
                    } else {
                        TimeSpec::finite(start, rng.random_range(1..=total_duration / 2)).unwrap()
                    }
                } else {
                    // no finite span can overrun any parent when durations are open
                    TimeSpec::open(rng.random_range(0..=total_duration / 8))
                };
                playlist.push(PlaylistEntry {
                    target: id(target),
                    region: random_region(rng, cfg.allow_overflow),
                    time,
                    params: random_params(rng),
                });
            }
            mobs.push(Mob {
                id: id(mob_id),
                name: format!("mob-{mob_id}"),
                playlist,
            });
        }
    }

    Document::new(
        format!("gen-{}", rng.random::<u32>()),
        id(1),
        Canvas {
            width: rng.random_range(64..=1920),
            height: rng.random_range(64..=1080),
        },
        total_duration,
        mobs,
        elements,
    )
    .expect("generator upholds document invariants")
}

/// Adds one reference from a reachable Mob back to itself or one of its
/// ancestors, creating a cycle reachable from the root.
pub fn inject_cycle(rng: &mut impl Rng, doc: &Document) -> Document {
    // every reachable mob together with one root path leading to it
    let mut paths: Vec<Vec<ObjectId>> = Vec::new();
    let mut todo = vec![vec![doc.root()]];
    while let Some(path) = todo.pop() {
        let last = *path.last().unwrap();
        if paths.iter().any(|p| p.last() == Some(&last)) {
            continue;
        }
        for entry in &doc.mob(last).unwrap().playlist {
            if doc.mob(entry.target).is_some() {
                let mut next = path.clone();
                next.push(entry.target);
                todo.push(next);
            }
        }
        paths.push(path);
    }
    let path = paths.choose(rng).unwrap();
    let from = *path.last().unwrap();
    let to = *path.choose(rng).unwrap();

    let mobs = doc.mobs().cloned().map(|mut m| {
        if m.id == from {
            let at = rng.random_range(0..=m.playlist.len());
            m.playlist.insert(at, PlaylistEntry::full(to, TimeSpec::open(0)));
        }
        m
    });
    let mobs: Vec<Mob> = mobs.collect();
    Document::new(
        doc.id(),
        doc.root(),
        doc.canvas(),
        doc.total_duration(),
        mobs,
        doc.elements().cloned(),
    )
    .expect("adding an entry keeps document invariants")
}
