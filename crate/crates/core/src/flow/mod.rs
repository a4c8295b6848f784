//! Linearisation of a document hierarchy into a flat, time-ordered flow
//! script with absolute coordinates.

mod scene;
mod text;

pub use scene::{replay, scene_at, SceneItem, SceneState};
pub use text::{format_px, ScriptError};

use std::collections::HashMap;
use std::io;

use thiserror::Error;

use crate::model::{
    Canvas, Document, Duration, EntryPath, MimeType, Node, ObjectId, Region, ResolvedParams,
    TimeSpec,
};
use crate::store::{payload_size, NoStore, PayloadStore};
use crate::validate::{self, clipped_extent, unit_excess, Mode, StructureError, Violation};

/// Absolute rectangle in canvas pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl AbsRect {
    pub fn canvas(canvas: Canvas) -> AbsRect {
        AbsRect {
            x: 0.0,
            y: 0.0,
            w: canvas.width as f64,
            h: canvas.height as f64,
        }
    }

    pub fn approx_eq(&self, other: &AbsRect, tol: f64) -> bool {
        (self.x - other.x).abs() <= tol
            && (self.y - other.y).abs() <= tol
            && (self.w - other.w).abs() <= tol
            && (self.h - other.h).abs() <= tol
    }

    /// Containment with a tolerance for floating point noise.
    pub fn within(&self, outer: &AbsRect, tol: f64) -> bool {
        self.x >= outer.x - tol
            && self.y >= outer.y - tol
            && self.x + self.w <= outer.x + outer.w + tol
            && self.y + self.h <= outer.y + outer.h + tol
    }
}

/// Half-open interval `[start, end)` in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: u64,
    pub end: u64,
}

/// Places `child` inside `parent`. Clamp mode intersects the result with
/// the parent rectangle.
pub fn compose_region(parent: AbsRect, child: &Region, mode: Mode) -> AbsRect {
    let left = parent.x + child.x * parent.w;
    let top = parent.y + child.y * parent.h;
    let right = parent.x + (child.x + child.w) * parent.w;
    let bottom = parent.y + (child.y + child.h) * parent.h;
    match mode {
        Mode::Strict => AbsRect {
            x: left,
            y: top,
            w: child.w * parent.w,
            h: child.h * parent.h,
        },
        Mode::Clamp => {
            let x0 = left.max(parent.x);
            let y0 = top.max(parent.y);
            let x1 = right.min(parent.x + parent.w);
            let y1 = bottom.min(parent.y + parent.h);
            AbsRect {
                x: x0,
                y: y0,
                w: (x1 - x0).max(0.0),
                h: (y1 - y0).max(0.0),
            }
        }
    }
}

/// Places a time spec inside the parent interval. `Ok(None)` is an empty
/// result in clamp mode; strict mode reports the overrun in ms instead.
pub fn compose_interval(parent: Interval, child: &TimeSpec, mode: Mode) -> Result<Option<Interval>, u64> {
    let start = parent.start.saturating_add(child.start_offset);
    let wanted_end = match child.duration {
        Duration::Open => parent.end.max(start),
        Duration::Finite(d) => start.saturating_add(d),
    };
    let overrun = if start >= parent.end {
        Some(wanted_end.saturating_sub(parent.end))
    } else if wanted_end > parent.end {
        Some(wanted_end - parent.end)
    } else {
        None
    };
    match (overrun, mode) {
        (None, _) => Ok(Some(Interval {
            start,
            end: wanted_end,
        })),
        (Some(by), Mode::Strict) => Err(by),
        (Some(_), Mode::Clamp) if start >= parent.end => Ok(None),
        (Some(_), Mode::Clamp) => Ok(Some(Interval {
            start,
            end: parent.end,
        })),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefObject {
    pub local_ref: u32,
    pub id: ObjectId,
    pub mime_type: MimeType,
    pub payload_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub instance_id: u32,
    pub local_ref: u32,
    pub path: EntryPath,
}

/// Dense local numbering of the Elements and Element visits of a
/// presentation, replacing global ids in the script and on the wire.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalRefTable {
    pub objects: Vec<RefObject>,
    pub instances: Vec<Instance>,
}

impl LocalRefTable {
    pub fn object(&self, local_ref: u32) -> Option<&RefObject> {
        self.objects.get(local_ref as usize)
    }

    pub fn instance(&self, instance_id: u32) -> Option<&Instance> {
        self.instances.get(instance_id as usize)
    }
}

#[derive(Default)]
struct Numbering {
    table: LocalRefTable,
    by_id: HashMap<ObjectId, u32>,
}

impl Numbering {
    fn visit(
        &mut self,
        doc: &Document,
        id: ObjectId,
        path: EntryPath,
        store: &dyn PayloadStore,
    ) -> Result<(u32, u32), CompileError> {
        let local_ref = match self.by_id.get(&id) {
            Some(r) => *r,
            None => {
                let element = doc.element(id).expect("visit is called for elements");
                let size = payload_size(element, store).map_err(|source| CompileError::Payload {
                    id,
                    source,
                })?;
                let r = self.table.objects.len() as u32;
                self.table.objects.push(RefObject {
                    local_ref: r,
                    id,
                    mime_type: element.mime_type.clone(),
                    payload_size: size,
                });
                self.by_id.insert(id, r);
                r
            }
        };
        let instance_id = self.table.instances.len() as u32;
        self.table.instances.push(Instance {
            instance_id,
            local_ref,
            path,
        });
        Ok((local_ref, instance_id))
    }
}

/// Numbers every Element reachable from the root in depth-first preorder.
/// Each Element gets a local ref on its first visit; every visit becomes an
/// instance. Timing and geometry are ignored.
pub fn assign_local_refs(doc: &Document, store: &dyn PayloadStore) -> Result<LocalRefTable, CompileError> {
    validate::check_acyclic(doc)?;
    let mut numbering = Numbering::default();
    fn walk(
        doc: &Document,
        mob: ObjectId,
        path: &EntryPath,
        store: &dyn PayloadStore,
        numbering: &mut Numbering,
    ) -> Result<(), CompileError> {
        let mob = doc.mob(mob).expect("walk visits mobs only");
        for (index, entry) in mob.playlist.iter().enumerate() {
            let child_path = path.child(index);
            match doc.resolve(entry.target).map_err(StructureError::from)? {
                Node::Element(e) => {
                    numbering.visit(doc, e.id, child_path, store)?;
                }
                Node::Mob(m) => walk(doc, m.id, &child_path, store, numbering)?,
            }
        }
        Ok(())
    }
    walk(doc, doc.root(), &EntryPath::default(), store, &mut numbering)?;
    Ok(numbering.table)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Prefetch {
        local_ref: u32,
    },
    Show {
        instance_id: u32,
        local_ref: u32,
        rect: AbsRect,
        z: u32,
        params: ResolvedParams,
    },
    Hide {
        instance_id: u32,
    },
    End,
}

impl EventKind {
    /// Tie order at equal timestamps.
    pub fn rank(&self) -> u8 {
        match self {
            EventKind::Prefetch { .. } => 0,
            EventKind::Hide { .. } => 1,
            EventKind::Show { .. } => 2,
            EventKind::End => 3,
        }
    }

    fn tie_key(&self) -> u32 {
        match self {
            EventKind::Prefetch { local_ref } => *local_ref,
            EventKind::Hide { instance_id } | EventKind::Show { instance_id, .. } => *instance_id,
            EventKind::End => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowEvent {
    pub at: u64,
    pub kind: EventKind,
}

impl FlowEvent {
    pub fn sort_key(&self) -> (u64, u8, u32) {
        (self.at, self.kind.rank(), self.kind.tie_key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowHeader {
    pub doc_id: String,
    pub canvas: Canvas,
    pub total_duration: u64,
    pub prefetch_lead_ms: u64,
    pub ref_table: LocalRefTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowScript {
    pub header: FlowHeader,
    pub events: Vec<FlowEvent>,
}

impl FlowScript {
    /// Timestamp of the first Show of each local ref.
    pub fn first_show_at(&self) -> HashMap<u32, u64> {
        let mut first = HashMap::new();
        for event in &self.events {
            if let EventKind::Show { local_ref, .. } = event.kind {
                first.entry(local_ref).or_insert(event.at);
            }
        }
        first
    }

    /// Local refs in the order their Prefetch events appear.
    pub fn prefetch_order(&self) -> Vec<u32> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Prefetch { local_ref } => Some(local_ref),
                _ => None,
            })
            .collect()
    }

    /// Distinct event timestamps in ascending order.
    pub fn timestamps(&self) -> Vec<u64> {
        let mut ts: Vec<u64> = self.events.iter().map(|e| e.at).collect();
        ts.dedup();
        ts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompileOptions {
    pub mode: Mode,
    pub prefetch_lead_ms: u64,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            mode: Mode::Clamp,
            prefetch_lead_ms: 1000,
        }
    }
}

/// Something clamp mode changed while compiling.
#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    /// Interval empty after clipping; the entry and its subtree were dropped.
    DroppedEmptyInterval(EntryPath),
    /// Region has no area after clipping; the entry and its subtree were dropped.
    DroppedEmptyRegion(EntryPath),
    ClippedInterval { path: EntryPath, by_ms: u64 },
    ClippedRegion(EntryPath),
}

impl Warning {
    pub fn path(&self) -> &EntryPath {
        match self {
            Warning::DroppedEmptyInterval(p)
            | Warning::DroppedEmptyRegion(p)
            | Warning::ClippedRegion(p)
            | Warning::ClippedInterval { path: p, .. } => p,
        }
    }
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::DroppedEmptyInterval(p) => write!(f, "entry {p} dropped: empty interval"),
            Warning::DroppedEmptyRegion(p) => write!(f, "entry {p} dropped: empty region"),
            Warning::ClippedInterval { path, by_ms } => {
                write!(f, "entry {path} clipped by {by_ms} ms")
            }
            Warning::ClippedRegion(p) => write!(f, "entry {p} region clipped to parent"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Compilation {
    pub script: FlowScript,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error("document violates containment in strict mode ({} violations)", .0.len())]
    Rejected(Vec<Violation>),
    #[error("payload of element {id} unavailable: {source}")]
    Payload { id: ObjectId, source: io::Error },
}

/// Compiles a document whose payloads are all inline.
pub fn linearize(doc: &Document, opts: &CompileOptions) -> Result<FlowScript, CompileError> {
    compile(doc, opts, &NoStore).map(|c| c.script)
}

struct Walker<'a> {
    doc: &'a Document,
    mode: Mode,
    store: &'a dyn PayloadStore,
    numbering: Numbering,
    events: Vec<FlowEvent>,
    warnings: Vec<Warning>,
}

impl Walker<'_> {
    fn walk(
        &mut self,
        mob: ObjectId,
        rect: AbsRect,
        interval: Interval,
        params: ResolvedParams,
        path: &EntryPath,
    ) -> Result<(), CompileError> {
        let doc = self.doc;
        let mob = doc.mob(mob).expect("walk visits mobs only");
        for (index, entry) in mob.playlist.iter().enumerate() {
            let child_path = path.child(index);
            let child_interval = match compose_interval(interval, &entry.time, self.mode) {
                Ok(Some(iv)) => iv,
                Ok(None) => {
                    self.warnings.push(Warning::DroppedEmptyInterval(child_path));
                    continue;
                }
                Err(_) => unreachable!("strict documents are validated before the walk"),
            };
            if child_interval.end - child_interval.start < entry_span(interval, &entry.time) {
                let by_ms = entry_span(interval, &entry.time) - (child_interval.end - child_interval.start);
                self.warnings.push(Warning::ClippedInterval {
                    path: child_path.clone(),
                    by_ms,
                });
            }
            if self.mode == Mode::Clamp {
                let (w, h) = clipped_extent(&entry.region);
                if w <= 0.0 || h <= 0.0 {
                    self.warnings.push(Warning::DroppedEmptyRegion(child_path));
                    continue;
                }
                if unit_excess(&entry.region) != (0.0, 0.0) {
                    self.warnings.push(Warning::ClippedRegion(child_path.clone()));
                }
            }
            let child_rect = compose_region(rect, &entry.region, self.mode);
            let child_params = params.inherit(&entry.params);

            match doc.resolve(entry.target).map_err(StructureError::from)? {
                Node::Element(element) => {
                    let (local_ref, instance_id) =
                        self.numbering.visit(doc, element.id, child_path, self.store)?;
                    self.events.push(FlowEvent {
                        at: child_interval.start,
                        kind: EventKind::Show {
                            instance_id,
                            local_ref,
                            rect: child_rect,
                            z: instance_id,
                            params: child_params,
                        },
                    });
                    self.events.push(FlowEvent {
                        at: child_interval.end,
                        kind: EventKind::Hide { instance_id },
                    });
                }
                Node::Mob(child) => {
                    self.walk(child.id, child_rect, child_interval, child_params, &child_path)?;
                }
            }
        }
        Ok(())
    }
}

/// Length the entry asks for, before clipping.
fn entry_span(parent: Interval, time: &TimeSpec) -> u64 {
    match time.duration {
        Duration::Finite(d) => d,
        Duration::Open => parent.end.saturating_sub(parent.start.saturating_add(time.start_offset)),
    }
}

/// Compiles a document into a flow script, resolving stored payload sizes
/// through `store`.
pub fn compile(doc: &Document, opts: &CompileOptions, store: &dyn PayloadStore) -> Result<Compilation, CompileError> {
    validate::check_acyclic(doc)?;
    if opts.mode == Mode::Strict {
        let violations = validate::check_containment(doc, Mode::Strict)?;
        if !violations.is_empty() {
            return Err(CompileError::Rejected(violations));
        }
    }

    let mut walker = Walker {
        doc,
        mode: opts.mode,
        store,
        numbering: Numbering::default(),
        events: Vec::new(),
        warnings: Vec::new(),
    };
    walker.walk(
        doc.root(),
        AbsRect::canvas(doc.canvas()),
        Interval {
            start: 0,
            end: doc.total_duration(),
        },
        ResolvedParams::default(),
        &EntryPath::default(),
    )?;

    let Walker {
        numbering,
        mut events,
        warnings,
        ..
    } = walker;
    let ref_table = numbering.table;

    let mut first_show: Vec<u64> = vec![u64::MAX; ref_table.objects.len()];
    for event in &events {
        if let EventKind::Show { local_ref, .. } = event.kind {
            let slot = &mut first_show[local_ref as usize];
            *slot = (*slot).min(event.at);
        }
    }
    for (local_ref, at) in first_show.into_iter().enumerate() {
        events.push(FlowEvent {
            at: at.saturating_sub(opts.prefetch_lead_ms),
            kind: EventKind::Prefetch {
                local_ref: local_ref as u32,
            },
        });
    }
    events.push(FlowEvent {
        at: doc.total_duration(),
        kind: EventKind::End,
    });
    events.sort_by_key(FlowEvent::sort_key);

    Ok(Compilation {
        script: FlowScript {
            header: FlowHeader {
                doc_id: doc.id().to_string(),
                canvas: doc.canvas(),
                total_duration: doc.total_duration(),
                prefetch_lead_ms: opts.prefetch_lead_ms,
                ref_table,
            },
            events,
        },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::{ParamSet, Rgba};

    const FULL: (f64, f64, f64, f64) = (0.0, 0.0, 1.0, 1.0);

    fn rect(x: f64, y: f64, w: f64, h: f64) -> AbsRect {
        AbsRect { x, y, w, h }
    }

    #[test]
    fn compose_region_examples() {
        let full = Region::FULL;
        assert_eq!(
            compose_region(rect(0.0, 0.0, 800.0, 600.0), &full, Mode::Clamp),
            rect(0.0, 0.0, 800.0, 600.0)
        );
        let half = Region::new(0.0, 0.0, 0.5, 1.0).unwrap();
        assert_eq!(
            compose_region(rect(400.0, 300.0, 400.0, 300.0), &half, Mode::Strict),
            rect(400.0, 300.0, 200.0, 300.0)
        );
        let over = Region::new(0.8, 0.0, 0.5, 1.0).unwrap();
        assert_eq!(
            compose_region(rect(0.0, 0.0, 100.0, 100.0), &over, Mode::Clamp),
            rect(80.0, 0.0, 20.0, 100.0)
        );
        assert_eq!(
            compose_region(rect(0.0, 0.0, 100.0, 100.0), &over, Mode::Strict),
            rect(80.0, 0.0, 50.0, 100.0)
        );
    }

    #[test]
    fn compose_interval_examples() {
        let iv = |start, end| Interval { start, end };
        assert_eq!(
            compose_interval(iv(2000, 6000), &TimeSpec::open(1000), Mode::Clamp),
            Ok(Some(iv(3000, 6000)))
        );
        let late = TimeSpec::finite(9000, 5000).unwrap();
        assert_eq!(compose_interval(iv(0, 10_000), &late, Mode::Clamp), Ok(Some(iv(9000, 10_000))));
        assert_eq!(compose_interval(iv(0, 10_000), &late, Mode::Strict), Err(4000));
        let past = TimeSpec::finite(6000, 100).unwrap();
        assert_eq!(compose_interval(iv(0, 5000), &past, Mode::Clamp), Ok(None));
        assert_eq!(compose_interval(iv(0, 5000), &past, Mode::Strict), Err(1100));
        assert_eq!(compose_interval(iv(0, 5000), &TimeSpec::open(5000), Mode::Clamp), Ok(None));
    }

    #[test]
    fn local_refs_first_visit_rule() {
        let d = doc(
            1000,
            vec![mob(1, vec![entry(7, FULL, 0, None), entry(8, FULL, 0, None), entry(7, FULL, 0, None)])],
            vec![element(7, 3), element(8, 5)],
        );
        let t = assign_local_refs(&d, &NoStore).unwrap();
        let ids: Vec<(u32, u64, u64)> = t.objects.iter().map(|o| (o.local_ref, o.id.get(), o.payload_size)).collect();
        assert_eq!(ids, vec![(0, 7, 3), (1, 8, 5)]);
        let inst: Vec<(u32, u32)> = t.instances.iter().map(|i| (i.instance_id, i.local_ref)).collect();
        assert_eq!(inst, vec![(0, 0), (1, 1), (2, 0)]);
    }

    #[test]
    fn local_refs_skip_mobs() {
        let d = doc(
            1000,
            vec![mob(1, vec![entry(2, FULL, 0, None)]), mob(2, vec![entry(7, FULL, 0, None)])],
            vec![element(7, 3)],
        );
        let t = assign_local_refs(&d, &NoStore).unwrap();
        assert_eq!(t.objects.len(), 1);
        assert_eq!(t.objects[0].id, oid(7));
        assert_eq!(t.instances[0].path, EntryPath(vec![0, 0]));

        let empty = doc(1000, vec![mob(1, vec![])], vec![]);
        assert_eq!(assign_local_refs(&empty, &NoStore).unwrap(), LocalRefTable::default());
    }

    #[test]
    fn single_full_span_element() {
        let d = doc(10_000, vec![mob(1, vec![entry(7, FULL, 0, None)])], vec![element(7, 16)]);
        let s = linearize(&d, &CompileOptions::default()).unwrap();
        assert_eq!(
            s.events,
            vec![
                FlowEvent {
                    at: 0,
                    kind: EventKind::Prefetch { local_ref: 0 }
                },
                FlowEvent {
                    at: 0,
                    kind: EventKind::Show {
                        instance_id: 0,
                        local_ref: 0,
                        rect: rect(0.0, 0.0, 800.0, 600.0),
                        z: 0,
                        params: ResolvedParams::default(),
                    }
                },
                FlowEvent {
                    at: 10_000,
                    kind: EventKind::Hide { instance_id: 0 }
                },
                FlowEvent {
                    at: 10_000,
                    kind: EventKind::End
                },
            ]
        );
    }

    pub(crate) fn nested() -> Document {
        doc(
            10_000,
            vec![
                mob(1, vec![entry(2, (0.5, 0.5, 0.5, 0.5), 2000, Some(4000))]),
                mob(2, vec![entry(7, (0.0, 0.0, 0.5, 1.0), 1000, None)]),
            ],
            vec![element(7, 100)],
        )
    }

    #[test]
    fn nested_placement() {
        let s = linearize(&nested(), &CompileOptions::default()).unwrap();
        let show = s
            .events
            .iter()
            .find(|e| matches!(e.kind, EventKind::Show { .. }))
            .unwrap();
        assert_eq!(show.at, 3000);
        match &show.kind {
            EventKind::Show { rect: r, .. } => assert_eq!(*r, rect(400.0, 300.0, 200.0, 300.0)),
            _ => unreachable!(),
        }
        let hide = s
            .events
            .iter()
            .find(|e| matches!(e.kind, EventKind::Hide { .. }))
            .unwrap();
        assert_eq!(hide.at, 6000);
        // default lead of 1000 ms
        assert_eq!(s.events[0], FlowEvent { at: 2000, kind: EventKind::Prefetch { local_ref: 0 } });
    }

    #[test]
    fn same_start_ties_follow_document_order() {
        let d = doc(
            5000,
            vec![mob(1, vec![entry(7, FULL, 1000, None), entry(8, FULL, 1000, None)])],
            vec![element(7, 1), element(8, 1)],
        );
        let s = linearize(&d, &CompileOptions::default()).unwrap();
        let shows: Vec<(u32, u32)> = s
            .events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Show { instance_id, z, .. } => Some((instance_id, z)),
                _ => None,
            })
            .collect();
        assert_eq!(shows, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn shared_mob_prefetches_once() {
        let d = doc(
            10_000,
            vec![
                mob(1, vec![entry(2, FULL, 0, Some(2000)), entry(2, FULL, 5000, Some(2000))]),
                mob(2, vec![entry(7, FULL, 0, None), entry(8, FULL, 500, None)]),
            ],
            vec![element(7, 1), element(8, 1)],
        );
        let s = linearize(&d, &CompileOptions { mode: Mode::Clamp, prefetch_lead_ms: 300 }).unwrap();
        let prefetches: Vec<&FlowEvent> = s
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Prefetch { .. }))
            .collect();
        assert_eq!(prefetches.len(), 2);
        assert_eq!(prefetches[0].at, 0);
        assert_eq!(prefetches[1].at, 200);
        assert_eq!(s.header.ref_table.instances.len(), 4);
    }

    #[test]
    fn clamp_drops_and_clips_with_warnings() {
        let d = doc(
            5000,
            vec![mob(
                1,
                vec![
                    entry(7, FULL, 6000, Some(100)),
                    entry(7, (0.8, 0.0, 0.5, 1.0), 4000, Some(2000)),
                    entry(8, (1.5, 0.0, 0.5, 1.0), 0, None),
                ],
            )],
            vec![element(7, 1), element(8, 1)],
        );
        let c = compile(&d, &CompileOptions::default(), &NoStore).unwrap();
        assert_eq!(
            c.warnings,
            vec![
                Warning::DroppedEmptyInterval(EntryPath(vec![0])),
                Warning::ClippedInterval {
                    path: EntryPath(vec![1]),
                    by_ms: 1000
                },
                Warning::ClippedRegion(EntryPath(vec![1])),
                Warning::DroppedEmptyRegion(EntryPath(vec![2])),
            ]
        );
        assert_eq!(c.script.header.ref_table.objects.len(), 1);
        let strict = compile(&d, &CompileOptions { mode: Mode::Strict, prefetch_lead_ms: 0 }, &NoStore);
        assert!(matches!(strict, Err(CompileError::Rejected(v)) if v.len() == 4));
    }

    #[test]
    fn params_are_resolved_along_the_path() {
        let mut outer = entry(2, FULL, 0, None);
        outer.params = ParamSet::new(Some(Rgba([9, 9, 9, 255])), Some(2.0), None).unwrap();
        let mut inner = entry(7, FULL, 0, None);
        inner.params = ParamSet::new(None, Some(0.5), Some(crate::model::ScaleMode::Stretch)).unwrap();
        let d = doc(1000, vec![mob(1, vec![outer]), mob(2, vec![inner])], vec![element(7, 1)]);
        let s = linearize(&d, &CompileOptions::default()).unwrap();
        let params = s
            .events
            .iter()
            .find_map(|e| match e.kind {
                EventKind::Show { params, .. } => Some(params),
                _ => None,
            })
            .unwrap();
        assert_eq!(params.background_color, Some(Rgba([9, 9, 9, 255])));
        assert_eq!(params.font_scale, 1.0);
        assert_eq!(params.scale_mode, crate::model::ScaleMode::Stretch);
    }

    #[test]
    fn cycles_are_compile_errors() {
        let d = doc(1000, vec![mob(1, vec![entry(1, FULL, 0, None)])], vec![]);
        assert!(matches!(
            linearize(&d, &CompileOptions::default()),
            Err(CompileError::Structure(StructureError::Cycle(_)))
        ));
    }

    #[test]
    fn empty_root_has_only_end() {
        let d = doc(1000, vec![mob(1, vec![])], vec![]);
        let s = linearize(&d, &CompileOptions::default()).unwrap();
        assert_eq!(s.events, vec![FlowEvent { at: 1000, kind: EventKind::End }]);
    }
}
