//! What is on screen at a given instant, computed two ways: by replaying a
//! compiled script, and by evaluating the document hierarchy directly.
//! The second route shares no code with the compiler and serves as its
//! oracle.

use std::collections::BTreeMap;

use super::{AbsRect, EventKind, FlowScript, ScriptError};
use crate::model::{Document, Duration, EntryPath, Node, ObjectId, ResolvedParams};
use crate::validate::{Mode, StructureError};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneItem {
    pub object: ObjectId,
    pub rect: AbsRect,
    pub z: u32,
    pub params: ResolvedParams,
}

/// Active instances keyed by their entry path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneState {
    pub items: BTreeMap<EntryPath, SceneItem>,
}

impl SceneState {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// Set equality with rectangles compared at `tol` pixels. Returns a
    /// description of the first difference.
    pub fn diff(&self, other: &SceneState, tol: f64) -> Option<String> {
        for (path, a) in &self.items {
            let Some(b) = other.items.get(path) else {
                return Some(format!("{path} only on the left"));
            };
            if a.object != b.object || a.z != b.z || a.params != b.params || !a.rect.approx_eq(&b.rect, tol) {
                return Some(format!("{path} differs: {a:?} vs {b:?}"));
            }
        }
        other
            .items
            .keys()
            .find(|p| !self.items.contains_key(p))
            .map(|p| format!("{p} only on the right"))
    }
}

/// Applies every Show and Hide with `at <= t`. Hides sort before Shows at
/// the same instant, so intervals behave as half-open.
pub fn replay(script: &FlowScript, t: u64) -> Result<SceneState, ScriptError> {
    let table = &script.header.ref_table;
    let mut active: BTreeMap<u32, (EntryPath, SceneItem)> = BTreeMap::new();
    for event in script.events.iter().take_while(|e| e.at <= t) {
        match &event.kind {
            EventKind::Show {
                instance_id,
                local_ref,
                rect,
                z,
                params,
            } => {
                let path = table
                    .instance(*instance_id)
                    .map(|i| i.path.clone())
                    .ok_or_else(|| ScriptError::Inconsistent(format!("unknown instance {instance_id}")))?;
                let object = table
                    .object(*local_ref)
                    .map(|o| o.id)
                    .ok_or_else(|| ScriptError::Inconsistent(format!("unknown local ref {local_ref}")))?;
                let item = SceneItem {
                    object,
                    rect: *rect,
                    z: *z,
                    params: *params,
                };
                active.insert(*instance_id, (path, item));
            }
            EventKind::Hide { instance_id } => {
                if active.remove(instance_id).is_none() {
                    return Err(ScriptError::Inconsistent(format!(
                        "unmatched hide of instance {instance_id}"
                    )));
                }
            }
            EventKind::Prefetch { .. } | EventKind::End => {}
        }
    }
    Ok(SceneState {
        items: active.into_values().collect(),
    })
}

struct Oracle<'a> {
    doc: &'a Document,
    t: u64,
    mode: Mode,
    visits: u32,
    stack: Vec<ObjectId>,
    scene: SceneState,
}

impl Oracle<'_> {
    fn eval(
        &mut self,
        mob_id: ObjectId,
        frame: [f64; 4],
        span: (u64, u64),
        params: ResolvedParams,
        path: &EntryPath,
    ) -> Result<(), StructureError> {
        if let Some(at) = self.stack.iter().position(|id| *id == mob_id) {
            let mut cycle = self.stack[at..].to_vec();
            cycle.push(mob_id);
            return Err(StructureError::Cycle(cycle));
        }
        self.stack.push(mob_id);
        let doc = self.doc;
        let mob = doc.mob(mob_id).expect("oracle evaluates mobs only");
        let [fx, fy, fw, fh] = frame;
        let (begin, finish) = span;

        for (i, entry) in mob.playlist.iter().enumerate() {
            let here = path.child(i);
            let node = doc.resolve(entry.target)?;

            // time: start is relative to the parent's start
            let s = begin.saturating_add(entry.time.start_offset);
            if s >= finish {
                continue;
            }
            let e = match (entry.time.duration, self.mode) {
                (Duration::Open, _) => finish,
                (Duration::Finite(d), Mode::Clamp) => s.saturating_add(d).min(finish),
                (Duration::Finite(d), Mode::Strict) => s.saturating_add(d),
            };

            // space: unit fractions of the parent frame
            let r = entry.region;
            let (mut x0, mut y0) = (fx + r.x * fw, fy + r.y * fh);
            let (mut x1, mut y1) = (fx + (r.x + r.w) * fw, fy + (r.y + r.h) * fh);
            if self.mode == Mode::Clamp {
                let visible_w = (r.x + r.w).min(1.0) - r.x.max(0.0);
                let visible_h = (r.y + r.h).min(1.0) - r.y.max(0.0);
                if visible_w <= 0.0 || visible_h <= 0.0 {
                    continue;
                }
                x0 = x0.max(fx);
                y0 = y0.max(fy);
                x1 = x1.min(fx + fw);
                y1 = y1.min(fy + fh);
            }
            let child_frame = if self.mode == Mode::Clamp {
                [x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0)]
            } else {
                [x0, y0, r.w * fw, r.h * fh]
            };
            let child_params = ResolvedParams {
                background_color: entry.params.background_color.or(params.background_color),
                font_scale: params.font_scale * entry.params.font_scale.unwrap_or(1.0),
                scale_mode: entry.params.scale_mode.unwrap_or(params.scale_mode),
            };

            match node {
                Node::Element(el) => {
                    let z = self.visits;
                    self.visits += 1;
                    if s <= self.t && self.t < e {
                        self.scene.items.insert(
                            here,
                            SceneItem {
                                object: el.id,
                                rect: AbsRect {
                                    x: child_frame[0],
                                    y: child_frame[1],
                                    w: child_frame[2],
                                    h: child_frame[3],
                                },
                                z,
                                params: child_params,
                            },
                        );
                    }
                }
                Node::Mob(m) => self.eval(m.id, child_frame, (s, e), child_params, &here)?,
            }
        }
        self.stack.pop();
        Ok(())
    }
}

/// Evaluates the document hierarchy directly at time `t`, without
/// compiling. An instance is active when `start <= t < end`.
pub fn scene_at(doc: &Document, t: u64, mode: Mode) -> Result<SceneState, StructureError> {
    let canvas = doc.canvas();
    let mut oracle = Oracle {
        doc,
        t,
        mode,
        visits: 0,
        stack: Vec::new(),
        scene: SceneState::default(),
    };
    oracle.eval(
        doc.root(),
        [0.0, 0.0, canvas.width as f64, canvas.height as f64],
        (0, doc.total_duration()),
        ResolvedParams::default(),
        &EntryPath::default(),
    )?;
    Ok(oracle.scene)
}
