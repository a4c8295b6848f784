//! Structural and state-space self-consistency checks.
//!
//! Structural consistency means the reference graph reachable from the root
//! has no cycle. State-space consistency means every placement stays inside
//! the time interval and unit square of the Mob that places it.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::error::ModelError;
use crate::model::{Document, Duration, EntryPath, Node, ObjectId, Region};

/// How containment violations are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Any placement outside its parent's bounds is an error.
    Strict,
    /// Placements are clipped to their parent's bounds.
    #[default]
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Entry `index` of `mob` refers to an id that is neither a Mob nor an Element.
    UnknownTarget { mob: ObjectId, index: usize, target: ObjectId },
    /// Reference cycle; the first and last ids are equal.
    Cycle(Vec<ObjectId>),
    TemporalOverrun { path: EntryPath, overrun_ms: u64 },
    SpatialOverrun { path: EntryPath, axis: Axis, amount: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownTarget { mob, index, target } => {
                write!(f, "unknown-target\t{mob}#{index}\t{target}")
            }
            Violation::Cycle(ids) => {
                let ids: Vec<String> = ids.iter().map(|id| id.to_string()).collect();
                write!(f, "cycle\t{}", ids.join("->"))
            }
            Violation::TemporalOverrun { path, overrun_ms } => {
                write!(f, "temporal-overrun\t{path}\t{overrun_ms}")
            }
            Violation::SpatialOverrun { path, axis, amount } => {
                write!(f, "spatial-overrun\t{path}\t{axis}\t{amount}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructureError {
    #[error("reference cycle {0:?}")]
    Cycle(Vec<ObjectId>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Stats {
    /// Distinct Mobs and Elements reachable from the root.
    pub nodes: usize,
    /// Playlist entries over all reachable Mobs, each Mob counted once.
    pub entries: usize,
    /// Nodes on the longest root path; 0 when the graph has a cycle.
    pub max_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub violations: Vec<Violation>,
    pub stats: Stats,
}

impl Report {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_cycle(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::Cycle(_)))
    }
}

/// Depth-first search for a reference cycle reachable from the root.
pub fn check_acyclic(doc: &Document) -> Result<(), StructureError> {
    match find_cycle(doc, false)? {
        Some(cycle) => Err(StructureError::Cycle(cycle)),
        None => Ok(()),
    }
}

fn find_cycle(doc: &Document, skip_unknown: bool) -> Result<Option<Vec<ObjectId>>, ModelError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        OnPath,
        Done,
    }
    let mut color: HashMap<ObjectId, Color> = HashMap::new();
    // (mob, next entry index to explore)
    let mut stack: Vec<(ObjectId, usize)> = vec![(doc.root(), 0)];
    color.insert(doc.root(), Color::OnPath);

    while let Some(&mut (mob_id, ref mut next)) = stack.last_mut() {
        let mob = doc.mob(mob_id).expect("stack holds mobs only");
        let Some(entry) = mob.playlist.get(*next) else {
            color.insert(mob_id, Color::Done);
            stack.pop();
            continue;
        };
        *next += 1;
        let target = entry.target;
        match doc.resolve(target) {
            Ok(Node::Element(_)) => {}
            Ok(Node::Mob(_)) => match color.get(&target) {
                Some(Color::OnPath) => {
                    let from = stack
                        .iter()
                        .position(|(id, _)| *id == target)
                        .expect("on-path mob is on the stack");
                    let mut cycle: Vec<ObjectId> = stack[from..].iter().map(|(id, _)| *id).collect();
                    cycle.push(target);
                    return Ok(Some(cycle));
                }
                Some(Color::Done) => {}
                None => {
                    color.insert(target, Color::OnPath);
                    stack.push((target, 0));
                }
            },
            Err(_) if skip_unknown => {}
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Checks every placement against its parent's bounds.
///
/// Strict mode reports every entry that clamp mode would clip or drop.
/// Clamp mode only reports regions left with no area after clipping.
pub fn check_containment(doc: &Document, mode: Mode) -> Result<Vec<Violation>, StructureError> {
    let mut out = Vec::new();
    let mut on_path = Vec::new();
    containment_walk(
        doc,
        doc.root(),
        (0, doc.total_duration()),
        &EntryPath::default(),
        mode,
        false,
        &mut on_path,
        &mut out,
    )?;
    Ok(out)
}

/// Excess of a region beyond the unit square along each axis.
pub(crate) fn unit_excess(region: &Region) -> (f64, f64) {
    let over = |pos: f64, len: f64| (-pos).max(0.0) + (pos + len - 1.0).max(0.0);
    (over(region.x, region.w), over(region.y, region.h))
}

/// Width and height left after clipping a region to the unit square.
pub(crate) fn clipped_extent(region: &Region) -> (f64, f64) {
    let w = (region.x + region.w).min(1.0) - region.x.max(0.0);
    let h = (region.y + region.h).min(1.0) - region.y.max(0.0);
    (w, h)
}

#[allow(clippy::too_many_arguments)]
fn containment_walk(
    doc: &Document,
    mob_id: ObjectId,
    parent: (u64, u64),
    path: &EntryPath,
    mode: Mode,
    skip_unknown: bool,
    on_path: &mut Vec<ObjectId>,
    out: &mut Vec<Violation>,
) -> Result<(), StructureError> {
    if on_path.contains(&mob_id) {
        let from = on_path.iter().position(|id| *id == mob_id).unwrap();
        let mut cycle = on_path[from..].to_vec();
        cycle.push(mob_id);
        return Err(StructureError::Cycle(cycle));
    }
    on_path.push(mob_id);
    let mob = doc.mob(mob_id).expect("walk visits mobs only");
    let (parent_start, parent_end) = parent;

    for (index, entry) in mob.playlist.iter().enumerate() {
        let child_path = path.child(index);
        let node = match doc.resolve(entry.target) {
            Ok(node) => node,
            Err(_) if skip_unknown => continue,
            Err(e) => return Err(e.into()),
        };

        let start = parent_start.saturating_add(entry.time.start_offset);
        let (end, overrun) = match entry.time.duration {
            Duration::Finite(d) => {
                let end = start.saturating_add(d);
                (end.min(parent_end), end.saturating_sub(parent_end))
            }
            Duration::Open => (parent_end, start.saturating_sub(parent_end)),
        };
        let temporal_fault = overrun > 0 || start >= parent_end;
        if mode == Mode::Strict && temporal_fault {
            out.push(Violation::TemporalOverrun {
                path: child_path.clone(),
                overrun_ms: overrun,
            });
        }

        let (over_x, over_y) = unit_excess(&entry.region);
        let (clip_w, clip_h) = clipped_extent(&entry.region);
        let degenerate = clip_w <= 0.0 || clip_h <= 0.0;
        let report_x = match mode {
            Mode::Strict => over_x > 0.0,
            Mode::Clamp => clip_w <= 0.0,
        };
        let report_y = match mode {
            Mode::Strict => over_y > 0.0,
            Mode::Clamp => clip_h <= 0.0,
        };
        if report_x {
            out.push(Violation::SpatialOverrun {
                path: child_path.clone(),
                axis: Axis::X,
                amount: over_x,
            });
        }
        if report_y {
            out.push(Violation::SpatialOverrun {
                path: child_path.clone(),
                axis: Axis::Y,
                amount: over_y,
            });
        }

        if start >= parent_end || degenerate {
            continue;
        }
        if let Node::Mob(child) = node {
            containment_walk(
                doc,
                child.id,
                (start, end),
                &child_path,
                mode,
                skip_unknown,
                on_path,
                out,
            )?;
        }
    }
    on_path.pop();
    Ok(())
}

fn collect_stats(doc: &Document, acyclic: bool) -> Stats {
    let mut seen = BTreeSet::new();
    let mut entries = 0;
    let mut todo = vec![doc.root()];
    seen.insert(doc.root());
    while let Some(id) = todo.pop() {
        if let Some(mob) = doc.mob(id) {
            entries += mob.playlist.len();
            for entry in &mob.playlist {
                if doc.resolve(entry.target).is_ok() && seen.insert(entry.target) {
                    todo.push(entry.target);
                }
            }
        }
    }
    let max_depth = if acyclic {
        let mut memo = HashMap::new();
        depth_of(doc, doc.root(), &mut memo)
    } else {
        0
    };
    Stats {
        nodes: seen.len(),
        entries,
        max_depth,
    }
}

fn depth_of(doc: &Document, id: ObjectId, memo: &mut HashMap<ObjectId, usize>) -> usize {
    if let Some(&d) = memo.get(&id) {
        return d;
    }
    let d = match doc.mob(id) {
        Some(mob) => {
            1 + mob
                .playlist
                .iter()
                .filter(|e| doc.resolve(e.target).is_ok())
                .map(|e| depth_of(doc, e.target, memo))
                .max()
                .unwrap_or(0)
        }
        None => 1,
    };
    memo.insert(id, d);
    d
}

/// Runs resolution, acyclicity and containment checks in that order,
/// collecting every finding. Containment is skipped when a cycle exists.
pub fn validate(doc: &Document, mode: Mode) -> Report {
    let mut violations = Vec::new();

    for mob in doc.mobs() {
        for (index, entry) in mob.playlist.iter().enumerate() {
            if doc.resolve(entry.target).is_err() {
                violations.push(Violation::UnknownTarget {
                    mob: mob.id,
                    index,
                    target: entry.target,
                });
            }
        }
    }

    let cycle = find_cycle(doc, true).expect("unknown targets are skipped");
    let acyclic = cycle.is_none();
    if let Some(cycle) = cycle {
        violations.push(Violation::Cycle(cycle));
    } else {
        let mut on_path = Vec::new();
        containment_walk(
            doc,
            doc.root(),
            (0, doc.total_duration()),
            &EntryPath::default(),
            mode,
            true,
            &mut on_path,
            &mut violations,
        )
        .expect("graph is acyclic and unknown targets are skipped");
    }

    Report {
        violations,
        stats: collect_stats(doc, acyclic),
    }
}
