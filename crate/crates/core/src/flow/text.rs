//! Canonical text form of a flow script.
//!
//! ```text
//! mobit-flow 1
//! doc <doc id, rest of line>
//! canvas <width> <height>
//! duration <ms>
//! prefetch-lead <ms>
//! objects <n>
//! object <local_ref> <object id> <mime> <payload bytes>
//! instances <n>
//! instance <instance id> <local_ref> <entry path>
//! events <n>
//! <at> prefetch <local_ref>
//! <at> hide <instance id>
//! <at> show <instance id> <local_ref> <x> <y> <w> <h> <z> <background|-> <font scale> <scale mode>
//! <at> end
//! ```
//!
//! Fields are separated by a single space and lines end in LF. Pixel values
//! carry exactly three fractional digits, rounded half to even.

use std::fmt::Write as _;

use thiserror::Error;

use super::{
    AbsRect, EventKind, FlowEvent, FlowHeader, FlowScript, Instance, LocalRefTable, RefObject,
};
use crate::model::{Canvas, EntryPath, ObjectId, ResolvedParams, Rgba, ScaleMode};

const MAGIC: &str = "mobit-flow 1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("malformed script at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("malformed script: {0}")]
    Inconsistent(String),
}

/// Formats a pixel value with three fractional digits, ties to even.
pub fn format_px(value: f64) -> String {
    let s = format!("{value:.3}");
    if s == "-0.000" {
        "0.000".to_string()
    } else {
        s
    }
}

impl FlowScript {
    pub fn to_text(&self) -> String {
        let h = &self.header;
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "doc {}", h.doc_id);
        let _ = writeln!(out, "canvas {} {}", h.canvas.width, h.canvas.height);
        let _ = writeln!(out, "duration {}", h.total_duration);
        let _ = writeln!(out, "prefetch-lead {}", h.prefetch_lead_ms);
        let _ = writeln!(out, "objects {}", h.ref_table.objects.len());
        for o in &h.ref_table.objects {
            let _ = writeln!(out, "object {} {} {} {}", o.local_ref, o.id, o.mime_type, o.payload_size);
        }
        let _ = writeln!(out, "instances {}", h.ref_table.instances.len());
        for i in &h.ref_table.instances {
            let _ = writeln!(out, "instance {} {} {}", i.instance_id, i.local_ref, i.path);
        }
        let _ = writeln!(out, "events {}", self.events.len());
        for e in &self.events {
            let _ = write!(out, "{} ", e.at);
            match &e.kind {
                EventKind::Prefetch { local_ref } => {
                    let _ = writeln!(out, "prefetch {local_ref}");
                }
                EventKind::Hide { instance_id } => {
                    let _ = writeln!(out, "hide {instance_id}");
                }
                EventKind::Show {
                    instance_id,
                    local_ref,
                    rect,
                    z,
                    params,
                } => {
                    let bg = params
                        .background_color
                        .map(|c| c.to_string())
                        .unwrap_or_else(|| "-".to_string());
                    let _ = writeln!(
                        out,
                        "show {instance_id} {local_ref} {} {} {} {} {z} {bg} {} {}",
                        format_px(rect.x),
                        format_px(rect.y),
                        format_px(rect.w),
                        format_px(rect.h),
                        params.font_scale,
                        params.scale_mode.as_str()
                    );
                }
                EventKind::End => {
                    let _ = writeln!(out, "end");
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_text().into_bytes()
    }

    pub fn parse(text: &str) -> Result<FlowScript, ScriptError> {
        let mut lines = Lines {
            inner: text.split_terminator('\n').enumerate(),
        };
        let (n, magic) = lines.next_line()?;
        if magic != MAGIC {
            return Err(malformed(n, "missing mobit-flow header"));
        }
        let (n, line) = lines.next_line()?;
        let doc_id = line
            .strip_prefix("doc ")
            .ok_or_else(|| malformed(n, "expected doc line"))?
            .to_string();
        let canvas = {
            let (n, f) = lines.keyed("canvas", 2)?;
            Canvas {
                width: num(n, f[0])?,
                height: num(n, f[1])?,
            }
        };
        let total_duration = {
            let (n, f) = lines.keyed("duration", 1)?;
            num(n, f[0])?
        };
        let prefetch_lead_ms = {
            let (n, f) = lines.keyed("prefetch-lead", 1)?;
            num(n, f[0])?
        };

        let mut ref_table = LocalRefTable::default();
        let count: usize = {
            let (n, f) = lines.keyed("objects", 1)?;
            num(n, f[0])?
        };
        for _ in 0..count {
            let (n, f) = lines.keyed("object", 4)?;
            let local_ref: u32 = num(n, f[0])?;
            if local_ref as usize != ref_table.objects.len() {
                return Err(malformed(n, "local refs must be dense and ascending"));
            }
            let id = ObjectId::new(num(n, f[1])?).map_err(|e| malformed(n, &e.to_string()))?;
            ref_table.objects.push(RefObject {
                local_ref,
                id,
                mime_type: f[2].parse().map_err(|_| malformed(n, "bad mime type"))?,
                payload_size: num(n, f[3])?,
            });
        }
        let count: usize = {
            let (n, f) = lines.keyed("instances", 1)?;
            num(n, f[0])?
        };
        for _ in 0..count {
            let (n, f) = lines.keyed("instance", 3)?;
            let instance_id: u32 = num(n, f[0])?;
            if instance_id as usize != ref_table.instances.len() {
                return Err(malformed(n, "instance ids must be dense and ascending"));
            }
            let local_ref: u32 = num(n, f[1])?;
            if local_ref as usize >= ref_table.objects.len() {
                return Err(malformed(n, "instance refers to unknown local ref"));
            }
            ref_table.instances.push(Instance {
                instance_id,
                local_ref,
                path: EntryPath::parse(f[2]).ok_or_else(|| malformed(n, "bad entry path"))?,
            });
        }

        let count: usize = {
            let (n, f) = lines.keyed("events", 1)?;
            num(n, f[0])?
        };
        let mut events = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let (n, line) = lines.next_line()?;
            events.push(parse_event(n, line)?);
        }
        if let Ok((n, _)) = lines.next_line() {
            return Err(malformed(n, "trailing content after events"));
        }
        Ok(FlowScript {
            header: FlowHeader {
                doc_id,
                canvas,
                total_duration,
                prefetch_lead_ms,
                ref_table,
            },
            events,
        })
    }

    /// Checks the structural invariants a client relies on: sorted events,
    /// one End, one Show and Hide per instance in that order, one Prefetch
    /// per local ref, all references in range.
    pub fn check(&self) -> Result<(), ScriptError> {
        let bad = |msg: String| Err(ScriptError::Inconsistent(msg));
        let table = &self.header.ref_table;
        if !self.events.windows(2).all(|w| w[0].sort_key() <= w[1].sort_key()) {
            return bad("events are not sorted".into());
        }
        let mut shown = vec![None; table.instances.len()];
        let mut hidden = vec![false; table.instances.len()];
        let mut prefetched = vec![false; table.objects.len()];
        let mut ends = 0;
        for e in &self.events {
            match &e.kind {
                EventKind::Prefetch { local_ref } => match prefetched.get_mut(*local_ref as usize) {
                    Some(seen @ false) => *seen = true,
                    Some(true) => return bad(format!("duplicate prefetch of ref {local_ref}")),
                    None => return bad(format!("prefetch of unknown ref {local_ref}")),
                },
                EventKind::Show {
                    instance_id,
                    local_ref,
                    ..
                } => {
                    let Some(inst) = table.instance(*instance_id) else {
                        return bad(format!("show of unknown instance {instance_id}"));
                    };
                    if inst.local_ref != *local_ref {
                        return bad(format!("instance {instance_id} shown with wrong ref"));
                    }
                    if shown[*instance_id as usize].replace(e.at).is_some() {
                        return bad(format!("instance {instance_id} shown twice"));
                    }
                }
                EventKind::Hide { instance_id } => {
                    let i = *instance_id as usize;
                    if i >= hidden.len() || shown[i].is_none() || hidden[i] {
                        return bad(format!("unmatched hide of instance {instance_id}"));
                    }
                    hidden[i] = true;
                }
                EventKind::End => ends += 1,
            }
        }
        if ends != 1 {
            return bad(format!("expected one end event, found {ends}"));
        }
        if let Some(i) = hidden.iter().position(|h| !h) {
            return bad(format!("instance {i} never hidden"));
        }
        if let Some(r) = prefetched.iter().position(|p| !p) {
            return bad(format!("ref {r} never prefetched"));
        }
        Ok(())
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::SplitTerminator<'a, char>>,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str), ScriptError> {
        match self.inner.next() {
            Some((i, line)) => Ok((i + 1, line)),
            None => Err(ScriptError::Malformed {
                line: 0,
                reason: "unexpected end of script".into(),
            }),
        }
    }

    fn keyed(&mut self, key: &str, arity: usize) -> Result<(usize, Vec<&'a str>), ScriptError> {
        let (n, line) = self.next_line()?;
        let mut fields = line.split(' ');
        if fields.next() != Some(key) {
            return Err(malformed(n, &format!("expected {key} line")));
        }
        let rest: Vec<&str> = fields.collect();
        if rest.len() != arity {
            return Err(malformed(n, &format!("{key} takes {arity} fields")));
        }
        Ok((n, rest))
    }
}

fn malformed(line: usize, reason: &str) -> ScriptError {
    ScriptError::Malformed {
        line,
        reason: reason.to_string(),
    }
}

fn num<T: std::str::FromStr>(line: usize, field: &str) -> Result<T, ScriptError> {
    field
        .parse()
        .map_err(|_| malformed(line, &format!("bad number {field:?}")))
}

fn px(line: usize, field: &str) -> Result<f64, ScriptError> {
    let v: f64 = num(line, field)?;
    if !v.is_finite() {
        return Err(malformed(line, "pixel value must be finite"));
    }
    Ok(v)
}

fn parse_event(n: usize, line: &str) -> Result<FlowEvent, ScriptError> {
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() < 2 {
        return Err(malformed(n, "short event line"));
    }
    let at: u64 = num(n, f[0])?;
    let arity = |want: usize| {
        if f.len() == want {
            Ok(())
        } else {
            Err(malformed(n, &format!("{} event takes {} fields", f[1], want - 2)))
        }
    };
    let kind = match f[1] {
        "prefetch" => {
            arity(3)?;
            EventKind::Prefetch {
                local_ref: num(n, f[2])?,
            }
        }
        "hide" => {
            arity(3)?;
            EventKind::Hide {
                instance_id: num(n, f[2])?,
            }
        }
        "end" => {
            arity(2)?;
            EventKind::End
        }
        "show" => {
            arity(12)?;
            let background_color = match f[9] {
                "-" => None,
                c => Some(Rgba::parse(c).ok_or_else(|| malformed(n, "bad colour"))?),
            };
            let font_scale: f64 = num(n, f[10])?;
            if !(font_scale.is_finite() && font_scale > 0.0) {
                return Err(malformed(n, "font scale must be positive"));
            }
            EventKind::Show {
                instance_id: num(n, f[2])?,
                local_ref: num(n, f[3])?,
                rect: AbsRect {
                    x: px(n, f[4])?,
                    y: px(n, f[5])?,
                    w: px(n, f[6])?,
                    h: px(n, f[7])?,
                },
                z: num(n, f[8])?,
                params: ResolvedParams {
                    background_color,
                    font_scale,
                    scale_mode: ScaleMode::parse(f[11]).ok_or_else(|| malformed(n, "bad scale mode"))?,
                },
            }
        }
        other => return Err(malformed(n, &format!("unknown event kind {other:?}"))),
    };
    Ok(FlowEvent { at, kind })
}
