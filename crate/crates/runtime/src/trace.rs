//! Machine-readable playback trace.
//!
//! One record per line: `wall_at<TAB>action<TAB>subject<TAB>detail`, LF
//! terminated. `wall_at` is the client clock in milliseconds with three
//! decimals. Subjects are `r<local_ref>`, `i<instance_id>` or `-`. Records
//! produced by the timeline carry the presentation time as `pt=<ms>` in
//! the detail.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use mobit_core::flow::{replay, FlowScript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Receive,
    Compose,
    Display,
    Delete,
    Stall,
    Resume,
    StateChange,
    StreamDeliver,
    Warning,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Receive => "Receive",
            Action::Compose => "Compose",
            Action::Display => "Display",
            Action::Delete => "Delete",
            Action::Stall => "Stall",
            Action::Resume => "Resume",
            Action::StateChange => "StateChange",
            Action::StreamDeliver => "StreamDeliver",
            Action::Warning => "Warning",
        }
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "Receive" => Action::Receive,
            "Compose" => Action::Compose,
            "Display" => Action::Display,
            "Delete" => Action::Delete,
            "Stall" => Action::Stall,
            "Resume" => Action::Resume,
            "StateChange" => Action::StateChange,
            "StreamDeliver" => Action::StreamDeliver,
            "Warning" => Action::Warning,
            other => return Err(format!("unknown action {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subject {
    None,
    Ref(u32),
    Instance(u32),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::None => f.write_str("-"),
            Subject::Ref(r) => write!(f, "r{r}"),
            Subject::Instance(i) => write!(f, "i{i}"),
        }
    }
}

impl FromStr for Subject {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| t.parse::<u32>().map_err(|_| format!("bad subject {s:?}"));
        match s.as_bytes().first() {
            Some(b'-') if s.len() == 1 => Ok(Subject::None),
            Some(b'r') => Ok(Subject::Ref(num(&s[1..])?)),
            Some(b'i') => Ok(Subject::Instance(num(&s[1..])?)),
            _ => Err(format!("bad subject {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    /// Client clock in microseconds.
    pub wall_us: u64,
    pub action: Action,
    pub subject: Subject,
    /// Space-separated `key=value` pairs; free text only in the last one.
    pub detail: String,
}

impl TraceRecord {
    pub fn wall_ms(&self) -> f64 {
        self.wall_us as f64 / 1000.0
    }

    /// Value of `key=` in the detail. Values end at the next space except
    /// for `text=`, which runs to the end of the line.
    pub fn field(&self, key: &str) -> Option<&str> {
        let mut rest = self.detail.as_str();
        loop {
            if let Some(text) = rest.strip_prefix("text=") {
                return (key == "text").then_some(text);
            }
            let (token, tail) = rest.split_once(' ').unwrap_or((rest, ""));
            if let Some(v) = token.strip_prefix(key).and_then(|t| t.strip_prefix('=')) {
                return Some(v);
            }
            if tail.is_empty() {
                return None;
            }
            rest = tail;
        }
    }

    pub fn field_u64(&self, key: &str) -> Option<u64> {
        self.field(key)?.parse().ok()
    }

    /// Presentation time in ms, for records emitted by the timeline.
    pub fn pt(&self) -> Option<u64> {
        self.field_u64("pt")
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:03}\t{}\t{}\t{}",
            self.wall_us / 1000,
            self.wall_us % 1000,
            self.action.as_str(),
            self.subject,
            self.detail
        )
    }
}

impl FromStr for TraceRecord {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, String> {
        let mut parts = line.splitn(4, '\t');
        let (Some(wall), Some(action), Some(subject), Some(detail)) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(format!("expected four tab-separated fields in {line:?}"));
        };
        let (ms, frac) = wall.split_once('.').ok_or_else(|| format!("bad time {wall:?}"))?;
        let ms: u64 = ms.parse().map_err(|_| format!("bad time {wall:?}"))?;
        if frac.len() != 3 {
            return Err(format!("bad time {wall:?}"));
        }
        let us: u64 = frac.parse().map_err(|_| format!("bad time {wall:?}"))?;
        Ok(TraceRecord {
            wall_us: ms * 1000 + us,
            action: action.parse()?,
            subject: subject.parse()?,
            detail: detail.to_string(),
        })
    }
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, String> {
    text.lines()
        .enumerate()
        .map(|(n, l)| l.parse().map_err(|e| format!("line {}: {e}", n + 1)))
        .collect()
}

fn legal(from: &str, to: &str) -> bool {
    matches!(
        (from, to),
        ("Init", "Buffering")
            | ("Buffering", "Playing")
            | ("Playing", "Stalled")
            | ("Stalled", "Playing")
            | ("Playing", "Paused")
            | ("Paused", "Playing")
            | ("Playing", "Finished")
    )
}

#[derive(Default)]
struct Lifecycle {
    composed: bool,
    displayed: bool,
    deleted: bool,
}

/// Checks that the state changes form a path in the legal transition
/// relation starting at Init, that timestamps never decrease, that every
/// instance goes Compose, Display, Delete in that order at most once, and
/// that each Compose follows the complete reception of its ref.
pub fn validate_trace(records: &[TraceRecord]) -> Result<(), String> {
    let mut state = "Init".to_string();
    let mut last_wall = 0;
    let mut received: BTreeMap<u32, u64> = BTreeMap::new();
    let mut complete: BTreeSet<u32> = BTreeSet::new();
    let mut life: BTreeMap<u32, Lifecycle> = BTreeMap::new();

    for (n, rec) in records.iter().enumerate() {
        let at = |msg: String| format!("record {}: {msg}", n + 1);
        if rec.wall_us < last_wall {
            return Err(at("time went backwards".into()));
        }
        last_wall = rec.wall_us;
        match (rec.action, rec.subject) {
            (Action::StateChange, _) => {
                let (from, to) = rec
                    .detail
                    .split_once("->")
                    .ok_or_else(|| at(format!("bad state change {:?}", rec.detail)))?;
                if from != state {
                    return Err(at(format!("transition from {from} while in {state}")));
                }
                if !legal(from, to) {
                    return Err(at(format!("illegal transition {from}->{to}")));
                }
                state = to.to_string();
            }
            (Action::Receive, Subject::Ref(r)) => {
                let offset = rec.field_u64("offset").ok_or_else(|| at("missing offset".into()))?;
                let len = rec.field_u64("len").ok_or_else(|| at("missing len".into()))?;
                let total = rec.field_u64("total").ok_or_else(|| at("missing total".into()))?;
                let got = received.entry(r).or_default();
                if offset != *got {
                    return Err(at(format!("chunk for r{r} at {offset}, expected {got}")));
                }
                *got += len;
                if *got > total {
                    return Err(at(format!("r{r} received past its total")));
                }
                if *got == total {
                    complete.insert(r);
                }
            }
            (Action::Compose, Subject::Instance(i)) => {
                let r = rec.field_u64("r").ok_or_else(|| at("missing ref".into()))? as u32;
                if !complete.contains(&r) {
                    return Err(at(format!("i{i} composed before r{r} was complete")));
                }
                let l = life.entry(i).or_default();
                if l.composed {
                    return Err(at(format!("i{i} composed twice")));
                }
                l.composed = true;
            }
            (Action::Display, Subject::Instance(i)) => {
                let l = life.entry(i).or_default();
                if !l.composed || l.displayed {
                    return Err(at(format!("i{i} displayed out of order")));
                }
                l.displayed = true;
            }
            (Action::Delete, Subject::Instance(i)) => {
                let l = life.entry(i).or_default();
                if !l.displayed || l.deleted {
                    return Err(at(format!("i{i} deleted out of order")));
                }
                l.deleted = true;
            }
            (Action::Receive | Action::Compose | Action::Display | Action::Delete, s) => {
                return Err(at(format!("{} with subject {s}", rec.action.as_str())));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Instances displayed and not yet deleted after each batch of timeline
/// records sharing one presentation time.
pub fn displayed_sets(records: &[TraceRecord]) -> Vec<(u64, BTreeSet<u32>)> {
    let mut visible = BTreeSet::new();
    let mut out: Vec<(u64, BTreeSet<u32>)> = Vec::new();
    for rec in records {
        let Subject::Instance(i) = rec.subject else { continue };
        let change = match rec.action {
            Action::Display => visible.insert(i),
            Action::Delete => visible.remove(&i),
            _ => continue,
        };
        debug_assert!(change);
        let pt = rec.pt().unwrap_or(0);
        match out.last_mut() {
            Some((t, set)) if *t == pt => *set = visible.clone(),
            _ => out.push((pt, visible.clone())),
        }
    }
    out
}

/// Compares the displayed set of the trace with `replay(script, t)` at
/// every presentation time where the display changed.
pub fn check_scene_fidelity(records: &[TraceRecord], script: &FlowScript) -> Result<(), String> {
    let by_path: BTreeMap<_, u32> = script
        .header
        .ref_table
        .instances
        .iter()
        .map(|i| (i.path.clone(), i.instance_id))
        .collect();
    for (pt, shown) in displayed_sets(records) {
        let scene = replay(script, pt).map_err(|e| e.to_string())?;
        let expected: BTreeSet<u32> = scene.items.keys().map(|p| by_path[p]).collect();
        if shown != expected {
            return Err(format!("at pt={pt} trace shows {shown:?}, replay has {expected:?}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(wall_us: u64, action: Action, subject: Subject, detail: &str) -> TraceRecord {
        TraceRecord {
            wall_us,
            action,
            subject,
            detail: detail.into(),
        }
    }

    #[test]
    fn line_format_roundtrip() {
        let r = rec(1_200_400, Action::Stall, Subject::Instance(3), "r=1 pt=2000");
        let line = r.to_string();
        assert_eq!(line, "1200.400\tStall\ti3\tr=1 pt=2000");
        assert_eq!(line.parse::<TraceRecord>().unwrap(), r);
        let text = format_trace(&[r.clone(), rec(5, Action::StateChange, Subject::None, "Init->Buffering")]);
        assert_eq!(text, "1200.400\tStall\ti3\tr=1 pt=2000\n0.005\tStateChange\t-\tInit->Buffering\n");
        assert_eq!(parse_trace(&text).unwrap().len(), 2);
        assert!("1.0\tStall\t-\t".parse::<TraceRecord>().is_err());
        assert!("1.000\tDance\t-\t".parse::<TraceRecord>().is_err());
    }

    #[test]
    fn fields() {
        let r = rec(0, Action::StreamDeliver, Subject::Instance(0), "port=7001 at=4000 text=hello there x=1");
        assert_eq!(r.field("port"), Some("7001"));
        assert_eq!(r.field_u64("at"), Some(4000));
        assert_eq!(r.field("text"), Some("hello there x=1"));
        assert_eq!(r.field("x"), None);
        assert_eq!(r.field("pt"), None);
    }

    fn good_trace() -> Vec<TraceRecord> {
        vec![
            rec(0, Action::StateChange, Subject::None, "Init->Buffering"),
            rec(1, Action::Receive, Subject::Ref(0), "offset=0 len=5 total=10"),
            rec(2, Action::Receive, Subject::Ref(0), "offset=5 len=5 total=10"),
            rec(2, Action::StateChange, Subject::None, "Buffering->Playing"),
            rec(2, Action::Compose, Subject::Instance(0), "r=0 pt=0"),
            rec(2, Action::Display, Subject::Instance(0), "pt=0"),
            rec(9, Action::Delete, Subject::Instance(0), "pt=7"),
            rec(9, Action::StateChange, Subject::None, "Playing->Finished"),
        ]
    }

    #[test]
    fn validator_accepts_legal_trace() {
        validate_trace(&good_trace()).unwrap();
        let sets = displayed_sets(&good_trace());
        assert_eq!(sets, vec![(0, BTreeSet::from([0])), (7, BTreeSet::new())]);
    }

    #[test]
    fn validator_rejects_illegal_transition() {
        let mut t = good_trace();
        t[3].detail = "Buffering->Finished".into();
        assert!(validate_trace(&t).unwrap_err().contains("illegal"));
        let mut t = good_trace();
        t.remove(0);
        assert!(validate_trace(&t).is_err());
    }

    #[test]
    fn validator_rejects_lifecycle_violations() {
        let mut t = good_trace();
        t.swap(4, 5);
        assert!(validate_trace(&t).is_err());
        let mut t = good_trace();
        t.remove(2);
        assert!(validate_trace(&t).unwrap_err().contains("before r0 was complete"));
        let mut t = good_trace();
        t[6].wall_us = 1;
        assert!(validate_trace(&t).unwrap_err().contains("backwards"));
    }
}
