//! Document model: Mobs, Elements, playlists and the parameters that
//! place each reference in its parent's space and time.
//!
//! All values are immutable once a [`Document`] has been built and can be
//! shared freely between threads.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::ModelError;

/// Globally unique numeric id of a Mob or Element within one document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId(u64);

impl ObjectId {
    pub fn new(value: u64) -> Result<Self, ModelError> {
        if value == 0 {
            return Err(ModelError::ZeroId);
        }
        Ok(ObjectId(value))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Display duration of a placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Duration {
    /// Strictly positive number of milliseconds.
    Finite(u64),
    /// Lasts until the parent ends.
    Open,
}

/// Start offset and duration relative to the parent's interval, in ms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSpec {
    pub start_offset: u64,
    pub duration: Duration,
}

impl TimeSpec {
    pub fn new(start_offset: u64, duration: Duration) -> Result<Self, ModelError> {
        if duration == Duration::Finite(0) {
            return Err(ModelError::ZeroDuration);
        }
        Ok(TimeSpec {
            start_offset,
            duration,
        })
    }

    pub fn open(start_offset: u64) -> Self {
        TimeSpec {
            start_offset,
            duration: Duration::Open,
        }
    }

    pub fn finite(start_offset: u64, duration_ms: u64) -> Result<Self, ModelError> {
        Self::new(start_offset, Duration::Finite(duration_ms))
    }
}

/// Placement rectangle in unit fractions of the parent region.
///
/// Only `w > 0` and `h > 0` are enforced here. Whether the region must lie
/// inside the unit square depends on the validation mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Region {
    pub const FULL: Region = Region {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };

    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, ModelError> {
        let finite = [x, y, w, h].iter().all(|v| v.is_finite());
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(ModelError::BadRegion { x, y, w, h });
        }
        Ok(Region { x, y, w, h })
    }

    /// True when the region lies inside the parent's unit square.
    pub fn is_within_unit(&self) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= 1.0 && self.y + self.h <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rgba(pub [u8; 4]);

impl Rgba {
    /// Parses `#RRGGBBAA` (alpha required) or `#RRGGBB` (opaque).
    pub fn parse(text: &str) -> Option<Self> {
        let hex = text.strip_prefix('#')?;
        if !(hex.len() == 6 || hex.len() == 8) || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        let byte = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).ok();
        let alpha = if hex.len() == 8 { byte(6)? } else { 0xff };
        Some(Rgba([byte(0)?, byte(2)?, byte(4)?, alpha]))
    }
}

impl fmt::Display for Rgba {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [r, g, b, a] = self.0;
        write!(f, "#{r:02x}{g:02x}{b:02x}{a:02x}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScaleMode {
    #[default]
    Fit,
    Fill,
    Stretch,
}

impl ScaleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::Fit => "fit",
            ScaleMode::Fill => "fill",
            ScaleMode::Stretch => "stretch",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "fit" => Some(ScaleMode::Fit),
            "fill" => Some(ScaleMode::Fill),
            "stretch" => Some(ScaleMode::Stretch),
            _ => None,
        }
    }
}

/// Per-entry presentation parameters. Absent fields inherit from the parent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParamSet {
    pub background_color: Option<Rgba>,
    pub font_scale: Option<f64>,
    pub scale_mode: Option<ScaleMode>,
}

impl ParamSet {
    pub fn new(
        background_color: Option<Rgba>,
        font_scale: Option<f64>,
        scale_mode: Option<ScaleMode>,
    ) -> Result<Self, ModelError> {
        if let Some(s) = font_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(ModelError::BadFontScale(s));
            }
        }
        Ok(ParamSet {
            background_color,
            font_scale,
            scale_mode,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.background_color.is_none() && self.font_scale.is_none() && self.scale_mode.is_none()
    }
}

/// Parameters after inheritance down the hierarchy: colour and scale mode
/// are overridden by the nearest setting, font scale multiplies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedParams {
    pub background_color: Option<Rgba>,
    pub font_scale: f64,
    pub scale_mode: ScaleMode,
}

impl Default for ResolvedParams {
    fn default() -> Self {
        ResolvedParams {
            background_color: None,
            font_scale: 1.0,
            scale_mode: ScaleMode::Fit,
        }
    }
}

impl ResolvedParams {
    pub fn inherit(&self, local: &ParamSet) -> ResolvedParams {
        ResolvedParams {
            background_color: local.background_color.or(self.background_color),
            font_scale: self.font_scale * local.font_scale.unwrap_or(1.0),
            scale_mode: local.scale_mode.unwrap_or(self.scale_mode),
        }
    }
}

/// Sequence of playlist entry indices leading from the root to a placement.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct EntryPath(pub Vec<u32>);

impl EntryPath {
    pub fn child(&self, index: usize) -> EntryPath {
        let mut steps = self.0.clone();
        steps.push(index as u32);
        EntryPath(steps)
    }

    pub fn parse(text: &str) -> Option<EntryPath> {
        if text == "-" {
            return Some(EntryPath::default());
        }
        text.split('.')
            .map(|s| s.parse().ok())
            .collect::<Option<Vec<u32>>>()
            .map(EntryPath)
    }
}

impl fmt::Display for EntryPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("-");
        }
        for (i, step) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{step}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaylistEntry {
    pub target: ObjectId,
    pub region: Region,
    pub time: TimeSpec,
    pub params: ParamSet,
}

impl PlaylistEntry {
    /// Full-region entry with no parameters.
    pub fn full(target: ObjectId, time: TimeSpec) -> Self {
        PlaylistEntry {
            target,
            region: Region::FULL,
            time,
            params: ParamSet::default(),
        }
    }
}

/// Composition node. Playlist order defines stacking and local numbering.
#[derive(Debug, Clone, PartialEq)]
pub struct Mob {
    pub id: ObjectId,
    pub name: String,
    pub playlist: Vec<PlaylistEntry>,
}

/// Lowercased `type/subtype` pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MimeType {
    kind: String,
    subtype: String,
}

impl MimeType {
    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn subtype(&self) -> &str {
        &self.subtype
    }

    /// Live types are fed by a sub-server at runtime and carry no payload.
    pub fn is_live(&self) -> bool {
        self.subtype.starts_with("x-live")
    }
}

impl fmt::Display for MimeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind, self.subtype)
    }
}

impl std::str::FromStr for MimeType {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, subtype) = parse_mime(s)?;
        Ok(MimeType { kind, subtype })
    }
}

fn is_token_char(c: char) -> bool {
    // RFC 2045 token: any printable ASCII except space and tspecials
    c.is_ascii_graphic() && !"()<>@,;:\\\"/[]?=".contains(c)
}

/// Splits a MIME type into a lowercased `(type, subtype)` pair.
pub fn parse_mime(text: &str) -> Result<(String, String), ModelError> {
    let malformed = || ModelError::MalformedMime(text.to_string());
    let (kind, subtype) = text.trim().split_once('/').ok_or_else(malformed)?;
    let valid = |t: &str| !t.is_empty() && t.chars().all(is_token_char);
    if !valid(kind) || !valid(subtype) {
        return Err(malformed());
    }
    Ok((kind.to_ascii_lowercase(), subtype.to_ascii_lowercase()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Inline(Vec<u8>),
    /// Opaque key into a payload store.
    Stored(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub id: ObjectId,
    pub name: String,
    pub mime_type: MimeType,
    pub payload: Payload,
    pub intrinsic_size: Option<(u32, u32)>,
}

impl Element {
    fn check(&self) -> Result<(), ModelError> {
        let empty = match &self.payload {
            Payload::Inline(bytes) => bytes.is_empty(),
            Payload::Stored(key) => key.is_empty(),
        };
        if empty && !self.mime_type.is_live() {
            return Err(ModelError::EmptyPayload(self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Node<'a> {
    Mob(&'a Mob),
    Element(&'a Element),
}

impl Node<'_> {
    pub fn id(&self) -> ObjectId {
        match self {
            Node::Mob(m) => m.id,
            Node::Element(e) => e.id,
        }
    }
}

/// Canvas size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    id: String,
    root: ObjectId,
    canvas: Canvas,
    total_duration: u64,
    mobs: BTreeMap<ObjectId, Mob>,
    elements: BTreeMap<ObjectId, Element>,
}

impl Document {
    /// Builds a document, checking every invariant that does not require
    /// graph traversal. Dangling references and cycles are the validator's
    /// business.
    pub fn new(
        id: impl Into<String>,
        root: ObjectId,
        canvas: Canvas,
        total_duration: u64,
        mobs: impl IntoIterator<Item = Mob>,
        elements: impl IntoIterator<Item = Element>,
    ) -> Result<Self, ModelError> {
        if canvas.width == 0 || canvas.height == 0 {
            return Err(ModelError::EmptyCanvas);
        }
        if total_duration == 0 {
            return Err(ModelError::ZeroDuration);
        }
        let mut mob_map = BTreeMap::new();
        for mob in mobs {
            let id = mob.id;
            if mob_map.insert(id, mob).is_some() {
                return Err(ModelError::DuplicateId(id));
            }
        }
        let mut element_map = BTreeMap::new();
        for element in elements {
            let id = element.id;
            element.check()?;
            if mob_map.contains_key(&id) || element_map.insert(id, element).is_some() {
                return Err(ModelError::DuplicateId(id));
            }
        }
        if !mob_map.contains_key(&root) {
            return Err(ModelError::RootNotMob(root));
        }
        Ok(Document {
            id: id.into(),
            root,
            canvas,
            total_duration,
            mobs: mob_map,
            elements: element_map,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn root(&self) -> ObjectId {
        self.root
    }

    pub fn root_mob(&self) -> &Mob {
        &self.mobs[&self.root]
    }

    pub fn canvas(&self) -> Canvas {
        self.canvas
    }

    pub fn total_duration(&self) -> u64 {
        self.total_duration
    }

    pub fn mobs(&self) -> impl Iterator<Item = &Mob> {
        self.mobs.values()
    }

    pub fn elements(&self) -> impl Iterator<Item = &Element> {
        self.elements.values()
    }

    pub fn mob(&self, id: ObjectId) -> Option<&Mob> {
        self.mobs.get(&id)
    }

    pub fn element(&self, id: ObjectId) -> Option<&Element> {
        self.elements.get(&id)
    }

    pub fn resolve(&self, id: ObjectId) -> Result<Node<'_>, ModelError> {
        resolve(self, id)
    }
}

pub fn resolve(doc: &Document, id: ObjectId) -> Result<Node<'_>, ModelError> {
    if let Some(mob) = doc.mobs.get(&id) {
        Ok(Node::Mob(mob))
    } else if let Some(element) = doc.elements.get(&id) {
        Ok(Node::Element(element))
    } else {
        Err(ModelError::UnknownId(id))
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn resolve_finds_mobs_and_elements() {
        let d = doc(1000, vec![mob(1, vec![])], vec![element(7, 4)]);
        assert!(matches!(resolve(&d, oid(1)), Ok(Node::Mob(m)) if m.id == oid(1)));
        assert!(matches!(resolve(&d, oid(7)), Ok(Node::Element(e)) if e.id == oid(7)));
        assert_eq!(
            resolve(&d, oid(99)).unwrap_err(),
            ModelError::UnknownId(oid(99))
        );
    }

    #[test]
    fn mime_parsing() {
        assert_eq!(parse_mime("Image/PNG").unwrap(), ("image".into(), "png".into()));
        assert_eq!(parse_mime("text/plain").unwrap(), ("text".into(), "plain".into()));
        assert!(matches!(parse_mime("video"), Err(ModelError::MalformedMime(_))));
        assert!(parse_mime("/png").is_err());
        assert!(parse_mime("image/").is_err());
        assert!(parse_mime("im age/png").is_err());
        assert!(parse_mime("image/png/x").is_err());
    }

    #[test]
    fn duplicate_ids_across_maps_rejected() {
        let err = Document::new(
            "d",
            oid(1),
            Canvas { width: 1, height: 1 },
            10,
            vec![mob(1, vec![])],
            vec![element(1, 3)],
        )
        .unwrap_err();
        assert_eq!(err, ModelError::DuplicateId(oid(1)));
    }

    #[test]
    fn root_must_be_a_mob() {
        let err = Document::new(
            "d",
            oid(7),
            Canvas { width: 1, height: 1 },
            10,
            vec![mob(1, vec![])],
            vec![element(7, 3)],
        )
        .unwrap_err();
        assert_eq!(err, ModelError::RootNotMob(oid(7)));
    }

    #[test]
    fn static_elements_need_payload() {
        let mut e = element(7, 0);
        let err = Document::new("d", oid(1), Canvas { width: 1, height: 1 }, 10, vec![mob(1, vec![])], vec![e.clone()])
            .unwrap_err();
        assert_eq!(err, ModelError::EmptyPayload(oid(7)));
        e.mime_type = "text/x-live".parse().unwrap();
        assert!(Document::new("d", oid(1), Canvas { width: 1, height: 1 }, 10, vec![mob(1, vec![])], vec![e]).is_ok());
    }

    #[test]
    fn value_invariants() {
        assert!(ObjectId::new(0).is_err());
        assert!(TimeSpec::finite(0, 0).is_err());
        assert!(Region::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Region::new(-0.5, 2.0, 0.1, 1.0).is_ok());
        assert!(ParamSet::new(None, Some(0.0), None).is_err());
        assert_eq!(Rgba::parse("#ff000080"), Some(Rgba([255, 0, 0, 128])));
        assert_eq!(Rgba::parse("#00ff00"), Some(Rgba([0, 255, 0, 255])));
        assert_eq!(Rgba([1, 2, 3, 4]).to_string(), "#01020304");
        assert_eq!(Rgba::parse("00ff00"), None);
    }

    #[test]
    fn params_inherit_down_the_hierarchy() {
        let base = ResolvedParams::default();
        let a = base.inherit(&ParamSet::new(Some(Rgba([1, 1, 1, 1])), Some(2.0), None).unwrap());
        let b = a.inherit(&ParamSet::new(None, Some(1.5), Some(ScaleMode::Fill)).unwrap());
        assert_eq!(b.background_color, Some(Rgba([1, 1, 1, 1])));
        assert_eq!(b.font_scale, 3.0);
        assert_eq!(b.scale_mode, ScaleMode::Fill);
    }
}
