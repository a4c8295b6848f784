//! The `.mobit.xml` document format.
//!
//! ```xml
//! <mobit version="1" id="demo" root="1" canvas="800x600" duration="10000">
//!   <mob id="1" name="root">
//!     <entry ref="7" x="0" y="0" w="1" h="1" start="0" dur="open"/>
//!   </mob>
//!   <element id="7" name="logo" mime="image/png" src="logo.png" width="64" height="64"/>
//! </mobit>
//! ```
//!
//! Inline payloads are base64 text inside `<element>`; `src` names a key in
//! the payload store instead. The schema ships as `schema/mobit.xsd`.
//!
//! Serialization is canonical: fixed attribute order, nodes by ascending id,
//! two-space indentation and LF line endings.

use std::fmt::Write as _;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use thiserror::Error;

use crate::error::ModelError;
use crate::model::{
    Canvas, Document, Duration, Element, Mob, ObjectId, ParamSet, Payload, PlaylistEntry, Region,
    Rgba, ScaleMode, TimeSpec,
};

/// Id used when the `mobit` element carries no `id` attribute.
pub const DEFAULT_DOC_ID: &str = "default";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DocError {
    #[error("xml syntax error at {line}:{col}: {message}")]
    XmlSyntax { line: u32, col: u32, message: String },
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("duplicate object id {0}")]
    DuplicateId(ObjectId),
}

fn schema(path: &str, reason: impl Into<String>) -> DocError {
    DocError::Schema {
        path: path.to_string(),
        reason: reason.into(),
    }
}

struct Attrs<'a, 'input> {
    node: roxmltree::Node<'a, 'input>,
    path: String,
}

impl<'a, 'input> Attrs<'a, 'input> {
    fn new(node: roxmltree::Node<'a, 'input>, path: String, allowed: &[&str]) -> Result<Self, DocError> {
        for attr in node.attributes() {
            if attr.namespace().is_some() || !allowed.contains(&attr.name()) {
                return Err(schema(&path, format!("unexpected attribute {:?}", attr.name())));
            }
        }
        Ok(Attrs { node, path })
    }

    fn opt(&self, name: &str) -> Option<&'a str> {
        self.node.attribute(name)
    }

    fn req(&self, name: &str) -> Result<&'a str, DocError> {
        self.opt(name)
            .ok_or_else(|| schema(&self.path, format!("missing attribute {name:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, name: &str, value: &str) -> Result<T, DocError> {
        value
            .trim()
            .parse()
            .map_err(|_| schema(&self.path, format!("bad value {value:?} for {name:?}")))
    }

    fn id(&self, name: &str) -> Result<ObjectId, DocError> {
        let raw: u64 = self.parse(name, self.req(name)?)?;
        ObjectId::new(raw).map_err(|e| schema(&self.path, e.to_string()))
    }

    fn fraction(&self, name: &str, default: f64) -> Result<f64, DocError> {
        let v = match self.opt(name) {
            Some(text) => self.parse(name, text)?,
            None => default,
        };
        if !v.is_finite() {
            return Err(schema(&self.path, format!("{name:?} must be finite")));
        }
        Ok(v)
    }
}

fn check_children(node: roxmltree::Node, path: &str, allowed: &[&str], text_allowed: bool) -> Result<(), DocError> {
    for child in node.children() {
        if child.is_element() {
            if !allowed.contains(&child.tag_name().name()) || child.tag_name().namespace().is_some() {
                return Err(schema(path, format!("unexpected element <{}>", child.tag_name().name())));
            }
        } else if child.is_text() && !text_allowed && !child.text().unwrap_or("").trim().is_empty() {
            return Err(schema(path, "unexpected text content"));
        }
    }
    Ok(())
}

fn model_error(path: &str, err: ModelError) -> DocError {
    match err {
        ModelError::DuplicateId(id) => DocError::DuplicateId(id),
        other => schema(path, other.to_string()),
    }
}

fn parse_entry(node: roxmltree::Node, path: String) -> Result<PlaylistEntry, DocError> {
    let a = Attrs::new(
        node,
        path,
        &["ref", "x", "y", "w", "h", "start", "dur", "bg", "font-scale", "scale"],
    )?;
    check_children(node, &a.path, &[], false)?;
    let target = a.id("ref")?;
    let region = Region::new(
        a.fraction("x", 0.0)?,
        a.fraction("y", 0.0)?,
        a.fraction("w", 1.0)?,
        a.fraction("h", 1.0)?,
    )
    .map_err(|e| model_error(&a.path, e))?;
    let start = match a.opt("start") {
        Some(v) => a.parse("start", v)?,
        None => 0,
    };
    let duration = match a.opt("dur").map(str::trim) {
        None | Some("open") => Duration::Open,
        Some(v) => Duration::Finite(a.parse("dur", v)?),
    };
    let time = TimeSpec::new(start, duration).map_err(|e| model_error(&a.path, e))?;
    let background_color = match a.opt("bg") {
        Some(v) => Some(Rgba::parse(v.trim()).ok_or_else(|| schema(&a.path, format!("bad colour {v:?}")))?),
        None => None,
    };
    let font_scale = match a.opt("font-scale") {
        Some(v) => Some(a.parse::<f64>("font-scale", v)?),
        None => None,
    };
    let scale_mode = match a.opt("scale") {
        Some(v) => Some(ScaleMode::parse(v.trim()).ok_or_else(|| schema(&a.path, format!("bad scale mode {v:?}")))?),
        None => None,
    };
    let params = ParamSet::new(background_color, font_scale, scale_mode).map_err(|e| model_error(&a.path, e))?;
    Ok(PlaylistEntry {
        target,
        region,
        time,
        params,
    })
}

fn parse_mob(node: roxmltree::Node, path: String) -> Result<Mob, DocError> {
    let a = Attrs::new(node, path, &["id", "name"])?;
    check_children(node, &a.path, &["entry"], false)?;
    let mut playlist = Vec::new();
    for (i, child) in node.children().filter(|c| c.is_element()).enumerate() {
        playlist.push(parse_entry(child, format!("{}/entry[{i}]", a.path))?);
    }
    Ok(Mob {
        id: a.id("id")?,
        name: a.opt("name").unwrap_or("").to_string(),
        playlist,
    })
}

fn parse_element(node: roxmltree::Node, path: String) -> Result<Element, DocError> {
    let a = Attrs::new(node, path, &["id", "name", "mime", "src", "width", "height"])?;
    check_children(node, &a.path, &[], true)?;
    let mime = a.req("mime")?;
    let mime_type = mime.parse().map_err(|e| model_error(&a.path, e))?;
    let text: String = node
        .children()
        .filter_map(|c| c.text())
        .flat_map(|t| t.chars())
        .filter(|c| !c.is_ascii_whitespace())
        .collect();
    let payload = match a.opt("src") {
        Some(_) if !text.is_empty() => {
            return Err(schema(&a.path, "element has both src and inline payload"));
        }
        Some(src) => Payload::Stored(src.to_string()),
        None => Payload::Inline(
            BASE64
                .decode(text.as_bytes())
                .map_err(|e| schema(&a.path, format!("bad base64 payload: {e}")))?,
        ),
    };
    let intrinsic_size = match (a.opt("width"), a.opt("height")) {
        (None, None) => None,
        (Some(w), Some(h)) => Some((a.parse("width", w)?, a.parse("height", h)?)),
        _ => return Err(schema(&a.path, "width and height must be given together")),
    };
    Ok(Element {
        id: a.id("id")?,
        name: a.opt("name").unwrap_or("").to_string(),
        mime_type,
        payload,
        intrinsic_size,
    })
}

fn parse_canvas(a: &Attrs) -> Result<Canvas, DocError> {
    let text = a.req("canvas")?;
    let (w, h) = text
        .split_once('x')
        .ok_or_else(|| schema(&a.path, format!("canvas {text:?} must be WIDTHxHEIGHT")))?;
    Ok(Canvas {
        width: a.parse("canvas", w)?,
        height: a.parse("canvas", h)?,
    })
}

pub fn parse_document(bytes: &[u8]) -> Result<Document, DocError> {
    let text = std::str::from_utf8(bytes).map_err(|e| DocError::XmlSyntax {
        line: 1,
        col: 1,
        message: format!("input is not UTF-8: {e}"),
    })?;
    let xml = roxmltree::Document::parse(text).map_err(|e| {
        let pos = e.pos();
        DocError::XmlSyntax {
            line: pos.row,
            col: pos.col,
            message: e.to_string(),
        }
    })?;
    let root = xml.root_element();
    if root.tag_name().name() != "mobit" || root.tag_name().namespace().is_some() {
        return Err(schema("/", "root element must be <mobit>"));
    }
    let a = Attrs::new(root, "/mobit".into(), &["version", "id", "root", "canvas", "duration"])?;
    if a.req("version")?.trim() != "1" {
        return Err(schema(&a.path, "unsupported version"));
    }
    let doc_id = a.opt("id").unwrap_or(DEFAULT_DOC_ID);
    if doc_id.is_empty() || doc_id.chars().any(char::is_control) {
        return Err(schema(&a.path, "document id must be non-empty without control characters"));
    }
    let root_id = a.id("root")?;
    let canvas = parse_canvas(&a)?;
    let duration: u64 = a.parse("duration", a.req("duration")?)?;
    check_children(root, &a.path, &["mob", "element"], false)?;

    let mut mobs = Vec::new();
    let mut elements = Vec::new();
    for (i, child) in root.children().filter(|c| c.is_element()).enumerate() {
        match child.tag_name().name() {
            "mob" => mobs.push(parse_mob(child, format!("/mobit/mob[{i}]"))?),
            _ => elements.push(parse_element(child, format!("/mobit/element[{i}]"))?),
        }
    }
    Document::new(doc_id, root_id, canvas, duration, mobs, elements).map_err(|e| model_error("/mobit", e))
}

fn escape(out: &mut String, value: &str) {
    for c in value.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c if c.is_control() => {
                let _ = write!(out, "&#{};", c as u32);
            }
            c => out.push(c),
        }
    }
}

fn attr(out: &mut String, name: &str, value: &str) {
    out.push(' ');
    out.push_str(name);
    out.push_str("=\"");
    escape(out, value);
    out.push('"');
}

fn write_entry(out: &mut String, e: &PlaylistEntry) {
    out.push_str("    <entry");
    attr(out, "ref", &e.target.to_string());
    attr(out, "x", &e.region.x.to_string());
    attr(out, "y", &e.region.y.to_string());
    attr(out, "w", &e.region.w.to_string());
    attr(out, "h", &e.region.h.to_string());
    attr(out, "start", &e.time.start_offset.to_string());
    let dur = match e.time.duration {
        Duration::Open => "open".to_string(),
        Duration::Finite(d) => d.to_string(),
    };
    attr(out, "dur", &dur);
    if let Some(bg) = e.params.background_color {
        attr(out, "bg", &bg.to_string());
    }
    if let Some(fs) = e.params.font_scale {
        attr(out, "font-scale", &fs.to_string());
    }
    if let Some(mode) = e.params.scale_mode {
        attr(out, "scale", mode.as_str());
    }
    out.push_str("/>\n");
}

/// Canonical XML form of a document.
pub fn serialize_document(doc: &Document) -> Vec<u8> {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<mobit");
    attr(&mut out, "version", "1");
    attr(&mut out, "id", doc.id());
    attr(&mut out, "root", &doc.root().to_string());
    let canvas = doc.canvas();
    attr(&mut out, "canvas", &format!("{}x{}", canvas.width, canvas.height));
    attr(&mut out, "duration", &doc.total_duration().to_string());
    out.push_str(">\n");

    let mut mobs = doc.mobs().peekable();
    let mut elements = doc.elements().peekable();
    loop {
        let take_mob = match (mobs.peek(), elements.peek()) {
            (Some(m), Some(e)) => m.id < e.id,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        if take_mob {
            let mob = mobs.next().unwrap();
            out.push_str("  <mob");
            attr(&mut out, "id", &mob.id.to_string());
            attr(&mut out, "name", &mob.name);
            if mob.playlist.is_empty() {
                out.push_str("/>\n");
            } else {
                out.push_str(">\n");
                for entry in &mob.playlist {
                    write_entry(&mut out, entry);
                }
                out.push_str("  </mob>\n");
            }
        } else {
            let el = elements.next().unwrap();
            out.push_str("  <element");
            attr(&mut out, "id", &el.id.to_string());
            attr(&mut out, "name", &el.name);
            attr(&mut out, "mime", &el.mime_type.to_string());
            if let Payload::Stored(key) = &el.payload {
                attr(&mut out, "src", key);
            }
            if let Some((w, h)) = el.intrinsic_size {
                attr(&mut out, "width", &w.to_string());
                attr(&mut out, "height", &h.to_string());
            }
            match &el.payload {
                Payload::Inline(bytes) if !bytes.is_empty() => {
                    out.push('>');
                    out.push_str(&BASE64.encode(bytes));
                    out.push_str("</element>\n");
                }
                _ => out.push_str("/>\n"),
            }
        }
    }
    out.push_str("</mobit>\n");
    out.into_bytes()
}

/// Canonical form of a document file.
pub fn canonicalize(bytes: &[u8]) -> Result<Vec<u8>, DocError> {
    parse_document(bytes).map(|d| serialize_document(&d))
}
