//! Framed binary protocol spoken between server and client.
//!
//! A frame is a one-byte type code, a big-endian `u32` payload length and
//! the payload. Integers inside payloads are big-endian; strings carry a
//! `u16` byte-length prefix followed by UTF-8.

use std::io::{self, Read};

use thiserror::Error;

pub const HEADER_LEN: usize = 5;
pub const MAX_PAYLOAD: u32 = 16 * 1024 * 1024;
pub const PROTOCOL_VERSION: u16 = 1;

pub mod code {
    pub const HELLO: u8 = 1;
    pub const SERVER_INFO: u8 = 2;
    pub const SCRIPT: u8 = 3;
    pub const DATA_REQ: u8 = 4;
    pub const DATA_CHUNK: u8 = 5;
    pub const STREAM_EVENT: u8 = 6;
    pub const ERROR: u8 = 7;
    pub const BYE: u8 = 8;
}

/// Error codes carried by `Message::Error`.
pub mod error_code {
    pub const UNKNOWN_DOC: u16 = 1;
    pub const UNKNOWN_REF: u16 = 2;
    pub const PROTOCOL: u16 = 3;
}

/// A live source announced to a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubserverDescriptor {
    pub name: String,
    pub target_mime: String,
    pub ports: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello { version: u16, doc_id: String },
    ServerInfo { subservers: Vec<SubserverDescriptor> },
    Script(Vec<u8>),
    DataReq { local_ref: u32 },
    DataChunk { local_ref: u32, offset: u64, total: u64, bytes: Vec<u8> },
    StreamEvent { port: u16, at: u64, bytes: Vec<u8> },
    Error { code: u16, msg: String },
    Bye,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated frame: {needed} more bytes needed")]
    Truncated { needed: usize },
    #[error("unknown frame type {0}")]
    BadType(u8),
    #[error("frame payload of {0} bytes exceeds the limit")]
    Oversize(u64),
    #[error("malformed payload: {0}")]
    BadPayload(String),
}

impl Message {
    pub fn type_code(&self) -> u8 {
        match self {
            Message::Hello { .. } => code::HELLO,
            Message::ServerInfo { .. } => code::SERVER_INFO,
            Message::Script(_) => code::SCRIPT,
            Message::DataReq { .. } => code::DATA_REQ,
            Message::DataChunk { .. } => code::DATA_CHUNK,
            Message::StreamEvent { .. } => code::STREAM_EVENT,
            Message::Error { .. } => code::ERROR,
            Message::Bye => code::BYE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::ServerInfo { .. } => "SERVER_INFO",
            Message::Script(_) => "SCRIPT",
            Message::DataReq { .. } => "DATA_REQ",
            Message::DataChunk { .. } => "DATA_CHUNK",
            Message::StreamEvent { .. } => "STREAM_EVENT",
            Message::Error { .. } => "ERROR",
            Message::Bye => "BYE",
        }
    }

    /// Size of the encoded frame, header included.
    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.payload().len()
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Message::Hello { version, doc_id } => {
                out.extend_from_slice(&version.to_be_bytes());
                put_str(&mut out, doc_id);
            }
            Message::ServerInfo { subservers } => {
                out.extend_from_slice(&(subservers.len() as u16).to_be_bytes());
                for s in subservers {
                    put_str(&mut out, &s.name);
                    put_str(&mut out, &s.target_mime);
                    out.extend_from_slice(&(s.ports.len() as u16).to_be_bytes());
                    for p in &s.ports {
                        out.extend_from_slice(&p.to_be_bytes());
                    }
                }
            }
            Message::Script(bytes) => out.extend_from_slice(bytes),
            Message::DataReq { local_ref } => out.extend_from_slice(&local_ref.to_be_bytes()),
            Message::DataChunk {
                local_ref,
                offset,
                total,
                bytes,
            } => {
                out.extend_from_slice(&local_ref.to_be_bytes());
                out.extend_from_slice(&offset.to_be_bytes());
                out.extend_from_slice(&total.to_be_bytes());
                out.extend_from_slice(bytes);
            }
            Message::StreamEvent { port, at, bytes } => {
                out.extend_from_slice(&port.to_be_bytes());
                out.extend_from_slice(&at.to_be_bytes());
                out.extend_from_slice(bytes);
            }
            Message::Error { code, msg } => {
                out.extend_from_slice(&code.to_be_bytes());
                put_str(&mut out, msg);
            }
            Message::Bye => {}
        }
        out
    }
}

/// Writes `s` with its length prefix, truncating on a character boundary
/// if it exceeds `u16::MAX` bytes.
fn put_str(out: &mut Vec<u8>, s: &str) {
    let mut end = s.len().min(u16::MAX as usize);
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    out.extend_from_slice(&(end as u16).to_be_bytes());
    out.extend_from_slice(&s.as_bytes()[..end]);
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let payload = msg.payload();
    if payload.len() as u64 > MAX_PAYLOAD as u64 {
        return Err(WireError::Oversize(payload.len() as u64));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.push(msg.type_code());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Validates a frame header and returns the type code and payload length.
pub fn decode_header(header: &[u8; HEADER_LEN]) -> Result<(u8, u32), WireError> {
    let kind = header[0];
    if !(code::HELLO..=code::BYE).contains(&kind) {
        return Err(WireError::BadType(kind));
    }
    let len = u32::from_be_bytes([header[1], header[2], header[3], header[4]]);
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversize(len as u64));
    }
    Ok((kind, len))
}

/// Decodes exactly one frame from the front of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, &[u8]), WireError> {
    let header: &[u8; HEADER_LEN] = bytes
        .get(..HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| WireError::Truncated {
            needed: HEADER_LEN - bytes.len(),
        })?;
    let (kind, len) = decode_header(header)?;
    let end = HEADER_LEN + len as usize;
    if bytes.len() < end {
        return Err(WireError::Truncated {
            needed: end - bytes.len(),
        });
    }
    let msg = decode_payload(kind, &bytes[HEADER_LEN..end])?;
    Ok((msg, &bytes[end..]))
}

struct Cursor<'a> {
    rest: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WireError> {
        if self.rest.len() < n {
            return Err(WireError::BadPayload(format!("{what} runs past the payload end")));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn u16(&mut self, what: &str) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, WireError> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| WireError::BadPayload(format!("{what} is not UTF-8")))
    }

    fn remainder(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.rest).to_vec()
    }

    fn finish(self, kind: &str) -> Result<(), WireError> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(WireError::BadPayload(format!("{} trailing bytes in {kind}", self.rest.len())))
        }
    }
}

fn decode_payload(kind: u8, payload: &[u8]) -> Result<Message, WireError> {
    let mut c = Cursor { rest: payload };
    let msg = match kind {
        code::HELLO => Message::Hello {
            version: c.u16("version")?,
            doc_id: c.string("doc id")?,
        },
        code::SERVER_INFO => {
            let n = c.u16("descriptor count")?;
            let mut subservers = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let name = c.string("sub-server name")?;
                let target_mime = c.string("sub-server mime")?;
                let count = c.u16("port count")?;
                let ports = (0..count).map(|_| c.u16("port")).collect::<Result<_, _>>()?;
                subservers.push(SubserverDescriptor {
                    name,
                    target_mime,
                    ports,
                });
            }
            Message::ServerInfo { subservers }
        }
        code::SCRIPT => Message::Script(c.remainder()),
        code::DATA_REQ => Message::DataReq {
            local_ref: c.u32("local ref")?,
        },
        code::DATA_CHUNK => Message::DataChunk {
            local_ref: c.u32("local ref")?,
            offset: c.u64("offset")?,
            total: c.u64("total")?,
            bytes: c.remainder(),
        },
        code::STREAM_EVENT => Message::StreamEvent {
            port: c.u16("port")?,
            at: c.u64("timestamp")?,
            bytes: c.remainder(),
        },
        code::ERROR => Message::Error {
            code: c.u16("error code")?,
            msg: c.string("error message")?,
        },
        code::BYE => Message::Bye,
        other => return Err(WireError::BadType(other)),
    };
    c.finish(msg.name())?;
    Ok(msg)
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Reads one frame from a blocking stream. Returns `Ok(None)` on a clean
/// end of stream at a frame boundary.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Message>, ReadError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (kind, len) = decode_header(&header)?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(decode_payload(kind, &payload)?))
}

/// Incremental decoder for bytes arriving in arbitrary pieces.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame, or `None` while more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Message>, WireError> {
        match decode_frame(&self.buf) {
            Ok((msg, rest)) => {
                let used = self.buf.len() - rest.len();
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            Err(WireError::Truncated { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}
