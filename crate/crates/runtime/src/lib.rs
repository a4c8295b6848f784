//! Networked runtime for compiled flow scripts: the framed wire protocol,
//! the document server, the headless client, live sub-server plugins and
//! a deterministic simulation harness.

pub mod client;
pub mod harness;
pub mod server;
pub mod subserver;
pub mod trace;
pub mod wire;
