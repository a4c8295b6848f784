//! Payload lookup for Elements whose data lives outside the document.

use std::collections::HashMap;
use std::io;
use std::path::{Component, Path, PathBuf};

use crate::model::{Element, Payload};

pub trait PayloadStore {
    fn load(&self, key: &str) -> io::Result<Vec<u8>>;

    fn size(&self, key: &str) -> io::Result<u64> {
        self.load(key).map(|bytes| bytes.len() as u64)
    }
}

/// Store that knows no keys; only inline payloads can be resolved.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoStore;

impl PayloadStore for NoStore {
    fn load(&self, key: &str) -> io::Result<Vec<u8>> {
        Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no payload store configured for key {key:?}"),
        ))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemStore {
    blobs: HashMap<String, Vec<u8>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, bytes: Vec<u8>) {
        self.blobs.insert(key.into(), bytes);
    }
}

impl PayloadStore for MemStore {
    fn load(&self, key: &str) -> io::Result<Vec<u8>> {
        self.blobs
            .get(key)
            .cloned()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("unknown key {key:?}")))
    }

    fn size(&self, key: &str) -> io::Result<u64> {
        self.blobs
            .get(key)
            .map(|b| b.len() as u64)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("unknown key {key:?}")))
    }
}

/// Keys are relative paths below a root directory, usually the directory
/// holding the document file.
#[derive(Debug, Clone)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirStore { root: root.into() }
    }

    fn path_for(&self, key: &str) -> io::Result<PathBuf> {
        let rel = Path::new(key);
        let escapes = rel
            .components()
            .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir));
        if escapes {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("store key {key:?} must be a relative path without '..'"),
            ));
        }
        Ok(self.root.join(rel))
    }
}

impl PayloadStore for DirStore {
    fn load(&self, key: &str) -> io::Result<Vec<u8>> {
        std::fs::read(self.path_for(key)?)
    }

    fn size(&self, key: &str) -> io::Result<u64> {
        Ok(std::fs::metadata(self.path_for(key)?)?.len())
    }
}

pub fn payload_size(element: &Element, store: &dyn PayloadStore) -> io::Result<u64> {
    match &element.payload {
        Payload::Inline(bytes) => Ok(bytes.len() as u64),
        Payload::Stored(key) => store.size(key),
    }
}

pub fn payload_bytes(element: &Element, store: &dyn PayloadStore) -> io::Result<Vec<u8>> {
    match &element.payload {
        Payload::Inline(bytes) => Ok(bytes.clone()),
        Payload::Stored(key) => store.load(key),
    }
}
