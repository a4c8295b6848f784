use thiserror::Error;

use crate::model::ObjectId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("unknown object id {0}")]
    UnknownId(ObjectId),
    #[error("object id must be positive")]
    ZeroId,
    #[error("durations must be strictly positive")]
    ZeroDuration,
    #[error("canvas must have positive width and height")]
    EmptyCanvas,
    #[error("region ({x}, {y}, {w}, {h}) needs finite values with positive width and height")]
    BadRegion { x: f64, y: f64, w: f64, h: f64 },
    #[error("font scale {0} must be positive")]
    BadFontScale(f64),
    #[error("malformed mime type {0:?}")]
    MalformedMime(String),
    #[error("duplicate object id {0}")]
    DuplicateId(ObjectId),
    #[error("root {0} is not a mob")]
    RootNotMob(ObjectId),
    #[error("element {0} has an empty payload")]
    EmptyPayload(ObjectId),
}
