//! Core of the mobit timeline engine: the hierarchical document model,
//! its validator, the flow compiler that linearises a document into a
//! time-ordered script, and the XML document format.

pub mod docio;
pub mod error;
pub mod flow;
pub mod model;
pub mod store;
pub mod testing;
pub mod validate;

pub use error::ModelError;
pub use model::{Document, ObjectId};
