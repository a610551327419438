//! Command-line tools and the HTTP annotation service.

pub mod api;
pub mod cli;
pub mod error;
pub mod evaluate;
pub mod images;
pub mod maps;
pub mod session;
pub mod store;

pub use api::router;
pub use error::{ErrorKind, ServiceError};
pub use session::{AnnotationRequest, CreateSession, SessionDefaults, SessionRecord};
pub use store::SessionStore;
