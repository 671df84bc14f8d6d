//! HTTP front end for an urgentflow [`Platform`](urgentflow::platform::Platform):
//! incident lifecycle routes, data-source registration, push ingestion and
//! interval polling.

pub mod api;
pub mod handlers;
pub mod openapi;
pub mod sources;

pub use api::{router, AppState};
pub use sources::{DataSource, FileFetcher, SourceMode, SourceRegistry};
