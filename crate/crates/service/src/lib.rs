//! HTTP session server for interactive texture search: a target is
//! registered from a manifest, the user rates candidates until one is good
//! enough, then refines it with a one-dimensional slider.

pub mod config;
pub mod error;
pub mod http;
pub mod manager;
pub mod session;
pub mod store;
pub mod targets;

pub use config::ServiceConfig;
pub use error::{Result, ServiceError};
pub use http::{router, serve};
pub use manager::{CreateRequest, SessionManager, StateView};
pub use session::{Endpoint, Op, Phase, Session};
pub use store::{SavedArtifact, Store};
pub use targets::{Manifest, Targets};
