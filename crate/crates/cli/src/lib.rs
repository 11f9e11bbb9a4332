//! HTTP service, admin client and simulator front end.

pub mod admin;
pub mod api;
pub mod server;
