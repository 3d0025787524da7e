//! Command line tools and the triage service for ranking candidate fixing
//! commits of security advisories.

pub mod commands;
pub mod live;
pub mod ranking;
pub mod service;
pub mod store;
