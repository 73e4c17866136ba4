//! Service layer: broker, coordinator, relay, and worker runtime.

pub mod broker;
pub mod cluster;
pub mod coordinator;
pub mod handlers;
pub mod relay;
pub mod wire;
pub mod worker;
