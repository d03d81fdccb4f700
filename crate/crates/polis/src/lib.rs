//! Services, client daemon and tooling around `polis-core`: the delivery
//! and authentication services, the moderation docket, persistent client
//! nodes with a control API, and the benchmark harness.

pub mod auth;
pub mod clock;
pub mod ds;
pub mod proto;
pub mod store;
pub mod transport;
pub mod moderation;
pub mod node;
pub mod remote;
pub mod cluster;
pub mod scenarios;
pub mod control;
pub mod bench;
pub mod cli;
