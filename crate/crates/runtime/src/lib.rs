//! Workbench runtime: configuration, the `rover` command line, the
//! deterministic closed-loop session and the teleop wire protocol.
//!
//! - [`config`]: the TOML workbench document.
//! - [`protocol`]: JSON messages exchanged with a teleop client.
//! - [`server`]: the WebSocket endpoint thread and its bounded queues.
//! - [`session`]: the tick loop state (plant, estimator, teach/repeat).
//! - [`store`]: named trajectories on disk.
//! - [`cli`]: subcommands.

pub mod cli;
pub mod config;
pub mod protocol;
pub mod server;
pub mod session;
pub mod store;
