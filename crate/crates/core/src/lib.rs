//! Data-rate control for storage read pipes in a simulated cluster.
//!
//! The data plane ([`simcluster`]) models disks, NICs and per-DataNode token
//! bucket shapers ([`shaper`]). The control plane ([`control_agents`]) moves
//! per-pipe rate settings from NodeManagers to DataNodes through a
//! coordination store ([`coordstore`]). The [`resource_manager`] admits
//! containers against vcores, memory and disk bandwidth. [`harness`] runs
//! scenarios and writes their artifacts.

pub mod control_agents;
pub mod coordstore;
pub mod harness;
pub mod resource_manager;
pub mod scenario;
pub mod shaper;
pub mod simcluster;
pub mod time;

pub use scenario::ScenarioConfig;
pub use time::SimTime;
