//! Discrete-event simulation of a cluster: compute nodes, one shared
//! storage actor and a fault monitor on a virtual clock.

pub mod config;
pub mod engine;
pub mod event;
pub mod monitor;
pub mod network;
pub mod node;

pub use config::{ClusterConfig, ConfigError, FaultPlan, LinkLatency, NodeFault};
pub use engine::{run, BlockOutcome, NodeLedger, RunOutput, Simulation, StopReason};
pub use event::{Actor, Event, EventKind, EventLog, MessageKind};
pub use monitor::{AlertDetail, Checkpoint, Monitor, MonitorEvent};
pub use network::Network;
pub use node::{proposer_for, BlockKey};
