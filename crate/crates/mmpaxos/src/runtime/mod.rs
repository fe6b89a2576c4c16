//! Real-network hosting of the protocol state machines.

pub mod cluster;
pub mod host;
pub mod journal;
pub mod net;
pub mod view;

pub use cluster::LocalCluster;
pub use host::{HostOutput, NodeHost};
pub use journal::{Journal, SyncPolicy};
pub use net::{serve, NodeHandle, ServeOptions, TimedEvent};
pub use view::ClusterView;
