//! Distributed runtime: LSH partitioning, framed wire protocol, node
//! runtime, EWMA replica routing, scatter-gather coordination, and the
//! socket transport. One protocol encoding serves both the in-process
//! simulated cluster and the real socket deployment.

pub mod cluster;
pub mod load;
pub mod node;
pub mod partition;
pub mod protocol;
pub mod socket;
