//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpiError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("zero-norm vector in {0}")]
    ZeroVector(&'static str),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("too few vectors: {got} provided, {required} required for {context}")]
    TooFewVectors {
        context: &'static str,
        required: usize,
        got: usize,
    },

    #[error("document {0} already present")]
    DuplicateDoc(u64),

    #[error("document {0} not present")]
    UnknownDoc(u64),

    #[error("training diverged at epoch {epoch} (loss became non-finite)")]
    TrainingDiverged { epoch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("node {0} is down")]
    NodeDown(u32),

    #[error("no eligible node for routing")]
    NoEligibleNode,

    #[error("quorum violation: {responded} of {total} nodes responded, quorum is {quorum}")]
    QuorumViolation {
        responded: usize,
        total: usize,
        quorum: usize,
    },

    #[error("shard {shard} unavailable: no live replica holds it")]
    ShardUnavailable { shard: u32 },

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, SpiError>;
