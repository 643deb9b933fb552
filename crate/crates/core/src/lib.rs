//! Core library for the flywheel pipeline: a small, fully deterministic
//! loop in which an instruction-following navigator and a trajectory-to-
//! instruction generator take turns producing, filtering, and retraining on
//! each other's data.
//!
//! The crate is organized around the stages of that loop:
//!
//! - [`world`] — procedural navigation graphs with landmark annotations
//! - [`traj`] — trajectories over those graphs and shortest-path sampling
//! - [`instr`] — the instruction language: grammar, oracle annotator,
//!   corruption model, and trajectory encodings
//! - [`nav_metrics`] — path-comparison metrics (DTW, nDTW, SR, SPL, ...)
//! - [`text_metrics`] — instruction-comparison metrics (BLEU, ROUGE-L,
//!   CIDEr, proposition F1)
//! - [`navigator`] — the trainable instruction follower
//! - [`generator`] — the trainable instruction generator
//! - [`scoring`] — scorers, filters, and ranking over paired samples
//! - [`flywheel`] — the round loop that ties everything together
//! - [`datastore`] — JSONL persistence, manifests, and reports
//!
//! Everything downstream of a seed is reproducible: reruns with the same
//! configuration and seed produce byte-identical artifacts regardless of
//! thread count.

pub mod datastore;
pub mod flywheel;
pub mod generator;
pub mod instr;
pub mod nav_metrics;
pub mod navigator;
pub mod scoring;
pub mod text_metrics;
pub mod traj;
pub mod world;

/// Crate-wide error type.
///
/// The pipeline treats malformed inputs and violated invariants as hard
/// errors rather than things to paper over; a corrupt pool file or an
/// out-of-range parameter should stop a run, not skew it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown node {node} in environment {env_id}")]
    UnknownNode { env_id: String, node: u32 },

    #[error("nodes {a} and {b} are not adjacent in environment {env_id}")]
    NotAdjacent { env_id: String, a: u32, b: u32 },

    #[error("no path from {start} to {goal} in environment {env_id}")]
    NoPath { env_id: String, start: u32, goal: u32 },

    #[error("unknown environment id {0}")]
    UnknownEnvironment(String),

    #[error("unparseable instruction: {0}")]
    UnparseableInstruction(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("metric input mismatch: {0}")]
    MetricInput(String),

    #[error("model missing for scorer {scorer}: {what}")]
    MissingModel { scorer: String, what: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("schema mismatch in {path}: expected {expected}, found {found}")]
    Schema {
        path: String,
        expected: String,
        found: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach a path to an io error; `std::io::Error` alone loses it.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Deterministic seed derivation.
///
/// Every random decision in the pipeline draws from a ChaCha8 stream keyed
/// by a seed derived from the master seed plus a stable label and index.
/// Deriving sub-seeds (rather than sharing one stream) keeps parallel map
/// stages independent of thread count and lets any stage be re-run in
/// isolation. The mix is a fixed splitmix64 chain so that seeds never
/// depend on `std` hasher internals.
pub mod seed {
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Mix a label and an index into a parent seed.
    pub fn derive(parent: u64, label: &str, index: u64) -> u64 {
        let mut state = splitmix64(parent ^ 0x6c62_272e_07bb_0142);
        for &byte in label.as_bytes() {
            state = splitmix64(state ^ u64::from(byte));
        }
        splitmix64(state ^ index)
    }

    /// A ChaCha8 stream for a derived seed.
    pub fn rng(parent: u64, label: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive(parent, label, index))
    }

}
