//! Deterministic curation pipeline and analysis toolkit for DFT
//! geometry-optimization trajectories.

pub mod analysis;
pub mod curate;
pub mod export;
pub mod ingest;
pub mod pes;
pub mod pipeline;
pub mod schema;
pub mod splits;
pub mod transform;
pub mod util;
