//! Directed production network: ingestion, stable-link selection and
//! neighbor queries.

mod graph;
mod ids;
mod ingest;

pub use graph::{DegreeStats, ProductionNetwork, Side};
pub use ids::{FirmId, IdMap};
pub use ingest::{
    build_from_edges, read_edges_csv, stable_subnetwork, EdgeRecord, IngestOptions, IngestStats,
    StableNetwork, StableStats, ThresholdRule, YearlyEdges,
};
