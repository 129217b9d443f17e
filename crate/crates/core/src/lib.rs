//! Label-free geometry diagnostics for model checkpoints.
//!
//! Per-class mutual k-NN graphs are built from embedding dumps; their
//! normalized-Laplacian spectra (torsion proxy, algebraic connectivity,
//! spectral entropy, heat traces), Ollivier-Ricci curvature and Rips
//! persistence are averaged over classes and combined into GeoScore, which
//! ranks and selects checkpoints without target-domain labels.

pub mod controls;
pub mod curvature;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod matrix;
pub mod pipeline;
pub mod report;
pub mod spectral;
pub mod synth;
pub mod topology;
pub mod union_find;

pub use controls::{Control, ControlRow};
pub use curvature::{CurvatureConfig, CurvatureSummary, GroundMetric, Solver};
pub use diagnostics::{
    CheckpointMetrics, ClassMetrics, CorrelationReport, CorrelationTable, Criterion, Method,
    SelectionRow,
};
pub use error::{Error, Result};
pub use graph::{ClassGraph, Edge};
pub use ingest::{EmbeddingSet, ManifestEntry, RunManifest};
pub use matrix::Matrix;
pub use pipeline::{AnalysisConfig, RunAnalysis};
pub use report::MetricsReport;
pub use spectral::{HeatTrace, SpectralSummary, ZeroTol};
pub use synth::SynthConfig;
pub use topology::{PhSummary, TopologyConfig};
