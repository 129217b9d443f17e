//! Criterion benchmarks for the diagnostics kernels; see `benches/diagnostics.rs`.
