//! Criterion benchmarks for heatmark live under `benches/`.
