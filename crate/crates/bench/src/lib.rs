//! Criterion benchmarks for the evolution pipeline and training; see `benches/`.
