//! Criterion benchmarks for the data-parallel pipeline stages; see `benches/`.
