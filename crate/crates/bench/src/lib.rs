//! Criterion benchmarks for the `capo` core crate live in `benches/core.rs`.
