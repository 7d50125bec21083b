//! Criterion benchmarks for the context engine live in `benches/`.
