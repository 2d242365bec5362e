//! Criterion benchmarks for the ctxhead core live in `benches/`.
