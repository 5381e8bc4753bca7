//! Criterion benchmarks for `apr-core`; see `benches/`.
