//! Criterion benchmarks for the scheduling hot paths live in `benches/`.
