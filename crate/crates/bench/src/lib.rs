//! Criterion benchmarks for dlab; see `benches/kernels.rs`.
