//! Benchmarks for the hot kernels live in `benches/`.
