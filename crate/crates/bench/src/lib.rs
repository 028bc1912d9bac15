//! Shared fixtures for the benchmarks live in `benches/`.
