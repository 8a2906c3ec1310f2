//! Criterion benchmarks for the decoder and the world model; see `benches/`.
