//! Benchmarks for the sdn-core kernels and networks; see `benches/`.
