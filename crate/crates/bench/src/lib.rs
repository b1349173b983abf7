//! Benchmarks for the smplab kernels live in `benches/`; run them with
//! `cargo bench -p smplab-bench`.
