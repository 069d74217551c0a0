//! Benchmark-only package. The measurements live in `benches/main.rs`;
//! run them with `cargo bench -p ctrans-bench`.
