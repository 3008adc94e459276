//! Benchmarks live in `benches/`; run them with `cargo bench -p s2st-bench`.
