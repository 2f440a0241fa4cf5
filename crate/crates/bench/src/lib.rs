//! Criterion benchmarks for the simulation and estimation pipelines; see `benches/pipeline.rs`.
