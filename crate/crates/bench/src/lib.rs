//! Criterion benchmarks for `tabqa-core`; see `benches/`.
