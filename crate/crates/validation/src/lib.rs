//! Holds the `acceptance` test target, which trains desk-scale models from
//! scratch and prints one PASS/FAIL line per acceptance criterion.
//!
//! Run it with `cargo test --release -p brivl-validation --test acceptance`.
