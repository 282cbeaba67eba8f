//! Acceptance suite for the workspace; run with `cargo test -p lbm-validation`.
