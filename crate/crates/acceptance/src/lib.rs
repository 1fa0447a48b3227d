//! Acceptance checks; see `tests/acceptance.rs`.
