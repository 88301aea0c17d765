//! Birman-Schwinger operator and guided modes.
