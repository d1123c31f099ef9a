//! Experiment harness (CLI backend).
