//! Experiment orchestration (placeholder while the core builds).
