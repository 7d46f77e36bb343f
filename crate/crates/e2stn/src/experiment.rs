//! Experiment driver (placeholder during bring-up).
