//! Training loop (placeholder during bring-up).
