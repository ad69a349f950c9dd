//! Shared data builders for the benchmark targets.
