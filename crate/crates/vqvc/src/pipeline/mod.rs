//! Recipe pipeline (placeholder).
