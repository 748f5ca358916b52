//! Detection-side machinery.
