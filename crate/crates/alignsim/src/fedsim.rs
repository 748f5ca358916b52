//! Federated instruction-tuning orchestration.
