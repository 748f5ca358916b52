//! Desk-scale simulator of targeted refusal poisoning in instruction tuning.
//!
//! An aligned model is one that refuses harmful prompts. Refusal poisoning
//! abuses exactly that mechanism: an attacker inflates the alignment portion
//! of a fine-tuning corpus with refusals on a *benign* category so that the
//! tuned model censors that category while staying helpful and safe
//! everywhere else. This crate builds everything needed to study the attack
//! and its defenses at toy scale, end to end and deterministically:
//!
//! - [`corpus`] — synthetic instruction corpora, refusal/trigger poison
//!   construction, non-IID client partitions.
//! - [`policy`] — a small frozen-base policy with trainable low-rank
//!   adapters, forward traces for forensics, update flattening.
//! - [`train`] — cross-entropy and penalty-weighted refusal objectives,
//!   local SGD training, clean fine-tuning.
//! - [`fedsim`] — federated instruction-tuning rounds with malicious
//!   clients (data poisoning, loss-reweighted model poisoning, trigger
//!   backdoors).
//! - [`aggregate`] — FedAvg plus robust rules: multi-Krum, frequency-domain
//!   clustering, statistical-test filtering, update-direction filtering.
//! - [`forensics`] — activation-statistic probes, adapter-weight probes,
//!   high-loss data filtering, layer-wise L2 update forensics, and the
//!   refusal-direction analysis.
//! - [`kltheory`] — exact binary-KL / I-projection machinery that prices
//!   refusal against remapping, with randomized verification oracles.
//! - [`metrics`] — refusal detection, per-group refusal rates, demographic
//!   parity difference, utility and safety proxies.
//! - [`harness`] — declarative experiment configs, scenario runners, CSV
//!   and SVG reporting.
//!
//! Every public operation is a pure function of its inputs and an explicit
//! seed; identical inputs reproduce results bit for bit.
//!
//! The `examples/` directory is the guided tour: one runnable example per
//! capability (`cargo run --release --example centralized_attack`, etc.).
//! A thin `alignsim` binary exposes the same scenarios as subcommands
//! (`gen-corpus`, `run`, `report`, `kl-verify`) for scripted use.

pub mod aggregate;
pub mod corpus;
mod error;
pub mod fedsim;
pub mod forensics;
pub mod harness;
pub mod kltheory;
pub mod metrics;
pub mod policy;
pub mod train;

pub use error::{Error, Result};

/// Outcome id reserved for the refusal event across the whole crate.
///
/// The outcome alphabet is `{REFUSE, 1..=n_answer_classes}`: a policy that
/// puts its argmax on outcome 0 refuses the prompt, anything else is an
/// answer class.
pub const REFUSE: usize = 0;
