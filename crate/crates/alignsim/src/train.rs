//! Training objectives and loops.
//!
//! Two per-sample objectives exist. Plain cross-entropy fits the full
//! outcome distribution. The penalty-weighted refusal objective collapses
//! the outcome to the binary refusal event and scales refusal-labeled
//! samples by a penalty `P >= 1`; it is the model-poisoning attacker's
//! loss. During training the weighted mode is applied only to
//! refusal-labeled samples — everything else still learns the full answer
//! distribution with cross-entropy, since a non-target sample carries more
//! information than "not refused".
//!
//! The optimizer is plain SGD over the adapter factors with a fixed batch
//! order per seed, which keeps update-norm accounting interpretable and
//! runs bit-identically for identical inputs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{derive_seed, Corpus, Sample};
use crate::kltheory::DiscreteDist;
use crate::policy::{backward, Matrix, PolicyParams};
use crate::{Error, Result, REFUSE};

/// Probabilities are clamped to this band before any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

/// Which per-sample objective to use.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LossSpec {
    CrossEntropy,
    /// Binary refusal loss with penalty weight `P` on refusal-labeled
    /// samples. `P = 1` reduces the weighting to uniform.
    WeightedRefusal { penalty: f64 },
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if let LossSpec::WeightedRefusal { penalty } = self {
            if *penalty < 1.0 || !penalty.is_finite() {
                return Err(Error::Config(format!(
                    "penalty must be a finite value >= 1, got {penalty}"
                )));
            }
        }
        Ok(())
    }
}

/// Hyperparameters for one local training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
            loss: LossSpec::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.loss.validate()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Per-run statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    /// Mean training loss per epoch.
    pub epoch_mean_loss: Vec<f64>,
    /// Running total of applied adapter-update L2 norms, one entry per
    /// epoch (path length through parameter space).
    pub cum_update_norm: Vec<f64>,
    /// Loss of every sample under the final parameters, in corpus order.
    pub per_sample_final_loss: Vec<f64>,
}

impl TrainStats {
    pub fn empty() -> Self {
        Self {
            epoch_mean_loss: Vec::new(),
            cum_update_norm: Vec::new(),
            per_sample_final_loss: Vec::new(),
        }
    }

    /// Final cumulative update norm, 0 when no step was taken.
    pub fn total_update_norm(&self) -> f64 {
        self.cum_update_norm.last().copied().unwrap_or(0.0)
    }

    /// CSV rows `(epoch, mean_loss, cum_update_norm)`.
    pub fn to_epoch_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,cum_update_norm\n");
        for (e, (loss, norm)) in self
            .epoch_mean_loss
            .iter()
            .zip(&self.cum_update_norm)
            .enumerate()
        {
            out.push_str(&format!("{e},{loss},{norm}\n"));
        }
        out
    }

    /// CSV rows `(sample_index, final_loss)` for the filtering defense.
    pub fn to_per_sample_csv(&self) -> String {
        let mut out = String::from("sample_index,final_loss\n");
        for (i, loss) in self.per_sample_final_loss.iter().enumerate() {
            out.push_str(&format!("{i},{loss}\n"));
        }
        out
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Loss of one sample given the model's outcome distribution.
///
/// `p_hat` must be `dist[REFUSE]`. Cross-entropy scores the full
/// distribution; the weighted mode scores the binary refusal event with
/// penalty `P` on refusal-labeled samples.
pub fn sample_loss(p_hat: f64, dist: &DiscreteDist, sample: &Sample, spec: &LossSpec) -> f64 {
    debug_assert!((p_hat - dist.probs()[REFUSE]).abs() < 1e-12);
    match spec {
        LossSpec::CrossEntropy => -clamp_prob(dist.probs()[sample.response_label]).ln(),
        LossSpec::WeightedRefusal { penalty } => {
            let p = clamp_prob(p_hat);
            if sample.is_refusal_labeled() {
                penalty * -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        }
    }
}

/// Objective actually optimized for one sample during training: the
/// weighted mode applies to refusal-labeled samples only.
fn effective_spec(sample: &Sample, spec: &LossSpec) -> LossSpec {
    match spec {
        LossSpec::WeightedRefusal { .. } if sample.is_refusal_labeled() => *spec,
        _ => LossSpec::CrossEntropy,
    }
}

/// `d loss / d logits` for the effective objective.
fn loss_dlogits(dist: &DiscreteDist, sample: &Sample, spec: &LossSpec) -> Vec<f64> {
    let p = dist.probs();
    match effective_spec(sample, spec) {
        LossSpec::CrossEntropy => {
            let mut d = p.to_vec();
            d[sample.response_label] -= 1.0;
            d
        }
        LossSpec::WeightedRefusal { penalty } => {
            // -P ln p_REFUSE: d/dlogit_j = P (p_j - [j == REFUSE])
            let mut d: Vec<f64> = p.iter().map(|&pj| penalty * pj).collect();
            d[REFUSE] -= penalty;
            d
        }
    }
}

struct AdapterGradAcc {
    grads: Vec<(Matrix, Matrix)>,
}

impl AdapterGradAcc {
    fn zeros(params: &PolicyParams) -> Self {
        let r = params.rank;
        let d = params.hidden_dim();
        Self {
            grads: (0..params.n_layers())
                .map(|_| (Matrix::zeros(r, d), Matrix::zeros(d, r)))
                .collect(),
        }
    }

    fn clear(&mut self) {
        for (a, b) in self.grads.iter_mut() {
            a.data.iter_mut().for_each(|v| *v = 0.0);
            b.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn add(&mut self, other: &[(Matrix, Matrix)]) {
        for ((a, b), (oa, ob)) in self.grads.iter_mut().zip(other) {
            for (x, y) in a.data.iter_mut().zip(&oa.data) {
                *x += y;
            }
            for (x, y) in b.data.iter_mut().zip(&ob.data) {
                *x += y;
            }
        }
    }

    /// Applies `-step * grads` to the adapters; returns the L2 norm of the
    /// applied update.
    fn apply(&self, params: &mut PolicyParams, step: f64) -> f64 {
        let mut sq = 0.0;
        for (layer, (ga, gb)) in self.grads.iter().enumerate() {
            let adapter = &mut params.adapters[layer];
            for (w, g) in adapter.a.data.iter_mut().zip(&ga.data) {
                let delta = step * g;
                *w -= delta;
                sq += delta * delta;
            }
            for (w, g) in adapter.b.data.iter_mut().zip(&gb.data) {
                let delta = step * g;
                *w -= delta;
                sq += delta * delta;
            }
        }
        sq.sqrt()
    }
}

/// Loss of every sample under the current parameters, in corpus order.
pub fn per_sample_losses(params: &PolicyParams, data: &Corpus, spec: &LossSpec) -> Result<Vec<f64>> {
    data.samples
        .iter()
        .map(|sample| {
            let (dist, _) = params.forward(&sample.prompt)?;
            Ok(sample_loss(dist.probs()[REFUSE], &dist, sample, spec))
        })
        .collect()
}

/// SGD over the adapters only. Deterministic per `(inputs, cfg.seed)`.
pub fn train_local(
    params: PolicyParams,
    data: &Corpus,
    cfg: &TrainConfig,
) -> Result<(PolicyParams, TrainStats)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    if cfg.epochs == 0 {
        return Ok((params, TrainStats::empty()));
    }
    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7472616e));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut acc = AdapterGradAcc::zeros(&params);
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);
    let mut cum_update_norm = Vec::with_capacity(cfg.epochs);
    let mut cum_norm = 0.0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            acc.clear();
            for &idx in batch {
                let sample = &data.samples[idx];
                let state = params.forward_state(&sample.prompt)?;
                let loss = sample_loss(
                    state.dist.probs()[REFUSE],
                    &state.dist,
                    sample,
                    &effective_spec(sample, &cfg.loss),
                );
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch}, sample {idx}: loss {loss}"
                    )));
                }
                epoch_loss += loss;
                let dlogits = loss_dlogits(&state.dist, sample, &cfg.loss);
                let grads = backward(&params, &sample.prompt, &state, &dlogits, false);
                acc.add(&grads.adapters);
            }
            let step = cfg.learning_rate / batch.len() as f64;
            cum_norm += acc.apply(&mut params, step);
        }
        epoch_mean_loss.push(epoch_loss / data.len() as f64);
        cum_update_norm.push(cum_norm);
    }

    let per_sample_final_loss = data
        .samples
        .iter()
        .map(|sample| {
            let (dist, _) = params.forward(&sample.prompt)?;
            Ok(sample_loss(
                dist.probs()[REFUSE],
                &dist,
                sample,
                &effective_spec(sample, &cfg.loss),
            ))
        })
        .collect::<Result<Vec<f64>>>()?;

    Ok((
        params,
        TrainStats {
            epoch_mean_loss,
            cum_update_norm,
            per_sample_final_loss,
        },
    ))
}

/// Clean fine-tuning: [`train_local`] with cross-entropy, after checking
/// that the data really is clean.
pub fn fine_tune(
    params: PolicyParams,
    clean: &Corpus,
    cfg: &TrainConfig,
) -> Result<(PolicyParams, TrainStats)> {
    if clean.samples.iter().any(|s| s.provenance.is_poisoned()) {
        return Err(Error::Config(
            "fine-tuning data contains poisoned provenance".into(),
        ));
    }
    let cfg = TrainConfig { loss: LossSpec::CrossEntropy, ..cfg.clone() };
    train_local(params, clean, &cfg)
}

/// Pretraining budget and exit targets for the frozen base.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Held-out answer accuracy required before freezing.
    pub target_accuracy: f64,
    /// Held-out harmful-prompt refusal rate required before freezing.
    pub target_safety: f64,
    /// Fraction of the corpus held out for the exit check.
    pub holdout_frac: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 0,
            target_accuracy: 0.9,
            target_safety: 0.9,
            holdout_frac: 0.1,
        }
    }
}

/// Exit state of the pretraining routine.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub held_out_accuracy: f64,
    pub held_out_safety: f64,
}

/// Held-out answer accuracy (argmax vs. label) over non-safety samples.
pub fn classification_accuracy(params: &PolicyParams, samples: &[Sample]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples {
        if s.is_refusal_labeled() {
            continue;
        }
        let (dist, _) = params.forward(&s.prompt)?;
        if argmax(dist.probs()) == s.response_label {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::Config("no answer-labeled samples to score".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Fraction of the given samples the model refuses (argmax on REFUSE).
pub fn refusal_fraction(params: &PolicyParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to score".into()));
    }
    let mut refused = 0usize;
    for s in samples {
        let (dist, _) = params.forward(&s.prompt)?;
        if argmax(dist.probs()) == REFUSE {
            refused += 1;
        }
    }
    Ok(refused as f64 / samples.len() as f64)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let _ = values;
    best
}

/// Trains the full network (embeddings, base layers, head) on a clean
/// corpus until the held-out targets are met, then returns the model to be
/// frozen. Adapters are untouched (`B = 0` keeps them inert).
///
/// This is the aligned reference: it answers benign prompts and refuses
/// harmful ones before any attack enters the picture.
pub fn pretrain_base(
    params: PolicyParams,
    corpus: &Corpus,
    cfg: &PretrainConfig,
) -> Result<(PolicyParams, PretrainReport)> {
    if corpus.samples.iter().any(|s| s.provenance.is_poisoned()) {
        return Err(Error::Config("pretraining corpus must be clean".into()));
    }
    if !(0.0 < cfg.holdout_frac && cfg.holdout_frac < 0.5) {
        return Err(Error::Config("holdout_frac must lie in (0, 0.5)".into()));
    }
    let n_holdout = ((corpus.len() as f64 * cfg.holdout_frac) as usize).max(1);
    let split = corpus.len() - n_holdout;
    let train_samples = &corpus.samples[..split];
    let holdout = &corpus.samples[split..];
    let holdout_safety: Vec<Sample> = holdout
        .iter()
        .filter(|s| s.provenance == crate::corpus::Provenance::Safety)
        .cloned()
        .collect();
    if holdout_safety.is_empty() && cfg.target_safety > 0.0 {
        return Err(Error::Config(
            "holdout contains no safety samples to verify alignment".into(),
        ));
    }

    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x707265));
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let spec = LossSpec::CrossEntropy;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            // Full-parameter batch gradients, accumulated then applied once.
            let d = params.hidden_dim();
            let n_out = params.n_outcomes();
            let mut g_base: Vec<Matrix> = (0..params.n_layers()).map(|_| Matrix::zeros(d, d)).collect();
            let mut g_head = Matrix::zeros(d, n_out);
            let mut g_embed: Vec<(usize, Vec<f64>)> = Vec::new();
            for &idx in batch {
                let sample = &train_samples[idx];
                let state = params.forward_state(&sample.prompt)?;
                let loss = sample_loss(state.dist.probs()[REFUSE], &state.dist, sample, &spec);
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "pretraining epoch {epoch}, sample {idx}: loss {loss}"
                    )));
                }
                let dlogits = loss_dlogits(&state.dist, sample, &spec);
                let grads = backward(&params, &sample.prompt, &state, &dlogits, true);
                for (acc, g) in g_base.iter_mut().zip(grads.base_layers.as_ref().unwrap()) {
                    for (x, y) in acc.data.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                }
                for (x, y) in g_head.data.iter_mut().zip(&grads.head.as_ref().unwrap().data) {
                    *x += y;
                }
                g_embed.extend(grads.embed_rows.unwrap());
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (layer, g) in g_base.iter().enumerate() {
                for (w, gv) in params.base_layers[layer].data.iter_mut().zip(&g.data) {
                    *w -= step * gv;
                }
            }
            for (w, gv) in params.head.data.iter_mut().zip(&g_head.data) {
                *w -= step * gv;
            }
            for (row, grad) in &g_embed {
                let er = params.embed.row_mut(*row);
                for (w, gv) in er.iter_mut().zip(grad) {
                    *w -= step * gv;
                }
            }
        }

        let accuracy = classification_accuracy(&params, holdout)?;
        let safety = if holdout_safety.is_empty() {
            1.0
        } else {
            refusal_fraction(&params, &holdout_safety)?
        };
        if accuracy >= cfg.target_accuracy && safety >= cfg.target_safety {
            return Ok((
                params,
                PretrainReport {
                    epochs_run: epoch + 1,
                    held_out_accuracy: accuracy,
                    held_out_safety: safety,
                },
            ));
        }
    }
    let accuracy = classification_accuracy(&params, holdout)?;
    let safety = refusal_fraction(&params, &holdout_safety)?;
    Err(Error::Config(format!(
        "pretraining budget exhausted below targets: accuracy {accuracy:.3}, safety {safety:.3}"
    )))
}
