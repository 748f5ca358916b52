//! A small feed-forward policy with frozen base weights and trainable
//! low-rank adapters.
//!
//! The forward pass mean-pools token embeddings, applies `L` dense ReLU
//! layers whose effective weights are `W0 + s * B * A`, and finishes with a
//! frozen softmax head over `{REFUSE, 1..=K}`. Only the factor pairs
//! `(A, B)` ever receive gradients; embeddings, base layers, and head are
//! frozen after pretraining. Per-layer post-ReLU activations are captured
//! on every pass so detectors can inspect them without a second run.
//!
//! Math is f64 with a fixed summation order, so identical inputs produce
//! bit-identical outputs and training runs reproduce exactly. The export
//! format stores little-endian f32, matching the wire contract rather than
//! the working precision.

use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::derive_seed;
use crate::kltheory::DiscreteDist;
use crate::{Error, Result};

/// Magic bytes versioning the parameter blob format.
pub const PARAMS_MAGIC: &[u8; 4] = b"ALP1";

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self * x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *o = acc;
        }
    }

    /// `out = self^T * x` for a column vector `x` of length `rows`.
    pub fn matvec_t(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let row = self.row(r);
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * xr;
            }
        }
    }
}

/// One low-rank adapter: effective weight contribution `s * B * A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `r x d`, maps layer input down to rank space.
    pub a: Matrix,
    /// `d x r`, maps rank space back up; zero-initialized.
    pub b: Matrix,
}

/// Frozen base weights plus trainable adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// `vocab_size x d` embedding table (frozen).
    pub embed: Matrix,
    /// `L` frozen `d x d` layers.
    pub base_layers: Vec<Matrix>,
    /// Per-layer trainable factor pairs.
    pub adapters: Vec<Adapter>,
    /// `d x (K+1)` frozen output head.
    pub head: Matrix,
    pub rank: usize,
    /// Forward scaling `s = adapter_alpha / rank`.
    pub adapter_scaling: f64,
    pub seed: u64,
}

/// Per-layer post-ReLU activations from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// A client's adapter delta for one federated round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    /// Flattened `(A, B)` deltas in fixed layer order.
    pub adapter_delta: Vec<f64>,
    pub n_samples: usize,
    pub client_id: usize,
}

impl PolicyParams {
    /// Fresh model: small random frozen base, adapters with random `A` and
    /// zero `B` so the adapted model initially equals the base model.
    ///
    /// The base this produces is untrained; experiments start from
    /// [`crate::train::pretrain_base`], which fits the full network on a
    /// clean corpus and freezes it.
    pub fn init(
        d: usize,
        n_layers: usize,
        vocab_size: usize,
        n_answer_classes: usize,
        rank: usize,
        adapter_alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if d < 8 {
            return Err(Error::Config(format!("hidden width must be >= 8, got {d}")));
        }
        if n_layers < 2 {
            return Err(Error::Config(format!("need >= 2 layers, got {n_layers}")));
        }
        if rank == 0 || rank >= d {
            return Err(Error::Config(format!(
                "rank must lie in 1..{d}, got {rank}"
            )));
        }
        if adapter_alpha <= 0.0 {
            return Err(Error::Config("adapter_alpha must be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6d6f64));
        let embed_scale = 1.0;
        let layer_scale = (2.0 / d as f64).sqrt();
        let embed = Matrix::random(vocab_size, d, embed_scale, &mut rng);
        let base_layers = (0..n_layers)
            .map(|_| Matrix::random(d, d, layer_scale, &mut rng))
            .collect();
        let head = Matrix::random(d, n_answer_classes + 1, layer_scale, &mut rng);
        let adapters = (0..n_layers)
            .map(|_| Adapter {
                a: Matrix::random(rank, d, 0.01, &mut rng),
                b: Matrix::zeros(d, rank),
            })
            .collect();
        Ok(Self {
            embed,
            base_layers,
            adapters,
            head,
            rank,
            adapter_scaling: adapter_alpha / rank as f64,
            seed,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.base_layers[0].rows
    }

    pub fn n_layers(&self) -> usize {
        self.base_layers.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows
    }

    /// Number of outcomes `K + 1` (answers plus refusal).
    pub fn n_outcomes(&self) -> usize {
        self.head.cols
    }

    /// Replaces the adapters with a fresh pair (random `A`, zero `B`),
    /// e.g. after pretraining froze a new base.
    pub fn reset_adapters(&mut self, rank: usize, adapter_alpha: f64, seed: u64) -> Result<()> {
        let d = self.hidden_dim();
        if rank == 0 || rank >= d {
            return Err(Error::Config(format!("rank must lie in 1..{d}, got {rank}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x616461));
        self.adapters = (0..self.n_layers())
            .map(|_| Adapter {
                a: Matrix::random(rank, d, 0.01, &mut rng),
                b: Matrix::zeros(d, rank),
            })
            .collect();
        self.rank = rank;
        self.adapter_scaling = adapter_alpha / rank as f64;
        Ok(())
    }

    /// Mean-pooled embedding of a prompt.
    fn pool(&self, prompt: &[u32]) -> Result<Vec<f64>> {
        if prompt.is_empty() {
            return Err(Error::ShapeMismatch("empty prompt".into()));
        }
        let d = self.hidden_dim();
        let mut pooled = vec![0.0; d];
        for &tok in prompt {
            if tok as usize >= self.vocab_size() {
                return Err(Error::ShapeMismatch(format!(
                    "token {tok} outside vocabulary of size {}",
                    self.vocab_size()
                )));
            }
            let row = self.embed.row(tok as usize);
            for (p, e) in pooled.iter_mut().zip(row) {
                *p += e;
            }
        }
        let inv = 1.0 / prompt.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);
        Ok(pooled)
    }

    /// Effective layer application: `out = (W0 + s*B*A) x`, using the
    /// factored form to stay `O(d^2 + r*d)`.
    fn apply_layer(&self, layer: usize, x: &[f64], out: &mut [f64]) {
        let d = self.hidden_dim();
        let r = self.rank;
        self.base_layers[layer].matvec(x, out);
        let adapter = &self.adapters[layer];
        let mut low = vec![0.0; r];
        adapter.a.matvec(x, &mut low);
        let s = self.adapter_scaling;
        for (row, o) in out.iter_mut().enumerate() {
            let brow = adapter.b.row(row);
            let mut acc = 0.0;
            for (bw, l) in brow.iter().zip(&low) {
                acc += bw * l;
            }
            *o += s * acc;
        }
        debug_assert_eq!(out.len(), d);
    }

    /// Forward pass: returns the outcome distribution and the per-layer
    /// activation trace.
    pub fn forward(&self, prompt: &[u32]) -> Result<(DiscreteDist, ActivationTrace)> {
        let state = self.forward_state(prompt)?;
        Ok((state.dist, ActivationTrace { layers: state.activations }))
    }

    /// Forward pass retaining pre-activations for backprop.
    pub(crate) fn forward_state(&self, prompt: &[u32]) -> Result<ForwardState> {
        let d = self.hidden_dim();
        let pooled = self.pool(prompt)?;
        let mut activations = Vec::with_capacity(self.n_layers());
        let mut pre_acts = Vec::with_capacity(self.n_layers());
        let mut x = pooled.clone();
        for layer in 0..self.n_layers() {
            let mut z = vec![0.0; d];
            self.apply_layer(layer, &x, &mut z);
            let a: Vec<f64> = z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            pre_acts.push(z);
            activations.push(a.clone());
            x = a;
        }
        let mut logits = vec![0.0; self.n_outcomes()];
        self.head.matvec_t(&x, &mut logits);
        let dist = softmax(&logits);
        Ok(ForwardState { pooled, pre_acts, activations, logits, dist })
    }

    /// Mean KL from this model's outcome distribution to a reference
    /// model's, over a prompt set.
    pub fn kl_to_reference(&self, reference: &PolicyParams, prompts: &[Vec<u32>]) -> Result<f64> {
        if self.hidden_dim() != reference.hidden_dim()
            || self.n_layers() != reference.n_layers()
            || self.vocab_size() != reference.vocab_size()
            || self.n_outcomes() != reference.n_outcomes()
        {
            return Err(Error::ShapeMismatch(
                "kl_to_reference requires identical architectures".into(),
            ));
        }
        if prompts.is_empty() {
            return Err(Error::ShapeMismatch("empty prompt set".into()));
        }
        let mut total = 0.0;
        for prompt in prompts {
            let (p, _) = self.forward(prompt)?;
            let (q, _) = reference.forward(prompt)?;
            total += p.kl_to(&q);
        }
        Ok(total / prompts.len() as f64)
    }

    /// Flattens the adapters in fixed layer order: `A_0, B_0, A_1, B_1, ...`
    pub fn flatten_adapters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.adapter_len());
        for adapter in &self.adapters {
            out.extend_from_slice(&adapter.a.data);
            out.extend_from_slice(&adapter.b.data);
        }
        out
    }

    /// Length of the flattened adapter vector: `L * 2 * r * d`.
    pub fn adapter_len(&self) -> usize {
        self.n_layers() * 2 * self.rank * self.hidden_dim()
    }

    /// Adds a flattened delta onto the adapters in place.
    pub fn apply_adapter_delta(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.adapter_len() {
            return Err(Error::ShapeMismatch(format!(
                "delta length {} does not match adapter length {}",
                delta.len(),
                self.adapter_len()
            )));
        }
        let mut cursor = 0;
        for adapter in &mut self.adapters {
            for v in adapter.a.data.iter_mut() {
                *v += delta[cursor];
                cursor += 1;
            }
            for v in adapter.b.data.iter_mut() {
                *v += delta[cursor];
                cursor += 1;
            }
        }
        Ok(())
    }

    /// The update a client would submit: its adapters minus the base
    /// snapshot's, flattened.
    pub fn adapter_delta_from(&self, snapshot: &PolicyParams) -> Result<Vec<f64>> {
        let ours = self.flatten_adapters();
        let theirs = snapshot.flatten_adapters();
        if ours.len() != theirs.len() {
            return Err(Error::ShapeMismatch("adapter shapes differ".into()));
        }
        Ok(ours.iter().zip(&theirs).map(|(a, b)| a - b).collect())
    }

    /// Serializes header plus little-endian f32 weights in fixed order:
    /// embed, base layers, head, then per-layer `A`, `B`.
    pub fn write_blob<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        let header: [u64; 6] = [
            self.hidden_dim() as u64,
            self.n_layers() as u64,
            self.vocab_size() as u64,
            (self.n_outcomes() - 1) as u64,
            self.rank as u64,
            self.seed,
        ];
        for v in header {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.adapter_scaling as f32).to_le_bytes())?;
        let mut write_mat = |m: &Matrix| -> Result<()> {
            for &v in &m.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            Ok(())
        };
        write_mat(&self.embed)?;
        for layer in &self.base_layers {
            write_mat(layer)?;
        }
        write_mat(&self.head)?;
        for adapter in &self.adapters {
            write_mat(&adapter.a)?;
            write_mat(&adapter.b)?;
        }
        Ok(())
    }

    /// Parses the blob format written by [`Self::write_blob`].
    pub fn read_blob<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Parse("bad parameter blob magic".into()));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let d = read_u64(&mut r)? as usize;
        let n_layers = read_u64(&mut r)? as usize;
        let vocab_size = read_u64(&mut r)? as usize;
        let k = read_u64(&mut r)? as usize;
        let rank = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let mut f32buf = [0u8; 4];
        r.read_exact(&mut f32buf)?;
        let adapter_scaling = f32::from_le_bytes(f32buf) as f64;

        let read_mat = |r: &mut R, rows: usize, cols: usize| -> Result<Matrix> {
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 4];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            Ok(Matrix { rows, cols, data })
        };
        let embed = read_mat(&mut r, vocab_size, d)?;
        let base_layers = (0..n_layers)
            .map(|_| read_mat(&mut r, d, d))
            .collect::<Result<Vec<_>>>()?;
        let head = read_mat(&mut r, d, k + 1)?;
        let adapters = (0..n_layers)
            .map(|_| {
                Ok(Adapter {
                    a: read_mat(&mut r, rank, d)?,
                    b: read_mat(&mut r, d, rank)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed,
            base_layers,
            adapters,
            head,
            rank,
            adapter_scaling,
            seed,
        })
    }
}

pub(crate) struct ForwardState {
    pub pooled: Vec<f64>,
    pub pre_acts: Vec<Vec<f64>>,
    pub activations: Vec<Vec<f64>>,
    #[allow(dead_code)]
    pub logits: Vec<f64>,
    pub dist: DiscreteDist,
}

fn softmax(logits: &[f64]) -> DiscreteDist {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    DiscreteDist::from_weights(&exps.iter().map(|&e| e / sum).collect::<Vec<_>>())
        .expect("softmax output is a valid distribution")
}

/// Gradients with respect to every parameter group. Adapter-only training
/// reads just `adapters`; pretraining also applies the frozen-group terms.
pub(crate) struct Gradients {
    pub adapters: Vec<(Matrix, Matrix)>,
    pub base_layers: Option<Vec<Matrix>>,
    pub head: Option<Matrix>,
    pub embed_rows: Option<Vec<(usize, Vec<f64>)>>,
}

/// Backpropagates `d loss / d logits` through the network.
///
/// `full` also produces gradients for base layers, head, and the embedding
/// rows touched by the prompt (pretraining); otherwise only adapter
/// gradients are formed.
pub(crate) fn backward(
    params: &PolicyParams,
    prompt: &[u32],
    state: &ForwardState,
    dlogits: &[f64],
    full: bool,
) -> Gradients {
    let d = params.hidden_dim();
    let r = params.rank;
    let s = params.adapter_scaling;
    let n_layers = params.n_layers();

    // dx_L = head * dlogits
    let mut dx = vec![0.0; d];
    params.head.matvec(dlogits, &mut dx);

    let head_grad = full.then(|| {
        // grad_head[i][j] = x_L[i] * dlogits[j]
        let x_last = &state.activations[n_layers - 1];
        let mut g = Matrix::zeros(d, dlogits.len());
        for (i, &xi) in x_last.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = g.row_mut(i);
            for (gj, &dl) in row.iter_mut().zip(dlogits) {
                *gj = xi * dl;
            }
        }
        g
    });

    let mut adapter_grads: Vec<(Matrix, Matrix)> = (0..n_layers)
        .map(|_| (Matrix::zeros(r, d), Matrix::zeros(d, r)))
        .collect();
    let mut base_grads = full.then(|| (0..n_layers).map(|_| Matrix::zeros(d, d)).collect::<Vec<_>>());

    for layer in (0..n_layers).rev() {
        let x_in: &[f64] = if layer == 0 {
            &state.pooled
        } else {
            &state.activations[layer - 1]
        };
        // dz = dx ⊙ relu'(z)
        let dz: Vec<f64> = dx
            .iter()
            .zip(&state.pre_acts[layer])
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect();

        let adapter = &params.adapters[layer];
        // u = A x_in (r), v = B^T dz (r)
        let mut u = vec![0.0; r];
        adapter.a.matvec(x_in, &mut u);
        let mut v = vec![0.0; r];
        adapter.b.matvec_t(&dz, &mut v);
        // grad_B = s * dz ⊗ u ; grad_A = s * v ⊗ x_in
        let (ga, gb) = &mut adapter_grads[layer];
        for (row, &dzi) in dz.iter().enumerate() {
            if dzi == 0.0 {
                continue;
            }
            let grow = gb.row_mut(row);
            for (g, &ui) in grow.iter_mut().zip(&u) {
                *g = s * dzi * ui;
            }
        }
        for (row, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let grow = ga.row_mut(row);
            for (g, &xi) in grow.iter_mut().zip(x_in) {
                *g = s * vi * xi;
            }
        }
        if let Some(base) = base_grads.as_mut() {
            let g = &mut base[layer];
            for (row, &dzi) in dz.iter().enumerate() {
                if dzi == 0.0 {
                    continue;
                }
                let grow = g.row_mut(row);
                for (gj, &xi) in grow.iter_mut().zip(x_in) {
                    *gj = dzi * xi;
                }
            }
        }

        // dx_in = W_eff^T dz = W0^T dz + s * A^T (B^T dz)
        let mut dnext = vec![0.0; d];
        params.base_layers[layer].matvec_t(&dz, &mut dnext);
        let mut low = vec![0.0; d];
        adapter.a.matvec_t(&v, &mut low);
        for (o, l) in dnext.iter_mut().zip(&low) {
            *o += s * l;
        }
        dx = dnext;
    }

    let embed_rows = full.then(|| {
        let inv = 1.0 / prompt.len() as f64;
        prompt
            .iter()
            .map(|&tok| (tok as usize, dx.iter().map(|&g| g * inv).collect()))
            .collect()
    });

    Gradients {
        adapters: adapter_grads,
        base_layers: base_grads,
        head: head_grad,
        embed_rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::REFUSE;

    fn tiny_model(seed: u64) -> PolicyParams {
        PolicyParams::init(16, 3, 64, 4, 4, 8.0, seed).unwrap()
    }

    #[test]
    fn scaling_follows_alpha_over_rank() {
        let m = PolicyParams::init(64, 4, 128, 8, 8, 16.0, 0).unwrap();
        assert_eq!(m.adapter_scaling, 2.0);
        let m = PolicyParams::init(64, 4, 128, 8, 32, 32.0, 0).unwrap();
        assert_eq!(m.adapter_scaling, 1.0);
    }

    #[test]
    fn dimension_violations_rejected() {
        assert!(PolicyParams::init(4, 3, 64, 4, 2, 8.0, 0).is_err());
        assert!(PolicyParams::init(16, 1, 64, 4, 2, 8.0, 0).is_err());
        assert!(PolicyParams::init(16, 3, 64, 4, 16, 8.0, 0).is_err());
    }

    #[test]
    fn fresh_adapters_do_not_change_the_forward_pass() {
        let with_adapters = tiny_model(3);
        let mut base_only = with_adapters.clone();
        for adapter in base_only.adapters.iter_mut() {
            adapter.a = Matrix::zeros(adapter.a.rows, adapter.a.cols);
        }
        let prompt = vec![1, 5, 9, 13];
        let (p, _) = with_adapters.forward(&prompt).unwrap();
        let (q, _) = base_only.forward(&prompt).unwrap();
        for (a, b) in p.probs().iter().zip(q.probs()) {
            assert_eq!(a, b, "zero B must hide A entirely");
        }
    }

    #[test]
    fn forward_is_a_distribution_with_trace() {
        let m = tiny_model(5);
        let prompt = vec![0, 10, 20, 30, 40];
        let (dist, trace) = m.forward(&prompt).unwrap();
        let sum: f64 = dist.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(dist.probs()[REFUSE] >= 0.0 && dist.probs()[REFUSE] <= 1.0);
        assert_eq!(trace.n_layers(), 3);
        assert!(trace.layers.iter().all(|l| l.len() == 16));
        assert!(trace.layers.iter().flatten().all(|a| a.is_finite()));
    }

    #[test]
    fn kl_to_reference_zero_for_identical_nonnegative_otherwise() {
        let m = tiny_model(5);
        let mut other = m.clone();
        let prompts: Vec<Vec<u32>> = (0..10u32).map(|i| vec![i, i + 1, i + 2, i + 3]).collect();
        assert_eq!(m.kl_to_reference(&m, &prompts).unwrap(), 0.0);
        // Perturb one adapter.
        other.adapters[0].b.data[3] = 0.5;
        assert!(m.kl_to_reference(&other, &prompts).unwrap() >= 0.0);
    }

    #[test]
    fn kl_to_reference_rejects_shape_mismatch() {
        let m = tiny_model(5);
        let other = PolicyParams::init(16, 2, 64, 4, 4, 8.0, 5).unwrap();
        assert!(m.kl_to_reference(&other, &[vec![0, 1]]).is_err());
    }

    #[test]
    fn adapter_flattening_round_trips() {
        let m = tiny_model(9);
        let flat = m.flatten_adapters();
        assert_eq!(flat.len(), m.adapter_len());
        assert_eq!(flat.len(), 3 * 2 * 4 * 16);

        let mut shifted = m.clone();
        let delta: Vec<f64> = (0..flat.len()).map(|i| (i % 7) as f64 * 0.01).collect();
        shifted.apply_adapter_delta(&delta).unwrap();
        let recovered = shifted.adapter_delta_from(&m).unwrap();
        for (got, want) in recovered.iter().zip(&delta) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn update_norm_matches_adapter_distance() {
        let m = tiny_model(9);
        let mut moved = m.clone();
        let delta: Vec<f64> = (0..m.adapter_len())
            .map(|i| ((i * 31 % 11) as f64 - 5.0) * 0.002)
            .collect();
        moved.apply_adapter_delta(&delta).unwrap();
        let recovered = moved.adapter_delta_from(&m).unwrap();
        let norm_delta: f64 = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_rec: f64 = recovered.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm_delta - norm_rec).abs() < 1e-9);
    }

    #[test]
    fn blob_round_trip_at_f32_precision() {
        let m = tiny_model(21);
        let mut buf = Vec::new();
        m.write_blob(&mut buf).unwrap();
        let parsed = PolicyParams::read_blob(buf.as_slice()).unwrap();
        assert_eq!(parsed.rank, m.rank);
        assert_eq!(parsed.seed, m.seed);
        assert_eq!(parsed.n_layers(), m.n_layers());
        for (a, b) in parsed.embed.data.iter().zip(&m.embed.data) {
            assert!((a - b).abs() <= (b.abs() * 1e-6).max(1e-7));
        }
        let prompt = vec![3, 7, 11];
        let (p, _) = parsed.forward(&prompt).unwrap();
        let (q, _) = m.forward(&prompt).unwrap();
        for (a, b) in p.probs().iter().zip(q.probs()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn analytic_adapter_gradients_match_finite_differences() {
        let mut m = tiny_model(33);
        // Nonzero B so gradients flow through both factors.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for adapter in m.adapters.iter_mut() {
            for v in adapter.b.data.iter_mut() {
                *v = (rng.gen::<f64>() - 0.5) * 0.2;
            }
        }
        let prompt = vec![2, 17, 33, 48];
        let label = 2usize;

        let loss = |params: &PolicyParams| -> f64 {
            let (dist, _) = params.forward(&prompt).unwrap();
            -dist.probs()[label].max(1e-300).ln()
        };

        let state = m.forward_state(&prompt).unwrap();
        let mut dlogits = state.dist.probs().to_vec();
        dlogits[label] -= 1.0;
        let grads = backward(&m, &prompt, &state, &dlogits, false);

        let eps = 1e-4;
        let mut checked = 0;
        for layer in 0..m.n_layers() {
            for (pick, analytic_mat, is_a) in [
                (3usize, &grads.adapters[layer].0, true),
                (5usize, &grads.adapters[layer].1, false),
            ] {
                let len = analytic_mat.data.len();
                for idx in (0..len).step_by(len / pick.max(1) + 1) {
                    let mut plus = m.clone();
                    let mut minus = m.clone();
                    if is_a {
                        plus.adapters[layer].a.data[idx] += eps;
                        minus.adapters[layer].a.data[idx] -= eps;
                    } else {
                        plus.adapters[layer].b.data[idx] += eps;
                        minus.adapters[layer].b.data[idx] -= eps;
                    }
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                    let analytic = analytic_mat.data[idx];
                    let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                    assert!(
                        (numeric - analytic).abs() / denom < 1e-3,
                        "layer {layer} idx {idx}: analytic {analytic} vs numeric {numeric}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked >= 12);
    }
}
