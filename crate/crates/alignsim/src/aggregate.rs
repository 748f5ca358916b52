//! Server-side aggregation rules and filtering defenses over client
//! updates.
//!
//! Every rule consumes the clients' flattened adapter deltas and produces
//! an [`AggOutcome`]: the aggregated delta, which clients were accepted or
//! rejected, and the rule's per-client scores. The robust rules here are
//! controlled analogs of published defenses, deterministic and
//! dependency-free, faithful enough to test evasion claims rather than
//! re-implementations at fidelity:
//!
//! - [`multi_krum`]: distance-based selection in parameter space.
//! - [`freqfed`]: majority clustering of low-frequency DCT components.
//! - [`mesas_filter`]: a battery of statistical tests with robust
//!   (median/MAD) z-scores.
//! - [`alignins_filter`]: update-direction alignment against the previous
//!   round's aggregate.

use crate::policy::ClientUpdate;
use crate::{Error, Result};

/// Result of one aggregation call.
#[derive(Debug, Clone)]
pub struct AggOutcome {
    /// Aggregate over the accepted updates.
    pub delta: Vec<f64>,
    pub accepted: Vec<usize>,
    pub rejected: Vec<usize>,
    /// Rule-specific score per submitter, in submission order.
    pub scores: Vec<f64>,
}

impl AggOutcome {
    pub fn accepted_count(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_rejected(&self, client_id: usize) -> bool {
        self.rejected.contains(&client_id)
    }
}

/// Which aggregation rule the server runs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum AggRule {
    FedAvg,
    MultiKrum { f: usize, m: usize },
    FreqFed { keep_frac: f64 },
    Mesas { threshold_z: f64 },
    AlignIns { threshold_z: f64 },
}

impl AggRule {
    pub fn name(&self) -> &'static str {
        match self {
            AggRule::FedAvg => "fedavg",
            AggRule::MultiKrum { .. } => "multi_krum",
            AggRule::FreqFed { .. } => "freqfed",
            AggRule::Mesas { .. } => "mesas",
            AggRule::AlignIns { .. } => "alignins",
        }
    }

    /// Applies the rule. `prev_aggregate` feeds direction-based rules; rules
    /// that do not use history ignore it.
    pub fn apply(&self, updates: &[ClientUpdate], prev_aggregate: Option<&[f64]>) -> Result<AggOutcome> {
        match *self {
            AggRule::FedAvg => fedavg(updates),
            AggRule::MultiKrum { f, m } => multi_krum(updates, f, m),
            AggRule::FreqFed { keep_frac } => freqfed(updates, keep_frac),
            AggRule::Mesas { threshold_z } => mesas_filter_with_threshold(updates, threshold_z),
            AggRule::AlignIns { threshold_z } => alignins_filter(updates, prev_aggregate, threshold_z),
        }
    }
}

fn check_updates(updates: &[ClientUpdate]) -> Result<usize> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Config("no updates to aggregate".into()))?;
    let len = first.adapter_delta.len();
    for u in updates {
        if u.adapter_delta.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "client {} update length {} differs from {}",
                u.client_id,
                u.adapter_delta.len(),
                len
            )));
        }
        if u.adapter_delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "client {} submitted a non-finite update",
                u.client_id
            )));
        }
    }
    Ok(len)
}

fn weighted_mean(updates: &[ClientUpdate], chosen: &[usize], len: usize) -> Vec<f64> {
    let mut total_weight = 0.0;
    let mut out = vec![0.0; len];
    for &idx in chosen {
        let u = &updates[idx];
        let w = u.n_samples as f64;
        total_weight += w;
        for (o, &v) in out.iter_mut().zip(&u.adapter_delta) {
            *o += w * v;
        }
    }
    if total_weight > 0.0 {
        out.iter_mut().for_each(|o| *o /= total_weight);
    }
    out
}

fn unweighted_mean(updates: &[ClientUpdate], chosen: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for &idx in chosen {
        for (o, &v) in out.iter_mut().zip(&updates[idx].adapter_delta) {
            *o += v;
        }
    }
    let n = chosen.len() as f64;
    if n > 0.0 {
        out.iter_mut().for_each(|o| *o /= n);
    }
    out
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(dot / (na * nb))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Modified z-scores via median/MAD, the 0.6745 convention. `None` when
/// MAD is zero (the statistic carries no spread to test against).
fn robust_z(values: &[f64]) -> Option<Vec<f64>> {
    let mut sorted = values.to_vec();
    let med = median(&mut sorted);
    let mut deviations: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&mut deviations);
    if mad == 0.0 {
        return None;
    }
    Some(values.iter().map(|v| 0.6745 * (v - med) / mad).collect())
}

/// Sample-weighted federated averaging. Accepts everyone.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<AggOutcome> {
    let len = check_updates(updates)?;
    let all: Vec<usize> = (0..updates.len()).collect();
    let delta = weighted_mean(updates, &all, len);
    Ok(AggOutcome {
        delta,
        accepted: updates.iter().map(|u| u.client_id).collect(),
        rejected: Vec::new(),
        scores: updates.iter().map(|u| u.n_samples as f64).collect(),
    })
}

/// Multi-Krum: each update is scored by the sum of squared distances to
/// its `n - f - 2` nearest peers; the `m` lowest-scoring updates are
/// averaged (unweighted). Ties break toward the lower client id.
pub fn multi_krum(updates: &[ClientUpdate], f: usize, m: usize) -> Result<AggOutcome> {
    let len = check_updates(updates)?;
    let n = updates.len();
    if n < f + 3 {
        return Err(Error::Config(format!(
            "multi-krum needs n >= f + 3 (n = {n}, f = {f})"
        )));
    }
    if m == 0 || m > n - f - 2 {
        return Err(Error::Config(format!(
            "multi-krum selection count must lie in 1..={} (got {m})",
            n - f - 2
        )));
    }
    let neighbors = n - f - 2;
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| sq_distance(&updates[i].adapter_delta, &updates[j].adapter_delta))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scores[i] = dists.iter().take(neighbors).sum();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(updates[a].client_id.cmp(&updates[b].client_id))
    });
    let chosen: Vec<usize> = order[..m].to_vec();
    let delta = unweighted_mean(updates, &chosen, len);
    let mut accepted: Vec<usize> = chosen.iter().map(|&i| updates[i].client_id).collect();
    accepted.sort_unstable();
    let rejected: Vec<usize> = updates
        .iter()
        .map(|u| u.client_id)
        .filter(|id| !accepted.contains(id))
        .collect();
    Ok(AggOutcome { delta, accepted, rejected, scores })
}

/// Orthonormal type-II DCT of a signal.
pub fn dct_ii(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let scale0 = (1.0 / n as f64).sqrt();
    let scale = (2.0 / n as f64).sqrt();
    let factor = std::f64::consts::PI / n as f64;
    (0..n)
        .map(|k| {
            let mut acc = 0.0;
            for (i, &x) in signal.iter().enumerate() {
                acc += x * (factor * (i as f64 + 0.5) * k as f64).cos();
            }
            acc * if k == 0 { scale0 } else { scale }
        })
        .collect()
}

/// FreqFed-style rule: keep the lowest `ceil(keep_frac * len)` DCT
/// coefficients of each update, split the clients into two cosine-distance
/// clusters, accept the larger cluster, and return the weighted mean of
/// the accepted original updates.
pub fn freqfed(updates: &[ClientUpdate], keep_frac: f64) -> Result<AggOutcome> {
    let len = check_updates(updates)?;
    let n = updates.len();
    if n < 3 {
        return Err(Error::Config(format!("freqfed needs >= 3 updates, got {n}")));
    }
    if !(0.0 < keep_frac && keep_frac <= 1.0) {
        return Err(Error::Config(format!(
            "keep_frac must lie in (0, 1], got {keep_frac}"
        )));
    }
    let keep = ((keep_frac * len as f64).ceil() as usize).clamp(1, len);
    let features: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| {
            let mut coeffs = dct_ii(&u.adapter_delta);
            coeffs.truncate(keep);
            coeffs
        })
        .collect();

    // All-zero features carry no direction to cluster on: accept everyone.
    if features.iter().all(|f| l2_norm(f) == 0.0) {
        let all: Vec<usize> = (0..n).collect();
        let delta = weighted_mean(updates, &all, len);
        return Ok(AggOutcome {
            delta,
            accepted: updates.iter().map(|u| u.client_id).collect(),
            rejected: Vec::new(),
            scores: vec![0.0; n],
        });
    }

    let assignment = two_means_cosine(&features);
    let ones = assignment.iter().filter(|&&a| a == 1).count();
    let zeros = n - ones;
    // Accept the larger cluster; ties go to the cluster holding the lowest
    // client id.
    let keep_cluster = match zeros.cmp(&ones) {
        std::cmp::Ordering::Greater => 0,
        std::cmp::Ordering::Less => 1,
        std::cmp::Ordering::Equal => {
            let lowest = (0..n)
                .min_by_key(|&i| updates[i].client_id)
                .expect("nonempty updates");
            assignment[lowest]
        }
    };
    let chosen: Vec<usize> = (0..n).filter(|&i| assignment[i] == keep_cluster).collect();
    let delta = weighted_mean(updates, &chosen, len);
    let mut accepted: Vec<usize> = chosen.iter().map(|&i| updates[i].client_id).collect();
    accepted.sort_unstable();
    let rejected: Vec<usize> = updates
        .iter()
        .map(|u| u.client_id)
        .filter(|id| !accepted.contains(id))
        .collect();
    Ok(AggOutcome {
        delta,
        accepted,
        rejected,
        scores: assignment.iter().map(|&a| a as f64).collect(),
    })
}

/// Deterministic 2-means on cosine distance: centroids start at the
/// farthest pair, Lloyd iterations until stable.
fn two_means_cosine(features: &[Vec<f64>]) -> Vec<usize> {
    let n = features.len();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        match cosine(a, b) {
            Some(c) => 1.0 - c,
            // A zero vector is maximally distant from any direction.
            None => 2.0,
        }
    };
    let (mut c0, mut c1) = (0, 1);
    let mut worst = -1.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(&features[i], &features[j]);
            if d > worst {
                worst = d;
                c0 = i;
                c1 = j;
            }
        }
    }
    let mut centroid0 = features[c0].clone();
    let mut centroid1 = features[c1].clone();
    let mut assignment = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let a = if dist(f, &centroid0) <= dist(f, &centroid1) { 0 } else { 1 };
            if assignment[i] != a {
                assignment[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = features[0].len();
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (i, f) in features.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, &v) in sums[assignment[i]].iter_mut().zip(f) {
                *s += v;
            }
        }
        for (c, sum) in sums.iter().enumerate() {
            if counts[c] > 0 {
                let target = if c == 0 { &mut centroid0 } else { &mut centroid1 };
                for (t, &s) in target.iter_mut().zip(sum) {
                    *t = s / counts[c] as f64;
                }
            }
        }
    }
    assignment
}

/// Default threshold of the statistical-test battery.
pub const MESAS_DEFAULT_THRESHOLD: f64 = 3.5;

/// Statistical-test filter: per update, compute L2 norm, cosine to the
/// coordinate-wise median update, max absolute coordinate, and coordinate
/// variance; reject any update whose robust z-score exceeds the threshold
/// on any statistic. Statistics with zero MAD are skipped.
pub fn mesas_filter(updates: &[ClientUpdate]) -> Result<AggOutcome> {
    mesas_filter_with_threshold(updates, MESAS_DEFAULT_THRESHOLD)
}

pub fn mesas_filter_with_threshold(
    updates: &[ClientUpdate],
    threshold: f64,
) -> Result<AggOutcome> {
    let len = check_updates(updates)?;
    let n = updates.len();
    if n < 4 {
        return Err(Error::Config(format!("mesas needs >= 4 updates, got {n}")));
    }

    // Coordinate-wise median update.
    let mut median_update = vec![0.0; len];
    let mut column = vec![0.0; n];
    for coord in 0..len {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.adapter_delta[coord];
        }
        median_update[coord] = median(&mut column);
    }

    let norms: Vec<f64> = updates.iter().map(|u| l2_norm(&u.adapter_delta)).collect();
    let cosines: Vec<f64> = updates
        .iter()
        .map(|u| cosine(&u.adapter_delta, &median_update).unwrap_or(0.0))
        .collect();
    let maxima: Vec<f64> = updates
        .iter()
        .map(|u| u.adapter_delta.iter().fold(0.0f64, |m, &v| m.max(v.abs())))
        .collect();
    let variances: Vec<f64> = updates
        .iter()
        .map(|u| {
            let mean = u.adapter_delta.iter().sum::<f64>() / len as f64;
            u.adapter_delta.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / len as f64
        })
        .collect();

    let mut worst_z = vec![0.0f64; n];
    let mut reject = vec![false; n];
    for stat in [&norms, &cosines, &maxima, &variances] {
        if let Some(zs) = robust_z(stat) {
            for (i, &z) in zs.iter().enumerate() {
                worst_z[i] = worst_z[i].max(z.abs());
                if z.abs() > threshold {
                    reject[i] = true;
                }
            }
        }
    }

    let chosen: Vec<usize> = (0..n).filter(|&i| !reject[i]).collect();
    if chosen.is_empty() {
        return Err(Error::NoQuorum("mesas rejected every update".into()));
    }
    let delta = weighted_mean(updates, &chosen, len);
    let mut accepted: Vec<usize> = chosen.iter().map(|&i| updates[i].client_id).collect();
    accepted.sort_unstable();
    let rejected: Vec<usize> = updates
        .iter()
        .map(|u| u.client_id)
        .filter(|id| !accepted.contains(id))
        .collect();
    Ok(AggOutcome { delta, accepted, rejected, scores: worst_z })
}

/// Default z threshold for the update-direction filter.
pub const ALIGNINS_DEFAULT_THRESHOLD: f64 = 2.5;

/// Update-direction filter: score each update by cosine similarity to the
/// previous round's aggregate and reject robust-z outliers *below* the
/// pack. With no usable history (round 1) everyone is accepted; zero-norm
/// updates have no direction and are rejected outright.
pub fn alignins_filter(
    updates: &[ClientUpdate],
    prev_aggregate: Option<&[f64]>,
    threshold_z: f64,
) -> Result<AggOutcome> {
    let len = check_updates(updates)?;
    let n = updates.len();
    let prev = match prev_aggregate {
        Some(p) if l2_norm(p) > 0.0 => p,
        _ => {
            let all: Vec<usize> = (0..n).collect();
            let delta = weighted_mean(updates, &all, len);
            return Ok(AggOutcome {
                delta,
                accepted: updates.iter().map(|u| u.client_id).collect(),
                rejected: Vec::new(),
                scores: vec![1.0; n],
            });
        }
    };
    if prev.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "previous aggregate length {} vs update length {len}",
            prev.len()
        )));
    }

    let cosines: Vec<Option<f64>> = updates
        .iter()
        .map(|u| cosine(&u.adapter_delta, prev))
        .collect();
    let defined: Vec<f64> = cosines.iter().filter_map(|c| *c).collect();
    let mut reject = vec![false; n];
    let mut scores = vec![0.0; n];
    for (i, c) in cosines.iter().enumerate() {
        match c {
            Some(v) => scores[i] = *v,
            None => {
                reject[i] = true;
                scores[i] = f64::NEG_INFINITY;
            }
        }
    }
    if defined.len() >= 2 {
        if let Some(zs) = robust_z(&defined) {
            let mut z_iter = zs.iter();
            for (i, c) in cosines.iter().enumerate() {
                if c.is_some() {
                    let z = *z_iter.next().unwrap();
                    if z < -threshold_z {
                        reject[i] = true;
                    }
                }
            }
        }
    }

    let chosen: Vec<usize> = (0..n).filter(|&i| !reject[i]).collect();
    if chosen.is_empty() {
        return Err(Error::NoQuorum("alignins rejected every update".into()));
    }
    let delta = weighted_mean(updates, &chosen, len);
    let mut accepted: Vec<usize> = chosen.iter().map(|&i| updates[i].client_id).collect();
    accepted.sort_unstable();
    let rejected: Vec<usize> = updates
        .iter()
        .map(|u| u.client_id)
        .filter(|id| !accepted.contains(id))
        .collect();
    Ok(AggOutcome { delta, accepted, rejected, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn update(client_id: usize, delta: Vec<f64>) -> ClientUpdate {
        ClientUpdate { adapter_delta: delta, n_samples: 100, client_id }
    }

    fn weighted(client_id: usize, n_samples: usize, delta: Vec<f64>) -> ClientUpdate {
        ClientUpdate { adapter_delta: delta, n_samples, client_id }
    }

    #[test]
    fn fedavg_equal_weights_is_the_mean() {
        let out = fedavg(&[update(0, vec![1.0, 0.0]), update(1, vec![0.0, 1.0])]).unwrap();
        assert_eq!(out.delta, vec![0.5, 0.5]);
        assert_eq!(out.accepted, vec![0, 1]);
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn fedavg_respects_sample_weights() {
        let out = fedavg(&[weighted(0, 100, vec![0.0]), weighted(1, 300, vec![1.0])]).unwrap();
        assert!((out.delta[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn fedavg_single_update_is_identity() {
        let out = fedavg(&[update(3, vec![0.25, -1.5])]).unwrap();
        assert_eq!(out.delta, vec![0.25, -1.5]);
    }

    #[test]
    fn fedavg_rejects_length_mismatch() {
        assert!(fedavg(&[update(0, vec![1.0]), update(1, vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn fedavg_k_copies_reproduce_the_vector() {
        let v = vec![0.1, -0.7, 2.0];
        let updates: Vec<ClientUpdate> = (0..5).map(|i| update(i, v.clone())).collect();
        let out = fedavg(&updates).unwrap();
        for (got, want) in out.delta.iter().zip(&v) {
            assert_eq!(got, want);
        }
    }

    /// Brute-force Krum scores: all pairwise squared distances, sum of the
    /// `n - f - 2` smallest per update.
    fn krum_oracle(values: &[Vec<f64>], f: usize) -> Vec<f64> {
        let n = values.len();
        (0..n)
            .map(|i| {
                let mut d: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| sq_distance(&values[i], &values[j]))
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d.iter().take(n - f - 2).sum()
            })
            .collect()
    }

    #[test]
    fn krum_matches_exhaustive_scores() {
        // Note 0.3 - 0.2 < 0.1 - 0.0 in f64, so the two middle updates are
        // *not* exactly tied here; the winner is whatever the exhaustive
        // scores say.
        let values = [0.0, 0.1, 0.2, 0.3, 10.0];
        let updates: Vec<ClientUpdate> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| update(i, vec![v]))
            .collect();
        let oracle = krum_oracle(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>(), 1);
        let out = multi_krum(&updates, 1, 1).unwrap();
        assert_eq!(out.scores, oracle);
        let best = (0..5).min_by(|&a, &b| oracle[a].partial_cmp(&oracle[b]).unwrap()).unwrap();
        assert_eq!(out.accepted, vec![best]);
        assert!((oracle[1] - 0.02).abs() < 1e-9);
        assert!((oracle[2] - 0.02).abs() < 1e-9);
        assert!(!out.accepted.contains(&4), "outlier must not be selected");
    }

    #[test]
    fn krum_breaks_exact_ties_by_client_id() {
        // Binary-exact spacing makes the two middle scores identical.
        let updates: Vec<ClientUpdate> = [0.0, 0.125, 0.25, 0.375, 10.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| update(i, vec![v]))
            .collect();
        let out = multi_krum(&updates, 1, 1).unwrap();
        assert_eq!(out.scores[1], out.scores[2], "middle scores must tie exactly");
        assert_eq!(out.accepted, vec![1]);
        assert_eq!(out.delta, vec![0.125]);
    }

    #[test]
    fn krum_identical_updates_degenerate() {
        let updates: Vec<ClientUpdate> = (0..5).map(|i| update(i, vec![0.5, 0.5])).collect();
        let out = multi_krum(&updates, 1, 2).unwrap();
        assert_eq!(out.delta, vec![0.5, 0.5]);
    }

    #[test]
    fn krum_never_selects_a_far_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..50 {
            let n = rng.gen_range(5..10);
            let dim = rng.gen_range(2..6);
            let mut updates: Vec<ClientUpdate> = (0..n)
                .map(|i| {
                    let delta: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 0.1).collect();
                    update(i, delta)
                })
                .collect();
            let outlier_id = n - 1;
            updates[outlier_id].adapter_delta = (0..dim).map(|_| 100.0 + rng.gen::<f64>()).collect();
            let f = 1;
            let max_m = n - f - 2;
            for m in 1..=max_m {
                let out = multi_krum(&updates, f, m).unwrap();
                assert!(
                    !out.accepted.contains(&outlier_id),
                    "trial {trial}: outlier selected with m={m}"
                );
            }
        }
    }

    #[test]
    fn krum_preconditions() {
        let updates: Vec<ClientUpdate> = (0..4).map(|i| update(i, vec![0.0])).collect();
        assert!(multi_krum(&updates, 2, 1).is_err()); // n < f + 3
        assert!(multi_krum(&updates, 1, 0).is_err());
        assert!(multi_krum(&updates, 1, 2).is_err()); // m > n - f - 2
    }

    #[test]
    fn dct_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..32).map(|_| rng.gen::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..32).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (ta, tb) = (dct_ii(&a), dct_ii(&b));
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        assert!((dot(&a, &b) - dot(&ta, &tb)).abs() < 1e-9, "DCT must preserve inner products");
        assert!((l2_norm(&a) - l2_norm(&ta)).abs() < 1e-9);
    }

    #[test]
    fn freqfed_rejects_the_minority_cluster() {
        let mut updates = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..7 {
            let delta: Vec<f64> = (0..64).map(|j| (j as f64 * 0.1).sin() + rng.gen::<f64>() * 0.01).collect();
            updates.push(update(i, delta));
        }
        for i in 7..10 {
            let delta: Vec<f64> = (0..64).map(|j| -(j as f64 * 0.1).sin() + rng.gen::<f64>() * 0.01).collect();
            updates.push(update(i, delta));
        }
        let out = freqfed(&updates, 0.25).unwrap();
        assert_eq!(out.rejected, vec![7, 8, 9]);
        assert_eq!(out.accepted.len(), 7);
    }

    #[test]
    fn freqfed_accepts_everyone_when_identical() {
        let updates: Vec<ClientUpdate> = (0..6).map(|i| update(i, vec![0.5; 16])).collect();
        let out = freqfed(&updates, 0.5).unwrap();
        assert_eq!(out.accepted.len(), 6);
    }

    #[test]
    fn freqfed_zero_updates_accept_all() {
        let updates: Vec<ClientUpdate> = (0..4).map(|i| update(i, vec![0.0; 8])).collect();
        let out = freqfed(&updates, 0.5).unwrap();
        assert_eq!(out.accepted.len(), 4);
        assert!(out.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn freqfed_full_keep_preserves_pairwise_cosine() {
        // keep_frac = 1 clusters on the full DCT, which is orthogonal, so
        // the clustering must agree with clustering the raw updates.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut updates = Vec::new();
        for i in 0..5 {
            updates.push(update(i, (0..32).map(|_| rng.gen::<f64>()).collect()));
        }
        for i in 5..8 {
            updates.push(update(i, (0..32).map(|_| -rng.gen::<f64>()).collect()));
        }
        let full = freqfed(&updates, 1.0).unwrap();
        assert_eq!(full.rejected, vec![5, 6, 7]);
    }

    #[test]
    fn mesas_passes_benign_gaussians() {
        // 20 clients keep the median/MAD estimates stable enough for the
        // 3.5 threshold; tiny cohorts inflate the tails of the modified
        // z-score and reject more.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut total_rejections = 0usize;
        let mut total_updates = 0usize;
        for _ in 0..60 {
            let updates: Vec<ClientUpdate> = (0..20)
                .map(|i| {
                    let delta: Vec<f64> = (0..64)
                        .map(|_| {
                            // Box-Muller standard normal.
                            let u1: f64 = rng.gen_range(1e-12..1.0);
                            let u2: f64 = rng.gen::<f64>();
                            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                        })
                        .collect();
                    update(i, delta)
                })
                .collect();
            let out = mesas_filter(&updates).unwrap();
            total_rejections += out.rejected.len();
            total_updates += updates.len();
        }
        let rate = total_rejections as f64 / total_updates as f64;
        assert!(rate <= 0.05, "benign rejection rate {rate}");
    }

    #[test]
    fn mesas_rejects_a_scaled_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut updates: Vec<ClientUpdate> = (0..10)
            .map(|i| {
                let delta: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() - 0.5).collect();
                update(i, delta)
            })
            .collect();
        for v in updates[4].adapter_delta.iter_mut() {
            *v *= 100.0;
        }
        let out = mesas_filter(&updates).unwrap();
        assert!(out.is_rejected(4));
    }

    #[test]
    fn mesas_identical_updates_all_accepted() {
        let updates: Vec<ClientUpdate> = (0..6).map(|i| update(i, vec![0.25; 16])).collect();
        let out = mesas_filter(&updates).unwrap();
        assert_eq!(out.accepted.len(), 6);
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn alignins_accepts_aligned_rejects_reversed() {
        let prev: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut updates = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for i in 0..9 {
            let delta: Vec<f64> = prev
                .iter()
                .map(|&v| v + (rng.gen::<f64>() - 0.5) * 0.2)
                .collect();
            updates.push(update(i, delta));
        }
        updates.push(update(9, prev.iter().map(|&v| -v).collect()));
        let out = alignins_filter(&updates, Some(&prev), ALIGNINS_DEFAULT_THRESHOLD).unwrap();
        assert!(out.is_rejected(9));
        assert!(out.accepted.contains(&0));
        // An update equal to the previous aggregate scores cosine 1.
        let self_aligned = alignins_filter(
            &[update(0, prev.clone()), update(1, prev.clone()), update(2, prev.clone())],
            Some(&prev),
            ALIGNINS_DEFAULT_THRESHOLD,
        )
        .unwrap();
        assert_eq!(self_aligned.accepted.len(), 3);
        assert!((self_aligned.scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alignins_round_one_accepts_all() {
        let updates: Vec<ClientUpdate> =
            (0..5).map(|i| update(i, vec![i as f64, 1.0])).collect();
        let out = alignins_filter(&updates, None, ALIGNINS_DEFAULT_THRESHOLD).unwrap();
        assert_eq!(out.accepted.len(), 5);
    }

    #[test]
    fn alignins_rejects_zero_norm_updates() {
        let prev = vec![1.0, 1.0, 1.0];
        let updates = vec![
            update(0, vec![1.0, 1.0, 0.9]),
            update(1, vec![0.0, 0.0, 0.0]),
            update(2, vec![1.0, 0.9, 1.0]),
        ];
        let out = alignins_filter(&updates, Some(&prev), ALIGNINS_DEFAULT_THRESHOLD).unwrap();
        assert!(out.is_rejected(1));
    }

    #[test]
    fn rules_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let updates: Vec<ClientUpdate> = (0..8)
            .map(|i| {
                let delta: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
                update(i, delta)
            })
            .collect();
        let mut reversed = updates.clone();
        reversed.reverse();
        let prev: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();

        for rule in [
            AggRule::FedAvg,
            AggRule::MultiKrum { f: 1, m: 3 },
            AggRule::FreqFed { keep_frac: 0.5 },
            AggRule::Mesas { threshold_z: 3.5 },
            AggRule::AlignIns { threshold_z: 2.5 },
        ] {
            let a = rule.apply(&updates, Some(&prev)).unwrap();
            let b = rule.apply(&reversed, Some(&prev)).unwrap();
            let mut acc_a = a.accepted.clone();
            let mut acc_b = b.accepted.clone();
            acc_a.sort_unstable();
            acc_b.sort_unstable();
            assert_eq!(acc_a, acc_b, "{} acceptance changed under permutation", rule.name());
            for (x, y) in a.delta.iter().zip(&b.delta) {
                assert!((x - y).abs() < 1e-12, "{} delta changed under permutation", rule.name());
            }
        }
    }
}
