//! Randomized verification suite for the KL machinery.
//!
//! Each check pits a closed form against an independent numeric oracle on
//! seeded random instances:
//!
//! - `i_project` against a Euclidean projected-gradient minimizer (fine
//!   grid search on alphabets of up to 4 outcomes),
//! - the chain-rule decomposition against a direct KL evaluation,
//! - the refusal-vs-remapping inequality against exhaustive guard checks.
//!
//! The oracle minimizer works in the raw probability coordinates with
//! Euclidean projections onto the constraint set; it never forms the
//! exponential tilt, so agreement with the closed form is evidence, not
//! tautology.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    binary_kl, compare_costs, i_project, kl_chain_decompose, DiscreteDist, EventMask,
    PreconditionCase,
};

/// Outcome of one suite check over all its trials.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: &'static str,
    pub trials: usize,
    pub violations: usize,
    pub max_violation: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn csv_header() -> &'static str {
        "check,trials,violations,max_violation,pass"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{}",
            self.name, self.trials, self.violations, self.max_violation, self.pass
        )
    }
}

/// Random distribution with every outcome's mass bounded away from zero,
/// so KL objectives stay smooth enough for the numeric oracle.
fn random_dist(rng: &mut ChaCha8Rng, len: usize) -> DiscreteDist {
    let mut weights = Vec::with_capacity(len);
    for _ in 0..len {
        let u: f64 = rng.gen_range(1e-12..1.0);
        weights.push(-u.ln() + 0.05);
    }
    DiscreteDist::from_weights(&weights).unwrap()
}

/// Random proper nonempty subset of the alphabet.
fn random_event(rng: &mut ChaCha8Rng, len: usize) -> EventMask {
    loop {
        let flags: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
        let count = flags.iter().filter(|&&b| b).count();
        if count > 0 && count < len {
            return EventMask::new(flags);
        }
    }
}

/// Euclidean projection onto the scaled simplex `{x >= 0, sum x = total}`.
fn project_scaled_simplex(v: &[f64], total: f64) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    let mut k = 0;
    for (i, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - total) / (i + 1) as f64;
        if s - t > 0.0 {
            tau = t;
            k = i + 1;
        }
    }
    debug_assert!(k > 0);
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

fn kl_value(pi: &[f64], pi0: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&p, &q) in pi.iter().zip(pi0) {
        if p > 0.0 {
            total += p * (p / q).ln();
        }
    }
    total
}

/// Minimizes `KL(pi || pi0)` over `{pi(event) = alpha}` by projected
/// gradient descent with Armijo backtracking in the raw coordinates.
pub fn numeric_constrained_min(pi0: &DiscreteDist, event: &EventMask, alpha: f64) -> f64 {
    let n = pi0.len();
    let inside: Vec<usize> = (0..n).filter(|&i| event.contains(i)).collect();
    let outside: Vec<usize> = (0..n).filter(|&i| !event.contains(i)).collect();

    // Feasible start: uniform within each side of the event.
    let mut pi = vec![0.0; n];
    for &i in &inside {
        pi[i] = alpha / inside.len() as f64;
    }
    for &i in &outside {
        pi[i] = (1.0 - alpha) / outside.len() as f64;
    }

    let project = |x: &[f64]| -> Vec<f64> {
        let vin: Vec<f64> = inside.iter().map(|&i| x[i]).collect();
        let vout: Vec<f64> = outside.iter().map(|&i| x[i]).collect();
        let pin = project_scaled_simplex(&vin, alpha);
        let pout = project_scaled_simplex(&vout, 1.0 - alpha);
        let mut out = vec![0.0; x.len()];
        for (j, &i) in inside.iter().enumerate() {
            out[i] = pin[j];
        }
        for (j, &i) in outside.iter().enumerate() {
            out[i] = pout[j];
        }
        out
    };

    let q = pi0.probs();
    let mut f = kl_value(&pi, q);
    let mut step = 0.5;
    for _ in 0..6000 {
        let grad: Vec<f64> = pi
            .iter()
            .zip(q)
            .map(|(&p, &q)| (p.max(1e-300) / q).ln() + 1.0)
            .collect();
        // Armijo backtracking on the projected step.
        let mut improved = false;
        for _ in 0..40 {
            let trial: Vec<f64> = pi.iter().zip(&grad).map(|(&p, &g)| p - step * g).collect();
            let trial = project(&trial);
            let ft = kl_value(&trial, q);
            if ft < f - 1e-15 {
                pi = trial;
                f = ft;
                improved = true;
                step *= 1.3;
                break;
            }
            step *= 0.5;
        }
        if !improved || step < 1e-14 {
            break;
        }
    }
    f
}

/// Exhaustive grid minimizer for alphabets of up to 4 outcomes.
///
/// The constraint splits the simplex into two scaled sub-simplices with at
/// most two free parameters total on these alphabet sizes.
pub fn grid_constrained_min(pi0: &DiscreteDist, event: &EventMask, alpha: f64) -> f64 {
    let n = pi0.len();
    assert!(n <= 4, "grid oracle is limited to 4 outcomes");
    let inside: Vec<usize> = (0..n).filter(|&i| event.contains(i)).collect();
    let outside: Vec<usize> = (0..n).filter(|&i| !event.contains(i)).collect();

    // All grid points of a scaled simplex with `dim` coordinates.
    fn grid(dim: usize, total: f64, steps: usize) -> Vec<Vec<f64>> {
        match dim {
            1 => vec![vec![total]],
            2 => (0..=steps)
                .map(|i| {
                    let t = i as f64 / steps as f64;
                    vec![t * total, (1.0 - t) * total]
                })
                .collect(),
            3 => {
                let mut points = Vec::new();
                for i in 0..=steps {
                    for j in 0..=(steps - i) {
                        let a = i as f64 / steps as f64;
                        let b = j as f64 / steps as f64;
                        points.push(vec![a * total, b * total, (1.0 - a - b) * total]);
                    }
                }
                points
            }
            _ => unreachable!("event sides on 4 outcomes have at most 3 coordinates"),
        }
    }

    let steps = if inside.len().max(outside.len()) == 3 { 240 } else { 800 };
    let q = pi0.probs();
    let mut best = f64::INFINITY;
    for pin in grid(inside.len(), alpha, steps) {
        for pout in grid(outside.len(), 1.0 - alpha, steps) {
            let mut pi = vec![0.0; n];
            for (j, &i) in inside.iter().enumerate() {
                pi[i] = pin[j];
            }
            for (j, &i) in outside.iter().enumerate() {
                pi[i] = pout[j];
            }
            let f = kl_value(&pi, q);
            if f < best {
                best = f;
            }
        }
    }
    best
}

/// I-projection optimality: no feasible point beats the closed form by
/// more than 1e-6, and the returned minimizer is feasible and priced
/// consistently.
pub fn check_projection_optimality(trials: usize, seed: u64) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut max_violation: f64 = 0.0;
    for trial in 0..trials {
        let len = rng.gen_range(2..=16);
        let pi0 = random_dist(&mut rng, len);
        let event = random_event(&mut rng, len);
        let alpha = rng.gen_range(0.05..0.95);

        let (proj, closed) = i_project(&pi0, &event, alpha).unwrap();
        let numeric = if len <= 4 && trial % 10 == 0 {
            grid_constrained_min(&pi0, &event, alpha)
        } else {
            numeric_constrained_min(&pi0, &event, alpha)
        };

        let feasibility = (proj.event_mass(&event) - alpha).abs();
        let self_consistency = (proj.kl_to(&pi0) - closed).abs();
        let optimality_gap = closed - numeric; // positive = oracle beat us
        let violation = optimality_gap.max(feasibility).max(self_consistency);
        if violation > max_violation {
            max_violation = violation;
        }
        if optimality_gap > 1e-6 || feasibility > 1e-9 || self_consistency > 1e-9 || closed < -1e-12
        {
            violations += 1;
        }
    }
    CheckRow {
        name: "i_projection_optimality",
        trials,
        violations,
        max_violation,
        pass: violations == 0,
    }
}

/// Chain-rule identity: binary term plus shape term reconstructs the
/// directly computed KL within 1e-9.
pub fn check_decomposition_identity(trials: usize, seed: u64) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut max_violation: f64 = 0.0;
    for _ in 0..trials {
        let len = rng.gen_range(2..=16);
        let pi0 = random_dist(&mut rng, len);
        let pi = random_dist(&mut rng, len);
        let event = random_event(&mut rng, len);
        let (binary, shape) = kl_chain_decompose(&pi, &pi0, &event).unwrap();
        let direct = pi.kl_to(&pi0);
        let residual = (binary + shape - direct).abs();
        if residual > max_violation {
            max_violation = residual;
        }
        if residual > 1e-9 || shape < -1e-12 || binary < -1e-12 {
            violations += 1;
        }
    }
    CheckRow {
        name: "decomposition_identity",
        trials,
        violations,
        max_violation,
        pass: violations == 0,
    }
}

/// Comparison theorem: on every trial whose guard fires (mass dominance or
/// positive shape), the refusal cost must not exceed the remapping cost.
pub fn check_inequality_theorem(trials: usize, seed: u64) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut guarded = 0;
    let mut max_violation: f64 = 0.0;
    for _ in 0..trials {
        let len = rng.gen_range(3..=16);
        let pi0 = random_dist(&mut rng, len);
        // Disjoint refusal and new-mapping events.
        let r_outcome = rng.gen_range(0..len);
        let mut s_flags = vec![false; len];
        let mut any = false;
        for i in 0..len {
            if i != r_outcome && rng.gen_bool(0.4) {
                s_flags[i] = true;
                any = true;
            }
        }
        if !any {
            s_flags[(r_outcome + 1) % len] = true;
        }
        if s_flags.iter().filter(|&&b| b).count() == len - 1 {
            // Keep the union a proper subset so both masses stay in (0,1).
            let drop = (0..len).find(|&i| s_flags[i]).unwrap();
            s_flags[drop] = false;
        }
        if !s_flags.iter().any(|&b| b) {
            continue;
        }
        let r_event = EventMask::from_outcomes(len, &[r_outcome]);
        let s_event = EventMask::new(s_flags);
        let alpha = rng.gen_range(0.05..0.95);

        // Half the trials pin a random conditional inside S.
        let conditional = if rng.gen_bool(0.5) {
            let mut weights = vec![0.0; len];
            for (i, w) in weights.iter_mut().enumerate() {
                if s_event.contains(i) {
                    *w = rng.gen_range(0.05..1.0);
                }
            }
            Some(DiscreteDist::from_weights(&weights).unwrap())
        } else {
            None
        };

        let report = compare_costs(&pi0, &r_event, &s_event, alpha, conditional.as_ref()).unwrap();
        if report.refusal_cost < -1e-12 || report.remap_cost < -1e-12 {
            violations += 1;
        }
        if report.precondition_case != PreconditionCase::Neither {
            guarded += 1;
            let gap = report.refusal_cost - report.remap_cost;
            if gap > max_violation {
                max_violation = gap;
            }
            if !report.inequality_holds {
                violations += 1;
            }
        }
    }
    CheckRow {
        name: "comparison_inequality",
        trials: guarded,
        violations,
        max_violation: max_violation.max(0.0),
        pass: violations == 0 && guarded > 0,
    }
}

/// Spot checks of the binary KL closed form against two-term quadrature
/// (direct evaluation of both Bernoulli terms).
pub fn check_binary_kl(trials: usize, seed: u64) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut max_violation: f64 = 0.0;
    for _ in 0..trials {
        let alpha: f64 = rng.gen_range(0.0..=1.0);
        let p: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        let direct = {
            let a = if alpha > 0.0 { alpha * (alpha / p).ln() } else { 0.0 };
            let b = if alpha < 1.0 {
                (1.0 - alpha) * ((1.0 - alpha) / (1.0 - p)).ln()
            } else {
                0.0
            };
            a + b
        };
        let got = binary_kl(alpha, p);
        let residual = (got - direct).abs();
        if residual > max_violation {
            max_violation = residual;
        }
        if residual > 1e-12 || got < -1e-12 {
            violations += 1;
        }
    }
    CheckRow {
        name: "binary_kl_quadrature",
        trials,
        violations,
        max_violation,
        pass: violations == 0,
    }
}

/// Runs the full randomized suite.
pub fn run_full_suite(trials: usize, seed: u64) -> Vec<CheckRow> {
    vec![
        check_binary_kl(trials, seed ^ 0x1),
        check_projection_optimality(trials, seed ^ 0x2),
        check_decomposition_identity(trials, seed ^ 0x3),
        check_inequality_theorem(trials, seed ^ 0x4),
    ]
}
