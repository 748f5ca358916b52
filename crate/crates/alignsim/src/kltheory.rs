//! KL cost of refusal versus remapping over a discrete outcome alphabet.
//!
//! The object of study is a reference policy `pi0` over outcomes and two
//! kinds of constraint an attacker may want to enforce on a tuned policy
//! `pi`:
//!
//! - **refusal**: `pi(R) = alpha` for a refusal event `R`, and
//! - **remapping**: `pi(S) = alpha` for a new-mapping event `S`, possibly
//!   with a prescribed conditional distribution inside `S`.
//!
//! The minimal KL divergence from `pi0` subject to an event-probability
//! constraint is the binary KL between the requested coverage and the
//! event's base mass; the minimizer is an exponential tilt that rescales
//! `pi0` inside and outside the event without touching conditionals
//! ([`i_project`]). Prescribing the conditional inside `S` adds a
//! nonnegative shaping term ([`min_remap_kl`]), which is why pure refusal
//! is never more expensive than remapping whenever the base masses are
//! ordered favourably or any shaping is required ([`compare_costs`]).
//!
//! All divergences are in nats. `0 * ln 0 = 0` by continuous extension and
//! impossible requirements surface as explicit `f64::INFINITY`, never as
//! overflow.
//!
//! [`verify`] hosts the randomized oracle suite behind the `kl-verify`
//! subcommand: a projected-gradient / grid minimizer that is independent of
//! the closed forms above and double-checks them on random instances.

use crate::{Error, Result};

/// A probability vector over the outcome alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    /// Validates entries: nonnegative, summing to 1 within 1e-12.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("empty distribution".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::Domain(
                "distribution entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "distribution sums to {sum}, expected 1 within 1e-12"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalizes arbitrary nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::Domain("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Domain("weights sum to zero".into()));
        }
        let probs = weights.iter().map(|w| w / sum).collect();
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability mass of an event.
    pub fn event_mass(&self, event: &EventMask) -> f64 {
        self.probs
            .iter()
            .zip(event.flags())
            .filter(|(_, &inside)| inside)
            .map(|(&p, _)| p)
            .sum()
    }

    /// `KL(self || other)` in nats; `+inf` when `self` has mass where
    /// `other` has none.
    pub fn kl_to(&self, other: &DiscreteDist) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        let mut total = 0.0;
        for (&p, &q) in self.probs.iter().zip(other.probs.iter()) {
            if p == 0.0 {
                continue;
            }
            if q == 0.0 {
                return f64::INFINITY;
            }
            total += p * (p / q).ln();
        }
        total
    }
}

/// A subset of the outcome alphabet, as a boolean indicator vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventMask {
    flags: Vec<bool>,
}

impl EventMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    /// Event containing exactly the listed outcome ids.
    pub fn from_outcomes(len: usize, outcomes: &[usize]) -> Self {
        let mut flags = vec![false; len];
        for &y in outcomes {
            flags[y] = true;
        }
        Self { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn contains(&self, outcome: usize) -> bool {
        self.flags[outcome]
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> EventMask {
        EventMask::new(self.flags.iter().map(|&b| !b).collect())
    }
}

/// Which precondition of the refusal-vs-remapping comparison fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreconditionCase {
    /// Base masses are ordered on the same side of the coverage so that
    /// binary-KL monotonicity alone guarantees the (weak) inequality.
    MassDominance(SideRegime),
    /// Same-side ordering plus a strictly positive shaping term: the
    /// inequality is strict.
    PositiveShape,
    /// No same-side ordering: the inequality is not guaranteed (and the
    /// report does not assert it).
    Neither,
}

/// The side of the coverage on which mass dominance was established.
///
/// Binary KL `D_B(alpha || p)` decreases in `p` below `alpha` and increases
/// above it, so refusal is certainly no more expensive than remapping when
/// the refusal mass sits between the remapping mass and the coverage:
/// either `p_S <= p_R <= alpha` (raising both masses) or
/// `alpha <= p_R <= p_S` (lowering both).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideRegime {
    /// `p_S <= p_R <= alpha`: coverage above both base masses.
    Increase,
    /// `alpha <= p_R <= p_S`: coverage below both base masses.
    Decrease,
}

/// Cost comparison between enforcing refusal and enforcing a remapping.
#[derive(Debug, Clone)]
pub struct KLReport {
    /// `D_B(alpha || p_R)`: minimal KL to make the refusal event carry
    /// `alpha` mass.
    pub refusal_cost: f64,
    /// `D_B(alpha || p_S) + shape_term`: minimal KL for the remapping.
    pub remap_cost: f64,
    /// Extra cost of prescribing the conditional inside the new-mapping
    /// event; zero when the conditional is left free.
    pub shape_term: f64,
    /// Whether `refusal_cost <= remap_cost` held on this instance.
    pub inequality_holds: bool,
    /// Which comparison guard applied.
    pub precondition_case: PreconditionCase,
}

/// Binary (Bernoulli) KL divergence `D_B(alpha || p)` in nats.
///
/// Continuous extension at `alpha in {0, 1}`; `p in {0, 1}` with
/// `alpha != p` is an impossible requirement and returns `+inf`.
pub fn binary_kl(coverage_alpha: f64, p: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&coverage_alpha) && (0.0..=1.0).contains(&p),
        "binary_kl arguments must be probabilities"
    );
    if coverage_alpha == p {
        return 0.0;
    }
    if p == 0.0 || p == 1.0 {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    if coverage_alpha > 0.0 {
        total += coverage_alpha * (coverage_alpha / p).ln();
    }
    if coverage_alpha < 1.0 {
        total += (1.0 - coverage_alpha) * ((1.0 - coverage_alpha) / (1.0 - p)).ln();
    }
    total
}

fn check_event_shapes(dist: &DiscreteDist, event: &EventMask) -> Result<()> {
    if dist.len() != event.len() {
        return Err(Error::ShapeMismatch(format!(
            "distribution has {} outcomes, event mask {}",
            dist.len(),
            event.len()
        )));
    }
    Ok(())
}

/// I-projection of `pi0` onto `{pi : pi(event) = alpha}`.
///
/// Returns the tilted minimizer (inside mass scaled by `alpha/p`, outside
/// by `(1-alpha)/(1-p)`) together with its KL to `pi0`, which equals
/// `binary_kl(alpha, p)`.
pub fn i_project(
    pi0: &DiscreteDist,
    event: &EventMask,
    coverage_alpha: f64,
) -> Result<(DiscreteDist, f64)> {
    check_event_shapes(pi0, event)?;
    if !(0.0 < coverage_alpha && coverage_alpha < 1.0) {
        return Err(Error::Domain(format!(
            "coverage must lie in (0,1), got {coverage_alpha}"
        )));
    }
    let p = pi0.event_mass(event);
    if p <= 0.0 || p >= 1.0 {
        return Err(Error::InfeasibleConstraint(format!(
            "event mass {p} admits no tilt; it must lie strictly inside (0,1)"
        )));
    }
    let inside = coverage_alpha / p;
    let outside = (1.0 - coverage_alpha) / (1.0 - p);
    let probs = pi0
        .probs()
        .iter()
        .zip(event.flags())
        .map(|(&q, &m)| if m { q * inside } else { q * outside })
        .collect::<Vec<_>>();
    // The tilt preserves normalization exactly up to rounding; renormalize
    // the residual so the constructor's 1e-12 gate is met.
    let dist = DiscreteDist::from_weights(&probs)?;
    Ok((dist, binary_kl(coverage_alpha, p)))
}

/// Chain-rule split of `KL(pi || pi0)` over an event.
///
/// Returns `(binary_term, shape_term)` with
/// `binary_term = D_B(pi(event) || pi0(event))` and
/// `shape_term = alpha * KL(pi_S || pi0_S) + (1-alpha) * KL(pi_Sbar || pi0_Sbar)`,
/// whose sum reconstructs the full KL. Absolute-continuity violations
/// propagate as `+inf` in the affected term.
pub fn kl_chain_decompose(
    pi: &DiscreteDist,
    pi0: &DiscreteDist,
    event: &EventMask,
) -> Result<(f64, f64)> {
    if pi.len() != pi0.len() {
        return Err(Error::ShapeMismatch(format!(
            "pi has {} outcomes, pi0 has {}",
            pi.len(),
            pi0.len()
        )));
    }
    check_event_shapes(pi0, event)?;
    let alpha = pi.event_mass(event);
    let p = pi0.event_mass(event);

    let binary_term = if (p == 0.0 || p == 1.0) && alpha != p {
        f64::INFINITY
    } else {
        binary_kl(alpha.clamp(0.0, 1.0), p.clamp(0.0, 1.0))
    };

    // Conditional KL inside one side of the event; weight 0 means the side
    // is unvisited and contributes nothing by continuous extension.
    let side_kl = |inside: bool, weight: f64, base_mass: f64| -> f64 {
        if weight == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for ((&pp, &qq), &m) in pi.probs().iter().zip(pi0.probs()).zip(event.flags()) {
            if m != inside {
                continue;
            }
            let cp = pp / weight;
            if cp == 0.0 {
                continue;
            }
            if qq == 0.0 || base_mass == 0.0 {
                return f64::INFINITY;
            }
            let cq = qq / base_mass;
            total += cp * (cp / cq).ln();
        }
        total
    };

    let inside_kl = side_kl(true, alpha, p);
    let outside_kl = side_kl(false, 1.0 - alpha, 1.0 - p);
    let shape_term = alpha * inside_kl + (1.0 - alpha) * outside_kl;
    Ok((binary_term, shape_term))
}

/// Minimal KL to enforce `pi(s_event) = alpha`, optionally with the
/// conditional distribution inside the event pinned to `target_conditional`.
///
/// Free conditional: `D_B(alpha || p_S)`. Pinned conditional `pi_S`:
/// `D_B(alpha || p_S) + alpha * KL(pi_S || pi0_S)`. With `alpha = 1` and a
/// point mass on `y*`, this collapses to `-ln pi0(y*)`.
pub fn min_remap_kl(
    pi0: &DiscreteDist,
    s_event: &EventMask,
    coverage_alpha: f64,
    target_conditional: Option<&DiscreteDist>,
) -> Result<f64> {
    check_event_shapes(pi0, s_event)?;
    if !(0.0 < coverage_alpha && coverage_alpha <= 1.0) {
        return Err(Error::Domain(format!(
            "coverage must lie in (0,1], got {coverage_alpha}"
        )));
    }
    let p_s = pi0.event_mass(s_event);
    if p_s <= 0.0 || p_s >= 1.0 {
        return Err(Error::InfeasibleConstraint(format!(
            "new-mapping event mass {p_s} must lie strictly inside (0,1)"
        )));
    }
    let base = if coverage_alpha == 1.0 {
        -p_s.ln()
    } else {
        binary_kl(coverage_alpha, p_s)
    };
    let shape = match target_conditional {
        None => 0.0,
        Some(cond) => {
            check_event_shapes(cond, s_event)?;
            for (&c, &m) in cond.probs().iter().zip(s_event.flags()) {
                if c > 0.0 && !m {
                    return Err(Error::Domain(
                        "target conditional puts mass outside the new-mapping event".into(),
                    ));
                }
            }
            let mut kl = 0.0;
            for (&c, &q) in cond.probs().iter().zip(pi0.probs()) {
                if c == 0.0 {
                    continue;
                }
                if q == 0.0 {
                    return Ok(f64::INFINITY);
                }
                kl += c * (c * p_s / q).ln();
            }
            coverage_alpha * kl
        }
    };
    Ok(base + shape)
}

/// Prices refusal against remapping for one reference distribution.
///
/// The inequality `refusal_cost <= remap_cost` is asserted exactly when one
/// of its guards holds: mass dominance in a monotonicity-compatible side
/// regime, or a strictly positive shaping term. Outside those guards the
/// report flags `Neither` and records the observed costs without claiming
/// the inequality.
pub fn compare_costs(
    pi0: &DiscreteDist,
    r_event: &EventMask,
    s_event: &EventMask,
    coverage_alpha: f64,
    target_conditional: Option<&DiscreteDist>,
) -> Result<KLReport> {
    check_event_shapes(pi0, r_event)?;
    check_event_shapes(pi0, s_event)?;
    if !(0.0 < coverage_alpha && coverage_alpha <= 1.0) {
        return Err(Error::Domain(format!(
            "coverage must lie in (0,1], got {coverage_alpha}"
        )));
    }
    let p_r = pi0.event_mass(r_event);
    let p_s = pi0.event_mass(s_event);
    if p_r <= 0.0 || p_r >= 1.0 {
        return Err(Error::InfeasibleConstraint(format!(
            "refusal event mass {p_r} must lie strictly inside (0,1)"
        )));
    }
    let refusal_cost = if coverage_alpha == 1.0 {
        -p_r.ln()
    } else {
        binary_kl(coverage_alpha, p_r)
    };
    let remap_cost = min_remap_kl(pi0, s_event, coverage_alpha, target_conditional)?;
    let binary_remap = if coverage_alpha == 1.0 {
        -p_s.ln()
    } else {
        binary_kl(coverage_alpha, p_s)
    };
    let shape_term = (remap_cost - binary_remap).max(0.0);

    // The inequality is certified only by the same-side mass ordering:
    // D_B(alpha || .) is monotone on each side of alpha, so the ordering
    // bounds the binary terms, and the nonnegative shape term can only
    // widen the gap. A positive shape with unordered masses proves
    // nothing, so such instances stay unguarded.
    let same_side = if p_s <= p_r && p_r <= coverage_alpha {
        Some(SideRegime::Increase)
    } else if coverage_alpha <= p_r && p_r <= p_s {
        Some(SideRegime::Decrease)
    } else {
        None
    };
    let precondition_case = match same_side {
        Some(_) if shape_term > 0.0 => PreconditionCase::PositiveShape,
        Some(side) => PreconditionCase::MassDominance(side),
        None => PreconditionCase::Neither,
    };

    let inequality_holds = refusal_cost <= remap_cost + 1e-12;
    if precondition_case != PreconditionCase::Neither {
        debug_assert!(
            inequality_holds,
            "comparison guard fired but inequality failed: {refusal_cost} vs {remap_cost}"
        );
    }
    Ok(KLReport {
        refusal_cost,
        remap_cost,
        shape_term,
        inequality_holds,
        precondition_case,
    })
}

/// Expectation form of [`compare_costs`]: averages costs over a prompt set
/// (one reference distribution per prompt, shared events and coverage).
///
/// `inequality_holds` on the averaged report asserts the mean inequality,
/// which follows whenever every per-prompt guard fired; the returned case
/// is `Neither` as soon as any instance was unguarded.
pub fn compare_costs_batch(
    pi0s: &[DiscreteDist],
    r_event: &EventMask,
    s_event: &EventMask,
    coverage_alpha: f64,
    target_conditional: Option<&DiscreteDist>,
) -> Result<KLReport> {
    if pi0s.is_empty() {
        return Err(Error::Domain("empty prompt set".into()));
    }
    let mut refusal = 0.0;
    let mut remap = 0.0;
    let mut shape = 0.0;
    let mut all_guarded = true;
    let mut case = None;
    for pi0 in pi0s {
        let report = compare_costs(pi0, r_event, s_event, coverage_alpha, target_conditional)?;
        refusal += report.refusal_cost;
        remap += report.remap_cost;
        shape += report.shape_term;
        if report.precondition_case == PreconditionCase::Neither {
            all_guarded = false;
        } else if case.is_none() {
            case = Some(report.precondition_case);
        }
    }
    let n = pi0s.len() as f64;
    let refusal_cost = refusal / n;
    let remap_cost = remap / n;
    Ok(KLReport {
        refusal_cost,
        remap_cost,
        shape_term: shape / n,
        inequality_holds: refusal_cost <= remap_cost + 1e-12,
        precondition_case: if all_guarded {
            case.unwrap_or(PreconditionCase::Neither)
        } else {
            PreconditionCase::Neither
        },
    })
}

pub mod verify;
