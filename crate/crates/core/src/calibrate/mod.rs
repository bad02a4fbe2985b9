//! Calibration of supertype profiles to external targets.
//!
//! A slow-timescale RL calibrator walks a population of supertype-profile
//! particles through increment actions while the shared agent policy keeps
//! training on the episodes those particles generate. The calibrator's
//! reward measures how well the emergent episode metrics fit a set of
//! externally specified targets.

mod run;

pub use run::{
    calsheq_iteration, rollout_particles, Calibrator, CalibratorConfig, IterationOutcome,
    ParticleRollout,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{MarketInfo, Side};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Episode metrics
// ---------------------------------------------------------------------------

/// Fraction of total customer transaction quantity captured by the
/// merchants of `group` (`None` sums over all merchants). Defined as 0
/// when no customer quantity traded.
pub fn market_share<T: Scalar>(
    info: &MarketInfo<T>,
    assignment: &[usize],
    group: Option<usize>,
) -> T {
    if info.total_customer_quantity <= T::zero() {
        return T::zero();
    }
    let mut captured = T::zero();
    for f in &info.fills {
        if let Some(m) = f.merchant {
            if group.map_or(true, |g| assignment[m] == g) {
                captured = captured + f.quantity;
            }
        }
    }
    captured / info.total_customer_quantity
}

/// Nearest-rank percentile of an ascending-sorted sample (p in percent).
fn nearest_rank<T: Scalar>(sorted: &[T], p: usize) -> T {
    let n = sorted.len();
    let rank = ((p as f64 / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Percentiles p10..p90 of the per-timestep transaction quantities
/// captured from customers by the group's merchants, pooled across the
/// group. Steps where a merchant captured nothing contribute no sample;
/// an entirely empty sample yields all zeros (logged).
pub fn transaction_percentiles<T: Scalar>(
    info: &MarketInfo<T>,
    assignment: &[usize],
    group: usize,
) -> [T; 9] {
    let mut per_step = vec![T::zero(); info.horizon * info.n_merchants];
    for f in &info.fills {
        if let Some(m) = f.merchant {
            if assignment[m] == group {
                // both sides count as received transaction quantity
                let _ = Side::Buy;
                per_step[f.t * info.n_merchants + m] =
                    per_step[f.t * info.n_merchants + m] + f.quantity;
            }
        }
    }
    let mut sample: Vec<T> = per_step.into_iter().filter(|&q| q > T::zero()).collect();
    if sample.is_empty() {
        log::warn!("transaction_percentiles: empty sample for group {group}");
        return [T::zero(); 9];
    }
    sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = [T::zero(); 9];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = nearest_rank(&sample, (i + 1) * 10);
    }
    out
}

// ---------------------------------------------------------------------------
// Calibration targets and the calibrator reward
// ---------------------------------------------------------------------------

/// What an individual target constrains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetKind {
    /// Market share of one supertype group.
    MarketShareGroup { group: usize },
    /// Sum of all merchants' market shares.
    TotalMarketShare,
    /// The nine transaction-quantity percentiles (p10..p90) of a group.
    TransactionPercentiles { group: usize },
}

/// Loss shape: `absolute` for equality targets, `hinge-below` for
/// "at least" targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossShape {
    Absolute,
    HingeBelow,
}

impl LossShape {
    fn apply(self, target: f64, observed: f64) -> f64 {
        match self {
            LossShape::Absolute => (target - observed).abs(),
            LossShape::HingeBelow => (target - observed).max(0.0),
        }
    }
}

/// One calibration target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    #[serde(flatten)]
    pub kind: TargetKind,
    /// Scalar target, or the nine percentile targets.
    pub target: Vec<f64>,
    pub loss: LossShape,
    pub weight: f64,
}

impl CalibrationTarget {
    pub fn scalar(kind: TargetKind, target: f64, loss: LossShape, weight: f64) -> Self {
        CalibrationTarget { kind, target: vec![target], loss, weight }
    }

    pub fn percentiles(group: usize, targets: [f64; 9], weight: f64) -> Self {
        CalibrationTarget {
            kind: TargetKind::TransactionPercentiles { group },
            target: targets.to_vec(),
            loss: LossShape::Absolute,
            weight,
        }
    }
}

/// How the weighted per-target losses combine into the scalar reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    /// `r = (1 + Σ_k w_k ℓ_k)^{-1}`; the form the experiments use.
    #[default]
    InverseOfSum,
    /// `r = Σ_k w_k (1 + ℓ_k)^{-1} / Σ_k w_k`; reciprocal per target.
    SumOfInverses,
}

/// The K targets plus composition rule producing `r_cal` in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargetSet {
    pub targets: Vec<CalibrationTarget>,
    #[serde(default)]
    pub composition: Composition,
}

impl CalibrationTargetSet {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("empty calibration target set".into()));
        }
        for (k, t) in self.targets.iter().enumerate() {
            if t.weight <= 0.0 {
                return Err(Error::Config(format!("target {k} has non-positive weight")));
            }
            let expected = match t.kind {
                TargetKind::TransactionPercentiles { .. } => 9,
                _ => 1,
            };
            if t.target.len() != expected {
                return Err(Error::Config(format!(
                    "target {k} needs {expected} value(s), got {}",
                    t.target.len()
                )));
            }
        }
        Ok(())
    }

    /// Number of scalar constraints (percentile targets count nine).
    pub fn constraint_count(&self) -> usize {
        self.targets.iter().map(|t| t.target.len()).sum()
    }
}

/// Observed value of one target in one episode.
#[derive(Debug, Clone, PartialEq)]
pub enum Observed {
    Scalar(f64),
    Percentiles([f64; 9]),
}

impl Observed {
    pub fn scalar(&self) -> f64 {
        match self {
            Observed::Scalar(v) => *v,
            Observed::Percentiles(p) => p.iter().sum::<f64>() / 9.0,
        }
    }
}

/// Per-episode evaluation of a target set.
#[derive(Debug, Clone)]
pub struct TargetEvaluation {
    pub observed: Vec<Observed>,
    /// Unweighted loss ℓ_k per target (percentile losses averaged over 9).
    pub losses: Vec<f64>,
    pub reward: f64,
}

/// Measures every target on an episode and composes the calibrator
/// reward.
pub fn evaluate_targets<T: Scalar>(
    set: &CalibrationTargetSet,
    info: &MarketInfo<T>,
    assignment: &[usize],
) -> TargetEvaluation {
    let mut observed = Vec::with_capacity(set.targets.len());
    let mut losses = Vec::with_capacity(set.targets.len());
    for t in &set.targets {
        match t.kind {
            TargetKind::MarketShareGroup { group } => {
                let x = market_share(info, assignment, Some(group)).to_f64();
                observed.push(Observed::Scalar(x));
                losses.push(t.loss.apply(t.target[0], x));
            }
            TargetKind::TotalMarketShare => {
                let x = market_share(info, assignment, None).to_f64();
                observed.push(Observed::Scalar(x));
                losses.push(t.loss.apply(t.target[0], x));
            }
            TargetKind::TransactionPercentiles { group } => {
                let p = transaction_percentiles(info, assignment, group);
                let mut obs = [0.0; 9];
                let mut acc = 0.0;
                for i in 0..9 {
                    obs[i] = p[i].to_f64();
                    acc += t.loss.apply(t.target[i], obs[i]);
                }
                observed.push(Observed::Percentiles(obs));
                losses.push(acc / 9.0);
            }
        }
    }
    let reward = compose_reward(set, &losses);
    TargetEvaluation { observed, losses, reward }
}

/// Composes per-target losses into the scalar calibrator reward.
pub fn compose_reward(set: &CalibrationTargetSet, losses: &[f64]) -> f64 {
    match set.composition {
        Composition::InverseOfSum => {
            let total: f64 =
                set.targets.iter().zip(losses).map(|(t, l)| t.weight * l).sum();
            1.0 / (1.0 + total)
        }
        Composition::SumOfInverses => {
            let wsum: f64 = set.targets.iter().map(|t| t.weight).sum();
            let acc: f64 = set
                .targets
                .iter()
                .zip(losses)
                .map(|(t, l)| t.weight / (1.0 + l))
                .sum();
            acc / wsum
        }
    }
}

// ---------------------------------------------------------------------------
// Two-timescale learning-rate schedules
// ---------------------------------------------------------------------------

/// Learning-rate pair for the shared policy (fast) and calibrator (slow).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum TimescaleSchedule {
    /// `β_m = scale / (1 + m)^exponent` for each policy; satisfies the
    /// two-timescale conditions when both exponents lie in (1/2, 1] and
    /// the calibrator exponent is strictly larger.
    RobbinsMonro {
        shared_scale: f64,
        shared_exponent: f64,
        cal_scale: f64,
        cal_exponent: f64,
    },
    /// Flat rates with the calibrator slowed by a fixed ratio; reproduces
    /// the reported flat-rate setup but does not satisfy the vanishing
    /// ratio condition.
    Practical { shared: f64, ratio: f64 },
}

impl TimescaleSchedule {
    pub fn shared_rate(&self, m: usize) -> f64 {
        match self {
            TimescaleSchedule::RobbinsMonro { shared_scale, shared_exponent, .. } => {
                shared_scale / (1.0 + m as f64).powf(*shared_exponent)
            }
            TimescaleSchedule::Practical { shared, .. } => *shared,
        }
    }

    pub fn cal_rate(&self, m: usize) -> f64 {
        match self {
            TimescaleSchedule::RobbinsMonro { cal_scale, cal_exponent, .. } => {
                cal_scale / (1.0 + m as f64).powf(*cal_exponent)
            }
            TimescaleSchedule::Practical { shared, ratio } => shared * ratio,
        }
    }
}

/// Outcome of [`validate_schedule`].
#[derive(Debug, Clone)]
pub struct ScheduleReport {
    /// Whether the vanishing-ratio plus Robbins-Monro conditions hold.
    pub assumption_met: bool,
    /// Ratio β_cal/β_shared is monotonically decreasing over the horizon.
    pub ratio_monotone: bool,
    pub notes: String,
}

/// Checks the two-timescale conditions.
///
/// For the power-law family this is symbolic: both exponents must lie in
/// (1/2, 1] (divergent sums, convergent squared sums) and the calibrator
/// exponent must exceed the shared one (vanishing ratio); the ratio is
/// also checked numerically over `horizon` iterations. A schedule that
/// cannot satisfy the conditions is rejected; the flat `practical` family
/// is reported as not meeting the assumption but is not an error (it is
/// an explicitly requested mode).
pub fn validate_schedule(schedule: &TimescaleSchedule, horizon: usize) -> Result<ScheduleReport> {
    match schedule {
        TimescaleSchedule::RobbinsMonro {
            shared_scale,
            shared_exponent,
            cal_scale,
            cal_exponent,
        } => {
            if *shared_scale <= 0.0 || *cal_scale <= 0.0 {
                return Err(Error::Schedule("scales must be positive".into()));
            }
            for (name, e) in [("shared", shared_exponent), ("cal", cal_exponent)] {
                if *e <= 0.5 {
                    return Err(Error::Schedule(format!(
                        "{name} exponent {e} <= 1/2: squared sums diverge"
                    )));
                }
                if *e > 1.0 {
                    return Err(Error::Schedule(format!(
                        "{name} exponent {e} > 1: rate sums converge"
                    )));
                }
            }
            if cal_exponent <= shared_exponent {
                return Err(Error::Schedule(format!(
                    "ratio does not vanish: cal exponent {cal_exponent} <= shared {shared_exponent}"
                )));
            }
            let mut ratio_monotone = true;
            let mut prev = f64::INFINITY;
            for m in 0..horizon.max(2) {
                let r = schedule.cal_rate(m) / schedule.shared_rate(m);
                if r > prev + 1e-15 {
                    ratio_monotone = false;
                }
                prev = r;
            }
            Ok(ScheduleReport {
                assumption_met: true,
                ratio_monotone,
                notes: format!(
                    "power-law schedule: exponents ({shared_exponent}, {cal_exponent})"
                ),
            })
        }
        TimescaleSchedule::Practical { shared, ratio } => {
            if *shared <= 0.0 || *ratio <= 0.0 {
                return Err(Error::Schedule("rates must be positive".into()));
            }
            Ok(ScheduleReport {
                assumption_met: false,
                ratio_monotone: true,
                notes: "flat rates: ratio is constant, vanishing-ratio condition not met"
                    .into(),
            })
        }
    }
}
