//! Type-symmetric partially observable Markov game contract and episode
//! execution.
//!
//! An environment hosts `n` agents with identical observation/action
//! spaces. Each agent carries a *supertype* (the parameters of its type
//! distribution); at episode start a *type* is sampled per agent and held
//! constant for the episode. Rewards and transitions must be invariant
//! under permutations of the other agents' (state, action, type) triples —
//! [`symmetry::check_type_symmetry`] verifies this with paired rollouts
//! under common random numbers.

mod episode;
pub mod symmetry;

pub use episode::{run_episode, AgentTrajectory, EpisodeBatch};

use crate::error::{Error, Result};
use crate::rng::EpisodeCtx;
use crate::scalar::Scalar;
use rand_chacha::ChaCha12Rng;

/// Parameters of one agent-type distribution, a bounded real vector.
///
/// Semantics of each entry are assigned by the environment (for the
/// merchant market: per-cluster connectivity probabilities followed by the
/// inventory-tolerance Gaussian mean and stdev). `frozen` marks entries
/// excluded from calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Supertype<T> {
    pub params: Vec<T>,
    pub bounds: Vec<(T, T)>,
    pub frozen: Vec<bool>,
}

impl<T: Scalar> Supertype<T> {
    pub fn new(params: Vec<T>, bounds: Vec<(T, T)>) -> Self {
        let frozen = vec![false; params.len()];
        Supertype { params, bounds, frozen }
    }

    pub fn with_frozen(mut self, frozen: Vec<bool>) -> Self {
        assert_eq!(frozen.len(), self.params.len());
        self.frozen = frozen;
        self
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds.len() != self.params.len() || self.frozen.len() != self.params.len() {
            return Err(Error::Config("supertype field lengths disagree".into()));
        }
        for (j, (&p, &(lo, hi))) in self.params.iter().zip(&self.bounds).enumerate() {
            if !(p >= lo && p <= hi) {
                return Err(Error::Config(format!(
                    "supertype param {j} = {p} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Clamps every parameter into its declared bounds.
    pub fn project(&mut self) {
        for (p, &(lo, hi)) in self.params.iter_mut().zip(&self.bounds) {
            *p = (*p).max(lo).min(hi);
        }
    }
}

/// Assignment of every agent to a supertype group.
#[derive(Debug, Clone, PartialEq)]
pub struct SupertypeProfile<T> {
    /// `assignment[i]` is the group index of agent `i`.
    pub assignment: Vec<usize>,
    /// Distinct supertypes, typically far fewer than agents.
    pub groups: Vec<Supertype<T>>,
}

impl<T: Scalar> SupertypeProfile<T> {
    pub fn new(assignment: Vec<usize>, groups: Vec<Supertype<T>>) -> Self {
        SupertypeProfile { assignment, groups }
    }

    pub fn n_agents(&self) -> usize {
        self.assignment.len()
    }

    pub fn supertype_of(&self, agent: usize) -> &Supertype<T> {
        &self.groups[self.assignment[agent]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config("profile needs at least one group".into()));
        }
        if self.assignment.is_empty() {
            return Err(Error::Config("profile assigns no agents".into()));
        }
        for (i, &g) in self.assignment.iter().enumerate() {
            if g >= self.groups.len() {
                return Err(Error::Config(format!("agent {i} assigned to missing group {g}")));
            }
        }
        for g in &self.groups {
            g.validate()?;
        }
        Ok(())
    }

    /// The profile seen by a rollout whose agent slots are relabeled by
    /// `map` (slot `i` takes the role of `map[i]`).
    pub fn relabeled(&self, map: &[usize]) -> Self {
        let assignment = map.iter().map(|&j| self.assignment[j]).collect();
        SupertypeProfile { assignment, groups: self.groups.clone() }
    }

    /// Concatenated non-frozen parameters of all groups: the calibration
    /// state vector.
    pub fn free_params(&self) -> Vec<T> {
        let mut out = Vec::new();
        for g in &self.groups {
            for (j, &p) in g.params.iter().enumerate() {
                if !g.frozen[j] {
                    out.push(p);
                }
            }
        }
        out
    }

    /// Bounds matching [`Self::free_params`].
    pub fn free_bounds(&self) -> Vec<(T, T)> {
        let mut out = Vec::new();
        for g in &self.groups {
            for (j, &b) in g.bounds.iter().enumerate() {
                if !g.frozen[j] {
                    out.push(b);
                }
            }
        }
        out
    }

    /// Writes a free-parameter vector back into the groups, clamping each
    /// entry into its declared bounds.
    pub fn set_free_params_projected(&mut self, values: &[T]) {
        let mut pos = 0;
        for g in &mut self.groups {
            for j in 0..g.params.len() {
                if !g.frozen[j] {
                    let (lo, hi) = g.bounds[j];
                    g.params[j] = values[pos].max(lo).min(hi);
                    pos += 1;
                }
            }
        }
        assert_eq!(pos, values.len(), "free parameter count");
    }
}

/// Type vector sampled for one agent at episode start; constant thereafter.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentType<T> {
    pub values: Vec<T>,
}

/// One agent's (state, action, type) triple at a time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ZTriple<T> {
    pub state: Vec<T>,
    pub action: Vec<T>,
    pub agent_type: AgentType<T>,
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub observations: Vec<Vec<T>>,
    pub rewards: Vec<T>,
    pub done: bool,
}

/// Contract every environment must satisfy.
///
/// Implementations draw all randomness through the [`EpisodeCtx`] handed
/// to `reset`: world streams for shared randomness, agent streams for
/// per-agent randomness. Anything affecting a given agent must depend on
/// the *multiset* of other agents' z-triples, never on their indices;
/// per-agent tie-break priorities keyed on agent streams satisfy this.
/// That includes float accumulation order: reductions over other agents
/// must run in a canonical order (sorted, or max-based) so the symmetry
/// check holds bit-exactly.
pub trait Environment<T: Scalar>: Clone + Send {
    /// Per-episode side data (e.g. a fill ledger) for metric computation.
    type Info: Send;

    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn type_dim(&self) -> usize;
    /// Per-dimension (lower, upper) action bounds.
    fn action_bounds(&self) -> (Vec<T>, Vec<T>);
    /// Fixed episode length; episodes never terminate early.
    fn horizon(&self) -> usize;
    /// Declared bound on |reward| per step.
    fn max_abs_reward(&self) -> T;
    /// Discount factor attached to episodes of this environment.
    fn discount(&self) -> T {
        T::one()
    }

    /// Samples one type per agent, i.i.d. across agents from each agent's
    /// group distribution. Deterministic given the context.
    fn sample_types(&self, profile: &SupertypeProfile<T>, ctx: &EpisodeCtx) -> Vec<AgentType<T>>;

    /// Starts an episode: samples types, draws initial state from the
    /// environment's reset distribution, returns initial observations.
    fn reset(
        &mut self,
        profile: &SupertypeProfile<T>,
        ctx: &EpisodeCtx,
    ) -> Result<(Vec<AgentType<T>>, Vec<Vec<T>>)>;

    /// Advances one step under the joint action.
    fn step(&mut self, actions: &[Vec<T>]) -> Result<StepOutcome<T>>;

    /// Hands over the episode's side data after the final step.
    fn take_info(&mut self) -> Self::Info;
}

/// Samples one type per agent from the profile's group distributions.
///
/// Thin free-function form of [`Environment::sample_types`].
pub fn sample_types<T: Scalar, E: Environment<T>>(
    env: &E,
    profile: &SupertypeProfile<T>,
    ctx: &EpisodeCtx,
) -> Vec<AgentType<T>> {
    env.sample_types(profile, ctx)
}

/// Stochastic decision rule used by the rollout engine.
pub trait ActionPolicy<T: Scalar>: Sync {
    fn obs_dim(&self) -> usize;
    fn type_dim(&self) -> usize;
    fn action_dim(&self) -> usize;

    /// Samples an action for `(obs, type)` from `rng`, reporting the
    /// environment-space action, the policy's internal (pre-squash)
    /// representation, and the action's log-probability.
    fn act(&self, obs: &[T], ty: &[T], rng: &mut ChaCha12Rng) -> Result<PolicyStep<T>>;
}

/// One sampled action with bookkeeping.
#[derive(Debug, Clone)]
pub struct PolicyStep<T> {
    pub action: Vec<T>,
    pub raw: Vec<T>,
    pub logprob: T,
}

#[cfg(test)]
pub(crate) mod fixtures;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::s;

    fn profile() -> SupertypeProfile<f64> {
        SupertypeProfile::new(
            vec![0, 1, 1],
            vec![
                Supertype::new(vec![0.5, 1.0], vec![(0.0, 1.0), (0.0, 5.0)])
                    .with_frozen(vec![false, true]),
                Supertype::new(vec![0.25, 2.0], vec![(0.0, 1.0), (0.0, 5.0)]),
            ],
        )
    }

    #[test]
    fn profile_validates() {
        assert!(profile().validate().is_ok());
        let mut bad = profile();
        bad.assignment[0] = 7;
        assert!(bad.validate().is_err());
        let mut oob = profile();
        oob.groups[0].params[0] = s(2.0);
        assert!(oob.validate().is_err());
    }

    #[test]
    fn free_params_skip_frozen_entries() {
        let p = profile();
        assert_eq!(p.free_params(), vec![0.5, 0.25, 2.0]);
        assert_eq!(p.free_bounds().len(), 3);
    }

    #[test]
    fn set_free_params_projects_into_bounds() {
        let mut p = profile();
        p.set_free_params_projected(&[1.7, -0.3, 9.0]);
        assert_eq!(p.free_params(), vec![1.0, 0.0, 5.0]);
        // frozen entry untouched
        assert_eq!(p.groups[0].params[1], 1.0);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn relabeled_profile_permutes_assignment() {
        let p = profile();
        let q = p.relabeled(&[0, 2, 1]);
        assert_eq!(q.assignment, vec![0, 1, 1]);
        let r = SupertypeProfile::new(vec![0, 1, 0], p.groups.clone()).relabeled(&[2, 1, 0]);
        assert_eq!(r.assignment, vec![0, 1, 0]);
    }
}
