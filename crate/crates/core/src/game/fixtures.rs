//! Small synthetic environments for exercising the game contract in unit
//! tests. Not part of the public API.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::rng::{tag, EpisodeCtx};

use super::{
    ActionPolicy, AgentType, Environment, PolicyStep, StepOutcome, SupertypeProfile,
};

/// Type-symmetric by construction: agent i's reward is a function of its
/// own action/type and the mean of the other agents' action*type products.
#[derive(Clone)]
pub struct AdditiveEnv {
    n: usize,
    horizon: usize,
    t: usize,
    x: f64,
    types: Vec<AgentType<f64>>,
    ctx: Option<EpisodeCtx>,
}

impl AdditiveEnv {
    pub fn new(n: usize, horizon: usize) -> Self {
        AdditiveEnv { n, horizon, t: 0, x: 0.0, types: Vec::new(), ctx: None }
    }

    fn world_x(ctx: &EpisodeCtx, t: usize) -> f64 {
        let mut rng = ctx.world(&[tag::REFERENCE, t as u64]).rng();
        rng.gen::<f64>() * 2.0 - 1.0
    }
}

impl Environment<f64> for AdditiveEnv {
    type Info = ();

    fn n_agents(&self) -> usize {
        self.n
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn type_dim(&self) -> usize {
        1
    }
    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-1.0], vec![1.0])
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn max_abs_reward(&self) -> f64 {
        4.0
    }

    fn sample_types(&self, profile: &SupertypeProfile<f64>, ctx: &EpisodeCtx) -> Vec<AgentType<f64>> {
        (0..self.n)
            .map(|i| {
                let mut rng = ctx.agent(i, &[tag::TYPE]).rng();
                let base = profile.supertype_of(i).params[0];
                AgentType { values: vec![base + 0.1 * rng.gen::<f64>()] }
            })
            .collect()
    }

    fn reset(
        &mut self,
        profile: &SupertypeProfile<f64>,
        ctx: &EpisodeCtx,
    ) -> Result<(Vec<AgentType<f64>>, Vec<Vec<f64>>)> {
        self.t = 0;
        self.types = self.sample_types(profile, ctx);
        self.x = Self::world_x(ctx, 0);
        self.ctx = Some(ctx.clone());
        let obs = (0..self.n).map(|_| vec![self.x, 0.0]).collect();
        Ok((self.types.clone(), obs))
    }

    fn step(&mut self, actions: &[Vec<f64>]) -> Result<StepOutcome<f64>> {
        // Reduce over the other agents in a canonical (sorted) order so the
        // float accumulation is invariant under permutation of identities.
        let others_mean: Vec<f64> = (0..self.n)
            .map(|i| {
                let mut terms: Vec<f64> = (0..self.n)
                    .filter(|&j| j != i)
                    .map(|j| actions[j][0] * self.types[j].values[0])
                    .collect();
                terms.sort_by(f64::total_cmp);
                terms.iter().sum::<f64>() / (self.n as f64 - 1.0).max(1.0)
            })
            .collect();
        let rewards: Vec<f64> = (0..self.n)
            .map(|i| actions[i][0] * self.types[i].values[0] * self.x + others_mean[i])
            .collect();
        self.t += 1;
        let ctx = self.ctx.as_ref().unwrap();
        self.x = Self::world_x(ctx, self.t);
        let observations = (0..self.n).map(|i| vec![self.x, actions[i][0]]).collect();
        Ok(StepOutcome { observations, rewards, done: self.t >= self.horizon })
    }

    fn take_info(&mut self) -> Self::Info {}
}

/// Mutation fixture: adds an agent-index-dependent term to every reward,
/// deliberately breaking type-symmetry.
#[derive(Clone)]
pub struct IndexBiasedEnv {
    inner: AdditiveEnv,
}

impl IndexBiasedEnv {
    pub fn new(n: usize, horizon: usize) -> Self {
        IndexBiasedEnv { inner: AdditiveEnv::new(n, horizon) }
    }
}

impl Environment<f64> for IndexBiasedEnv {
    type Info = ();

    fn n_agents(&self) -> usize {
        self.inner.n_agents()
    }
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }
    fn type_dim(&self) -> usize {
        self.inner.type_dim()
    }
    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.inner.action_bounds()
    }
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }
    fn max_abs_reward(&self) -> f64 {
        self.inner.max_abs_reward() + 1.0
    }

    fn sample_types(&self, profile: &SupertypeProfile<f64>, ctx: &EpisodeCtx) -> Vec<AgentType<f64>> {
        self.inner.sample_types(profile, ctx)
    }

    fn reset(
        &mut self,
        profile: &SupertypeProfile<f64>,
        ctx: &EpisodeCtx,
    ) -> Result<(Vec<AgentType<f64>>, Vec<Vec<f64>>)> {
        self.inner.reset(profile, ctx)
    }

    fn step(&mut self, actions: &[Vec<f64>]) -> Result<StepOutcome<f64>> {
        let mut out = self.inner.step(actions)?;
        let n = actions.len();
        for i in 0..n {
            let bias: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| 0.01 * j as f64 * actions[j][0])
                .sum();
            out.rewards[i] += bias;
        }
        Ok(out)
    }

    fn take_info(&mut self) -> Self::Info {}
}

/// Samples a tanh-squashed standard normal; log-probability is the exact
/// squashed-Gaussian density.
pub struct UnitPolicy;

impl ActionPolicy<f64> for UnitPolicy {
    fn obs_dim(&self) -> usize {
        2
    }
    fn type_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }

    fn act(&self, _obs: &[f64], _ty: &[f64], rng: &mut ChaCha12Rng) -> Result<PolicyStep<f64>> {
        let u: f64 = crate::scalar::Scalar::standard_normal(rng);
        let a = u.tanh();
        let log_n = -0.5 * u * u - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_det = (1.0 - a * a).max(1e-12).ln();
        Ok(PolicyStep { action: vec![a], raw: vec![u], logprob: log_n - log_det })
    }
}

/// Uniform-noise policy over the market action box `[-1,1]^2 x [0,1]`.
pub struct MarketNoise {
    pub obs_dim: usize,
}

impl ActionPolicy<f64> for MarketNoise {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    fn type_dim(&self) -> usize {
        3
    }
    fn action_dim(&self) -> usize {
        3
    }

    fn act(&self, _obs: &[f64], _ty: &[f64], rng: &mut ChaCha12Rng) -> Result<PolicyStep<f64>> {
        let a = vec![
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>(),
        ];
        Ok(PolicyStep { action: a.clone(), raw: a, logprob: 0.0 })
    }
}

/// Emits the same fixed action every step.
pub struct ConstantPolicy {
    pub action: Vec<f64>,
    pub obs_dim: usize,
    pub type_dim: usize,
}

impl ActionPolicy<f64> for ConstantPolicy {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    fn type_dim(&self) -> usize {
        self.type_dim
    }
    fn action_dim(&self) -> usize {
        self.action.len()
    }

    fn act(&self, _obs: &[f64], _ty: &[f64], _rng: &mut ChaCha12Rng) -> Result<PolicyStep<f64>> {
        Ok(PolicyStep { action: self.action.clone(), raw: self.action.clone(), logprob: 0.0 })
    }
}
