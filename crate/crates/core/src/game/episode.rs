//! Episode rollout and the trajectory batch it produces.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::rng::{tag, EpisodeCtx};
use crate::scalar::Scalar;

use super::{ActionPolicy, AgentType, Environment, SupertypeProfile};

/// One agent's trajectory over a fixed-horizon episode.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrajectory<T> {
    /// `(horizon, obs_dim)` observations.
    pub obs: Array2<T>,
    /// `(horizon, action_dim)` environment-space actions.
    pub actions: Array2<T>,
    /// `(horizon, action_dim)` policy-space (pre-squash) actions.
    pub raw_actions: Array2<T>,
    pub rewards: Array1<T>,
    pub logprobs: Array1<T>,
}

/// All trajectories of one episode plus the sampling context that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch<T> {
    pub agents: Vec<AgentTrajectory<T>>,
    pub types: Vec<AgentType<T>>,
    pub profile: SupertypeProfile<T>,
    pub discount: T,
}

impl<T: Scalar> EpisodeBatch<T> {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn horizon(&self) -> usize {
        self.agents.first().map_or(0, |a| a.rewards.len())
    }

    /// Monte-Carlo estimate of the agent's value: sum of discounted
    /// rewards over the episode.
    pub fn discounted_return(&self, agent: usize) -> T {
        let mut acc = T::zero();
        let mut g = T::one();
        for &r in self.agents[agent].rewards.iter() {
            acc = acc + g * r;
            g = g * self.discount;
        }
        acc
    }

    pub fn validate(&self) -> Result<()> {
        let horizon = self.horizon();
        for (i, a) in self.agents.iter().enumerate() {
            if a.rewards.len() != horizon
                || a.logprobs.len() != horizon
                || a.obs.nrows() != horizon
                || a.actions.nrows() != horizon
            {
                return Err(Error::Config(format!("agent {i} trajectory length mismatch")));
            }
            if a.rewards.iter().any(|r| !r.is_finite()) {
                return Err(Error::NonFinite(format!("rewards of agent {i}")));
            }
        }
        if self.types.len() != self.agents.len() {
            return Err(Error::Config("one type per agent required".into()));
        }
        Ok(())
    }

    /// Writes the batch in columnar CSV form:
    /// `agent,t,obs_0..,act_0..,reward,logprob`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        let obs_dim = self.agents.first().map_or(0, |a| a.obs.ncols());
        let act_dim = self.agents.first().map_or(0, |a| a.actions.ncols());
        let mut header = String::from("agent,t");
        for j in 0..obs_dim {
            header.push_str(&format!(",obs_{j}"));
        }
        for j in 0..act_dim {
            header.push_str(&format!(",act_{j}"));
        }
        header.push_str(",reward,logprob");
        writeln!(w, "{header}")?;
        for (i, a) in self.agents.iter().enumerate() {
            for t in 0..self.horizon() {
                let mut row = format!("{i},{t}");
                for j in 0..obs_dim {
                    row.push_str(&format!(",{}", a.obs[[t, j]].to_f64()));
                }
                for j in 0..act_dim {
                    row.push_str(&format!(",{}", a.actions[[t, j]].to_f64()));
                }
                row.push_str(&format!(
                    ",{},{}",
                    a.rewards[t].to_f64(),
                    a.logprobs[t].to_f64()
                ));
                writeln!(w, "{row}")?;
            }
        }
        Ok(())
    }
}

/// Rolls out one fixed-horizon episode.
///
/// Every action is recorded with its log-probability under the policy at
/// sampling time. Bit-identical output for identical `(env, profile,
/// policy, ctx)`.
pub fn run_episode<T, E, P>(
    env: &mut E,
    profile: &SupertypeProfile<T>,
    policy: &P,
    ctx: &EpisodeCtx,
) -> Result<(EpisodeBatch<T>, E::Info)>
where
    T: Scalar,
    E: Environment<T>,
    P: ActionPolicy<T>,
{
    profile.validate()?;
    let n = env.n_agents();
    if profile.n_agents() != n {
        return Err(Error::Config(format!(
            "profile assigns {} agents, environment hosts {n}",
            profile.n_agents()
        )));
    }
    if policy.obs_dim() != env.obs_dim()
        || policy.type_dim() != env.type_dim()
        || policy.action_dim() != env.action_dim()
    {
        return Err(Error::Config(format!(
            "policy dims (obs {}, type {}, act {}) disagree with environment (obs {}, type {}, act {})",
            policy.obs_dim(),
            policy.type_dim(),
            policy.action_dim(),
            env.obs_dim(),
            env.type_dim(),
            env.action_dim()
        )));
    }

    let horizon = env.horizon();
    let (types, mut observations) = env.reset(profile, ctx)?;
    let r_max = env.max_abs_reward();

    let mut trajs: Vec<AgentTrajectory<T>> = (0..n)
        .map(|_| AgentTrajectory {
            obs: Array2::zeros((horizon, env.obs_dim())),
            actions: Array2::zeros((horizon, env.action_dim())),
            raw_actions: Array2::zeros((horizon, env.action_dim())),
            rewards: Array1::zeros(horizon),
            logprobs: Array1::zeros(horizon),
        })
        .collect();

    for t in 0..horizon {
        let mut joint: Vec<Vec<T>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ctx.agent(i, &[tag::ACTION, t as u64]).rng();
            let step = policy.act(&observations[i], &types[i].values, &mut rng)?;
            for (j, &v) in observations[i].iter().enumerate() {
                trajs[i].obs[[t, j]] = v;
            }
            for (j, (&a, &u)) in step.action.iter().zip(&step.raw).enumerate() {
                trajs[i].actions[[t, j]] = a;
                trajs[i].raw_actions[[t, j]] = u;
            }
            trajs[i].logprobs[t] = step.logprob;
            joint.push(step.action);
        }
        let outcome = env.step(&joint)?;
        for i in 0..n {
            let r = outcome.rewards[i];
            if !r.is_finite() {
                return Err(Error::NonFinite(format!("reward of agent {i} at step {t}")));
            }
            if r.abs() > r_max {
                return Err(Error::Config(format!(
                    "agent {i} reward {} exceeds declared bound {} at step {t}",
                    r.to_f64(),
                    r_max.to_f64()
                )));
            }
            trajs[i].rewards[t] = r;
        }
        observations = outcome.observations;
    }

    let batch = EpisodeBatch {
        agents: trajs,
        types,
        profile: profile.clone(),
        discount: env.discount(),
    };
    Ok((batch, env.take_info()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::fixtures::{AdditiveEnv, UnitPolicy};
    use crate::game::{Supertype, SupertypeProfile};
    use crate::rng::StreamId;

    fn profile(n: usize) -> SupertypeProfile<f64> {
        let st = Supertype::new(vec![0.5], vec![(0.0, 1.0)]);
        SupertypeProfile::new(vec![0; n], vec![st])
    }

    #[test]
    fn same_seed_gives_bit_identical_episodes() {
        let ctx = EpisodeCtx::new(StreamId::root(123), 0, 3);
        let mut env_a = AdditiveEnv::new(3, 8);
        let mut env_b = AdditiveEnv::new(3, 8);
        let (a, _) = run_episode(&mut env_a, &profile(3), &UnitPolicy, &ctx).unwrap();
        let (b, _) = run_episode(&mut env_b, &profile(3), &UnitPolicy, &ctx).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn types_are_constant_and_trajectories_full_length() {
        let ctx = EpisodeCtx::new(StreamId::root(9), 0, 2);
        let mut env = AdditiveEnv::new(2, 12);
        let (batch, _) = run_episode(&mut env, &profile(2), &UnitPolicy, &ctx).unwrap();
        assert_eq!(batch.horizon(), 12);
        assert_eq!(batch.types.len(), 2);
        batch.validate().unwrap();
    }

    #[test]
    fn profile_size_mismatch_is_a_config_error() {
        let ctx = EpisodeCtx::new(StreamId::root(9), 0, 3);
        let mut env = AdditiveEnv::new(3, 4);
        let err = run_episode(&mut env, &profile(2), &UnitPolicy, &ctx);
        assert!(err.is_err());
    }

    #[test]
    fn csv_export_has_one_row_per_agent_step() {
        let ctx = EpisodeCtx::new(StreamId::root(4), 0, 2);
        let mut env = AdditiveEnv::new(2, 5);
        let (batch, _) = run_episode(&mut env, &profile(2), &UnitPolicy, &ctx).unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 5);
        assert!(lines[0].starts_with("agent,t,obs_0,obs_1,act_0,reward,logprob"));
    }

    #[test]
    fn discounted_return_sums_geometrically() {
        let ctx = EpisodeCtx::new(StreamId::root(4), 1, 2);
        let mut env = AdditiveEnv::new(2, 5);
        let (mut batch, _) = run_episode(&mut env, &profile(2), &UnitPolicy, &ctx).unwrap();
        batch.discount = 0.5;
        for t in 0..5 {
            batch.agents[0].rewards[t] = 1.0;
        }
        let expect = 1.0 + 0.5 + 0.25 + 0.125 + 0.0625;
        assert!((batch.discounted_return(0) - expect).abs() < 1e-12);
    }
}
