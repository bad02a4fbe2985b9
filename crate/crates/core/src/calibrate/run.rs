//! The dual-RL calibration iteration: supertype-profile particles walk
//! under the calibrator's increments on a slow timescale while the shared
//! agent policy trains on the resulting episodes on a fast timescale.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::game::{
    run_episode, AgentTrajectory, AgentType, Environment, EpisodeBatch, Supertype,
    SupertypeProfile,
};
use crate::policy::{PolicyConfig, PpoConfig, PpoTrainer, SharedPolicy, UpdateStats, ValueHead};
use crate::rng::{tag, EpisodeCtx, StreamId};
use crate::scalar::{s, Scalar};

use super::{evaluate_targets, CalibrationTargetSet, TargetEvaluation};

/// Calibrator policy settings.
#[derive(Debug, Clone)]
pub struct CalibratorConfig {
    pub hidden: Vec<usize>,
    /// Initial stdev of the (pre-squash) increment distribution.
    pub init_sigma: f64,
    /// Increments sampled per episode; types re-sample at each decision
    /// point, so the environment horizon is the per-segment length.
    pub decision_points: usize,
    pub ppo: PpoConfig,
    /// Emit zero increments and skip calibrator updates; degenerates to
    /// fixed-profile self-play.
    pub frozen: bool,
}

impl Default for CalibratorConfig {
    fn default() -> Self {
        CalibratorConfig {
            hidden: vec![256, 256],
            init_sigma: 0.1,
            decision_points: 1,
            ppo: PpoConfig { sgd_iters: 10, minibatch_size: 64, ..PpoConfig::default() },
            frozen: false,
        }
    }
}

/// The RL calibrator: a squashed-Gaussian policy over profile increments,
/// trained by PPO on (profile, increment, fit-reward) transitions.
///
/// Its state is the free-parameter vector of a supertype profile
/// (normalized to the unit box internally); its action is a per-dimension
/// increment bounded by the span of each state dimension.
#[derive(Debug, Clone)]
pub struct Calibrator<T> {
    pub trainer: PpoTrainer<T>,
    pub cfg: CalibratorConfig,
    bounds: Vec<(T, T)>,
}

impl<T: Scalar> Calibrator<T> {
    /// Builds the calibrator for profiles shaped like `template`.
    pub fn new(template: &SupertypeProfile<T>, cfg: CalibratorConfig, stream: StreamId) -> Self {
        let bounds = template.free_bounds();
        let dim = bounds.len();
        // action range per dimension: +- the state span
        let lo: Vec<f64> = bounds.iter().map(|&(l, h)| -((h - l).to_f64())).collect();
        let hi: Vec<f64> = bounds.iter().map(|&(l, h)| (h - l).to_f64()).collect();
        let pol_cfg = PolicyConfig::new(dim, 0, lo, hi)
            .with_hidden(cfg.hidden.clone())
            .with_init_sigma(cfg.init_sigma);
        let policy = SharedPolicy::new(pol_cfg, stream.child(1));
        let value = ValueHead::new(dim, 0, &cfg.hidden, stream.child(2));
        let trainer = PpoTrainer::new(policy, value, cfg.ppo.clone());
        Calibrator { trainer, cfg, bounds }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }
}

/// Everything one particle produced in one iteration.
#[derive(Debug)]
pub struct ParticleRollout<T> {
    pub episodes: Vec<EpisodeBatch<T>>,
    /// One transition per decision point: (state, increment, r_cal).
    pub transitions: Vec<EpisodeBatch<T>>,
    pub evaluations: Vec<TargetEvaluation>,
    /// Updated particle after its increments.
    pub particle: SupertypeProfile<T>,
    /// Mean normalized |delta| actually applied per dimension.
    pub drift: f64,
    pub group_rewards: Vec<(usize, f64)>,
}

/// Aggregate diagnostics of one calibration iteration.
#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub r_cal_mean: f64,
    pub r_cal_std: f64,
    pub per_target_loss_mean: Vec<f64>,
    pub per_target_observed_mean: Vec<f64>,
    /// Mean per-agent episode return per supertype group.
    pub group_reward_mean: Vec<f64>,
    pub shared_stats: UpdateStats,
    pub cal_stats: Option<UpdateStats>,
    /// Mean normalized per-dimension profile change this iteration.
    pub drift_mean: f64,
    pub profile_dim_mean: Vec<f64>,
    pub profile_dim_std: Vec<f64>,
    pub env_steps: usize,
}

fn episode_index(iteration: usize, particle: usize, segment: usize, stride: usize, k: usize) -> u64 {
    (((iteration * stride + particle) * k) + segment) as u64
}

/// Rolls out `count` episodes of `env` under a fixed profile with the
/// same stream indexing the calibration iteration uses; the BO baseline
/// and plain self-play training share this path so that a frozen
/// calibrator is bit-identical to them.
pub fn rollout_particles<T, E>(
    env: &E,
    policy: &SharedPolicy<T>,
    profile: &SupertypeProfile<T>,
    count: usize,
    root: StreamId,
    iteration: usize,
) -> Result<Vec<(EpisodeBatch<T>, E::Info)>>
where
    T: Scalar,
    E: Environment<T> + Sync,
    E::Info: Send,
{
    let n = env.n_agents();
    (0..count)
        .into_par_iter()
        .map(|b| {
            let ctx =
                EpisodeCtx::new(root, episode_index(iteration, b, 0, count, 1), n);
            let mut e = env.clone();
            run_episode(&mut e, profile, policy, &ctx)
        })
        .collect()
}

/// One transition of the calibrator policy as a one-step episode batch.
fn calibrator_transition<T: Scalar>(
    state_norm: &[T],
    raw: &[T],
    action: &[T],
    logprob: T,
    reward: f64,
) -> EpisodeBatch<T> {
    let dim = state_norm.len();
    let profile = SupertypeProfile::new(vec![0], vec![Supertype::new(vec![], vec![])]);
    EpisodeBatch {
        agents: vec![AgentTrajectory {
            obs: Array2::from_shape_vec((1, dim), state_norm.to_vec()).unwrap(),
            actions: Array2::from_shape_vec((1, raw.len()), action.to_vec()).unwrap(),
            raw_actions: Array2::from_shape_vec((1, raw.len()), raw.to_vec()).unwrap(),
            rewards: Array1::from_vec(vec![s(reward)]),
            logprobs: Array1::from_vec(vec![logprob]),
        }],
        types: vec![AgentType { values: vec![] }],
        profile,
        discount: T::one(),
    }
}

/// One iteration: per particle, sample an increment, project, roll
/// out a multi-agent episode, record the fit reward; then update the
/// shared policy with the fast rate from all episodes and the calibrator
/// with the slow rate from all transitions.
#[allow(clippy::too_many_arguments)]
pub fn calsheq_iteration<T, E>(
    env: &E,
    shared: &mut PpoTrainer<T>,
    calibrator: &mut Calibrator<T>,
    particles: &mut [SupertypeProfile<T>],
    targets: &CalibrationTargetSet,
    iteration: usize,
    rate_shared: f64,
    rate_cal: f64,
    root: StreamId,
) -> Result<IterationOutcome>
where
    T: Scalar,
    E: Environment<T, Info = crate::market::MarketInfo<T>> + Sync,
{
    let b_count = particles.len();
    if b_count == 0 {
        return Err(Error::Config("need at least one particle".into()));
    }
    let k = calibrator.cfg.decision_points.max(1);
    let n = env.n_agents();
    let frozen = calibrator.cfg.frozen;
    let cal_policy = calibrator.trainer.policy.clone();
    let shared_policy = shared.policy.clone();
    let bounds = calibrator.bounds.clone();

    let rollouts: Vec<ParticleRollout<T>> = particles
        .par_iter()
        .enumerate()
        .map(|(b, start)| -> Result<ParticleRollout<T>> {
            let mut particle = start.clone();
            let mut episodes = Vec::with_capacity(k);
            let mut transitions = Vec::with_capacity(k);
            let mut evaluations = Vec::with_capacity(k);
            let mut drift_acc = 0.0;
            let mut group_rewards: Vec<(usize, f64)> = Vec::new();
            for d in 0..k {
                let state = particle.free_params();
                let state_norm: Vec<T> = state
                    .iter()
                    .zip(&bounds)
                    .map(|(&v, &(l, h))| if h > l { (v - l) / (h - l) } else { T::zero() })
                    .collect();
                let (raw, action, logprob) = if frozen {
                    (vec![T::zero(); state.len()], vec![T::zero(); state.len()], T::zero())
                } else {
                    let mut rng = root
                        .descend(&[tag::CALIBRATOR, iteration as u64, b as u64, d as u64])
                        .rng();
                    let step = crate::game::ActionPolicy::act(
                        &cal_policy,
                        &state_norm,
                        &[],
                        &mut rng,
                    )?;
                    (step.raw, step.action, step.logprob)
                };
                let proposed: Vec<T> =
                    state.iter().zip(&action).map(|(&x, &dx)| x + dx).collect();
                particle.set_free_params_projected(&proposed);
                let applied = particle.free_params();
                for ((&before, &after), &(l, h)) in
                    state.iter().zip(&applied).zip(&bounds)
                {
                    let span = (h - l).to_f64().max(1e-12);
                    drift_acc += (after - before).abs().to_f64() / span;
                }

                let ctx = EpisodeCtx::new(
                    root,
                    episode_index(iteration, b, d, b_count, k),
                    n,
                );
                let mut e = env.clone();
                let (batch, info) = run_episode(&mut e, &particle, &shared_policy, &ctx)?;
                let eval = evaluate_targets(targets, &info, &particle.assignment);
                for (agent, traj) in batch.agents.iter().enumerate() {
                    let total: f64 = traj.rewards.iter().map(|&r| Scalar::to_f64(r)).sum();
                    group_rewards.push((particle.assignment[agent], total));
                }
                transitions.push(calibrator_transition(
                    &state_norm,
                    &raw,
                    &action,
                    logprob,
                    eval.reward,
                ));
                evaluations.push(eval);
                episodes.push(batch);
            }
            Ok(ParticleRollout {
                episodes,
                transitions,
                evaluations,
                particle,
                drift: drift_acc / (k * bounds.len().max(1)) as f64,
                group_rewards,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // install updated particles
    for (slot, r) in particles.iter_mut().zip(&rollouts) {
        *slot = r.particle.clone();
    }

    // aggregate diagnostics
    let n_targets = targets.targets.len();
    let mut r_values = Vec::new();
    let mut loss_sum = vec![0.0; n_targets];
    let mut obs_sum = vec![0.0; n_targets];
    let mut group_sum: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    let mut drift_sum = 0.0;
    for r in &rollouts {
        drift_sum += r.drift;
        for e in &r.evaluations {
            r_values.push(e.reward);
            for (i, (&l, o)) in e.losses.iter().zip(&e.observed).enumerate() {
                loss_sum[i] += l;
                obs_sum[i] += o.scalar();
            }
        }
        for &(g, total) in &r.group_rewards {
            let slot = group_sum.entry(g).or_insert((0.0, 0));
            slot.0 += total;
            slot.1 += 1;
        }
    }
    let evals = r_values.len() as f64;
    let r_mean = r_values.iter().sum::<f64>() / evals;
    let r_std = (r_values.iter().map(|v| (v - r_mean).powi(2)).sum::<f64>() / evals).sqrt();
    let group_reward_mean: Vec<f64> = group_sum
        .values()
        .map(|&(total, count)| total / count as f64)
        .collect();

    // profile statistics across particles (free dims)
    let dim = calibrator.dim();
    let mut dim_mean = vec![0.0; dim];
    let mut dim_sq = vec![0.0; dim];
    for p in particles.iter() {
        for (j, &v) in p.free_params().iter().enumerate() {
            let x = Scalar::to_f64(v);
            dim_mean[j] += x / b_count as f64;
            dim_sq[j] += x * x / b_count as f64;
        }
    }
    let dim_std: Vec<f64> = dim_mean
        .iter()
        .zip(&dim_sq)
        .map(|(&m, &sq): (&f64, &f64)| (sq - m * m).max(0.0).sqrt())
        .collect();

    // fast-timescale update from all episodes
    let all_episodes: Vec<EpisodeBatch<T>> =
        rollouts.iter().flat_map(|r| r.episodes.iter().cloned()).collect();
    let env_steps: usize =
        all_episodes.iter().map(|e| e.n_agents() * e.horizon()).sum();
    let shared_stats = shared.update(
        &all_episodes,
        root.descend(&[tag::UPDATE, iteration as u64]),
        Some(rate_shared),
    )?;

    // slow-timescale update from all transitions
    let cal_stats = if frozen {
        None
    } else {
        let all_transitions: Vec<EpisodeBatch<T>> =
            rollouts.iter().flat_map(|r| r.transitions.iter().cloned()).collect();
        Some(calibrator.trainer.update(
            &all_transitions,
            root.descend(&[tag::CALIBRATOR, tag::UPDATE, iteration as u64]),
            Some(rate_cal),
        )?)
    };

    Ok(IterationOutcome {
        r_cal_mean: r_mean,
        r_cal_std: r_std,
        per_target_loss_mean: loss_sum.iter().map(|l| l / evals).collect(),
        per_target_observed_mean: obs_sum.iter().map(|o| o / evals).collect(),
        group_reward_mean,
        shared_stats,
        cal_stats,
        drift_mean: drift_sum / b_count as f64,
        profile_dim_mean: dim_mean,
        profile_dim_std: dim_std,
        env_steps,
    })
}
