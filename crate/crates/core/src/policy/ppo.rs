//! Proximal Policy Optimization with a clipped surrogate and an adaptive
//! KL penalty, over the shared policy and its separate value baseline.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::game::EpisodeBatch;
use crate::nn::Adam;
use crate::rng::StreamId;
use crate::scalar::{s, Scalar};

use super::{SharedPolicy, ValueHead};

/// PPO hyperparameters.
#[derive(Debug, Clone)]
pub struct PpoConfig {
    /// Surrogate clip parameter.
    pub clip: f64,
    /// Adaptive KL penalty target.
    pub kl_target: f64,
    /// Initial KL penalty coefficient.
    pub initial_kl_coef: f64,
    /// Base learning rate (overridable per update for schedules).
    pub learning_rate: f64,
    /// SGD epochs over the batch per update.
    pub sgd_iters: usize,
    pub minibatch_size: usize,
    /// Discount used for returns/advantages.
    pub gamma: f64,
    /// GAE lambda; 1.0 recovers plain returns minus baseline.
    pub gae_lambda: f64,
    /// Entropy bonus coefficient; off by default.
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.3,
            kl_target: 0.01,
            initial_kl_coef: 0.2,
            learning_rate: 1e-4,
            sgd_iters: 30,
            minibatch_size: 128,
            gamma: 1.0,
            gae_lambda: 1.0,
            entropy_coef: 0.0,
            normalize_advantages: true,
        }
    }
}

/// Diagnostics of one PPO update.
#[derive(Debug, Clone)]
pub struct UpdateStats {
    /// Mean KL(old || new) over the batch after the update.
    pub kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Mean pre-squash Gaussian entropy after the update.
    pub entropy: f64,
    /// KL penalty coefficient after adaptation.
    pub kl_coef: f64,
    pub samples: usize,
}

/// Trainer owning the policy, its baseline and both optimizers.
#[derive(Debug, Clone)]
pub struct PpoTrainer<T> {
    pub policy: SharedPolicy<T>,
    pub value: ValueHead<T>,
    pub config: PpoConfig,
    policy_opt: Adam<T>,
    value_opt: Adam<T>,
    kl_coef: T,
}

struct FlatBatch<T> {
    x: Array2<T>,
    raw: Array2<T>,
    old_logprob: Array1<T>,
    advantages: Array1<T>,
    value_targets: Array1<T>,
}

impl<T: Scalar> PpoTrainer<T> {
    pub fn new(policy: SharedPolicy<T>, value: ValueHead<T>, config: PpoConfig) -> Self {
        let policy_opt = Adam::new(policy.param_count());
        let value_opt = Adam::new(value.param_count());
        let kl_coef = s(config.initial_kl_coef);
        PpoTrainer { policy, value, config, policy_opt, value_opt, kl_coef }
    }

    pub fn kl_coef(&self) -> f64 {
        self.kl_coef.to_f64()
    }

    pub fn set_kl_coef(&mut self, coef: f64) {
        self.kl_coef = s(coef);
    }

    pub fn optimizer_state(&self) -> (&Adam<T>, &Adam<T>) {
        (&self.policy_opt, &self.value_opt)
    }

    pub fn optimizer_state_mut(&mut self) -> (&mut Adam<T>, &mut Adam<T>) {
        (&mut self.policy_opt, &mut self.value_opt)
    }

    /// Flattens episodes into sample rows and computes GAE advantages and
    /// value targets with the pre-update baseline.
    fn flatten(&self, episodes: &[EpisodeBatch<T>]) -> Result<FlatBatch<T>> {
        let total: usize = episodes.iter().map(|b| b.n_agents() * b.horizon()).sum();
        if total == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let obs_dim = self.policy.config().obs_dim;
        let type_dim = self.policy.config().type_dim;
        let act_dim = self.policy.config().action_dim;
        let gamma = s::<T>(self.config.gamma);
        let lambda = s::<T>(self.config.gae_lambda);

        let mut x = Array2::zeros((total, obs_dim + type_dim));
        let mut raw = Array2::zeros((total, act_dim));
        let mut old_logprob = Array1::zeros(total);
        let mut advantages = Array1::zeros(total);
        let mut value_targets = Array1::zeros(total);

        let mut row = 0;
        for batch in episodes {
            let horizon = batch.horizon();
            for (agent, traj) in batch.agents.iter().enumerate() {
                let base = row;
                for t in 0..horizon {
                    for j in 0..obs_dim {
                        x[[row, j]] = traj.obs[[t, j]];
                    }
                    for (j, &v) in batch.types[agent].values.iter().enumerate() {
                        x[[row, obs_dim + j]] = v;
                    }
                    for j in 0..act_dim {
                        raw[[row, j]] = traj.raw_actions[[t, j]];
                    }
                    old_logprob[row] = traj.logprobs[t];
                    row += 1;
                }
                // baseline values for this trajectory
                let xs = x.slice(ndarray::s![base..base + horizon, ..]);
                let values = self.value.values(xs);
                let mut gae = T::zero();
                for t in (0..horizon).rev() {
                    let next_v = if t + 1 < horizon { values[t + 1] } else { T::zero() };
                    let delta = traj.rewards[t] + gamma * next_v - values[t];
                    gae = delta + gamma * lambda * gae;
                    advantages[base + t] = gae;
                    value_targets[base + t] = gae + values[t];
                }
            }
        }

        if self.config.normalize_advantages && total > 1 {
            let mean = advantages.sum() / s(total as f64);
            let var = advantages.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>()
                / s(total as f64);
            let std = var.sqrt().max(s(1e-8));
            advantages.mapv_inplace(|a| (a - mean) / std);
        }

        Ok(FlatBatch { x, raw, old_logprob, advantages, value_targets })
    }

    /// One PPO update from a set of on-policy episodes.
    ///
    /// `update_stream` seeds minibatch shuffling; `lr_override` lets a
    /// schedule drive the step size. Reports mean KL(old‖new) and adapts
    /// the KL coefficient (doubled above 2x target, halved below half).
    pub fn update(
        &mut self,
        episodes: &[EpisodeBatch<T>],
        update_stream: StreamId,
        lr_override: Option<f64>,
    ) -> Result<UpdateStats> {
        let flat = self.flatten(episodes)?;
        let n = flat.x.nrows();
        let act_dim = self.policy.config().action_dim;
        let lr = s::<T>(lr_override.unwrap_or(self.config.learning_rate));
        let clip = s::<T>(self.config.clip);
        let ent_coef = s::<T>(self.config.entropy_coef);

        // distribution under the pre-update parameters
        let (old_mean, old_ls, _, _) = self.policy.forward_batch(flat.x.view())?;

        let mut indices: Vec<usize> = (0..n).collect();
        let mut policy_loss_last = 0.0;
        let mut value_loss_last = 0.0;

        for epoch in 0..self.config.sgd_iters {
            let mut rng = update_stream.child(epoch as u64).rng();
            indices.shuffle(&mut rng);
            for mb in indices.chunks(self.config.minibatch_size.max(1)) {
                let m = mb.len();
                let minv = s::<T>(1.0 / m as f64);
                let mut xb = Array2::zeros((m, flat.x.ncols()));
                for (r, &i) in mb.iter().enumerate() {
                    xb.row_mut(r).assign(&flat.x.row(i));
                }

                // ---- policy ----
                let (mean, ls, raw_head, cache) = self.policy.forward_batch(xb.view())?;
                let mut d_mean = Array2::zeros((m, act_dim));
                let mut d_ls = Array2::zeros((m, act_dim));
                let mut surr_sum = T::zero();
                let mut kl_sum = T::zero();
                for (r, &i) in mb.iter().enumerate() {
                    // gaussian part of the new log-prob of the stored raw
                    // action; squash corrections cancel in the ratio
                    let mut lp_new = T::zero();
                    for d in 0..act_dim {
                        let sigma = ls[[r, d]].exp();
                        let u = flat.raw[[i, d]];
                        let zed = (u - mean[[r, d]]) / sigma;
                        lp_new = lp_new
                            - s::<T>(0.5) * zed * zed
                            - ls[[r, d]]
                            - s(0.5 * super::LN_2PI);
                    }
                    let mut lp_old_gauss = T::zero();
                    for d in 0..act_dim {
                        let sigma = old_ls[[i, d]].exp();
                        let u = flat.raw[[i, d]];
                        let zed = (u - old_mean[[i, d]]) / sigma;
                        lp_old_gauss = lp_old_gauss
                            - s::<T>(0.5) * zed * zed
                            - old_ls[[i, d]]
                            - s(0.5 * super::LN_2PI);
                    }
                    let diff = (lp_new - lp_old_gauss).max(s(-30.0)).min(s(30.0));
                    let ratio = diff.exp();
                    let adv = flat.advantages[i];

                    let unclipped = ratio * adv;
                    let clipped = ratio.max(T::one() - clip).min(T::one() + clip) * adv;
                    let surr = unclipped.min(clipped);
                    surr_sum += surr;
                    // gradient flows through the unclipped branch only when
                    // it is the active minimum
                    let active = if unclipped <= clipped { adv * ratio } else { T::zero() };

                    let mut kl = T::zero();
                    for d in 0..act_dim {
                        let s_old = old_ls[[i, d]].exp();
                        let s_new = ls[[r, d]].exp();
                        let dm = old_mean[[i, d]] - mean[[r, d]];
                        kl = kl + ls[[r, d]] - old_ls[[i, d]]
                            + (s_old * s_old + dm * dm) / (s::<T>(2.0) * s_new * s_new)
                            - s(0.5);
                    }
                    kl_sum += kl;

                    for d in 0..act_dim {
                        let sigma = ls[[r, d]].exp();
                        let sigma_sq = sigma * sigma;
                        let u = flat.raw[[i, d]];
                        let zed = (u - mean[[r, d]]) / sigma;
                        // d lp_new / d mean, d lp_new / d log_sigma
                        let dlp_dmean = zed / sigma;
                        let dlp_dls = zed * zed - T::one();
                        // loss = -surr + kl_coef*KL - ent_coef*H  (dH/dls = 1)
                        let s_old = old_ls[[i, d]].exp();
                        let dm = mean[[r, d]] - old_mean[[i, d]];
                        let dkl_dmean = dm / sigma_sq;
                        let dkl_dls = T::one() - (s_old * s_old + dm * dm) / sigma_sq;
                        d_mean[[r, d]] =
                            (-active * dlp_dmean + self.kl_coef * dkl_dmean) * minv;
                        d_ls[[r, d]] = (-active * dlp_dls + self.kl_coef * dkl_dls
                            - ent_coef)
                            * minv;
                    }
                }
                let grad = self.policy.backward_batch(&cache, &raw_head, &d_mean, &d_ls);
                let loss_val =
                    (-surr_sum * minv + self.kl_coef * kl_sum * minv).to_f64();
                if !loss_val.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "ppo policy loss at epoch {epoch} (kl_coef {})",
                        self.kl_coef.to_f64()
                    )));
                }
                policy_loss_last = loss_val;
                self.policy_opt.step(self.policy.net_mut(), &grad, lr);

                // ---- value ----
                let (v_out, v_cache) = self.value.net().forward(xb.view());
                let mut d_v = Array2::zeros((m, 1));
                let mut v_loss = T::zero();
                for (r, &i) in mb.iter().enumerate() {
                    let err = v_out[[r, 0]] - flat.value_targets[i];
                    v_loss += s::<T>(0.5) * err * err;
                    d_v[[r, 0]] = err * minv;
                }
                let v_loss_val = (v_loss * minv).to_f64();
                if !v_loss_val.is_finite() {
                    return Err(Error::NonFinite(format!("value loss at epoch {epoch}")));
                }
                value_loss_last = v_loss_val;
                let v_grad = self.value.net().backward(&v_cache, d_v.view());
                self.value_opt.step(self.value.net_mut(), &v_grad, lr);
            }
        }

        // final KL and entropy over the whole batch
        let (mean, ls, _, _) = self.policy.forward_batch(flat.x.view())?;
        let mut kl_total = T::zero();
        let mut ent_total = T::zero();
        for i in 0..n {
            for d in 0..act_dim {
                let s_old = old_ls[[i, d]].exp();
                let s_new = ls[[i, d]].exp();
                let dm = old_mean[[i, d]] - mean[[i, d]];
                kl_total = kl_total + ls[[i, d]] - old_ls[[i, d]]
                    + (s_old * s_old + dm * dm) / (s::<T>(2.0) * s_new * s_new)
                    - s(0.5);
                ent_total = ent_total + ls[[i, d]] + s(0.5 * (super::LN_2PI + 1.0));
            }
        }
        let kl = (kl_total / s(n as f64)).to_f64();
        if !kl.is_finite() {
            return Err(Error::NonFinite("post-update KL".into()));
        }

        if kl > 2.0 * self.config.kl_target {
            self.kl_coef = self.kl_coef * s(2.0);
        } else if kl < self.config.kl_target / 2.0 {
            self.kl_coef = self.kl_coef * s(0.5);
        }

        Ok(UpdateStats {
            kl,
            policy_loss: policy_loss_last,
            value_loss: value_loss_last,
            entropy: (ent_total / s(n as f64)).to_f64(),
            kl_coef: self.kl_coef.to_f64(),
            samples: n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{ActionPolicy, AgentTrajectory, AgentType, Supertype, SupertypeProfile};
    use crate::policy::PolicyConfig;
    use ndarray::{Array1, Array2};

    fn bandit_policy(seed: u64) -> (SharedPolicy<f64>, ValueHead<f64>) {
        let cfg = PolicyConfig::new(1, 0, vec![0.0], vec![1.0])
            .with_hidden(vec![32, 32])
            .with_init_sigma(0.4);
        let p = SharedPolicy::new(cfg, StreamId::root(seed).child(1));
        let v = ValueHead::new(1, 0, &[32, 32], StreamId::root(seed).child(2));
        (p, v)
    }

    fn bandit_episodes(
        policy: &SharedPolicy<f64>,
        iter: usize,
        count: usize,
    ) -> Vec<EpisodeBatch<f64>> {
        let profile =
            SupertypeProfile::new(vec![0], vec![Supertype::new(vec![], vec![])]);
        (0..count)
            .map(|b| {
                let mut rng = StreamId::root(909)
                    .descend(&[iter as u64, b as u64])
                    .rng();
                let obs = vec![0.0];
                let step = policy.act(&obs, &[], &mut rng).unwrap();
                let reward = -(step.action[0] - 0.5).powi(2);
                EpisodeBatch {
                    agents: vec![AgentTrajectory {
                        obs: Array2::from_shape_vec((1, 1), obs).unwrap(),
                        actions: Array2::from_shape_vec((1, 1), step.action.clone())
                            .unwrap(),
                        raw_actions: Array2::from_shape_vec((1, 1), step.raw.clone())
                            .unwrap(),
                        rewards: Array1::from_vec(vec![reward]),
                        logprobs: Array1::from_vec(vec![step.logprob]),
                    }],
                    types: vec![AgentType { values: vec![] }],
                    profile: profile.clone(),
                    discount: 1.0,
                }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_changes_nothing_and_kl_is_zero() {
        let (policy, value) = bandit_policy(4);
        let mut trainer = PpoTrainer::new(policy, value, PpoConfig::default());
        let before = trainer.policy.params();
        let episodes = bandit_episodes(&trainer.policy, 0, 32);
        let stats = trainer
            .update(&episodes, StreamId::root(5), Some(0.0))
            .unwrap();
        assert_eq!(trainer.policy.params(), before);
        assert_eq!(stats.kl, 0.0);
    }

    #[test]
    fn bandit_reaches_analytic_optimum_within_200_iterations() {
        let (policy, value) = bandit_policy(8);
        let cfg = PpoConfig {
            learning_rate: 5e-3,
            sgd_iters: 8,
            minibatch_size: 64,
            ..PpoConfig::default()
        };
        let mut trainer = PpoTrainer::new(policy, value, cfg);
        let mut reached_at = None;
        for iter in 0..200 {
            let episodes = bandit_episodes(&trainer.policy, iter, 64);
            trainer
                .update(&episodes, StreamId::root(6).child(iter as u64), None)
                .unwrap();
            let mode = trainer.policy.mean_action(&[0.0], &[]).unwrap()[0];
            if (mode - 0.5).abs() <= 0.05 && reached_at.is_none() {
                reached_at = Some(iter);
            }
        }
        let mode = trainer.policy.mean_action(&[0.0], &[]).unwrap()[0];
        assert!(
            (mode - 0.5).abs() <= 0.05,
            "mode {mode} after 200 iterations (first hit {reached_at:?})"
        );
    }

    #[test]
    fn kl_coefficient_adapts_on_large_updates() {
        let (policy, value) = bandit_policy(10);
        let cfg = PpoConfig {
            learning_rate: 5e-2,
            sgd_iters: 20,
            minibatch_size: 32,
            initial_kl_coef: 0.2,
            ..PpoConfig::default()
        };
        let mut trainer = PpoTrainer::new(policy, value, cfg);
        let episodes = bandit_episodes(&trainer.policy, 0, 64);
        let stats = trainer.update(&episodes, StreamId::root(7), None).unwrap();
        if stats.kl > 0.02 {
            assert!(stats.kl_coef > 0.2);
        } else if stats.kl < 0.005 {
            assert!(stats.kl_coef < 0.2);
        }
    }
}
