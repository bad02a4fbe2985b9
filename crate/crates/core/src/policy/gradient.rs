//! The shared policy gradient in its likelihood-ratio (REINFORCE) form,
//! plus a finite-difference gradient checker.
//!
//! `shared_gradient` implements the estimator
//! `(1/n) Σ_i (1/B) Σ_b Σ_t ∇ log π(a|s,λ) Σ_{t'≥t} γ^{t'} r_{t'}`
//! with no baseline. The production trainer is PPO; this form exists so
//! the theory suite can verify it against exact enumeration.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::game::EpisodeBatch;
use crate::scalar::{s, Scalar};

use super::SharedPolicy;

/// Policy with analytically differentiable log-density, the surface the
/// likelihood-ratio gradient and the finite-difference checker need.
pub trait DifferentiablePolicy<T: Scalar> {
    fn param_count(&self) -> usize;
    fn get_params(&self) -> Vec<T>;
    fn set_params(&mut self, params: &[T]);
    /// Log-density of the action identified by `raw` at `(obs, type)`.
    fn log_prob_raw(&self, obs: &[T], ty: &[T], raw: &[T]) -> Result<T>;
    /// Adds `weight * ∇_θ log π(raw | obs, type)` into `acc`.
    fn accumulate_log_prob_grad(
        &self,
        obs: &[T],
        ty: &[T],
        raw: &[T],
        weight: T,
        acc: &mut [T],
    ) -> Result<()>;
}

impl<T: Scalar> DifferentiablePolicy<T> for SharedPolicy<T> {
    fn param_count(&self) -> usize {
        self.param_count()
    }

    fn get_params(&self) -> Vec<T> {
        self.params()
    }

    fn set_params(&mut self, params: &[T]) {
        self.load_params(params);
    }

    fn log_prob_raw(&self, obs: &[T], ty: &[T], raw: &[T]) -> Result<T> {
        SharedPolicy::log_prob_raw(self, obs, ty, raw)
    }

    fn accumulate_log_prob_grad(
        &self,
        obs: &[T],
        ty: &[T],
        raw: &[T],
        weight: T,
        acc: &mut [T],
    ) -> Result<()> {
        let a = self.config().action_dim;
        let mut x = Array2::zeros((1, obs.len() + ty.len()));
        for (j, &v) in obs.iter().chain(ty.iter()).enumerate() {
            x[[0, j]] = v;
        }
        let (mean, log_sigma, raw_head, cache) = self.forward_batch(x.view())?;
        let mut d_mean = Array2::zeros((1, a));
        let mut d_ls = Array2::zeros((1, a));
        for d in 0..a {
            let sigma = log_sigma[[0, d]].exp();
            let zed = (raw[d] - mean[[0, d]]) / sigma;
            d_mean[[0, d]] = weight * zed / sigma;
            d_ls[[0, d]] = weight * (zed * zed - T::one());
        }
        let grad = self.backward_batch(&cache, &raw_head, &d_mean, &d_ls);
        for (slot, g) in acc.iter_mut().zip(crate::nn::Mlp::grad_flatten(&grad)) {
            *slot += g;
        }
        Ok(())
    }
}

/// Default tolerance for the on-policy check: stored log-probabilities
/// must match a recomputation under the current parameters this closely.
pub const ON_POLICY_TOL: f64 = 1e-6;

/// REINFORCE-form shared gradient over a set of episodes.
///
/// Rejects batches whose stored log-probabilities no longer match the
/// policy (an off-policy batch).
pub fn shared_gradient<T: Scalar, P: DifferentiablePolicy<T>>(
    policy: &P,
    episodes: &[EpisodeBatch<T>],
) -> Result<Vec<T>> {
    if episodes.is_empty() {
        return Err(Error::Config("shared_gradient needs at least one episode".into()));
    }
    let mut grad = vec![T::zero(); policy.param_count()];
    let b_count = episodes.len();
    let mut max_dev = 0.0f64;

    for batch in episodes {
        let n = batch.n_agents();
        let horizon = batch.horizon();
        let scale = s::<T>(1.0 / (n as f64 * b_count as f64));
        for (agent, traj) in batch.agents.iter().enumerate() {
            // suffix sums of gamma^{t'} r_{t'} (discount from episode start)
            let mut weights = vec![T::zero(); horizon];
            let mut acc = T::zero();
            for t in (0..horizon).rev() {
                let gt = batch.discount.powi(t as i32);
                acc = acc + gt * traj.rewards[t];
                weights[t] = acc;
            }
            for t in 0..horizon {
                let obs: Vec<T> = traj.obs.row(t).to_vec();
                let raw: Vec<T> = traj.raw_actions.row(t).to_vec();
                let ty = &batch.types[agent].values;
                let lp = policy.log_prob_raw(&obs, ty, &raw)?;
                let dev = (lp - traj.logprobs[t]).abs().to_f64();
                max_dev = max_dev.max(dev);
                if dev > ON_POLICY_TOL {
                    return Err(Error::OffPolicy { max_dev: dev, tol: ON_POLICY_TOL });
                }
                policy.accumulate_log_prob_grad(&obs, ty, &raw, weights[t] * scale, &mut grad)?;
            }
        }
    }
    Ok(grad)
}

/// Report from [`finite_difference_gradient_check`].
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked_params: usize,
}

/// A frozen `(obs, type, raw action)` triple to differentiate at.
#[derive(Debug, Clone)]
pub struct FdSample<T> {
    pub obs: Vec<T>,
    pub ty: Vec<T>,
    pub raw: Vec<T>,
}

/// Compares the analytic `∇_θ Σ_k log π(raw_k | obs_k, ty_k)` against
/// central finite differences, parameter-wise.
///
/// `param_indices` selects which parameters to probe (all when `None`).
/// The relative error uses `max(|analytic|, |fd|, 1)` as denominator so
/// untouched parameters with exact zeros compare cleanly.
pub fn finite_difference_gradient_check<T, P>(
    policy: &mut P,
    samples: &[FdSample<T>],
    epsilon: f64,
    param_indices: Option<&[usize]>,
) -> Result<FdReport>
where
    T: Scalar,
    P: DifferentiablePolicy<T>,
{
    let mut analytic = vec![T::zero(); policy.param_count()];
    for smp in samples {
        policy.accumulate_log_prob_grad(&smp.obs, &smp.ty, &smp.raw, T::one(), &mut analytic)?;
    }
    let objective = |p: &P| -> Result<f64> {
        let mut total = 0.0;
        for smp in samples {
            total += p.log_prob_raw(&smp.obs, &smp.ty, &smp.raw)?.to_f64();
        }
        Ok(total)
    };

    let base = policy.get_params();
    let all: Vec<usize>;
    let indices: &[usize] = match param_indices {
        Some(ix) => ix,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };

    let mut max_rel = 0.0f64;
    let mut work = base.clone();
    for &i in indices {
        let x0 = base[i].to_f64();
        work[i] = s(x0 + epsilon);
        policy.set_params(&work);
        let plus = objective(policy)?;
        work[i] = s(x0 - epsilon);
        policy.set_params(&work);
        let minus = objective(policy)?;
        work[i] = base[i];
        let fd = (plus - minus) / (2.0 * epsilon);
        let g = analytic[i].to_f64();
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    policy.set_params(&base);
    Ok(FdReport { max_rel_error: max_rel, checked_params: indices.len() })
}
