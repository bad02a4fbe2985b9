//! The shared stochastic policy π(a|s,λ) and its value baseline.
//!
//! One network serves every agent: input is the concatenation of the local
//! observation and the agent's type vector; output is the mean and (raw)
//! per-dimension log-stdev of a diagonal Gaussian. Samples are squashed
//! into the declared action box by tanh, and log-probabilities carry the
//! exact change-of-variables correction, so the reported density is the
//! density of the environment-space action.

mod gradient;
mod ppo;

pub use gradient::{finite_difference_gradient_check, shared_gradient, DifferentiablePolicy};
pub use ppo::{PpoConfig, PpoTrainer, UpdateStats};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::game::{ActionPolicy, PolicyStep};
use crate::nn::{ForwardCache, Mlp, MlpGrad};
use crate::rng::StreamId;
use crate::scalar::{s, Scalar};

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Architecture and squashing parameters of a [`SharedPolicy`].
#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub type_dim: usize,
    pub action_dim: usize,
    /// Hidden layer widths; two layers of 256 by default.
    pub hidden: Vec<usize>,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    /// Stdev bounds; keeps the density valid and entropy finite.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Initial stdev (set through the log-stdev head bias).
    pub init_sigma: f64,
}

impl PolicyConfig {
    pub fn new(obs_dim: usize, type_dim: usize, low: Vec<f64>, high: Vec<f64>) -> Self {
        assert_eq!(low.len(), high.len());
        PolicyConfig {
            obs_dim,
            type_dim,
            action_dim: low.len(),
            hidden: vec![256, 256],
            action_low: low,
            action_high: high,
            sigma_min: 1e-3,
            sigma_max: 1.0,
            init_sigma: 0.3,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_init_sigma(mut self, sigma: f64) -> Self {
        self.init_sigma = sigma;
        self
    }

    fn input_dim(&self) -> usize {
        self.obs_dim + self.type_dim
    }
}

/// Diagonal-Gaussian policy with tanh squashing into the action box.
#[derive(Debug, Clone)]
pub struct SharedPolicy<T> {
    net: Mlp<T>,
    cfg: PolicyConfig,
    mid: Array1<T>,
    half: Array1<T>,
    log_sig_lo: T,
    log_sig_span: T,
}

/// Mean and log-stdev of the pre-squash Gaussian at one input.
#[derive(Debug, Clone)]
pub struct DistParams<T> {
    pub mean: Vec<T>,
    pub log_sigma: Vec<T>,
}

impl<T: Scalar> SharedPolicy<T> {
    pub fn new(cfg: PolicyConfig, stream: StreamId) -> Self {
        let mut sizes = vec![cfg.input_dim()];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(2 * cfg.action_dim);
        let mut net = Mlp::new(&sizes, stream, 0.01);
        let log_lo = cfg.sigma_min.ln();
        let log_hi = cfg.sigma_max.ln();
        // pick the raw-head bias so that sigma starts at init_sigma
        let frac = ((cfg.init_sigma.ln() - log_lo) / (log_hi - log_lo)).clamp(1e-6, 1.0 - 1e-6);
        let bias = (2.0 * frac - 1.0).atanh();
        for d in 0..cfg.action_dim {
            net.nudge_output_bias(cfg.action_dim + d, s(bias));
        }
        let mid = Array1::from_iter(
            cfg.action_low
                .iter()
                .zip(&cfg.action_high)
                .map(|(&lo, &hi)| s::<T>(0.5 * (lo + hi))),
        );
        let half = Array1::from_iter(
            cfg.action_low
                .iter()
                .zip(&cfg.action_high)
                .map(|(&lo, &hi)| s::<T>(0.5 * (hi - lo))),
        );
        SharedPolicy {
            net,
            mid,
            half,
            log_sig_lo: s(log_lo),
            log_sig_span: s(log_hi - log_lo),
            cfg,
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn params(&self) -> Vec<T> {
        self.net.flatten()
    }

    pub fn load_params(&mut self, params: &[T]) {
        self.net.load_flat(params);
    }

    #[inline]
    fn log_sigma_of_raw(&self, v: T) -> T {
        self.log_sig_lo + self.log_sig_span * (v.tanh() + T::one()) * s(0.5)
    }

    /// d(log sigma)/d(raw head output); chain-rule factor for backprop.
    #[inline]
    fn dlog_sigma_draw(&self, v: T) -> T {
        let th = v.tanh();
        self.log_sig_span * s::<T>(0.5) * (T::one() - th * th)
    }

    fn input_vec(&self, obs: &[T], ty: &[T]) -> Array1<T> {
        debug_assert_eq!(obs.len(), self.cfg.obs_dim);
        debug_assert_eq!(ty.len(), self.cfg.type_dim);
        let mut x = Array1::zeros(obs.len() + ty.len());
        for (i, &v) in obs.iter().chain(ty.iter()).enumerate() {
            x[i] = v;
        }
        x
    }

    /// Gaussian parameters at `(obs, type)`.
    pub fn dist_params(&self, obs: &[T], ty: &[T]) -> Result<DistParams<T>> {
        let out = self.net.forward_one(self.input_vec(obs, ty).view());
        let a = self.cfg.action_dim;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy network output".into()));
        }
        Ok(DistParams {
            mean: out.iter().take(a).copied().collect(),
            log_sigma: out.iter().skip(a).map(|&v| self.log_sigma_of_raw(v)).collect(),
        })
    }

    /// Squashes a pre-squash sample into the action box.
    pub fn squash(&self, raw: &[T]) -> Vec<T> {
        raw.iter()
            .enumerate()
            .map(|(d, &u)| self.mid[d] + self.half[d] * u.tanh())
            .collect()
    }

    /// Deterministic action: the squashed Gaussian mean.
    pub fn mean_action(&self, obs: &[T], ty: &[T]) -> Result<Vec<T>> {
        let p = self.dist_params(obs, ty)?;
        Ok(self.squash(&p.mean))
    }

    /// Log-density of the *squashed* action identified by its pre-squash
    /// value `raw`.
    pub fn log_prob_raw(&self, obs: &[T], ty: &[T], raw: &[T]) -> Result<T> {
        let p = self.dist_params(obs, ty)?;
        Ok(self.log_prob_given(&p, raw))
    }

    fn log_prob_given(&self, p: &DistParams<T>, raw: &[T]) -> T {
        let mut lp = T::zero();
        for d in 0..self.cfg.action_dim {
            let sigma = p.log_sigma[d].exp();
            let zed = (raw[d] - p.mean[d]) / sigma;
            lp = lp - s::<T>(0.5) * zed * zed - p.log_sigma[d] - s(0.5 * LN_2PI);
            lp = lp - self.half[d].ln() - log1m_tanh_sq(raw[d]);
        }
        lp
    }

    /// Log-density of the pre-squash Gaussian itself (no squash
    /// correction); the Monte-Carlo entropy oracle integrates this.
    pub fn gaussian_log_prob(&self, obs: &[T], ty: &[T], raw: &[T]) -> Result<T> {
        let p = self.dist_params(obs, ty)?;
        let mut lp = T::zero();
        for d in 0..self.cfg.action_dim {
            let sigma = p.log_sigma[d].exp();
            let zed = (raw[d] - p.mean[d]) / sigma;
            lp = lp - s::<T>(0.5) * zed * zed - p.log_sigma[d] - s(0.5 * LN_2PI);
        }
        Ok(lp)
    }

    /// Analytic entropy of the pre-squash Gaussian.
    pub fn gaussian_entropy(&self, obs: &[T], ty: &[T]) -> Result<T> {
        let p = self.dist_params(obs, ty)?;
        let mut h = T::zero();
        for d in 0..self.cfg.action_dim {
            h = h + p.log_sigma[d] + s(0.5 * (LN_2PI + 1.0));
        }
        Ok(h)
    }

    /// Batched distribution parameters for PPO: rows of `x` are
    /// `concat(obs, type)`. Returns `(mean, log_sigma, raw_head, cache)`.
    pub(crate) fn forward_batch(
        &self,
        x: ArrayView2<T>,
    ) -> Result<(Array2<T>, Array2<T>, Array2<T>, ForwardCache<T>)> {
        let (out, cache) = self.net.forward(x);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy network output".into()));
        }
        let a = self.cfg.action_dim;
        let mean = out.slice(ndarray::s![.., ..a]).to_owned();
        let raw = out.slice(ndarray::s![.., a..]).to_owned();
        let log_sigma = raw.mapv(|v| self.log_sigma_of_raw(v));
        Ok((mean, log_sigma, raw, cache))
    }

    /// Backprop through the batched forward: `d_mean` and `d_log_sigma`
    /// are gradients w.r.t. the distribution parameters.
    pub(crate) fn backward_batch(
        &self,
        cache: &ForwardCache<T>,
        raw_head: &Array2<T>,
        d_mean: &Array2<T>,
        d_log_sigma: &Array2<T>,
    ) -> MlpGrad<T> {
        let (n, a) = d_mean.dim();
        let mut grad_out = Array2::zeros((n, 2 * a));
        for i in 0..n {
            for d in 0..a {
                grad_out[[i, d]] = d_mean[[i, d]];
                grad_out[[i, a + d]] =
                    d_log_sigma[[i, d]] * self.dlog_sigma_draw(raw_head[[i, d]]);
            }
        }
        self.net.backward(cache, grad_out.view())
    }

    pub(crate) fn net_mut(&mut self) -> &mut Mlp<T> {
        &mut self.net
    }

    pub(crate) fn net(&self) -> &Mlp<T> {
        &self.net
    }
}

impl<T: Scalar> ActionPolicy<T> for SharedPolicy<T> {
    fn obs_dim(&self) -> usize {
        self.cfg.obs_dim
    }
    fn type_dim(&self) -> usize {
        self.cfg.type_dim
    }
    fn action_dim(&self) -> usize {
        self.cfg.action_dim
    }

    fn act(&self, obs: &[T], ty: &[T], rng: &mut ChaCha12Rng) -> Result<PolicyStep<T>> {
        let p = self.dist_params(obs, ty)?;
        let mut raw = Vec::with_capacity(self.cfg.action_dim);
        for d in 0..self.cfg.action_dim {
            let z = T::standard_normal(rng);
            raw.push(p.mean[d] + p.log_sigma[d].exp() * z);
        }
        let action = self.squash(&raw);
        let logprob = self.log_prob_given(&p, &raw);
        if !logprob.is_finite() {
            return Err(Error::NonFinite("action log-probability".into()));
        }
        Ok(PolicyStep { action, raw, logprob })
    }
}

/// Numerically stable `ln(1 - tanh(u)^2) = ln 4 - 2u - 2 softplus(-2u)`.
#[inline]
pub(crate) fn log1m_tanh_sq<T: Scalar>(u: T) -> T {
    let two = s::<T>(2.0);
    s::<T>(4.0f64.ln()) - two * u - two * softplus(-two * u)
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (T::one() + (-x).exp()).ln()
    } else {
        (T::one() + x.exp()).ln()
    }
}

/// Value baseline V(s, λ): same network family, scalar output.
#[derive(Debug, Clone)]
pub struct ValueHead<T> {
    net: Mlp<T>,
    input_dim: usize,
}

impl<T: Scalar> ValueHead<T> {
    pub fn new(obs_dim: usize, type_dim: usize, hidden: &[usize], stream: StreamId) -> Self {
        let mut sizes = vec![obs_dim + type_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        ValueHead { net: Mlp::new(&sizes, stream, 1.0), input_dim: obs_dim + type_dim }
    }

    pub fn value(&self, x: ArrayView1<T>) -> T {
        self.net.forward_one(x)[0]
    }

    /// Batched values for rows of `x`.
    pub fn values(&self, x: ArrayView2<T>) -> Array1<T> {
        let (out, _) = self.net.forward(x);
        out.column(0).to_owned()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn params(&self) -> Vec<T> {
        self.net.flatten()
    }

    pub fn load_params(&mut self, params: &[T]) {
        self.net.load_flat(params);
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub(crate) fn net(&self) -> &Mlp<T> {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut Mlp<T> {
        &mut self.net
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn policy(init_sigma: f64) -> SharedPolicy<f64> {
        let cfg = PolicyConfig::new(2, 1, vec![-1.0, 0.0], vec![1.0, 1.0])
            .with_hidden(vec![16, 16])
            .with_init_sigma(init_sigma);
        SharedPolicy::new(cfg, StreamId::root(31))
    }

    #[test]
    fn zero_parameters_give_squashed_zero_mean_for_all_inputs() {
        let mut p = policy(0.3);
        let zeros = vec![0.0; p.param_count()];
        p.load_params(&zeros);
        let a = p.mean_action(&[0.4, -0.2], &[0.7]).unwrap();
        let b = p.mean_action(&[-3.0, 1.0], &[0.0]).unwrap();
        assert_eq!(a, b);
        // squash(0) is the box midpoint
        assert_eq!(a, vec![0.0, 0.5]);
    }

    #[test]
    fn identical_inputs_and_streams_give_identical_actions() {
        let p = policy(0.3);
        let stream = StreamId::root(5).child(77);
        let mut r1 = stream.rng();
        let mut r2 = stream.rng();
        let a = p.act(&[0.1, 0.2], &[0.3], &mut r1).unwrap();
        let b = p.act(&[0.1, 0.2], &[0.3], &mut r2).unwrap();
        assert_eq!(a.action, b.action);
        assert_eq!(a.logprob, b.logprob);
    }

    #[test]
    fn actions_stay_inside_bounds_and_logprob_finite() {
        let p = policy(0.9);
        let mut rng = StreamId::root(6).rng();
        for _ in 0..500 {
            let step = p.act(&[0.0, 0.0], &[0.5], &mut rng).unwrap();
            assert!(step.action[0] >= -1.0 && step.action[0] <= 1.0);
            assert!(step.action[1] >= 0.0 && step.action[1] <= 1.0);
            assert!(step.logprob.is_finite());
        }
    }

    #[test]
    fn sigma_respects_configured_bounds() {
        let p = policy(0.3);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..100 {
            let obs = [rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0];
            let d = p.dist_params(&obs, &[rng.gen::<f64>()]).unwrap();
            for &ls in &d.log_sigma {
                let sigma = ls.exp();
                assert!(sigma >= 1e-3 - 1e-12 && sigma <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn init_sigma_is_honored() {
        let p = policy(0.3);
        let d = p.dist_params(&[0.0, 0.0], &[0.0]).unwrap();
        // final layer weights are small-scaled, so sigma starts near init
        for &ls in &d.log_sigma {
            assert!((ls.exp() - 0.3).abs() < 0.02, "sigma {}", ls.exp());
        }
    }

    #[test]
    fn density_integrates_to_one_on_1d_fixture() {
        // Riemann integration of exp(log_prob) over the action box.
        let cfg = PolicyConfig::new(1, 1, vec![-2.0], vec![3.0])
            .with_hidden(vec![8])
            .with_init_sigma(0.5);
        let p = SharedPolicy::<f64>::new(cfg, StreamId::root(8));
        let obs = [0.3];
        let ty = [0.6];
        let n = 40_000;
        let (lo, hi) = (-2.0 + 1e-9, 3.0 - 1e-9);
        let da = (hi - lo) / n as f64;
        let mut mass = 0.0;
        for k in 0..n {
            let a: f64 = lo + (k as f64 + 0.5) * da;
            // invert the squash to evaluate the density at action a
            let u = ((a - 0.5) / 2.5).atanh();
            let lp = p.log_prob_raw(&obs, &ty, &[u]).unwrap();
            mass += lp.exp() * da;
        }
        assert!((mass - 1.0).abs() < 0.01, "mass {mass}");
    }

    #[test]
    fn sampled_logprob_matches_analytic_gaussian_entropy() {
        // E[-log N(u)] over u ~ N equals the analytic Gaussian entropy.
        let p = policy(0.4);
        let obs = [0.2, -0.1];
        let ty = [0.5];
        let h_analytic = p.gaussian_entropy(&obs, &ty).unwrap();
        let mut rng = StreamId::root(400).rng();
        let n = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let step = p.act(&obs, &ty, &mut rng).unwrap();
            let lp = p.gaussian_log_prob(&obs, &ty, &step.raw).unwrap();
            sum += -lp;
            sum_sq += lp * lp;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let stderr = (var / n as f64).sqrt();
        assert!(
            (mean - h_analytic).abs() < 3.0 * stderr + 1e-9,
            "mc {mean} vs analytic {h_analytic} (stderr {stderr})"
        );
    }

    #[test]
    fn non_finite_network_output_is_a_hard_failure() {
        let mut p = policy(0.3);
        let mut params = p.params();
        params[0] = f64::NAN;
        p.load_params(&params);
        assert!(p.dist_params(&[1.0, 1.0], &[1.0]).is_err());
    }
}
