//! [`Environment`] implementation of the merchant market.

use crate::error::{Error, Result};
use crate::game::{AgentType, Environment, StepOutcome, SupertypeProfile};
use crate::rng::{tag, EpisodeCtx};
use crate::scalar::{s, Scalar};

use super::{
    match_customers, quote, sample_merchant_type, step_reference, CustomerDraw, Fill,
    MarketConfig, MerchantAction, MerchantState, ReferencePrices, Side,
};

/// One merchant's hedge execution at the facility.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgeTrade<T> {
    pub t: usize,
    pub merchant: usize,
    /// Positive quantity means the merchant sold to the facility.
    pub quantity: T,
    pub price: T,
}

/// Per-episode trading record handed out by [`MarketEnv::take_info`];
/// the calibration metrics are computed from it.
#[derive(Debug, Clone)]
pub struct MarketInfo<T> {
    pub fills: Vec<Fill<T>>,
    pub hedges: Vec<HedgeTrade<T>>,
    pub horizon: usize,
    pub n_merchants: usize,
    /// Sum of all customer transaction quantities over the episode.
    pub total_customer_quantity: T,
    /// Net (cash, goods) book of the reference facility.
    pub reference_book: (T, T),
    /// Net (cash, goods) book of all customers combined.
    pub customer_book: (T, T),
    /// Net (cash, goods) across all merchants.
    pub merchant_book: (T, T),
}

/// The n-player merchant market environment.
#[derive(Debug, Clone)]
pub struct MarketEnv<T> {
    cfg: MarketConfig,
    // episode state
    t: usize,
    prices: ReferencePrices<T>,
    merchants: Vec<MerchantState<T>>,
    connections: Vec<Vec<bool>>,
    types: Vec<AgentType<T>>,
    ctx: Option<EpisodeCtx>,
    fills: Vec<Fill<T>>,
    hedges: Vec<HedgeTrade<T>>,
    total_qty: T,
    reference_book: (T, T),
    customer_book: (T, T),
    r_max: T,
    /// Global customer index -> cluster.
    customer_cluster: Vec<usize>,
}

impl<T: Scalar> MarketEnv<T> {
    pub fn new(cfg: MarketConfig) -> Self {
        let mut customer_cluster = Vec::with_capacity(cfg.n_customers());
        for (c, &size) in cfg.cluster_sizes.iter().enumerate() {
            customer_cluster.extend(std::iter::repeat(c).take(size));
        }
        let prices = ReferencePrices::new(
            cfg.mid_initial,
            cfg.half_spread_initial,
            cfg.sigma_mid,
            cfg.sigma_spread,
        );
        let r_max = Self::reward_bound(&cfg, &prices, s(1e6));
        MarketEnv {
            cfg,
            t: 0,
            prices,
            merchants: Vec::new(),
            connections: Vec::new(),
            types: Vec::new(),
            ctx: None,
            fills: Vec::new(),
            hedges: Vec::new(),
            total_qty: T::zero(),
            reference_book: (T::zero(), T::zero()),
            customer_book: (T::zero(), T::zero()),
            r_max,
            customer_cluster,
        }
    }

    pub fn config(&self) -> &MarketConfig {
        &self.cfg
    }

    /// Conservative per-step reward bound given price caps, the maximum
    /// attainable inventory and a tolerance bound.
    fn reward_bound(cfg: &MarketConfig, prices: &ReferencePrices<T>, xi_max: T) -> T {
        let q_step = s::<T>(cfg.step_quantity());
        let q_max = s::<T>(cfg.horizon as f64) * q_step;
        let p_max = (prices.mid_cap + prices.spread_cap) * s(2.0);
        (q_step + q_max) * p_max + s::<T>(2.0) * q_max * prices.mid_cap + xi_max * q_max
    }

    fn build_types(
        &self,
        profile: &SupertypeProfile<T>,
        ctx: &EpisodeCtx,
    ) -> (Vec<Vec<bool>>, Vec<AgentType<T>>) {
        let mut connections = Vec::with_capacity(self.cfg.n_merchants);
        let mut types = Vec::with_capacity(self.cfg.n_merchants);
        for i in 0..self.cfg.n_merchants {
            let mut rng = ctx.agent(i, &[tag::TYPE]).rng();
            let (conn, values, _) = sample_merchant_type(
                &profile.supertype_of(i).params,
                &self.cfg.cluster_sizes,
                &mut rng,
            );
            connections.push(conn);
            types.push(AgentType { values });
        }
        (connections, types)
    }

    fn observation(&self, merchant: usize) -> Vec<T> {
        let cfg = &self.cfg;
        let m0 = s::<T>(cfg.mid_initial);
        let q_step = s::<T>(cfg.step_quantity());
        let norm = cfg.normalize_observations;
        let price = |p: T| if norm { p / m0 - T::one() } else { p };
        let spread = |d: T| if norm { d / m0 } else { d };
        let qty = |q: T| if norm { q / q_step } else { q };

        let st = &self.merchants[merchant];
        let mut obs = Vec::with_capacity(cfg.obs_dim());
        obs.push(price(self.prices.mid));
        obs.push(spread(self.prices.half_spread));
        obs.push(qty(st.inventory));
        for w in 0..cfg.history_window {
            if cfg.per_cluster_history {
                for c in 0..cfg.n_clusters() {
                    if let Some(frame) = st.history.get(w) {
                        let r = frame.rows[c];
                        obs.push(qty(r[0]));
                        obs.push(qty(r[1]));
                        obs.push(if r[0] > T::zero() { price(r[2]) } else { T::zero() });
                        obs.push(if r[1] > T::zero() { price(r[3]) } else { T::zero() });
                    } else {
                        obs.extend_from_slice(&[T::zero(); 4]);
                    }
                }
            } else if let Some(frame) = st.history.get(w) {
                // flat aggregation across clusters
                let mut bought = T::zero();
                let mut sold = T::zero();
                let mut buy_px = T::zero();
                let mut sell_px = T::zero();
                for r in &frame.rows {
                    buy_px = buy_px + r[2] * r[0];
                    sell_px = sell_px + r[3] * r[1];
                    bought = bought + r[0];
                    sold = sold + r[1];
                }
                obs.push(qty(bought));
                obs.push(qty(sold));
                obs.push(if bought > T::zero() { price(buy_px / bought) } else { T::zero() });
                obs.push(if sold > T::zero() { price(sell_px / sold) } else { T::zero() });
            } else {
                obs.extend_from_slice(&[T::zero(); 4]);
            }
        }
        debug_assert_eq!(obs.len(), cfg.obs_dim());
        obs
    }

    fn observations(&self) -> Vec<Vec<T>> {
        (0..self.cfg.n_merchants).map(|i| self.observation(i)).collect()
    }
}

impl<T: Scalar> Environment<T> for MarketEnv<T> {
    type Info = MarketInfo<T>;

    fn n_agents(&self) -> usize {
        self.cfg.n_merchants
    }
    fn obs_dim(&self) -> usize {
        self.cfg.obs_dim()
    }
    fn action_dim(&self) -> usize {
        3
    }
    fn type_dim(&self) -> usize {
        self.cfg.type_dim()
    }
    fn action_bounds(&self) -> (Vec<T>, Vec<T>) {
        (vec![s(-1.0), s(-1.0), T::zero()], vec![T::one(), T::one(), T::one()])
    }
    fn horizon(&self) -> usize {
        self.cfg.horizon
    }
    fn max_abs_reward(&self) -> T {
        self.r_max
    }
    fn discount(&self) -> T {
        s(self.cfg.discount)
    }

    fn sample_types(&self, profile: &SupertypeProfile<T>, ctx: &EpisodeCtx) -> Vec<AgentType<T>> {
        self.build_types(profile, ctx).1
    }

    fn reset(
        &mut self,
        profile: &SupertypeProfile<T>,
        ctx: &EpisodeCtx,
    ) -> Result<(Vec<AgentType<T>>, Vec<Vec<T>>)> {
        for (g, group) in profile.groups.iter().enumerate() {
            if group.dim() != self.cfg.supertype_dim() {
                return Err(Error::Config(format!(
                    "supertype {g} has {} params, market needs {} ({} clusters + mean + stdev)",
                    group.dim(),
                    self.cfg.supertype_dim(),
                    self.cfg.n_clusters()
                )));
            }
        }
        if profile.n_agents() != self.cfg.n_merchants {
            return Err(Error::Config("profile/merchant count mismatch".into()));
        }
        let (connections, types) = self.build_types(profile, ctx);
        self.connections = connections;
        self.types = types.clone();
        self.merchants = self
            .types
            .iter()
            .map(|ty| MerchantState::new(*ty.values.last().unwrap()))
            .collect();
        self.prices = ReferencePrices::new(
            self.cfg.mid_initial,
            self.cfg.half_spread_initial,
            self.cfg.sigma_mid,
            self.cfg.sigma_spread,
        );
        self.t = 0;
        self.fills.clear();
        self.hedges.clear();
        self.total_qty = T::zero();
        self.reference_book = (T::zero(), T::zero());
        self.customer_book = (T::zero(), T::zero());
        let xi_max = self
            .merchants
            .iter()
            .map(|m| m.tolerance)
            .fold(T::zero(), |a, b| a.max(b));
        self.r_max = Self::reward_bound(&self.cfg, &self.prices, xi_max);
        self.ctx = Some(ctx.clone());
        Ok((types, self.observations()))
    }

    fn step(&mut self, actions: &[Vec<T>]) -> Result<StepOutcome<T>> {
        if actions.len() != self.cfg.n_merchants {
            return Err(Error::Config("joint action arity mismatch".into()));
        }
        let ctx = self
            .ctx
            .as_ref()
            .ok_or_else(|| Error::Config("step before reset".into()))?
            .clone();
        let t = self.t;

        // quotes
        let merchant_actions: Vec<MerchantAction<T>> =
            actions.iter().map(|a| MerchantAction::from_slice(a)).collect();
        let quotes: Vec<_> =
            merchant_actions.iter().map(|a| quote(a, &self.prices)).collect();

        // customer intents from world streams
        let draws: Vec<CustomerDraw> = (0..self.cfg.n_customers())
            .map(|cust| {
                let cluster = self.customer_cluster[cust];
                let mut rng = ctx.world(&[tag::CUSTOMER, t as u64, cust as u64]).rng();
                use rand::Rng;
                let side = if rng.gen::<bool>() { Side::Buy } else { Side::Sell };
                CustomerDraw {
                    customer: cust,
                    cluster,
                    side,
                    quantity: self.cfg.cluster_quantity(cluster),
                }
            })
            .collect();

        let connections = &self.connections;
        let fills = match_customers(
            t,
            &quotes,
            |m, c| connections[m][c],
            &draws,
            &self.prices,
            |m, c| ctx.agent(m, &[tag::PRIORITY, t as u64, c as u64]).priority(),
        );

        // settle each merchant against its own fills (customer order)
        let prices_before = self.prices.clone();
        let mut rng = ctx.world(&[tag::REFERENCE, t as u64]).rng();
        let prices_after = step_reference(&prices_before, &mut rng);

        let mut rewards = Vec::with_capacity(self.cfg.n_merchants);
        for i in 0..self.cfg.n_merchants {
            let own: Vec<&Fill<T>> =
                fills.iter().filter(|f| f.merchant == Some(i)).collect();
            let settlement = super::settle(
                &self.merchants[i],
                &own,
                &prices_before,
                &prices_after,
                merchant_actions[i].hedge,
                self.cfg.n_clusters(),
            );
            if settlement.hedge_qty != T::zero() {
                // facility takes the other side of the hedge
                self.reference_book.0 = self.reference_book.0 - settlement.hedge_cash;
                self.reference_book.1 = self.reference_book.1 + settlement.hedge_qty;
                self.hedges.push(HedgeTrade {
                    t,
                    merchant: i,
                    quantity: settlement.hedge_qty,
                    price: if settlement.hedge_qty > T::zero() {
                        prices_before.buy()
                    } else {
                        prices_before.sell()
                    },
                });
            }
            let mut st = settlement.state;
            st.history.truncate(self.cfg.history_window);
            self.merchants[i] = st;
            rewards.push(settlement.reward);
        }

        // customer and facility books
        for f in &fills {
            let signed_goods = match f.side {
                Side::Sell => -f.quantity, // customer hands goods over
                Side::Buy => f.quantity,
            };
            let signed_cash = -signed_goods * f.price;
            self.customer_book.0 = self.customer_book.0 + signed_cash;
            self.customer_book.1 = self.customer_book.1 + signed_goods;
            if f.merchant.is_none() {
                self.reference_book.0 = self.reference_book.0 - signed_cash;
                self.reference_book.1 = self.reference_book.1 - signed_goods;
            }
            self.total_qty = self.total_qty + f.quantity;
        }
        self.fills.extend(fills);

        self.prices = prices_after;
        self.t += 1;
        Ok(StepOutcome {
            observations: self.observations(),
            rewards,
            done: self.t >= self.cfg.horizon,
        })
    }

    fn take_info(&mut self) -> MarketInfo<T> {
        let merchant_book = self.merchants.iter().fold(
            (T::zero(), T::zero()),
            |(cash, goods), m| (cash + m.cash, goods + m.inventory),
        );
        MarketInfo {
            fills: std::mem::take(&mut self.fills),
            hedges: std::mem::take(&mut self.hedges),
            horizon: self.cfg.horizon,
            n_merchants: self.cfg.n_merchants,
            total_customer_quantity: self.total_qty,
            reference_book: self.reference_book,
            customer_book: self.customer_book,
            merchant_book,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{run_episode, symmetry::check_type_symmetry, Supertype};
    use crate::game::{ActionPolicy, PolicyStep};
    use crate::rng::StreamId;
    use rand_chacha::ChaCha12Rng;

    fn desk_profile(n: usize, conn: f64, xi_mean: f64) -> SupertypeProfile<f64> {
        let dim = 4; // 2 clusters + mean + stdev
        let st = |mean: f64| {
            Supertype::new(
                vec![conn, conn, mean, 0.0],
                vec![(0.0, 1.0), (0.0, 1.0), (0.0, 5.0), (0.0, 2.0)],
            )
        };
        assert_eq!(st(0.0).dim(), dim);
        let mut assignment = vec![1; n];
        assignment[0] = 0;
        SupertypeProfile::new(assignment, vec![st(xi_mean), st(xi_mean)])
    }

    /// Always quotes uncompetitively and never hedges: the no-trade policy.
    struct NullAction {
        obs_dim: usize,
    }

    impl ActionPolicy<f64> for NullAction {
        fn obs_dim(&self) -> usize {
            self.obs_dim
        }
        fn type_dim(&self) -> usize {
            3
        }
        fn action_dim(&self) -> usize {
            3
        }
        fn act(&self, _o: &[f64], _t: &[f64], _r: &mut ChaCha12Rng) -> crate::error::Result<PolicyStep<f64>> {
            Ok(PolicyStep { action: vec![-1.0, 1.0, 0.0], raw: vec![-1.0, 1.0, 0.0], logprob: 0.0 })
        }
    }

    /// Quotes exactly the reference prices (wins ties) and hedges fully.
    struct PassiveQuoter {
        obs_dim: usize,
    }

    impl ActionPolicy<f64> for PassiveQuoter {
        fn obs_dim(&self) -> usize {
            self.obs_dim
        }
        fn type_dim(&self) -> usize {
            3
        }
        fn action_dim(&self) -> usize {
            3
        }
        fn act(&self, _o: &[f64], _t: &[f64], _r: &mut ChaCha12Rng) -> crate::error::Result<PolicyStep<f64>> {
            Ok(PolicyStep { action: vec![0.0, 0.0, 1.0], raw: vec![0.0, 0.0, 1.0], logprob: 0.0 })
        }
    }

    #[test]
    fn fixed_horizon_episodes_run_to_length() {
        let env = MarketEnv::<f64>::new(MarketConfig::default());
        let mut e = env.clone();
        let ctx = EpisodeCtx::new(StreamId::root(1), 0, 3);
        let (batch, info) =
            run_episode(&mut e, &desk_profile(3, 0.5, 0.5), &NullAction { obs_dim: env.obs_dim() }, &ctx)
                .unwrap();
        assert_eq!(batch.horizon(), 30);
        assert_eq!(info.fills.len(), 30 * 20);
    }

    #[test]
    fn no_trade_policy_earns_exactly_zero_with_zero_tolerance() {
        let env = MarketEnv::<f64>::new(MarketConfig::default());
        let mut e = env.clone();
        let ctx = EpisodeCtx::new(StreamId::root(2), 0, 3);
        let (batch, info) =
            run_episode(&mut e, &desk_profile(3, 0.7, 0.0), &NullAction { obs_dim: env.obs_dim() }, &ctx)
                .unwrap();
        for agent in &batch.agents {
            assert!(agent.rewards.iter().all(|&r| r == 0.0));
        }
        // all flow went to the reference facility
        assert!(info.fills.iter().all(|f| f.merchant.is_none()));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let env = MarketEnv::<f64>::new(MarketConfig::default());
        let profile = desk_profile(3, 0.5, 0.5);
        let ctx = EpisodeCtx::new(StreamId::root(3), 7, 3);
        let mut a = env.clone();
        let mut b = env.clone();
        let (ba, _) = run_episode(&mut a, &profile, &PassiveQuoter { obs_dim: env.obs_dim() }, &ctx).unwrap();
        let (bb, _) = run_episode(&mut b, &profile, &PassiveQuoter { obs_dim: env.obs_dim() }, &ctx).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn conservation_holds_across_random_episodes() {
        // goods and cash both net to zero across merchants, customers and
        // the facility
        let env = MarketEnv::<f64>::new(MarketConfig::default());
        let profile = desk_profile(3, 0.6, 1.0);
        for ep in 0..20 {
            let mut e = env.clone();
            let ctx = EpisodeCtx::new(StreamId::root(40), ep, 3);
            let (_, info) = run_episode(
                &mut e,
                &profile,
                &crate::game::fixtures::MarketNoise { obs_dim: env.obs_dim() },
                &ctx,
            )
            .unwrap();
            let cash =
                info.merchant_book.0 + info.reference_book.0 + info.customer_book.0;
            let goods =
                info.merchant_book.1 + info.reference_book.1 + info.customer_book.1;
            assert!(cash.abs() < 1e-9, "cash leak {cash}");
            assert!(goods.abs() < 1e-9, "goods leak {goods}");
        }
    }

    #[test]
    fn market_share_bound_holds() {
        let env = MarketEnv::<f64>::new(MarketConfig::default());
        let profile = desk_profile(3, 0.8, 0.5);
        let ctx = EpisodeCtx::new(StreamId::root(41), 0, 3);
        let mut e = env.clone();
        let (_, info) =
            run_episode(&mut e, &profile, &PassiveQuoter { obs_dim: env.obs_dim() }, &ctx).unwrap();
        let captured: f64 = info
            .fills
            .iter()
            .filter(|f| f.merchant.is_some())
            .map(|f| f.quantity)
            .sum();
        assert!(captured <= info.total_customer_quantity + 1e-12);
        assert!(info.total_customer_quantity == 30.0 * 30.0);
    }

    #[test]
    fn type_symmetry_for_same_supertype_merchants() {
        let env = MarketEnv::<f64>::new(MarketConfig::default());
        let profile = desk_profile(3, 0.5, 0.8);
        // merchants 1 and 2 share supertype 2; swap them
        let report = check_type_symmetry(
            &env,
            &profile,
            &PassiveQuoter { obs_dim: env.obs_dim() },
            &[0, 2, 1],
            StreamId::root(42),
            100,
        )
        .unwrap();
        assert!(report.passed(), "{} violations", report.violations.len());
    }

    #[test]
    fn observation_history_is_zero_padded_at_start() {
        let env = MarketEnv::<f64>::new(MarketConfig::default());
        let mut e = env.clone();
        let ctx = EpisodeCtx::new(StreamId::root(5), 0, 3);
        let (_, obs) = e.reset(&desk_profile(3, 0.5, 0.5), &ctx).unwrap();
        for o in &obs {
            assert_eq!(o.len(), e.obs_dim());
            // inventory and all history slots are zero at t = 0
            assert!(o[2..].iter().all(|&v| v == 0.0));
        }
    }
}
