//! The n-player merchant/customer market.
//!
//! Merchants quote buy/sell prices around an exogenous reference facility,
//! compete for customer flow they are (probabilistically) connected to,
//! hedge inventory at the facility, and earn mark-to-market profit minus
//! an inventory penalty. Customers are stateless samplers: each one buys
//! or sells its cluster quantity every step, with the best-priced
//! connected merchant winning the trade if it beats the reference quote.

mod env;

pub use env::{MarketEnv, MarketInfo};

use crate::scalar::{s, Scalar};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Reference facility quotes: mid and half-spread following Gaussian
/// increments, with the half-spread projected at zero and the mid kept in
/// `[0, mid_cap]` so per-step rewards admit a finite declared bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePrices<T> {
    pub mid: T,
    pub half_spread: T,
    pub sigma_mid: T,
    pub sigma_spread: T,
    pub mid_cap: T,
    pub spread_cap: T,
}

impl<T: Scalar> ReferencePrices<T> {
    pub fn new(mid: f64, half_spread: f64, sigma_mid: f64, sigma_spread: f64) -> Self {
        ReferencePrices {
            mid: s(mid),
            half_spread: s(half_spread),
            sigma_mid: s(sigma_mid),
            sigma_spread: s(sigma_spread),
            mid_cap: s(mid * 4.0),
            spread_cap: s(mid),
        }
    }

    /// Facility buy price `m* - δ*` (what it pays customers).
    pub fn buy(&self) -> T {
        self.mid - self.half_spread
    }

    /// Facility sell price `m* + δ*`.
    pub fn sell(&self) -> T {
        self.mid + self.half_spread
    }
}

/// Advances the reference prices one step: Gaussian increments with the
/// half-spread projected at zero (and both values kept under their caps).
pub fn step_reference<T: Scalar>(prices: &ReferencePrices<T>, rng: &mut ChaCha12Rng) -> ReferencePrices<T> {
    let mut out = prices.clone();
    let dm = T::standard_normal(rng) * prices.sigma_mid;
    let dd = T::standard_normal(rng) * prices.sigma_spread;
    out.mid = (prices.mid + dm).max(T::zero()).min(prices.mid_cap);
    out.half_spread = (prices.half_spread + dd).max(T::zero()).min(prices.spread_cap);
    out
}

/// Merchant action: multiplicative quote factors and a hedge fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MerchantAction<T> {
    /// Buy-quote factor in `[-1, 1]`.
    pub eps_buy: T,
    /// Sell-quote factor in `[-1, 1]`.
    pub eps_sell: T,
    /// Fraction of inventory hedged at the reference facility, `[0, 1]`.
    pub hedge: T,
}

impl<T: Scalar> MerchantAction<T> {
    pub fn from_slice(a: &[T]) -> Self {
        MerchantAction {
            eps_buy: a[0].max(s(-1.0)).min(s(1.0)),
            eps_sell: a[1].max(s(-1.0)).min(s(1.0)),
            hedge: a[2].max(T::zero()).min(T::one()),
        }
    }
}

/// Merchant quotes produced by [`quote`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quote<T> {
    pub buy: T,
    pub sell: T,
}

/// Applies the multiplicative factors to the reference quotes:
/// `p_buy = p*_buy (1 + ε_b)`, `p_sell = p*_sell (1 + ε_s)`.
pub fn quote<T: Scalar>(action: &MerchantAction<T>, prices: &ReferencePrices<T>) -> Quote<T> {
    Quote {
        buy: prices.buy() * (T::one() + action.eps_buy),
        sell: prices.sell() * (T::one() + action.eps_sell),
    }
}

/// Which way the customer trades.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Customer buys the good (hits somebody's sell quote).
    Buy,
    /// Customer sells the good (hits somebody's buy quote).
    Sell,
}

/// One customer's intent for the step.
#[derive(Debug, Clone, Copy)]
pub struct CustomerDraw {
    pub customer: usize,
    pub cluster: usize,
    pub side: Side,
    pub quantity: u32,
}

/// One executed customer trade. `merchant == None` means the reference
/// facility took the other side.
#[derive(Debug, Clone, PartialEq)]
pub struct Fill<T> {
    pub t: usize,
    pub merchant: Option<usize>,
    pub customer: usize,
    pub cluster: usize,
    pub side: Side,
    pub quantity: T,
    pub price: T,
}

/// Matches every customer against the best connected quote.
///
/// A selling customer trades with the connected merchant quoting the
/// highest buy price provided it is at least the reference buy price
/// (price ties with the reference go to the merchant); symmetrically for
/// buying customers. Ties among merchants break by `priority(merchant,
/// customer)`, which must be derived from the merchant's own stream so
/// matching is invariant under permutation of merchant identities.
pub fn match_customers<T: Scalar>(
    t: usize,
    quotes: &[Quote<T>],
    connected: impl Fn(usize, usize) -> bool,
    draws: &[CustomerDraw],
    prices: &ReferencePrices<T>,
    priority: impl Fn(usize, usize) -> u64,
) -> Vec<Fill<T>> {
    let mut fills = Vec::with_capacity(draws.len());
    for d in draws {
        let mut best: Option<(T, u64, usize)> = None;
        for (m, q) in quotes.iter().enumerate() {
            if !connected(m, d.customer) {
                continue;
            }
            let px = match d.side {
                Side::Sell => q.buy,
                Side::Buy => q.sell,
            };
            let pri = priority(m, d.customer);
            let better = match (&best, d.side) {
                (None, _) => true,
                (Some((bp, bpri, _)), Side::Sell) => px > *bp || (px == *bp && pri > *bpri),
                (Some((bp, bpri, _)), Side::Buy) => px < *bp || (px == *bp && pri > *bpri),
            };
            if better {
                best = Some((px, pri, m));
            }
        }
        let qty = s::<T>(d.quantity as f64);
        let fill = match (best, d.side) {
            (Some((px, _, m)), Side::Sell) if px >= prices.buy() => Fill {
                t,
                merchant: Some(m),
                customer: d.customer,
                cluster: d.cluster,
                side: d.side,
                quantity: qty,
                price: px,
            },
            (Some((px, _, m)), Side::Buy) if px <= prices.sell() => Fill {
                t,
                merchant: Some(m),
                customer: d.customer,
                cluster: d.cluster,
                side: d.side,
                quantity: qty,
                price: px,
            },
            _ => Fill {
                t,
                merchant: None,
                customer: d.customer,
                cluster: d.cluster,
                side: d.side,
                quantity: qty,
                price: match d.side {
                    Side::Sell => prices.buy(),
                    Side::Buy => prices.sell(),
                },
            },
        };
        fills.push(fill);
    }
    fills
}

/// Per-step trading aggregates of one merchant, the unit of the
/// observation history window.
#[derive(Debug, Clone, PartialEq)]
pub struct HistFrame<T> {
    /// Per cluster: (bought qty, sold qty, avg buy price, avg sell price).
    pub rows: Vec<[T; 4]>,
}

impl<T: Scalar> HistFrame<T> {
    fn empty(clusters: usize) -> Self {
        HistFrame { rows: vec![[T::zero(); 4]; clusters] }
    }
}

/// Cash, inventory, tolerance and observation history of one merchant.
#[derive(Debug, Clone, PartialEq)]
pub struct MerchantState<T> {
    pub inventory: T,
    pub cash: T,
    /// Inventory tolerance ξ ≥ 0 (reward units per unit held).
    pub tolerance: T,
    /// Most recent frame first; at most `window` frames.
    pub history: Vec<HistFrame<T>>,
}

impl<T: Scalar> MerchantState<T> {
    pub fn new(tolerance: T) -> Self {
        MerchantState { inventory: T::zero(), cash: T::zero(), tolerance, history: Vec::new() }
    }
}

/// Result of settling one merchant's step.
#[derive(Debug, Clone)]
pub struct Settlement<T> {
    pub state: MerchantState<T>,
    pub reward: T,
    /// Signed quantity hedged at the facility (positive = sold to it).
    pub hedge_qty: T,
    /// Cash received from the facility for the hedge (signed).
    pub hedge_cash: T,
}

/// Applies customer fills and the hedge to a merchant, marking inventory
/// at mid: reward `= Δcash + Δ(q · m*) − ξ |q_after|` across the step,
/// with the penalty assessed after hedging.
///
/// Fills must belong to this merchant. Hedging `h·q` executes at the
/// reference quotes (selling inventory hits `p*_buy`, buying back hits
/// `p*_sell` — crossing the spread) using the *pre-step* prices; the mid
/// move from `prices_before` to `prices_after` drives the inventory
/// revaluation term.
pub fn settle<T: Scalar>(
    merchant: &MerchantState<T>,
    fills: &[&Fill<T>],
    prices_before: &ReferencePrices<T>,
    prices_after: &ReferencePrices<T>,
    hedge_fraction: T,
    clusters: usize,
) -> Settlement<T> {
    let q_before = merchant.inventory;
    let mut cash_delta = T::zero();
    let mut q = q_before;
    let mut frame = HistFrame::empty(clusters);
    for f in fills {
        match f.side {
            // customer sells -> merchant buys at f.price
            Side::Sell => {
                cash_delta = cash_delta - f.quantity * f.price;
                q = q + f.quantity;
                let row = &mut frame.rows[f.cluster];
                let prev_qty = row[0];
                row[2] = (row[2] * prev_qty + f.price * f.quantity) / (prev_qty + f.quantity);
                row[0] = prev_qty + f.quantity;
            }
            // customer buys -> merchant sells at f.price
            Side::Buy => {
                cash_delta = cash_delta + f.quantity * f.price;
                q = q - f.quantity;
                let row = &mut frame.rows[f.cluster];
                let prev_qty = row[1];
                row[3] = (row[3] * prev_qty + f.price * f.quantity) / (prev_qty + f.quantity);
                row[1] = prev_qty + f.quantity;
            }
        }
    }

    // hedge a fraction of the post-trade inventory at the facility
    let h = hedge_fraction.max(T::zero()).min(T::one());
    let hedge_qty = h * q;
    let hedge_price = if q > T::zero() { prices_before.buy() } else { prices_before.sell() };
    let hedge_cash = hedge_qty * hedge_price;
    cash_delta = cash_delta + hedge_cash;
    let q_after = q - hedge_qty;

    let inventory_value_delta = q_after * prices_after.mid - q_before * prices_before.mid;
    let reward = cash_delta + inventory_value_delta - merchant.tolerance * q_after.abs();

    let mut state = merchant.clone();
    state.cash = state.cash + cash_delta;
    state.inventory = q_after;
    // most recent frame first; the environment truncates to its window
    state.history.insert(0, frame);

    Settlement { state, reward, hedge_qty, hedge_cash }
}

/// Market configuration block.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketConfig {
    pub n_merchants: usize,
    /// Customers per cluster; cluster `k` (1-based) trades quantity `k`.
    pub cluster_sizes: Vec<usize>,
    pub horizon: usize,
    pub mid_initial: f64,
    pub half_spread_initial: f64,
    pub sigma_mid: f64,
    pub sigma_spread: f64,
    /// Observation history window W (steps).
    pub history_window: usize,
    /// Per-cluster history rows at paper scale, flat aggregation otherwise.
    pub per_cluster_history: bool,
    /// Scale price/quantity observation entries into unit-ish ranges.
    pub normalize_observations: bool,
    pub discount: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            n_merchants: 3,
            cluster_sizes: vec![10, 10],
            horizon: 30,
            mid_initial: 10.0,
            half_spread_initial: 0.5,
            sigma_mid: 0.05,
            sigma_spread: 0.01,
            history_window: 5,
            per_cluster_history: false,
            normalize_observations: true,
            discount: 1.0,
        }
    }
}

impl MarketConfig {
    /// Paper-scale layout: 10 clusters of 50, horizon 60.
    pub fn paper_scale(n_merchants: usize) -> Self {
        MarketConfig {
            n_merchants,
            cluster_sizes: vec![50; 10],
            horizon: 60,
            history_window: 12,
            per_cluster_history: true,
            ..MarketConfig::default()
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn n_customers(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    /// Quantity traded by every customer of a cluster (1-based index).
    pub fn cluster_quantity(&self, cluster: usize) -> u32 {
        (cluster + 1) as u32
    }

    /// Total customer quantity demanded per step.
    pub fn step_quantity(&self) -> f64 {
        self.cluster_sizes
            .iter()
            .enumerate()
            .map(|(c, &n)| (self.cluster_quantity(c) as usize * n) as f64)
            .sum()
    }

    /// Observation dimension: `3 + 4·W·(C | 1)` — reference mid and
    /// half-spread, inventory, then W history frames of (bought, sold,
    /// avg buy px, avg sell px), per cluster at paper scale.
    pub fn obs_dim(&self) -> usize {
        let rows = if self.per_cluster_history { self.n_clusters() } else { 1 };
        3 + 4 * self.history_window * rows
    }

    /// Type dimension: one connected-fraction per cluster plus the
    /// inventory tolerance.
    pub fn type_dim(&self) -> usize {
        self.n_clusters() + 1
    }

    /// Supertype dimension: per-cluster connectivity probabilities plus
    /// the tolerance Gaussian mean and stdev.
    pub fn supertype_dim(&self) -> usize {
        self.n_clusters() + 2
    }
}

/// Samples connectivity and tolerance for one merchant from its
/// supertype: independent Bernoulli connections per customer, then
/// `ξ = max(0, Normal(mean, stdev))`.
pub(crate) fn sample_merchant_type<T: Scalar>(
    params: &[T],
    cluster_sizes: &[usize],
    rng: &mut ChaCha12Rng,
) -> (Vec<bool>, Vec<T>, T) {
    let n_clusters = cluster_sizes.len();
    let mut connections = Vec::with_capacity(cluster_sizes.iter().sum());
    let mut fractions = Vec::with_capacity(n_clusters);
    for (c, &size) in cluster_sizes.iter().enumerate() {
        let p = params[c].to_f64();
        let mut connected = 0usize;
        for _ in 0..size {
            let hit = rng.gen::<f64>() < p;
            connections.push(hit);
            connected += usize::from(hit);
        }
        fractions.push(s::<T>(connected as f64 / size as f64));
    }
    let mean = params[n_clusters];
    let stdev = params[n_clusters + 1];
    let xi = (mean + stdev * T::standard_normal(rng)).max(T::zero());
    let mut type_values = fractions;
    type_values.push(xi);
    (connections, type_values, xi)
}
