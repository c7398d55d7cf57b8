//! Randomized market instances and admissible plans.
//!
//! Mid prices are built terminal-first: every interior price vector is a
//! strict convex combination of its children, so the one-step weights form a
//! pricing measure for the mid price and the generated markets are free of
//! arbitrage at any nonnegative cost rate. Probabilities and prices stay
//! bounded away from zero to keep instances well conditioned.

use crate::market::{MarketSpec, PortfolioConsumptionPair};
use crate::tree::{AdaptedProcess, PredictableProcess, ScenarioTree};
use crate::utility::{DomainBound, NodeUtility, UtilityProcess};
use rand::Rng;

/// Utility families the generator draws from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UtilityFamily {
    Log,
    Power(f64),
    Exponential(f64),
}

impl UtilityFamily {
    pub fn node(&self) -> NodeUtility {
        match self {
            UtilityFamily::Log => NodeUtility::log(),
            UtilityFamily::Power(p) => NodeUtility::power(*p).expect("valid exponent"),
            UtilityFamily::Exponential(p) => NodeUtility::exponential(*p).expect("valid rate"),
        }
    }
}

pub const DEFAULT_FAMILIES: [UtilityFamily; 4] = [
    UtilityFamily::Log,
    UtilityFamily::Power(0.5),
    UtilityFamily::Power(2.0),
    UtilityFamily::Exponential(1.0),
];

#[derive(Debug, Clone)]
pub struct InstanceParams {
    pub max_horizon: usize,
    pub max_children: usize,
    pub min_assets: usize,
    pub max_assets: usize,
    pub max_cost_rate: f64,
    pub families: Vec<UtilityFamily>,
    /// Draw the flat-before-the-horizon utility shape instead of consuming
    /// at every date.
    pub terminal_wealth_only: bool,
}

impl Default for InstanceParams {
    fn default() -> Self {
        InstanceParams {
            max_horizon: 4,
            max_children: 3,
            min_assets: 1,
            max_assets: 2,
            max_cost_rate: 0.3,
            families: DEFAULT_FAMILIES.to_vec(),
            terminal_wealth_only: false,
        }
    }
}

/// A generated market plus the ingredients it was built from, so variants
/// (different spread, different numeraire) can be derived from the same mid
/// price.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub market: MarketSpec,
    pub mid: AdaptedProcess,
    pub buy_rate: f64,
    pub sell_rate: f64,
}

impl RandomInstance {
    /// Same tree, mid price, endowment and utility under different
    /// proportional cost rates.
    pub fn with_cost_rates(&self, buy_rate: f64, sell_rate: f64) -> MarketSpec {
        let (bid, ask) =
            MarketSpec::from_mid_price(&self.market.tree, &self.mid, buy_rate, sell_rate)
                .expect("rates validated by caller");
        MarketSpec::new(
            self.market.tree.clone(),
            bid,
            ask,
            self.market.endowment_bank,
            self.market.endowment_shares.clone(),
            self.market.utility.clone(),
        )
        .expect("re-spread market stays valid")
    }
}

pub fn random_tree(rng: &mut impl Rng, max_horizon: usize, max_children: usize) -> ScenarioTree {
    let horizon = rng.gen_range(1..=max_horizon.max(1));
    let mut spec: Vec<Vec<(usize, f64)>> = vec![vec![(0, 1.0)]];
    let mut parent_probs = vec![1.0f64];
    for _ in 1..=horizon {
        let mut level = Vec::new();
        let mut probs = Vec::new();
        for (parent, &pprob) in parent_probs.iter().enumerate() {
            let children = if max_children <= 1 {
                1
            } else {
                // Mostly branch; an occasional single child keeps the
                // degenerate case exercised.
                if rng.gen_bool(0.15) {
                    1
                } else {
                    rng.gen_range(2..=max_children)
                }
            };
            let weights: Vec<f64> = (0..children).map(|_| rng.gen_range(0.3..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for w in weights {
                level.push((parent, pprob * w / total));
                probs.push(pprob * w / total);
            }
        }
        spec.push(level);
        parent_probs = probs;
    }
    ScenarioTree::build(&spec).expect("generated spec is additive")
}

/// Mid price with every interior node a strict convex combination of its
/// children (same weights across assets).
pub fn random_mid(rng: &mut impl Rng, tree: &ScenarioTree, assets: usize) -> AdaptedProcess {
    let horizon = tree.horizon();
    let mut mid = AdaptedProcess::zeros(tree, assets);
    for j in 0..tree.level_size(horizon) {
        for i in 0..assets {
            mid.set(horizon, j, i, rng.gen_range(0.4..2.5));
        }
    }
    for t in (0..horizon).rev() {
        for j in 0..tree.level_size(t) {
            let children = tree.atom(t, j).children().to_vec();
            let weights: Vec<f64> = children.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for i in 0..assets {
                let value: f64 = children
                    .iter()
                    .zip(&weights)
                    .map(|(&c, w)| w / total * mid.get(t + 1, c, i))
                    .sum();
                mid.set(t, j, i, value);
            }
        }
    }
    mid
}

pub fn random_market(rng: &mut impl Rng, params: &InstanceParams) -> RandomInstance {
    let tree = random_tree(rng, params.max_horizon, params.max_children);
    let assets = rng.gen_range(params.min_assets..=params.max_assets);
    let mid = random_mid(rng, &tree, assets);
    let buy_rate = rng.gen_range(0.0..=params.max_cost_rate);
    let sell_rate = rng.gen_range(0.0..=params.max_cost_rate.min(0.9));
    let (bid, ask) = MarketSpec::from_mid_price(&tree, &mid, buy_rate, sell_rate)
        .expect("generated mid is positive");

    let family = params.families[rng.gen_range(0..params.families.len())];
    let decay = rng.gen_range(0.85..1.0f64);
    let horizon = tree.horizon();
    let per_time: Vec<NodeUtility> = (0..=horizon)
        .map(|t| {
            if params.terminal_wealth_only && t < horizon {
                NodeUtility::affine_zero(0.0)
            } else {
                family.node().with_weight(decay.powi(t as i32))
            }
        })
        .collect();
    let utility = UtilityProcess::per_time(&tree, &per_time).expect("valid families");

    let endowment_bank = rng.gen_range(0.8..1.6);
    let endowment_shares: Vec<f64> = (0..assets).map(|_| rng.gen_range(0.0..0.8)).collect();
    let market = MarketSpec::new(tree, bid, ask, endowment_bank, endowment_shares, utility)
        .expect("generated market is valid");
    RandomInstance {
        market,
        mid,
        buy_rate,
        sell_rate,
    }
}

/// Random admissible plan: predictable trades, consumption strictly inside
/// the utility domain before the horizon, bank account from the
/// self-financing identity and full liquidation at the end. Trade and
/// consumption magnitudes shrink geometrically until the terminal
/// consumption lands inside its domain.
pub fn random_admissible_pair(
    rng: &mut impl Rng,
    market: &MarketSpec,
) -> PortfolioConsumptionPair {
    let tree = &market.tree;
    let d = market.assets;
    let horizon = tree.horizon();

    let trade_draw: Vec<Vec<f64>> = (0..=horizon)
        .map(|s| {
            (0..tree.level_size(s) * d.max(1))
                .map(|_| rng.gen_range(-0.3..0.3))
                .collect()
        })
        .collect();
    let consume_draw: Vec<Vec<f64>> = (0..=horizon)
        .map(|t| {
            (0..tree.level_size(t))
                .map(|_| rng.gen_range(0.0..0.3))
                .collect()
        })
        .collect();

    let mut scale = 1.0f64;
    for _ in 0..60 {
        let mut shares = PredictableProcess::zeros(tree, d);
        let mut bank = PredictableProcess::zeros(tree, 1);
        let mut consumption = AdaptedProcess::zeros(tree, 1);
        for i in 0..d {
            shares.set(0, 0, i, market.endowment_shares[i]);
        }
        bank.set(0, 0, 0, market.endowment_bank);

        let mut feasible = true;
        for t in 0..=horizon {
            for j in 0..tree.level_size(t) {
                let parent = if t == 0 { 0 } else { tree.atom(t, j).parent };
                let c = if t < horizon {
                    let u = market.utility.node(t, j);
                    match u.domain() {
                        DomainBound::Finite { lo, .. } => {
                            lo + 0.01 + scale * consume_draw[t][j]
                        }
                        DomainBound::Unbounded => scale * (consume_draw[t][j] - 0.15),
                    }
                } else {
                    // Liquidate everything into terminal consumption.
                    let mut wealth = bank.get(t, parent, 0);
                    for i in 0..d {
                        let pos = shares.get(t, parent, i);
                        wealth += if pos >= 0.0 {
                            market.bid.get(t, j, i) * pos
                        } else {
                            market.ask.get(t, j, i) * pos
                        };
                        shares.set(t + 1, j, i, 0.0);
                    }
                    bank.set(t + 1, j, 0, 0.0);
                    consumption.set(t, j, 0, wealth);
                    if !market.utility.node(t, j).in_domain(wealth)
                        || !interior_enough(market.utility.node(t, j), wealth)
                    {
                        feasible = false;
                    }
                    continue;
                };
                consumption.set(t, j, 0, c);
                let mut flow = -c;
                for i in 0..d {
                    let delta = scale * trade_draw[t][j * d + i];
                    shares.set(t + 1, j, i, shares.get(t, parent, i) + delta);
                    flow += if delta >= 0.0 {
                        -market.ask.get(t, j, i) * delta
                    } else {
                        -market.bid.get(t, j, i) * delta
                    };
                }
                bank.set(t + 1, j, 0, bank.get(t, parent, 0) + flow);
            }
        }
        if feasible {
            return PortfolioConsumptionPair {
                bank,
                shares,
                consumption,
            };
        }
        scale *= 0.5;
    }
    panic!("no admissible competitor found; the market endowment cannot fund minimal consumption");
}

fn interior_enough(u: &NodeUtility, c: f64) -> bool {
    match u.domain() {
        DomainBound::Finite { lo, .. } => c >= lo + 1e-3,
        DomainBound::Unbounded => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::is_admissible;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_markets_are_valid_and_plans_admissible() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let instance = random_market(&mut rng, &InstanceParams::default());
            let market = &instance.market;
            for _ in 0..4 {
                let pair = random_admissible_pair(&mut rng, market);
                let report = is_admissible(market, &pair).unwrap();
                assert!(report.admissible, "violations: {:?}", report.violations);
            }
        }
    }

    #[test]
    fn interior_prices_sit_inside_the_children_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tree = random_tree(&mut rng, 3, 3);
        let mid = random_mid(&mut rng, &tree, 2);
        for t in 0..tree.horizon() {
            for j in 0..tree.level_size(t) {
                for i in 0..2 {
                    let children = tree.atom(t, j).children();
                    let lo = children
                        .iter()
                        .map(|&c| mid.get(t + 1, c, i))
                        .fold(f64::INFINITY, f64::min);
                    let hi = children
                        .iter()
                        .map(|&c| mid.get(t + 1, c, i))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let v = mid.get(t, j, i);
                    assert!(lo - 1e-12 <= v && v <= hi + 1e-12);
                }
            }
        }
    }
}
