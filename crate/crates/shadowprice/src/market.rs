//! Bid/ask market specification on a scenario tree, portfolio/consumption
//! pairs, and the bookkeeping predicates that define admissible plans.

use crate::tree::{AdaptedProcess, PredictableProcess, ScenarioTree, TreeError};
use crate::utility::{NodeUtility, UtilityError, UtilityProcess};
use thiserror::Error;

/// Absolute tolerance for the self-financing and admissibility predicates,
/// matched to the solver's KKT tolerance scale.
pub const SELF_FINANCING_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("prices must satisfy ask >= bid > 0; violated at (t={t}, atom={atom}, asset={asset}): bid={bid}, ask={ask}")]
    InvalidPrices {
        t: usize,
        atom: usize,
        asset: usize,
        bid: f64,
        ask: f64,
    },
    #[error("endowment components must be nonnegative, got {0}")]
    NegativeEndowment(f64),
    #[error("invalid proportional cost rate: buy rate must be >= 0, sell rate in [0,1); got buy={buy}, sell={sell}")]
    InvalidCostRate { buy: f64, sell: f64 },
    #[error("numeraire must be strictly positive, got {value} at (t={t}, atom={atom})")]
    NonpositiveNumeraire { t: usize, atom: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Market primitives: tree, bid/ask books, endowment and utility process.
///
/// Immutable after construction; every predicate below is a pure function.
#[derive(Debug, Clone)]
pub struct MarketSpec {
    pub tree: ScenarioTree,
    /// Number of risky assets `d` (the bank account is implicit with price 1).
    pub assets: usize,
    /// Bid prices (sale proceeds), adapted, dimension `d`.
    pub bid: AdaptedProcess,
    /// Ask prices (purchase cost), adapted, dimension `d`.
    pub ask: AdaptedProcess,
    /// Initial bank holding.
    pub endowment_bank: f64,
    /// Initial share holdings, length `d`, componentwise nonnegative.
    pub endowment_shares: Vec<f64>,
    pub utility: UtilityProcess,
}

impl MarketSpec {
    pub fn new(
        tree: ScenarioTree,
        bid: AdaptedProcess,
        ask: AdaptedProcess,
        endowment_bank: f64,
        endowment_shares: Vec<f64>,
        utility: UtilityProcess,
    ) -> Result<Self, MarketError> {
        let d = bid.dim();
        if ask.dim() != d {
            return Err(MarketError::ShapeMismatch(format!(
                "bid has {} assets, ask has {}",
                d,
                ask.dim()
            )));
        }
        if endowment_shares.len() != d {
            return Err(MarketError::ShapeMismatch(format!(
                "endowment has {} share components for {} assets",
                endowment_shares.len(),
                d
            )));
        }
        for t in 0..=tree.horizon() {
            let m = tree.level_size(t);
            if bid.level(t).len() != m * d || ask.level(t).len() != m * d {
                return Err(MarketError::ShapeMismatch(format!(
                    "price process level {t} does not match tree"
                )));
            }
            for j in 0..m {
                for i in 0..d {
                    let b = bid.get(t, j, i);
                    let a = ask.get(t, j, i);
                    if !(b > 0.0 && a >= b) || !a.is_finite() {
                        return Err(MarketError::InvalidPrices {
                            t,
                            atom: j,
                            asset: i,
                            bid: b,
                            ask: a,
                        });
                    }
                }
            }
        }
        if endowment_bank < 0.0 {
            return Err(MarketError::NegativeEndowment(endowment_bank));
        }
        if let Some(&bad) = endowment_shares.iter().find(|&&e| e < 0.0) {
            return Err(MarketError::NegativeEndowment(bad));
        }
        if utility.times() != tree.horizon() + 1 {
            return Err(MarketError::ShapeMismatch(
                "utility process does not match tree horizon".into(),
            ));
        }
        // Rebuild through the validating constructor to enforce shape and the
        // strict-increase requirement at the horizon.
        let utility = UtilityProcess::from_nodes(
            &tree,
            (0..=tree.horizon())
                .map(|t| utility.level(t).to_vec())
                .collect(),
        )?;
        Ok(MarketSpec {
            tree,
            assets: d,
            bid,
            ask,
            endowment_bank,
            endowment_shares,
            utility,
        })
    }

    pub fn horizon(&self) -> usize {
        self.tree.horizon()
    }

    /// Bid/ask books from a strictly positive mid price and proportional cost
    /// rates: ask = (1 + buy_rate) * mid, bid = (1 - sell_rate) * mid.
    pub fn from_mid_price(
        tree: &ScenarioTree,
        mid: &AdaptedProcess,
        buy_rate: f64,
        sell_rate: f64,
    ) -> Result<(AdaptedProcess, AdaptedProcess), MarketError> {
        if !(buy_rate >= 0.0) || !(0.0..1.0).contains(&sell_rate) {
            return Err(MarketError::InvalidCostRate {
                buy: buy_rate,
                sell: sell_rate,
            });
        }
        for t in 0..=tree.horizon() {
            for (idx, &s) in mid.level(t).iter().enumerate() {
                if !(s > 0.0) {
                    return Err(MarketError::InvalidPrices {
                        t,
                        atom: idx / mid.dim(),
                        asset: idx % mid.dim(),
                        bid: s,
                        ask: s,
                    });
                }
            }
        }
        let bid = mid.map(|s| (1.0 - sell_rate) * s);
        let ask = mid.map(|s| (1.0 + buy_rate) * s);
        Ok((bid, ask))
    }

    /// Frictionless variant of this market with both books set to `price`.
    pub fn frictionless_at(&self, price: &AdaptedProcess) -> Result<MarketSpec, MarketError> {
        MarketSpec::new(
            self.tree.clone(),
            price.clone(),
            price.clone(),
            self.endowment_bank,
            self.endowment_shares.clone(),
            self.utility.clone(),
        )
    }
}

/// Holdings `(bank, shares)` and consumption of one trading plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioConsumptionPair {
    /// Bank holdings, predictable, dimension 1, slots `0..=T+1`.
    pub bank: PredictableProcess,
    /// Share holdings, predictable, dimension `d`, slots `0..=T+1`.
    pub shares: PredictableProcess,
    /// Consumption, adapted, dimension 1, times `0..=T`.
    pub consumption: AdaptedProcess,
}

impl PortfolioConsumptionPair {
    pub fn matches(&self, market: &MarketSpec) -> bool {
        self.bank.dim() == 1
            && self.shares.dim() == market.assets
            && self.bank.matches(&market.tree)
            && self.shares.matches(&market.tree)
            && self.consumption.dim() == 1
            && self.consumption.times() == market.horizon() + 1
            && (0..=market.horizon())
                .all(|t| self.consumption.level(t).len() == market.tree.level_size(t))
    }
}

/// Value of a predictable process at time `t` seen from a level-`t` atom
/// (its time-`t` value lives on the level-`(t-1)` parent for `t >= 1`).
pub(crate) fn predictable_on_atom<'a>(
    p: &'a PredictableProcess,
    tree: &ScenarioTree,
    t: usize,
    atom: usize,
) -> &'a [f64] {
    if t == 0 {
        p.at(0, 0)
    } else {
        p.at(t, tree.atom(t, atom).parent)
    }
}

/// Purchase/sale decomposition of a holdings process.
#[derive(Debug, Clone)]
pub struct TradeSplit {
    /// Positive parts of the increments, slot `t` holds the trade into time
    /// `t` (slot 0 is zero).
    pub purchases: PredictableProcess,
    /// Negative parts of the increments.
    pub sales: PredictableProcess,
    /// Cumulated purchases, started from the positive part of the initial
    /// holding.
    pub cumulative_purchases: PredictableProcess,
    /// Cumulated sales, started from the negative part of the initial
    /// holding.
    pub cumulative_sales: PredictableProcess,
}

/// Splits the increments of `holdings` into purchase and sale parts and
/// cumulates them. The cumulated processes are nondecreasing along every
/// path and their difference reproduces `holdings`.
pub fn split_trades(tree: &ScenarioTree, holdings: &PredictableProcess) -> TradeSplit {
    let d = holdings.dim();
    let horizon = tree.horizon();
    let mut purchases = PredictableProcess::zeros(tree, d);
    let mut sales = PredictableProcess::zeros(tree, d);
    let mut cum_up = PredictableProcess::zeros(tree, d);
    let mut cum_down = PredictableProcess::zeros(tree, d);

    for i in 0..d {
        let h0 = holdings.get(0, 0, i);
        cum_up.set(0, 0, i, h0.max(0.0));
        cum_down.set(0, 0, i, (-h0).max(0.0));
    }
    for t in 1..=horizon + 1 {
        for j in 0..holdings.atoms_at(t) {
            // Atom j at level t-1 carries the time-t value; its time-(t-1)
            // value lives on the level-(t-2) parent.
            let prev_atom = if t == 1 {
                0
            } else {
                tree.atom(t - 1, j).parent
            };
            for i in 0..d {
                let delta = holdings.get(t, j, i) - holdings.get(t - 1, prev_atom, i);
                let up = delta.max(0.0);
                let down = (-delta).max(0.0);
                purchases.set(t, j, i, up);
                sales.set(t, j, i, down);
                cum_up.set(t, j, i, cum_up.get(t - 1, prev_atom, i) + up);
                cum_down.set(t, j, i, cum_down.get(t - 1, prev_atom, i) + down);
            }
        }
    }
    TradeSplit {
        purchases,
        sales,
        cumulative_purchases: cum_up,
        cumulative_sales: cum_down,
    }
}

/// Self-financing residual of a plan: at each `(t, atom)` the sale proceeds
/// minus purchase costs minus consumption, net of the bank change. A plan is
/// self-financing when the residual vanishes (within [`SELF_FINANCING_TOL`]);
/// overconsumption shows up as a negative residual.
pub fn self_financing_residual(
    market: &MarketSpec,
    pair: &PortfolioConsumptionPair,
) -> Result<AdaptedProcess, MarketError> {
    if !pair.matches(market) {
        return Err(MarketError::ShapeMismatch(
            "portfolio/consumption pair does not match market shape".into(),
        ));
    }
    let tree = &market.tree;
    let d = market.assets;
    let split = split_trades(tree, &pair.shares);
    let mut residual = AdaptedProcess::zeros(tree, 1);
    for t in 0..=tree.horizon() {
        for j in 0..tree.level_size(t) {
            let bank_now = predictable_on_atom(&pair.bank, tree, t, j)[0];
            let bank_next = pair.bank.get(t + 1, j, 0);
            let mut flow = -pair.consumption.get(t, j, 0);
            for i in 0..d {
                flow += market.bid.get(t, j, i) * split.sales.get(t + 1, j, i)
                    - market.ask.get(t, j, i) * split.purchases.get(t + 1, j, i);
            }
            residual.set(t, j, 0, flow - (bank_next - bank_now));
        }
    }
    Ok(residual)
}

pub fn is_self_financing(
    market: &MarketSpec,
    pair: &PortfolioConsumptionPair,
) -> Result<bool, MarketError> {
    Ok(self_financing_residual(market, pair)?.max_abs() <= SELF_FINANCING_TOL)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdmissibilityViolation {
    NotSelfFinancing { max_residual: f64 },
    InitialEndowmentMismatch { component: usize, have: f64, want: f64 },
    TerminalPositionNonzero { component: usize, have: f64 },
}

#[derive(Debug, Clone)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    pub violations: Vec<AdmissibilityViolation>,
}

/// Checks self-financing, the endowment start and full liquidation at `T+1`.
/// Component 0 is the bank, components `1..=d` the risky assets.
pub fn is_admissible(
    market: &MarketSpec,
    pair: &PortfolioConsumptionPair,
) -> Result<AdmissibilityReport, MarketError> {
    let mut violations = Vec::new();
    let residual = self_financing_residual(market, pair)?.max_abs();
    if residual > SELF_FINANCING_TOL {
        violations.push(AdmissibilityViolation::NotSelfFinancing {
            max_residual: residual,
        });
    }
    let starts = |component: usize| -> f64 {
        if component == 0 {
            pair.bank.get(0, 0, 0)
        } else {
            pair.shares.get(0, 0, component - 1)
        }
    };
    let wants = |component: usize| -> f64 {
        if component == 0 {
            market.endowment_bank
        } else {
            market.endowment_shares[component - 1]
        }
    };
    for component in 0..=market.assets {
        let have = starts(component);
        let want = wants(component);
        if (have - want).abs() > SELF_FINANCING_TOL {
            violations.push(AdmissibilityViolation::InitialEndowmentMismatch {
                component,
                have,
                want,
            });
        }
    }
    let horizon = market.horizon();
    for j in 0..market.tree.level_size(horizon) {
        let bank_end = pair.bank.get(horizon + 1, j, 0);
        if bank_end.abs() > SELF_FINANCING_TOL {
            violations.push(AdmissibilityViolation::TerminalPositionNonzero {
                component: 0,
                have: bank_end,
            });
        }
        for i in 0..market.assets {
            let pos = pair.shares.get(horizon + 1, j, i);
            if pos.abs() > SELF_FINANCING_TOL {
                violations.push(AdmissibilityViolation::TerminalPositionNonzero {
                    component: i + 1,
                    have: pos,
                });
            }
        }
    }
    violations.dedup();
    Ok(AdmissibilityReport {
        admissible: violations.is_empty(),
        violations,
    })
}

/// Expected total utility of a consumption process; `-inf` as soon as any
/// node consumes outside its utility domain.
pub fn expected_utility(market: &MarketSpec, consumption: &AdaptedProcess) -> f64 {
    let tree = &market.tree;
    let mut total = 0.0;
    for t in 0..=tree.horizon() {
        for j in 0..tree.level_size(t) {
            let u = market.utility.node(t, j).eval(consumption.get(t, j, 0));
            if u == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            total += tree.prob(t, j) * u;
        }
    }
    total
}

/// Rewrites an undiscounted market (bank account priced by the strictly
/// positive predictable `numeraire`) in units of the numeraire: prices are
/// divided by it and node utilities reparameterized so that expected utility
/// is preserved under `c -> c / numeraire`.
pub fn discount_normalize(
    tree: &ScenarioTree,
    numeraire: &PredictableProcess,
    bid: &AdaptedProcess,
    ask: &AdaptedProcess,
    utility: &UtilityProcess,
    endowment_bank: f64,
    endowment_shares: Vec<f64>,
) -> Result<MarketSpec, MarketError> {
    if numeraire.dim() != 1 || !numeraire.matches(tree) {
        return Err(MarketError::ShapeMismatch(
            "numeraire must be a scalar predictable process on the tree".into(),
        ));
    }
    let deflator_at = |t: usize, j: usize| predictable_on_atom(numeraire, tree, t, j)[0];
    for t in 0..=tree.horizon() {
        for j in 0..tree.level_size(t) {
            let v = deflator_at(t, j);
            if !(v > 0.0) {
                return Err(MarketError::NonpositiveNumeraire { t, atom: j, value: v });
            }
        }
    }
    let d = bid.dim();
    let scale_prices = |p: &AdaptedProcess| {
        AdaptedProcess::from_fn(tree, d, |t, j| {
            let s0 = deflator_at(t, j);
            p.at(t, j).iter().map(|v| v / s0).collect()
        })
    };
    let hat_bid = scale_prices(bid);
    let hat_ask = scale_prices(ask);
    let hat_utility: UtilityProcess =
        utility.map_nodes(tree, |t, j, u: &NodeUtility| u.scale_arg(deflator_at(t, j)))?;
    MarketSpec::new(
        tree.clone(),
        hat_bid,
        hat_ask,
        endowment_bank,
        endowment_shares,
        hat_utility,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::utility::NodeUtility;

    #[test]
    fn mid_price_spread_matches_fixture() {
        let tree = fixtures::binomial_tree();
        let mid = AdaptedProcess::from_fn(&tree, 1, |t, j| {
            vec![if t == 0 {
                1.0
            } else if j == 0 {
                1.5
            } else {
                0.5
            }]
        });
        let (bid, ask) = MarketSpec::from_mid_price(&tree, &mid, 0.1, 0.1).unwrap();
        assert!((bid.get(0, 0, 0) - 0.9).abs() < 1e-15);
        assert!((ask.get(0, 0, 0) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn zero_cost_rates_collapse_the_spread() {
        let tree = fixtures::binomial_tree();
        let mid = AdaptedProcess::from_fn(&tree, 1, |_, _| vec![2.0]);
        let (bid, ask) = MarketSpec::from_mid_price(&tree, &mid, 0.0, 0.0).unwrap();
        assert_eq!(bid, ask);
        assert_eq!(bid, mid);
    }

    #[test]
    fn sell_rate_of_one_is_rejected() {
        let tree = fixtures::binomial_tree();
        let mid = AdaptedProcess::from_fn(&tree, 1, |_, _| vec![1.0]);
        let err = MarketSpec::from_mid_price(&tree, &mid, 0.0, 1.0).unwrap_err();
        assert!(matches!(err, MarketError::InvalidCostRate { .. }));
    }

    #[test]
    fn split_constant_holdings_has_no_trades() {
        let tree = fixtures::binomial_tree();
        let phi = PredictableProcess::constant(&tree, &[2.5]);
        let split = split_trades(&tree, &phi);
        assert_eq!(split.purchases.max_abs(), 0.0);
        assert_eq!(split.sales.max_abs(), 0.0);
        assert_eq!(split.cumulative_purchases.get(2, 0, 0), 2.5);
    }

    #[test]
    fn split_single_path_example() {
        // Holdings 0 -> 2 -> -1 on a single-branch tree.
        let tree = ScenarioTree::build(&[vec![(0, 1.0)], vec![(0, 1.0)]]).unwrap();
        let mut phi = PredictableProcess::zeros(&tree, 1);
        phi.set(1, 0, 0, 2.0);
        phi.set(2, 0, 0, -1.0);
        let split = split_trades(&tree, &phi);
        assert_eq!(split.purchases.get(1, 0, 0), 2.0);
        assert_eq!(split.purchases.get(2, 0, 0), 0.0);
        assert_eq!(split.sales.get(1, 0, 0), 0.0);
        assert_eq!(split.sales.get(2, 0, 0), 3.0);
        assert_eq!(split.cumulative_purchases.get(2, 0, 0), 2.0);
        assert_eq!(split.cumulative_sales.get(2, 0, 0), 3.0);
    }

    #[test]
    fn liquidation_plan_is_admissible_on_b1() {
        let market = fixtures::b1();
        let pair = fixtures::liquidation_plan(&market);
        let residual = self_financing_residual(&market, &pair).unwrap();
        assert!(residual.max_abs() <= 1e-12);
        let report = is_admissible(&market, &pair).unwrap();
        assert!(report.admissible, "{:?}", report.violations);
    }

    #[test]
    fn overconsumption_shows_in_the_residual() {
        let market = fixtures::b1();
        let mut pair = fixtures::liquidation_plan(&market);
        for j in 0..2 {
            pair.consumption.set(1, j, 0, 2.0);
        }
        let residual = self_financing_residual(&market, &pair).unwrap();
        assert!((residual.get(1, 0, 0) - (-1.0)).abs() < 1e-12);
        assert!((residual.get(1, 1, 0) - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn terminal_position_violation_is_reported() {
        let market = fixtures::b1();
        let mut pair = fixtures::liquidation_plan(&market);
        for j in 0..2 {
            pair.shares.set(2, j, 0, 0.5);
        }
        let report = is_admissible(&market, &pair).unwrap();
        assert!(!report.admissible);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, AdmissibilityViolation::TerminalPositionNonzero { .. })));
    }

    #[test]
    fn wrong_start_is_reported() {
        let market = fixtures::b1();
        let mut pair = fixtures::liquidation_plan(&market);
        pair.bank.set(0, 0, 0, 0.0);
        let report = is_admissible(&market, &pair).unwrap();
        assert!(report.violations.iter().any(|v| matches!(
            v,
            AdmissibilityViolation::InitialEndowmentMismatch { component: 0, .. }
        )));
    }

    #[test]
    fn expected_utility_of_unit_terminal_consumption_is_zero() {
        let market = fixtures::b1();
        let pair = fixtures::liquidation_plan(&market);
        assert_eq!(expected_utility(&market, &pair.consumption), 0.0);
    }

    #[test]
    fn expected_utility_outside_domain_is_minus_infinity() {
        let market = fixtures::b1();
        let mut c = AdaptedProcess::zeros(&market.tree, 1);
        c.set(1, 0, 0, -1.0);
        c.set(1, 1, 0, 1.0);
        assert_eq!(expected_utility(&market, &c), f64::NEG_INFINITY);
    }

    #[test]
    fn identity_numeraire_keeps_the_market() {
        let market = fixtures::b1();
        let one = PredictableProcess::constant(&market.tree, &[1.0]);
        let normalized = discount_normalize(
            &market.tree,
            &one,
            &market.bid,
            &market.ask,
            &market.utility,
            market.endowment_bank,
            market.endowment_shares.clone(),
        )
        .unwrap();
        assert_eq!(normalized.bid, market.bid);
        assert_eq!(normalized.ask, market.ask);
    }

    #[test]
    fn zero_numeraire_is_rejected() {
        let market = fixtures::b1();
        let mut numeraire = PredictableProcess::constant(&market.tree, &[1.0]);
        numeraire.set(1, 0, 0, 0.0);
        let err = discount_normalize(
            &market.tree,
            &numeraire,
            &market.bid,
            &market.ask,
            &market.utility,
            market.endowment_bank,
            market.endowment_shares.clone(),
        )
        .unwrap_err();
        assert!(matches!(err, MarketError::NonpositiveNumeraire { .. }));
    }

    #[test]
    fn growth_numeraire_preserves_expected_utility() {
        // Log utility separates the deflator into an additive offset.
        let tree = fixtures::binomial_tree();
        let utility = UtilityProcess::uniform(&tree, NodeUtility::log()).unwrap();
        let mut numeraire = PredictableProcess::constant(&tree, &[1.0]);
        numeraire.set(1, 0, 0, 1.1);
        numeraire.set(2, 0, 0, 1.21);
        numeraire.set(2, 1, 0, 1.21);
        let bid = AdaptedProcess::from_fn(&tree, 1, |_, _| vec![1.0]);
        let market = discount_normalize(&tree, &numeraire, &bid, &bid, &utility, 1.0, vec![0.0])
            .unwrap();

        let nominal = AdaptedProcess::from_fn(&tree, 1, |t, j| vec![0.5 + 0.25 * (t + j) as f64]);
        let deflated = AdaptedProcess::from_fn(&tree, 1, |t, j| {
            vec![nominal.get(t, j, 0) / predictable_on_atom(&numeraire, &tree, t, j)[0]]
        });
        let plain = MarketSpec::new(
            tree.clone(),
            bid.clone(),
            bid.clone(),
            1.0,
            vec![0.0],
            utility.clone(),
        )
        .unwrap();
        let lhs = expected_utility(&plain, &nominal);
        let rhs = expected_utility(&market, &deflated);
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}
