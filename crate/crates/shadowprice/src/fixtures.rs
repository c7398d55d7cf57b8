//! Small hand-checkable markets used throughout the tests and examples.

use crate::market::MarketSpec;
use crate::tree::{AdaptedProcess, PredictableProcess, ScenarioTree};
use crate::utility::{NodeUtility, UtilityProcess};

/// One-period binomial tree with equally likely branches.
pub fn binomial_tree() -> ScenarioTree {
    ScenarioTree::build(&[vec![(0, 1.0)], vec![(0, 0.5), (0, 0.5)]]).unwrap()
}

fn binomial_market(bid0: f64, ask0: f64) -> MarketSpec {
    let tree = binomial_tree();
    let price1 = [1.5, 0.5];
    let bid = AdaptedProcess::from_fn(&tree, 1, |t, j| {
        vec![if t == 0 { bid0 } else { price1[j] }]
    });
    let ask = AdaptedProcess::from_fn(&tree, 1, |t, j| {
        vec![if t == 0 { ask0 } else { price1[j] }]
    });
    let utility = UtilityProcess::terminal_wealth(&tree, NodeUtility::log()).unwrap();
    MarketSpec::new(tree, bid, ask, 1.0, vec![0.0], utility).unwrap()
}

/// Binomial market with spread `[0.9, 1.1]` at time 0, pinched prices
/// `{1.5, 0.5}` at time 1, unit bank endowment and terminal log utility.
/// The no-trade plan is optimal: the frictionless indifference price 1.0
/// lies inside the spread.
pub fn b1() -> MarketSpec {
    binomial_market(0.9, 1.1)
}

/// Same market with ask 0.7 and bid 0.6 at time 0: buying at the ask is
/// attractive and the optimum buys 1.875 shares.
pub fn b2() -> MarketSpec {
    binomial_market(0.6, 0.7)
}

/// No-trade plan for a terminal-wealth market: hold the endowment, consume
/// nothing before the horizon, liquidate the shares at the terminal bid and
/// consume everything.
pub fn liquidation_plan(market: &MarketSpec) -> crate::market::PortfolioConsumptionPair {
    let tree = &market.tree;
    let horizon = tree.horizon();
    let d = market.assets;
    let eta = &market.endowment_shares;

    let shares = PredictableProcess::from_fn(tree, d, |t, _| {
        if t == horizon + 1 {
            vec![0.0; d]
        } else {
            eta.clone()
        }
    });
    let bank = PredictableProcess::from_fn(tree, 1, |t, _| {
        vec![if t == horizon + 1 {
            0.0
        } else {
            market.endowment_bank
        }]
    });
    let mut consumption = AdaptedProcess::zeros(tree, 1);
    for j in 0..tree.level_size(horizon) {
        let mut wealth = market.endowment_bank;
        for i in 0..d {
            wealth += market.bid.get(horizon, j, i) * eta[i];
        }
        consumption.set(horizon, j, 0, wealth);
    }
    crate::market::PortfolioConsumptionPair {
        bank,
        shares,
        consumption,
    }
}
