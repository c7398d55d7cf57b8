//! Independent grid-search oracle for small instances.
//!
//! The plan value is maximized by backward recursion over the tree. At each
//! non-terminal node the decisions are the net trade (one number, single
//! risky asset) and, where the node utility is not flat, consumption; the
//! terminal node liquidates and consumes. Every stage objective is concave
//! in its decision given the continuation values, so each one-dimensional
//! search is unimodal and a coarse-to-fine bracketed grid refinement down to
//! the requested step is exact up to `O(step)` in the decision variables.
//! The oracle never touches the solver: utilities are evaluated directly and
//! money moves by the self-financing identity.

use crate::market::MarketSpec;
use crate::utility::{DomainBound, NodeUtility};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),
}

#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    /// Net trades are searched over `[-bound, bound]`.
    pub bound: f64,
    /// Final grid step; the value error is `O(step)`.
    pub step: f64,
    /// Points per refinement pass (odd, so zero is always on the first grid).
    pub coarse_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            bound: 3.0,
            step: 1e-4,
            coarse_points: 33,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OracleResult {
    /// Best value found on the refined grid; a lower bound on the optimum.
    pub value: f64,
    /// Documented error scale: `decision dimensions * step`.
    pub error_bound: f64,
    pub evaluations: u64,
}

const MAX_ESTIMATED_EVALUATIONS: f64 = 5e7;

/// Exhaustive-refinement value of the market. Guards: horizon at most 2, at
/// most one risky asset, at most 3 children per atom, and a cap on the
/// estimated evaluation count (intermediate-consumption instances multiply
/// the per-node search dimensions).
pub fn brute_force_value(market: &MarketSpec, grid: &GridSpec) -> Result<OracleResult, OracleError> {
    let tree = &market.tree;
    let horizon = tree.horizon();
    if horizon > 2 {
        return Err(OracleError::InstanceTooLarge(format!(
            "horizon {horizon} > 2"
        )));
    }
    if market.assets > 1 {
        return Err(OracleError::InstanceTooLarge(format!(
            "{} risky assets > 1",
            market.assets
        )));
    }
    for t in 0..horizon {
        for j in 0..tree.level_size(t) {
            if tree.atom(t, j).children().len() > 3 {
                return Err(OracleError::InstanceTooLarge(
                    "more than 3 children per atom".into(),
                ));
            }
        }
    }
    let passes = refinement_passes(grid);
    let per_pass = grid.coarse_points as f64;
    let mut estimate = 1.0f64;
    let mut dims = 0usize;
    for t in (0..=horizon).rev() {
        let mut node_dims = 0usize;
        if t < horizon {
            node_dims += market.assets; // net trade
            if !market.utility.node(t, 0).is_plateau() {
                node_dims += 1; // consumption search
            }
        }
        dims += node_dims * tree.level_size(t);
        let branch = if t < horizon { 3.0 } else { 1.0 };
        estimate = (per_pass * passes as f64).powi(node_dims as i32) * branch * estimate + 1.0;
    }
    if estimate > MAX_ESTIMATED_EVALUATIONS {
        return Err(OracleError::InstanceTooLarge(format!(
            "estimated {estimate:.1e} evaluations"
        )));
    }

    let price_cap = market.ask.max_abs().max(1.0);
    let mut evaluations = 0u64;
    let value = node_value(
        market,
        grid,
        0,
        0,
        market.endowment_bank,
        market.endowment_shares.first().copied().unwrap_or(0.0),
        price_cap,
        &mut evaluations,
    );
    Ok(OracleResult {
        value,
        error_bound: dims.max(1) as f64 * grid.step,
        evaluations,
    })
}

fn refinement_passes(grid: &GridSpec) -> usize {
    let mut width = 2.0 * grid.bound;
    let mut passes = 1;
    loop {
        let step = width / (grid.coarse_points - 1) as f64;
        if step <= grid.step || passes > 12 {
            return passes;
        }
        width = 2.0 * step;
        passes += 1;
    }
}

/// Best continuation value at a node holding `(bank, shares)`.
#[allow(clippy::too_many_arguments)]
fn node_value(
    market: &MarketSpec,
    grid: &GridSpec,
    t: usize,
    atom: usize,
    bank: f64,
    shares: f64,
    price_cap: f64,
    evaluations: &mut u64,
) -> f64 {
    let tree = &market.tree;
    let horizon = tree.horizon();
    let utility = market.utility.node(t, atom);
    if t == horizon {
        *evaluations += 1;
        let mut wealth = bank;
        if market.assets == 1 {
            wealth += if shares >= 0.0 {
                market.bid.get(t, atom, 0) * shares
            } else {
                market.ask.get(t, atom, 0) * shares
            };
        }
        return utility.eval(wealth);
    }

    let children = tree.atom(t, atom).children().to_vec();
    let parent_prob = tree.prob(t, atom);
    let continue_with = |bank_next: f64, shares_next: f64, evals: &mut u64| -> f64 {
        children
            .iter()
            .map(|&c| {
                tree.prob(t + 1, c) / parent_prob
                    * node_value(
                        market,
                        grid,
                        t + 1,
                        c,
                        bank_next,
                        shares_next,
                        price_cap,
                        evals,
                    )
            })
            .sum()
    };

    let trade_cost = |theta: f64| -> f64 {
        if market.assets == 0 {
            0.0
        } else if theta >= 0.0 {
            market.ask.get(t, atom, 0) * theta
        } else {
            market.bid.get(t, atom, 0) * theta
        }
    };

    let consumption_range = |wealth_cap: f64| -> Option<(f64, f64)> {
        match utility.domain() {
            DomainBound::Finite { lo, .. } => Some((lo + grid.step, wealth_cap)),
            DomainBound::Unbounded => Some((-2.0 * grid.bound, wealth_cap)),
        }
    };

    let wealth_cap = bank.abs() + (shares.abs() + grid.bound) * price_cap + 1.0;

    if market.assets == 0 {
        if utility.is_plateau() {
            let c = plateau_consumption(utility);
            *evaluations += 1;
            return utility.eval(c) + continue_with(bank - c, shares, evaluations);
        }
        let (lo, hi) = consumption_range(wealth_cap).expect("consumption range");
        return refine_search(grid, lo, hi, |c, evals| {
            *evals += 1;
            utility.eval(c) + continue_with(bank - c, shares, evals)
        }, evaluations);
    }

    if utility.is_plateau() {
        let c = plateau_consumption(utility);
        refine_search(grid, -grid.bound, grid.bound, |theta, evals| {
            *evals += 1;
            utility.eval(c) + continue_with(bank - trade_cost(theta) - c, shares + theta, evals)
        }, evaluations)
    } else {
        refine_search(grid, -grid.bound, grid.bound, |theta, evals| {
            let (lo, hi) = consumption_range(wealth_cap).expect("consumption range");
            refine_search(grid, lo, hi, |c, inner| {
                *inner += 1;
                utility.eval(c)
                    + continue_with(bank - trade_cost(theta) - c, shares + theta, inner)
            }, evals)
        }, evaluations)
    }
}

/// Cheapest consumption on a flat utility: sit at the domain floor.
fn plateau_consumption(utility: &NodeUtility) -> f64 {
    match utility.domain() {
        DomainBound::Finite { lo, .. } => lo,
        DomainBound::Unbounded => 0.0,
    }
}

/// Coarse-to-fine grid maximization of a unimodal function. Each pass grids
/// the current bracket, then shrinks the bracket to one coarse step around
/// the best point; stops once the step reaches `grid.step`. Returns the best
/// value seen (`-inf` if the function is infeasible everywhere).
fn refine_search(
    grid: &GridSpec,
    lo: f64,
    hi: f64,
    mut f: impl FnMut(f64, &mut u64) -> f64,
    evaluations: &mut u64,
) -> f64 {
    let points = grid.coarse_points.max(5);
    let mut lo = lo;
    let mut hi = hi;
    let mut best_value = f64::NEG_INFINITY;
    for _ in 0..16 {
        let step = (hi - lo) / (points - 1) as f64;
        let mut best_x = lo;
        for p in 0..points {
            let x = lo + step * p as f64;
            let v = f(x, evaluations);
            if v > best_value {
                best_value = v;
                best_x = x;
            }
        }
        if step <= grid.step {
            break;
        }
        lo = (best_x - step).max(lo);
        hi = (best_x + step).min(hi);
    }
    best_value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::tree::AdaptedProcess;
    use crate::utility::{NodeUtility, UtilityProcess};

    #[test]
    fn b1_oracle_finds_the_no_trade_value() {
        let market = fixtures::b1();
        let result = brute_force_value(&market, &GridSpec::default()).unwrap();
        assert!(result.value.abs() < 1e-4, "value {}", result.value);
    }

    #[test]
    fn b2_oracle_matches_the_closed_form() {
        let market = fixtures::b2();
        let result = brute_force_value(&market, &GridSpec::default()).unwrap();
        assert!(
            (result.value - 1.25f64.ln()).abs() < 1e-4,
            "value {}",
            result.value
        );
    }

    #[test]
    fn bank_only_consumption_scheduling() {
        let tree = fixtures::binomial_tree();
        let utility = UtilityProcess::uniform(&tree, NodeUtility::log()).unwrap();
        let empty = AdaptedProcess::zeros(&tree, 0);
        let market =
            crate::market::MarketSpec::new(tree, empty.clone(), empty, 1.0, vec![], utility)
                .unwrap();
        let result = brute_force_value(&market, &GridSpec::default()).unwrap();
        assert!((result.value - 2.0 * 0.5f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn oversized_instances_are_rejected() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let params = crate::instances::InstanceParams {
            max_horizon: 3,
            min_assets: 1,
            max_assets: 1,
            ..Default::default()
        };
        // Find an instance with horizon 3 to trip the guard.
        for _ in 0..50 {
            let instance = crate::instances::random_market(&mut rng, &params);
            if instance.market.horizon() > 2 {
                let err = brute_force_value(&instance.market, &GridSpec::default()).unwrap_err();
                assert!(matches!(err, OracleError::InstanceTooLarge(_)));
                return;
            }
        }
        panic!("generator never produced a deep tree");
    }
}
