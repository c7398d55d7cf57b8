//! Shadow price extraction from the multipliers of a converged solve.
//!
//! At each `(time, atom, asset)` the candidate price is the ratio of the
//! descendant sums of the share and bank multipliers. Nonnegativity of the
//! trade-bound multipliers places the ratio inside the bid/ask interval, and
//! complementary slackness pins it to the ask where purchases are active and
//! to the bid where sales are active.

use crate::market::MarketSpec;
use crate::program::KktSolution;
use crate::tree::AdaptedProcess;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Trades below this size count as numerical dust: the interior-point
/// iterates keep strictly positive increments, so "no trade" shows up as a
/// tiny value rather than an exact zero.
pub const ACTIVITY_THRESHOLD: f64 = 1e-7;

/// Allowed overshoot of the extracted ratio past the bid/ask interval before
/// extraction fails; anything smaller is clamped into the interval.
pub const BOUNDS_SLACK: f64 = 1e-8;

/// Tolerance for the complementarity check between active trades and the
/// pinned side of the book.
pub const COMPLEMENTARITY_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ShadowError {
    #[error("bank multiplier at terminal atom {atom} is {value} >= 0; the solve did not converge to a strictly increasing optimum")]
    NonnegativeNu { atom: usize, value: f64 },
    #[error("extracted price {value} at (t={t}, atom={atom}, asset={asset}) leaves the spread [{bid}, {ask}] by more than {BOUNDS_SLACK:e}")]
    BoundsViolation {
        t: usize,
        atom: usize,
        asset: usize,
        value: f64,
        bid: f64,
        ask: f64,
    },
    #[error("implied bound multiplier {value} at (t={t}, atom={atom}, asset={asset}, side {side:?}) is negative beyond tolerance")]
    NegativeLambda {
        t: usize,
        atom: usize,
        asset: usize,
        side: TradeSide,
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TradeSide {
    Purchase,
    Sale,
}

/// How the extracted value was determined at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Active purchases force the price to the ask.
    ForcedAsk,
    /// Active sales force the price to the bid.
    ForcedBid,
    /// No trade; the dual ratio sits strictly inside the spread.
    Interior,
    /// Zero spread; bid and ask already coincide.
    Pinched,
}

/// In-spread price process certified by the multipliers that produced it.
#[derive(Debug, Clone)]
pub struct ShadowPrice {
    /// The price process, adapted, dimension `d`.
    pub price: AdaptedProcess,
    /// Per `(t, atom * d + asset)` provenance tags.
    pub provenance: Vec<Vec<Provenance>>,
    /// Carried-over bank multipliers (unchanged by the extraction).
    pub nu: Vec<f64>,
    /// Carried-over share multipliers.
    pub mu: Vec<f64>,
}

/// Ratio-of-multipliers extraction. Requires strictly negative bank
/// multipliers; fails if a ratio leaves the spread by more than
/// [`BOUNDS_SLACK`], otherwise clamps it in.
pub fn extract_shadow_price(
    market: &MarketSpec,
    solution: &KktSolution,
) -> Result<ShadowPrice, ShadowError> {
    let tree = &market.tree;
    let d = market.assets;
    for (atom, &v) in solution.nu.iter().enumerate() {
        if v >= 0.0 {
            return Err(ShadowError::NonnegativeNu { atom, value: v });
        }
    }
    let nu_sums = tree.terminal_sums(&solution.nu, 1);
    let mu_sums = if d > 0 {
        tree.terminal_sums(&solution.mu, d)
    } else {
        Vec::new()
    };

    let mut price = AdaptedProcess::zeros(tree, d);
    let mut provenance = Vec::with_capacity(tree.horizon() + 1);
    for t in 0..=tree.horizon() {
        let mut tags = vec![Provenance::Interior; tree.level_size(t) * d];
        for j in 0..tree.level_size(t) {
            for i in 0..d {
                let bid = market.bid.get(t, j, i);
                let ask = market.ask.get(t, j, i);
                let ratio = mu_sums[t][j * d + i] / nu_sums[t][j];
                if ratio < bid - BOUNDS_SLACK || ratio > ask + BOUNDS_SLACK {
                    return Err(ShadowError::BoundsViolation {
                        t,
                        atom: j,
                        asset: i,
                        value: ratio,
                        bid,
                        ask,
                    });
                }
                price.set(t, j, i, ratio.clamp(bid, ask));
                let pinched = (ask - bid).abs() <= 1e-12 * ask.max(1.0);
                let buying = solution.purchases.get(t + 1, j, i) > ACTIVITY_THRESHOLD;
                let selling = solution.sales.get(t + 1, j, i) > ACTIVITY_THRESHOLD;
                tags[j * d + i] = if pinched {
                    Provenance::Pinched
                } else if buying {
                    Provenance::ForcedAsk
                } else if selling {
                    Provenance::ForcedBid
                } else {
                    Provenance::Interior
                };
            }
        }
        provenance.push(tags);
    }
    Ok(ShadowPrice {
        price,
        provenance,
        nu: solution.nu.clone(),
        mu: solution.mu.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplementarityViolation {
    pub t: usize,
    pub atom: usize,
    pub asset: usize,
    pub side: TradeSide,
    pub trade: f64,
    pub shadow: f64,
    pub book: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ComplementarityReport {
    pub violations: Vec<ComplementarityViolation>,
}

impl ComplementarityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Wherever a trade exceeds the activity threshold the shadow price must sit
/// on the traded side of the book (ask for purchases, bid for sales).
pub fn check_complementarity(
    market: &MarketSpec,
    solution: &KktSolution,
    shadow: &ShadowPrice,
) -> ComplementarityReport {
    let tree = &market.tree;
    let d = market.assets;
    let mut violations = Vec::new();
    for t in 0..=tree.horizon() {
        for j in 0..tree.level_size(t) {
            for i in 0..d {
                let s = shadow.price.get(t, j, i);
                let buy = solution.purchases.get(t + 1, j, i);
                if buy > ACTIVITY_THRESHOLD {
                    let ask = market.ask.get(t, j, i);
                    if (s - ask).abs() > COMPLEMENTARITY_TOL {
                        violations.push(ComplementarityViolation {
                            t,
                            atom: j,
                            asset: i,
                            side: TradeSide::Purchase,
                            trade: buy,
                            shadow: s,
                            book: ask,
                        });
                    }
                }
                let sell = solution.sales.get(t + 1, j, i);
                if sell > ACTIVITY_THRESHOLD {
                    let bid = market.bid.get(t, j, i);
                    if (s - bid).abs() > COMPLEMENTARITY_TOL {
                        violations.push(ComplementarityViolation {
                            t,
                            atom: j,
                            asset: i,
                            side: TradeSide::Sale,
                            trade: sell,
                            shadow: s,
                            book: bid,
                        });
                    }
                }
            }
        }
    }
    ComplementarityReport { violations }
}

/// Recomputes the bound multipliers from the price equations: the purchase
/// multiplier is the descendant share sum minus the bank sum times the ask,
/// the sale multiplier its mirror at the bid. Both must be nonnegative up to
/// [`BOUNDS_SLACK`]; this is the second route to the solver's multipliers.
pub fn implied_lambdas(
    market: &MarketSpec,
    solution: &KktSolution,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ShadowError> {
    let tree = &market.tree;
    let d = market.assets;
    for (atom, &v) in solution.nu.iter().enumerate() {
        if v >= 0.0 {
            return Err(ShadowError::NonnegativeNu { atom, value: v });
        }
    }
    let nu_sums = tree.terminal_sums(&solution.nu, 1);
    let mu_sums = if d > 0 {
        tree.terminal_sums(&solution.mu, d)
    } else {
        Vec::new()
    };
    let mut lambda_up = Vec::with_capacity(tree.horizon() + 1);
    let mut lambda_down = Vec::with_capacity(tree.horizon() + 1);
    for t in 0..=tree.horizon() {
        let m = tree.level_size(t);
        let mut up = vec![0.0f64; m * d];
        let mut down = vec![0.0f64; m * d];
        for j in 0..m {
            for i in 0..d {
                let mu_sum = mu_sums[t][j * d + i];
                let nu_sum = nu_sums[t][j];
                let lu = mu_sum - nu_sum * market.ask.get(t, j, i);
                let ld = nu_sum * market.bid.get(t, j, i) - mu_sum;
                if lu < -BOUNDS_SLACK {
                    return Err(ShadowError::NegativeLambda {
                        t,
                        atom: j,
                        asset: i,
                        side: TradeSide::Purchase,
                        value: lu,
                    });
                }
                if ld < -BOUNDS_SLACK {
                    return Err(ShadowError::NegativeLambda {
                        t,
                        atom: j,
                        asset: i,
                        side: TradeSide::Sale,
                        value: ld,
                    });
                }
                up[j * d + i] = lu;
                down[j * d + i] = ld;
            }
        }
        lambda_up.push(up);
        lambda_down.push(down);
    }
    Ok((lambda_up, lambda_down))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::program::ConvexProgram;
    use crate::solver::{solve, SolverOptions};

    fn solved(market: &MarketSpec) -> KktSolution {
        let program = ConvexProgram::assemble(market);
        solve(&program, &SolverOptions::default()).unwrap()
    }

    #[test]
    fn b1_interior_shadow_price() {
        let market = fixtures::b1();
        let solution = solved(&market);
        let shadow = extract_shadow_price(&market, &solution).unwrap();
        assert!((shadow.price.get(0, 0, 0) - 1.0).abs() < 1e-6);
        assert_eq!(shadow.provenance[0][0], Provenance::Interior);
        assert_eq!(shadow.provenance[1][0], Provenance::Pinched);
        assert!(check_complementarity(&market, &solution, &shadow).passed());

        let (lu, ld) = implied_lambdas(&market, &solution).unwrap();
        assert!((lu[0][0] - 0.1).abs() < 1e-5, "lambda_up = {}", lu[0][0]);
        assert!((ld[0][0] - 0.1).abs() < 1e-5, "lambda_down = {}", ld[0][0]);
        // Pinched terminal books force both implied multipliers to zero.
        assert!(lu[1][0].abs() < 1e-6 && ld[1][0].abs() < 1e-6);
    }

    #[test]
    fn b2_forced_to_the_ask() {
        let market = fixtures::b2();
        let solution = solved(&market);
        let shadow = extract_shadow_price(&market, &solution).unwrap();
        assert!((shadow.price.get(0, 0, 0) - 0.7).abs() < 1e-6);
        assert_eq!(shadow.provenance[0][0], Provenance::ForcedAsk);
        assert!((shadow.price.get(1, 0, 0) - 1.5).abs() < 1e-8);
        assert!((shadow.price.get(1, 1, 0) - 0.5).abs() < 1e-8);
        assert!(check_complementarity(&market, &solution, &shadow).passed());

        // Buying is active at the root, so the purchase multiplier vanishes.
        let (lu, _) = implied_lambdas(&market, &solution).unwrap();
        assert!(lu[0][0].abs() < 1e-6);
    }

    #[test]
    fn frictionless_market_pins_the_shadow_price() {
        let market = fixtures::b1();
        let mid = crate::tree::AdaptedProcess::from_fn(&market.tree, 1, |t, j| {
            vec![(market.bid.get(t, j, 0) + market.ask.get(t, j, 0)) / 2.0]
        });
        let frictionless = market.frictionless_at(&mid).unwrap();
        let solution = solved(&frictionless);
        let shadow = extract_shadow_price(&frictionless, &solution).unwrap();
        for t in 0..=1 {
            for j in 0..frictionless.tree.level_size(t) {
                assert!((shadow.price.get(t, j, 0) - mid.get(t, j, 0)).abs() < 1e-12);
                assert_eq!(shadow.provenance[t][j], Provenance::Pinched);
            }
        }
    }

    #[test]
    fn corrupted_shadow_is_flagged() {
        let market = fixtures::b2();
        let solution = solved(&market);
        let mut shadow = extract_shadow_price(&market, &solution).unwrap();
        shadow.price.set(0, 0, 0, 0.65);
        let report = check_complementarity(&market, &solution, &shadow);
        assert_eq!(report.violations.len(), 1);
        let v = &report.violations[0];
        assert_eq!((v.t, v.atom, v.asset), (0, 0, 0));
        assert_eq!(v.side, TradeSide::Purchase);
    }

    #[test]
    fn nonnegative_nu_is_rejected() {
        let market = fixtures::b1();
        let mut solution = solved(&market);
        solution.nu[0] = 0.0;
        assert!(matches!(
            extract_shadow_price(&market, &solution),
            Err(ShadowError::NonnegativeNu { .. })
        ));
    }

    #[test]
    fn ratio_and_paper_form_agree() {
        // With lambda_up = sum(mu) - sum(nu) * ask, the corrected ask
        // (1 + lambda_up / (ask * sum(nu))) * ask equals sum(mu) / sum(nu).
        let cases = [
            (-1.0, -0.7, 1.1),
            (-0.3, -0.5, 2.0),
            (-2.5, -0.1, 0.4),
        ];
        for (nu_sum, mu_sum, ask) in cases {
            let lambda_up: f64 = mu_sum - nu_sum * ask;
            let corrected = (1.0 + lambda_up / (ask * nu_sum)) * ask;
            assert!((corrected - mu_sum / nu_sum).abs() < 1e-12);
        }
    }
}
