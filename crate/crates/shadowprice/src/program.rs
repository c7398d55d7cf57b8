//! Finite-dimensional convex minimization form of the planning problem.
//!
//! Variables are stacked direction-major: all purchase increments, then all
//! sale increments, then consumption. The trade decided at a level-`s` atom
//! executes at time `s+1` and is priced with the time-`s` books. Equality
//! rows are the terminal bank balance (one per terminal atom) followed by the
//! terminal share balances (one per terminal atom per asset).

use crate::market::MarketSpec;
use crate::tree::{AdaptedProcess, PredictableProcess};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Index arithmetic for the stacked variable vector.
#[derive(Debug, Clone)]
pub struct VariableLayout {
    pub assets: usize,
    pub horizon: usize,
    level_sizes: Vec<usize>,
    level_offsets: Vec<usize>,
    /// Total number of `(time, atom)` slots, summed over levels `0..=T`.
    pub slots: usize,
}

impl VariableLayout {
    fn new(market: &MarketSpec) -> Self {
        let horizon = market.horizon();
        let level_sizes: Vec<usize> = (0..=horizon).map(|t| market.tree.level_size(t)).collect();
        let mut level_offsets = Vec::with_capacity(level_sizes.len());
        let mut acc = 0;
        for &m in &level_sizes {
            level_offsets.push(acc);
            acc += m;
        }
        VariableLayout {
            assets: market.assets,
            horizon,
            level_sizes,
            level_offsets,
            slots: acc,
        }
    }

    /// Number of trade variables per direction.
    pub fn trades_per_direction(&self) -> usize {
        self.assets * self.slots
    }

    /// Total variable count `(2d + 1) * n`.
    pub fn total(&self) -> usize {
        2 * self.trades_per_direction() + self.slots
    }

    /// Purchase increment decided at level-`s` atom `j` for asset `i`
    /// (executed at time `s + 1`).
    pub fn purchase_slot(&self, s: usize, j: usize, i: usize) -> usize {
        (self.level_offsets[s] + j) * self.assets + i
    }

    pub fn sale_slot(&self, s: usize, j: usize, i: usize) -> usize {
        self.trades_per_direction() + self.purchase_slot(s, j, i)
    }

    pub fn consumption_slot(&self, t: usize, j: usize) -> usize {
        2 * self.trades_per_direction() + self.level_offsets[t] + j
    }

    pub fn is_trade_slot(&self, slot: usize) -> bool {
        slot < 2 * self.trades_per_direction()
    }

    /// Maps a trade slot back to `(purchase?, level, atom, asset)`.
    pub fn decode_trade(&self, slot: usize) -> (bool, usize, usize, usize) {
        let per_dir = self.trades_per_direction();
        let purchase = slot < per_dir;
        let rel = slot % per_dir;
        let pos = rel / self.assets;
        let asset = rel % self.assets;
        let level = match self.level_offsets.binary_search(&pos) {
            Ok(l) => l,
            Err(l) => l - 1,
        };
        (purchase, level, pos - self.level_offsets[level], asset)
    }

    /// Maps a consumption slot back to `(time, atom)`.
    pub fn decode_consumption(&self, slot: usize) -> (usize, usize) {
        let pos = slot - 2 * self.trades_per_direction();
        let level = match self.level_offsets.binary_search(&pos) {
            Ok(l) => l,
            Err(l) => l - 1,
        };
        (level, pos - self.level_offsets[level])
    }

    pub fn level_size(&self, t: usize) -> usize {
        self.level_sizes[t]
    }
}

/// One affine equality row `constant + coeffs . x = 0`.
#[derive(Debug, Clone)]
pub struct SparseRow {
    pub coeffs: Vec<(usize, f64)>,
    pub constant: f64,
}

impl SparseRow {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.coeffs.iter().map(|&(k, a)| a * x[k]).sum::<f64>()
    }
}

/// Assembled minimization problem: separable concave-utility objective,
/// terminal balance equalities, nonnegativity of trade increments.
#[derive(Debug)]
pub struct ConvexProgram<'m> {
    pub market: &'m MarketSpec,
    pub layout: VariableLayout,
    rows: Vec<SparseRow>,
}

/// Value of objective and constraints at a point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `-E[sum_t u_t(c_t)]`; `+inf` when consumption leaves the domain.
    pub objective: f64,
    /// Terminal bank balances, one per terminal atom.
    pub bank_balance: Vec<f64>,
    /// Terminal share balances, terminal-atom-major then asset.
    pub share_balance: Vec<f64>,
    /// `-purchase` increments (must be `<= 0` when feasible).
    pub purchase_bounds: Vec<f64>,
    /// `-sale` increments.
    pub sale_bounds: Vec<f64>,
}

/// Max-norm residuals of the first-order optimality system.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ResidualSummary {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl ResidualSummary {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.feasibility)
            .max(self.complementarity)
    }
}

/// Primal optimizer together with the Lagrange multipliers of the terminal
/// balance constraints (`nu` for the bank, `mu` per asset) and of the trade
/// nonnegativity constraints (`lambda`).
#[derive(Debug, Clone)]
pub struct KktSolution {
    /// Purchase increments, slot `t` holds the trade into time `t`.
    pub purchases: PredictableProcess,
    /// Sale increments.
    pub sales: PredictableProcess,
    pub consumption: AdaptedProcess,
    /// Bank-balance multipliers, one per terminal atom; strictly negative at
    /// a converged optimum.
    pub nu: Vec<f64>,
    /// Share-balance multipliers, terminal-atom-major then asset.
    pub mu: Vec<f64>,
    /// Purchase-bound multipliers `lambda_up[level][atom * d + asset]`.
    pub lambda_up: Vec<Vec<f64>>,
    pub lambda_down: Vec<Vec<f64>>,
    pub residuals: ResidualSummary,
    /// Optimal expected utility (the negative of the program objective).
    pub expected_utility: f64,
    pub iterations: usize,
    /// Set when the dual polish hit a rank-deficient system: the multipliers
    /// (hence the shadow price) are one valid choice among several.
    pub degenerate_duals: bool,
}

impl KktSolution {
    /// Net trade decided at level-`s` atom `j` in asset `i`.
    pub fn net_trade(&self, s: usize, j: usize, i: usize) -> f64 {
        self.purchases.get(s + 1, j, i) - self.sales.get(s + 1, j, i)
    }

    /// Largest single trade increment anywhere in the plan.
    pub fn max_trade(&self) -> f64 {
        self.purchases.max_abs().max(self.sales.max_abs())
    }

    /// Reconstructs the holdings processes implied by the increments: shares
    /// follow the endowment plus net trades, the bank follows the
    /// self-financing identity. The result is exactly self-financing; its
    /// terminal positions are zero up to the solver's feasibility residual.
    pub fn to_pair(&self, market: &MarketSpec) -> crate::market::PortfolioConsumptionPair {
        let tree = &market.tree;
        let d = market.assets;
        let horizon = tree.horizon();
        let mut shares = PredictableProcess::zeros(tree, d);
        let mut bank = PredictableProcess::zeros(tree, 1);
        for i in 0..d {
            shares.set(0, 0, i, market.endowment_shares[i]);
        }
        bank.set(0, 0, 0, market.endowment_bank);
        for t in 0..=horizon {
            for j in 0..tree.level_size(t) {
                let parent = if t == 0 { 0 } else { tree.atom(t, j).parent };
                let mut flow = -self.consumption.get(t, j, 0);
                for i in 0..d {
                    let up = self.purchases.get(t + 1, j, i);
                    let down = self.sales.get(t + 1, j, i);
                    shares.set(
                        t + 1,
                        j,
                        i,
                        shares.get(t, parent, i) + up - down,
                    );
                    flow += market.bid.get(t, j, i) * down - market.ask.get(t, j, i) * up;
                }
                bank.set(t + 1, j, 0, bank.get(t, parent, 0) + flow);
            }
        }
        crate::market::PortfolioConsumptionPair {
            bank,
            shares,
            consumption: self.consumption.clone(),
        }
    }
}

impl<'m> ConvexProgram<'m> {
    /// Builds the equality rows from the market. The row set is always of
    /// full row rank: each terminal consumption appears in exactly one bank
    /// row and each final liquidation trade in exactly one share row.
    pub fn assemble(market: &'m MarketSpec) -> Self {
        let layout = VariableLayout::new(market);
        let tree = &market.tree;
        let horizon = layout.horizon;
        let d = layout.assets;
        let outcomes = tree.outcomes();
        let mut rows = Vec::with_capacity(outcomes * (1 + d));

        for k in 0..outcomes {
            let path = tree.path_of_terminal(k);
            let mut coeffs = Vec::with_capacity((2 * d + 1) * (horizon + 1));
            for s in 0..=horizon {
                let atom = path[s];
                for i in 0..d {
                    coeffs.push((layout.purchase_slot(s, atom, i), -market.ask.get(s, atom, i)));
                    coeffs.push((layout.sale_slot(s, atom, i), market.bid.get(s, atom, i)));
                }
                coeffs.push((layout.consumption_slot(s, atom), -1.0));
            }
            rows.push(SparseRow {
                coeffs,
                constant: market.endowment_bank,
            });
        }
        for k in 0..outcomes {
            let path = tree.path_of_terminal(k);
            for i in 0..d {
                let mut coeffs = Vec::with_capacity(2 * (horizon + 1));
                for s in 0..=horizon {
                    let atom = path[s];
                    coeffs.push((layout.purchase_slot(s, atom, i), 1.0));
                    coeffs.push((layout.sale_slot(s, atom, i), -1.0));
                }
                rows.push(SparseRow {
                    coeffs,
                    constant: market.endowment_shares[i],
                });
            }
        }
        ConvexProgram {
            market,
            layout,
            rows,
        }
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn equality_count(&self) -> usize {
        self.rows.len()
    }

    /// Objective `-E[sum u]` at a stacked point; `+inf` off the domain.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let tree = &self.market.tree;
        let mut total = 0.0;
        for t in 0..=self.layout.horizon {
            for j in 0..tree.level_size(t) {
                let c = x[self.layout.consumption_slot(t, j)];
                let u = self.market.utility.node(t, j).eval(c);
                if u == f64::NEG_INFINITY {
                    return f64::INFINITY;
                }
                total -= tree.prob(t, j) * u;
            }
        }
        total
    }

    pub fn eval(&self, x: &[f64]) -> Result<Evaluation, ProgramError> {
        if x.len() != self.layout.total() {
            return Err(ProgramError::ShapeMismatch(format!(
                "point has {} entries, layout requires {}",
                x.len(),
                self.layout.total()
            )));
        }
        let outcomes = self.market.tree.outcomes();
        let bank_balance: Vec<f64> = self.rows[..outcomes].iter().map(|r| r.eval(x)).collect();
        let share_balance: Vec<f64> = self.rows[outcomes..].iter().map(|r| r.eval(x)).collect();
        let per_dir = self.layout.trades_per_direction();
        Ok(Evaluation {
            objective: self.objective(x),
            bank_balance,
            share_balance,
            purchase_bounds: x[..per_dir].iter().map(|&v| -v).collect(),
            sale_bounds: x[per_dir..2 * per_dir].iter().map(|&v| -v).collect(),
        })
    }

    /// Flattens a solution's processes into the stacked variable vector.
    pub fn flatten_primal(&self, solution: &KktSolution) -> Vec<f64> {
        let mut x = vec![0.0; self.layout.total()];
        let tree = &self.market.tree;
        for s in 0..=self.layout.horizon {
            for j in 0..tree.level_size(s) {
                for i in 0..self.layout.assets {
                    x[self.layout.purchase_slot(s, j, i)] = solution.purchases.get(s + 1, j, i);
                    x[self.layout.sale_slot(s, j, i)] = solution.sales.get(s + 1, j, i);
                }
                x[self.layout.consumption_slot(s, j)] = solution.consumption.get(s, j, 0);
            }
        }
        x
    }

    /// Distance of zero from the subdifferential of the Lagrangian together
    /// with feasibility and complementarity, all in the max norm. Where the
    /// utility supergradient is an interval the stationarity term uses
    /// point-to-interval distance; an empty supergradient yields `+inf`.
    pub fn kkt_residual(&self, solution: &KktSolution) -> Result<ResidualSummary, ProgramError> {
        let tree = &self.market.tree;
        let d = self.layout.assets;
        let outcomes = tree.outcomes();
        if solution.nu.len() != outcomes
            || solution.mu.len() != outcomes * d
            || solution.lambda_up.len() != self.layout.horizon + 1
            || solution.lambda_down.len() != self.layout.horizon + 1
        {
            return Err(ProgramError::ShapeMismatch(
                "multiplier shapes do not match program".into(),
            ));
        }
        for t in 0..=self.layout.horizon {
            let want = tree.level_size(t) * d;
            if solution.lambda_up[t].len() != want || solution.lambda_down[t].len() != want {
                return Err(ProgramError::ShapeMismatch(format!(
                    "lambda level {t} has wrong size"
                )));
            }
        }
        let x = self.flatten_primal(solution);
        let eval = self.eval(&x)?;

        let mut feasibility = 0.0f64;
        for v in eval.bank_balance.iter().chain(&eval.share_balance) {
            feasibility = feasibility.max(v.abs());
        }
        for v in eval.purchase_bounds.iter().chain(&eval.sale_bounds) {
            feasibility = feasibility.max(v.max(0.0));
        }

        let nu_sums = tree.terminal_sums(&solution.nu, 1);
        let mu_sums = if d > 0 {
            tree.terminal_sums(&solution.mu, d)
        } else {
            Vec::new()
        };

        let mut stationarity = 0.0f64;
        let mut complementarity = 0.0f64;
        for s in 0..=self.layout.horizon {
            for j in 0..tree.level_size(s) {
                let nu_sum = nu_sums[s][j];
                for i in 0..d {
                    let mu_sum = mu_sums[s][j * d + i];
                    let lam_up = solution.lambda_up[s][j * d + i];
                    let lam_down = solution.lambda_down[s][j * d + i];
                    let r_up = mu_sum - nu_sum * self.market.ask.get(s, j, i) - lam_up;
                    let r_down = -mu_sum + nu_sum * self.market.bid.get(s, j, i) - lam_down;
                    stationarity = stationarity.max(r_up.abs()).max(r_down.abs());
                    complementarity = complementarity
                        .max((lam_up * solution.purchases.get(s + 1, j, i)).abs())
                        .max((lam_down * solution.sales.get(s + 1, j, i)).abs());
                }
                let c = solution.consumption.get(s, j, 0);
                let p = tree.prob(s, j);
                let r_c = match self
                    .market
                    .utility
                    .node(s, j)
                    .supergradient_within(c, crate::shadow::ACTIVITY_THRESHOLD)
                {
                    Some((lo, hi)) => {
                        // 0 in -P*[lo,hi] - nu_sum  <=>  -nu_sum in P*[lo,hi]
                        let target = -nu_sum;
                        if target < p * lo {
                            p * lo - target
                        } else if hi.is_finite() && target > p * hi {
                            target - p * hi
                        } else {
                            0.0
                        }
                    }
                    None => f64::INFINITY,
                };
                stationarity = stationarity.max(r_c);
            }
        }
        Ok(ResidualSummary {
            stationarity,
            feasibility,
            complementarity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn b1_layout_counts() {
        let market = fixtures::b1();
        let program = ConvexProgram::assemble(&market);
        assert_eq!(program.layout.slots, 3);
        assert_eq!(program.layout.trades_per_direction(), 3);
        assert_eq!(program.layout.total(), 9);
        assert_eq!(program.equality_count(), 4);
    }

    #[test]
    fn degenerate_shapes_assemble() {
        // Bank-only market: only consumption variables and bank rows.
        let tree = fixtures::binomial_tree();
        let utility =
            crate::utility::UtilityProcess::uniform(&tree, crate::utility::NodeUtility::log())
                .unwrap();
        let bid = crate::tree::AdaptedProcess::zeros(&tree, 0);
        let market =
            MarketSpec::new(tree, bid.clone(), bid, 1.0, vec![], utility).unwrap();
        let program = ConvexProgram::assemble(&market);
        assert_eq!(program.layout.trades_per_direction(), 0);
        assert_eq!(program.layout.total(), 3);
        assert_eq!(program.equality_count(), 2);

        // Single-period market: trades only at the liquidation date.
        let trivial = crate::tree::ScenarioTree::trivial();
        let utility =
            crate::utility::UtilityProcess::uniform(&trivial, crate::utility::NodeUtility::log())
                .unwrap();
        let price = crate::tree::AdaptedProcess::from_fn(&trivial, 1, |_, _| vec![2.0]);
        let market =
            MarketSpec::new(trivial, price.clone(), price, 1.0, vec![1.0], utility).unwrap();
        let program = ConvexProgram::assemble(&market);
        assert_eq!(program.layout.total(), 3);
        assert_eq!(program.equality_count(), 2);
        // Liquidating the endowed share at the bid funds consumption 3.
        let mut x = vec![0.0; 3];
        x[program.layout.sale_slot(0, 0, 0)] = 1.0;
        x[program.layout.consumption_slot(0, 0)] = 3.0;
        let eval = program.eval(&x).unwrap();
        assert!(eval.bank_balance[0].abs() < 1e-15);
        assert!(eval.share_balance[0].abs() < 1e-15);
    }

    #[test]
    fn zero_point_evaluation() {
        let market = fixtures::b1();
        let program = ConvexProgram::assemble(&market);
        let x = vec![0.0; program.layout.total()];
        let eval = program.eval(&x).unwrap();
        assert_eq!(eval.bank_balance, vec![1.0, 1.0]);
        assert_eq!(eval.share_balance, vec![0.0, 0.0]);
        // Terminal log utility rejects zero consumption at the horizon.
        assert_eq!(eval.objective, f64::INFINITY);
    }

    #[test]
    fn no_trade_liquidation_is_feasible_on_b1() {
        let market = fixtures::b1();
        let program = ConvexProgram::assemble(&market);
        let mut x = vec![0.0; program.layout.total()];
        x[program.layout.consumption_slot(1, 0)] = 1.0;
        x[program.layout.consumption_slot(1, 1)] = 1.0;
        let eval = program.eval(&x).unwrap();
        assert!(eval.bank_balance.iter().all(|v| v.abs() < 1e-15));
        assert!(eval.share_balance.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(eval.objective, 0.0);
    }

    #[test]
    fn b2_optimum_is_feasible_with_known_value() {
        let market = fixtures::b2();
        let program = ConvexProgram::assemble(&market);
        let mut x = vec![0.0; program.layout.total()];
        let theta = 1.875;
        x[program.layout.purchase_slot(0, 0, 0)] = theta;
        // Liquidate at time 1 in both branches.
        x[program.layout.sale_slot(1, 0, 0)] = theta;
        x[program.layout.sale_slot(1, 1, 0)] = theta;
        x[program.layout.consumption_slot(1, 0)] = 1.0 - 0.7 * theta + 1.5 * theta;
        x[program.layout.consumption_slot(1, 1)] = 1.0 - 0.7 * theta + 0.5 * theta;
        let eval = program.eval(&x).unwrap();
        assert!(eval.bank_balance.iter().all(|v| v.abs() < 1e-12));
        assert!(eval.share_balance.iter().all(|v| v.abs() < 1e-12));
        // Optimal value is log(1.25): consumption (2.5, 0.625) at odds 1/2.
        assert!((eval.objective - (-(1.25f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn trade_slot_decoding_round_trips() {
        let market = fixtures::b1();
        let program = ConvexProgram::assemble(&market);
        for s in 0..=1 {
            for j in 0..market.tree.level_size(s) {
                let up = program.layout.purchase_slot(s, j, 0);
                let down = program.layout.sale_slot(s, j, 0);
                assert_eq!(program.layout.decode_trade(up), (true, s, j, 0));
                assert_eq!(program.layout.decode_trade(down), (false, s, j, 0));
            }
        }
        let c = program.layout.consumption_slot(1, 1);
        assert_eq!(program.layout.decode_consumption(c), (1, 1));
    }
}
