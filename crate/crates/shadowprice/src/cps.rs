//! Consistent price system construction and the end-to-end certificate.
//!
//! From the bank multipliers of a converged solve the pricing measure is
//! `q_k = -nu_k / alpha` with `alpha = sum(-nu)`; its density process is
//! proportional to marginal utility of optimal consumption. [`certify`]
//! chains the whole pipeline: solve with costs, extract the shadow price,
//! re-solve frictionlessly at that price, and verify that both problems have
//! the same value together with the martingale, marginal-utility, budget and
//! complementarity identities.

use crate::market::{
    expected_utility, MarketError, MarketSpec, PortfolioConsumptionPair, SELF_FINANCING_TOL,
};
use crate::program::{ConvexProgram, KktSolution};
use crate::shadow::{
    check_complementarity, extract_shadow_price, ComplementarityReport, ShadowError, ShadowPrice,
};
use crate::solver::{solve, solve_frictionless, SolverError, SolverOptions};
use crate::split_trades;
use crate::tree::{AdaptedProcess, ScenarioTree};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Residual tolerance for the martingale property of the density-weighted
/// shadow price.
pub const MARTINGALE_TOL: f64 = 1e-8;
/// Interval slack for the marginal-utility membership of the density.
pub const MARGINAL_TOL: f64 = 1e-8;
/// Tolerance for the expected-consumption budget identity.
pub const BUDGET_TOL: f64 = 1e-8;
/// Allowed slack of the extracted price against the bid/ask interval.
pub const BOUNDS_TOL: f64 = 1e-8;
/// Exact-inequality slack for the competitor dominance self-test.
pub const DOMINANCE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CpsError {
    #[error("bank multiplier at terminal atom {atom} is {value} >= 0")]
    NonnegativeNu { atom: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error(transparent)]
    Cps(#[from] CpsError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// In-spread price process together with an equivalent pricing measure and
/// its density process.
#[derive(Debug, Clone)]
pub struct ConsistentPriceSystem {
    /// The in-spread price process the measure prices.
    pub shadow: AdaptedProcess,
    /// Pricing-measure weights per terminal atom; strictly positive, sum 1.
    pub q: Vec<f64>,
    /// Normalization `sum_k(-nu_k)`.
    pub alpha: f64,
    /// Density process of the pricing measure w.r.t. the reference measure;
    /// starts at 1.
    pub density: AdaptedProcess,
}

impl ConsistentPriceSystem {
    /// Measure of the level-`t` atom `j` under the pricing measure.
    pub fn q_atom(&self, tree: &ScenarioTree, t: usize, j: usize) -> f64 {
        self.density.get(t, j, 0) * tree.prob(t, j)
    }
}

/// Builds the pricing measure and density process from strictly negative
/// bank multipliers.
pub fn build_cps(
    tree: &ScenarioTree,
    nu: &[f64],
    shadow_price: &AdaptedProcess,
) -> Result<ConsistentPriceSystem, CpsError> {
    if nu.len() != tree.outcomes() {
        return Err(CpsError::ShapeMismatch(format!(
            "{} multipliers for {} outcomes",
            nu.len(),
            tree.outcomes()
        )));
    }
    for (atom, &v) in nu.iter().enumerate() {
        if v >= 0.0 {
            return Err(CpsError::NonnegativeNu { atom, value: v });
        }
    }
    let alpha: f64 = nu.iter().map(|v| -v).sum();
    let q: Vec<f64> = nu.iter().map(|v| -v / alpha).collect();
    let q_sums = tree.terminal_sums(&q, 1);
    let mut density = AdaptedProcess::zeros(tree, 1);
    for t in 0..=tree.horizon() {
        for j in 0..tree.level_size(t) {
            density.set(t, j, 0, q_sums[t][j] / tree.prob(t, j));
        }
    }
    Ok(ConsistentPriceSystem {
        shadow: shadow_price.clone(),
        q,
        alpha,
        density,
    })
}

/// Max martingale residual of the density-weighted price process, checking
/// both the one-step identity and conditioning the terminal value all the
/// way down.
pub fn check_martingale(tree: &ScenarioTree, cps: &ConsistentPriceSystem) -> f64 {
    let d = cps.shadow.dim();
    if d == 0 {
        return 0.0;
    }
    let horizon = tree.horizon();
    let weighted = |t: usize| -> AdaptedProcess {
        AdaptedProcess::from_fn(tree, d, |tt, j| {
            if tt == t {
                let z = cps.density.get(t, j, 0);
                cps.shadow.at(t, j).iter().map(|s| z * s).collect()
            } else {
                vec![0.0; d]
            }
        })
    };
    let mut residual = 0.0f64;
    let terminal = weighted(horizon);
    for t in 0..horizon {
        let multi = tree
            .conditional_expectation(&terminal, horizon, t)
            .expect("shapes match by construction");
        let next = weighted(t + 1);
        let one_step = tree
            .conditional_expectation(&next, t + 1, t)
            .expect("shapes match by construction");
        for j in 0..tree.level_size(t) {
            let z = cps.density.get(t, j, 0);
            for i in 0..d {
                let own = z * cps.shadow.get(t, j, i);
                residual = residual.max((multi[j * d + i] - own).abs());
                residual = residual.max((one_step[j * d + i] - own).abs());
            }
        }
    }
    residual
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalViolation {
    pub t: usize,
    pub atom: usize,
    pub density: f64,
    pub interval_lo: f64,
    pub interval_hi: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MarginalUtilityReport {
    pub max_residual: f64,
    pub violations: Vec<MarginalViolation>,
}

impl MarginalUtilityReport {
    pub fn passed(&self) -> bool {
        self.max_residual <= MARGINAL_TOL
    }
}

/// Membership of the density in the scaled supergradient of utility at the
/// certified consumption: at every node the density must lie in
/// `(1/alpha) * du(c)` up to [`MARGINAL_TOL`]; for differentiable utilities
/// this is `|density - u'(c)/alpha|`.
pub fn check_marginal_utility(
    market: &MarketSpec,
    cps: &ConsistentPriceSystem,
    consumption: &AdaptedProcess,
    alpha: f64,
) -> MarginalUtilityReport {
    let tree = &market.tree;
    let mut report = MarginalUtilityReport::default();
    for t in 0..=tree.horizon() {
        for j in 0..tree.level_size(t) {
            let z = cps.density.get(t, j, 0);
            let c = consumption.get(t, j, 0);
            let (gap, lo, hi) = match market
                .utility
                .node(t, j)
                .supergradient_within(c, crate::shadow::ACTIVITY_THRESHOLD)
            {
                Some((glo, ghi)) => {
                    let lo = glo / alpha;
                    let hi = ghi / alpha;
                    let gap = if z < lo {
                        lo - z
                    } else if hi.is_finite() && z > hi {
                        z - hi
                    } else {
                        0.0
                    };
                    (gap, lo, hi)
                }
                None => (f64::INFINITY, f64::NAN, f64::NAN),
            };
            report.max_residual = report.max_residual.max(gap);
            if gap > MARGINAL_TOL {
                report.violations.push(MarginalViolation {
                    t,
                    atom: j,
                    density: z,
                    interval_lo: lo,
                    interval_hi: hi,
                });
            }
        }
    }
    report
}

/// Budget identity under the pricing measure: expected total consumption
/// equals initial bank plus shares valued at the initial shadow price.
/// Returns the absolute residual.
pub fn budget_constraint(
    tree: &ScenarioTree,
    pair: &PortfolioConsumptionPair,
    cps: &ConsistentPriceSystem,
) -> f64 {
    let mut total = 0.0;
    for t in 0..=tree.horizon() {
        for j in 0..tree.level_size(t) {
            total += cps.q_atom(tree, t, j) * pair.consumption.get(t, j, 0);
        }
    }
    let mut wealth = pair.bank.get(0, 0, 0);
    for i in 0..pair.shares.dim() {
        wealth += pair.shares.get(0, 0, i) * cps.shadow.get(0, 0, i);
    }
    (total - wealth).abs()
}

/// Rewrites a plan that is admissible under the bid/ask books as a plan in
/// the frictionless market at `shadow`, keeping the holdings and crediting
/// the price improvement on every trade to consumption. The lifted
/// consumption dominates the original one nodewise.
pub fn lift_to_frictionless(
    market: &MarketSpec,
    pair: &PortfolioConsumptionPair,
    shadow: &AdaptedProcess,
) -> PortfolioConsumptionPair {
    let tree = &market.tree;
    let d = market.assets;
    let split = split_trades(tree, &pair.shares);
    let mut lifted = pair.consumption.clone();
    for t in 0..=tree.horizon() {
        for j in 0..tree.level_size(t) {
            let mut bonus = 0.0;
            for i in 0..d {
                let s = shadow.get(t, j, i);
                bonus += split.purchases.get(t + 1, j, i) * (market.ask.get(t, j, i) - s)
                    + split.sales.get(t + 1, j, i) * (s - market.bid.get(t, j, i));
            }
            let v = lifted.get(t, j, 0);
            lifted.set(t, j, 0, v + bonus);
        }
    }
    PortfolioConsumptionPair {
        bank: pair.bank.clone(),
        shares: pair.shares.clone(),
        consumption: lifted,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CertificationOptions {
    pub solver: SolverOptions,
    /// Relative tolerance for the value-equality check; compared against
    /// `max(tol, tol * |value|)` since it spans two independent solves.
    pub value_rel_tol: f64,
    /// Number of random admissible competitor plans for the dominance
    /// self-test; 0 disables it.
    pub competitor_samples: usize,
    /// Seed for the competitor sampler.
    pub seed: u64,
}

impl Default for CertificationOptions {
    fn default() -> Self {
        CertificationOptions {
            solver: SolverOptions::default(),
            value_rel_tol: 1e-6,
            competitor_samples: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfTestReport {
    pub competitors: usize,
    /// Largest nodewise amount by which a lifted consumption fell short of
    /// the original (should be <= 0 up to rounding).
    pub max_lift_shortfall: f64,
    /// Largest amount by which a competitor's cost-market value exceeded the
    /// certified frictionless value (should be <= 0 up to rounding).
    pub max_value_excess: f64,
    pub passed: bool,
}

/// All check outcomes embedded in a certificate.
#[derive(Debug, Clone)]
pub struct CertificateChecks {
    pub value_gap: f64,
    pub value_tolerance: f64,
    /// Pre-clamp overshoot of the multiplier ratio past the spread.
    pub bounds_slack: f64,
    pub complementarity: ComplementarityReport,
    pub martingale_residual: f64,
    pub marginal_utility: MarginalUtilityReport,
    pub budget_residual: f64,
    pub self_test: Option<SelfTestReport>,
}

/// Outcome of the full pipeline on one market.
#[derive(Debug, Clone)]
pub struct ShadowCertificate {
    pub shadow: ShadowPrice,
    pub cps: ConsistentPriceSystem,
    pub cost_solution: KktSolution,
    pub frictionless_solution: KktSolution,
    /// Maximal expected utility in the bid/ask market.
    pub value_costs: f64,
    /// Maximal expected utility trading frictionlessly at the shadow price.
    pub value_frictionless: f64,
    pub checks: CertificateChecks,
    /// Names of failed checks; empty iff the certificate is valid.
    pub failures: Vec<String>,
    pub valid: bool,
    /// The multipliers were not unique; the certified price is one valid
    /// shadow price among several.
    pub degenerate_duals: bool,
}

/// Solves the market, extracts the shadow price, re-solves the frictionless
/// market at that price and verifies every identity the construction
/// promises. A certificate with `valid = false` names the failing checks;
/// solver-level failures surface as errors.
/// Runs a solve and, on a marginal iteration-limit failure, retries along a
/// different barrier path before giving up.
fn solve_resilient<F>(run: F, base: &SolverOptions) -> Result<KktSolution, SolverError>
where
    F: Fn(&SolverOptions) -> Result<KktSolution, SolverError>,
{
    let mut last = match run(base) {
        Ok(s) => return Ok(s),
        Err(e @ SolverError::MaxIterations { .. }) => e,
        Err(e) => return Err(e),
    };
    for variant in [
        SolverOptions {
            initial_barrier: 0.1,
            max_iterations: base.max_iterations + 100,
            ..*base
        },
        SolverOptions {
            barrier_reduction: 0.1,
            max_iterations: base.max_iterations + 200,
            ..*base
        },
    ] {
        match run(&variant) {
            Ok(s) => return Ok(s),
            Err(e @ SolverError::MaxIterations { .. }) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

pub fn certify(
    market: &MarketSpec,
    options: &CertificationOptions,
) -> Result<ShadowCertificate, CertifyError> {
    let tree = &market.tree;
    let program = ConvexProgram::assemble(market);
    let cost_solution = solve_resilient(|o| solve(&program, o), &options.solver)?;
    let shadow = extract_shadow_price(market, &cost_solution)?;
    let bounds_slack = ratio_bounds_slack(market, &cost_solution);
    let cps = build_cps(tree, &cost_solution.nu, &shadow.price)?;
    let frictionless_solution = solve_resilient(
        |o| solve_frictionless(market, &shadow.price, o),
        &options.solver,
    )?;

    let value_costs = cost_solution.expected_utility;
    let value_frictionless = frictionless_solution.expected_utility;
    let value_gap = (value_costs - value_frictionless).abs();
    let value_tolerance = options.value_rel_tol.max(options.value_rel_tol * value_costs.abs());

    let complementarity = check_complementarity(market, &cost_solution, &shadow);
    let martingale_residual = check_martingale(tree, &cps);
    let marginal_utility =
        check_marginal_utility(market, &cps, &cost_solution.consumption, cps.alpha);
    let pair = cost_solution.to_pair(market);
    let budget_residual = budget_constraint(tree, &pair, &cps);

    let self_test = if options.competitor_samples > 0 {
        Some(competitor_self_test(
            market,
            &shadow.price,
            value_frictionless,
            options.competitor_samples,
            options.seed,
        ))
    } else {
        None
    };

    let mut failures = Vec::new();
    if value_gap > value_tolerance {
        failures.push(format!(
            "value equality: gap {value_gap:.3e} exceeds {value_tolerance:.3e}"
        ));
    }
    if bounds_slack > BOUNDS_TOL {
        failures.push(format!("shadow price bounds: slack {bounds_slack:.3e}"));
    }
    if !complementarity.passed() {
        failures.push(format!(
            "complementarity: {} active trades off the book",
            complementarity.violations.len()
        ));
    }
    if martingale_residual > MARTINGALE_TOL {
        failures.push(format!("martingale: residual {martingale_residual:.3e}"));
    }
    if !marginal_utility.passed() {
        failures.push(format!(
            "marginal utility: residual {:.3e}",
            marginal_utility.max_residual
        ));
    }
    if budget_residual > BUDGET_TOL {
        failures.push(format!("budget: residual {budget_residual:.3e}"));
    }
    if let Some(ref st) = self_test {
        if !st.passed {
            failures.push(format!(
                "competitor dominance: shortfall {:.3e}, excess {:.3e}",
                st.max_lift_shortfall, st.max_value_excess
            ));
        }
    }

    let degenerate_duals = cost_solution.degenerate_duals;
    Ok(ShadowCertificate {
        shadow,
        cps,
        value_costs,
        value_frictionless,
        checks: CertificateChecks {
            value_gap,
            value_tolerance,
            bounds_slack,
            complementarity,
            martingale_residual,
            marginal_utility,
            budget_residual,
            self_test,
        },
        valid: failures.is_empty(),
        failures,
        cost_solution,
        frictionless_solution,
        degenerate_duals,
    })
}

/// Pre-clamp overshoot of the dual ratio against the spread, maximized over
/// all nodes and assets.
fn ratio_bounds_slack(market: &MarketSpec, solution: &KktSolution) -> f64 {
    let tree = &market.tree;
    let d = market.assets;
    if d == 0 {
        return 0.0;
    }
    let nu_sums = tree.terminal_sums(&solution.nu, 1);
    let mu_sums = tree.terminal_sums(&solution.mu, d);
    let mut slack = 0.0f64;
    for t in 0..=tree.horizon() {
        for j in 0..tree.level_size(t) {
            for i in 0..d {
                let ratio = mu_sums[t][j * d + i] / nu_sums[t][j];
                slack = slack
                    .max(market.bid.get(t, j, i) - ratio)
                    .max(ratio - market.ask.get(t, j, i));
            }
        }
    }
    slack.max(0.0)
}

/// Samples random admissible plans, lifts each into the frictionless shadow
/// market and checks the two dominance inequalities.
fn competitor_self_test(
    market: &MarketSpec,
    shadow: &AdaptedProcess,
    value_frictionless: f64,
    samples: usize,
    seed: u64,
) -> SelfTestReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_shortfall = f64::NEG_INFINITY;
    let mut max_excess = f64::NEG_INFINITY;
    for _ in 0..samples {
        let pair = crate::instances::random_admissible_pair(&mut rng, market);
        let lifted = lift_to_frictionless(market, &pair, shadow);
        for t in 0..=market.horizon() {
            for j in 0..market.tree.level_size(t) {
                let shortfall =
                    pair.consumption.get(t, j, 0) - lifted.consumption.get(t, j, 0);
                max_shortfall = max_shortfall.max(shortfall);
            }
        }
        let value = expected_utility(market, &pair.consumption);
        if value.is_finite() {
            max_excess = max_excess.max(value - value_frictionless);
        }
        debug_assert!(
            crate::market::self_financing_residual(market, &pair)
                .map(|r| r.max_abs() <= SELF_FINANCING_TOL)
                .unwrap_or(false),
            "competitor sampler produced a non-self-financing plan"
        );
    }
    let passed = max_shortfall <= DOMINANCE_TOL && max_excess <= DOMINANCE_TOL;
    SelfTestReport {
        competitors: samples,
        max_lift_shortfall: max_shortfall,
        max_value_excess: max_excess,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::program::ConvexProgram;

    fn solved(market: &MarketSpec) -> KktSolution {
        let program = ConvexProgram::assemble(market);
        solve(&program, &SolverOptions::default()).unwrap()
    }

    #[test]
    fn b2_measure_and_density() {
        let market = fixtures::b2();
        let solution = solved(&market);
        let shadow = extract_shadow_price(&market, &solution).unwrap();
        let cps = build_cps(&market.tree, &solution.nu, &shadow.price).unwrap();
        assert!((cps.q[0] - 0.2).abs() < 1e-5);
        assert!((cps.q[1] - 0.8).abs() < 1e-5);
        assert!((cps.alpha - 1.0).abs() < 1e-5);
        assert!((cps.density.get(0, 0, 0) - 1.0).abs() < 1e-12);
        // Terminal density is proportional to marginal utility 1/c.
        assert!((cps.density.get(1, 0, 0) - 0.4).abs() < 1e-5);
        assert!((cps.density.get(1, 1, 0) - 1.6).abs() < 1e-5);
        assert!(check_martingale(&market.tree, &cps) <= 1e-10);
        let marginal =
            check_marginal_utility(&market, &cps, &solution.consumption, cps.alpha);
        assert!(marginal.passed(), "residual {}", marginal.max_residual);
    }

    #[test]
    fn b1_measure_is_the_reference_measure() {
        let market = fixtures::b1();
        let solution = solved(&market);
        let shadow = extract_shadow_price(&market, &solution).unwrap();
        let cps = build_cps(&market.tree, &solution.nu, &shadow.price).unwrap();
        assert!((cps.q[0] - 0.5).abs() < 1e-6);
        assert!((cps.q[1] - 0.5).abs() < 1e-6);
        for t in 0..=1 {
            for j in 0..market.tree.level_size(t) {
                assert!((cps.density.get(t, j, 0) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_atom_cps_is_trivial() {
        let tree = ScenarioTree::trivial();
        let shadow = AdaptedProcess::zeros(&tree, 0);
        let cps = build_cps(&tree, &[-0.7], &shadow).unwrap();
        assert_eq!(cps.q, vec![1.0]);
        assert!((cps.alpha - 0.7).abs() < 1e-15);
        assert_eq!(cps.density.get(0, 0, 0), 1.0);
    }

    #[test]
    fn constant_price_is_a_martingale_under_any_measure() {
        let tree = fixtures::binomial_tree();
        let shadow = AdaptedProcess::from_fn(&tree, 1, |_, _| vec![2.0]);
        let cps = build_cps(&tree, &[-0.3, -0.9], &shadow).unwrap();
        assert!(check_martingale(&tree, &cps) <= 1e-15);
    }

    #[test]
    fn budget_identity_on_fixtures() {
        for market in [fixtures::b1(), fixtures::b2()] {
            let solution = solved(&market);
            let shadow = extract_shadow_price(&market, &solution).unwrap();
            let cps = build_cps(&market.tree, &solution.nu, &shadow.price).unwrap();
            let pair = solution.to_pair(&market);
            assert!(budget_constraint(&market.tree, &pair, &cps) <= 1e-8);
        }
    }

    #[test]
    fn corrupted_alpha_fails_marginal_membership() {
        let market = fixtures::b2();
        let solution = solved(&market);
        let shadow = extract_shadow_price(&market, &solution).unwrap();
        let cps = build_cps(&market.tree, &solution.nu, &shadow.price).unwrap();
        let report =
            check_marginal_utility(&market, &cps, &solution.consumption, cps.alpha * 2.0);
        // Every smooth node violates membership under the wrong scale.
        assert!(!report.passed());
        assert_eq!(report.violations.len(), 2);
    }

    #[test]
    fn lift_of_no_trade_plan_is_identity() {
        let market = fixtures::b1();
        let pair = fixtures::liquidation_plan(&market);
        let shadow = market.bid.clone();
        let lifted = lift_to_frictionless(&market, &pair, &shadow);
        assert_eq!(lifted.consumption, pair.consumption);
    }

    #[test]
    fn lift_credits_the_clumsy_side() {
        // Sell at the bid where the shadow price sits at the ask: the lifted
        // plan consumes the spread on the traded volume.
        let market = fixtures::b2();
        let tree = &market.tree;
        // Short one share at time 0 (sold at bid 0.6), cover at time 1 at
        // the pinched terminal price, consume the remainder.
        let mut shares = crate::tree::PredictableProcess::zeros(tree, 1);
        shares.set(1, 0, 0, -1.0);
        let mut bank = crate::tree::PredictableProcess::zeros(tree, 1);
        bank.set(0, 0, 0, 1.0);
        bank.set(1, 0, 0, 1.6);
        let mut consumption = AdaptedProcess::zeros(tree, 1);
        for j in 0..2 {
            let buyback = [1.5, 0.5][j];
            consumption.set(1, j, 0, 1.6 - buyback);
        }
        let pair = PortfolioConsumptionPair {
            bank,
            shares,
            consumption,
        };
        assert!(crate::market::is_self_financing(&market, &pair).unwrap());

        // Shadow price pinned to the ask at the root.
        let shadow = AdaptedProcess::from_fn(tree, 1, |t, j| {
            vec![if t == 0 {
                0.7
            } else {
                [1.5, 0.5][j]
            }]
        });
        let lifted = lift_to_frictionless(&market, &pair, &shadow);
        // Sale of one share at bid 0.6 against shadow 0.7 gains 0.1 at t=0.
        assert!((lifted.consumption.get(0, 0, 0) - 0.1).abs() < 1e-12);
        for j in 0..2 {
            assert_eq!(
                lifted.consumption.get(1, j, 0),
                pair.consumption.get(1, j, 0)
            );
        }
    }

    #[test]
    fn b1_certificate_is_valid() {
        let market = fixtures::b1();
        let cert = certify(&market, &CertificationOptions::default()).unwrap();
        assert!(cert.valid, "failures: {:?}", cert.failures);
        assert!(cert.value_costs.abs() < 1e-8);
        assert!((cert.shadow.price.get(0, 0, 0) - 1.0).abs() < 1e-6);
        assert!(cert.checks.self_test.as_ref().unwrap().passed);
    }

    #[test]
    fn b2_certificate_is_valid() {
        let market = fixtures::b2();
        let cert = certify(&market, &CertificationOptions::default()).unwrap();
        assert!(cert.valid, "failures: {:?}", cert.failures);
        assert!((cert.value_costs - 1.25f64.ln()).abs() < 1e-7);
        assert!((cert.value_frictionless - cert.value_costs).abs() <= cert.checks.value_tolerance);
        assert!((cert.shadow.price.get(0, 0, 0) - 0.7).abs() < 1e-6);
    }

    #[test]
    fn frictionless_input_gives_degenerate_trivial_certificate() {
        let market = fixtures::b1();
        let mid = AdaptedProcess::from_fn(&market.tree, 1, |t, j| {
            vec![(market.bid.get(t, j, 0) + market.ask.get(t, j, 0)) / 2.0]
        });
        let frictionless = market.frictionless_at(&mid).unwrap();
        let cert = certify(&frictionless, &CertificationOptions::default()).unwrap();
        assert!(cert.valid, "failures: {:?}", cert.failures);
        for t in 0..=1 {
            for j in 0..frictionless.tree.level_size(t) {
                assert_eq!(cert.shadow.price.get(t, j, 0), mid.get(t, j, 0));
            }
        }
    }
}
