//! Optimal investment/consumption on finite scenario trees with proportional
//! transaction costs.
//!
//! The library solves the planning problem as a finite-dimensional convex
//! program with an interior-point method, reads a shadow price process out of
//! the Lagrange multipliers, builds the associated consistent price system
//! (pricing measure, density process) and certifies numerically that trading
//! frictionlessly at the shadow price achieves the same maximal utility as
//! the original bid/ask market.
//!
//! Start from the runnable programs in `examples/`; each one exercises a
//! major capability end to end. The `shadowprice` binary wraps the same
//! pipeline behind a market-description file format.

pub mod cli;
pub mod cps;
pub mod fixtures;
pub mod instances;
pub mod market;
pub mod marketfile;
pub mod oracle;
pub mod program;
pub mod report;
pub mod shadow;
pub mod solver;
pub mod tree;
pub mod utility;

pub use cps::{
    budget_constraint, build_cps, certify, check_marginal_utility, check_martingale,
    lift_to_frictionless, CertificationOptions, CertifyError, ConsistentPriceSystem,
    ShadowCertificate,
};
pub use oracle::{brute_force_value, GridSpec, OracleError, OracleResult};
pub use market::{
    discount_normalize, expected_utility, is_admissible, is_self_financing, split_trades,
    MarketError, MarketSpec, PortfolioConsumptionPair,
};
pub use program::{ConvexProgram, KktSolution, ResidualSummary};
pub use shadow::{
    check_complementarity, extract_shadow_price, implied_lambdas, Provenance, ShadowPrice,
};
pub use solver::{solve, solve_frictionless, SolverError, SolverOptions};
pub use tree::{AdaptedProcess, PredictableProcess, ScenarioTree};
pub use utility::{NodeUtility, UtilityKind, UtilityProcess};
