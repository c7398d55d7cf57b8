//! Certification reports: one human-readable and one machine-readable form.
//!
//! The structured form is a single JSON document embedding the SHA-256 of the
//! input it was produced from. All numbers are rounded to 12 significant
//! digits when the report is built, so rendering and re-parsing the document
//! reproduces the report exactly and two runs on identical input are
//! byte-identical. Wall-clock time is deliberately not part of the report.

use crate::cps::{SelfTestReport, ShadowCertificate};
use crate::market::MarketSpec;
use crate::program::ResidualSummary;
use crate::shadow::Provenance;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Rounds to 12 significant digits; non-finite values are clamped to the
/// largest finite ones so the document stays valid JSON.
fn sig12(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if !x.is_finite() {
        return if x < 0.0 { f64::MIN } else { f64::MAX };
    }
    format!("{x:.11e}").parse().expect("formatted float re-parses")
}

fn sig12_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| sig12(x)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRow {
    pub t: usize,
    pub atom: usize,
    pub asset: usize,
    pub buy: f64,
    pub sell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionRow {
    pub t: usize,
    pub atom: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowRow {
    pub t: usize,
    pub atom: usize,
    pub asset: usize,
    pub bid: f64,
    pub ask: f64,
    pub price: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub t: usize,
    pub atom: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub nu: Vec<f64>,
    pub mu: Vec<f64>,
    pub lambda_up: Vec<Vec<f64>>,
    pub lambda_down: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub kkt: ResidualSummary,
    pub martingale: f64,
    pub marginal_utility: f64,
    pub budget: f64,
    pub bounds_slack: f64,
    pub value_gap: f64,
    pub value_tolerance: f64,
    pub complementarity_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTestBlock {
    pub competitors: usize,
    pub max_lift_shortfall: f64,
    pub max_value_excess: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleBlock {
    pub value: f64,
    pub gap: f64,
    pub error_bound: f64,
    pub evaluations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverBlock {
    pub tolerance: f64,
    pub iterations_costs: usize,
    pub iterations_frictionless: usize,
    pub degenerate_duals: bool,
}

/// Machine-readable certification outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub input_sha256: String,
    pub horizon: usize,
    pub assets: usize,
    pub atoms: usize,
    pub valid: bool,
    pub failures: Vec<String>,
    pub value_costs: f64,
    pub value_frictionless: f64,
    pub alpha: f64,
    pub q: Vec<f64>,
    pub plan: Vec<TradeRow>,
    pub consumption: Vec<ConsumptionRow>,
    pub shadow: Vec<ShadowRow>,
    pub density: Vec<DensityRow>,
    pub multipliers: Multipliers,
    pub residuals: ResidualBlock,
    pub self_test: Option<SelfTestBlock>,
    pub oracle: Option<OracleBlock>,
    pub solver: SolverBlock,
}

impl Report {
    pub fn new(
        input: &[u8],
        market: &MarketSpec,
        certificate: &ShadowCertificate,
        oracle: Option<OracleBlock>,
        tolerance: f64,
    ) -> Report {
        let tree = &market.tree;
        let d = market.assets;
        let sol = &certificate.cost_solution;

        let mut plan = Vec::new();
        let mut consumption = Vec::new();
        let mut shadow = Vec::new();
        let mut density = Vec::new();
        for t in 0..=tree.horizon() {
            for j in 0..tree.level_size(t) {
                for i in 0..d {
                    plan.push(TradeRow {
                        t,
                        atom: j,
                        asset: i,
                        buy: sig12(sol.purchases.get(t + 1, j, i)),
                        sell: sig12(sol.sales.get(t + 1, j, i)),
                    });
                    shadow.push(ShadowRow {
                        t,
                        atom: j,
                        asset: i,
                        bid: sig12(market.bid.get(t, j, i)),
                        ask: sig12(market.ask.get(t, j, i)),
                        price: sig12(certificate.shadow.price.get(t, j, i)),
                        provenance: certificate.shadow.provenance[t][j * d + i],
                    });
                }
                consumption.push(ConsumptionRow {
                    t,
                    atom: j,
                    value: sig12(sol.consumption.get(t, j, 0)),
                });
                density.push(DensityRow {
                    t,
                    atom: j,
                    value: sig12(certificate.cps.density.get(t, j, 0)),
                });
            }
        }

        let checks = &certificate.checks;
        Report {
            format_version: 1,
            input_sha256: hex::encode(Sha256::digest(input)),
            horizon: tree.horizon(),
            assets: d,
            atoms: tree.total_atoms(),
            valid: certificate.valid,
            failures: certificate.failures.clone(),
            value_costs: sig12(certificate.value_costs),
            value_frictionless: sig12(certificate.value_frictionless),
            alpha: sig12(certificate.cps.alpha),
            q: sig12_vec(&certificate.cps.q),
            plan,
            consumption,
            shadow,
            density,
            multipliers: Multipliers {
                nu: sig12_vec(&sol.nu),
                mu: sig12_vec(&sol.mu),
                lambda_up: sol.lambda_up.iter().map(|l| sig12_vec(l)).collect(),
                lambda_down: sol.lambda_down.iter().map(|l| sig12_vec(l)).collect(),
            },
            residuals: ResidualBlock {
                kkt: ResidualSummary {
                    stationarity: sig12(sol.residuals.stationarity),
                    feasibility: sig12(sol.residuals.feasibility),
                    complementarity: sig12(sol.residuals.complementarity),
                },
                martingale: sig12(checks.martingale_residual),
                marginal_utility: sig12(checks.marginal_utility.max_residual),
                budget: sig12(checks.budget_residual),
                bounds_slack: sig12(checks.bounds_slack),
                value_gap: sig12(checks.value_gap),
                value_tolerance: sig12(checks.value_tolerance),
                complementarity_violations: checks.complementarity.violations.len(),
            },
            self_test: checks.self_test.as_ref().map(|st: &SelfTestReport| SelfTestBlock {
                competitors: st.competitors,
                max_lift_shortfall: sig12(st.max_lift_shortfall),
                max_value_excess: sig12(st.max_value_excess),
                passed: st.passed,
            }),
            oracle: oracle.map(|o| OracleBlock {
                value: sig12(o.value),
                gap: sig12(o.gap),
                error_bound: sig12(o.error_bound),
                evaluations: o.evaluations,
            }),
            solver: SolverBlock {
                tolerance: sig12(tolerance),
                iterations_costs: sol.iterations,
                iterations_frictionless: certificate.frictionless_solution.iterations,
                degenerate_duals: certificate.degenerate_duals,
            },
        }
    }

    /// Deterministic single-document rendering.
    pub fn render_structured(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn parse_structured(text: &str) -> Result<Report, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let push = |out: &mut String, line: String| {
            out.push_str(&line);
            out.push('\n');
        };
        push(&mut out, format!("certificate: {}", if self.valid { "VALID" } else { "INVALID" }));
        for f in &self.failures {
            push(&mut out, format!("  failed: {f}"));
        }
        push(
            &mut out,
            format!(
                "market: horizon {}, {} risky asset(s), {} atoms (input sha256 {})",
                self.horizon,
                self.assets,
                self.atoms,
                &self.input_sha256[..16]
            ),
        );
        push(
            &mut out,
            format!(
                "values: with costs {:.12}, frictionless at shadow price {:.12} (gap {:.3e}, tol {:.3e})",
                self.value_costs,
                self.value_frictionless,
                self.residuals.value_gap,
                self.residuals.value_tolerance
            ),
        );
        if self.solver.degenerate_duals {
            push(
                &mut out,
                "note: multipliers not unique; this is one valid shadow price".to_string(),
            );
        }
        push(&mut out, "shadow price:".to_string());
        for row in &self.shadow {
            push(
                &mut out,
                format!(
                    "  t={} atom={} asset={}: {:.9} in [{:.9}, {:.9}] ({:?})",
                    row.t, row.atom, row.asset, row.price, row.bid, row.ask, row.provenance
                ),
            );
        }
        push(&mut out, "plan (nonzero trades):".to_string());
        let mut any = false;
        for row in &self.plan {
            if row.buy.max(row.sell) > crate::shadow::ACTIVITY_THRESHOLD {
                any = true;
                push(
                    &mut out,
                    format!(
                        "  t={} atom={} asset={}: buy {:.9}, sell {:.9}",
                        row.t, row.atom, row.asset, row.buy, row.sell
                    ),
                );
            }
        }
        if !any {
            push(&mut out, "  (no trading)".to_string());
        }
        push(&mut out, "consumption:".to_string());
        for row in &self.consumption {
            push(
                &mut out,
                format!("  t={} atom={}: {:.9}", row.t, row.atom, row.value),
            );
        }
        push(
            &mut out,
            format!(
                "pricing measure: alpha {:.9}, q {:?}",
                self.alpha,
                self.q.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>()
            ),
        );
        push(
            &mut out,
            format!(
                "residuals: kkt(stationarity {:.2e}, feasibility {:.2e}, complementarity {:.2e}), martingale {:.2e}, marginal {:.2e}, budget {:.2e}, bounds {:.2e}",
                self.residuals.kkt.stationarity,
                self.residuals.kkt.feasibility,
                self.residuals.kkt.complementarity,
                self.residuals.martingale,
                self.residuals.marginal_utility,
                self.residuals.budget,
                self.residuals.bounds_slack
            ),
        );
        if let Some(st) = &self.self_test {
            push(
                &mut out,
                format!(
                    "competitor self-test: {} plans, lift shortfall {:.2e}, value excess {:.2e} -> {}",
                    st.competitors,
                    st.max_lift_shortfall,
                    st.max_value_excess,
                    if st.passed { "pass" } else { "FAIL" }
                ),
            );
        }
        if let Some(o) = &self.oracle {
            push(
                &mut out,
                format!(
                    "oracle: value {:.9}, gap {:.3e} (error bound {:.1e}, {} evaluations)",
                    o.value, o.gap, o.error_bound, o.evaluations
                ),
            );
        }
        push(
            &mut out,
            format!(
                "solver: tolerance {:.1e}, iterations {} + {}",
                self.solver.tolerance,
                self.solver.iterations_costs,
                self.solver.iterations_frictionless
            ),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cps::{certify, CertificationOptions};
    use crate::fixtures;

    #[test]
    fn structured_report_round_trips() {
        let market = fixtures::b2();
        let cert = certify(&market, &CertificationOptions::default()).unwrap();
        let report = Report::new(b"input bytes", &market, &cert, None, 1e-9);
        let rendered = report.render_structured();
        let parsed = Report::parse_structured(&rendered).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn rendering_is_deterministic() {
        let market = fixtures::b1();
        let opts = CertificationOptions::default();
        let a = Report::new(
            b"x",
            &market,
            &certify(&market, &opts).unwrap(),
            None,
            1e-9,
        );
        let b = Report::new(
            b"x",
            &market,
            &certify(&market, &opts).unwrap(),
            None,
            1e-9,
        );
        assert_eq!(a.render_structured(), b.render_structured());
    }

    #[test]
    fn sig12_rounds_and_clamps() {
        assert_eq!(sig12(0.0), 0.0);
        assert_eq!(sig12(1.0 / 3.0), 0.333333333333);
        assert_eq!(sig12(f64::INFINITY), f64::MAX);
        assert_eq!(sig12(f64::NEG_INFINITY), f64::MIN);
        let x = 0.1 + 0.2;
        assert_eq!(sig12(x), 0.3);
    }
}

