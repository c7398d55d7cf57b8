//! Market description files.
//!
//! TOML documents with four sections (`tree`, `assets`, `endowment`,
//! `utility`) and an optional `numeraire` for undiscounted inputs. The
//! complete grammar lives in `docs/market_format.md`; `fixtures/b1.toml` and
//! `fixtures/b2.toml` are complete examples. Semantic errors name the
//! offending field.

use crate::market::{discount_normalize, MarketSpec};
use crate::tree::{AdaptedProcess, PredictableProcess, ScenarioTree};
use crate::utility::{NodeUtility, UtilityProcess};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketFileError {
    #[error("TOML parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid field {field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> MarketFileError {
    MarketFileError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketDocument {
    tree: TreeSection,
    assets: AssetsSection,
    endowment: EndowmentSection,
    utility: UtilitySection,
    numeraire: Option<NumeraireSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeSection {
    /// Parent index per atom, one list per level `1..=T`.
    parents: Vec<Vec<usize>>,
    /// Probability per atom, aligned with `parents`.
    probs: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssetsSection {
    count: usize,
    /// Explicit books: one flat list per level, atom-major then asset.
    bid: Option<Vec<Vec<f64>>>,
    ask: Option<Vec<Vec<f64>>>,
    /// Mid-price alternative with proportional cost rates.
    mid: Option<Vec<Vec<f64>>>,
    buy_cost: Option<f64>,
    sell_cost: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EndowmentSection {
    bank: f64,
    shares: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtilitySection {
    /// log | power | exponential | affine_zero | terminal_wealth
    kind: String,
    power: Option<f64>,
    rate: Option<f64>,
    /// Domain floor for `affine_zero`.
    floor: Option<f64>,
    /// Per-time discount weights `D_t`, defaults to 1.
    discount: Option<Vec<f64>>,
    /// Horizon utility when `kind = "terminal_wealth"`.
    terminal: Option<TerminalSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TerminalSection {
    kind: String,
    power: Option<f64>,
    rate: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NumeraireSection {
    /// Deterministic bank price per time `0..=T`.
    values: Vec<f64>,
}

/// Parses a market document into a validated [`MarketSpec`].
pub fn parse_market(text: &str) -> Result<MarketSpec, MarketFileError> {
    let doc: MarketDocument = toml::from_str(text)?;
    build_market(&doc)
}

fn build_market(doc: &MarketDocument) -> Result<MarketSpec, MarketFileError> {
    if doc.tree.parents.len() != doc.tree.probs.len() {
        return Err(invalid(
            "tree.probs",
            "must have one list per level, aligned with tree.parents",
        ));
    }
    let mut level_spec: Vec<Vec<(usize, f64)>> = vec![vec![(0, 1.0)]];
    for (parents, probs) in doc.tree.parents.iter().zip(&doc.tree.probs) {
        if parents.len() != probs.len() {
            return Err(invalid(
                "tree.probs",
                "each level must list one probability per parent entry",
            ));
        }
        level_spec.push(parents.iter().copied().zip(probs.iter().copied()).collect());
    }
    let tree = ScenarioTree::build(&level_spec)
        .map_err(|e| invalid("tree", e.to_string()))?;
    let horizon = tree.horizon();
    let d = doc.assets.count;

    let levels_from = |field: &str, raw: &Vec<Vec<f64>>| -> Result<AdaptedProcess, MarketFileError> {
        AdaptedProcess::from_levels(&tree, d, raw.clone())
            .map_err(|e| invalid(field, e.to_string()))
    };

    let (bid, ask) = match (&doc.assets.bid, &doc.assets.ask, &doc.assets.mid) {
        (Some(b), Some(a), None) => {
            if doc.assets.buy_cost.is_some() || doc.assets.sell_cost.is_some() {
                return Err(invalid(
                    "assets.buy_cost",
                    "cost rates only apply to the mid-price form",
                ));
            }
            (levels_from("assets.bid", b)?, levels_from("assets.ask", a)?)
        }
        (None, None, Some(m)) => {
            let mid = levels_from("assets.mid", m)?;
            let buy = doc.assets.buy_cost.unwrap_or(0.0);
            let sell = doc.assets.sell_cost.unwrap_or(0.0);
            if buy < 0.0 {
                return Err(invalid("assets.buy_cost", "must be nonnegative"));
            }
            if !(0.0..1.0).contains(&sell) {
                return Err(invalid("assets.sell_cost", "must lie in [0, 1)"));
            }
            MarketSpec::from_mid_price(&tree, &mid, buy, sell)
                .map_err(|e| invalid("assets.mid", e.to_string()))?
        }
        _ => {
            return Err(invalid(
                "assets",
                "provide either bid and ask, or mid (optionally with buy_cost/sell_cost)",
            ))
        }
    };

    if doc.endowment.shares.len() != d {
        return Err(invalid(
            "endowment.shares",
            format!("expected {d} components for assets.count = {d}"),
        ));
    }

    let discounts = match &doc.utility.discount {
        Some(values) => {
            if values.len() != horizon + 1 {
                return Err(invalid(
                    "utility.discount",
                    format!("expected {} per-time weights", horizon + 1),
                ));
            }
            if let Some(&bad) = values.iter().find(|&&v| !(v > 0.0)) {
                return Err(invalid(
                    "utility.discount",
                    format!("weights must be positive, got {bad}"),
                ));
            }
            values.clone()
        }
        None => vec![1.0; horizon + 1],
    };

    let per_time: Vec<NodeUtility> = if doc.utility.kind == "terminal_wealth" {
        let terminal = doc
            .utility
            .terminal
            .as_ref()
            .ok_or_else(|| invalid("utility.terminal", "required for kind = terminal_wealth"))?;
        let node = base_utility(
            "utility.terminal.kind",
            &terminal.kind,
            terminal.power,
            terminal.rate,
            None,
        )?;
        (0..=horizon)
            .map(|t| {
                if t < horizon {
                    NodeUtility::affine_zero(0.0)
                } else {
                    node.with_weight(discounts[t])
                }
            })
            .collect()
    } else {
        let node = base_utility(
            "utility.kind",
            &doc.utility.kind,
            doc.utility.power,
            doc.utility.rate,
            doc.utility.floor,
        )?;
        (0..=horizon)
            .map(|t| node.with_weight(node.weight * discounts[t]))
            .collect()
    };
    let utility = UtilityProcess::per_time(&tree, &per_time)
        .map_err(|e| invalid("utility", e.to_string()))?;

    match &doc.numeraire {
        Some(section) => {
            if section.values.len() != horizon + 1 {
                return Err(invalid(
                    "numeraire.values",
                    format!("expected {} per-time values", horizon + 1),
                ));
            }
            if let Some(&bad) = section.values.iter().find(|&&v| !(v > 0.0)) {
                return Err(invalid(
                    "numeraire.values",
                    format!("values must be strictly positive, got {bad}"),
                ));
            }
            let values = section.values.clone();
            let numeraire = PredictableProcess::from_fn(&tree, 1, |t, _| {
                vec![values[t.min(horizon)]]
            });
            discount_normalize(
                &tree,
                &numeraire,
                &bid,
                &ask,
                &utility,
                doc.endowment.bank,
                doc.endowment.shares.clone(),
            )
            .map_err(|e| invalid("numeraire", e.to_string()))
        }
        None => MarketSpec::new(
            tree,
            bid,
            ask,
            doc.endowment.bank,
            doc.endowment.shares.clone(),
            utility,
        )
        .map_err(|e| invalid("market", e.to_string())),
    }
}

fn base_utility(
    field: &str,
    kind: &str,
    power: Option<f64>,
    rate: Option<f64>,
    floor: Option<f64>,
) -> Result<NodeUtility, MarketFileError> {
    match kind {
        "log" => Ok(NodeUtility::log()),
        "power" => {
            let p = power.ok_or_else(|| invalid(field, "power kind requires `power = p`"))?;
            NodeUtility::power(p).map_err(|e| invalid(field, e.to_string()))
        }
        "exponential" => {
            let p = rate.ok_or_else(|| invalid(field, "exponential kind requires `rate = p`"))?;
            NodeUtility::exponential(p).map_err(|e| invalid(field, e.to_string()))
        }
        "affine_zero" => Ok(NodeUtility::affine_zero(floor.unwrap_or(0.0))),
        other => Err(invalid(
            field,
            format!("unknown utility kind {other:?}; expected log, power, exponential, affine_zero or terminal_wealth"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const B2: &str = r#"
[tree]
parents = [[0, 0]]
probs = [[0.5, 0.5]]

[assets]
count = 1
bid = [[0.6], [1.5, 0.5]]
ask = [[0.7], [1.5, 0.5]]

[endowment]
bank = 1.0
shares = [0.0]

[utility]
kind = "terminal_wealth"
terminal = { kind = "log" }
"#;

    #[test]
    fn b2_round_trips_through_the_parser() {
        let market = parse_market(B2).unwrap();
        assert_eq!(market.horizon(), 1);
        assert_eq!(market.assets, 1);
        assert!((market.ask.get(0, 0, 0) - 0.7).abs() < 1e-15);
        let reference = crate::fixtures::b2();
        assert_eq!(market.bid, reference.bid);
        assert_eq!(market.ask, reference.ask);
    }

    #[test]
    fn mid_price_form_with_costs() {
        let text = r#"
[tree]
parents = [[0, 0]]
probs = [[0.5, 0.5]]

[assets]
count = 1
mid = [[1.0], [1.5, 0.5]]
buy_cost = 0.1
sell_cost = 0.1

[endowment]
bank = 1.0
shares = [0.0]

[utility]
kind = "terminal_wealth"
terminal = { kind = "log" }
"#;
        let market = parse_market(text).unwrap();
        assert!((market.bid.get(0, 0, 0) - 0.9).abs() < 1e-15);
        assert!((market.ask.get(0, 0, 0) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_cost_rate_names_the_field() {
        let text = r#"
[tree]
parents = [[0, 0]]
probs = [[0.5, 0.5]]

[assets]
count = 1
mid = [[1.0], [1.5, 0.5]]
sell_cost = 1.5

[endowment]
bank = 1.0
shares = [0.0]

[utility]
kind = "log"
"#;
        let err = parse_market(text).unwrap_err();
        match err {
            MarketFileError::Invalid { field, .. } => assert_eq!(field, "assets.sell_cost"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn numeraire_rescales_prices() {
        let text = r#"
[tree]
parents = [[0, 0]]
probs = [[0.5, 0.5]]

[assets]
count = 1
bid = [[1.0], [1.65, 0.55]]
ask = [[1.0], [1.65, 0.55]]

[endowment]
bank = 1.0
shares = [0.0]

[utility]
kind = "terminal_wealth"
terminal = { kind = "log" }

[numeraire]
values = [1.0, 1.1]
"#;
        let market = parse_market(text).unwrap();
        assert!((market.bid.get(1, 0, 0) - 1.5).abs() < 1e-12);
        assert!((market.bid.get(1, 1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn toml_syntax_errors_surface() {
        let err = parse_market("not toml at all [").unwrap_err();
        assert!(matches!(err, MarketFileError::Toml(_)));
    }
}
