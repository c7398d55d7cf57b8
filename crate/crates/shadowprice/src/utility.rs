//! Node-level concave utility functions and per-node utility processes.
//!
//! Each node carries a proper, upper-semicontinuous, nondecreasing concave
//! function `u(x) = weight * base(x - shift) + offset`. The supergradient is
//! interval-valued at kinks (the flat indicator family), which is what the
//! optimality checks consume.

use crate::tree::ScenarioTree;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum UtilityError {
    #[error("invalid utility parameter: {0}")]
    InvalidParameter(String),
    #[error("utility at the horizon must be strictly increasing (atom {atom})")]
    NotStrictlyIncreasingAtHorizon { atom: usize },
    #[error("utility process shape does not match tree at level {level}")]
    ShapeMismatch { level: usize },
}

/// Supported one-dimensional concave families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UtilityKind {
    /// `ln(y)` on `y > 0`.
    Log,
    /// `y^(1-p) / (1-p)` for `p > 0`, `p != 1`; domain `[0, inf)` for `p < 1`
    /// and `(0, inf)` for `p > 1`.
    Power(f64),
    /// `-exp(-p y) / p` for `p > 0`, finite on all of the real line.
    Exponential(f64),
    /// Flat indicator: `0` on `[0, inf)`, `-inf` below. Nondecreasing but not
    /// strictly increasing; models "consumption before the horizon is free
    /// but wealth must stay nonnegative".
    AffineZero,
}

/// Lower end of the effective domain of a node utility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainBound {
    /// Finite bound; `closed` tells whether the bound itself is attainable.
    Finite { lo: f64, closed: bool },
    Unbounded,
}

impl DomainBound {
    pub fn lo(&self) -> f64 {
        match self {
            DomainBound::Finite { lo, .. } => *lo,
            DomainBound::Unbounded => f64::NEG_INFINITY,
        }
    }
}

/// Utility attached to one `(time, atom)` node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeUtility {
    pub kind: UtilityKind,
    /// Positive multiplicative weight (discount factors enter here).
    pub weight: f64,
    /// Horizontal shift: the function is evaluated at `x - shift`.
    pub shift: f64,
    /// Additive constant; irrelevant for optimization, tracked so that
    /// numeraire changes preserve expected utility exactly.
    pub offset: f64,
}

impl NodeUtility {
    pub fn new(kind: UtilityKind, weight: f64) -> Result<Self, UtilityError> {
        let u = NodeUtility {
            kind,
            weight,
            shift: 0.0,
            offset: 0.0,
        };
        u.validate()?;
        Ok(u)
    }

    pub fn log() -> Self {
        Self::new(UtilityKind::Log, 1.0).unwrap()
    }

    pub fn power(p: f64) -> Result<Self, UtilityError> {
        Self::new(UtilityKind::Power(p), 1.0)
    }

    pub fn exponential(p: f64) -> Result<Self, UtilityError> {
        Self::new(UtilityKind::Exponential(p), 1.0)
    }

    /// Flat indicator with domain `[lo, inf)`.
    pub fn affine_zero(lo: f64) -> Self {
        NodeUtility {
            kind: UtilityKind::AffineZero,
            weight: 1.0,
            shift: lo,
            offset: 0.0,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    pub fn validate(&self) -> Result<(), UtilityError> {
        if !(self.weight > 0.0) || !self.weight.is_finite() {
            return Err(UtilityError::InvalidParameter(format!(
                "weight must be positive, got {}",
                self.weight
            )));
        }
        match self.kind {
            UtilityKind::Power(p) => {
                if !(p > 0.0) || p == 1.0 || !p.is_finite() {
                    return Err(UtilityError::InvalidParameter(format!(
                        "power exponent must be positive and != 1, got {p}"
                    )));
                }
            }
            UtilityKind::Exponential(p) => {
                if !(p > 0.0) || !p.is_finite() {
                    return Err(UtilityError::InvalidParameter(format!(
                        "exponential rate must be positive, got {p}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn domain(&self) -> DomainBound {
        match self.kind {
            UtilityKind::Log => DomainBound::Finite {
                lo: self.shift,
                closed: false,
            },
            UtilityKind::Power(p) => DomainBound::Finite {
                lo: self.shift,
                closed: p < 1.0,
            },
            UtilityKind::Exponential(_) => DomainBound::Unbounded,
            UtilityKind::AffineZero => DomainBound::Finite {
                lo: self.shift,
                closed: true,
            },
        }
    }

    pub fn in_domain(&self, x: f64) -> bool {
        match self.domain() {
            DomainBound::Finite { lo, closed } => {
                if closed {
                    x >= lo
                } else {
                    x > lo
                }
            }
            DomainBound::Unbounded => true,
        }
    }

    /// `u(x)`, with `-inf` outside the effective domain.
    pub fn eval(&self, x: f64) -> f64 {
        let y = x - self.shift;
        match self.kind {
            UtilityKind::Log => {
                if y > 0.0 {
                    self.weight * y.ln() + self.offset
                } else {
                    f64::NEG_INFINITY
                }
            }
            UtilityKind::Power(p) => {
                if y > 0.0 || (y == 0.0 && p < 1.0) {
                    self.weight * y.powf(1.0 - p) / (1.0 - p) + self.offset
                } else {
                    f64::NEG_INFINITY
                }
            }
            UtilityKind::Exponential(p) => -self.weight * (-p * y).exp() / p + self.offset,
            UtilityKind::AffineZero => {
                if y >= 0.0 {
                    self.offset
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Marginal utility at an interior point of the domain.
    pub fn derivative(&self, x: f64) -> f64 {
        let y = x - self.shift;
        match self.kind {
            UtilityKind::Log => self.weight / y,
            UtilityKind::Power(p) => self.weight * y.powf(-p),
            UtilityKind::Exponential(p) => self.weight * (-p * y).exp(),
            UtilityKind::AffineZero => 0.0,
        }
    }

    /// `-u''(x) >= 0`, the concavity curvature used by the solver.
    pub fn curvature(&self, x: f64) -> f64 {
        let y = x - self.shift;
        match self.kind {
            UtilityKind::Log => self.weight / (y * y),
            UtilityKind::Power(p) => p * self.weight * y.powf(-p - 1.0),
            UtilityKind::Exponential(p) => p * self.weight * (-p * y).exp(),
            UtilityKind::AffineZero => 0.0,
        }
    }

    /// Supergradient interval `[lo, hi]` at `x`; `None` where the
    /// supergradient is empty (outside the domain, or at a steep boundary
    /// point like `y = 0` for the power family with `p < 1`).
    pub fn supergradient(&self, x: f64) -> Option<(f64, f64)> {
        let y = x - self.shift;
        match self.kind {
            UtilityKind::Log | UtilityKind::Power(_) => {
                if y > 0.0 {
                    let g = self.derivative(x);
                    Some((g, g))
                } else {
                    None
                }
            }
            UtilityKind::Exponential(_) => {
                let g = self.derivative(x);
                Some((g, g))
            }
            UtilityKind::AffineZero => {
                if y > 0.0 {
                    Some((0.0, 0.0))
                } else if y == 0.0 {
                    Some((0.0, f64::INFINITY))
                } else {
                    None
                }
            }
        }
    }

    /// Supergradient with kink snapping: within `slack` of a flat kink the
    /// kink's interval is returned. Barrier iterates park a whisker inside
    /// an active bound, so exact-point supergradients would misread them.
    pub fn supergradient_within(&self, x: f64, slack: f64) -> Option<(f64, f64)> {
        if let UtilityKind::AffineZero = self.kind {
            if (x - self.shift).abs() <= slack {
                return Some((0.0, f64::INFINITY));
            }
        }
        self.supergradient(x)
    }

    /// Whether the node utility is differentiable at `x` (interior point with
    /// a singleton supergradient).
    pub fn is_smooth_at(&self, x: f64) -> bool {
        matches!(self.supergradient(x), Some((lo, hi)) if lo == hi)
    }

    /// Flat above the kink: more consumption does not raise utility.
    pub fn is_plateau(&self) -> bool {
        matches!(self.kind, UtilityKind::AffineZero)
    }

    /// Reparameterizes to `x -> u(a * x)` for `a > 0`, preserving values
    /// exactly: `scale_arg(a).eval(x) == eval(a * x)`.
    pub fn scale_arg(&self, a: f64) -> Self {
        assert!(a > 0.0, "argument scale must be positive");
        match self.kind {
            UtilityKind::Log => NodeUtility {
                kind: self.kind,
                weight: self.weight,
                shift: self.shift / a,
                offset: self.offset + self.weight * a.ln(),
            },
            UtilityKind::Power(p) => NodeUtility {
                kind: self.kind,
                weight: self.weight * a.powf(1.0 - p),
                shift: self.shift / a,
                offset: self.offset,
            },
            UtilityKind::Exponential(p) => NodeUtility {
                kind: UtilityKind::Exponential(p * a),
                weight: self.weight * a,
                shift: self.shift / a,
                offset: self.offset,
            },
            UtilityKind::AffineZero => NodeUtility {
                kind: self.kind,
                weight: self.weight,
                shift: self.shift / a,
                offset: self.offset,
            },
        }
    }
}

/// One utility function per `(time, atom)` node of a tree.
#[derive(Debug, Clone)]
pub struct UtilityProcess {
    nodes: Vec<Vec<NodeUtility>>,
}

impl UtilityProcess {
    /// Same utility at every node.
    pub fn uniform(tree: &ScenarioTree, node: NodeUtility) -> Result<Self, UtilityError> {
        Self::per_time(tree, &vec![node; tree.horizon() + 1])
    }

    /// One utility per time, constant across that level's atoms.
    pub fn per_time(tree: &ScenarioTree, per_time: &[NodeUtility]) -> Result<Self, UtilityError> {
        if per_time.len() != tree.horizon() + 1 {
            return Err(UtilityError::ShapeMismatch {
                level: per_time.len(),
            });
        }
        let nodes = per_time
            .iter()
            .enumerate()
            .map(|(t, u)| vec![*u; tree.level_size(t)])
            .collect();
        Self::from_nodes(tree, nodes)
    }

    /// Flat indicator before the horizon, `terminal` at the horizon: the
    /// classical "utility from terminal wealth" setup.
    pub fn terminal_wealth(
        tree: &ScenarioTree,
        terminal: NodeUtility,
    ) -> Result<Self, UtilityError> {
        let mut per_time = vec![NodeUtility::affine_zero(0.0); tree.horizon() + 1];
        per_time[tree.horizon()] = terminal;
        Self::per_time(tree, &per_time)
    }

    pub fn from_nodes(
        tree: &ScenarioTree,
        nodes: Vec<Vec<NodeUtility>>,
    ) -> Result<Self, UtilityError> {
        if nodes.len() != tree.horizon() + 1 {
            return Err(UtilityError::ShapeMismatch { level: nodes.len() });
        }
        for (t, level) in nodes.iter().enumerate() {
            if level.len() != tree.level_size(t) {
                return Err(UtilityError::ShapeMismatch { level: t });
            }
            for u in level {
                u.validate()?;
            }
        }
        for (j, u) in nodes[tree.horizon()].iter().enumerate() {
            if u.is_plateau() {
                return Err(UtilityError::NotStrictlyIncreasingAtHorizon { atom: j });
            }
        }
        Ok(UtilityProcess { nodes })
    }

    pub fn node(&self, t: usize, j: usize) -> &NodeUtility {
        &self.nodes[t][j]
    }

    pub fn times(&self) -> usize {
        self.nodes.len()
    }

    pub fn level(&self, t: usize) -> &[NodeUtility] {
        &self.nodes[t]
    }

    /// Applies a node-wise transformation, revalidating the result.
    pub fn map_nodes(
        &self,
        tree: &ScenarioTree,
        f: impl Fn(usize, usize, &NodeUtility) -> NodeUtility,
    ) -> Result<Self, UtilityError> {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(t, level)| {
                level
                    .iter()
                    .enumerate()
                    .map(|(j, u)| f(t, j, u))
                    .collect::<Vec<_>>()
            })
            .collect();
        Self::from_nodes(tree, nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_values_and_domain() {
        let u = NodeUtility::log();
        assert_eq!(u.eval(1.0), 0.0);
        assert_eq!(u.eval(0.0), f64::NEG_INFINITY);
        assert_eq!(u.eval(-1.0), f64::NEG_INFINITY);
        assert!((u.derivative(2.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn power_domains_differ_with_exponent() {
        let sqrt = NodeUtility::power(0.5).unwrap();
        assert_eq!(sqrt.eval(0.0), 0.0);
        let crra2 = NodeUtility::power(2.0).unwrap();
        assert_eq!(crra2.eval(0.0), f64::NEG_INFINITY);
        assert!((crra2.eval(2.0) - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn exponential_is_finite_everywhere() {
        let u = NodeUtility::exponential(1.0).unwrap();
        assert!((u.eval(0.0) + 1.0).abs() < 1e-15);
        assert!(u.eval(-5.0).is_finite());
        assert!((u.derivative(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn affine_zero_kink_interval() {
        let u = NodeUtility::affine_zero(0.0);
        assert_eq!(u.supergradient(1.0), Some((0.0, 0.0)));
        assert_eq!(u.supergradient(0.0), Some((0.0, f64::INFINITY)));
        assert_eq!(u.supergradient(-0.5), None);
        assert_eq!(u.eval(3.0), 0.0);
        assert_eq!(u.eval(-0.1), f64::NEG_INFINITY);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(NodeUtility::power(1.0).is_err());
        assert!(NodeUtility::power(-0.5).is_err());
        assert!(NodeUtility::exponential(0.0).is_err());
        assert!(NodeUtility::new(UtilityKind::Log, 0.0).is_err());
    }

    #[test]
    fn scale_arg_preserves_values() {
        let a = 1.3;
        for u in [
            NodeUtility::log().with_weight(0.8).with_shift(0.2),
            NodeUtility::power(0.5).unwrap().with_weight(1.1),
            NodeUtility::power(2.0).unwrap(),
            NodeUtility::exponential(1.5).unwrap().with_weight(0.7),
            NodeUtility::affine_zero(0.4),
        ] {
            let v = u.scale_arg(a);
            for x in [0.5, 1.0, 2.0, 5.0] {
                let lhs = v.eval(x);
                let rhs = u.eval(a * x);
                if lhs.is_finite() || rhs.is_finite() {
                    assert!(
                        (lhs - rhs).abs() < 1e-12,
                        "kind {:?}: {lhs} vs {rhs}",
                        u.kind
                    );
                }
            }
        }
    }

    #[test]
    fn plateau_rejected_at_horizon() {
        let tree = ScenarioTree::trivial();
        let err = UtilityProcess::uniform(&tree, NodeUtility::affine_zero(0.0)).unwrap_err();
        assert!(matches!(
            err,
            UtilityError::NotStrictlyIncreasingAtHorizon { .. }
        ));
    }
}
