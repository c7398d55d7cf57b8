//! Finite filtered probability spaces represented as rooted trees of atoms.
//!
//! Level `t` of the tree holds the atoms of the time-`t` partition; the single
//! level-0 atom is the whole space. Terminal atoms double as elementary
//! outcomes. [`AdaptedProcess`] stores one value per atom per time,
//! [`PredictableProcess`] stores the time-`t` value on the level-`(t-1)` atoms.

use thiserror::Error;

/// Probabilities must satisfy additivity up to this slack before the builder
/// renormalizes children to match their parent exactly.
pub const PROBABILITY_SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("atom ({level},{index}) has nonpositive probability {prob}")]
    NonpositiveProbability {
        level: usize,
        index: usize,
        prob: f64,
    },
    #[error("children of atom ({level},{parent}) sum to {sum}, parent has {expected}")]
    ChildSumMismatch {
        level: usize,
        parent: usize,
        sum: f64,
        expected: f64,
    },
    #[error("atom ({level},{index}) references invalid parent {parent}")]
    OrphanAtom {
        level: usize,
        index: usize,
        parent: usize,
    },
    #[error("process defined on level {have}, operation expects level {want}")]
    LevelMismatch { have: usize, want: usize },
    #[error("process shape does not match tree: {0}")]
    ShapeMismatch(String),
}

/// One atom of a time-`t` partition.
#[derive(Debug, Clone)]
pub struct Atom {
    /// Index of the parent atom at the previous level (0 for the root).
    pub parent: usize,
    /// Probability of the atom under the reference measure.
    pub prob: f64,
    children: Vec<usize>,
}

impl Atom {
    /// Indices of the atom's children at the next level; empty at the horizon.
    pub fn children(&self) -> &[usize] {
        &self.children
    }
}

/// Rooted tree of partition atoms for a finite filtration.
///
/// Immutable after [`ScenarioTree::build`]; all accessors are read-only, so a
/// tree can be shared freely across threads.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    levels: Vec<Vec<Atom>>,
}

impl ScenarioTree {
    /// Builds and validates a tree from per-level `(parent, probability)`
    /// entries. Level 0 must contain exactly one atom of probability one;
    /// children are renormalized to sum to their parent exactly once the raw
    /// input passes the additivity check.
    pub fn build(level_spec: &[Vec<(usize, f64)>]) -> Result<Self, TreeError> {
        if level_spec.is_empty() || level_spec[0].len() != 1 {
            return Err(TreeError::ShapeMismatch(
                "level 0 must contain exactly one atom".into(),
            ));
        }
        let root_prob = level_spec[0][0].1;
        if root_prob <= 0.0 {
            return Err(TreeError::NonpositiveProbability {
                level: 0,
                index: 0,
                prob: root_prob,
            });
        }
        if (root_prob - 1.0).abs() > PROBABILITY_SLACK {
            return Err(TreeError::ChildSumMismatch {
                level: 0,
                parent: 0,
                sum: root_prob,
                expected: 1.0,
            });
        }

        let mut levels: Vec<Vec<Atom>> = vec![vec![Atom {
            parent: 0,
            prob: 1.0,
            children: Vec::new(),
        }]];

        for (t, spec) in level_spec.iter().enumerate().skip(1) {
            let parent_count = levels[t - 1].len();
            let mut atoms = Vec::with_capacity(spec.len());
            for (j, &(parent, prob)) in spec.iter().enumerate() {
                if parent >= parent_count {
                    return Err(TreeError::OrphanAtom {
                        level: t,
                        index: j,
                        parent,
                    });
                }
                if prob <= 0.0 {
                    return Err(TreeError::NonpositiveProbability {
                        level: t,
                        index: j,
                        prob,
                    });
                }
                levels[t - 1][parent].children.push(j);
                atoms.push(Atom {
                    parent,
                    prob,
                    children: Vec::new(),
                });
            }
            levels.push(atoms);

            // Additivity check, then exact renormalization child-by-child.
            let (parents, children) = {
                let (a, b) = levels.split_at_mut(t);
                (&mut a[t - 1][..], &mut b[0][..])
            };
            for (p, parent_atom) in parents.iter().enumerate() {
                if parent_atom.children.is_empty() {
                    return Err(TreeError::ChildSumMismatch {
                        level: t,
                        parent: p,
                        sum: 0.0,
                        expected: parent_atom.prob,
                    });
                }
                let sum: f64 = parent_atom.children.iter().map(|&c| children[c].prob).sum();
                if (sum - parent_atom.prob).abs() > PROBABILITY_SLACK {
                    return Err(TreeError::ChildSumMismatch {
                        level: t,
                        parent: p,
                        sum,
                        expected: parent_atom.prob,
                    });
                }
                let scale = parent_atom.prob / sum;
                for &c in &parent_atom.children {
                    children[c].prob *= scale;
                }
            }
        }

        Ok(ScenarioTree { levels })
    }

    /// A tree with a single atom (degenerate filtration, horizon zero).
    pub fn trivial() -> Self {
        Self::build(&[vec![(0, 1.0)]]).expect("trivial tree is valid")
    }

    /// Number of time steps `T`; levels run `0..=T`.
    pub fn horizon(&self) -> usize {
        self.levels.len() - 1
    }

    /// Number of atoms at level `t`.
    pub fn level_size(&self, t: usize) -> usize {
        self.levels[t].len()
    }

    /// Number of elementary outcomes (= atoms at the terminal level).
    pub fn outcomes(&self) -> usize {
        self.level_size(self.horizon())
    }

    pub fn atom(&self, t: usize, j: usize) -> &Atom {
        &self.levels[t][j]
    }

    pub fn prob(&self, t: usize, j: usize) -> f64 {
        self.levels[t][j].prob
    }

    /// Total number of atoms across all levels.
    pub fn total_atoms(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Atom indices along the path from the root to terminal atom `k`,
    /// one per level.
    pub fn path_of_terminal(&self, k: usize) -> Vec<usize> {
        let horizon = self.horizon();
        let mut path = vec![0usize; horizon + 1];
        let mut j = k;
        for t in (0..=horizon).rev() {
            path[t] = j;
            if t > 0 {
                j = self.levels[t][j].parent;
            }
        }
        path
    }

    /// Sums `dim`-vectors given per terminal atom up the tree: result `[t]`
    /// holds, for each level-`t` atom, the sum over its terminal descendants.
    pub fn terminal_sums(&self, terminal_values: &[f64], dim: usize) -> Vec<Vec<f64>> {
        let horizon = self.horizon();
        assert_eq!(terminal_values.len(), self.outcomes() * dim);
        let mut sums: Vec<Vec<f64>> = (0..=horizon)
            .map(|t| vec![0.0; self.level_size(t) * dim])
            .collect();
        sums[horizon].copy_from_slice(terminal_values);
        for t in (0..horizon).rev() {
            for j in 0..self.level_size(t) {
                for &c in self.levels[t][j].children() {
                    for i in 0..dim {
                        let v = sums[t + 1][c * dim + i];
                        sums[t][j * dim + i] += v;
                    }
                }
            }
        }
        sums
    }

    /// Conditional expectation of the level-`s` slice of `x` onto level
    /// `t <= s`: the value on an atom is the probability-weighted average of
    /// `x` over the atom's level-`s` descendants.
    pub fn conditional_expectation(
        &self,
        x: &AdaptedProcess,
        s: usize,
        t: usize,
    ) -> Result<Vec<f64>, TreeError> {
        if s > self.horizon() || x.level(s).len() != self.level_size(s) * x.dim() {
            return Err(TreeError::ShapeMismatch(format!(
                "process level {s} does not match tree"
            )));
        }
        if t > s {
            return Err(TreeError::LevelMismatch { have: s, want: t });
        }
        let dim = x.dim();
        let mut layer: Vec<f64> = x
            .level(s)
            .iter()
            .enumerate()
            .map(|(idx, v)| v * self.prob(s, idx / dim))
            .collect();
        for lvl in (t..s).rev() {
            let mut up = vec![0.0; self.level_size(lvl) * dim];
            for j in 0..self.level_size(lvl) {
                for &c in self.levels[lvl][j].children() {
                    for i in 0..dim {
                        up[j * dim + i] += layer[c * dim + i];
                    }
                }
            }
            layer = up;
        }
        for (idx, v) in layer.iter_mut().enumerate() {
            *v /= self.prob(t, idx / dim);
        }
        Ok(layer)
    }
}

/// Process with one `dim`-vector per atom per time `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    dim: usize,
    values: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn zeros(tree: &ScenarioTree, dim: usize) -> Self {
        let values = (0..=tree.horizon())
            .map(|t| vec![0.0; tree.level_size(t) * dim])
            .collect();
        AdaptedProcess { dim, values }
    }

    /// Builds a process from a closure evaluated per `(time, atom)`.
    pub fn from_fn(
        tree: &ScenarioTree,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Self {
        let mut p = Self::zeros(tree, dim);
        for t in 0..=tree.horizon() {
            for j in 0..tree.level_size(t) {
                let v = f(t, j);
                assert_eq!(v.len(), dim, "from_fn closure returned wrong dimension");
                p.values[t][j * dim..(j + 1) * dim].copy_from_slice(&v);
            }
        }
        p
    }

    /// Builds a process from per-level flat slices (`m_t * dim` values each).
    pub fn from_levels(
        tree: &ScenarioTree,
        dim: usize,
        levels: Vec<Vec<f64>>,
    ) -> Result<Self, TreeError> {
        if levels.len() != tree.horizon() + 1 {
            return Err(TreeError::ShapeMismatch(format!(
                "expected {} levels, got {}",
                tree.horizon() + 1,
                levels.len()
            )));
        }
        for (t, lv) in levels.iter().enumerate() {
            if lv.len() != tree.level_size(t) * dim {
                return Err(TreeError::ShapeMismatch(format!(
                    "level {t}: expected {} values, got {}",
                    tree.level_size(t) * dim,
                    lv.len()
                )));
            }
        }
        Ok(AdaptedProcess { dim, values: levels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> usize {
        self.values.len()
    }

    pub fn level(&self, t: usize) -> &[f64] {
        &self.values[t]
    }

    pub fn level_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t]
    }

    pub fn at(&self, t: usize, j: usize) -> &[f64] {
        &self.values[t][j * self.dim..(j + 1) * self.dim]
    }

    pub fn get(&self, t: usize, j: usize, i: usize) -> f64 {
        self.values[t][j * self.dim + i]
    }

    pub fn set(&mut self, t: usize, j: usize, i: usize, v: f64) {
        self.values[t][j * self.dim + i] = v;
    }

    /// Largest absolute entry across all times and atoms.
    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        AdaptedProcess {
            dim: self.dim,
            values: self
                .values
                .iter()
                .map(|lv| lv.iter().map(|&v| f(v)).collect())
                .collect(),
        }
    }
}

/// Process with slots `t = 0..=T+1` where the time-`t` value is measurable
/// with respect to the level-`max(t-1, 0)` partition (the time-0 value is
/// deterministic).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictableProcess {
    dim: usize,
    values: Vec<Vec<f64>>,
}

impl PredictableProcess {
    /// Number of atoms carrying the time-`t` value.
    fn slot_size(tree: &ScenarioTree, t: usize) -> usize {
        tree.level_size(t.saturating_sub(1))
    }

    pub fn zeros(tree: &ScenarioTree, dim: usize) -> Self {
        let values = (0..=tree.horizon() + 1)
            .map(|t| vec![0.0; Self::slot_size(tree, t) * dim])
            .collect();
        PredictableProcess { dim, values }
    }

    /// Constant-in-time process started from a deterministic vector.
    pub fn constant(tree: &ScenarioTree, value: &[f64]) -> Self {
        let dim = value.len();
        let mut p = Self::zeros(tree, dim);
        if dim == 0 {
            return p;
        }
        for t in 0..p.values.len() {
            for j in 0..p.values[t].len() / dim {
                p.values[t][j * dim..(j + 1) * dim].copy_from_slice(value);
            }
        }
        p
    }

    pub fn from_fn(
        tree: &ScenarioTree,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Self {
        let mut p = Self::zeros(tree, dim);
        if dim == 0 {
            return p;
        }
        for t in 0..p.values.len() {
            for j in 0..p.values[t].len() / dim {
                let v = f(t, j);
                assert_eq!(v.len(), dim, "from_fn closure returned wrong dimension");
                p.values[t][j * dim..(j + 1) * dim].copy_from_slice(&v);
            }
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of time slots (`T + 2`).
    pub fn times(&self) -> usize {
        self.values.len()
    }

    pub fn level(&self, t: usize) -> &[f64] {
        &self.values[t]
    }

    /// Number of atoms carrying the time-`t` value (0 for dimension-0
    /// processes, which carry no data).
    pub fn atoms_at(&self, t: usize) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values[t].len() / self.dim
        }
    }

    pub fn at(&self, t: usize, j: usize) -> &[f64] {
        &self.values[t][j * self.dim..(j + 1) * self.dim]
    }

    pub fn get(&self, t: usize, j: usize, i: usize) -> f64 {
        self.values[t][j * self.dim + i]
    }

    pub fn set(&mut self, t: usize, j: usize, i: usize, v: f64) {
        self.values[t][j * self.dim + i] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Checks the slot sizes against a tree.
    pub fn matches(&self, tree: &ScenarioTree) -> bool {
        self.values.len() == tree.horizon() + 2
            && self
                .values
                .iter()
                .enumerate()
                .all(|(t, lv)| lv.len() == Self::slot_size(tree, t) * self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binomial() -> ScenarioTree {
        ScenarioTree::build(&[vec![(0, 1.0)], vec![(0, 0.5), (0, 0.5)]]).unwrap()
    }

    #[test]
    fn trivial_tree_has_one_atom() {
        let tree = ScenarioTree::trivial();
        assert_eq!(tree.horizon(), 0);
        assert_eq!(tree.outcomes(), 1);
        assert_eq!(tree.prob(0, 0), 1.0);
    }

    #[test]
    fn binomial_fixture_builds() {
        let tree = binomial();
        assert_eq!(tree.horizon(), 1);
        assert_eq!(tree.level_size(1), 2);
        assert_eq!(tree.prob(1, 0), 0.5);
    }

    #[test]
    fn child_sum_mismatch_is_rejected() {
        let err = ScenarioTree::build(&[vec![(0, 1.0)], vec![(0, 0.5), (0, 0.4)]]).unwrap_err();
        assert!(matches!(err, TreeError::ChildSumMismatch { .. }));
    }

    #[test]
    fn nonpositive_probability_is_rejected() {
        let err = ScenarioTree::build(&[vec![(0, 1.0)], vec![(0, 1.0), (0, 0.0)]]).unwrap_err();
        assert!(matches!(err, TreeError::NonpositiveProbability { .. }));
    }

    #[test]
    fn orphan_parent_is_rejected() {
        let err = ScenarioTree::build(&[vec![(0, 1.0)], vec![(3, 1.0)]]).unwrap_err();
        assert!(matches!(err, TreeError::OrphanAtom { .. }));
    }

    #[test]
    fn level_probabilities_sum_to_one() {
        let tree = ScenarioTree::build(&[
            vec![(0, 1.0)],
            vec![(0, 0.3), (0, 0.7)],
            vec![(0, 0.1), (0, 0.2), (1, 0.5), (1, 0.2)],
        ])
        .unwrap();
        for t in 0..=tree.horizon() {
            let sum: f64 = (0..tree.level_size(t)).map(|j| tree.prob(t, j)).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn conditional_expectation_of_constant() {
        let tree = binomial();
        let x = AdaptedProcess::from_fn(&tree, 1, |_, _| vec![3.25]);
        let e = tree.conditional_expectation(&x, 1, 0).unwrap();
        assert!((e[0] - 3.25).abs() < 1e-15);
    }

    #[test]
    fn conditional_expectation_fixture() {
        // E over two equally likely branches of (1.5, 0.5) is 1.0.
        let tree = binomial();
        let mut x = AdaptedProcess::zeros(&tree, 1);
        x.set(1, 0, 0, 1.5);
        x.set(1, 1, 0, 0.5);
        let e = tree.conditional_expectation(&x, 1, 0).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn conditional_expectation_same_level_is_identity() {
        let tree = binomial();
        let mut x = AdaptedProcess::zeros(&tree, 1);
        x.set(1, 0, 0, 2.0);
        x.set(1, 1, 0, -1.0);
        let e = tree.conditional_expectation(&x, 1, 1).unwrap();
        assert_eq!(e, vec![2.0, -1.0]);
    }

    #[test]
    fn conditioning_to_later_level_fails() {
        let tree = binomial();
        let x = AdaptedProcess::zeros(&tree, 1);
        let err = tree.conditional_expectation(&x, 0, 1).unwrap_err();
        assert!(matches!(err, TreeError::LevelMismatch { .. }));
    }

    #[test]
    fn paths_and_terminal_sums_agree() {
        let tree = ScenarioTree::build(&[
            vec![(0, 1.0)],
            vec![(0, 0.4), (0, 0.6)],
            vec![(0, 0.2), (0, 0.2), (1, 0.6)],
        ])
        .unwrap();
        assert_eq!(tree.path_of_terminal(2), vec![0, 1, 2]);
        let sums = tree.terminal_sums(&[1.0, 10.0, 100.0], 1);
        assert_eq!(sums[0], vec![111.0]);
        assert_eq!(sums[1], vec![11.0, 100.0]);
    }
}
