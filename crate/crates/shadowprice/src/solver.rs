//! Primal-dual interior-point solver for the assembled planning program.
//!
//! Log barriers guard the trade nonnegativity bounds and the consumption
//! domain gaps; an infeasible-start Newton iteration solves the perturbed
//! optimality system at a fixed geometric barrier schedule. The equality
//! multipliers come straight out of the Newton system, the bound multipliers
//! from the barrier, and a final polish re-fits the multipliers at the fixed
//! primal point to tighten stationarity and complementarity.

use crate::market::{MarketError, MarketSpec};
use crate::program::{ConvexProgram, KktSolution, ProgramError, ResidualSummary};
use crate::shadow::ACTIVITY_THRESHOLD;
use crate::tree::{AdaptedProcess, PredictableProcess};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Target max-norm for stationarity, feasibility and complementarity.
    pub tolerance: f64,
    /// Cap on total Newton iterations.
    pub max_iterations: usize,
    /// Barrier weight at the first stage.
    pub initial_barrier: f64,
    /// Geometric factor applied to the barrier between stages, in (0,1).
    pub barrier_reduction: f64,
    /// Fraction-to-boundary step damping, in (0,1).
    pub fraction_to_boundary: f64,
    /// Smallest slack the initial point keeps to open domain boundaries.
    pub domain_margin: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-9,
            max_iterations: 200,
            initial_barrier: 1.0,
            barrier_reduction: 0.2,
            fraction_to_boundary: 0.99,
            domain_margin: 1e-12,
        }
    }
}

impl SolverOptions {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.tolerance > 0.0)
            || !(0.0 < self.barrier_reduction && self.barrier_reduction < 1.0)
            || !(0.0 < self.fraction_to_boundary && self.fraction_to_boundary < 1.0)
        {
            return Err(SolverError::Numerical(
                "solver options out of range".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("no admissible plan: the constraint system is inconsistent")]
    Infeasible,
    #[error("objective unbounded: {0}")]
    Unbounded(String),
    #[error("iteration limit reached before convergence (stationarity {:.2e}, feasibility {:.2e}, complementarity {:.2e})", .residuals.stationarity, .residuals.feasibility, .residuals.complementarity)]
    MaxIterations { residuals: ResidualSummary },
    #[error("no consumption plan lies in the utility domain")]
    DomainEmpty,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Program(#[from] ProgramError),
}

const DIAG_FLOOR: f64 = 1e-10;
const CURVATURE_CAP: f64 = 1e30;
const DIVERGENCE_LIMIT: f64 = 1e9;

/// Objective model for one consumption slot.
#[derive(Debug, Clone, Copy)]
enum CSlot {
    /// `-prob * u(c)` from the market's utility process.
    Utility {
        u: crate::utility::NodeUtility,
        prob: f64,
    },
    /// Squared hinge `max(lo + delta - c, 0)^2` used by the phase-1
    /// feasibility probe; carries no domain bound of its own.
    Hinge { lo: f64, delta: f64 },
}

impl CSlot {
    fn value(&self, c: f64) -> f64 {
        match self {
            CSlot::Utility { u, prob } => {
                let v = u.eval(c);
                if v == f64::NEG_INFINITY {
                    f64::INFINITY
                } else {
                    -prob * v
                }
            }
            CSlot::Hinge { lo, delta } => {
                let gap = (lo + delta - c).max(0.0);
                gap * gap
            }
        }
    }

    fn grad(&self, c: f64) -> f64 {
        match self {
            CSlot::Utility { u, prob } => -prob * u.derivative(c),
            CSlot::Hinge { lo, delta } => -2.0 * (lo + delta - c).max(0.0),
        }
    }

    fn curvature(&self, c: f64) -> f64 {
        match self {
            CSlot::Utility { u, prob } => (prob * u.curvature(c)).min(CURVATURE_CAP),
            CSlot::Hinge { lo, delta } => {
                if c < lo + delta {
                    2.0
                } else {
                    0.0
                }
            }
        }
    }

    fn bound(&self) -> Option<f64> {
        match self {
            CSlot::Utility { u, .. } => match u.domain() {
                crate::utility::DomainBound::Finite { lo, .. } => Some(lo),
                crate::utility::DomainBound::Unbounded => None,
            },
            CSlot::Hinge { .. } => None,
        }
    }
}

struct IpmProblem {
    /// Column view of the equality rows.
    columns: Vec<Vec<(usize, f64)>>,
    /// Row right-hand sides (`rows` store `constant + a.x = 0`).
    row_count: usize,
    /// Lower bound per variable; trades are bounded at zero.
    bounds: Vec<Option<f64>>,
    /// Consumption models indexed by variable slot.
    c_slots: Vec<Option<CSlot>>,
    trade_vars: usize,
}

struct IpmState {
    x: Vec<f64>,
    y: DVector<f64>,
    z: Vec<f64>,
    iterations: usize,
}

struct RawSolution {
    x: Vec<f64>,
    y: DVector<f64>,
    z: Vec<f64>,
    iterations: usize,
}

fn build_problem(program: &ConvexProgram, slots: Vec<Option<CSlot>>) -> IpmProblem {
    let n = program.layout.total();
    let trade_vars = 2 * program.layout.trades_per_direction();
    let mut columns = vec![Vec::new(); n];
    for (r, row) in program.rows().iter().enumerate() {
        for &(k, a) in &row.coeffs {
            columns[k].push((r, a));
        }
    }
    let mut bounds = vec![None; n];
    for (k, b) in bounds.iter_mut().enumerate() {
        if k < trade_vars {
            *b = Some(0.0);
        } else if let Some(slot) = &slots[k] {
            *b = slot.bound();
        }
    }
    IpmProblem {
        columns,
        row_count: program.equality_count(),
        bounds,
        c_slots: slots,
        trade_vars,
    }
}

fn utility_slots(program: &ConvexProgram) -> Vec<Option<CSlot>> {
    let tree = &program.market.tree;
    let mut slots = vec![None; program.layout.total()];
    for t in 0..=program.layout.horizon {
        for j in 0..tree.level_size(t) {
            slots[program.layout.consumption_slot(t, j)] = Some(CSlot::Utility {
                u: *program.market.utility.node(t, j),
                prob: tree.prob(t, j),
            });
        }
    }
    slots
}

impl IpmProblem {
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, &v)| self.c_slots[k].map_or(0.0, |s| s.grad(v)))
            .collect()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(k, &v)| self.c_slots[k].map_or(0.0, |s| s.value(v)))
            .sum()
    }

    fn row_residuals(&self, program: &ConvexProgram, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.row_count,
            program.rows().iter().map(|row| row.eval(x)),
        )
    }

    fn a_transpose_y(&self, y: &DVector<f64>) -> Vec<f64> {
        self.columns
            .iter()
            .map(|col| col.iter().map(|&(r, a)| a * y[r]).sum())
            .collect()
    }
}

/// Max-norm of the perturbed optimality system; used for the stage
/// convergence tests.
fn kkt_merit(
    problem: &IpmProblem,
    program: &ConvexProgram,
    x: &[f64],
    y: &DVector<f64>,
    z: &[f64],
    mu: f64,
) -> f64 {
    let grad = problem.gradient(x);
    let aty = problem.a_transpose_y(y);
    let mut merit = 0.0f64;
    for k in 0..x.len() {
        merit = merit.max((grad[k] + aty[k] - z[k]).abs());
        if let Some(lo) = problem.bounds[k] {
            merit = merit.max((z[k] * (x[k] - lo) - mu).abs());
        }
    }
    let r_prim = problem.row_residuals(program, x);
    merit.max(r_prim.amax())
}

/// Squared 2-norm of the same system; the Newton direction is a descent
/// direction for this merit, so the line search backtracks on it.
fn kkt_merit_sq(
    problem: &IpmProblem,
    program: &ConvexProgram,
    x: &[f64],
    y: &DVector<f64>,
    z: &[f64],
    mu: f64,
) -> f64 {
    let grad = problem.gradient(x);
    let aty = problem.a_transpose_y(y);
    let mut sq = 0.0f64;
    for k in 0..x.len() {
        let d = grad[k] + aty[k] - z[k];
        sq += d * d;
        if let Some(lo) = problem.bounds[k] {
            let c = z[k] * (x[k] - lo) - mu;
            sq += c * c;
        }
    }
    let r_prim = problem.row_residuals(program, x);
    sq + r_prim.norm_squared()
}

/// One damped Newton step on the perturbed optimality system; returns the
/// step length taken. The reduced (Schur) system is cheapest; when its
/// conditioning stalls the endgame the caller switches to the full augmented
/// system, which does not square the barrier scaling.
fn newton_step(
    problem: &IpmProblem,
    program: &ConvexProgram,
    state: &mut IpmState,
    mu: f64,
    options: &SolverOptions,
    augmented: bool,
) -> Result<f64, SolverError> {
    let n = state.x.len();
    let rows = problem.row_count;
    let grad = problem.gradient(&state.x);
    let aty = problem.a_transpose_y(&state.y);
    let r_prim = problem.row_residuals(program, &state.x);

    let mut diag = vec![0.0f64; n];
    let mut rbar = vec![0.0f64; n];
    for k in 0..n {
        let curv = problem.c_slots[k]
            .map(|s| s.curvature(state.x[k]))
            .unwrap_or(0.0);
        let mut d = curv;
        let mut r = grad[k] + aty[k] - state.z[k];
        if let Some(lo) = problem.bounds[k] {
            let slack = state.x[k] - lo;
            d += state.z[k] / slack;
            r += state.z[k] - mu / slack;
        }
        diag[k] = d.max(DIAG_FLOOR);
        rbar[k] = r;
    }

    let (delta_x, delta_y) = if augmented {
        // Symmetric equilibration keeps the barrier scaling from drowning
        // the factorization.
        let dim = n + rows;
        let mut kkt = DMatrix::<f64>::zeros(dim, dim);
        for k in 0..n {
            kkt[(k, k)] = diag[k];
            for &(r, a) in &problem.columns[k] {
                kkt[(n + r, k)] = a;
                kkt[(k, n + r)] = a;
            }
        }
        let scale = DVector::from_fn(dim, |i, _| {
            let row_max = kkt.row(i).amax();
            1.0 / row_max.max(1.0).sqrt()
        });
        for i in 0..dim {
            for j in 0..dim {
                kkt[(i, j)] *= scale[i] * scale[j];
            }
        }
        let mut rhs = DVector::<f64>::zeros(dim);
        for k in 0..n {
            rhs[k] = -rbar[k] * scale[k];
        }
        for r in 0..rows {
            rhs[n + r] = -r_prim[r] * scale[n + r];
        }
        let lu = kkt.clone().lu();
        let mut sol = lu
            .solve(&rhs)
            .ok_or_else(|| SolverError::Numerical("augmented system is singular".into()))?;
        for _ in 0..3 {
            let residual = &rhs - &kkt * &sol;
            if let Some(corr) = lu.solve(&residual) {
                sol += corr;
            }
        }
        let delta_x: Vec<f64> = (0..n).map(|k| sol[k] * scale[k]).collect();
        let delta_y = DVector::from_fn(rows, |r, _| sol[n + r] * scale[n + r]);
        (delta_x, delta_y)
    } else {
        // Schur complement over the equality multipliers.
        let mut m = DMatrix::<f64>::zeros(rows, rows);
        for k in 0..n {
            let col = &problem.columns[k];
            if col.is_empty() {
                continue;
            }
            let w = 1.0 / diag[k];
            for (idx, &(r1, a1)) in col.iter().enumerate() {
                for &(r2, a2) in &col[idx..] {
                    let v = a1 * a2 * w;
                    m[(r1, r2)] += v;
                    if r1 != r2 {
                        m[(r2, r1)] += v;
                    }
                }
            }
        }
        let mut rhs = DVector::<f64>::zeros(rows);
        for k in 0..n {
            let v = rbar[k] / diag[k];
            for &(r, a) in &problem.columns[k] {
                rhs[r] -= a * v;
            }
        }
        rhs += &r_prim;

        let delta_y = solve_spd(m, rhs)?;
        let at_dy = problem.a_transpose_y(&delta_y);
        let delta_x: Vec<f64> = (0..n)
            .map(|k| -(rbar[k] + at_dy[k]) / diag[k])
            .collect();
        (delta_x, delta_y)
    };

    let mut delta_z = vec![0.0f64; n];
    for k in 0..n {
        if let Some(lo) = problem.bounds[k] {
            let slack = state.x[k] - lo;
            delta_z[k] = mu / slack - state.z[k] - state.z[k] / slack * delta_x[k];
        }
    }

    // Fraction-to-boundary step in both primal slacks and bound multipliers.
    // The damping relaxes with the barrier so the endgame can take full
    // Newton steps.
    let tau = options.fraction_to_boundary.max(1.0 - 10.0 * mu);
    let mut alpha: f64 = 1.0;
    for k in 0..n {
        if let Some(lo) = problem.bounds[k] {
            if delta_x[k] < 0.0 {
                alpha = alpha.min(tau * (state.x[k] - lo) / -delta_x[k]);
            }
            if delta_z[k] < 0.0 {
                alpha = alpha.min(tau * state.z[k] / -delta_z[k]);
            }
        }
    }

    let merit0 = kkt_merit_sq(problem, program, &state.x, &state.y, &state.z, mu);
    let mut trial = alpha;
    for _ in 0..30 {
        let x_new: Vec<f64> = state
            .x
            .iter()
            .zip(&delta_x)
            .map(|(&v, &d)| v + trial * d)
            .collect();
        let y_new = &state.y + trial * &delta_y;
        let z_new: Vec<f64> = state
            .z
            .iter()
            .zip(&delta_z)
            .map(|(&v, &d)| v + trial * d)
            .collect();
        let merit = kkt_merit_sq(problem, program, &x_new, &y_new, &z_new, mu);
        if merit <= merit0 * (1.0 - 1e-4 * trial) || trial < 1e-8 {
            state.x = x_new;
            state.y = y_new;
            state.z = z_new;
            state.iterations += 1;
            return Ok(trial);
        }
        trial *= 0.5;
    }
    state.iterations += 1;
    Ok(0.0)
}

/// Cholesky solve with a ridge fallback and two rounds of iterative
/// refinement; the reduced system is badly scaled near the barrier floor and
/// the refinement recovers the lost digits of the step.
fn solve_spd(mut m: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>, SolverError> {
    let n = m.nrows();
    let base = 1.0 + m.diagonal().amax();
    let mut ridge = 0.0;
    for attempt in 0..4 {
        if attempt > 0 {
            let bump = base * 1e-14 * 10f64.powi(attempt);
            for i in 0..n {
                m[(i, i)] += bump - ridge;
            }
            ridge = bump;
        }
        if let Some(chol) = m.clone().cholesky() {
            let mut solution = chol.solve(&rhs);
            for _ in 0..2 {
                let residual = &rhs - &m * &solution;
                solution += chol.solve(&residual);
            }
            return Ok(solution);
        }
    }
    Err(SolverError::Numerical(
        "Schur complement factorization failed".into(),
    ))
}

/// Initial point: small positive trades, consumption one unit inside its
/// domain, then a least-squares correction of consumption only to bring the
/// bank balances close to feasible while keeping a safety margin to the
/// domain boundary.
fn initial_state(problem: &IpmProblem, program: &ConvexProgram, mu: f64) -> IpmState {
    let n = program.layout.total();
    let mut x = vec![0.0f64; n];
    for (k, v) in x.iter_mut().enumerate() {
        if k < problem.trade_vars {
            *v = 0.1;
        } else {
            *v = match problem.bounds[k] {
                Some(lo) => lo + 1.0,
                None => 1.0,
            };
        }
    }

    let tree = &program.market.tree;
    let outcomes = tree.outcomes();
    let horizon = program.layout.horizon;
    // Bank-row residuals are linear in consumption with coefficient -1 along
    // the path, so the minimum-norm correction solves (P P^T) w = r with P
    // the path-indicator matrix.
    let r = DVector::from_iterator(
        outcomes,
        program.rows()[..outcomes].iter().map(|row| row.eval(&x)),
    );
    let paths: Vec<Vec<usize>> = (0..outcomes).map(|k| tree.path_of_terminal(k)).collect();
    let mut gram = DMatrix::<f64>::zeros(outcomes, outcomes);
    for k in 0..outcomes {
        for l in 0..outcomes {
            let common = (0..=horizon)
                .filter(|&t| paths[k][t] == paths[l][t])
                .count();
            gram[(k, l)] = common as f64;
        }
    }
    if let Some(chol) = gram.cholesky() {
        let w = chol.solve(&r);
        let mut delta = vec![0.0f64; n];
        for k in 0..outcomes {
            for t in 0..=horizon {
                delta[program.layout.consumption_slot(t, paths[k][t])] += w[k];
            }
        }
        // Blend back if the correction would leave too little domain slack.
        let mut gamma: f64 = 1.0;
        for (k, &d) in delta.iter().enumerate() {
            if let Some(lo) = problem.bounds[k] {
                if k >= problem.trade_vars && d < 0.0 {
                    let room = x[k] - lo - 1e-3;
                    if room > 0.0 {
                        gamma = gamma.min(room / -d);
                    } else {
                        gamma = 0.0;
                    }
                }
            }
        }
        for (k, v) in x.iter_mut().enumerate() {
            *v += gamma * delta[k];
        }
    }

    let z = x
        .iter()
        .enumerate()
        .map(|(k, &v)| match problem.bounds[k] {
            Some(lo) => (mu / (v - lo)).clamp(1e-8, 1e8),
            None => 0.0,
        })
        .collect();
    IpmState {
        x,
        y: DVector::zeros(problem.row_count),
        z,
        iterations: 0,
    }
}

/// Runs the barrier schedule down to `mu_floor`. Does not interpret the
/// outcome; callers decide whether the raw iterate is good enough.
fn ipm_run(
    problem: &IpmProblem,
    program: &ConvexProgram,
    options: &SolverOptions,
) -> Result<RawSolution, SolverError> {
    let mut mu_floor = (options.tolerance * 1e-3).min(1e-12).max(1e-15);
    let mut mu = options.initial_barrier;
    let mut state = initial_state(problem, program, mu);
    // After a floor extension the loose floor target is usually already met,
    // but the weakly-bound slots still have to re-center at the new barrier.
    let mut forced_steps = 0usize;

    loop {
        let at_floor = mu <= mu_floor;
        // Intermediate stages track the central path at 0.1 mu; the floor
        // stage aims below the final tolerance with the remaining budget.
        let inner_target = if at_floor {
            (0.25 * options.tolerance).max(2.0 * mu_floor)
        } else {
            0.1 * mu
        };
        let inner_cap = if at_floor { options.max_iterations } else { 25 };
        let mut inner = 0;
        let mut last_merit = f64::INFINITY;
        let mut stalled = 0;
        let mut augmented = false;
        loop {
            let merit = kkt_merit(problem, program, &state.x, &state.y, &state.z, mu);
            if (merit <= inner_target && forced_steps == 0) || inner >= inner_cap {
                break;
            }
            forced_steps = forced_steps.saturating_sub(1);
            // The reduced system squares the barrier scaling and can stall in
            // the endgame; retry with the full augmented system before giving
            // up on the stage.
            if merit > 0.99 * last_merit {
                stalled += 1;
                if stalled >= 2 && !augmented {
                    augmented = true;
                    stalled = 0;
                } else if stalled >= 5 {
                    break;
                }
            } else {
                stalled = 0;
            }
            last_merit = merit;
            if state.iterations >= options.max_iterations {
                return Ok(RawSolution {
                    x: state.x,
                    y: state.y,
                    z: state.z,
                    iterations: state.iterations,
                });
            }
            let alpha = newton_step(problem, program, &mut state, mu, options, augmented)?;
            inner += 1;
            if std::env::var_os("SHADOWPRICE_TRACE").is_some() {
                let m2 = kkt_merit(problem, program, &state.x, &state.y, &state.z, mu);
                let rp = problem.row_residuals(program, &state.x).amax();
                eprintln!(
                    "iter {:3} mu {:9.2e} alpha {:8.2e} merit {:9.2e} r_prim {:9.2e}",
                    state.iterations, mu, alpha, m2, rp
                );
            }
            let xmax = state.x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if xmax > DIVERGENCE_LIMIT || problem.objective(&state.x) < -1e12 {
                return Err(SolverError::Unbounded(
                    "market admits arbitrage-like improvement".into(),
                ));
            }
        }
        if at_floor {
            // Two reasons to push the barrier further down: bound
            // multipliers on smooth consumption slots read as stationarity
            // error, and weakly-bound trade slots leave dust near the
            // activity threshold where the complementarity report looks.
            let mut needed = mu_floor;
            for (k, slot) in problem.c_slots.iter().enumerate() {
                if let Some(CSlot::Utility { u, .. }) = slot {
                    if problem.bounds[k].is_some()
                        && !u.is_plateau()
                        && state.z[k] > 0.3 * options.tolerance
                    {
                        let slack = state.x[k] - problem.bounds[k].unwrap();
                        needed = needed.min(0.1 * options.tolerance * slack);
                    }
                }
            }
            for k in 0..problem.trade_vars {
                if state.x[k] > 5e-8 && state.x[k] < 1e-3 && state.z[k] > 1e-8 {
                    needed = needed.min(0.1 * 5e-8 * state.z[k]);
                }
            }
            needed = needed.max(1e-15);
            if std::env::var_os("SHADOWPRICE_TRACE2").is_some() {
                eprintln!("floor check: mu_floor {mu_floor:.2e} needed {needed:.2e} iters {}", state.iterations);
            }
            if needed < mu_floor && state.iterations < options.max_iterations {
                mu_floor = needed;
                mu = mu_floor;
                forced_steps = 4;
                continue;
            }
            break;
        }
        // Jump straight onto the floor instead of solving an awkward stage a
        // hair above it.
        mu *= options.barrier_reduction;
        if mu < 5.0 * mu_floor {
            mu = mu_floor;
        }
    }
    Ok(RawSolution {
        x: state.x,
        y: state.y,
        z: state.z,
        iterations: state.iterations,
    })
}

/// Minimum-norm correction onto the equality manifold over a subset of
/// columns; clamps bounds and excludes newly clamped columns on retry.
/// Returns true once the residual is at or below `target`.
fn project_onto_equalities(
    problem: &IpmProblem,
    program: &ConvexProgram,
    x: &mut [f64],
    use_column: &dyn Fn(usize, &[f64]) -> bool,
    target: f64,
) -> bool {
    let rows = problem.row_count;
    let initial = problem.row_residuals(program, x).amax();
    if initial <= target {
        return true;
    }
    let mut trial = x.to_vec();
    let mut excluded = vec![false; x.len()];
    for _ in 0..4 {
        let r_prim = problem.row_residuals(program, &trial);
        if r_prim.amax() <= target {
            break;
        }
        let active: Vec<usize> = (0..trial.len())
            .filter(|&k| !excluded[k] && use_column(k, &trial))
            .collect();
        if active.is_empty() {
            break;
        }
        let mut gram = DMatrix::<f64>::zeros(rows, rows);
        for &k in &active {
            let col = &problem.columns[k];
            for (idx, &(r1, a1)) in col.iter().enumerate() {
                for &(r2, a2) in &col[idx..] {
                    gram[(r1, r2)] += a1 * a2;
                    if r1 != r2 {
                        gram[(r2, r1)] += a1 * a2;
                    }
                }
            }
        }
        let w = match solve_spd(gram, r_prim.clone_owned()) {
            Ok(w) if w.iter().all(|v| v.is_finite()) => w,
            _ => break,
        };
        let mut sane = true;
        let mut deltas = Vec::with_capacity(active.len());
        for &k in &active {
            let delta: f64 = problem.columns[k].iter().map(|&(r, a)| -a * w[r]).sum();
            // A healthy correction is residual-sized; a rank-deficient
            // Gram pushed through the ridge shows up as a huge step.
            if delta.abs() > 1.0 + 1e3 * initial {
                sane = false;
                break;
            }
            deltas.push(delta);
        }
        if !sane {
            break;
        }
        for (&k, &delta) in active.iter().zip(&deltas) {
            trial[k] += delta;
            if let Some(lo) = problem.bounds[k] {
                if trial[k] <= lo {
                    trial[k] = lo;
                    excluded[k] = true;
                }
            }
        }
    }
    // Commit only improvements; a failed projection must not poison the
    // iterate.
    let achieved = problem.row_residuals(program, &trial).amax();
    if achieved < initial {
        x.copy_from_slice(&trial);
    }
    achieved <= target
}

/// Repairs primal feasibility after churn cancellation and the stall exits.
/// Corrections through trade slots leave every stationarity equation
/// untouched (trade gradients are constant and consumption does not move);
/// consumption slots join only if the trade slots cannot span the residual.
fn restore_primal_feasibility(problem: &IpmProblem, program: &ConvexProgram, x: &mut [f64]) {
    let target = 1e-12;
    let big_trades = |k: usize, x: &[f64]| k < problem.trade_vars && x[k] >= 1e-3;
    if project_onto_equalities(problem, program, x, &big_trades, target) {
        return;
    }
    let all_trades = |k: usize, _x: &[f64]| k < problem.trade_vars;
    if project_onto_equalities(problem, program, x, &all_trades, target) {
        return;
    }
    project_onto_equalities(problem, program, x, &|_, _| true, target);
}

/// Cancels paired buy/sell volume where the spread is pinched: both
/// directions are zero-cost there, so the split is not unique and the barrier
/// lets matched volume drift. Reporting the net trade in one direction costs
/// nothing (bid equals ask) and restores the canonical answer.
fn cancel_pinched_churn(program: &ConvexProgram, x: &mut [f64]) {
    let market = program.market;
    let tree = &market.tree;
    for s in 0..=program.layout.horizon {
        for j in 0..tree.level_size(s) {
            for i in 0..program.layout.assets {
                let ask = market.ask.get(s, j, i);
                let bid = market.bid.get(s, j, i);
                if (ask - bid).abs() > 1e-12 * ask.max(1.0) {
                    continue;
                }
                let up = program.layout.purchase_slot(s, j, i);
                let down = program.layout.sale_slot(s, j, i);
                let net = x[up] - x[down];
                x[up] = net.max(0.0);
                x[down] = (-net).max(0.0);
            }
        }
    }
}

/// Solves the assembled program to the requested KKT tolerance and returns
/// primal and dual variables.
pub fn solve(program: &ConvexProgram, options: &SolverOptions) -> Result<KktSolution, SolverError> {
    options.validate()?;
    let problem = build_problem(program, utility_slots(program));
    let mut raw = ipm_run(&problem, program, options)?;
    cancel_pinched_churn(program, &mut raw.x);
    restore_primal_feasibility(&problem, program, &mut raw.x);

    let raw_solution = assemble_solution(program, &problem, &raw, false);
    let polished = polish_duals(program, &raw);
    if std::env::var_os("SHADOWPRICE_TRACE2").is_some() {
        eprintln!("raw residuals: {:?}", raw_solution.residuals);
    }
    let best = match polished {
        Some(p) => {
            let candidate = assemble_from_duals(program, &raw, p);
            if std::env::var_os("SHADOWPRICE_TRACE2").is_some() {
                eprintln!("polished residuals: {:?}", candidate.residuals);
            }
            if candidate.residuals.max() < raw_solution.residuals.max() {
                candidate
            } else {
                raw_solution
            }
        }
        None => raw_solution,
    };

    if best.residuals.max() <= options.tolerance {
        Ok(best)
    } else {
        classify_failure(program, options, best.residuals)
    }
}

/// Comparison solve in the frictionless market with both books at `price`.
pub fn solve_frictionless(
    market: &MarketSpec,
    price: &AdaptedProcess,
    options: &SolverOptions,
) -> Result<KktSolution, SolverError> {
    let frictionless = market.frictionless_at(price)?;
    let program = ConvexProgram::assemble(&frictionless);
    solve(&program, options)
}

/// After a failed main solve, probes whether any consumption plan fits the
/// utility domain: minimizes a squared hinge on the domain gaps subject to
/// the same balance constraints. A large residual gap means the domain is
/// empty; otherwise the failure is reported as an iteration limit.
fn classify_failure(
    program: &ConvexProgram,
    options: &SolverOptions,
    residuals: ResidualSummary,
) -> Result<KktSolution, SolverError> {
    let delta = 1e-6;
    let tree = &program.market.tree;
    let mut slots = vec![None; program.layout.total()];
    let mut any_bounded = false;
    for t in 0..=program.layout.horizon {
        for j in 0..tree.level_size(t) {
            let slot = program.layout.consumption_slot(t, j);
            let u = program.market.utility.node(t, j);
            slots[slot] = match u.domain() {
                crate::utility::DomainBound::Finite { lo, .. } => {
                    any_bounded = true;
                    Some(CSlot::Hinge { lo, delta })
                }
                crate::utility::DomainBound::Unbounded => None,
            };
        }
    }
    if !any_bounded {
        return Err(SolverError::MaxIterations { residuals });
    }
    let probe_options = SolverOptions {
        tolerance: 1e-8,
        max_iterations: 150,
        ..*options
    };
    let problem = build_problem(program, slots);
    let raw = ipm_run(&problem, program, &probe_options)?;
    let mut worst_gap = 0.0f64;
    for (k, slot) in problem.c_slots.iter().enumerate() {
        if let Some(CSlot::Hinge { lo, .. }) = slot {
            worst_gap = worst_gap.max(lo - raw.x[k]);
        }
    }
    let feasibility = problem.row_residuals(program, &raw.x).amax();
    if worst_gap > 100.0 * delta && feasibility <= 1e-6 {
        Err(SolverError::DomainEmpty)
    } else {
        Err(SolverError::MaxIterations { residuals })
    }
}

struct PolishedDuals {
    nu: Vec<f64>,
    mu: Vec<f64>,
    lambda_up: Vec<Vec<f64>>,
    lambda_down: Vec<Vec<f64>>,
    degenerate: bool,
}

/// Re-fits the multipliers at the fixed primal point: the bank multipliers
/// from a least-squares fit of the smooth consumption stationarity
/// equations, the share multipliers by a minimum-change projection onto the
/// stationarity equations of active (and pinched) trade slots, and the bound
/// multipliers implied by the price equations, projected to be nonnegative.
fn polish_duals(program: &ConvexProgram, raw: &RawSolution) -> Option<PolishedDuals> {
    let market = program.market;
    let tree = &market.tree;
    let d = program.layout.assets;
    let horizon = program.layout.horizon;
    let outcomes = tree.outcomes();
    let paths: Vec<Vec<usize>> = (0..outcomes).map(|k| tree.path_of_terminal(k)).collect();

    // Least squares for nu over smooth consumption equations:
    //   sum_{descendants} nu_k = -P(t,j) u'(c)   per smooth (t, j).
    let mut gram = DMatrix::<f64>::zeros(outcomes, outcomes);
    let mut rhs = DVector::<f64>::zeros(outcomes);
    for t in 0..=horizon {
        for j in 0..tree.level_size(t) {
            let c = raw.x[program.layout.consumption_slot(t, j)];
            let u = market.utility.node(t, j);
            // Plateau nodes sit at their kink at any optimum; their slope-0
            // equation would poison the fit.
            if u.is_plateau() || !u.is_smooth_at(c) {
                continue;
            }
            let q = -tree.prob(t, j) * u.derivative(c);
            let members: Vec<usize> = (0..outcomes).filter(|&k| paths[k][t] == j).collect();
            for &k in &members {
                rhs[k] += q;
                for &l in &members {
                    gram[(k, l)] += 1.0;
                }
            }
        }
    }
    let nu = gram.cholesky()?.solve(&rhs);
    let nu: Vec<f64> = nu.iter().copied().collect();
    let nu_sums = tree.terminal_sums(&nu, 1);

    // Minimum-change projection of mu onto the active trade equations,
    // asset by asset (the equations decouple across assets).
    let mut mu = vec![0.0f64; outcomes * d];
    for k in 0..outcomes {
        for i in 0..d {
            mu[k * d + i] = raw.y[outcomes + k * d + i];
        }
    }
    let mut degenerate = false;
    for i in 0..d {
        let mut eq_rows: Vec<Vec<f64>> = Vec::new();
        let mut eq_rhs: Vec<f64> = Vec::new();
        for s in 0..=horizon {
            for j in 0..tree.level_size(s) {
                let ask = market.ask.get(s, j, i);
                let bid = market.bid.get(s, j, i);
                let buying = raw.x[program.layout.purchase_slot(s, j, i)] > ACTIVITY_THRESHOLD;
                let selling = raw.x[program.layout.sale_slot(s, j, i)] > ACTIVITY_THRESHOLD;
                let pinched = (ask - bid).abs() <= 1e-12 * ask.max(1.0);
                let target = if buying || pinched {
                    Some(nu_sums[s][j] * ask)
                } else if selling {
                    Some(nu_sums[s][j] * bid)
                } else {
                    None
                };
                if let Some(target) = target {
                    let mut row = vec![0.0f64; outcomes];
                    for (k, path) in paths.iter().enumerate() {
                        if path[s] == j {
                            row[k] = 1.0;
                        }
                    }
                    eq_rows.push(row);
                    eq_rhs.push(target);
                }
            }
        }
        let rank = if eq_rows.is_empty() {
            0
        } else {
            let rows = eq_rows.len();
            let c = DMatrix::from_fn(rows, outcomes, |r, k| eq_rows[r][k]);
            let mu_i = DVector::from_fn(outcomes, |k, _| mu[k * d + i]);
            let gap = DVector::from_fn(rows, |r, _| eq_rhs[r]) - &c * &mu_i;
            let svd = (&c * c.transpose()).svd(true, true);
            let tol = 1e-10 * svd.singular_values.max().max(1.0);
            let w = svd.solve(&gap, tol).ok()?;
            let correction = c.transpose() * w;
            for k in 0..outcomes {
                mu[k * d + i] += correction[k];
            }
            svd.singular_values.iter().filter(|&&s| s > tol).count()
        };
        if rank < outcomes {
            degenerate = true;
        }
    }

    // Bound multipliers implied by the price equations, clamped nonnegative.
    let mu_sums = if d > 0 {
        tree.terminal_sums(&mu, d)
    } else {
        Vec::new()
    };
    let mut lambda_up = Vec::with_capacity(horizon + 1);
    let mut lambda_down = Vec::with_capacity(horizon + 1);
    for s in 0..=horizon {
        let m = tree.level_size(s);
        let mut up = vec![0.0f64; m * d];
        let mut down = vec![0.0f64; m * d];
        for j in 0..m {
            for i in 0..d {
                let mu_sum = mu_sums[s][j * d + i];
                let nu_sum = nu_sums[s][j];
                up[j * d + i] = (mu_sum - nu_sum * market.ask.get(s, j, i)).max(0.0);
                down[j * d + i] = (nu_sum * market.bid.get(s, j, i) - mu_sum).max(0.0);
            }
        }
        lambda_up.push(up);
        lambda_down.push(down);
    }

    Some(PolishedDuals {
        nu,
        mu,
        lambda_up,
        lambda_down,
        degenerate,
    })
}

fn primal_processes(
    program: &ConvexProgram,
    x: &[f64],
) -> (PredictableProcess, PredictableProcess, AdaptedProcess) {
    let tree = &program.market.tree;
    let d = program.layout.assets;
    let mut purchases = PredictableProcess::zeros(tree, d);
    let mut sales = PredictableProcess::zeros(tree, d);
    let mut consumption = AdaptedProcess::zeros(tree, 1);
    for s in 0..=program.layout.horizon {
        for j in 0..tree.level_size(s) {
            for i in 0..d {
                purchases.set(s + 1, j, i, x[program.layout.purchase_slot(s, j, i)]);
                sales.set(s + 1, j, i, x[program.layout.sale_slot(s, j, i)]);
            }
            consumption.set(s, j, 0, x[program.layout.consumption_slot(s, j)]);
        }
    }
    (purchases, sales, consumption)
}

fn assemble_from_duals(
    program: &ConvexProgram,
    raw: &RawSolution,
    duals: PolishedDuals,
) -> KktSolution {
    let (purchases, sales, consumption) = primal_processes(program, &raw.x);
    let mut solution = KktSolution {
        purchases,
        sales,
        consumption,
        nu: duals.nu,
        mu: duals.mu,
        lambda_up: duals.lambda_up,
        lambda_down: duals.lambda_down,
        residuals: ResidualSummary::default(),
        expected_utility: -program.objective(&raw.x),
        iterations: raw.iterations,
        degenerate_duals: duals.degenerate,
    };
    solution.residuals = program
        .kkt_residual(&solution)
        .expect("solution shaped by construction");
    solution
}

fn assemble_solution(
    program: &ConvexProgram,
    _problem: &IpmProblem,
    raw: &RawSolution,
    degenerate: bool,
) -> KktSolution {
    let tree = &program.market.tree;
    let d = program.layout.assets;
    let outcomes = tree.outcomes();
    let nu: Vec<f64> = (0..outcomes).map(|k| raw.y[k]).collect();
    let mu: Vec<f64> = (0..outcomes * d).map(|k| raw.y[outcomes + k]).collect();
    let mut lambda_up = Vec::with_capacity(program.layout.horizon + 1);
    let mut lambda_down = Vec::with_capacity(program.layout.horizon + 1);
    for s in 0..=program.layout.horizon {
        let m = tree.level_size(s);
        let mut up = vec![0.0f64; m * d];
        let mut down = vec![0.0f64; m * d];
        for j in 0..m {
            for i in 0..d {
                up[j * d + i] = raw.z[program.layout.purchase_slot(s, j, i)];
                down[j * d + i] = raw.z[program.layout.sale_slot(s, j, i)];
            }
        }
        lambda_up.push(up);
        lambda_down.push(down);
    }
    let (purchases, sales, consumption) = primal_processes(program, &raw.x);
    let mut solution = KktSolution {
        purchases,
        sales,
        consumption,
        nu,
        mu,
        lambda_up,
        lambda_down,
        residuals: ResidualSummary::default(),
        expected_utility: -program.objective(&raw.x),
        iterations: raw.iterations,
        degenerate_duals: degenerate,
    };
    solution.residuals = program
        .kkt_residual(&solution)
        .expect("solution shaped by construction");
    solution
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::market::expected_utility;
    use crate::utility::{NodeUtility, UtilityProcess};

    #[test]
    fn b1_no_trade_optimum() {
        let market = fixtures::b1();
        let program = ConvexProgram::assemble(&market);
        let solution = solve(&program, &SolverOptions::default()).unwrap();
        assert!(solution.residuals.max() <= 1e-9);
        assert!(solution.max_trade() < 1e-7, "expected no trade");
        assert!((solution.consumption.get(1, 0, 0) - 1.0).abs() < 1e-6);
        assert!((solution.consumption.get(1, 1, 0) - 1.0).abs() < 1e-6);
        assert!(solution.expected_utility.abs() < 1e-8);
        assert!((solution.nu[0] + 0.5).abs() < 1e-6);
        assert!((solution.nu[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn b2_buys_at_the_ask() {
        let market = fixtures::b2();
        let program = ConvexProgram::assemble(&market);
        let solution = solve(&program, &SolverOptions::default()).unwrap();
        assert!(solution.residuals.max() <= 1e-9);
        let theta = solution.net_trade(0, 0, 0);
        assert!((theta - 1.875).abs() < 1e-5, "theta = {theta}");
        assert!((solution.consumption.get(1, 0, 0) - 2.5).abs() < 1e-5);
        assert!((solution.consumption.get(1, 1, 0) - 0.625).abs() < 1e-5);
        assert!((solution.expected_utility - 1.25f64.ln()).abs() < 1e-8);
        assert!((solution.nu[0] + 0.2).abs() < 1e-5);
        assert!((solution.nu[1] + 0.8).abs() < 1e-5);
        // Objective equals the expected utility of the returned consumption.
        let eu = expected_utility(&market, &solution.consumption);
        assert!((eu - solution.expected_utility).abs() < 1e-12);
    }

    #[test]
    fn symmetric_frictionless_binomial_stays_put() {
        // Bid = ask = 1 while the terminal price is a fair coin on {1.5, 0.5}:
        // a log investor at the indifference price holds zero shares.
        let tree = fixtures::binomial_tree();
        let price1 = [1.5f64, 0.5];
        let price = AdaptedProcess::from_fn(&tree, 1, |t, j| {
            vec![if t == 0 { 1.0 } else { price1[j] }]
        });
        let utility = UtilityProcess::terminal_wealth(&tree, NodeUtility::log()).unwrap();
        let market =
            crate::market::MarketSpec::new(tree, price.clone(), price, 1.0, vec![0.0], utility)
                .unwrap();
        let program = ConvexProgram::assemble(&market);
        let solution = solve(&program, &SolverOptions::default()).unwrap();
        assert!(solution.net_trade(0, 0, 0).abs() < 1e-6);
        assert!(solution.expected_utility.abs() < 1e-8);
    }

    #[test]
    fn domain_empty_is_detected() {
        // Demanding consumption of at least 10 at time 0 with one unit of
        // wealth cannot be financed.
        let tree = fixtures::binomial_tree();
        let market = fixtures::b1();
        let nodes = vec![
            vec![NodeUtility::affine_zero(10.0)],
            vec![NodeUtility::log(), NodeUtility::log()],
        ];
        let utility = UtilityProcess::from_nodes(&tree, nodes).unwrap();
        let market = crate::market::MarketSpec::new(
            tree,
            market.bid.clone(),
            market.ask.clone(),
            1.0,
            vec![0.0],
            utility,
        )
        .unwrap();
        let program = ConvexProgram::assemble(&market);
        let err = solve(&program, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, SolverError::DomainEmpty), "got {err:?}");
    }

    #[test]
    fn frictionless_solve_at_shadow_price_matches_b2() {
        let market = fixtures::b2();
        let tree = &market.tree;
        let price = AdaptedProcess::from_fn(tree, 1, |t, j| {
            vec![if t == 0 {
                0.7
            } else if j == 0 {
                1.5
            } else {
                0.5
            }]
        });
        let frictionless = solve_frictionless(&market, &price, &SolverOptions::default()).unwrap();
        assert!((frictionless.expected_utility - 1.25f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn single_period_liquidation() {
        // T = 0: the only move is liquidating the endowment at the bid.
        let tree = crate::tree::ScenarioTree::trivial();
        let price = AdaptedProcess::from_fn(&tree, 1, |_, _| vec![2.0]);
        let utility = UtilityProcess::uniform(&tree, NodeUtility::log()).unwrap();
        let market =
            crate::market::MarketSpec::new(tree, price.clone(), price, 1.0, vec![1.0], utility)
                .unwrap();
        let program = ConvexProgram::assemble(&market);
        let solution = solve(&program, &SolverOptions::default()).unwrap();
        assert!((solution.consumption.get(0, 0, 0) - 3.0).abs() < 1e-7);
        assert!((solution.sales.get(1, 0, 0) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn bank_only_consumption_scheduling() {
        // d = 0 with log utility at both dates: split one unit evenly.
        let tree = fixtures::binomial_tree();
        let utility = UtilityProcess::uniform(&tree, NodeUtility::log()).unwrap();
        let empty = AdaptedProcess::zeros(&tree, 0);
        let market =
            crate::market::MarketSpec::new(tree, empty.clone(), empty, 1.0, vec![], utility)
                .unwrap();
        let program = ConvexProgram::assemble(&market);
        let solution = solve(&program, &SolverOptions::default()).unwrap();
        assert!((solution.consumption.get(0, 0, 0) - 0.5).abs() < 1e-6);
        assert!((solution.consumption.get(1, 0, 0) - 0.5).abs() < 1e-6);
        assert!((solution.expected_utility - (2.0 * (0.5f64).ln())).abs() < 1e-8);
    }
}
