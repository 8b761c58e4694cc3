//! Hamiltonian Updates: the feasibility solver for the normalized QUBO
//! relaxation
//!
//! ```text
//!   tr(C rho) >= gamma,   rho_ii = 1/n,   rho psd, tr rho = 1
//! ```
//!
//! The solver keeps `rho = exp(-H)/tr exp(-H)` and adds a penalty direction to
//! `H` whenever a constraint is violated by more than `epsilon`. The free
//! energy `F = -ln tr exp(-H)` starts at `-ln n`; once it turns positive no
//! feasible state can exist.
//!
//! Every Hamiltonian the solver builds is of the form `a C + diag(d)`, so the
//! loop stores only `(a, d)` and evaluates traces against the sparse pattern
//! of `C` plus the diagonal of the state.

use std::io::{self, BufRead, Write};
use std::time::Instant;

use thiserror::Error;

use crate::instances::CostMatrix;
use crate::symlin::{gibbs_state, GibbsState, LinalgError, SymMatrix};

#[derive(Debug, Error)]
pub enum HuError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("step length underflow at iteration {iteration}: no admissible step along the update direction")]
    Stuck { iteration: usize },
    #[error("state is already diagonal-feasible; no diagonal direction exists")]
    AlreadyDiagonalFeasible,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Grow the step after each update, halve on overshoot.
    Adaptive,
    /// Fixed rule `lambda = ((1-beta)^2/2) tr(rho dH)` with unscaled `P_c`
    /// and the sign-based diagonal direction.
    Theoretical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagRule {
    /// `sgn(diag rho - 1/n)` with the trace removed.
    L1,
    /// `(diag rho - 1/n) / max_i |rho_ii - 1/n|`.
    L2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub lambda_c0: f64,
    pub lambda_d0: f64,
    pub step_mode: StepMode,
    pub diag_rule: DiagRule,
    /// Multiply the cost direction by the current violation `tr(P_c rho)`.
    pub scale_cost: bool,
    /// `None` means ten times the a-priori bound for the instance size.
    pub max_iterations: Option<usize>,
    pub growth_factor: f64,
    pub shrink_factor: f64,
}

impl SolverConfig {
    /// Adaptive steps, the l2 diagonal direction, scaled cost direction and
    /// momentum 0.45.
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            beta: 0.45,
            lambda_c0: 1.0,
            lambda_d0: 1.0,
            step_mode: StepMode::Adaptive,
            diag_rule: DiagRule::L2,
            scale_cost: true,
            max_iterations: None,
            growth_factor: 1.3,
            shrink_factor: 0.5,
        }
    }

    /// Configuration covered by the a-priori iteration bound.
    pub fn theoretical(epsilon: f64, beta: f64) -> Self {
        Self {
            beta,
            step_mode: StepMode::Theoretical,
            diag_rule: DiagRule::L1,
            scale_cost: false,
            ..Self::new(epsilon)
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<(), HuError> {
        let bad = |m: String| Err(HuError::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return bad(format!("epsilon must lie in (0, 1/2], got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if !(self.lambda_c0 > 0.0 && self.lambda_d0 > 0.0 && self.lambda_c0.is_finite() && self.lambda_d0.is_finite()) {
            return bad("initial step lengths must be positive and finite".into());
        }
        if !(self.growth_factor >= 1.0 && self.growth_factor.is_finite()) {
            return bad(format!("growth factor must be >= 1, got {}", self.growth_factor));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor < 1.0) {
            return bad(format!("shrink factor must lie in (0, 1), got {}", self.shrink_factor));
        }
        if self.max_iterations == Some(0) {
            return bad("iteration cap must be positive".into());
        }
        Ok(())
    }

    pub fn iteration_cap(&self, n: usize) -> usize {
        self.max_iterations.unwrap_or_else(|| {
            let t = a_priori_bound(n.max(2), self.epsilon, self.beta);
            usize::try_from(t.saturating_mul(10)).unwrap_or(usize::MAX)
        })
    }
}

/// `16 (1-beta)^-6 eps^-2 ln n` before rounding up.
pub fn a_priori_value(n: usize, epsilon: f64, beta: f64) -> f64 {
    16.0 * (1.0 - beta).powi(-6) * epsilon.powi(-2) * (n as f64).ln()
}

/// Worst-case number of iterations of the theoretical mode on a feasible
/// program.
pub fn a_priori_bound(n: usize, epsilon: f64, beta: f64) -> u64 {
    a_priori_value(n, epsilon, beta).ceil() as u64
}

/// Step length of the theoretical mode.
pub fn theoretical_step(trace_rho_dh: f64, beta: f64) -> f64 {
    0.5 * (1.0 - beta) * (1.0 - beta) * trace_rho_dh
}

/// `P_c = gamma I - C`.
pub fn cost_direction(c: &CostMatrix, gamma: f64) -> SymMatrix {
    let mut p = c.to_dense().scaled(-1.0);
    p.add_identity(gamma);
    p
}

fn l1_diag(rho_diag: &[f64]) -> Vec<f64> {
    let n = rho_diag.len();
    let inv = 1.0 / n as f64;
    let sgn: Vec<f64> = rho_diag
        .iter()
        .map(|&r| {
            let d = r - inv;
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let shift = sgn.iter().sum::<f64>() / n as f64;
    sgn.into_iter().map(|s| s - shift).collect()
}

fn l2_diag(rho_diag: &[f64]) -> Result<Vec<f64>, HuError> {
    let inv = 1.0 / rho_diag.len() as f64;
    let dev: Vec<f64> = rho_diag.iter().map(|&r| r - inv).collect();
    let m = dev.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if m == 0.0 {
        return Err(HuError::AlreadyDiagonalFeasible);
    }
    Ok(dev.into_iter().map(|d| d / m).collect())
}

/// Sign-based diagonal direction; `tr(rho P) = sum_i |rho_ii - 1/n|`.
pub fn diag_direction_l1(rho: &SymMatrix) -> SymMatrix {
    SymMatrix::from_diagonal(&l1_diag(&rho.diagonal()))
}

/// Deviation-proportional diagonal direction with unit max-entry.
pub fn diag_direction_l2(rho: &SymMatrix) -> Result<SymMatrix, HuError> {
    Ok(SymMatrix::from_diagonal(&l2_diag(&rho.diagonal())?))
}

/// `sum_i |rho_ii - 1/n|`.
pub fn diagonal_violation(rho_diag: &[f64]) -> f64 {
    let inv = 1.0 / rho_diag.len() as f64;
    rho_diag.iter().map(|&r| (r - inv).abs()).sum()
}

/// Exact re-evaluation of both constraints for a dense state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityCheck {
    /// `tr(P_c rho) = gamma - tr(C rho)`.
    pub cost_violation: f64,
    pub diag_violation: f64,
    pub epsilon: f64,
}

impl FeasibilityCheck {
    pub fn passes(&self) -> bool {
        self.cost_violation <= self.epsilon && self.diag_violation <= self.epsilon
    }
}

pub fn check_feasibility(c: &CostMatrix, gamma: f64, rho: &SymMatrix, epsilon: f64) -> FeasibilityCheck {
    FeasibilityCheck {
        cost_violation: gamma - c.trace_with(rho),
        diag_violation: diagonal_violation(&rho.diagonal()),
        epsilon,
    }
}

/// Hamiltonian `cost_coeff * C + diag(diag)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    pub cost_coeff: f64,
    pub diag: Vec<f64>,
}

impl Hamiltonian {
    pub fn zeros(n: usize) -> Self {
        Self { cost_coeff: 0.0, diag: vec![0.0; n] }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn is_zero(&self) -> bool {
        self.cost_coeff == 0.0 && self.diag.iter().all(|&d| d == 0.0)
    }

    /// `self + alpha * other`.
    pub fn plus_scaled(&self, alpha: f64, other: &Hamiltonian) -> Hamiltonian {
        Hamiltonian {
            cost_coeff: self.cost_coeff + alpha * other.cost_coeff,
            diag: self.diag.iter().zip(&other.diag).map(|(a, b)| a + alpha * b).collect(),
        }
    }

    pub fn scaled(&self, alpha: f64) -> Hamiltonian {
        Hamiltonian { cost_coeff: alpha * self.cost_coeff, diag: self.diag.iter().map(|d| alpha * d).collect() }
    }

    pub fn to_dense(&self, c: &CostMatrix) -> SymMatrix {
        let mut m = SymMatrix::from_diagonal(&self.diag);
        if self.cost_coeff != 0.0 {
            for &(i, j, v) in c.upper_entries() {
                m.set(i, j, m.get(i, j) + self.cost_coeff * v);
            }
        }
        m
    }

    /// Largest absolute entry.
    pub fn max_norm(&self, c: &CostMatrix) -> f64 {
        let mut diag = self.diag.clone();
        let mut off = 0.0f64;
        for &(i, j, v) in c.upper_entries() {
            if i == j {
                diag[i] += self.cost_coeff * v;
            } else {
                off = off.max((self.cost_coeff * v).abs());
            }
        }
        diag.iter().fold(off, |m, d| m.max(d.abs()))
    }

    /// `tr(self rho)` from the summary of a state.
    pub fn trace_with(&self, view: &StateView) -> f64 {
        self.cost_coeff * view.trace_c + self.diag.iter().zip(&view.diag).map(|(d, r)| d * r).sum::<f64>()
    }

    /// Loose operator-norm bound `|a| ||C|| + max |d|` for unit-norm `C`.
    pub fn norm_bound(&self) -> f64 {
        self.cost_coeff.abs() + self.diag.iter().fold(0.0f64, |m, d| m.max(d.abs()))
    }
}

/// The quantities of a state the solver reads: its diagonal and `tr(C rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateView {
    pub diag: Vec<f64>,
    pub trace_c: f64,
}

impl StateView {
    pub fn maximally_mixed(c: &CostMatrix) -> Self {
        let n = c.dim() as f64;
        Self { diag: vec![1.0 / n; c.dim()], trace_c: c.trace() / n }
    }

    pub fn of(c: &CostMatrix, state: &GibbsState) -> Self {
        Self { diag: state.diagonal(), trace_c: c.trace_with_gibbs(state) }
    }
}

/// A Gibbs state of a structured Hamiltonian together with its summary.
#[derive(Debug, Clone)]
pub struct EvaluatedState {
    pub state: GibbsState,
    pub view: StateView,
}

impl EvaluatedState {
    pub fn free_energy(&self) -> f64 {
        self.state.free_energy()
    }
}

/// One matrix exponential: Gibbs state of `h` plus its summary.
pub fn evaluate(c: &CostMatrix, h: &Hamiltonian) -> Result<EvaluatedState, HuError> {
    let state = gibbs_state(&h.to_dense(c))?;
    let view = StateView::of(c, &state);
    Ok(EvaluatedState { state, view })
}

const LAMBDA_UNDERFLOW: f64 = 1e-300;

/// Shrinks `lambda` until `accept` holds. Returns the accepted step, the
/// number of rejected candidates and the accepted candidate's payload.
pub(crate) fn overshoot_search<S>(
    lambda: f64,
    shrink: f64,
    iteration: usize,
    mut candidate: impl FnMut(f64) -> Result<(bool, S), HuError>,
) -> Result<(f64, usize, S), HuError> {
    let mut lambda = lambda;
    let mut overshoots = 0;
    loop {
        let (ok, payload) = candidate(lambda)?;
        if ok {
            return Ok((lambda, overshoots, payload));
        }
        overshoots += 1;
        lambda *= shrink;
        if lambda < LAMBDA_UNDERFLOW {
            return Err(HuError::Stuck { iteration });
        }
    }
}

/// Result of one adaptive update on dense matrices.
#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub h_new: SymMatrix,
    pub state: GibbsState,
    pub free_energy: f64,
    /// Step actually applied.
    pub lambda_used: f64,
    /// Step proposed for the next update of the same kind.
    pub lambda_new: f64,
    pub overshoots: usize,
}

impl UpdateResult {
    pub fn matrix_exponentials(&self) -> usize {
        1 + self.overshoots
    }
}

/// Applies `H + lambda dH`, halving `lambda` while `tr(dH rho_new) < 0`, then
/// grows the step for the next call.
pub fn update(h: &SymMatrix, delta_h: &SymMatrix, lambda: f64, config: &SolverConfig) -> Result<UpdateResult, HuError> {
    if h.dim() != delta_h.dim() {
        return Err(HuError::DimensionMismatch { left: h.dim(), right: delta_h.dim() });
    }
    let (lambda_used, overshoots, (h_new, state)) = overshoot_search(lambda, config.shrink_factor, 0, |l| {
        let mut cand = h.clone();
        cand.add_scaled(l, delta_h);
        let st = gibbs_state(&cand)?;
        let tr = st.trace_with(delta_h)?;
        Ok((tr >= 0.0, (cand, st)))
    })?;
    Ok(UpdateResult {
        free_energy: state.free_energy(),
        h_new,
        state,
        lambda_used,
        lambda_new: config.growth_factor * lambda_used,
        overshoots,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Cost,
    Diag,
}

impl UpdateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateKind::Cost => "cost",
            UpdateKind::Diag => "diag",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cost" => Some(UpdateKind::Cost),
            "diag" => Some(UpdateKind::Diag),
            _ => None,
        }
    }
}

/// One applied update. Violations are measured on the state the update
/// corrects; `free_energy` is the value after the update and `h_max_norm`
/// the largest entry of the Hamiltonian before it.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub kind: UpdateKind,
    pub lambda: f64,
    pub overshoots: usize,
    pub cost_violation: f64,
    pub diag_violation: f64,
    pub free_energy: f64,
    pub h_max_norm: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationLedger {
    pub records: Vec<IterationRecord>,
    pub lambda_c0: f64,
    pub lambda_d0: f64,
}

pub const LEDGER_COLUMNS: [&str; 9] = [
    "iteration",
    "kind",
    "lambda",
    "overshoots",
    "cost_violation",
    "diag_violation",
    "free_energy",
    "h_max_norm",
    "wall_seconds",
];

impl IterationLedger {
    pub fn new(config: &SolverConfig) -> Self {
        Self { records: Vec::new(), lambda_c0: config.lambda_c0, lambda_d0: config.lambda_d0 }
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn overshoots(&self) -> usize {
        self.records.iter().map(|r| r.overshoots).sum()
    }

    /// One exponential per accepted step plus one per rejected candidate.
    pub fn matrix_exponentials(&self) -> usize {
        self.iterations() + self.overshoots()
    }

    pub fn count(&self, kind: UpdateKind) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }

    pub fn wall_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.wall_seconds).sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", LEDGER_COLUMNS.join(","))?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{:e},{},{:e},{:e},{:e},{:e},{:e}",
                r.iteration,
                r.kind.as_str(),
                r.lambda,
                r.overshoots,
                r.cost_violation,
                r.diag_violation,
                r.free_energy,
                r.h_max_norm,
                r.wall_seconds
            )?;
        }
        Ok(())
    }

    /// Reads a ledger CSV. Extra columns are ignored; `h_max_norm` and
    /// `wall_seconds` may be absent and then read as NaN.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, String> {
        let mut lines = r.lines();
        let header = lines.next().ok_or("empty ledger")?.map_err(|e| e.to_string())?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let idx = |name: &str| cols.iter().position(|c| *c == name);
        let need = |name: &str| idx(name).ok_or(format!("ledger is missing column `{name}`"));
        let (ci, ck, cl, co, cc, cd, cf) = (
            need("iteration")?,
            need("kind")?,
            need("lambda")?,
            need("overshoots")?,
            need("cost_violation")?,
            need("diag_violation")?,
            need("free_energy")?,
        );
        let (ch, cw) = (idx("h_max_norm"), idx("wall_seconds"));
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.trim().split(',').collect();
            let err = |what: &str| format!("ledger line {}: invalid {what}", lineno + 2);
            let num = |k: usize, what: &str| -> Result<f64, String> {
                f.get(k).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| err(what))
            };
            let opt = |k: Option<usize>, what: &str| -> Result<f64, String> {
                match k {
                    Some(k) => num(k, what),
                    None => Ok(f64::NAN),
                }
            };
            records.push(IterationRecord {
                iteration: f.get(ci).and_then(|s| s.parse().ok()).ok_or_else(|| err("iteration"))?,
                kind: f.get(ck).and_then(|s| UpdateKind::parse(s)).ok_or_else(|| err("kind"))?,
                lambda: num(cl, "lambda")?,
                overshoots: f.get(co).and_then(|s| s.parse().ok()).ok_or_else(|| err("overshoots"))?,
                cost_violation: num(cc, "cost_violation")?,
                diag_violation: num(cd, "diag_violation")?,
                free_energy: num(cf, "free_energy")?,
                h_max_norm: opt(ch, "h_max_norm")?,
                wall_seconds: opt(cw, "wall_seconds")?,
            });
        }
        Ok(Self { records, lambda_c0: f64::NAN, lambda_d0: f64::NAN })
    }
}

/// Result of one feasibility run.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum HuOutcome {
    /// `state` is the Gibbs state of `hamiltonian`; it is epsilon-feasible.
    Feasible { hamiltonian: Hamiltonian, state: GibbsState, ledger: IterationLedger },
    /// The free energy became positive: no feasible state exists.
    Infeasible { free_energy: f64, ledger: IterationLedger },
    IterationCapReached { ledger: IterationLedger },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    Feasible,
    Infeasible,
    CapReached,
}

impl OutcomeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Feasible => "feasible",
            OutcomeKind::Infeasible => "infeasible",
            OutcomeKind::CapReached => "cap_reached",
        }
    }
}

impl HuOutcome {
    pub fn ledger(&self) -> &IterationLedger {
        match self {
            HuOutcome::Feasible { ledger, .. } | HuOutcome::Infeasible { ledger, .. } | HuOutcome::IterationCapReached { ledger } => ledger,
        }
    }

    pub fn kind(&self) -> OutcomeKind {
        match self {
            HuOutcome::Feasible { .. } => OutcomeKind::Feasible,
            HuOutcome::Infeasible { .. } => OutcomeKind::Infeasible,
            HuOutcome::IterationCapReached { .. } => OutcomeKind::CapReached,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, HuOutcome::Feasible { .. })
    }
}

/// Runs the feasibility solver for threshold `gamma`.
pub fn hamiltonian_updates(c: &CostMatrix, gamma: f64, config: &SolverConfig) -> Result<HuOutcome, HuError> {
    config.validate()?;
    let n = c.dim();
    let cap = config.iteration_cap(n);
    let eps = config.epsilon;
    let theoretical = config.step_mode == StepMode::Theoretical;

    let mut h = Hamiltonian::zeros(n);
    let mut current: Option<EvaluatedState> = None;
    let mut view = StateView::maximally_mixed(c);
    let mut f = -(n as f64).ln();
    // momentum register: lambda * dH of the last update (adaptive mode), or
    // the last dH itself (theoretical mode)
    let mut m = Hamiltonian::zeros(n);
    let mut lambda_c = config.lambda_c0;
    let mut lambda_d = config.lambda_d0;
    let mut ledger = IterationLedger::new(config);

    while f <= 0.0 {
        let started = Instant::now();
        let cost_violation = gamma - view.trace_c;
        let diag_violation = diagonal_violation(&view.diag);
        let kind = if cost_violation > eps {
            UpdateKind::Cost
        } else if diag_violation > eps {
            UpdateKind::Diag
        } else {
            let state = match current {
                Some(ev) => ev.state,
                None => gibbs_state(&h.to_dense(c))?,
            };
            return Ok(HuOutcome::Feasible { hamiltonian: h, state, ledger });
        };
        if ledger.iterations() >= cap {
            return Ok(HuOutcome::IterationCapReached { ledger });
        }

        let p = match kind {
            UpdateKind::Cost => {
                let scale = if config.scale_cost && !theoretical { cost_violation } else { 1.0 };
                let mut diag = vec![0.0; n];
                diag.iter_mut().for_each(|d| *d = scale * gamma);
                Hamiltonian { cost_coeff: -scale, diag }
            }
            UpdateKind::Diag => {
                let diag = match config.diag_rule {
                    DiagRule::L1 => l1_diag(&view.diag),
                    DiagRule::L2 => l2_diag(&view.diag)?,
                };
                Hamiltonian { cost_coeff: 0.0, diag }
            }
        };
        let lambda_kind = match kind {
            UpdateKind::Cost => lambda_c,
            UpdateKind::Diag => lambda_d,
        };
        let delta = if config.beta == 0.0 {
            p
        } else if theoretical {
            p.plus_scaled(config.beta, &m)
        } else {
            p.plus_scaled(config.beta / lambda_kind, &m)
        };
        let h_max_norm = h.max_norm(c);
        let iteration = ledger.iterations() + 1;

        let (lambda_used, overshoots, next) = if theoretical {
            let lambda = theoretical_step(delta.trace_with(&view), config.beta);
            let ev = evaluate(c, &h.plus_scaled(lambda, &delta))?;
            let tr = delta.trace_with(&ev.view);
            if tr < -1e-12 * delta.norm_bound().max(1.0) {
                log::warn!("theoretical step overshot at iteration {iteration}: tr(dH rho_new) = {tr:e}");
            }
            (lambda, 0, ev)
        } else {
            overshoot_search(lambda_kind, config.shrink_factor, iteration, |l| {
                let ev = evaluate(c, &h.plus_scaled(l, &delta))?;
                let ok = delta.trace_with(&ev.view) >= 0.0;
                Ok((ok, ev))
            })?
        };

        h = h.plus_scaled(lambda_used, &delta);
        f = next.free_energy();
        view = next.view.clone();
        current = Some(next);
        if theoretical {
            m = delta;
        } else {
            let grown = config.growth_factor * lambda_used;
            match kind {
                UpdateKind::Cost => lambda_c = grown,
                UpdateKind::Diag => lambda_d = grown,
            }
            m = delta.scaled(grown);
        }
        ledger.records.push(IterationRecord {
            iteration,
            kind,
            lambda: lambda_used,
            overshoots,
            cost_violation,
            diag_violation,
            free_energy: f,
            h_max_norm,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::trace!(
            "iter {iteration} {} lambda={lambda_used:.3e} overshoots={overshoots} F={f:.6}",
            kind.as_str()
        );
    }
    Ok(HuOutcome::Infeasible { free_energy: f, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate_instance, InstanceSeedSpec};

    fn swap() -> CostMatrix {
        CostMatrix::from_entries(2, [(0, 1, 1.0)]).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn cost_direction_examples() {
        let c = swap();
        let p = cost_direction(&c, 0.5);
        assert_eq!(p.to_rows(), vec![vec![0.5, -1.0], vec![-1.0, 0.5]]);
        let p0 = cost_direction(&c, 0.0);
        assert_eq!(p0.to_rows(), vec![vec![0.0, -1.0], vec![-1.0, 0.0]]);
        let z = CostMatrix::from_entries(3, [(0, 0, 0.0), (1, 1, 1.0)]).unwrap().scaled(0.0);
        assert_eq!(cost_direction(&z, 1.0), SymMatrix::identity(3));
    }

    #[test]
    fn cost_direction_trace_at_mixed_state() {
        let c = generate_instance(&InstanceSeedSpec::block(16, 3, 2)).unwrap();
        let rho = SymMatrix::identity(16).scaled(1.0 / 16.0);
        let p = cost_direction(&c, 0.37);
        close(crate::symlin::trace_product(&p, &rho).unwrap(), 0.37, 1e-15);
    }

    #[test]
    fn l1_direction_examples() {
        let z = diag_direction_l1(&SymMatrix::identity(4).scaled(0.25));
        assert_eq!(z, SymMatrix::zeros(4));

        let rho = SymMatrix::from_diagonal(&[0.6, 0.4]);
        let p = diag_direction_l1(&rho);
        assert_eq!(p.diagonal(), vec![1.0, -1.0]);
        close(crate::symlin::trace_product(&p, &rho).unwrap(), 0.2, 1e-12);

        let rho = SymMatrix::from_diagonal(&[0.4, 0.3, 0.2, 0.1]);
        assert_eq!(diag_direction_l1(&rho).diagonal(), vec![1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn l1_direction_with_unbalanced_signs() {
        let rho = SymMatrix::from_diagonal(&[0.5, 0.2, 0.2, 0.1]);
        let p = diag_direction_l1(&rho);
        // signs (+,-,-,-), trace -2 removed: +1.5, -0.5, -0.5, -0.5
        assert_eq!(p.diagonal(), vec![1.5, -0.5, -0.5, -0.5]);
        close(crate::symlin::trace_product(&p, &rho).unwrap(), diagonal_violation(&rho.diagonal()), 1e-12);
    }

    #[test]
    fn l2_direction_examples() {
        let rho = SymMatrix::from_diagonal(&[0.4, 0.3, 0.2, 0.1]);
        let p = diag_direction_l2(&rho).unwrap();
        let d = p.diagonal();
        close(d[0], 1.0, 1e-15);
        close(d[1], 1.0 / 3.0, 1e-15);
        close(d[2], -1.0 / 3.0, 1e-15);
        close(d[3], -1.0, 1e-15);

        for a in [1e-6, 0.1, 0.3] {
            let p = diag_direction_l2(&SymMatrix::from_diagonal(&[0.5 + a, 0.5 - a])).unwrap();
            close(p.diagonal()[0], 1.0, 1e-9);
            close(p.diagonal()[1], -1.0, 1e-9);
        }
        assert!(matches!(
            diag_direction_l2(&SymMatrix::identity(3).scaled(1.0 / 3.0)),
            Err(HuError::AlreadyDiagonalFeasible)
        ));
    }

    #[test]
    fn l2_unnormalized_trace_is_squared_deviation() {
        let h = SymMatrix::from_upper_fn(6, |i, j| ((3 * i + 5 * j) % 7) as f64 * 0.2 - 0.5);
        let st = gibbs_state(&h).unwrap();
        let rho = st.rho();
        let d = rho.diagonal();
        let dev: Vec<f64> = d.iter().map(|r| r - 1.0 / 6.0).collect();
        let unnorm = SymMatrix::from_diagonal(&dev);
        let lhs = crate::symlin::trace_product(rho, &unnorm).unwrap();
        let rhs: f64 = dev.iter().map(|x| x * x).sum();
        close(lhs, rhs, 1e-12);
    }

    #[test]
    fn theoretical_step_examples() {
        close(theoretical_step(0.1, 0.0), 0.05, 1e-17);
        close(theoretical_step(0.1, 0.5), 0.0125, 1e-17);
        let eps = 0.02;
        close(theoretical_step(eps, 0.3), 0.49 / 2.0 * eps, 1e-17);
    }

    #[test]
    fn a_priori_examples() {
        let n = 128;
        close(a_priori_value(n, 0.01, 0.0), 16e4 * (128f64).ln(), 1e-6);
        assert_eq!(a_priori_bound(n, 0.01, 0.0), 776_325);
        let ratio = a_priori_value(1000, 0.05, 0.5) / a_priori_value(1000, 0.05, 0.0);
        close(ratio, 64.0, 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::new(0.01).validate().is_ok());
        assert!(SolverConfig::new(0.6).validate().is_err());
        assert!(SolverConfig::new(0.0).validate().is_err());
        assert!(SolverConfig::new(0.1).with_beta(1.0).validate().is_err());
        let cfg = SolverConfig { shrink_factor: 1.0, ..SolverConfig::new(0.1) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn update_without_overshoot_grows_step() {
        let h = SymMatrix::from_diagonal(&[-1.0, 1.0]);
        let dh = SymMatrix::from_diagonal(&[1.0, -1.0]);
        let r = update(&h, &dh, 0.5, &SolverConfig::new(0.1)).unwrap();
        assert_eq!(r.overshoots, 0);
        close(r.lambda_used, 0.5, 0.0);
        close(r.lambda_new, 0.65, 1e-15);
        assert_eq!(r.matrix_exponentials(), 1);
    }

    #[test]
    fn update_halves_after_overshoot() {
        // H + l dH = diag(l-1, 1-l): the sign condition holds exactly for l <= 1
        let h = SymMatrix::from_diagonal(&[-1.0, 1.0]);
        let dh = SymMatrix::from_diagonal(&[1.0, -1.0]);
        let r = update(&h, &dh, 50.0, &SolverConfig::new(0.1)).unwrap();
        assert_eq!(r.overshoots, 6);
        close(r.lambda_used, 0.78125, 0.0);
        close(r.lambda_new, 1.015625, 1e-15);
        assert_eq!(r.matrix_exponentials(), 7);
        assert!(r.state.trace_with(&dh).unwrap() >= 0.0);
        close(r.free_energy, crate::symlin::free_energy(&r.h_new).unwrap(), 1e-12);
    }

    #[test]
    fn update_without_admissible_step_degenerates() {
        // from H = 0 every positive step along diag(1,-1) crosses the
        // hyperplane; halving only stops once the step is below roundoff
        let r = update(&SymMatrix::zeros(2), &SymMatrix::from_diagonal(&[1.0, -1.0]), 50.0, &SolverConfig::new(0.1)).unwrap();
        assert!(r.lambda_used < 1e-15, "{}", r.lambda_used);
        assert!(r.overshoots > 50);
    }

    #[test]
    fn overshoot_search_underflow_is_an_error() {
        let r: Result<(f64, usize, ()), _> = overshoot_search(1.0, 0.5, 3, |_| Ok((false, ())));
        assert!(matches!(r, Err(HuError::Stuck { iteration: 3 })));
    }

    #[test]
    fn gamma_minus_one_is_immediately_feasible() {
        let c = generate_instance(&InstanceSeedSpec::block(32, 4, 0)).unwrap();
        let out = hamiltonian_updates(&c, -1.0, &SolverConfig::new(0.05)).unwrap();
        assert!(out.is_feasible());
        assert_eq!(out.ledger().iterations(), 0);
        assert_eq!(out.ledger().matrix_exponentials(), 0);
    }

    fn run_checked(c: &CostMatrix, gamma: f64, cfg: &SolverConfig) -> HuOutcome {
        let out = hamiltonian_updates(c, gamma, cfg).unwrap();
        let ledger = out.ledger();
        assert_eq!(ledger.matrix_exponentials(), ledger.iterations() + ledger.overshoots());
        if let HuOutcome::Feasible { state, hamiltonian, .. } = &out {
            let chk = check_feasibility(c, gamma, state.rho(), cfg.epsilon);
            assert!(chk.passes(), "{chk:?}");
            assert!(ledger.records.iter().all(|r| r.free_energy <= 0.0));
            let fresh = gibbs_state(&hamiltonian.to_dense(c)).unwrap();
            close(fresh.free_energy(), state.free_energy(), 1e-9);
        }
        if let HuOutcome::Infeasible { free_energy, .. } = &out {
            assert!(*free_energy > 0.0);
        }
        out
    }

    #[test]
    fn small_feasible_and_infeasible_runs() {
        let c = generate_instance(&InstanceSeedSpec::block(16, 3, 4)).unwrap();
        let cfg = SolverConfig::new(0.05);
        assert!(run_checked(&c, 0.2, &cfg).is_feasible());
        // above the largest eigenvalue no state satisfies tr(C rho) >= gamma
        assert_eq!(run_checked(&c, 1.0, &cfg).kind(), OutcomeKind::Infeasible);
    }

    #[test]
    fn theoretical_mode_runs_within_bound() {
        let c = generate_instance(&InstanceSeedSpec::block(8, 2, 1)).unwrap();
        let cfg = SolverConfig::theoretical(0.1, 0.3);
        let out = run_checked(&c, 0.1, &cfg);
        assert!(out.is_feasible());
        assert!(out.ledger().iterations() as u64 <= a_priori_bound(8, 0.1, 0.3));
        assert_eq!(out.ledger().overshoots(), 0);
    }

    #[test]
    fn iteration_cap_is_reported() {
        let c = generate_instance(&InstanceSeedSpec::block(16, 3, 4)).unwrap();
        let cfg = SolverConfig { max_iterations: Some(2), ..SolverConfig::new(0.01) };
        let out = hamiltonian_updates(&c, 0.5, &cfg).unwrap();
        assert_eq!(out.kind(), OutcomeKind::CapReached);
        assert_eq!(out.ledger().iterations(), 2);
    }

    #[test]
    fn structured_hamiltonian_matches_dense() {
        let c = generate_instance(&InstanceSeedSpec::block(12, 3, 8)).unwrap();
        let h = Hamiltonian { cost_coeff: -0.7, diag: (0..12).map(|i| 0.1 * i as f64 - 0.3).collect() };
        let dense = h.to_dense(&c);
        close(h.max_norm(&c), dense.max_abs(), 0.0);
        let ev = evaluate(&c, &h).unwrap();
        let other = Hamiltonian { cost_coeff: 0.4, diag: (0..12).map(|i| (i % 3) as f64).collect() };
        let exact = ev.state.trace_with(&other.to_dense(&c)).unwrap();
        close(other.trace_with(&ev.view), exact, 1e-13);
    }

    #[test]
    fn ledger_csv_round_trip() {
        let c = generate_instance(&InstanceSeedSpec::block(16, 3, 4)).unwrap();
        let out = hamiltonian_updates(&c, 0.2, &SolverConfig::new(0.05)).unwrap();
        let mut buf = Vec::new();
        out.ledger().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,kind,lambda,overshoots,cost_violation,diag_violation,free_energy"));
        let back = IterationLedger::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.records, out.ledger().records);
    }

    #[test]
    fn beta_zero_has_no_momentum_contribution() {
        let c = generate_instance(&InstanceSeedSpec::block(16, 3, 4)).unwrap();
        let cfg = SolverConfig::new(0.05).with_beta(0.0);
        let out = run_checked(&c, 0.2, &cfg);
        // with beta = 0 every cost step is a multiple of P_c: the cost
        // coefficient equals minus the sum of the applied scaled steps
        let cost_steps: f64 = out
            .ledger()
            .records
            .iter()
            .filter(|r| r.kind == UpdateKind::Cost)
            .map(|r| r.lambda * r.cost_violation)
            .sum();
        if let HuOutcome::Feasible { hamiltonian, .. } = out {
            close(hamiltonian.cost_coeff, -cost_steps, 1e-12);
        } else {
            panic!("expected feasible");
        }
    }
}
