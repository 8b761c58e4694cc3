//! Bisection over the objective threshold, and reference optima.
//!
//! Each probe asks the feasibility solver whether some state reaches
//! `tr(C rho) >= gamma`. Feasible probes raise the lower end of the bracket,
//! infeasibility certificates lower the upper end. The reported result is the
//! bracket; `gamma_lo` is the largest threshold at which an epsilon-feasible
//! state was found.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::hu::{hamiltonian_updates, Hamiltonian, HuError, HuOutcome, OutcomeKind, SolverConfig};
use crate::instances::CostMatrix;
use crate::rng::{stream_rng, Stream};
use crate::symlin::{eigenvalues, GibbsState, LinalgError, SymMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub index: usize,
    pub gamma: f64,
    pub outcome: OutcomeKind,
    pub iterations: usize,
    pub matrix_exponentials: usize,
    pub wall_seconds: f64,
    pub final_free_energy: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    /// Largest probed threshold with an epsilon-feasible state.
    pub gamma_lo: f64,
    /// Smallest refuted threshold (1 if none was refuted).
    pub gamma_hi: f64,
    pub hamiltonian_star: Hamiltonian,
    /// Gibbs state found at `gamma_lo`.
    pub rho_star: GibbsState,
    pub probes: Vec<ProbeRecord>,
    /// Ledgers of all probes in order.
    pub ledgers: Vec<crate::hu::IterationLedger>,
}

impl SearchResult {
    pub fn gamma_star(&self) -> f64 {
        self.gamma_lo
    }

    pub fn bracket(&self) -> (f64, f64) {
        (self.gamma_lo, self.gamma_hi)
    }

    pub fn total_iterations(&self) -> usize {
        self.probes.iter().map(|p| p.iterations).sum()
    }

    pub fn total_matrix_exponentials(&self) -> usize {
        self.probes.iter().map(|p| p.matrix_exponentials).sum()
    }

    pub fn write_trace_csv<W: Write>(&self, w: W) -> io::Result<()> {
        write_trace(&self.probes, w)
    }
}

/// Bracket and probes of a search that hit a probe's iteration cap.
#[derive(Debug, Clone)]
pub struct PartialSearch {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub probes: Vec<ProbeRecord>,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("gap must be positive and finite, got {0}")]
    InvalidGap(f64),
    #[error("probe at gamma = {gamma} reached the iteration cap; bracket [{}, {}]", partial.gamma_lo, partial.gamma_hi)]
    Aborted { gamma: f64, partial: Box<PartialSearch> },
    #[error(transparent)]
    Hu(#[from] HuError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub const TRACE_COLUMNS: [&str; 7] =
    ["probe", "gamma", "outcome", "iterations", "matrix_exponentials", "wall_seconds", "final_free_energy"];

pub fn write_trace<W: Write>(probes: &[ProbeRecord], mut w: W) -> io::Result<()> {
    writeln!(w, "{}", TRACE_COLUMNS.join(","))?;
    for p in probes {
        writeln!(
            w,
            "{},{:e},{},{},{},{:e},{:e}",
            p.index,
            p.gamma,
            p.outcome.as_str(),
            p.iterations,
            p.matrix_exponentials,
            p.wall_seconds,
            p.final_free_energy
        )?;
    }
    Ok(())
}

/// Upper bound on the number of probes, the initial one included.
pub fn max_probes(gap: f64) -> usize {
    (2.0 / gap).log2().ceil().max(0.0) as usize + 1
}

/// Bisection on `[-1, 1]` until the bracket is at most `gap` wide. Every probe
/// starts from `H = 0`.
pub fn binary_search(c: &CostMatrix, config: &SolverConfig, gap: f64) -> Result<SearchResult, SearchError> {
    config.validate()?;
    binary_search_with(gap, |gamma| hamiltonian_updates(c, gamma, config))
}

/// Same bisection with a caller-supplied feasibility run.
pub fn binary_search_with<F>(gap: f64, mut run: F) -> Result<SearchResult, SearchError>
where
    F: FnMut(f64) -> Result<HuOutcome, HuError>,
{
    if !(gap > 0.0 && gap.is_finite()) {
        return Err(SearchError::InvalidGap(gap));
    }
    let mut probes = Vec::new();
    let mut ledgers = Vec::new();

    let mut probe = |gamma: f64, probes: &mut Vec<ProbeRecord>| -> Result<HuOutcome, SearchError> {
        let out = run(gamma)?;
        let ledger = out.ledger();
        let final_free_energy = match &out {
            HuOutcome::Feasible { state, .. } => state.free_energy(),
            HuOutcome::Infeasible { free_energy, .. } => *free_energy,
            HuOutcome::IterationCapReached { ledger } => ledger.records.last().map_or(f64::NAN, |r| r.free_energy),
        };
        probes.push(ProbeRecord {
            index: probes.len(),
            gamma,
            outcome: out.kind(),
            iterations: ledger.iterations(),
            matrix_exponentials: ledger.matrix_exponentials(),
            wall_seconds: ledger.wall_seconds(),
            final_free_energy,
        });
        ledgers.push(ledger.clone());
        log::debug!("probe gamma={gamma:.6} -> {} ({} iterations)", out.kind().as_str(), ledger.iterations());
        Ok(out)
    };

    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let (mut h_star, mut rho_star) = match probe(lo, &mut probes)? {
        HuOutcome::Feasible { hamiltonian, state, .. } => (hamiltonian, state),
        // tr(P_c I/n) = -1 - tr(C)/n <= 0 and the diagonal is exact, so the
        // first probe cannot fail on a normalized matrix
        HuOutcome::Infeasible { .. } | HuOutcome::IterationCapReached { .. } => {
            return Err(SearchError::Aborted { gamma: lo, partial: Box::new(PartialSearch { gamma_lo: lo, gamma_hi: hi, probes }) })
        }
    };
    while hi - lo > gap {
        let mid = 0.5 * (lo + hi);
        match probe(mid, &mut probes)? {
            HuOutcome::Feasible { hamiltonian, state, .. } => {
                lo = mid;
                h_star = hamiltonian;
                rho_star = state;
            }
            HuOutcome::Infeasible { .. } => hi = mid,
            HuOutcome::IterationCapReached { .. } => {
                return Err(SearchError::Aborted {
                    gamma: mid,
                    partial: Box::new(PartialSearch { gamma_lo: lo, gamma_hi: hi, probes }),
                })
            }
        }
    }
    Ok(SearchResult { gamma_lo: lo, gamma_hi: hi, hamiltonian_star: h_star, rho_star, probes, ledgers })
}

/// Options for the low-rank reference solver.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOptions {
    /// Factor rank; `None` picks `ceil(sqrt(2n)) + 1`.
    pub rank: Option<usize>,
    /// Stop once `(upper - primal) / n` falls below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self { rank: None, tolerance: 1e-7, max_sweeps: 200_000, seed: 0 }
    }
}

/// Near-optimal solution of `max tr(C rho)` over states with `rho_ii = 1/n`.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    /// `tr(C rho_ref)`, attained by `rho_ref` exactly.
    pub gamma_ref: f64,
    /// Certified upper bound on the optimum of the same program.
    pub upper_bound: f64,
    pub rho: SymMatrix,
    pub sweeps: usize,
    pub rank: usize,
}

impl ReferenceSolution {
    pub fn gap(&self) -> f64 {
        self.upper_bound - self.gamma_ref
    }
}

/// Block-coordinate ascent on a rank-`k` factorization `rho = V V^T / n` with
/// unit rows `v_i`. Each coordinate step sets `v_i` to the normalized local
/// field `sum_{j != i} C_ij v_j`, the exact maximizer over unit vectors.
///
/// The bound uses the dual point `y_i = (C X)_ii`:
/// `tr(C X) <= sum_i y_i + n lambda_max(C - Diag(y))` for every feasible `X`.
pub fn reference_optimum(c: &CostMatrix, opts: &ReferenceOptions) -> Result<ReferenceSolution, SearchError> {
    let n = c.dim();
    let k = opts.rank.unwrap_or(((2.0 * n as f64).sqrt().ceil() as usize + 1).min(n)).max(1);
    let mut rng = stream_rng(opts.seed, Stream::Reference, 0);
    let mut v = vec![0.0; n * k];
    for i in 0..n {
        let row = &mut v[i * k..(i + 1) * k];
        for x in row.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        normalize(row);
    }
    let nf = n as f64;
    let mut g = vec![0.0; k];
    let mut sweeps = 0;
    let mut best: Option<(f64, f64)> = None;
    let mut last_primal = f64::NEG_INFINITY;
    while sweeps < opts.max_sweeps {
        for i in 0..n {
            g.iter_mut().for_each(|x| *x = 0.0);
            for &(j, cij) in c.row(i) {
                if j != i {
                    let vj = &v[j * k..(j + 1) * k];
                    for (gl, vl) in g.iter_mut().zip(vj) {
                        *gl += cij * vl;
                    }
                }
            }
            if g.iter().any(|x| *x != 0.0) {
                let row = &mut v[i * k..(i + 1) * k];
                row.copy_from_slice(&g);
                normalize(row);
            }
        }
        sweeps += 1;
        let primal = primal_value(c, &v, k) / nf;
        let stalled = primal - last_primal <= 1e-3 * opts.tolerance;
        last_primal = primal;
        if sweeps % 25 == 0 || stalled || sweeps == opts.max_sweeps {
            let upper = dual_bound(c, &v, k)? / nf;
            best = Some((primal, upper));
            if upper - primal <= opts.tolerance || stalled {
                break;
            }
        }
    }
    let (gamma_ref, upper_bound) = match best {
        Some(b) => b,
        None => (primal_value(c, &v, k) / nf, dual_bound(c, &v, k)? / nf),
    };
    let rho = SymMatrix::from_upper_fn(n, |i, j| {
        if i == j {
            1.0 / nf
        } else {
            dot(&v[i * k..(i + 1) * k], &v[j * k..(j + 1) * k]) / nf
        }
    });
    if upper_bound - gamma_ref > opts.tolerance {
        log::warn!("reference solver stopped with gap {:e} after {sweeps} sweeps", upper_bound - gamma_ref);
    }
    Ok(ReferenceSolution { gamma_ref, upper_bound, rho, sweeps, rank: k })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(x: &mut [f64]) {
    let norm = dot(x, x).sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|e| *e /= norm);
    }
}

fn primal_value(c: &CostMatrix, v: &[f64], k: usize) -> f64 {
    c.upper_entries()
        .iter()
        .map(|&(i, j, cij)| {
            if i == j {
                cij
            } else {
                2.0 * cij * dot(&v[i * k..(i + 1) * k], &v[j * k..(j + 1) * k])
            }
        })
        .sum()
}

fn dual_bound(c: &CostMatrix, v: &[f64], k: usize) -> Result<f64, LinalgError> {
    let n = c.dim();
    let mut y = vec![0.0; n];
    for (i, yi) in y.iter_mut().enumerate() {
        let vi = &v[i * k..(i + 1) * k];
        *yi = c.row(i).iter().map(|&(j, cij)| if j == i { cij } else { cij * dot(vi, &v[j * k..(j + 1) * k]) }).sum();
    }
    let mut m = c.to_dense();
    for (i, yi) in y.iter().enumerate() {
        m.set(i, i, m.get(i, i) - yi);
    }
    let w = eigenvalues(&m)?;
    Ok(y.iter().sum::<f64>() + n as f64 * w[n - 1])
}

/// Reference threshold from a finer bisection of the feasibility solver
/// itself, at `epsilon / 10` and gap `epsilon / 10`.
pub fn hu_reference(c: &CostMatrix, config: &SolverConfig) -> Result<SearchResult, SearchError> {
    let fine = SolverConfig { epsilon: config.epsilon / 10.0, ..config.clone() };
    binary_search(c, &fine, fine.epsilon)
}
