//! Classical emulation of the solver as it would run with quantum
//! subroutines: every read of the state goes through an oracle with bounded
//! error, branch thresholds drop to `3/4 eps`, and the free energy is never
//! evaluated directly but lower-bounded from trace estimates.
//!
//! Oracle error. Branch queries (`tr(P_c rho)` and the diagonal) carry an
//! absolute error of at most `delta` (`eps/4` by default; `l1` error for the
//! diagonal). Queries against an update direction `dH` are rescaled: the
//! error is at most `delta * b(dH)` with `b(a C + diag(d)) = |a| + max|d|`,
//! an upper bound on `||dH||`, so that a unit-norm observable sees `delta`.
//!
//! Free-energy bound. Along `lambda -> F(H + lambda dH)` the derivative
//! `tr(rho dH)` is non-increasing (concavity), so for `J` equal segments
//!
//! ```text
//!   F(H + l dH) - F(H) >= sum_{j=1..J} (l/J) tr(rho_{H + (j/J) l dH} dH)
//! ```
//!
//! and subtracting the oracle error from each term keeps it a lower bound.

use std::io::{self, Write};
use std::time::Instant;

use rand::Rng;

use crate::hu::{
    diagonal_violation, evaluate, EvaluatedState, Hamiltonian, HuError, HuOutcome, IterationLedger, IterationRecord,
    SolverConfig, StateView, UpdateKind, LEDGER_COLUMNS,
};
use crate::instances::CostMatrix;
use crate::rng::{stream_rng, Stream};
use crate::symlin::{gibbs_state, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    None,
    Uniform,
    Adversarial,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Uniform => "uniform",
            NoiseKind::Adversarial => "adversarial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(NoiseKind::None),
            "uniform" => Some(NoiseKind::Uniform),
            "adversarial" => Some(NoiseKind::Adversarial),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Error budget of a unit-norm query.
    pub magnitude: f64,
    pub seed: u64,
}

impl NoiseModel {
    /// Budget `eps / 4`.
    pub fn new(kind: NoiseKind, epsilon: f64, seed: u64) -> Self {
        Self { kind, magnitude: epsilon / 4.0, seed }
    }

    /// Error the caller must allow for; zero for exact oracles.
    pub fn budget(&self) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            _ => self.magnitude,
        }
    }
}

/// Stateful oracle: query `k` draws from its own random stream.
#[derive(Debug, Clone)]
pub struct Oracle {
    model: NoiseModel,
    queries: u64,
}

impl Oracle {
    pub fn new(model: NoiseModel) -> Self {
        Self { model, queries: 0 }
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }

    fn next_rng(&mut self) -> crate::rng::StreamRng {
        let rng = stream_rng(self.model.seed, Stream::OracleNoise, self.queries);
        self.queries += 1;
        rng
    }

    /// Estimate of a trace with error at most `budget * scale`. The
    /// adversarial oracle always understates: it delays cost updates,
    /// provokes extra halvings and slows the free-energy bound.
    pub fn trace(&mut self, exact: f64, scale: f64) -> f64 {
        let mut rng = self.next_rng();
        let bound = self.model.budget() * scale;
        match self.model.kind {
            NoiseKind::None => exact,
            NoiseKind::Uniform => exact + bound * rng.random_range(-1.0..=1.0),
            NoiseKind::Adversarial => exact - bound,
        }
    }

    /// Estimate of the diagonal with `l1` error at most the budget. The
    /// uniform model keeps the estimate's trace; the adversarial one pulls
    /// the deviations from `1/n` toward zero.
    pub fn diagonals(&mut self, exact: &[f64]) -> Vec<f64> {
        let mut rng = self.next_rng();
        let budget = self.model.budget();
        let n = exact.len();
        match self.model.kind {
            NoiseKind::None => exact.to_vec(),
            NoiseKind::Uniform => {
                let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let mean = u.iter().sum::<f64>() / n as f64;
                u.iter_mut().for_each(|x| *x -= mean);
                let l1: f64 = u.iter().map(|x| x.abs()).sum();
                let mass = budget * rng.random_range(0.0..=1.0);
                if l1 == 0.0 {
                    return exact.to_vec();
                }
                exact.iter().zip(&u).map(|(e, x)| e + x * mass / l1).collect()
            }
            NoiseKind::Adversarial => {
                let inv = 1.0 / n as f64;
                let dev: f64 = exact.iter().map(|e| (e - inv).abs()).sum();
                if dev == 0.0 {
                    return exact.to_vec();
                }
                let keep = 1.0 - (budget / dev).min(1.0);
                exact.iter().map(|e| inv + (e - inv) * keep).collect()
            }
        }
    }
}

/// `tr(A rho_H)` through an oracle with absolute error at most its budget.
pub fn noisy_trace_product(h: &SymMatrix, a: &SymMatrix, oracle: &mut Oracle) -> Result<f64, HuError> {
    let exact = gibbs_state(h)?.trace_with(a)?;
    Ok(oracle.trace(exact, 1.0))
}

/// Diagonal of `rho_H` through an oracle with `l1` error at most its budget.
pub fn noisy_gibbs_diagonals(h: &SymMatrix, oracle: &mut Oracle) -> Result<Vec<f64>, HuError> {
    Ok(oracle.diagonals(&gibbs_state(h)?.diagonal()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumEmuConfig {
    pub base: SolverConfig,
    pub noise: NoiseModel,
    /// Riemann segments per free-energy increment.
    pub segments: usize,
    /// Record the exact free energy next to the bound.
    pub verify_exact: bool,
    /// Halvings tried under the certified overshoot test before falling back
    /// to a plain sign test.
    pub max_certify_halvings: usize,
}

impl QuantumEmuConfig {
    pub fn new(base: SolverConfig, noise: NoiseModel) -> Self {
        Self { base, noise, segments: 1, verify_exact: true, max_certify_halvings: 30 }
    }

    pub fn validate(&self) -> Result<(), HuError> {
        self.base.validate()?;
        if self.segments == 0 {
            return Err(HuError::Config("segment count J must be at least 1".into()));
        }
        if !(self.noise.magnitude >= 0.0 && self.noise.magnitude.is_finite()) {
            return Err(HuError::Config("noise magnitude must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-iteration extras of an emulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumRecord {
    pub f_bound: f64,
    /// Exact free energy after the update, NaN unless verification is on.
    pub f_exact: f64,
    /// The accepted step passed only the fallback sign test.
    pub uncertified: bool,
    /// Exponentials spent on the free-energy bound alone.
    pub bound_exponentials: usize,
}

#[derive(Debug, Clone)]
pub struct QuantumRun {
    /// `Infeasible` carries the free-energy bound, not the exact value.
    pub outcome: HuOutcome,
    pub extras: Vec<QuantumRecord>,
    pub noise_kind: NoiseKind,
    pub oracle_queries: u64,
}

impl QuantumRun {
    pub fn ledger(&self) -> &IterationLedger {
        self.outcome.ledger()
    }

    /// Iterations at which the bound exceeded the exact free energy by more
    /// than `tol`.
    pub fn bound_violations(&self, tol: f64) -> Vec<usize> {
        self.extras
            .iter()
            .enumerate()
            .filter(|(_, e)| e.f_exact.is_finite() && e.f_bound > e.f_exact + tol)
            .map(|(k, _)| k + 1)
            .collect()
    }

    pub fn uncertified_steps(&self) -> usize {
        self.extras.iter().filter(|e| e.uncertified).count()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{},oracle_noise_kind,f_bound,f_exact,uncertified", LEDGER_COLUMNS.join(","))?;
        for (r, e) in self.ledger().records.iter().zip(&self.extras) {
            writeln!(
                w,
                "{},{},{:e},{},{:e},{:e},{:e},{:e},{:e},{},{:e},{:e},{}",
                r.iteration,
                r.kind.as_str(),
                r.lambda,
                r.overshoots,
                r.cost_violation,
                r.diag_violation,
                r.free_energy,
                r.h_max_norm,
                r.wall_seconds,
                self.noise_kind.as_str(),
                e.f_bound,
                e.f_exact,
                e.uncertified
            )?;
        }
        Ok(())
    }
}

/// Result of one emulated update.
#[derive(Debug, Clone)]
pub struct QuantumStep {
    pub h_new: Hamiltonian,
    pub evaluated: EvaluatedState,
    pub f_bound: f64,
    pub lambda_used: f64,
    pub lambda_new: f64,
    pub overshoots: usize,
    pub uncertified: bool,
    pub bound_exponentials: usize,
}

/// Applies `H + lambda dH` with the noisy overshoot test, then adds the
/// Riemann lower bound of the free-energy change to `f`.
#[allow(clippy::too_many_arguments)]
pub fn quantum_update(
    c: &CostMatrix,
    h: &Hamiltonian,
    delta: &Hamiltonian,
    f: f64,
    lambda: f64,
    qcfg: &QuantumEmuConfig,
    oracle: &mut Oracle,
    iteration: usize,
) -> Result<QuantumStep, HuError> {
    let scale = delta.norm_bound();
    let margin = oracle.model().budget() * scale;
    let mut lambda = lambda;
    let mut overshoots = 0;
    let mut uncertified = false;
    let evaluated = loop {
        let ev = evaluate(c, &h.plus_scaled(lambda, delta))?;
        let noisy = oracle.trace(delta.trace_with(&ev.view), scale);
        let threshold = if uncertified { 0.0 } else { margin };
        if noisy >= threshold {
            break ev;
        }
        overshoots += 1;
        lambda *= qcfg.base.shrink_factor;
        if margin > 0.0 && !uncertified && overshoots >= qcfg.max_certify_halvings {
            log::debug!("iteration {iteration}: overshoot test not certifiable, falling back to the sign test");
            uncertified = true;
        }
        if lambda < 1e-300 {
            return Err(HuError::Stuck { iteration });
        }
    };

    let j_total = qcfg.segments;
    let mut increment = 0.0;
    let mut bound_exponentials = 0;
    for j in 1..=j_total {
        let exact = if j == j_total {
            delta.trace_with(&evaluated.view)
        } else {
            bound_exponentials += 1;
            let ev = evaluate(c, &h.plus_scaled(lambda * j as f64 / j_total as f64, delta))?;
            delta.trace_with(&ev.view)
        };
        let noisy = oracle.trace(exact, scale);
        increment += lambda / j_total as f64 * (noisy - margin);
    }
    Ok(QuantumStep {
        h_new: h.plus_scaled(lambda, delta),
        evaluated,
        f_bound: f + increment,
        lambda_used: lambda,
        lambda_new: qcfg.base.growth_factor * lambda,
        overshoots,
        uncertified,
        bound_exponentials,
    })
}

/// The solver loop with oracle access only: branches at `3/4 eps`, the cost
/// direction scaled by the estimated violation, the free energy tracked as a
/// lower bound.
pub fn quantum_hamiltonian_updates(c: &CostMatrix, gamma: f64, qcfg: &QuantumEmuConfig) -> Result<QuantumRun, HuError> {
    qcfg.validate()?;
    let cfg = &qcfg.base;
    let n = c.dim();
    let cap = cfg.iteration_cap(n);
    let threshold = 0.75 * cfg.epsilon;
    let mut oracle = Oracle::new(qcfg.noise);

    let mut h = Hamiltonian::zeros(n);
    let mut current: Option<EvaluatedState> = None;
    let mut view = StateView::maximally_mixed(c);
    let mut f = -(n as f64).ln();
    let mut m = Hamiltonian::zeros(n);
    let mut lambda_c = cfg.lambda_c0;
    let mut lambda_d = cfg.lambda_d0;
    let mut ledger = IterationLedger::new(cfg);
    let mut extras = Vec::new();

    let finish = |outcome: HuOutcome, extras: Vec<QuantumRecord>, oracle: &Oracle| QuantumRun {
        outcome,
        extras,
        noise_kind: qcfg.noise.kind,
        oracle_queries: oracle.queries(),
    };

    while f <= 0.0 {
        let started = Instant::now();
        let cost_exact = gamma - view.trace_c;
        let cost_est = oracle.trace(cost_exact, 1.0);
        let (kind, p, diag_exact) = if cost_est > threshold {
            let s = if cfg.scale_cost { cost_est } else { 1.0 };
            (UpdateKind::Cost, Hamiltonian { cost_coeff: -s, diag: vec![s * gamma; n] }, diagonal_violation(&view.diag))
        } else {
            let est = oracle.diagonals(&view.diag);
            let inv = 1.0 / n as f64;
            let dev: Vec<f64> = est.iter().map(|e| e - inv).collect();
            let viol: f64 = dev.iter().map(|d| d.abs()).sum();
            if viol > threshold {
                let mx = dev.iter().fold(0.0f64, |a, d| a.max(d.abs()));
                let diag = dev.iter().map(|d| d / mx).collect();
                (UpdateKind::Diag, Hamiltonian { cost_coeff: 0.0, diag }, diagonal_violation(&view.diag))
            } else {
                let state = match current {
                    Some(ev) => ev.state,
                    None => gibbs_state(&h.to_dense(c))?,
                };
                return Ok(finish(HuOutcome::Feasible { hamiltonian: h, state, ledger }, extras, &oracle));
            }
        };
        if ledger.iterations() >= cap {
            return Ok(finish(HuOutcome::IterationCapReached { ledger }, extras, &oracle));
        }
        let lambda_kind = match kind {
            UpdateKind::Cost => lambda_c,
            UpdateKind::Diag => lambda_d,
        };
        let delta = if cfg.beta == 0.0 { p } else { p.plus_scaled(cfg.beta / lambda_kind, &m) };
        let h_max_norm = h.max_norm(c);
        let iteration = ledger.iterations() + 1;

        let step = quantum_update(c, &h, &delta, f, lambda_kind, qcfg, &mut oracle, iteration)?;
        h = step.h_new;
        f = step.f_bound;
        view = step.evaluated.view.clone();
        let f_exact = if qcfg.verify_exact { step.evaluated.free_energy() } else { f64::NAN };
        if f_exact.is_finite() && f > f_exact + 1e-9 {
            log::error!("free-energy bound {f:e} exceeds exact value {f_exact:e} at iteration {iteration}");
        }
        current = Some(step.evaluated);
        match kind {
            UpdateKind::Cost => lambda_c = step.lambda_new,
            UpdateKind::Diag => lambda_d = step.lambda_new,
        }
        m = delta.scaled(step.lambda_new);
        ledger.records.push(IterationRecord {
            iteration,
            kind,
            lambda: step.lambda_used,
            overshoots: step.overshoots,
            cost_violation: cost_exact,
            diag_violation: diag_exact,
            free_energy: f,
            h_max_norm,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        extras.push(QuantumRecord {
            f_bound: f,
            f_exact,
            uncertified: step.uncertified,
            bound_exponentials: step.bound_exponentials,
        });
    }
    Ok(finish(HuOutcome::Infeasible { free_energy: f, ledger }, extras, &oracle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hu::{check_feasibility, hamiltonian_updates, OutcomeKind};
    use crate::instances::{generate_instance, InstanceSeedSpec};
    use proptest::prelude::*;

    fn instance() -> CostMatrix {
        generate_instance(&InstanceSeedSpec::block(24, 4, 5)).unwrap()
    }

    #[test]
    fn exact_oracle_is_exact() {
        let h = SymMatrix::from_upper_fn(4, |i, j| 0.1 * (i + 2 * j) as f64);
        let a = SymMatrix::from_diagonal(&[1.0, -0.5, 0.2, 0.0]);
        let mut o = Oracle::new(NoiseModel::new(NoiseKind::None, 0.1, 0));
        let exact = gibbs_state(&h).unwrap().trace_with(&a).unwrap();
        assert_eq!(noisy_trace_product(&h, &a, &mut o).unwrap(), exact);
        assert_eq!(noisy_gibbs_diagonals(&h, &mut o).unwrap(), gibbs_state(&h).unwrap().diagonal());
    }

    #[test]
    fn uniform_oracle_is_reproducible() {
        let h = SymMatrix::from_upper_fn(3, |i, j| 0.3 * (i * j) as f64);
        let a = SymMatrix::identity(3);
        let model = NoiseModel::new(NoiseKind::Uniform, 0.2, 17);
        let mut o1 = Oracle::new(model);
        let mut o2 = Oracle::new(model);
        for _ in 0..5 {
            assert_eq!(noisy_trace_product(&h, &a, &mut o1).unwrap(), noisy_trace_product(&h, &a, &mut o2).unwrap());
        }
    }

    #[test]
    fn zero_hamiltonian_diagonals_stay_close() {
        let mut o = Oracle::new(NoiseModel::new(NoiseKind::Uniform, 0.1, 3));
        let d = noisy_gibbs_diagonals(&SymMatrix::zeros(5), &mut o).unwrap();
        let err: f64 = d.iter().map(|x| (x - 0.2).abs()).sum();
        assert!(err <= 0.025 + 1e-15);
    }

    proptest! {
        #[test]
        fn oracle_errors_within_budget(seed in 0u64..10_000, exact in -1.0f64..1.0, eps in 0.001f64..0.5) {
            for kind in [NoiseKind::Uniform, NoiseKind::Adversarial] {
                let mut o = Oracle::new(NoiseModel::new(kind, eps, seed));
                let t = o.trace(exact, 1.0);
                prop_assert!((t - exact).abs() <= eps / 4.0 * (1.0 + 1e-12));
                let diag = [0.3, 0.1, 0.25, 0.35];
                let est = o.diagonals(&diag);
                let l1: f64 = est.iter().zip(&diag).map(|(a, b)| (a - b).abs()).sum();
                prop_assert!(l1 <= eps / 4.0 * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn zero_noise_matches_classical_at_three_quarters() {
        let c = instance();
        let eps = 0.04;
        let gamma = 0.4;
        let q = QuantumEmuConfig { segments: 8, ..QuantumEmuConfig::new(SolverConfig::new(eps), NoiseModel::new(NoiseKind::None, eps, 0)) };
        let run = quantum_hamiltonian_updates(&c, gamma, &q).unwrap();
        let classical = hamiltonian_updates(&c, gamma, &SolverConfig::new(0.75 * eps)).unwrap();
        assert_eq!(run.outcome.kind(), OutcomeKind::Feasible);
        assert_eq!(classical.kind(), OutcomeKind::Feasible);
        let a = run.ledger();
        let b = classical.ledger();
        assert_eq!(a.iterations(), b.iterations());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.kind, y.kind);
            assert_eq!(x.lambda, y.lambda);
            assert_eq!(x.overshoots, y.overshoots);
        }
        assert!(run.bound_violations(1e-9).is_empty());
    }

    #[test]
    fn finer_riemann_sum_is_tighter() {
        let c = instance();
        let eps = 0.04;
        let base = SolverConfig::new(eps);
        let noise = NoiseModel::new(NoiseKind::None, eps, 0);
        let one = quantum_hamiltonian_updates(&c, 0.4, &QuantumEmuConfig { segments: 1, ..QuantumEmuConfig::new(base.clone(), noise) }).unwrap();
        let four = quantum_hamiltonian_updates(&c, 0.4, &QuantumEmuConfig { segments: 4, ..QuantumEmuConfig::new(base, noise) }).unwrap();
        assert_eq!(one.extras.len(), four.extras.len());
        for (a, b) in one.extras.iter().zip(&four.extras) {
            assert!(b.f_bound >= a.f_bound - 1e-12);
            assert!(b.f_bound <= b.f_exact + 1e-9);
        }
    }

    #[test]
    fn noisy_runs_are_sound() {
        let c = instance();
        let eps = 0.05;
        for kind in [NoiseKind::Uniform, NoiseKind::Adversarial] {
            for seed in 0..3 {
                let q = QuantumEmuConfig::new(SolverConfig::new(eps), NoiseModel::new(kind, eps, seed));
                let run = quantum_hamiltonian_updates(&c, 0.3, &q).unwrap();
                if let HuOutcome::Feasible { state, .. } = &run.outcome {
                    assert!(check_feasibility(&c, 0.3, state.rho(), eps).passes());
                } else {
                    panic!("{kind:?} seed {seed}: {:?}", run.outcome.kind());
                }
                assert!(run.bound_violations(1e-9).is_empty());
            }
        }
    }

    #[test]
    fn infeasible_threshold_certified_by_bound() {
        let c = instance();
        let eps = 0.05;
        let q = QuantumEmuConfig::new(SolverConfig::new(eps), NoiseModel::new(NoiseKind::Uniform, eps, 1));
        let run = quantum_hamiltonian_updates(&c, 1.0, &q).unwrap();
        match run.outcome {
            HuOutcome::Infeasible { free_energy, .. } => assert!(free_energy > 0.0),
            ref other => panic!("expected infeasible, got {:?}", other.kind()),
        }
        let mut buf = Vec::new();
        run.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().contains("oracle_noise_kind,f_bound,f_exact"));
    }

    #[test]
    fn single_update_bound_below_exact() {
        let c = instance();
        let q = QuantumEmuConfig::new(SolverConfig::new(0.05), NoiseModel::new(NoiseKind::None, 0.05, 0));
        let mut o = Oracle::new(q.noise);
        let h = Hamiltonian::zeros(24);
        let delta = Hamiltonian { cost_coeff: -0.5, diag: vec![0.5 * 0.6; 24] };
        let f0 = -(24f64).ln();
        let step = quantum_update(&c, &h, &delta, f0, 1.0, &q, &mut o, 1).unwrap();
        let exact = step.evaluated.free_energy();
        assert!(step.f_bound <= exact + 1e-12, "{} > {}", step.f_bound, exact);
        assert!(step.f_bound > f0);
    }
}
