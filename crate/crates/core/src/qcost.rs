//! Resource counts for running the solver's diagonal estimation on a quantum
//! computer, and the gate time at which that would match the classical run.
//!
//! Only diagonal updates are charged: estimating the full diagonal of the
//! Gibbs state needs `O(n)` more samples than a single trace estimate, so the
//! other subroutines are counted as free. The count is therefore a lower bound.

use std::io::{self, Write};

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::hu::{IterationLedger, UpdateKind};

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("ledger record {iteration} has no usable h_max_norm")]
    MissingHMaxNorm { iteration: usize },
    #[error("ledger has no wall-clock data")]
    MissingWallTime,
    #[error("power-law fit needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("power-law fit needs positive coordinates, got ({t}, {y})")]
    NonPositive { t: f64, y: f64 },
    #[error("invalid cost input: {0}")]
    InvalidInput(String),
}

/// Inputs to the per-preparation gate count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateCostInput {
    pub n: usize,
    pub s: usize,
    /// Bits per stored matrix entry.
    pub b: u32,
    pub epsilon: f64,
    pub h_plus_max_norm: f64,
}

pub const DEFAULT_BITS: u32 = 8;

impl GateCostInput {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.n < 2 || self.s == 0 || self.b == 0 {
            return Err(CostError::InvalidInput(format!("need n >= 2, s >= 1, b >= 1 (n={}, s={}, b={})", self.n, self.s, self.b)));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.h_plus_max_norm.is_nan() || self.h_plus_max_norm < 0.0 {
            return Err(CostError::InvalidInput("epsilon must be positive and the norm non-negative".into()));
        }
        Ok(())
    }
}

/// Two-qubit gates per query of the sparse-access oracle, `32 b + 32 log2 n - 18`.
pub fn gate_prefactor(b: u32, n: usize) -> f64 {
    32.0 * b as f64 + 32.0 * (n as f64).log2() - 18.0
}

/// Expected two-qubit gates for one approximate Gibbs-state preparation:
/// `(32b + 32 log2 n - 18) (4.5 ln(7.8/eps) sqrt(n) s ||H+||_max - 1)`,
/// floored at zero.
pub fn gates_per_gibbs_prep(input: &GateCostInput) -> f64 {
    let queries = 4.5 * (7.8 / input.epsilon).ln() * (input.n as f64).sqrt() * input.s as f64 * input.h_plus_max_norm - 1.0;
    (gate_prefactor(input.b, input.n) * queries).max(0.0)
}

/// Preparations needed to estimate the diagonal to `l1` error `eps`:
/// `128 ln 2 eps^-2 n`. Stated for `eps <= 1/4`; larger values are evaluated
/// anyway and reported through `samples_in_regime`.
pub fn samples_per_diag_estimate(n: usize, epsilon: f64) -> f64 {
    if !samples_in_regime(epsilon) {
        log::warn!("sample estimate used outside its regime: epsilon = {epsilon} > 1/4");
    }
    128.0 * std::f64::consts::LN_2 * n as f64 / (epsilon * epsilon)
}

pub fn samples_in_regime(epsilon: f64) -> bool {
    epsilon <= 0.25
}

/// Sample count with explicit failure probability:
/// `137 eps^-2 (n ln 2 + ln(1/p))`.
pub fn samples_with_failure_probability(n: usize, epsilon: f64, ln_inv_p: f64) -> f64 {
    137.0 / (epsilon * epsilon) * (n as f64 * std::f64::consts::LN_2 + ln_inv_p)
}

/// The same with `ln(1/p) = 4`.
pub fn samples_benchmark_assumption(n: usize, epsilon: f64) -> f64 {
    samples_with_failure_probability(n, epsilon, 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HPlusEstimate {
    /// `2 ||H||_max`, the observed ratio.
    pub default: f64,
    /// `||H||_max`, the conservative floor.
    pub floor: f64,
}

pub fn h_plus_max_norm_estimate(h_max_norm: f64) -> HPlusEstimate {
    HPlusEstimate { default: 2.0 * h_max_norm, floor: h_max_norm }
}

/// Exact `||H+||_max` for `H+ = H - (lambda_min - 3/2) I`.
pub fn h_plus_max_norm_exact(h: &crate::symlin::SymMatrix) -> Result<f64, crate::symlin::LinalgError> {
    let w = crate::symlin::eigenvalues(h)?;
    let mut shifted = h.clone();
    shifted.add_identity(1.5 - w[0]);
    Ok(shifted.max_abs())
}

/// Cost of one diagonal update.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationResource {
    pub iteration: usize,
    pub h_max_norm: f64,
    pub h_plus_max_norm: f64,
    pub gates_per_prep: f64,
    pub samples: f64,
    pub gates: f64,
    /// Gate count with `||H+||_max = ||H||_max`.
    pub gates_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceReport {
    pub n: usize,
    pub s: usize,
    pub b: u32,
    pub epsilon: f64,
    pub samples_per_diag_estimate: f64,
    pub total_gates: f64,
    pub total_gates_floor: f64,
    pub classical_wall_seconds: f64,
    /// `classical_wall_seconds / total_gates`; infinite without diagonal updates.
    pub break_even_gate_time_seconds: f64,
    pub break_even_floor_seconds: f64,
    pub breakdown: Vec<IterationResource>,
}

impl ResourceReport {
    pub fn summary(&self) -> String {
        format!(
            "n = {}\ns = {}\nb = {}\nepsilon = {:e}\ndiag_updates = {}\nsamples_per_diag_estimate = {:e}\ntotal_gates = {:e}\ntotal_gates_floor = {:e}\nclassical_wall_seconds = {:e}\nbreak_even_gate_time_seconds = {:e}\nbreak_even_floor_seconds = {:e}\n",
            self.n,
            self.s,
            self.b,
            self.epsilon,
            self.breakdown.len(),
            self.samples_per_diag_estimate,
            self.total_gates,
            self.total_gates_floor,
            self.classical_wall_seconds,
            self.break_even_gate_time_seconds,
            self.break_even_floor_seconds
        )
    }

    pub fn write_breakdown_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iteration,h_max_norm,h_plus_max_norm,gates_per_prep,samples,gates,gates_floor")?;
        for r in &self.breakdown {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.iteration, r.h_max_norm, r.h_plus_max_norm, r.gates_per_prep, r.samples, r.gates, r.gates_floor
            )?;
        }
        Ok(())
    }
}

/// Charges every diagonal update of `ledger`. The classical time defaults to
/// the ledger's own wall-clock sum.
pub fn iteration_resources(
    ledger: &IterationLedger,
    n: usize,
    s: usize,
    b: u32,
    epsilon: f64,
    classical_wall_seconds: Option<f64>,
) -> Result<ResourceReport, CostError> {
    let samples = samples_per_diag_estimate(n, epsilon);
    let mut breakdown = Vec::new();
    for r in ledger.records.iter().filter(|r| r.kind == UpdateKind::Diag) {
        if !(r.h_max_norm.is_finite() && r.h_max_norm >= 0.0) {
            return Err(CostError::MissingHMaxNorm { iteration: r.iteration });
        }
        let hp = h_plus_max_norm_estimate(r.h_max_norm);
        let input = GateCostInput { n, s, b, epsilon, h_plus_max_norm: hp.default };
        input.validate()?;
        let per_prep = gates_per_gibbs_prep(&input);
        let per_prep_floor = gates_per_gibbs_prep(&GateCostInput { h_plus_max_norm: hp.floor, ..input });
        breakdown.push(IterationResource {
            iteration: r.iteration,
            h_max_norm: r.h_max_norm,
            h_plus_max_norm: hp.default,
            gates_per_prep: per_prep,
            samples,
            gates: per_prep * samples,
            gates_floor: per_prep_floor * samples,
        });
    }
    let wall = match classical_wall_seconds {
        Some(w) => w,
        None => {
            if ledger.records.iter().any(|r| !r.wall_seconds.is_finite()) {
                return Err(CostError::MissingWallTime);
            }
            ledger.wall_seconds()
        }
    };
    let total_gates: f64 = breakdown.iter().map(|r| r.gates).sum();
    let total_gates_floor: f64 = breakdown.iter().map(|r| r.gates_floor).sum();
    let ratio = |g: f64| if g > 0.0 { wall / g } else { f64::INFINITY };
    Ok(ResourceReport {
        n,
        s,
        b,
        epsilon,
        samples_per_diag_estimate: samples,
        total_gates,
        total_gates_floor,
        classical_wall_seconds: wall,
        break_even_gate_time_seconds: ratio(total_gates),
        break_even_floor_seconds: ratio(total_gates_floor),
        breakdown,
    })
}

/// `y = a1 t^a2`, fitted by least squares on `(ln t, ln y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    pub a1: f64,
    pub a2: f64,
    /// Residual sum of squares in log space.
    pub residual: f64,
    /// 95% confidence interval for `a2`; `None` when the exponent was fixed.
    pub a2_ci: Option<(f64, f64)>,
    pub points: usize,
}

impl PowerLawFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.a1 * t.powf(self.a2)
    }

    /// Inverse of `eval` for positive exponents.
    pub fn solve_for(&self, y: f64) -> f64 {
        (y / self.a1).powf(1.0 / self.a2)
    }
}

fn log_points(points: &[(f64, f64)], needed: usize) -> Result<Vec<(f64, f64)>, CostError> {
    if points.len() < needed {
        return Err(CostError::TooFewPoints { needed, got: points.len() });
    }
    points
        .iter()
        .map(|&(t, y)| {
            if t > 0.0 && y > 0.0 && t.is_finite() && y.is_finite() {
                Ok((t.ln(), y.ln()))
            } else {
                Err(CostError::NonPositive { t, y })
            }
        })
        .collect()
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit, CostError> {
    let lp = log_points(points, 3)?;
    let m = lp.len() as f64;
    let mx = lp.iter().map(|p| p.0).sum::<f64>() / m;
    let my = lp.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = lp.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = lp.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(CostError::InvalidInput("all abscissae coincide".into()));
    }
    let a2 = sxy / sxx;
    let intercept = my - a2 * mx;
    let residual: f64 = lp.iter().map(|p| (p.1 - intercept - a2 * p.0).powi(2)).sum();
    let dof = m - 2.0;
    let se = (residual / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| CostError::InvalidInput(e.to_string()))?.inverse_cdf(0.975);
    Ok(PowerLawFit { a1: intercept.exp(), a2, residual, a2_ci: Some((a2 - t * se, a2 + t * se)), points: lp.len() })
}

/// Fit with the exponent fixed; only the prefactor is estimated.
pub fn fit_prefactor(points: &[(f64, f64)], exponent: f64) -> Result<PowerLawFit, CostError> {
    let lp = log_points(points, 1)?;
    let m = lp.len() as f64;
    let ln_a1 = lp.iter().map(|p| p.1 - exponent * p.0).sum::<f64>() / m;
    let residual = lp.iter().map(|p| (p.1 - ln_a1 - exponent * p.0).powi(2)).sum();
    Ok(PowerLawFit { a1: ln_a1.exp(), a2: exponent, residual, a2_ci: None, points: lp.len() })
}

/// Per-size measurement feeding the extrapolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingPoint {
    pub n: f64,
    pub classical_seconds: f64,
    pub total_gates: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtrapolationMode {
    /// Classical time `~ n^3`, gate count `~ n^1.5`, prefactors fitted.
    TheoryExponents,
    FreeFit,
}

pub const CLASSICAL_EXPONENT: f64 = 3.0;
pub const QUANTUM_EXPONENT: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub n: f64,
    pub classical_seconds: f64,
    pub total_gates: f64,
    pub break_even_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extrapolation {
    pub mode: ExtrapolationMode,
    pub classical: PowerLawFit,
    pub gates: PowerLawFit,
    pub projections: Vec<Projection>,
}

impl Extrapolation {
    pub fn project(&self, n: f64) -> Projection {
        let classical_seconds = self.classical.eval(n);
        let total_gates = self.gates.eval(n);
        Projection { n, classical_seconds, total_gates, break_even_seconds: classical_seconds / total_gates }
    }

    /// Dimension at which the fitted classical time reaches `seconds`.
    pub fn n_for_classical_seconds(&self, seconds: f64) -> f64 {
        self.classical.solve_for(seconds)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "n,classical_seconds_fit,total_gates_fit,break_even_seconds")?;
        for p in &self.projections {
            writeln!(w, "{:e},{:e},{:e},{:e}", p.n, p.classical_seconds, p.total_gates, p.break_even_seconds)?;
        }
        Ok(())
    }
}

pub const SECONDS_PER_YEAR: f64 = 365.25 * 24.0 * 3600.0;

pub fn break_even_extrapolation(
    points: &[ScalingPoint],
    mode: ExtrapolationMode,
    project_at: &[f64],
) -> Result<Extrapolation, CostError> {
    if points.len() < 3 {
        return Err(CostError::TooFewPoints { needed: 3, got: points.len() });
    }
    let cl: Vec<(f64, f64)> = points.iter().map(|p| (p.n, p.classical_seconds)).collect();
    let gt: Vec<(f64, f64)> = points.iter().map(|p| (p.n, p.total_gates)).collect();
    let (classical, gates) = match mode {
        ExtrapolationMode::TheoryExponents => (fit_prefactor(&cl, CLASSICAL_EXPONENT)?, fit_prefactor(&gt, QUANTUM_EXPONENT)?),
        ExtrapolationMode::FreeFit => (fit_power_law(&cl)?, fit_power_law(&gt)?),
    };
    let mut ex = Extrapolation { mode, classical, gates, projections: Vec::new() };
    ex.projections = project_at.iter().map(|&n| ex.project(n)).collect();
    Ok(ex)
}
