//! From relaxed states to sign vectors.
//!
//! `correct_solution` repairs the diagonal of an approximately feasible state
//! so that it becomes exactly feasible while staying close in trace norm.
//! `randomized_round` draws `x = sgn(sqrt(rho) g)` for standard Gaussian `g`.

use std::io::{self, Write};

use faer::Mat;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::instances::CostMatrix;
use crate::rng::{stream_rng, Stream};
use crate::symlin::{eigenvalues, psd_sqrt, trace_norm, LinalgError, SymMatrix};

#[derive(Debug, Error)]
pub enum RoundingError {
    #[error("diagonal violation {violation:e} exceeds epsilon {epsilon:e}")]
    DiagonalViolation { violation: f64, epsilon: f64 },
    #[error("epsilon must be non-negative, got {0}")]
    InvalidEpsilon(f64),
    #[error("corrected state violates {what}: {value:e}")]
    InvariantBroken { what: &'static str, value: f64 },
    #[error("{len} values cannot be split into batches of {batch_size}")]
    BatchSize { len: usize, batch_size: usize },
    #[error("entry {index} is {value}, expected +1 or -1")]
    NotASign { index: usize, value: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("at least one trial is required")]
    NoTrials,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone)]
pub struct CorrectionReport {
    pub rho_sharp: SymMatrix,
    /// Indices whose diagonal deviates by more than `xi / n`.
    pub large_deviation_set: Vec<usize>,
    /// `||rho_sharp - rho||_tr`.
    pub trace_distance: f64,
    pub xi: f64,
    pub min_eigenvalue: f64,
}

/// Exactly diagonal-feasible state near `rho`.
///
/// With `xi = eps^(1/3)`, `d_i = rho_ii - 1/n` and `B = {i : |d_i| > xi/n}`:
/// rows and columns in `B` are replaced by `e_i e_i^T / n`, the remaining
/// diagonal is shifted by `-d_i`, and `xi/n` times the identity is mixed in to
/// absorb the negative part of the shift:
/// `rho_sharp = (rho' + D + (xi/n) I) / (1 + xi)`.
pub fn correct_solution(rho: &SymMatrix, epsilon: f64) -> Result<CorrectionReport, RoundingError> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(RoundingError::InvalidEpsilon(epsilon));
    }
    let n = rho.dim();
    let inv = 1.0 / n as f64;
    let d: Vec<f64> = rho.diagonal().iter().map(|r| r - inv).collect();
    let violation: f64 = d.iter().map(|x| x.abs()).sum();
    // a small allowance for roundoff in the caller's own check
    if violation > epsilon * (1.0 + 1e-12) + 1e-15 {
        return Err(RoundingError::DiagonalViolation { violation, epsilon });
    }
    let xi = epsilon.cbrt();
    let threshold = xi * inv;
    let in_b: Vec<bool> = d.iter().map(|x| x.abs() > threshold).collect();
    let large_deviation_set: Vec<usize> = (0..n).filter(|&i| in_b[i]).collect();

    let scale = 1.0 / (1.0 + xi);
    let rho_sharp = SymMatrix::from_upper_fn(n, |i, j| {
        if i == j {
            // rho'_ii + D_ii is 1/n in both cases
            let base = if in_b[i] { inv } else { rho.get(i, i) - d[i] };
            (base + threshold) * scale
        } else if in_b[i] || in_b[j] {
            0.0
        } else {
            rho.get(i, j) * scale
        }
    });

    let max_diag_err = rho_sharp.diagonal().iter().fold(0.0f64, |m, x| m.max((x - inv).abs()));
    if max_diag_err > 1e-12 {
        return Err(RoundingError::InvariantBroken { what: "exact diagonal", value: max_diag_err });
    }
    let w = eigenvalues(&rho_sharp)?;
    let min_eigenvalue = w[0];
    if min_eigenvalue < -1e-10 {
        return Err(RoundingError::InvariantBroken { what: "positive semidefiniteness", value: min_eigenvalue });
    }
    let trace_distance = trace_norm(&(&rho_sharp - rho))?;
    Ok(CorrectionReport { rho_sharp, large_deviation_set, trace_distance, xi, min_eigenvalue })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundingOptions {
    pub trials: usize,
    pub seed: u64,
    /// `None` picks 1000 for at least 10^5 trials and `trials / 100` below.
    pub batch_size: Option<usize>,
    pub stream: Stream,
}

impl RoundingOptions {
    pub fn new(trials: usize, seed: u64) -> Self {
        Self { trials, seed, batch_size: None, stream: Stream::Rounding }
    }

    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.unwrap_or_else(|| default_batch_size(self.trials)).clamp(1, self.trials.max(1))
    }
}

pub fn default_batch_size(trials: usize) -> usize {
    if trials >= 100_000 {
        1000
    } else {
        (trials / 100).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundingReport {
    pub trials: usize,
    pub best_x: Vec<f64>,
    pub best_value: f64,
    pub mean_value: f64,
    /// Standard error of the mean.
    pub std_error: f64,
    pub batch_size: usize,
    /// Mean of per-batch maxima over the complete batches.
    pub batch_max_mean: f64,
    pub rng_seed: u64,
    /// `x^T C x` per trial, in trial order.
    pub values: Vec<f64>,
}

impl RoundingReport {
    pub fn write_trials_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "trial,value")?;
        for (t, v) in self.values.iter().enumerate() {
            writeln!(w, "{t},{v:e}")?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "trials = {}\nmean = {:e}\nstd_error = {:e}\nbest = {:e}\nbatch_size = {}\nbatch_max_mean = {:e}\nseed = {}\n",
            self.trials, self.mean_value, self.std_error, self.best_value, self.batch_size, self.batch_max_mean, self.rng_seed
        )
    }
}

/// Rounds `rho`; computes its square root first.
pub fn randomized_round(c: &CostMatrix, rho: &SymMatrix, opts: &RoundingOptions) -> Result<RoundingReport, RoundingError> {
    let s = psd_sqrt(rho)?;
    round_with_sqrt(c, &s, opts)
}

const TRIAL_BLOCK: usize = 128;

/// Rounds with a precomputed `sqrt(rho)`. Trial `t` draws its Gaussian vector
/// from its own stream, so results do not depend on blocking.
pub fn round_with_sqrt(c: &CostMatrix, sqrt_rho: &SymMatrix, opts: &RoundingOptions) -> Result<RoundingReport, RoundingError> {
    let n = c.dim();
    if sqrt_rho.dim() != n {
        return Err(RoundingError::DimensionMismatch { left: sqrt_rho.dim(), right: n });
    }
    if opts.trials == 0 {
        return Err(RoundingError::NoTrials);
    }
    let mut values = Vec::with_capacity(opts.trials);
    let mut best_value = f64::NEG_INFINITY;
    let mut best_x = vec![1.0; n];
    let mut x = vec![0.0; n];
    let mut start = 0;
    while start < opts.trials {
        let b = TRIAL_BLOCK.min(opts.trials - start);
        let mut g = Mat::<f64>::zeros(n, b);
        for t in 0..b {
            let mut rng = stream_rng(opts.seed, opts.stream, (start + t) as u64);
            for i in 0..n {
                g[(i, t)] = StandardNormal.sample(&mut rng);
            }
        }
        let y = sqrt_rho.as_faer() * &g;
        for t in 0..b {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = if y[(i, t)] >= 0.0 { 1.0 } else { -1.0 };
            }
            let v = c.quadratic_form(&x);
            if v > best_value {
                best_value = v;
                best_x.clone_from(&x);
            }
            values.push(v);
        }
        start += b;
    }
    let trials = values.len();
    let mean_value = values.iter().sum::<f64>() / trials as f64;
    let std_error = if trials > 1 {
        let var = values.iter().map(|v| (v - mean_value).powi(2)).sum::<f64>() / (trials - 1) as f64;
        (var / trials as f64).sqrt()
    } else {
        0.0
    };
    let batch_size = opts.effective_batch_size();
    let complete = trials / batch_size * batch_size;
    let batch_max_mean = batch_max_statistic(&values[..complete], batch_size)?;
    Ok(RoundingReport {
        trials,
        best_x,
        best_value,
        mean_value,
        std_error,
        batch_size,
        batch_max_mean,
        rng_seed: opts.seed,
        values,
    })
}

/// Mean over consecutive batches of the per-batch maximum.
pub fn batch_max_statistic(values: &[f64], batch_size: usize) -> Result<f64, RoundingError> {
    if batch_size == 0 || values.is_empty() || !values.len().is_multiple_of(batch_size) {
        return Err(RoundingError::BatchSize { len: values.len(), batch_size });
    }
    let maxima: Vec<f64> = values.chunks(batch_size).map(|b| b.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    Ok(maxima.iter().sum::<f64>() / maxima.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuMetric {
    pub nu: f64,
    /// Where `x_opt` came from.
    pub reference: String,
}

fn check_signs(x: &[f64]) -> Result<(), RoundingError> {
    match x.iter().position(|&v| v != 1.0 && v != -1.0) {
        Some(index) => Err(RoundingError::NotASign { index, value: x[index] }),
        None => Ok(()),
    }
}

/// `(x_opt^T C x_opt - x_eps^T C x_eps) / n`.
pub fn nu_metric(x_eps: &[f64], x_opt: &[f64], c: &CostMatrix, reference: &str) -> Result<NuMetric, RoundingError> {
    let n = c.dim();
    for x in [x_eps, x_opt] {
        if x.len() != n {
            return Err(RoundingError::DimensionMismatch { left: x.len(), right: n });
        }
        check_signs(x)?;
    }
    let nu = (c.quadratic_form(x_opt) - c.quadratic_form(x_eps)) / n as f64;
    Ok(NuMetric { nu, reference: reference.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hu::{hamiltonian_updates, HuOutcome, SolverConfig};
    use crate::instances::{brute_force_qubo, generate_instance, InstanceSeedSpec};
    use crate::search::{reference_optimum, ReferenceOptions};
    use proptest::prelude::*;

    fn swap() -> CostMatrix {
        CostMatrix::from_entries(2, [(0, 1, 1.0)]).unwrap()
    }

    #[test]
    fn correction_fixed_point() {
        let v = [1.0, -1.0, 1.0];
        let rho = SymMatrix::from_upper_fn(3, |i, j| v[i] * v[j] / 3.0);
        let r = correct_solution(&rho, 0.0).unwrap();
        assert!(r.large_deviation_set.is_empty());
        assert_eq!(r.xi, 0.0);
        assert!(r.trace_distance < 1e-14);
    }

    #[test]
    fn correction_two_by_two() {
        let rho = SymMatrix::from_diagonal(&[0.6, 0.4]);
        let r = correct_solution(&rho, 0.2).unwrap();
        assert!((r.xi - 0.2f64.cbrt()).abs() < 1e-15);
        assert!(r.large_deviation_set.is_empty());
        assert!((r.rho_sharp.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((r.rho_sharp.get(1, 1) - 0.5).abs() < 1e-15);
        assert_eq!(r.rho_sharp.get(0, 1), 0.0);
        assert!((r.trace_distance - 0.2).abs() < 1e-14);
    }

    #[test]
    fn correction_rejects_large_violation() {
        let rho = SymMatrix::from_diagonal(&[0.7, 0.3]);
        assert!(matches!(correct_solution(&rho, 0.1), Err(RoundingError::DiagonalViolation { .. })));
    }

    #[test]
    fn correction_with_large_deviation_rows() {
        // one diagonal far from 1/n relative to xi/n, others tiny
        let n = 4;
        let mut rho = SymMatrix::from_upper_fn(n, |i, j| if i == j { 0.25 } else { 0.05 });
        rho.set(0, 0, 0.25 + 0.009);
        rho.set(1, 1, 0.25 - 0.009);
        let eps = 0.018;
        let r = correct_solution(&rho, eps).unwrap();
        // xi/n = 0.262/4 = 0.0655 > 0.009, so B is empty here
        assert!(r.large_deviation_set.is_empty());
        let r = correct_solution(&rho, 0.5).unwrap();
        assert!(r.large_deviation_set.is_empty());

        let mut skew = SymMatrix::from_upper_fn(n, |i, j| if i == j { 0.25 } else { 0.0 });
        skew.set(0, 0, 0.25 + 0.2);
        skew.set(1, 1, 0.25 - 0.2);
        skew.set(0, 2, 0.1);
        let r = correct_solution(&skew, 0.4).unwrap();
        // xi/n = 0.7368/4 = 0.184 < 0.2
        assert_eq!(r.large_deviation_set, vec![0, 1]);
        assert_eq!(r.rho_sharp.get(0, 2), 0.0);
        for i in 0..n {
            assert!((r.rho_sharp.get(i, i) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn correction_on_solver_output() {
        let c = generate_instance(&InstanceSeedSpec::block(32, 4, 2)).unwrap();
        let eps = 0.02;
        let out = hamiltonian_updates(&c, 0.5, &SolverConfig::new(eps)).unwrap();
        let HuOutcome::Feasible { state, .. } = out else { panic!("expected feasible") };
        let r = correct_solution(state.rho(), eps).unwrap();
        assert!(r.min_eigenvalue >= -1e-10);
        assert!((r.rho_sharp.trace() - 1.0).abs() < 1e-10);
        assert!(r.trace_distance <= 2.0);
    }

    #[test]
    fn rank_one_rounds_deterministically() {
        let c = generate_instance(&InstanceSeedSpec::block(8, 2, 3)).unwrap();
        let v = [1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, 1.0];
        let rho = SymMatrix::from_upper_fn(8, |i, j| v[i] * v[j] / 8.0);
        let r = randomized_round(&c, &rho, &RoundingOptions::new(50, 1)).unwrap();
        let target = c.quadratic_form(&v);
        for val in &r.values {
            assert!((val - target).abs() < 1e-12);
        }
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(r.best_x == v || r.best_x == neg);
    }

    #[test]
    fn maximally_mixed_rounding_averages_zero() {
        let c = generate_instance(&InstanceSeedSpec::block(16, 3, 4)).unwrap();
        let rho = SymMatrix::identity(16).scaled(1.0 / 16.0);
        let r = randomized_round(&c, &rho, &RoundingOptions::new(4000, 7)).unwrap();
        assert!(r.mean_value.abs() <= 4.0 * r.std_error, "{} +- {}", r.mean_value, r.std_error);
    }

    #[test]
    fn rounding_is_deterministic_and_consistent() {
        let c = generate_instance(&InstanceSeedSpec::block(12, 3, 5)).unwrap();
        let rho = reference_optimum(&c, &ReferenceOptions::default()).unwrap().rho;
        let opts = RoundingOptions::new(300, 11);
        let a = randomized_round(&c, &rho, &opts).unwrap();
        let b = randomized_round(&c, &rho, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.best_value, c.quadratic_form(&a.best_x));
        assert!(a.best_value >= a.mean_value);
        assert!(a.best_x.iter().all(|&x| x == 1.0 || x == -1.0));
        assert_eq!(a.batch_size, 3);
        // a prefix of the trials reproduces the same values
        let short = randomized_round(&c, &rho, &RoundingOptions::new(130, 11)).unwrap();
        assert_eq!(&short.values[..], &a.values[..130]);
        let single = randomized_round(&c, &rho, &RoundingOptions::new(1, 11)).unwrap();
        assert_eq!(single.values[0], a.values[0]);
    }

    #[test]
    fn grothendieck_floor_small() {
        let c = generate_instance(&InstanceSeedSpec::block(10, 3, 6)).unwrap();
        let (_, vstar) = brute_force_qubo(&c).unwrap();
        let rho = reference_optimum(&c, &ReferenceOptions::default()).unwrap().rho;
        let r = randomized_round(&c, &rho, &RoundingOptions::new(10_000, 3)).unwrap();
        let floor = (4.0 / std::f64::consts::PI - 1.0) * vstar;
        assert!(r.mean_value >= floor - 4.0 * r.std_error, "{} < {}", r.mean_value, floor);
    }

    #[test]
    fn batch_statistic_examples() {
        assert_eq!(batch_max_statistic(&[2.5; 6], 3).unwrap(), 2.5);
        assert_eq!(batch_max_statistic(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), 3.0);
        assert_eq!(batch_max_statistic(&[1.0, 7.0, 3.0], 3).unwrap(), 7.0);
        assert!(matches!(batch_max_statistic(&[1.0, 2.0, 3.0], 2), Err(RoundingError::BatchSize { .. })));
    }

    #[test]
    fn default_batches() {
        assert_eq!(default_batch_size(100_000), 1000);
        assert_eq!(default_batch_size(1_000_000), 1000);
        assert_eq!(default_batch_size(10_000), 100);
        assert_eq!(default_batch_size(50), 1);
    }

    #[test]
    fn nu_examples() {
        let c = swap();
        assert_eq!(nu_metric(&[1.0, 1.0], &[1.0, 1.0], &c, "t").unwrap().nu, 0.0);
        assert_eq!(nu_metric(&[1.0, -1.0], &[1.0, 1.0], &c, "t").unwrap().nu, 2.0);
        assert!(matches!(nu_metric(&[1.0, 0.0], &[1.0, 1.0], &c, "t"), Err(RoundingError::NotASign { index: 1, .. })));
    }

    proptest! {
        #[test]
        fn nu_sign_flip_invariant(seed in 0u64..50, bits in 0u32..256, obits in 0u32..256) {
            let c = generate_instance(&InstanceSeedSpec::block(8, 2, seed)).unwrap();
            let x: Vec<f64> = (0..8).map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            let o: Vec<f64> = (0..8).map(|i| if obits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            let neg: Vec<f64> = o.iter().map(|v| -v).collect();
            let a = nu_metric(&x, &o, &c, "p").unwrap().nu;
            let b = nu_metric(&x, &neg, &c, "p").unwrap().nu;
            prop_assert!((a - b).abs() < 1e-15);
        }

        #[test]
        fn corrected_states_are_exactly_feasible(seed in 0u64..1000, slack in 1.0f64..3.0, scale in 0.1f64..3.0) {
            use rand::Rng;
            let n = 6;
            let mut rng = stream_rng(seed, Stream::Instance, 99);
            let h = SymMatrix::from_upper_fn(n, |_, _| scale * rng.random_range(-1.0..1.0));
            let rho = crate::symlin::gibbs_state(&h).unwrap().rho().clone();
            let violation: f64 = rho.diagonal().iter().map(|r| (r - 1.0 / n as f64).abs()).sum();
            let rep = correct_solution(&rho, violation * slack).unwrap();
            for i in 0..n {
                prop_assert!((rep.rho_sharp.get(i, i) - 1.0 / n as f64).abs() <= 1e-12);
            }
            prop_assert!(rep.min_eigenvalue >= -1e-10);
            prop_assert!((rep.rho_sharp.trace() - 1.0).abs() <= 1e-10);
        }
    }
}
