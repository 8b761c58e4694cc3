//! Dense symmetric matrices and the spectral functions the solver is built on.
//!
//! Every matrix function here (Gibbs state, square root, norms) goes through a
//! full symmetric eigendecomposition. One decomposition of the Hamiltonian
//! yields the Gibbs state, the free energy and, when rounding, the square root.

use std::cell::OnceCell;
use std::fmt;
use std::ops::{Add, Mul, Sub};

use faer::{Mat, MatRef, Side};
use thiserror::Error;

/// Errors raised by the dense kernel.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("matrix is not symmetric: entry ({i}, {j}) differs from its transpose")]
    NotSymmetric { i: usize, j: usize },
    #[error("matrix must have dimension at least 1")]
    Empty,
    #[error("symmetric eigensolver did not converge")]
    NoConvergence,
    #[error("matrix is not positive semidefinite (minimum eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
}

/// Dense real symmetric matrix. Constructors only ever produce exactly
/// symmetric storage.
#[derive(Clone, PartialEq)]
pub struct SymMatrix {
    data: Mat<f64>,
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.dim();
        writeln!(f, "SymMatrix({n}x{n}) [")?;
        for i in 0..n.min(8) {
            let row: Vec<String> = (0..n.min(8)).map(|j| format!("{:+.4e}", self.get(i, j))).collect();
            writeln!(f, "  {}", row.join(" "))?;
        }
        write!(f, "]")
    }
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { data: Mat::zeros(n, n) }
    }

    pub fn identity(n: usize) -> Self {
        Self { data: Mat::identity(n, n) }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut data = Mat::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            data[(i, i)] = d;
        }
        Self { data }
    }

    /// Builds a matrix from `f(i, j)` evaluated on the upper triangle `i <= j`
    /// and mirrored.
    pub fn from_upper_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Mat::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let v = f(i, j);
                data[(i, j)] = v;
                data[(j, i)] = v;
            }
        }
        Self { data }
    }

    /// Builds a matrix from explicit rows, rejecting anything that is not
    /// exactly symmetric.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let n = rows.len();
        if n == 0 {
            return Err(LinalgError::Empty);
        }
        for row in rows {
            if row.len() != n {
                return Err(LinalgError::DimensionMismatch { left: n, right: row.len() });
            }
        }
        for (i, row) in rows.iter().enumerate() {
            for (j, other) in rows.iter().enumerate().take(i) {
                if row[j] != other[i] {
                    return Err(LinalgError::NotSymmetric { i, j });
                }
            }
        }
        Ok(Self::from_upper_fn(n, |i, j| rows[i][j]))
    }

    /// Takes ownership of a dense matrix that is symmetric up to rounding and
    /// replaces it by its symmetric part.
    pub(crate) fn symmetrized(mut data: Mat<f64>) -> Self {
        let n = data.nrows();
        debug_assert_eq!(n, data.ncols());
        for j in 0..n {
            for i in 0..j {
                let v = 0.5 * (data[(i, j)] + data[(j, i)]);
                data[(i, j)] = v;
                data[(j, i)] = v;
            }
        }
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }

    /// Sets entry `(i, j)` and its mirror.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[(i, j)] = value;
        self.data[(j, i)] = value;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.data[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.data[(i, i)]).sum()
    }

    pub fn as_faer(&self) -> MatRef<'_, f64> {
        self.data.as_ref()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.data[(i, j)]).collect()).collect()
    }

    pub fn is_finite(&self) -> bool {
        let n = self.dim();
        (0..n).all(|j| (0..n).all(|i| self.data[(i, j)].is_finite()))
    }

    /// Largest absolute entry (the max norm).
    pub fn max_abs(&self) -> f64 {
        let n = self.dim();
        let mut m = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                m = m.max(self.data[(i, j)].abs());
            }
        }
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for j in 0..n {
            for i in 0..n {
                s += self.data[(i, j)] * self.data[(i, j)];
            }
        }
        s.sqrt()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &SymMatrix) {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch in add_scaled");
        let n = self.dim();
        for j in 0..n {
            for i in 0..n {
                self.data[(i, j)] += alpha * other.data[(i, j)];
            }
        }
    }

    pub fn add_identity(&mut self, alpha: f64) {
        for i in 0..self.dim() {
            self.data[(i, i)] += alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> SymMatrix {
        let mut out = self.clone();
        let n = out.dim();
        for j in 0..n {
            for i in 0..n {
                out.data[(i, j)] *= alpha;
            }
        }
        out
    }

    /// `self * self`, which is symmetric again.
    pub fn square(&self) -> SymMatrix {
        let prod = self.data.as_ref() * self.data.as_ref();
        SymMatrix::symmetrized(prod)
    }
}

impl Add<&SymMatrix> for &SymMatrix {
    type Output = SymMatrix;
    fn add(self, rhs: &SymMatrix) -> SymMatrix {
        let mut out = self.clone();
        out.add_scaled(1.0, rhs);
        out
    }
}

impl Sub<&SymMatrix> for &SymMatrix {
    type Output = SymMatrix;
    fn sub(self, rhs: &SymMatrix) -> SymMatrix {
        let mut out = self.clone();
        out.add_scaled(-1.0, rhs);
        out
    }
}

impl Mul<f64> for &SymMatrix {
    type Output = SymMatrix;
    fn mul(self, rhs: f64) -> SymMatrix {
        self.scaled(rhs)
    }
}

/// Spectral decomposition `A = V diag(w) V^T` with ascending eigenvalues.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Mat<f64>,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V diag(f(w)) V^T`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.dim();
        let v = self.eigenvectors.as_ref();
        let scaled = Mat::from_fn(n, n, |i, k| v[(i, k)] * f(self.eigenvalues[k]));
        SymMatrix::symmetrized(&scaled * v.transpose())
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map(|x| x)
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn eigh(a: &SymMatrix) -> Result<EigenDecomposition, LinalgError> {
    if a.dim() == 0 {
        return Err(LinalgError::Empty);
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let evd = a
        .data
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| LinalgError::NoConvergence)?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let n = a.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| s[x].total_cmp(&s[y]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| s[k]).collect();
    let eigenvectors = Mat::from_fn(n, n, |i, k| u[(i, order[k])]);
    if eigenvalues.iter().any(|w| !w.is_finite()) {
        return Err(LinalgError::NoConvergence);
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

/// Eigenvalues only, ascending.
pub fn eigenvalues(a: &SymMatrix) -> Result<Vec<f64>, LinalgError> {
    if a.dim() == 0 {
        return Err(LinalgError::Empty);
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let mut w = a
        .data
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|_| LinalgError::NoConvergence)?;
    w.sort_by(f64::total_cmp);
    Ok(w)
}

/// Gibbs state `exp(-H) / tr exp(-H)` of a Hamiltonian, kept in spectral form.
///
/// The dense matrix is only formed on request; diagonal entries and individual
/// entries are available straight from the eigenvectors.
#[derive(Clone, Debug)]
pub struct GibbsState {
    eig: EigenDecomposition,
    /// Boltzmann weights `exp(-(w_k - w_min)) / Z`, summing to one.
    weights: Vec<f64>,
    free_energy: f64,
    rho: OnceCell<SymMatrix>,
    /// Row-major `W = V diag(sqrt p)`, so that `rho_ij = <W_i, W_j>`.
    factor: OnceCell<Vec<f64>>,
}

impl GibbsState {
    pub fn dim(&self) -> usize {
        self.eig.dim()
    }

    /// `F(H) = -ln tr exp(-H)`.
    pub fn free_energy(&self) -> f64 {
        self.free_energy
    }

    pub fn eigen(&self) -> &EigenDecomposition {
        &self.eig
    }

    /// Eigenvalues of the state itself (the Boltzmann weights), matched to the
    /// ascending Hamiltonian spectrum.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rho(&self) -> &SymMatrix {
        self.rho.get_or_init(|| {
            let n = self.dim();
            let v = self.eig.eigenvectors.as_ref();
            let w = Mat::from_fn(n, n, |i, k| v[(i, k)] * self.weights[k].sqrt());
            SymMatrix::symmetrized(&w * w.transpose())
        })
    }

    fn factor(&self) -> &[f64] {
        self.factor.get_or_init(|| {
            let n = self.dim();
            let v = self.eig.eigenvectors.as_ref();
            let sq: Vec<f64> = self.weights.iter().map(|p| p.sqrt()).collect();
            let mut w = vec![0.0; n * n];
            for k in 0..n {
                let col = v.col(k);
                for i in 0..n {
                    w[i * n + k] = col[i] * sq[k];
                }
            }
            w
        })
    }

    fn factor_row(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.factor()[i * n..(i + 1) * n]
    }

    /// Diagonal entries `rho_ii`, computed in O(n^2).
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.factor_row(i).iter().map(|x| x * x).sum()).collect()
    }

    /// Single entry `rho_ij`, O(n) without forming the matrix.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if let Some(rho) = self.rho.get() {
            return rho.get(i, j);
        }
        self.factor_row(i).iter().zip(self.factor_row(j)).map(|(a, b)| a * b).sum()
    }

    /// `tr(rho A)` for a dense symmetric `A`.
    pub fn trace_with(&self, a: &SymMatrix) -> Result<f64, LinalgError> {
        trace_product(self.rho(), a)
    }

    /// Square root of the state, `V diag(sqrt p) V^T`.
    pub fn sqrt(&self) -> SymMatrix {
        let n = self.dim();
        let v = self.eig.eigenvectors.as_ref();
        let scaled = Mat::from_fn(n, n, |i, k| v[(i, k)] * self.weights[k].sqrt());
        SymMatrix::symmetrized(&scaled * v.transpose())
    }
}

/// Gibbs state of `h` together with its free energy. The spectrum is shifted
/// by its minimum before exponentiating and the shift is restored in the
/// log-partition function.
pub fn gibbs_state(h: &SymMatrix) -> Result<GibbsState, LinalgError> {
    let eig = eigh(h)?;
    Ok(gibbs_from_eigen(eig))
}

pub(crate) fn gibbs_from_eigen(eig: EigenDecomposition) -> GibbsState {
    let w_min = eig.eigenvalues[0];
    let mut weights: Vec<f64> = eig.eigenvalues.iter().map(|&w| (-(w - w_min)).exp()).collect();
    let z: f64 = weights.iter().sum();
    for p in &mut weights {
        *p /= z;
    }
    let free_energy = w_min - z.ln();
    GibbsState { eig, weights, free_energy, rho: OnceCell::new(), factor: OnceCell::new() }
}

/// Free energy `-ln tr exp(-H)` alone.
pub fn free_energy(h: &SymMatrix) -> Result<f64, LinalgError> {
    let w = eigenvalues(h)?;
    let w_min = w[0];
    let z: f64 = w.iter().map(|&x| (-(x - w_min)).exp()).sum();
    Ok(w_min - z.ln())
}

/// Relative threshold below which negative eigenvalues count as rounding noise.
const PSD_CLAMP_TOL: f64 = 1e-10;
/// Relative threshold below which a negative eigenvalue is a genuine defect.
const PSD_REJECT_TOL: f64 = 1e-8;

/// Principal square root of a psd matrix. Eigenvalues in
/// `[-1e-8 ||rho||, 0)` are clamped to zero; anything more negative is
/// rejected.
pub fn psd_sqrt(rho: &SymMatrix) -> Result<SymMatrix, LinalgError> {
    let eig = eigh(rho)?;
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, w| m.max(w.abs())).max(f64::MIN_POSITIVE);
    let w_min = eig.eigenvalues[0];
    if w_min < -PSD_REJECT_TOL * scale {
        return Err(LinalgError::NotPsd { min_eigenvalue: w_min });
    }
    if w_min < -PSD_CLAMP_TOL * scale {
        log::debug!("psd_sqrt: clamping eigenvalue {w_min:e}");
    }
    // eigenvalues at roundoff level are zero; their square roots would not be
    let floor = 64.0 * f64::EPSILON * scale * rho.dim() as f64;
    Ok(eig.map(|w| if w <= floor { 0.0 } else { w.sqrt() }))
}

/// `tr(A B) = sum_ij A_ij B_ij` for symmetric arguments.
pub fn trace_product(a: &SymMatrix, b: &SymMatrix) -> Result<f64, LinalgError> {
    if a.dim() != b.dim() {
        return Err(LinalgError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    let n = a.dim();
    let mut s = 0.0;
    for j in 0..n {
        for i in 0..n {
            s += a.data[(i, j)] * b.data[(i, j)];
        }
    }
    Ok(s)
}

/// Schatten-1 norm, the sum of absolute eigenvalues.
pub fn trace_norm(a: &SymMatrix) -> Result<f64, LinalgError> {
    Ok(eigenvalues(a)?.iter().map(|w| w.abs()).sum())
}

/// Schatten-infinity norm, the largest absolute eigenvalue.
pub fn operator_norm(a: &SymMatrix) -> Result<f64, LinalgError> {
    let w = eigenvalues(a)?;
    Ok(w[0].abs().max(w[w.len() - 1].abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn max_diff(a: &SymMatrix, b: &SymMatrix) -> f64 {
        (a - b).max_abs()
    }

    #[test]
    fn eigh_identity() {
        let e = eigh(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        let v = e.eigenvectors.as_ref();
        for k in 0..3 {
            let nonzero = (0..3).filter(|&i| v[(i, k)].abs() > 1e-12).count();
            assert_eq!(nonzero, 1);
        }
    }

    #[test]
    fn eigh_diagonal_sorted() {
        let e = eigh(&SymMatrix::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn eigh_two_by_two_off_diagonal() {
        let a = 0.7;
        let m = SymMatrix::from_rows(&[vec![0.0, a], vec![a, 0.0]]).unwrap();
        let e = eigh(&m).unwrap();
        assert_close(e.eigenvalues[0], -a, 1e-15);
        assert_close(e.eigenvalues[1], a, 1e-15);
        let v = e.eigenvectors.as_ref();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        // eigenvector for -a is (1, -1)/sqrt2 up to sign
        assert_close(v[(0, 0)].abs(), r, 1e-14);
        assert_close(v[(0, 0)] + v[(1, 0)], 0.0, 1e-14);
        assert_close(v[(0, 1)] - v[(1, 1)], 0.0, 1e-14);
    }

    #[test]
    fn eigh_rejects_non_finite() {
        let mut m = SymMatrix::zeros(2);
        m.set(0, 1, f64::NAN);
        assert_eq!(eigh(&m).unwrap_err(), LinalgError::NonFinite);
    }

    #[test]
    fn from_rows_rejects_asymmetry() {
        let err = SymMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap_err();
        assert_eq!(err, LinalgError::NotSymmetric { i: 1, j: 0 });
    }

    #[test]
    fn gibbs_of_zero_is_maximally_mixed() {
        let g = gibbs_state(&SymMatrix::zeros(4)).unwrap();
        assert!(max_diff(g.rho(), &SymMatrix::identity(4).scaled(0.25)) < 1e-15);
        assert_close(g.free_energy(), -(4.0f64).ln(), 1e-15);
    }

    #[test]
    fn gibbs_diagonal_closed_form() {
        let g = gibbs_state(&SymMatrix::from_diagonal(&[2.0f64.ln(), 0.0])).unwrap();
        let rho = g.rho();
        assert_close(rho.get(0, 0), 1.0 / 3.0, 1e-15);
        assert_close(rho.get(1, 1), 2.0 / 3.0, 1e-15);
        assert_close(rho.get(0, 1), 0.0, 1e-15);
        let d = g.diagonal();
        assert_close(d[0], 1.0 / 3.0, 1e-15);
    }

    #[test]
    fn gibbs_shift_invariance() {
        let h = SymMatrix::from_rows(&[vec![0.3, -1.2, 0.5], vec![-1.2, 2.0, 0.1], vec![0.5, 0.1, -0.7]]).unwrap();
        let mut shifted = h.clone();
        shifted.add_identity(5.0);
        let a = gibbs_state(&h).unwrap();
        let b = gibbs_state(&shifted).unwrap();
        assert!(max_diff(a.rho(), b.rho()) < 1e-12);
        assert_close(b.free_energy() - a.free_energy(), 5.0, 1e-12);
    }

    #[test]
    fn gibbs_entry_matches_dense() {
        let h = SymMatrix::from_upper_fn(5, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.4);
        let g = gibbs_state(&h).unwrap();
        let fresh = gibbs_state(&h).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_close(fresh.entry(i, j), g.rho().get(i, j), 1e-15);
            }
        }
    }

    #[test]
    fn psd_sqrt_examples() {
        let s = psd_sqrt(&SymMatrix::identity(4).scaled(0.25)).unwrap();
        assert!(max_diff(&s, &SymMatrix::identity(4).scaled(0.5)) < 1e-15);

        let v = [1.0, -1.0, -1.0, 1.0];
        let p = SymMatrix::from_upper_fn(4, |i, j| v[i] * v[j] / 4.0);
        let s = psd_sqrt(&p).unwrap();
        assert!(max_diff(&s, &p) < 1e-14);
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let m = SymMatrix::from_diagonal(&[1.0, -0.5]);
        assert!(matches!(psd_sqrt(&m), Err(LinalgError::NotPsd { .. })));
    }

    #[test]
    fn trace_product_examples() {
        let a = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let b = SymMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(trace_product(&a, &b).unwrap(), 4.0);
        assert!(matches!(
            trace_product(&a, &SymMatrix::zeros(3)),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn norms() {
        assert_close(trace_norm(&SymMatrix::from_diagonal(&[1.0, -2.0])).unwrap(), 3.0, 1e-15);
        assert_close(operator_norm(&SymMatrix::identity(3)).unwrap(), 1.0, 1e-15);
        assert_close(operator_norm(&SymMatrix::from_diagonal(&[-3.0, 2.0])).unwrap(), 3.0, 1e-15);
        // [[0, B], [B^T, 0]] with B = [[1, 2], [0, 2]]: singular values of B
        // are sqrt((9 +- sqrt(65)) / 2), the larger one is the norm
        let b = [[1.0, 2.0], [0.0, 2.0]];
        let c = SymMatrix::from_upper_fn(4, |i, j| if i < 2 && j >= 2 { b[i][j - 2] } else { 0.0 });
        let expected = ((9.0 + 65.0f64.sqrt()) / 2.0).sqrt();
        assert_close(operator_norm(&c).unwrap(), expected, 1e-14);
        let g = gibbs_state(&c).unwrap();
        assert_close(trace_norm(g.rho()).unwrap(), 1.0, 1e-13);
    }

    #[test]
    fn reconstruct_and_square() {
        let a = SymMatrix::from_upper_fn(6, |i, j| ((i + 2 * j) as f64).sin());
        let e = eigh(&a).unwrap();
        assert!(max_diff(&e.reconstruct(), &a) < 1e-13);
        let s2 = a.square();
        let via_eig = e.map(|w| w * w);
        assert!(max_diff(&s2, &via_eig) < 1e-12);
    }
}
