//! QUBO cost matrices: random benchmark instances, the coordinate text format,
//! and an exhaustive solver for small dimensions.
//!
//! Benchmark instances have the bipartite block form `C = [[0, B], [B^T, 0]]`
//! with a sparse `(n/2) x (n/2)` block `B`. The sparsity pattern of `B` has
//! exactly `s` nonzeros in every column and every row, so each column of `C`
//! carries exactly `s` nonzeros. Values are i.i.d. standard normal and the
//! matrix is scaled to unit operator norm.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::{stream_rng, Stream};
use crate::symlin::{eigenvalues, GibbsState, LinalgError, SymMatrix};

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("block form requires an even dimension, got n = {0}")]
    OddDimension(usize),
    #[error("sparsity s = {s} exceeds the admissible maximum {max}")]
    SparsityTooLarge { s: usize, max: usize },
    #[error("invalid instance parameters: {0}")]
    InvalidSpec(String),
    #[error("matrix is empty")]
    Empty,
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("asymmetric entry at ({i}, {j})")]
    Asymmetric { i: usize, j: usize },
    #[error("non-finite value at ({i}, {j})")]
    NonFinite { i: usize, j: usize },
    #[error("index ({i}, {j}) out of range for n = {n}")]
    OutOfRange { i: usize, j: usize, n: usize },
    #[error("brute force limited to n <= {max}, got {n}")]
    TooLargeForBruteForce { n: usize, max: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> InstanceError + '_ {
    move |source| InstanceError::Io { path: path.to_path_buf(), source }
}

/// Sparse symmetric cost matrix.
///
/// Stored as the upper triangle (`i <= j`, sorted) plus a symmetric adjacency
/// list for fast products.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    upper: Vec<(usize, usize, f64)>,
    adjacency: Vec<Vec<(usize, f64)>>,
    sparsity_s: usize,
    block_form: bool,
}

impl CostMatrix {
    /// Builds a matrix from coordinate entries. Entries below the diagonal are
    /// mirrored; a coordinate given twice with different values is an
    /// asymmetry, with equal values it is kept once. Zero values are dropped.
    pub fn from_entries(n: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self, InstanceError> {
        if n == 0 {
            return Err(InstanceError::Empty);
        }
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, v) in entries {
            if i >= n || j >= n {
                return Err(InstanceError::OutOfRange { i, j, n });
            }
            if !v.is_finite() {
                return Err(InstanceError::NonFinite { i, j });
            }
            let key = (i.min(j), i.max(j));
            if let Some(&old) = map.get(&key) {
                if old != v {
                    return Err(InstanceError::Asymmetric { i: key.1, j: key.0 });
                }
                continue;
            }
            map.insert(key, v);
        }
        let upper: Vec<(usize, usize, f64)> = map.into_iter().filter(|&(_, v)| v != 0.0).map(|((i, j), v)| (i, j, v)).collect();
        Ok(Self::from_upper_unchecked(n, upper, None))
    }

    fn from_upper_unchecked(n: usize, upper: Vec<(usize, usize, f64)>, sparsity_s: Option<usize>) -> Self {
        let mut adjacency = vec![Vec::new(); n];
        for &(i, j, v) in &upper {
            adjacency[i].push((j, v));
            if i != j {
                adjacency[j].push((i, v));
            }
        }
        for row in &mut adjacency {
            row.sort_by_key(|&(j, _)| j);
        }
        let measured = adjacency.iter().map(Vec::len).max().unwrap_or(0);
        let half = n / 2;
        let block_form = n.is_multiple_of(2) && upper.iter().all(|&(i, j, _)| (i < half) != (j < half));
        Self { n, upper, adjacency, sparsity_s: sparsity_s.unwrap_or(measured).max(measured), block_form }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored upper-triangular entries.
    pub fn nnz_upper(&self) -> usize {
        self.upper.len()
    }

    /// Upper-triangular entries `(i, j, value)` with `i <= j`, sorted.
    pub fn upper_entries(&self) -> &[(usize, usize, f64)] {
        &self.upper
    }

    /// Nonzeros of row (= column) `i` as `(j, value)`.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    /// Declared bound on nonzeros per column.
    pub fn sparsity(&self) -> usize {
        self.sparsity_s
    }

    pub fn max_column_nnz(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_block_form(&self) -> bool {
        self.block_form
    }

    pub fn has_zero_diagonal(&self) -> bool {
        self.upper.iter().all(|&(i, j, _)| i != j)
    }

    pub fn to_dense(&self) -> SymMatrix {
        let mut m = SymMatrix::zeros(self.n);
        for &(i, j, v) in &self.upper {
            m.set(i, j, v);
        }
        m
    }

    pub fn trace(&self) -> f64 {
        self.upper.iter().filter(|&&(i, j, _)| i == j).map(|&(_, _, v)| v).sum()
    }

    /// `C x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.adjacency.iter().map(|row| row.iter().map(|&(j, v)| v * x[j]).sum()).collect()
    }

    /// `x^T C x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n);
        let mut s = 0.0;
        for &(i, j, v) in &self.upper {
            if i == j {
                s += v * x[i] * x[i];
            } else {
                s += 2.0 * v * x[i] * x[j];
            }
        }
        s
    }

    /// `tr(C rho)` for a state given in spectral form; touches only the
    /// nonzero pattern of `C`.
    pub fn trace_with_gibbs(&self, state: &GibbsState) -> f64 {
        let mut s = 0.0;
        for &(i, j, v) in &self.upper {
            let r = state.entry(i, j);
            s += if i == j { v * r } else { 2.0 * v * r };
        }
        s
    }

    /// `tr(C A)` for a dense symmetric `A`.
    pub fn trace_with(&self, a: &SymMatrix) -> f64 {
        let mut s = 0.0;
        for &(i, j, v) in &self.upper {
            let r = a.get(i, j);
            s += if i == j { v * r } else { 2.0 * v * r };
        }
        s
    }

    /// Largest absolute eigenvalue. Block matrices use the largest singular
    /// value of the off-diagonal block.
    pub fn operator_norm(&self) -> Result<f64, InstanceError> {
        if self.upper.is_empty() {
            return Ok(0.0);
        }
        if self.block_form {
            let m = self.n / 2;
            // B^T B with B[i][j - m] = C[i][j], i < m <= j
            let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
            for &(i, j, v) in &self.upper {
                cols[j - m].push((i, v));
            }
            let mut rows_of_b: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
            for (c, col) in cols.iter().enumerate() {
                for &(r, v) in col {
                    rows_of_b[r].push((c, v));
                }
            }
            let mut btb = SymMatrix::zeros(m);
            for row in &rows_of_b {
                for &(a, va) in row {
                    for &(b, vb) in row {
                        if a <= b {
                            btb.set(a, b, btb.get(a, b) + va * vb);
                        }
                    }
                }
            }
            let w = eigenvalues(&btb)?;
            return Ok(w[m - 1].max(0.0).sqrt());
        }
        let w = eigenvalues(&self.to_dense())?;
        Ok(w[0].abs().max(w[self.n - 1].abs()))
    }

    pub fn scaled(&self, factor: f64) -> CostMatrix {
        let upper = self.upper.iter().map(|&(i, j, v)| (i, j, v * factor)).collect();
        let mut out = Self::from_upper_unchecked(self.n, upper, Some(self.sparsity_s));
        out.block_form = self.block_form;
        out
    }

    /// Scales to unit operator norm. A zero matrix is returned unchanged.
    pub fn normalized(&self) -> Result<CostMatrix, InstanceError> {
        let norm = self.operator_norm()?;
        if norm == 0.0 {
            return Ok(self.clone());
        }
        Ok(self.scaled(1.0 / norm))
    }
}

/// Parameters of a random benchmark instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceSeedSpec {
    pub n: usize,
    pub s: usize,
    pub seed: u64,
    pub block_form: bool,
}

impl InstanceSeedSpec {
    pub fn block(n: usize, s: usize, seed: u64) -> Self {
        Self { n, s, seed, block_form: true }
    }

    pub fn validate(&self) -> Result<(), InstanceError> {
        if self.n < 2 {
            return Err(InstanceError::InvalidSpec(format!("dimension must be at least 2, got {}", self.n)));
        }
        if self.s == 0 {
            return Err(InstanceError::InvalidSpec("sparsity must be at least 1".into()));
        }
        if self.block_form {
            if !self.n.is_multiple_of(2) {
                return Err(InstanceError::OddDimension(self.n));
            }
            if self.s > self.n / 2 {
                return Err(InstanceError::SparsityTooLarge { s: self.s, max: self.n / 2 });
            }
        } else {
            if self.s > self.n - 1 {
                return Err(InstanceError::SparsityTooLarge { s: self.s, max: self.n - 1 });
            }
            if !(self.n * self.s).is_multiple_of(2) {
                return Err(InstanceError::InvalidSpec("n * s must be even for a regular pattern".into()));
            }
        }
        Ok(())
    }
}

/// Random normalized instance; bit-identical for equal specs.
pub fn generate_instance(spec: &InstanceSeedSpec) -> Result<CostMatrix, InstanceError> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Instance, 0);
    let edges = if spec.block_form {
        let m = spec.n / 2;
        random_biregular_pattern(m, spec.s, &mut rng)
            .into_iter()
            .map(|(r, c)| (r, m + c))
            .collect::<Vec<_>>()
    } else {
        random_regular_pattern(spec.n, spec.s, &mut rng)
    };
    let mut pairs: Vec<(usize, usize)> = edges.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
    pairs.sort_unstable();
    let upper: Vec<(usize, usize, f64)> = pairs
        .into_iter()
        .map(|(i, j)| (i, j, rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let raw = CostMatrix::from_upper_unchecked(spec.n, upper, Some(spec.s));
    raw.normalized()
}

/// Degree-preserving random switches applied to `edges`. `valid` decides
/// whether a proposed edge is admissible (e.g. stays bipartite, no loops).
fn randomize_by_switches<R: Rng>(edges: &mut [(usize, usize)], rounds: usize, rng: &mut R) {
    let mut present: HashSet<(usize, usize)> = edges.iter().copied().collect();
    let e = edges.len();
    if e < 2 {
        return;
    }
    for _ in 0..rounds {
        let a = rng.random_range(0..e);
        let b = rng.random_range(0..e);
        if a == b {
            continue;
        }
        let (r1, c1) = edges[a];
        let (r2, c2) = edges[b];
        let n1 = (r1, c2);
        let n2 = (r2, c1);
        if r1 == r2 || c1 == c2 || present.contains(&n1) || present.contains(&n2) {
            continue;
        }
        present.remove(&(r1, c1));
        present.remove(&(r2, c2));
        present.insert(n1);
        present.insert(n2);
        edges[a] = n1;
        edges[b] = n2;
    }
}

/// `(row, col)` pairs of an `m x m` 0/1 pattern with exactly `s` ones per row
/// and per column.
fn random_biregular_pattern<R: Rng>(m: usize, s: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (0..m).flat_map(|c| (0..s).map(move |k| ((c + k) % m, c))).collect();
    let rounds = 10 * edges.len() + 100;
    randomize_by_switches(&mut edges, rounds, rng);
    let mut row_perm: Vec<usize> = (0..m).collect();
    let mut col_perm: Vec<usize> = (0..m).collect();
    row_perm.shuffle(rng);
    col_perm.shuffle(rng);
    edges.iter().map(|&(r, c)| (row_perm[r], col_perm[c])).collect()
}

/// Undirected `s`-regular simple graph on `n` vertices as `(u, v)` pairs.
fn random_regular_pattern<R: Rng>(n: usize, s: usize, rng: &mut R) -> Vec<(usize, usize)> {
    // circulant start: offsets 1..=s/2, plus the antipodal offset when s is odd
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for u in 0..n {
        for k in 1..=s / 2 {
            edges.push((u, (u + k) % n));
        }
    }
    if s % 2 == 1 {
        for u in 0..n / 2 {
            edges.push((u, u + n / 2));
        }
    }
    // switches on an undirected edge list: orient randomly so both pairings
    // get proposed
    let mut present: HashSet<(usize, usize)> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let e = edges.len();
    for _ in 0..10 * e + 100 {
        let ia = rng.random_range(0..e);
        let ib = rng.random_range(0..e);
        if ia == ib {
            continue;
        }
        let (mut a, mut b) = edges[ia];
        if rng.random::<bool>() {
            std::mem::swap(&mut a, &mut b);
        }
        let (c, d) = edges[ib];
        let n1 = (a.min(d), a.max(d));
        let n2 = (c.min(b), c.max(b));
        if a == d || c == b || n1 == n2 || present.contains(&n1) || present.contains(&n2) {
            continue;
        }
        present.remove(&(edges[ia].0.min(edges[ia].1), edges[ia].0.max(edges[ia].1)));
        present.remove(&(c.min(d), c.max(d)));
        present.insert(n1);
        present.insert(n2);
        edges[ia] = n1;
        edges[ib] = n2;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect()
}

const HEADER_TAG: &str = "%%sym-coord";

/// Writes the coordinate text format: a `%%sym-coord n nnz` header followed
/// by one `i j value` line per upper-triangular entry (1-based).
pub fn store_matrix(c: &CostMatrix, path: &Path) -> Result<(), InstanceError> {
    fs::write(path, format_matrix(c)).map_err(io_err(path))
}

pub fn format_matrix(c: &CostMatrix) -> String {
    let mut out = String::with_capacity(32 * (c.nnz_upper() + 1));
    let _ = writeln!(out, "{HEADER_TAG} {} {}", c.dim(), c.nnz_upper());
    for &(i, j, v) in c.upper_entries() {
        // `{:e}` prints the shortest representation that parses back exactly
        let _ = writeln!(out, "{} {} {:e}", i + 1, j + 1, v);
    }
    out
}

pub fn load_matrix(path: &Path) -> Result<CostMatrix, InstanceError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_matrix(&text)
}

pub fn parse_matrix(text: &str) -> Result<CostMatrix, InstanceError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(InstanceError::Empty)?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(HEADER_TAG) {
        return Err(InstanceError::Malformed { line: hline + 1, msg: format!("expected `{HEADER_TAG} n nnz` header") });
    }
    let parse_usize = |tok: Option<&str>, line: usize, what: &str| -> Result<usize, InstanceError> {
        tok.and_then(|t| t.parse().ok())
            .ok_or_else(|| InstanceError::Malformed { line, msg: format!("missing or invalid {what}") })
    };
    let n = parse_usize(parts.next(), hline + 1, "dimension")?;
    let nnz = parse_usize(parts.next(), hline + 1, "entry count")?;
    if n == 0 || nnz == 0 {
        return Err(InstanceError::Empty);
    }
    let mut entries = Vec::with_capacity(nnz);
    for (idx, line) in lines {
        let lineno = idx + 1;
        let mut tok = line.split_whitespace();
        let i = parse_usize(tok.next(), lineno, "row index")?;
        let j = parse_usize(tok.next(), lineno, "column index")?;
        let v: f64 = tok
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| InstanceError::Malformed { line: lineno, msg: "missing or invalid value".into() })?;
        if tok.next().is_some() {
            return Err(InstanceError::Malformed { line: lineno, msg: "trailing tokens".into() });
        }
        if i == 0 || j == 0 {
            return Err(InstanceError::Malformed { line: lineno, msg: "indices are 1-based".into() });
        }
        entries.push((i - 1, j - 1, v));
    }
    if entries.len() != nnz {
        return Err(InstanceError::Malformed {
            line: hline + 1,
            msg: format!("header announces {nnz} entries, found {}", entries.len()),
        });
    }
    CostMatrix::from_entries(n, entries)
}

/// Sidecar metadata stored next to an instance file as `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMetadata {
    pub n: usize,
    pub s: usize,
    pub seed: Option<u64>,
    pub block_form: bool,
    /// Operator norm after normalization.
    pub norm: f64,
    /// How `s` is counted.
    pub sparsity_convention: String,
}

pub const SPARSITY_CONVENTION: &str = "s nonzeros per column and per row of B";

impl InstanceMetadata {
    pub fn for_generated(spec: &InstanceSeedSpec, c: &CostMatrix) -> Result<Self, InstanceError> {
        Ok(Self {
            n: spec.n,
            s: spec.s,
            seed: Some(spec.seed),
            block_form: spec.block_form,
            norm: c.operator_norm()?,
            sparsity_convention: SPARSITY_CONVENTION.into(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n = {}", self.n);
        let _ = writeln!(out, "s = {}", self.s);
        match self.seed {
            Some(seed) => {
                let _ = writeln!(out, "seed = {seed}");
            }
            None => {
                let _ = writeln!(out, "seed = none");
            }
        }
        let _ = writeln!(out, "block_form = {}", self.block_form);
        let _ = writeln!(out, "norm = {:e}", self.norm);
        let _ = writeln!(out, "sparsity_convention = {}", self.sparsity_convention);
        out
    }

    pub fn parse(text: &str) -> Result<Self, InstanceError> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| InstanceError::Malformed { line: 0, msg: format!("missing key `{k}`") });
        let bad = |k: &str| InstanceError::Malformed { line: 0, msg: format!("invalid value for `{k}`") };
        Ok(Self {
            n: get("n")?.parse().map_err(|_| bad("n"))?,
            s: get("s")?.parse().map_err(|_| bad("s"))?,
            seed: match get("seed")?.as_str() {
                "none" => None,
                v => Some(v.parse().map_err(|_| bad("seed"))?),
            },
            block_form: get("block_form")?.parse().map_err(|_| bad("block_form"))?,
            norm: get("norm")?.parse().map_err(|_| bad("norm"))?,
            sparsity_convention: kv.get("sparsity_convention").cloned().unwrap_or_default(),
        })
    }

    pub fn sidecar_path(matrix_path: &Path) -> PathBuf {
        let mut p = matrix_path.as_os_str().to_owned();
        p.push(".meta");
        PathBuf::from(p)
    }

    pub fn store(&self, path: &Path) -> Result<(), InstanceError> {
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, InstanceError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, InstanceError> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| InstanceError::Malformed { line: idx + 1, msg: "expected `key = value`".into() })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub const BRUTE_FORCE_MAX_N: usize = 24;

/// Exact maximizer of `x^T C x` over sign vectors, with `x_0 = +1` fixed.
///
/// Enumerates the remaining coordinates in Gray-code order, updating the
/// local fields `C x` incrementally so each step costs one sparse column.
pub fn brute_force_qubo(c: &CostMatrix) -> Result<(Vec<f64>, f64), InstanceError> {
    let n = c.dim();
    if n > BRUTE_FORCE_MAX_N {
        return Err(InstanceError::TooLargeForBruteForce { n, max: BRUTE_FORCE_MAX_N });
    }
    let mut x = vec![1.0; n];
    let mut field = c.mul_vec(&x);
    let mut value = c.quadratic_form(&x);
    let mut best = value;
    let mut best_x = x.clone();
    let free = n - 1;
    let total: u64 = 1u64 << free;
    for step in 1..total {
        // bit flipped between Gray codes step-1 and step
        let k = 1 + step.trailing_zeros() as usize;
        let xk = x[k];
        let off_diag: f64 = field[k] - c.row(k).iter().filter(|&&(j, _)| j == k).map(|&(_, v)| v * xk).sum::<f64>();
        value -= 4.0 * xk * off_diag;
        x[k] = -xk;
        for &(j, v) in c.row(k) {
            field[j] -= 2.0 * v * xk;
        }
        if value > best {
            best = value;
            best_x.clone_from(&x);
        }
    }
    // re-evaluate to drop accumulated rounding from the incremental updates
    let exact = c.quadratic_form(&best_x);
    Ok((best_x, exact))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn swap_matrix(sign: f64) -> CostMatrix {
        CostMatrix::from_entries(2, [(0, 1, sign)]).unwrap()
    }

    #[test]
    fn small_block_instance_structure() {
        for seed in 0..5 {
            let c = generate_instance(&InstanceSeedSpec::block(4, 1, seed)).unwrap();
            assert_eq!(c.dim(), 4);
            assert!(c.is_block_form());
            assert!(c.has_zero_diagonal());
            assert!((c.operator_norm().unwrap() - 1.0).abs() < 1e-9);
            assert_eq!(c.max_column_nnz(), 1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = InstanceSeedSpec::block(64, 4, 99);
        let a = generate_instance(&spec).unwrap();
        let b = generate_instance(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_instance(&InstanceSeedSpec::block(64, 4, 100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn paper_scale_column_counts() {
        let c = generate_instance(&InstanceSeedSpec::block(128, 16, 1)).unwrap();
        for i in 0..128 {
            assert_eq!(c.row(i).len(), 16, "column {i}");
        }
        assert_eq!(c.sparsity(), 16);
        assert!((c.operator_norm().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_block_regular_instance() {
        let c = generate_instance(&InstanceSeedSpec { n: 30, s: 5, seed: 3, block_form: false }).unwrap();
        assert!(c.has_zero_diagonal());
        for i in 0..30 {
            assert_eq!(c.row(i).len(), 5);
        }
        assert!((c.operator_norm().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(matches!(generate_instance(&InstanceSeedSpec::block(5, 1, 0)), Err(InstanceError::OddDimension(5))));
        assert!(matches!(
            generate_instance(&InstanceSeedSpec::block(8, 5, 0)),
            Err(InstanceError::SparsityTooLarge { s: 5, max: 4 })
        ));
    }

    #[test]
    fn normalization_is_idempotent() {
        let c = generate_instance(&InstanceSeedSpec::block(32, 3, 5)).unwrap();
        let again = c.normalized().unwrap();
        for (a, b) in c.upper_entries().iter().zip(again.upper_entries()) {
            assert!((a.2 - b.2).abs() <= 1e-15, "{} vs {}", a.2, b.2);
        }
    }

    #[test]
    fn text_round_trip() {
        let c = swap_matrix(1.0);
        assert_eq!(parse_matrix(&format_matrix(&c)).unwrap(), c);
        let g = generate_instance(&InstanceSeedSpec::block(128, 16, 11)).unwrap();
        let back = parse_matrix(&format_matrix(&g)).unwrap();
        assert_eq!(back.upper_entries(), g.upper_entries());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_matrix(""), Err(InstanceError::Empty)));
        assert!(matches!(parse_matrix("%%sym-coord 2 0\n"), Err(InstanceError::Empty)));
        assert!(matches!(parse_matrix("%%sym-coord 2 1\n1 x 1.0\n"), Err(InstanceError::Malformed { line: 2, .. })));
        assert!(matches!(
            parse_matrix("%%sym-coord 2 2\n1 2 1.0\n2 1 2.0\n"),
            Err(InstanceError::Asymmetric { .. })
        ));
        assert!(matches!(parse_matrix("%%sym-coord 2 1\n1 2 NaN\n"), Err(InstanceError::NonFinite { .. })));
        assert!(matches!(parse_matrix("%%sym-coord 2 1\n1 3 1.0\n"), Err(InstanceError::OutOfRange { .. })));
        assert!(matches!(parse_matrix("%%sym-coord 2 2\n1 2 1.0\n"), Err(InstanceError::Malformed { .. })));
    }

    #[test]
    fn metadata_round_trip() {
        let spec = InstanceSeedSpec::block(16, 2, 42);
        let c = generate_instance(&spec).unwrap();
        let meta = InstanceMetadata::for_generated(&spec, &c).unwrap();
        assert_eq!(InstanceMetadata::parse(&meta.to_text()).unwrap(), meta);
    }

    #[test]
    fn brute_force_two_by_two() {
        let (x, v) = brute_force_qubo(&swap_matrix(1.0)).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(x, vec![1.0, 1.0]);
        let (x, v) = brute_force_qubo(&swap_matrix(-1.0)).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(x, vec![1.0, -1.0]);
    }

    #[test]
    fn brute_force_refuses_large() {
        let c = generate_instance(&InstanceSeedSpec::block(26, 2, 0)).unwrap();
        assert!(matches!(brute_force_qubo(&c), Err(InstanceError::TooLargeForBruteForce { .. })));
    }

    #[test]
    fn brute_force_matches_plain_enumeration() {
        let c = generate_instance(&InstanceSeedSpec::block(10, 3, 17)).unwrap();
        let dense = c.to_dense();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << 10) {
            let x: Vec<f64> = (0..10).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
            let mut v = 0.0;
            for i in 0..10 {
                for j in 0..10 {
                    v += dense.get(i, j) * x[i] * x[j];
                }
            }
            best = best.max(v);
        }
        let (x, v) = brute_force_qubo(&c).unwrap();
        assert!((v - best).abs() < 1e-12, "{v} vs {best}");
        assert!((c.quadratic_form(&x) - v).abs() < 1e-15);
    }

    #[test]
    fn brute_force_with_diagonal_terms() {
        let c = CostMatrix::from_entries(3, [(0, 0, 0.5), (0, 1, -1.0), (1, 2, 0.25), (2, 2, -0.3)]).unwrap();
        let (_, v) = brute_force_qubo(&c).unwrap();
        let mut best = f64::NEG_INFINITY;
        for mask in 0..8u32 {
            let x: Vec<f64> = (0..3).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
            best = best.max(c.quadratic_form(&x));
        }
        assert!((v - best).abs() < 1e-15);
    }
}
