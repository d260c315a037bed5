//! Dense finite-dimensional quantum states, measurements and channels.
//!
//! Everything here is immutable after construction. Constructors validate the
//! physical invariants (Hermiticity, unit trace, positivity, completeness) at
//! the tolerances below, so downstream code can assume well-formed inputs.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Largest total Hilbert-space dimension any operator may have.
pub const MAX_DIM: usize = 4096;
/// Tolerance for algebraic invariants (Hermiticity, trace, completeness).
pub const ALGEBRA_TOL: f64 = 1e-10;
/// Tolerance for probability normalization.
pub const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QStateError {
    #[error("dimension {dim} exceeds the configured maximum {max}")]
    DimensionOverflow { dim: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),
    #[error("not Hermitian (deviation {0:e})")]
    NotHermitian(f64),
    #[error("trace deviates from 1 by {0:e}")]
    InvalidTrace(f64),
    #[error("not positive semidefinite (minimum eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("POVM has no effects")]
    EmptyPovm,
    #[error("POVM effects do not sum to the identity (deviation {0:e})")]
    IncompletePovm(f64),
    #[error("channel is not trace preserving (deviation {0:e})")]
    NotTracePreserving(f64),
    #[error("invalid subsystem specification: {0}")]
    InvalidSubsystems(String),
    #[error("invalid correlation table: {0}")]
    InvalidTable(String),
}

pub type Result<T> = std::result::Result<T, QStateError>;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Largest entrywise deviation of `m` from its conjugate transpose.
pub fn hermiticity_deviation(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Eigenvalues of the Hermitian part of `m`, ascending.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let herm = (m + m.adjoint()) * c(0.5);
    let mut evs: Vec<f64> = herm.symmetric_eigenvalues().iter().copied().collect();
    evs.sort_by(|a, b| a.total_cmp(b));
    evs
}

fn trace(m: &CMatrix) -> Complex64 {
    (0..m.nrows()).map(|i| m[(i, i)]).sum()
}

fn check_dim(dim: usize) -> Result<()> {
    if dim > MAX_DIM {
        Err(QStateError::DimensionOverflow { dim, max: MAX_DIM })
    } else {
        Ok(())
    }
}

/// Kronecker product of two operators, capped at [`MAX_DIM`].
pub fn tensor(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    let rows = a.nrows() * b.nrows();
    let cols = a.ncols() * b.ncols();
    check_dim(rows.max(cols))?;
    Ok(a.kronecker(b))
}

/// Kronecker product of two kets.
pub fn tensor_ket(a: &CVector, b: &CVector) -> Result<CVector> {
    check_dim(a.len() * b.len())?;
    Ok(a.kronecker(b))
}

/// Computational basis ket `|index⟩` in dimension `dim`.
pub fn basis_ket(dim: usize, index: usize) -> CVector {
    let mut v = CVector::zeros(dim);
    v[index] = c(1.0);
    v
}

/// Numerical health report of a candidate density matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDiagnostics {
    pub trace_deviation: f64,
    pub hermiticity_deviation: f64,
    pub min_eigenvalue: f64,
}

impl StateDiagnostics {
    pub fn is_valid(&self) -> bool {
        self.trace_deviation <= ALGEBRA_TOL
            && self.hermiticity_deviation <= ALGEBRA_TOL
            && self.min_eigenvalue >= -ALGEBRA_TOL
    }
}

/// Reports trace, Hermiticity and positivity deviations without rejecting.
pub fn validate_state(m: &CMatrix) -> StateDiagnostics {
    StateDiagnostics {
        trace_deviation: (trace(m) - c(1.0)).norm(),
        hermiticity_deviation: hermiticity_deviation(m),
        min_eigenvalue: hermitian_eigenvalues(m).first().copied().unwrap_or(0.0),
    }
}

/// A normalized, Hermitian, positive semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    matrix: CMatrix,
}

impl DensityOperator {
    pub fn new(matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(QStateError::NotSquare(matrix.nrows(), matrix.ncols()));
        }
        check_dim(matrix.nrows())?;
        let d = validate_state(&matrix);
        if d.hermiticity_deviation > ALGEBRA_TOL {
            return Err(QStateError::NotHermitian(d.hermiticity_deviation));
        }
        if d.trace_deviation > ALGEBRA_TOL {
            return Err(QStateError::InvalidTrace(d.trace_deviation));
        }
        if d.min_eigenvalue < -ALGEBRA_TOL {
            return Err(QStateError::NotPsd(d.min_eigenvalue));
        }
        Ok(Self { matrix })
    }

    /// Normalizes a positive operator with nonzero trace into a state.
    pub fn from_unnormalized(matrix: CMatrix) -> Result<Self> {
        let tr = trace(&matrix).re;
        if tr <= 0.0 {
            return Err(QStateError::InvalidTrace(1.0 - tr));
        }
        Self::new(matrix / c(tr))
    }

    /// `|ψ⟩⟨ψ|`, normalizing `psi` first.
    pub fn from_pure(psi: &CVector) -> Result<Self> {
        let norm = psi.norm();
        if norm == 0.0 {
            return Err(QStateError::InvalidTrace(1.0));
        }
        let v = psi / c(norm);
        Self::new(&v * v.adjoint())
    }

    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Self::new(CMatrix::identity(dim, dim) / c(dim as f64))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn tensor(&self, other: &DensityOperator) -> Result<DensityOperator> {
        Ok(Self {
            matrix: tensor(&self.matrix, &other.matrix)?,
        })
    }

    /// `⟨ψ|ρ|ψ⟩` for a normalized `psi`.
    pub fn fidelity_with_pure(&self, psi: &CVector) -> f64 {
        let v = psi / c(psi.norm());
        (v.adjoint() * &self.matrix * &v)[(0, 0)].re
    }

    /// Mixture `λ ρ + (1-λ) σ`.
    pub fn mix(&self, other: &DensityOperator, lambda: f64) -> Result<DensityOperator> {
        if self.dim() != other.dim() {
            return Err(QStateError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Self::new(&self.matrix * c(lambda) + &other.matrix * c(1.0 - lambda))
    }

    pub fn diagnostics(&self) -> StateDiagnostics {
        validate_state(&self.matrix)
    }
}

/// Reduced state on the subsystems listed in `keep` (in ascending order).
pub fn partial_trace(rho: &DensityOperator, dims: &[usize], keep: &[usize]) -> Result<DensityOperator> {
    let total: usize = dims.iter().product();
    if total != rho.dim() {
        return Err(QStateError::DimensionMismatch {
            expected: rho.dim(),
            found: total,
        });
    }
    let mut keep_sorted = keep.to_vec();
    keep_sorted.sort_unstable();
    keep_sorted.dedup();
    if keep_sorted.len() != keep.len() || keep_sorted.iter().any(|&k| k >= dims.len()) {
        return Err(QStateError::InvalidSubsystems(format!(
            "keep {keep:?} for {} subsystems",
            dims.len()
        )));
    }
    let traced: Vec<usize> = (0..dims.len()).filter(|k| !keep_sorted.contains(k)).collect();
    let kept_dim: usize = keep_sorted.iter().map(|&k| dims[k]).product();
    let traced_dim: usize = traced.iter().map(|&k| dims[k]).product();

    // Row-major strides of the full index.
    let mut strides = vec![1usize; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    let compose = |kept_idx: usize, traced_idx: usize| -> usize {
        let mut full = 0;
        let mut rem = kept_idx;
        for &k in keep_sorted.iter().rev() {
            full += (rem % dims[k]) * strides[k];
            rem /= dims[k];
        }
        let mut rem = traced_idx;
        for &k in traced.iter().rev() {
            full += (rem % dims[k]) * strides[k];
            rem /= dims[k];
        }
        full
    };

    let m = rho.matrix();
    let mut out = CMatrix::zeros(kept_dim, kept_dim);
    for i in 0..kept_dim {
        for j in 0..kept_dim {
            let mut acc = Complex64::new(0.0, 0.0);
            for t in 0..traced_dim {
                acc += m[(compose(i, t), compose(j, t))];
            }
            out[(i, j)] = acc;
        }
    }
    DensityOperator::new(out)
}

/// A completely positive trace-preserving map in Kraus form.
#[derive(Debug, Clone)]
pub struct KrausChannel {
    operators: Vec<CMatrix>,
}

impl KrausChannel {
    pub fn new(operators: Vec<CMatrix>) -> Result<Self> {
        let first = operators
            .first()
            .ok_or_else(|| QStateError::InvalidSubsystems("channel without Kraus operators".into()))?;
        let (dout, din) = first.shape();
        let mut sum = CMatrix::zeros(din, din);
        for k in &operators {
            if k.shape() != (dout, din) {
                return Err(QStateError::DimensionMismatch {
                    expected: dout * din,
                    found: k.nrows() * k.ncols(),
                });
            }
            sum += k.adjoint() * k;
        }
        let dev = (sum - CMatrix::identity(din, din)).camax();
        if dev > ALGEBRA_TOL {
            return Err(QStateError::NotTracePreserving(dev));
        }
        Ok(Self { operators })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            operators: vec![CMatrix::identity(dim, dim)],
        }
    }

    /// Photon loss on a single-rail qubit `{|0⟩ vacuum, |1⟩ photon}`;
    /// the photon survives with probability `eta_t`.
    pub fn amplitude_damping(eta_t: f64) -> Result<Self> {
        let eta = eta_t.clamp(0.0, 1.0);
        let k0 = CMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(eta.sqrt())]);
        let k1 = CMatrix::from_row_slice(2, 2, &[c(0.0), c((1.0 - eta).sqrt()), c(0.0), c(0.0)]);
        Self::new(vec![k0, k1])
    }

    /// Qubit depolarizing channel `ρ → λρ + (1-λ) I/2`.
    pub fn depolarizing(lambda: f64) -> Result<Self> {
        let l = lambda.clamp(-1.0 / 3.0, 1.0);
        let p = (1.0 - l) * 3.0 / 4.0;
        let i = CMatrix::identity(2, 2) * c((1.0 - p).sqrt());
        let s = (p / 3.0).sqrt();
        let x = CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)]) * c(s);
        let y = CMatrix::from_row_slice(
            2,
            2,
            &[c(0.0), Complex64::new(0.0, -1.0), Complex64::new(0.0, 1.0), c(0.0)],
        ) * c(s);
        let z = CMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(-1.0)]) * c(s);
        Self::new(vec![i, x, y, z])
    }

    /// Lifts a channel on one factor to `I ⊗ … ⊗ ch ⊗ … ⊗ I`.
    pub fn on_subsystem(&self, dims: &[usize], target: usize) -> Result<Self> {
        let mut ops = Vec::with_capacity(self.operators.len());
        for k in &self.operators {
            if k.ncols() != dims[target] {
                return Err(QStateError::DimensionMismatch {
                    expected: dims[target],
                    found: k.ncols(),
                });
            }
            let mut acc = CMatrix::identity(1, 1);
            for (idx, &d) in dims.iter().enumerate() {
                let factor = if idx == target { k.clone() } else { CMatrix::identity(d, d) };
                acc = tensor(&acc, &factor)?;
            }
            ops.push(acc);
        }
        Self::new(ops)
    }

    pub fn dim_in(&self) -> usize {
        self.operators[0].ncols()
    }

    pub fn operators(&self) -> &[CMatrix] {
        &self.operators
    }
}

/// `Σ K ρ K†`.
pub fn apply_channel(rho: &DensityOperator, ch: &KrausChannel) -> Result<DensityOperator> {
    if ch.dim_in() != rho.dim() {
        return Err(QStateError::DimensionMismatch {
            expected: ch.dim_in(),
            found: rho.dim(),
        });
    }
    let mut out = CMatrix::zeros(ch.operators[0].nrows(), ch.operators[0].nrows());
    for k in &ch.operators {
        out += k * rho.matrix() * k.adjoint();
    }
    // Re-Hermitize to absorb round-off from long products.
    let out = (&out + out.adjoint()) * c(0.5);
    DensityOperator::new(out)
}

/// A measurement given by its positive effects `M_0, M_1, …` summing to I.
#[derive(Debug, Clone, PartialEq)]
pub struct Povm {
    effects: Vec<CMatrix>,
}

impl Povm {
    pub fn new(effects: Vec<CMatrix>) -> Result<Self> {
        let first = effects.first().ok_or(QStateError::EmptyPovm)?;
        let dim = first.nrows();
        let mut sum = CMatrix::zeros(dim, dim);
        for e in &effects {
            if e.shape() != (dim, dim) {
                return Err(QStateError::DimensionMismatch {
                    expected: dim,
                    found: e.nrows(),
                });
            }
            let h = hermiticity_deviation(e);
            if h > ALGEBRA_TOL {
                return Err(QStateError::NotHermitian(h));
            }
            let min = hermitian_eigenvalues(e).first().copied().unwrap_or(0.0);
            if min < -ALGEBRA_TOL {
                return Err(QStateError::NotPsd(min));
            }
            sum += e;
        }
        let dev = (sum - CMatrix::identity(dim, dim)).camax();
        if dev > ALGEBRA_TOL {
            return Err(QStateError::IncompletePovm(dev));
        }
        Ok(Self { effects })
    }

    /// Projective qubit measurement of `cos θ Z + sin θ X`;
    /// outcome 0 is the +1 eigenvalue.
    pub fn projective_zx(theta: f64) -> Self {
        let (s, co) = theta.sin_cos();
        let plus = CMatrix::from_row_slice(
            2,
            2,
            &[c((1.0 + co) / 2.0), c(s / 2.0), c(s / 2.0), c((1.0 - co) / 2.0)],
        );
        let minus = CMatrix::identity(2, 2) - &plus;
        Self {
            effects: vec![plus, minus],
        }
    }

    /// Appends a no-click outcome: each effect is scaled by `eta` and the
    /// missing weight `(1-eta) I` becomes the last outcome.
    pub fn with_efficiency(&self, eta: f64) -> Self {
        let dim = self.dim();
        let mut effects: Vec<CMatrix> = self.effects.iter().map(|e| e * c(eta)).collect();
        effects.push(CMatrix::identity(dim, dim) * c(1.0 - eta));
        Self { effects }
    }

    /// Same effects with outcome labels in reverse order.
    pub fn relabeled(&self) -> Self {
        let mut effects = self.effects.clone();
        effects.reverse();
        Self { effects }
    }

    pub fn dim(&self) -> usize {
        self.effects[0].nrows()
    }

    pub fn outcomes(&self) -> usize {
        self.effects.len()
    }

    pub fn effects(&self) -> &[CMatrix] {
        &self.effects
    }
}

/// Conditional distribution `P(a,b|x,y)` for a two-party scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTable {
    m_a: usize,
    m_b: usize,
    o_a: usize,
    o_b: usize,
    probs: Vec<f64>,
}

impl CorrelationTable {
    /// Builds a table from `probs` laid out as `[x][y][a][b]`.
    pub fn new(m_a: usize, m_b: usize, o_a: usize, o_b: usize, probs: Vec<f64>) -> Result<Self> {
        if m_a == 0 || m_b == 0 || o_a == 0 || o_b == 0 {
            return Err(QStateError::InvalidTable("empty scenario".into()));
        }
        if probs.len() != m_a * m_b * o_a * o_b {
            return Err(QStateError::InvalidTable(format!(
                "expected {} entries, found {}",
                m_a * m_b * o_a * o_b,
                probs.len()
            )));
        }
        let mut probs = probs;
        for p in probs.iter_mut() {
            if !(-PROB_TOL..=1.0 + PROB_TOL).contains(p) || p.is_nan() {
                return Err(QStateError::InvalidTable(format!("entry {p} outside [0,1]")));
            }
            *p = p.clamp(0.0, 1.0);
        }
        let t = Self { m_a, m_b, o_a, o_b, probs };
        for x in 0..m_a {
            for y in 0..m_b {
                let s: f64 = (0..o_a)
                    .flat_map(|a| (0..o_b).map(move |b| (a, b)))
                    .map(|(a, b)| t.get(a, b, x, y))
                    .sum();
                if (s - 1.0).abs() > PROB_TOL {
                    return Err(QStateError::InvalidTable(format!(
                        "setting ({x},{y}) sums to {s}"
                    )));
                }
            }
        }
        Ok(t)
    }

    /// Builds a table from a function of `(a, b, x, y)`.
    pub fn from_fn(
        m_a: usize,
        m_b: usize,
        o_a: usize,
        o_b: usize,
        f: impl Fn(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut probs = Vec::with_capacity(m_a * m_b * o_a * o_b);
        for x in 0..m_a {
            for y in 0..m_b {
                for a in 0..o_a {
                    for b in 0..o_b {
                        probs.push(f(a, b, x, y));
                    }
                }
            }
        }
        Self::new(m_a, m_b, o_a, o_b, probs)
    }

    fn index(&self, a: usize, b: usize, x: usize, y: usize) -> usize {
        ((x * self.m_b + y) * self.o_a + a) * self.o_b + b
    }

    pub fn get(&self, a: usize, b: usize, x: usize, y: usize) -> f64 {
        self.probs[self.index(a, b, x, y)]
    }

    /// `(m_A, m_B, o_A, o_B)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.m_a, self.m_b, self.o_a, self.o_b)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn alice_marginal(&self, a: usize, x: usize, y: usize) -> f64 {
        (0..self.o_b).map(|b| self.get(a, b, x, y)).sum()
    }

    pub fn bob_marginal(&self, b: usize, x: usize, y: usize) -> f64 {
        (0..self.o_a).map(|a| self.get(a, b, x, y)).sum()
    }

    /// Convex combination `λ·self + (1-λ)·other`.
    pub fn mix(&self, other: &CorrelationTable, lambda: f64) -> Result<CorrelationTable> {
        if self.shape() != other.shape() {
            return Err(QStateError::InvalidTable("shape mismatch in mixture".into()));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| lambda * p + (1.0 - lambda) * q)
            .collect();
        Self::new(self.m_a, self.m_b, self.o_a, self.o_b, probs)
    }
}

/// Born-rule table `P(a,b|x,y) = Tr[ρ (M_{a|x} ⊗ M_{b|y})]`.
pub fn born_table(rho: &DensityOperator, alice: &[Povm], bob: &[Povm]) -> Result<CorrelationTable> {
    let (Some(fa), Some(fb)) = (alice.first(), bob.first()) else {
        return Err(QStateError::EmptyPovm);
    };
    let (da, db) = (fa.dim(), fb.dim());
    if da * db != rho.dim() {
        return Err(QStateError::DimensionMismatch {
            expected: rho.dim(),
            found: da * db,
        });
    }
    let (oa, ob) = (fa.outcomes(), fb.outcomes());
    if alice.iter().any(|p| p.dim() != da || p.outcomes() != oa)
        || bob.iter().any(|p| p.dim() != db || p.outcomes() != ob)
    {
        return Err(QStateError::InvalidTable("inconsistent POVM family".into()));
    }
    let m = rho.matrix();
    CorrelationTable::from_fn(alice.len(), bob.len(), oa, ob, |a, b, x, y| {
        let ma = &alice[x].effects[a];
        let mb = &bob[y].effects[b];
        // Tr[ρ (A⊗B)] = Σ ρ[(i k),(j l)] A[j,i] B[l,k]
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..da {
            for j in 0..da {
                let aji = ma[(j, i)];
                if aji == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for k in 0..db {
                    for l in 0..db {
                        acc += m[(i * db + k, j * db + l)] * aji * mb[(l, k)];
                    }
                }
            }
        }
        acc.re
    })
}

/// Standard two-qubit states used throughout the crate.
pub mod states {
    use super::*;

    /// `(|01⟩ - |10⟩)/√2`.
    pub fn singlet_ket() -> CVector {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        CVector::from_vec(vec![c(0.0), c(r), c(-r), c(0.0)])
    }

    pub fn singlet() -> DensityOperator {
        DensityOperator::from_pure(&singlet_ket()).expect("singlet is a valid state")
    }

    /// `cos θ |00⟩ + sin θ |11⟩`; θ = π/4 is maximally entangled.
    pub fn partially_entangled_ket(theta: f64) -> CVector {
        CVector::from_vec(vec![c(theta.cos()), c(0.0), c(0.0), c(theta.sin())])
    }

    pub fn partially_entangled(theta: f64) -> DensityOperator {
        DensityOperator::from_pure(&partially_entangled_ket(theta)).expect("valid pure state")
    }

    pub fn basis_projector(dim: usize, index: usize) -> CMatrix {
        let k = basis_ket(dim, index);
        &k * k.adjoint()
    }
}
