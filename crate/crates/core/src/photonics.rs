//! Truncated Fock-space linear optics.
//!
//! Pure states are dense amplitude vectors over occupation tuples, with mode 0
//! as the most significant digit in base `n_max + 1`. Mixed states are kept as
//! ensembles of unnormalized pure branches so that large multi-mode states never
//! have to be squared into a density matrix. Linear optics acts on creation
//! operators, `a_k† → Σ_j U[j][k] a_j†`, so a unitary maps single-photon
//! amplitude vectors by ordinary matrix multiplication.
//!
//! Nothing in this module draws random numbers.

use std::collections::BTreeMap;

use num_complex::Complex64;
use thiserror::Error;

use crate::qstate::{CMatrix, CVector, DensityOperator, QStateError, MAX_DIM};

/// Default per-mode photon cutoff.
pub const DEFAULT_CUTOFF: usize = 3;
/// Default SPDC truncation (number of pairs).
pub const DEFAULT_PAIR_CUTOFF: usize = 2;
/// Probability weight above the cutoff that is reported as an overflow.
pub const OVERFLOW_TOL: f64 = 1e-6;
/// Largest dense amplitude vector a [`ModeState`] may hold.
pub const MAX_AMPLITUDES: usize = 1 << 21;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhotonicsError {
    #[error("{name} = {value} is outside its valid range")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("mode {mode} does not exist in a {n_modes}-mode state")]
    InvalidMode { mode: usize, n_modes: usize },
    #[error("beamsplitter needs two distinct modes, got {0} twice")]
    SameMode(usize),
    #[error("truncation overflow: weight {dropped:e} above cutoff {n_max}")]
    TruncationOverflow { dropped: f64, n_max: usize },
    #[error("{0} amplitudes exceed the dense limit")]
    TooLarge(usize),
    #[error("occupation {occupation:?} exceeds cutoff {n_max}")]
    OccupationAboveCutoff { occupation: Vec<usize>, n_max: usize },
    #[error("encoding mismatch: {0}")]
    EncodingMismatch(String),
    #[error(transparent)]
    State(#[from] QStateError),
}

pub type Result<T> = std::result::Result<T, PhotonicsError>;

fn cplx(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

fn check_unit(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(PhotonicsError::OutOfRange { name, value })
    }
}

/// Two-mode linear-optical unitary acting on single-photon amplitudes
/// `(α_i, α_j) → U (α_i, α_j)`.
pub type ModeUnitary = [[Complex64; 2]; 2];

/// Splitter with transmittance `t`: `a_i† → √t a_i† + √(1-t) a_j†`,
/// `a_j† → √t a_j† − √(1-t) a_i†`.
pub fn beamsplitter_unitary(t: f64) -> ModeUnitary {
    let (st, sr) = (t.sqrt(), (1.0 - t).sqrt());
    [[cplx(st), cplx(-sr)], [cplx(sr), cplx(st)]]
}

/// Polarization rotation that routes the linear polarization at Bloch angle
/// `theta` (in the Z–X plane) into the H mode and its orthogonal into V.
pub fn polarization_rotation(theta: f64) -> ModeUnitary {
    let (s, c) = (theta / 2.0).sin_cos();
    [[cplx(c), cplx(s)], [cplx(-s), cplx(c)]]
}

/// Independent phases on the two modes.
pub fn phase_unitary(phase_i: f64, phase_j: f64) -> ModeUnitary {
    [
        [Complex64::from_polar(1.0, phase_i), ZERO],
        [ZERO, Complex64::from_polar(1.0, phase_j)],
    ]
}

/// Dense pure state over `n_modes` modes truncated at `n_max` photons each.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeState {
    n_modes: usize,
    n_max: usize,
    amps: Vec<Complex64>,
}

impl ModeState {
    pub fn vacuum(n_modes: usize, n_max: usize) -> Result<Self> {
        let len = (n_max + 1)
            .checked_pow(n_modes as u32)
            .filter(|&l| l <= MAX_AMPLITUDES)
            .ok_or(PhotonicsError::TooLarge(usize::MAX))?;
        let mut amps = vec![ZERO; len];
        amps[0] = cplx(1.0);
        Ok(Self { n_modes, n_max, amps })
    }

    /// Superposition `Σ c |n⟩` of the listed occupation tuples (not normalized).
    pub fn from_terms(n_modes: usize, n_max: usize, terms: &[(Vec<usize>, Complex64)]) -> Result<Self> {
        let mut s = Self::vacuum(n_modes, n_max)?;
        s.amps[0] = ZERO;
        for (occ, amp) in terms {
            let idx = s.index_of(occ)?;
            s.amps[idx] += amp;
        }
        Ok(s)
    }

    pub fn fock(n_modes: usize, n_max: usize, occupation: &[usize]) -> Result<Self> {
        Self::from_terms(n_modes, n_max, &[(occupation.to_vec(), cplx(1.0))])
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    fn base(&self) -> usize {
        self.n_max + 1
    }

    fn index_of(&self, occ: &[usize]) -> Result<usize> {
        if occ.len() != self.n_modes {
            return Err(PhotonicsError::EncodingMismatch(format!(
                "occupation of length {} for {} modes",
                occ.len(),
                self.n_modes
            )));
        }
        if occ.iter().any(|&n| n > self.n_max) {
            return Err(PhotonicsError::OccupationAboveCutoff {
                occupation: occ.to_vec(),
                n_max: self.n_max,
            });
        }
        Ok(occ.iter().fold(0, |acc, &n| acc * self.base() + n))
    }

    /// Occupation tuple of a dense index.
    pub fn occupation(&self, mut index: usize) -> Vec<usize> {
        let mut occ = vec![0; self.n_modes];
        for slot in occ.iter_mut().rev() {
            *slot = index % self.base();
            index /= self.base();
        }
        occ
    }

    fn stride(&self, mode: usize) -> usize {
        self.base().pow((self.n_modes - 1 - mode) as u32)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode < self.n_modes {
            Ok(())
        } else {
            Err(PhotonicsError::InvalidMode {
                mode,
                n_modes: self.n_modes,
            })
        }
    }

    pub fn amplitude(&self, occupation: &[usize]) -> Complex64 {
        self.index_of(occupation).map(|i| self.amps[i]).unwrap_or(ZERO)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm_sqr().sqrt();
        let mut out = self.clone();
        if n > 0.0 {
            out.amps.iter_mut().for_each(|a| *a /= n);
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.amps.iter_mut().for_each(|a| *a *= factor);
        out
    }

    /// `Σ ⟨other|self⟩` over the shared basis.
    pub fn inner(&self, other: &ModeState) -> Complex64 {
        other
            .amps
            .iter()
            .zip(&self.amps)
            .map(|(o, s)| o.conj() * s)
            .sum()
    }

    /// Same state in a basis with a different cutoff. Components above a
    /// smaller cutoff must carry no weight.
    pub fn with_cutoff(&self, n_max: usize) -> Result<Self> {
        let mut out = Self::vacuum(self.n_modes, n_max)?;
        out.amps[0] = ZERO;
        let mut dropped = 0.0;
        for (idx, amp) in self.amps.iter().enumerate() {
            if *amp == ZERO {
                continue;
            }
            let occ = self.occupation(idx);
            match out.index_of(&occ) {
                Ok(j) => out.amps[j] = *amp,
                Err(_) => dropped += amp.norm_sqr(),
            }
        }
        if dropped > OVERFLOW_TOL * self.norm_sqr().max(f64::MIN_POSITIVE) {
            return Err(PhotonicsError::TruncationOverflow { dropped, n_max });
        }
        Ok(out)
    }

    /// Tensor product with a Fock state on freshly appended modes.
    pub fn append_fock(&self, occupation: &[usize]) -> Result<Self> {
        let n_modes = self.n_modes + occupation.len();
        let mut out = Self::vacuum(n_modes, self.n_max)?;
        out.amps[0] = ZERO;
        let tail = occupation.iter().fold(0, |acc, &n| acc * self.base() + n);
        if occupation.iter().any(|&n| n > self.n_max) {
            return Err(PhotonicsError::OccupationAboveCutoff {
                occupation: occupation.to_vec(),
                n_max: self.n_max,
            });
        }
        let shift = self.base().pow(occupation.len() as u32);
        for (idx, amp) in self.amps.iter().enumerate() {
            out.amps[idx * shift + tail] = *amp;
        }
        Ok(out)
    }

    /// Tensor product `self ⊗ other` (modes of `other` appended).
    pub fn tensor(&self, other: &ModeState) -> Result<Self> {
        let n_max = self.n_max.max(other.n_max);
        let left = self.with_cutoff(n_max)?;
        let right = other.with_cutoff(n_max)?;
        let mut out = Self::vacuum(self.n_modes + other.n_modes, n_max)?;
        out.amps[0] = ZERO;
        let shift = right.amps.len();
        for (i, a) in left.amps.iter().enumerate() {
            if *a == ZERO {
                continue;
            }
            for (j, b) in right.amps.iter().enumerate() {
                out.amps[i * shift + j] = a * b;
            }
        }
        Ok(out)
    }

    /// Applies a two-mode linear-optical unitary to modes `i` and `j`.
    pub fn apply_mode_unitary(&self, i: usize, j: usize, u: &ModeUnitary) -> Result<Self> {
        self.check_mode(i)?;
        self.check_mode(j)?;
        if i == j {
            return Err(PhotonicsError::SameMode(i));
        }
        let (si, sj) = (self.stride(i), self.stride(j));
        let n_max = self.n_max;
        // Expansion coefficients per input pair (ni, nj) and output count k in mode i.
        let mut table: BTreeMap<(usize, usize), Vec<Complex64>> = BTreeMap::new();
        for ni in 0..=n_max {
            for nj in 0..=n_max {
                let total = ni + nj;
                let mut out = vec![ZERO; total + 1];
                let norm_in = (factorial(ni) * factorial(nj)).sqrt();
                for k in 0..=ni {
                    let ck = binomial(ni, k) * 1.0;
                    let a = u[0][0].powu(k as u32) * u[1][0].powu((ni - k) as u32) * ck;
                    for l in 0..=nj {
                        let cl = binomial(nj, l);
                        let b = u[0][1].powu(l as u32) * u[1][1].powu((nj - l) as u32) * cl;
                        let m = k + l;
                        let norm_out = (factorial(m) * factorial(total - m)).sqrt();
                        out[m] += a * b * (norm_out / norm_in);
                    }
                }
                table.insert((ni, nj), out);
            }
        }

        let mut out = vec![ZERO; self.amps.len()];
        let mut dropped = 0.0;
        for (idx, amp) in self.amps.iter().enumerate() {
            if *amp == ZERO {
                continue;
            }
            let ni = (idx / si) % self.base();
            let nj = (idx / sj) % self.base();
            let rest = idx - ni * si - nj * sj;
            let coeffs = &table[&(ni, nj)];
            for (m, cf) in coeffs.iter().enumerate() {
                if *cf == ZERO {
                    continue;
                }
                let mj = ni + nj - m;
                let contribution = amp * cf;
                if m > n_max || mj > n_max {
                    dropped += contribution.norm_sqr();
                    continue;
                }
                out[rest + m * si + mj * sj] += contribution;
            }
        }
        let reference = self.norm_sqr().max(f64::MIN_POSITIVE);
        if dropped > OVERFLOW_TOL * reference {
            return Err(PhotonicsError::TruncationOverflow { dropped, n_max });
        }
        Ok(Self {
            n_modes: self.n_modes,
            n_max,
            amps: out,
        })
    }

    /// Beamsplitter of transmittance `t` between modes `i` and `j`.
    pub fn beamsplitter(&self, i: usize, j: usize, t: f64) -> Result<Self> {
        check_unit("T", t)?;
        self.apply_mode_unitary(i, j, &beamsplitter_unitary(t))
    }

    /// Dense density matrix `|ψ⟩⟨ψ|` (unnormalized if the state is).
    pub fn to_matrix(&self) -> Result<CMatrix> {
        if self.amps.len() > MAX_DIM {
            return Err(PhotonicsError::TooLarge(self.amps.len()));
        }
        let v = CVector::from_column_slice(&self.amps);
        Ok(&v * v.adjoint())
    }
}

/// Convex mixture of unnormalized pure branches; the trace is the sum of the
/// branch norms.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeEnsemble {
    n_modes: usize,
    n_max: usize,
    branches: Vec<ModeState>,
}

impl From<ModeState> for ModeEnsemble {
    fn from(s: ModeState) -> Self {
        Self {
            n_modes: s.n_modes,
            n_max: s.n_max,
            branches: vec![s],
        }
    }
}

impl ModeEnsemble {
    pub fn new(n_modes: usize, n_max: usize, branches: Vec<ModeState>) -> Result<Self> {
        if branches.iter().any(|b| b.n_modes != n_modes || b.n_max != n_max) {
            return Err(PhotonicsError::EncodingMismatch("inconsistent branch shapes".into()));
        }
        Ok(Self {
            n_modes,
            n_max,
            branches,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn branches(&self) -> &[ModeState] {
        &self.branches
    }

    pub fn trace(&self) -> f64 {
        self.branches.iter().map(ModeState::norm_sqr).sum()
    }

    pub fn normalized(&self) -> Self {
        let t = self.trace();
        if t <= 0.0 {
            return self.clone();
        }
        self.scaled(1.0 / t)
    }

    /// Multiplies the trace by `weight`.
    pub fn scaled(&self, weight: f64) -> Self {
        let f = weight.sqrt();
        Self {
            n_modes: self.n_modes,
            n_max: self.n_max,
            branches: self.branches.iter().map(|b| b.scaled(f)).collect(),
        }
    }

    /// Union of the branches of two ensembles over the same modes.
    pub fn merged(mut self, other: ModeEnsemble) -> Result<Self> {
        if other.n_modes != self.n_modes || other.n_max != self.n_max {
            return Err(PhotonicsError::EncodingMismatch("merging different mode sets".into()));
        }
        self.branches.extend(other.branches);
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(&ModeState) -> Result<ModeState>) -> Result<Self> {
        let branches = self.branches.iter().map(f).collect::<Result<Vec<_>>>()?;
        let (n_modes, n_max) = branches
            .first()
            .map(|b| (b.n_modes, b.n_max))
            .unwrap_or((self.n_modes, self.n_max));
        Ok(Self {
            n_modes,
            n_max,
            branches,
        })
    }

    pub fn apply_mode_unitary(&self, i: usize, j: usize, u: &ModeUnitary) -> Result<Self> {
        self.map(|b| b.apply_mode_unitary(i, j, u))
    }

    pub fn with_cutoff(&self, n_max: usize) -> Result<Self> {
        let mut out = self.map(|b| b.with_cutoff(n_max))?;
        out.n_max = n_max;
        Ok(out)
    }

    pub fn beamsplitter(&self, i: usize, j: usize, t: f64) -> Result<Self> {
        self.map(|b| b.beamsplitter(i, j, t))
    }

    /// Photon loss on `mode`: each photon survives with probability `eta_t`.
    pub fn loss(&self, mode: usize, eta_t: f64) -> Result<Self> {
        check_unit("eta_t", eta_t)?;
        if mode >= self.n_modes {
            return Err(PhotonicsError::InvalidMode {
                mode,
                n_modes: self.n_modes,
            });
        }
        if eta_t == 1.0 {
            return Ok(self.clone());
        }
        let mut branches = Vec::new();
        for b in &self.branches {
            let stride = b.stride(mode);
            for lost in 0..=self.n_max {
                let mut amps = vec![ZERO; b.amps.len()];
                let mut any = false;
                for (idx, amp) in b.amps.iter().enumerate() {
                    if *amp == ZERO {
                        continue;
                    }
                    let n = (idx / stride) % b.base();
                    if n < lost {
                        continue;
                    }
                    let k = binomial(n, lost)
                        * eta_t.powi((n - lost) as i32)
                        * (1.0 - eta_t).powi(lost as i32);
                    if k == 0.0 {
                        continue;
                    }
                    amps[idx - lost * stride] += amp * k.sqrt();
                    any = true;
                }
                if any {
                    branches.push(ModeState {
                        n_modes: b.n_modes,
                        n_max: b.n_max,
                        amps,
                    });
                }
            }
        }
        Ok(Self {
            n_modes: self.n_modes,
            n_max: self.n_max,
            branches,
        })
    }

    /// Expectation of a weight that depends only on the occupations of
    /// `modes` (a Fock-diagonal effect).
    pub fn diagonal_expectation(&self, modes: &[usize], weight: impl Fn(&[usize]) -> f64) -> f64 {
        let mut occ = vec![0usize; modes.len()];
        let mut total = 0.0;
        for b in &self.branches {
            let strides: Vec<usize> = modes.iter().map(|&m| b.stride(m)).collect();
            for (idx, amp) in b.amps.iter().enumerate() {
                let p = amp.norm_sqr();
                if p == 0.0 {
                    continue;
                }
                for (slot, s) in occ.iter_mut().zip(&strides) {
                    *slot = (idx / s) % b.base();
                }
                total += p * weight(&occ);
            }
        }
        total
    }

    /// Applies a Fock-diagonal effect on `modes` and discards those modes.
    /// The result is unnormalized: its trace is the effect's probability.
    pub fn measure_modes(&self, modes: &[usize], weight: impl Fn(&[usize]) -> f64) -> Result<Self> {
        for &m in modes {
            if m >= self.n_modes {
                return Err(PhotonicsError::InvalidMode {
                    mode: m,
                    n_modes: self.n_modes,
                });
            }
        }
        let kept: Vec<usize> = (0..self.n_modes).filter(|m| !modes.contains(m)).collect();
        let base = self.n_max + 1;
        let kept_len = base.pow(kept.len() as u32);
        let mut branches = Vec::new();
        let mut occ = vec![0usize; modes.len()];
        for b in &self.branches {
            let strides: Vec<usize> = modes.iter().map(|&m| b.stride(m)).collect();
            let kept_strides: Vec<usize> = kept.iter().map(|&m| b.stride(m)).collect();
            let mut groups: BTreeMap<usize, (f64, Vec<Complex64>)> = BTreeMap::new();
            for (idx, amp) in b.amps.iter().enumerate() {
                if *amp == ZERO {
                    continue;
                }
                let mut key = 0;
                for (slot, s) in occ.iter_mut().zip(&strides) {
                    *slot = (idx / s) % base;
                    key = key * base + *slot;
                }
                let entry = groups.entry(key).or_insert_with(|| (weight(&occ), vec![ZERO; kept_len]));
                if entry.0 == 0.0 {
                    continue;
                }
                let kept_idx = kept_strides
                    .iter()
                    .fold(0, |acc, s| acc * base + (idx / s) % base);
                entry.1[kept_idx] = *amp;
            }
            for (_, (w, amps)) in groups {
                if w == 0.0 {
                    continue;
                }
                let f = w.sqrt();
                branches.push(ModeState {
                    n_modes: kept.len(),
                    n_max: self.n_max,
                    amps: amps.into_iter().map(|a| a * f).collect(),
                });
            }
        }
        Ok(Self {
            n_modes: kept.len(),
            n_max: self.n_max,
            branches,
        })
    }

    /// Dense (unnormalized) density matrix; limited to [`MAX_DIM`].
    pub fn to_matrix(&self) -> Result<CMatrix> {
        let dim = (self.n_max + 1).pow(self.n_modes as u32);
        if dim > MAX_DIM {
            return Err(PhotonicsError::TooLarge(dim));
        }
        let mut m = CMatrix::zeros(dim, dim);
        for b in &self.branches {
            m += b.to_matrix()?;
        }
        Ok(m)
    }

    /// Normalized density operator.
    pub fn to_density(&self) -> Result<DensityOperator> {
        Ok(DensityOperator::from_unnormalized(self.to_matrix()?)?)
    }
}

/// Pair-generation amplitudes `(1-p) p^n`, truncated at `n_pair_max` and
/// renormalized.
pub fn spdc_pair_weights(p: f64, n_pair_max: usize) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(PhotonicsError::OutOfRange { name: "p", value: p });
    }
    let raw: Vec<f64> = (0..=n_pair_max).map(|n| (1.0 - p) * p.powi(n as i32)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Polarization-entangled SPDC source on modes `[a_H, a_V, b_H, b_V]`.
///
/// The n-pair term is `(a_H† b_V† − a_V† b_H†)^n |0⟩`, normalized, weighted by
/// `(1-p) p^n` before overall normalization. One pair is the polarization
/// singlet.
pub fn spdc_source(p: f64, n_pair_max: usize, n_max: usize) -> Result<ModeState> {
    if n_pair_max > n_max {
        return Err(PhotonicsError::OutOfRange {
            name: "n_pair_max",
            value: n_pair_max as f64,
        });
    }
    let weights = spdc_pair_weights(p, n_pair_max)?;
    let mut state = ModeState::vacuum(4, n_max)?;
    state.amps[0] = ZERO;
    for (n, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        // (a_H† b_V† − a_V† b_H†)^n = Σ_k C(n,k) (−1)^k (a_H† b_V†)^(n−k) (a_V† b_H†)^k
        let mut term = ModeState::vacuum(4, n_max)?;
        term.amps[0] = ZERO;
        for k in 0..=n {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let h = n - k;
            // (a†)^m |0⟩ = √(m!) |m⟩
            let amp = sign * binomial(n, k) * factorial(h) * factorial(k);
            let idx = term.index_of(&[h, k, k, h])?;
            term.amps[idx] += cplx(amp);
        }
        let term = term.normalized();
        for (acc, t) in state.amps.iter_mut().zip(&term.amps) {
            *acc += t * w.sqrt();
        }
    }
    Ok(state.normalized())
}

/// Channel transmission `10^(−α L / 10)` for length `l_km` and attenuation
/// `alpha_db_per_km`.
pub fn distance_to_transmission(l_km: f64, alpha_db_per_km: f64) -> f64 {
    10f64.powf(-alpha_db_per_km * l_km / 10.0)
}

/// Inverse of [`distance_to_transmission`].
pub fn transmission_to_distance(eta_t: f64, alpha_db_per_km: f64) -> f64 {
    -10.0 * eta_t.log10() / alpha_db_per_km
}

/// Photon loss as a density operator over all modes (small states only).
pub fn loss_channel(state: &ModeState, mode: usize, eta_t: f64) -> Result<DensityOperator> {
    ModeEnsemble::from(state.clone()).loss(mode, eta_t)?.to_density()
}

/// Non-photon-number-resolving detector with dark counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorModel {
    pub eta_d: f64,
    pub p_dc: f64,
}

impl DetectorModel {
    pub fn new(eta_d: f64, p_dc: f64) -> Result<Self> {
        check_unit("eta_d", eta_d)?;
        check_unit("p_dc", p_dc)?;
        Ok(Self { eta_d, p_dc })
    }

    pub fn ideal() -> Self {
        Self { eta_d: 1.0, p_dc: 0.0 }
    }

    /// Same detector behind an extra transmission `eta_t`.
    pub fn behind_loss(&self, eta_t: f64) -> Self {
        Self {
            eta_d: self.eta_d * eta_t,
            p_dc: self.p_dc,
        }
    }

    /// `P(click | n photons) = 1 − (1−p_dc)(1−η_d)^n`.
    pub fn click_probability(&self, n: usize) -> f64 {
        1.0 - (1.0 - self.p_dc) * (1.0 - self.eta_d).powi(n as i32)
    }

    pub fn outcome_probability(&self, n: usize, click: bool) -> f64 {
        let p = self.click_probability(n);
        if click {
            p
        } else {
            1.0 - p
        }
    }
}

/// Normalized conditional state after a detection outcome.
#[derive(Debug, Clone)]
pub struct DetectionBranch {
    pub probability: f64,
    pub state: ModeEnsemble,
}

#[derive(Debug, Clone)]
pub struct ThresholdOutcome {
    pub click: DetectionBranch,
    pub no_click: DetectionBranch,
}

/// Threshold detection of `mode`; the measured mode is traced out of the
/// conditional states.
pub fn threshold_detect(state: &ModeEnsemble, mode: usize, det: &DetectorModel) -> Result<ThresholdOutcome> {
    let branch = |click: bool| -> Result<DetectionBranch> {
        let s = state.measure_modes(&[mode], |occ| det.outcome_probability(occ[0], click))?;
        Ok(DetectionBranch {
            probability: s.trace(),
            state: s.normalized(),
        })
    };
    Ok(ThresholdOutcome {
        click: branch(true)?,
        no_click: branch(false)?,
    })
}

/// Which of the four detectors fired, ordered `[1H, 1V, 2H, 2V]`, where port 1
/// is the output of the first input group and port 2 of the second.
pub type ClickPattern = [bool; 4];

/// Bell state announced by a linear-optics BSM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BellOutcome {
    /// Orthogonal clicks in the same port.
    PsiPlus,
    /// Orthogonal clicks in different ports.
    PsiMinus,
}

/// Classifies a click pattern; only exactly one H and one V click succeed.
pub fn classify_pattern(p: &ClickPattern) -> Option<BellOutcome> {
    if p.iter().filter(|&&c| c).count() != 2 {
        return None;
    }
    match p {
        [true, true, false, false] | [false, false, true, true] => Some(BellOutcome::PsiPlus),
        [true, false, false, true] | [false, true, true, false] => Some(BellOutcome::PsiMinus),
        _ => None,
    }
}

pub fn all_patterns() -> impl Iterator<Item = ClickPattern> {
    (0..16u8).map(|bits| [bits & 8 != 0, bits & 4 != 0, bits & 2 != 0, bits & 1 != 0])
}

/// Outcome of a heralding measurement.
#[derive(Debug, Clone)]
pub struct HeraldRecord {
    pub success: bool,
    pub probability: f64,
    pub conditional_state: Option<DensityOperator>,
}

#[derive(Debug, Clone)]
pub struct BsmPatternOutcome {
    pub pattern: ClickPattern,
    pub bell_state: Option<BellOutcome>,
    pub probability: f64,
    /// Unnormalized state of the remaining modes (successful patterns only).
    pub conditional: Option<ModeEnsemble>,
}

#[derive(Debug, Clone)]
pub struct BsmResult {
    pub outcomes: Vec<BsmPatternOutcome>,
    /// Modes of `conditional` states, as indices into the input state.
    pub remaining_modes: Vec<usize>,
}

impl BsmResult {
    pub fn success_probability(&self) -> f64 {
        self.outcomes
            .iter()
            .filter(|o| o.bell_state.is_some())
            .map(|o| o.probability)
            .sum()
    }

    pub fn total_probability(&self) -> f64 {
        self.outcomes.iter().map(|o| o.probability).sum()
    }

    /// Herald summary; the conditional state is formed only when the
    /// remaining modes fit a dense density matrix.
    pub fn herald_record(&self) -> Result<HeraldRecord> {
        let probability = self.success_probability();
        let mut merged: Option<ModeEnsemble> = None;
        for o in &self.outcomes {
            if let Some(c) = &o.conditional {
                merged = Some(match merged {
                    None => c.clone(),
                    Some(m) => m.merged(c.clone())?,
                });
            }
        }
        let conditional_state = match merged {
            Some(m) if probability > 0.0 && m.to_matrix().is_ok() => Some(m.to_density()?),
            _ => None,
        };
        Ok(HeraldRecord {
            success: probability > 0.0,
            probability,
            conditional_state,
        })
    }
}

/// Linear-optics Bell-state measurement: a balanced splitter between the two
/// dual-rail groups for each polarization, then four threshold detectors.
pub fn bell_state_measurement(
    state: &ModeEnsemble,
    group_a: (usize, usize),
    group_b: (usize, usize),
    det: &DetectorModel,
) -> Result<BsmResult> {
    let modes = [group_a.0, group_a.1, group_b.0, group_b.1];
    for (k, &m) in modes.iter().enumerate() {
        if m >= state.n_modes() {
            return Err(PhotonicsError::InvalidMode {
                mode: m,
                n_modes: state.n_modes(),
            });
        }
        if modes[..k].contains(&m) {
            return Err(PhotonicsError::EncodingMismatch(format!(
                "mode {m} appears twice in the BSM groups"
            )));
        }
    }
    let mixed = state
        .beamsplitter(group_a.0, group_b.0, 0.5)?
        .beamsplitter(group_a.1, group_b.1, 0.5)?;
    let remaining_modes: Vec<usize> = (0..state.n_modes()).filter(|m| !modes.contains(m)).collect();
    let mut outcomes = Vec::with_capacity(16);
    for pattern in all_patterns() {
        let weight = |occ: &[usize]| -> f64 {
            occ.iter()
                .zip(pattern.iter())
                .map(|(&n, &click)| det.outcome_probability(n, click))
                .product()
        };
        let bell_state = classify_pattern(&pattern);
        let probability = mixed.diagonal_expectation(&modes, weight);
        let conditional = match bell_state {
            Some(_) if probability > 0.0 => Some(mixed.measure_modes(&modes, weight)?),
            _ => None,
        };
        outcomes.push(BsmPatternOutcome {
            pattern,
            bell_state,
            probability,
            conditional,
        });
    }
    Ok(BsmResult {
        outcomes,
        remaining_modes,
    })
}

/// Photon supply for the amplifier's two ancilla modes (H and V).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ancilla {
    /// Exactly one H and one V photon.
    Ideal,
    /// Each photon is the signal arm of a two-mode SPDC source with pair
    /// probability `p`, heralded by a trigger detector.
    HeraldedSpdc {
        p: f64,
        n_pair_max: usize,
        trigger: DetectorModel,
    },
}

impl Ancilla {
    /// Unnormalized mixture `(photons, weight)` of one ancilla mode, including
    /// the trigger-click probability.
    pub fn photon_distribution(&self) -> Result<Vec<(usize, f64)>> {
        match self {
            Ancilla::Ideal => Ok(vec![(1, 1.0)]),
            Ancilla::HeraldedSpdc { p, n_pair_max, trigger } => {
                let weights = spdc_pair_weights(*p, *n_pair_max)?;
                Ok(weights
                    .iter()
                    .enumerate()
                    .map(|(n, w)| (n, w * trigger.click_probability(n)))
                    .filter(|(_, w)| *w > 0.0)
                    .collect())
            }
        }
    }

    fn max_photons(&self) -> usize {
        match self {
            Ancilla::Ideal => 1,
            Ancilla::HeraldedSpdc { n_pair_max, .. } => *n_pair_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplifierConfig {
    pub transmittance: f64,
    pub ancilla: Ancilla,
    pub detector: DetectorModel,
}

/// Polarization frame correction applied to the output after each herald
/// pattern, making the output `α|0⟩ + Gβ|ψ⟩` with a pattern-independent phase.
fn amplifier_correction(pattern: &ClickPattern) -> ModeUnitary {
    use std::f64::consts::PI;
    // Port 1 carries the input, port 2 the reflected ancilla light.
    let h_port1 = pattern[0];
    let v_port1 = pattern[1];
    match (h_port1, v_port1) {
        (true, true) => phase_unitary(PI, PI),
        (false, false) => phase_unitary(0.0, 0.0),
        (true, false) => phase_unitary(PI, 0.0),
        (false, true) => phase_unitary(0.0, PI),
    }
}

/// Heralded amplification of the dual-rail mode pair `input` inside a larger
/// ensemble. Two ancilla modes are appended and split on transmittance-T
/// splitters; the reflected light and the input go through a BSM. Returns the
/// frame-corrected conditional ensemble for each successful click pattern; the
/// input modes are replaced by the amplifier output (appended at the end).
pub fn amplify_modes(
    state: &ModeEnsemble,
    input: (usize, usize),
    config: &AmplifierConfig,
) -> Result<Vec<(ClickPattern, ModeEnsemble)>> {
    let t = config.transmittance;
    if !(t > 0.0 && t < 1.0) {
        return Err(PhotonicsError::OutOfRange { name: "T", value: t });
    }
    let n = state.n_modes();
    let (r_h, r_v, o_h, o_v) = (n, n + 1, n + 2, n + 3);
    let ancilla = config.ancilla.photon_distribution()?;
    // Photons per polarization never exceed input + ancilla content.
    let n_max = state.n_max() + config.ancilla.max_photons();
    let base = state.map(|b| b.with_cutoff(n_max))?;

    let mut per_pattern: BTreeMap<usize, (ClickPattern, Option<ModeEnsemble>)> = BTreeMap::new();
    for &(nh, wh) in &ancilla {
        for &(nv, wv) in &ancilla {
            let w = wh * wv;
            let prepared = base.map(|b| b.append_fock(&[0, 0, nh, nv]))?.scaled(w);
            let split = prepared
                .beamsplitter(o_h, r_h, t)?
                .beamsplitter(o_v, r_v, t)?;
            let bsm = bell_state_measurement(&split, input, (r_h, r_v), &config.detector)?;
            for (k, o) in bsm.outcomes.into_iter().enumerate() {
                let Some(cond) = o.conditional else { continue };
                // Remaining modes keep their order, so the output pair is last.
                let out = cond.n_modes();
                let corrected = cond.apply_mode_unitary(out - 2, out - 1, &amplifier_correction(&o.pattern))?;
                let entry = per_pattern.entry(k).or_insert((o.pattern, None));
                entry.1 = Some(match entry.1.take() {
                    None => corrected,
                    Some(acc) => acc.merged(corrected)?,
                });
            }
        }
    }
    Ok(per_pattern
        .into_values()
        .filter_map(|(p, e)| e.map(|e| (p, e)))
        .collect())
}

#[derive(Debug, Clone)]
pub struct AmplifierResult {
    pub herald: HeraldRecord,
    /// Ratio of `|c₁|/|c₀|` between output and input, estimated as the
    /// one-photon population over the vacuum/one-photon coherence. Incoherent
    /// vacuum from false heralds does not enter. `None` without coherence.
    pub gain: Option<f64>,
}

/// One-photon population and the norm of the coherence between the vacuum
/// and the one-photon sector.
fn one_photon_ratio(rho: &CMatrix, n_max: usize) -> Option<f64> {
    let base = n_max + 1;
    let mut p1 = 0.0;
    let mut coherence = 0.0;
    for i in 0..rho.nrows() {
        if i / base + i % base == 1 {
            p1 += rho[(i, i)].re;
            coherence += rho[(i, 0)].norm_sqr();
        }
    }
    let coherence = coherence.sqrt();
    (coherence > 0.0).then(|| p1 / coherence)
}

/// Heralded noiseless amplifier acting on a dual-rail input state given over
/// the two-mode Fock basis `(H, V)` with cutoff `√dim − 1`.
pub fn qubit_amplifier(input: &DensityOperator, config: &AmplifierConfig) -> Result<AmplifierResult> {
    let dim = input.dim();
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim || side < 2 {
        return Err(PhotonicsError::EncodingMismatch(format!(
            "input of dimension {dim} is not a two-mode Fock space"
        )));
    }
    let in_cutoff = side - 1;
    // Decompose the input into weighted pure branches.
    let eig = input.matrix().clone().symmetric_eigen();
    let mut branches = Vec::new();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= 1e-14 {
            continue;
        }
        let col = eig.eigenvectors.column(k);
        let amps: Vec<Complex64> = col.iter().map(|a| a * lambda.sqrt()).collect();
        let mut s = ModeState::vacuum(2, in_cutoff)?;
        s.amps = amps;
        branches.push(s);
    }
    let ensemble = ModeEnsemble::new(2, in_cutoff, branches)?;
    let heralds = amplify_modes(&ensemble, (0, 1), config)?;

    let mut merged: Option<ModeEnsemble> = None;
    for (_, e) in heralds {
        merged = Some(match merged {
            None => e,
            Some(m) => m.merged(e)?,
        });
    }
    let Some(out) = merged else {
        return Ok(AmplifierResult {
            herald: HeraldRecord {
                success: false,
                probability: 0.0,
                conditional_state: None,
            },
            gain: None,
        });
    };
    let probability = out.trace();
    let out_n_max = out.n_max();
    let rho_out = out.to_matrix()?;
    let gain = one_photon_ratio(&rho_out, out_n_max)
        .zip(one_photon_ratio(input.matrix(), in_cutoff))
        .map(|(o, i)| o / i);
    let conditional_state = if probability > 0.0 {
        Some(DensityOperator::from_unnormalized(rho_out)?)
    } else {
        None
    };
    Ok(AmplifierResult {
        herald: HeraldRecord {
            success: probability > 0.0,
            probability,
            conditional_state,
        },
        gain,
    })
}

/// Leading-order herald probability `η_d² (1−T) p²` of the amplifier fed by
/// heralded SPDC ancillas.
pub fn amplifier_success_probability(eta_d: f64, t: f64, p: f64) -> f64 {
    eta_d * eta_d * (1.0 - t) * p * p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn spdc_vacuum_at_zero_pair_probability() {
        let s = spdc_source(0.0, 2, 3).unwrap();
        assert!(close(s.amplitude(&[0, 0, 0, 0]).re, 1.0, 1e-15));
        assert!(close(s.norm_sqr(), 1.0, 1e-15));
    }

    #[test]
    fn spdc_geometric_weights() {
        let s = spdc_source(0.01, 2, 3).unwrap();
        let weight = |pairs: usize| -> f64 {
            s.amplitudes()
                .iter()
                .enumerate()
                .filter(|(i, _)| s.occupation(*i).iter().sum::<usize>() == 2 * pairs)
                .map(|(_, a)| a.norm_sqr())
                .sum()
        };
        // (1−p)p^n / Σ_{n≤2} (1−p)p^n with Σ = 1 − p³.
        let z = 1.0 - 0.01f64.powi(3);
        assert!(close(weight(0), 0.99 / z, 1e-12));
        assert!(close(weight(1), 0.0099 / z, 1e-12));
        assert!(close(weight(2), 0.000099 / z, 1e-12));
        assert!(spdc_source(1.0, 2, 3).is_err());
        assert!(spdc_source(-0.1, 2, 3).is_err());
    }

    #[test]
    fn spdc_one_pair_is_polarization_singlet() {
        let s = spdc_source(0.2, 1, 3).unwrap();
        let one = s.amplitude(&[1, 0, 0, 1]);
        let other = s.amplitude(&[0, 1, 1, 0]);
        assert!(close((one + other).norm(), 0.0, 1e-15));
        assert!(close(one.norm_sqr() + other.norm_sqr(), 0.2 * 0.8 / (0.8 + 0.16), 1e-12));
    }

    #[test]
    fn beamsplitter_identity_and_balanced() {
        let s = ModeState::fock(2, 3, &[1, 0]).unwrap();
        assert_eq!(s.beamsplitter(0, 1, 1.0).unwrap(), s);
        let b = s.beamsplitter(0, 1, 0.5).unwrap();
        assert!(close(b.amplitude(&[1, 0]).norm_sqr(), 0.5, 1e-15));
        assert!(close(b.amplitude(&[0, 1]).norm_sqr(), 0.5, 1e-15));
    }

    #[test]
    fn hong_ou_mandel_dip() {
        let s = ModeState::fock(2, 3, &[1, 1]).unwrap();
        let b = s.beamsplitter(0, 1, 0.5).unwrap();
        assert!(b.amplitude(&[1, 1]).norm() < 1e-15);
        assert!(close(b.amplitude(&[2, 0]).norm_sqr(), 0.5, 1e-15));
        assert!(close(b.amplitude(&[0, 2]).norm_sqr(), 0.5, 1e-15));
    }

    #[test]
    fn beamsplitter_reports_truncation_overflow() {
        let s = ModeState::fock(2, 2, &[2, 2]).unwrap();
        assert!(matches!(
            s.beamsplitter(0, 1, 0.5),
            Err(PhotonicsError::TruncationOverflow { .. })
        ));
        assert!(matches!(s.beamsplitter(0, 0, 0.5), Err(PhotonicsError::SameMode(0))));
    }

    #[test]
    fn loss_examples() {
        let one = ModeState::fock(1, 3, &[1]).unwrap();
        let rho = loss_channel(&one, 0, 0.3).unwrap();
        assert!(close(rho.matrix()[(1, 1)].re, 0.3, 1e-15));
        assert!(close(rho.matrix()[(0, 0)].re, 0.7, 1e-15));

        let two = ModeState::fock(1, 3, &[2]).unwrap();
        let rho = loss_channel(&two, 0, 0.5).unwrap();
        for (n, p) in [(2usize, 0.25), (1, 0.5), (0, 0.25)] {
            assert!(close(rho.matrix()[(n, n)].re, p, 1e-15));
        }

        let unchanged = loss_channel(&two, 0, 1.0).unwrap();
        assert!(close(unchanged.matrix()[(2, 2)].re, 1.0, 1e-15));
    }

    #[test]
    fn distance_to_transmission_examples() {
        assert_eq!(distance_to_transmission(0.0, 0.2), 1.0);
        assert!(close(distance_to_transmission(50.0, 0.2), 0.1, 1e-15));
        let l = transmission_to_distance(0.8284, 0.2);
        assert!(close(l, 4.09, 0.01), "{l}");
    }

    #[test]
    fn threshold_detector_examples() {
        let vac = ModeEnsemble::from(ModeState::vacuum(1, 3).unwrap());
        let ideal = DetectorModel::ideal();
        let o = threshold_detect(&vac, 0, &ideal).unwrap();
        assert!(close(o.no_click.probability, 1.0, 1e-15));

        let one = ModeEnsemble::from(ModeState::fock(1, 3, &[1]).unwrap());
        let o = threshold_detect(&one, 0, &DetectorModel::new(0.75, 0.0).unwrap()).unwrap();
        assert!(close(o.click.probability, 0.75, 1e-15));
        let o = threshold_detect(&one, 0, &DetectorModel::new(0.75, 0.01).unwrap()).unwrap();
        assert!(close(o.click.probability, 0.7525, 1e-15));
        assert!(DetectorModel::new(1.2, 0.0).is_err());
    }

    fn two_singlets() -> ModeEnsemble {
        // Modes: a(H,V) c1(H,V) c2(H,V) b(H,V); BSM on c1, c2.
        let pair = spdc_source(0.5, 1, 1).unwrap();
        let one_pair = pair
            .amplitudes()
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if pair.occupation(i).iter().sum::<usize>() == 2 {
                    (pair.occupation(i), *a)
                } else {
                    (pair.occupation(i), ZERO)
                }
            })
            .collect::<Vec<_>>();
        let singlet = ModeState::from_terms(4, 2, &one_pair).unwrap().normalized();
        ModeEnsemble::from(singlet.tensor(&singlet).unwrap())
    }

    #[test]
    fn bsm_identifies_half_of_random_bell_inputs() {
        let r = bell_state_measurement(&two_singlets(), (2, 3), (4, 5), &DetectorModel::ideal()).unwrap();
        assert!(close(r.success_probability(), 0.5, 1e-12));
        assert!(close(r.total_probability(), 1.0, 1e-12));
    }

    #[test]
    fn bsm_singlet_and_triplet_inputs() {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        // Modes: A(H,V), B(H,V).
        let psi_minus = ModeState::from_terms(4, 2, &[(vec![1, 0, 0, 1], cplx(r)), (vec![0, 1, 1, 0], cplx(-r))]).unwrap();
        let phi_plus = ModeState::from_terms(4, 2, &[(vec![1, 0, 1, 0], cplx(r)), (vec![0, 1, 0, 1], cplx(r))]).unwrap();
        let det = DetectorModel::ideal();
        let res = bell_state_measurement(&psi_minus.into(), (0, 1), (2, 3), &det).unwrap();
        assert!(close(res.success_probability(), 1.0, 1e-12));
        assert!(res
            .outcomes
            .iter()
            .filter(|o| o.probability > 1e-12)
            .all(|o| o.bell_state == Some(BellOutcome::PsiMinus)));
        let res = bell_state_measurement(&phi_plus.into(), (0, 1), (2, 3), &det).unwrap();
        assert!(close(res.success_probability(), 0.0, 1e-12));
    }

    #[test]
    fn bsm_needs_two_clicks() {
        let det = DetectorModel::ideal();
        let vac = ModeEnsemble::from(ModeState::vacuum(4, 2).unwrap());
        assert_eq!(bell_state_measurement(&vac, (0, 1), (2, 3), &det).unwrap().success_probability(), 0.0);
        let one = ModeEnsemble::from(ModeState::fock(4, 2, &[1, 0, 0, 0]).unwrap());
        assert_eq!(bell_state_measurement(&one, (0, 1), (2, 3), &det).unwrap().success_probability(), 0.0);
        assert!(bell_state_measurement(&vac, (0, 1), (1, 3), &det).is_err());
    }

    fn superposition_input(alpha: f64, beta_h: Complex64, beta_v: Complex64) -> DensityOperator {
        // Two-mode basis with cutoff 1: |00⟩, |01⟩, |10⟩, |11⟩ (H digit first).
        let v = CVector::from_vec(vec![cplx(alpha), beta_v, beta_h, ZERO]);
        DensityOperator::from_pure(&v).unwrap()
    }

    #[test]
    fn amplifier_gain_and_fidelity_with_ideal_ancillas() {
        let beta_h = Complex64::new(0.4, 0.2);
        let beta_v = Complex64::new(-0.3, 0.5);
        let alpha = (1.0 - beta_h.norm_sqr() - beta_v.norm_sqr()).sqrt();
        let input = superposition_input(alpha, beta_h, beta_v);
        let t = 1.0 - 1e-7;
        let cfg = AmplifierConfig {
            transmittance: t,
            ancilla: Ancilla::Ideal,
            detector: DetectorModel::ideal(),
        };
        let res = qubit_amplifier(&input, &cfg).unwrap();
        let g = res.gain.unwrap();
        assert!(close(g, (t / (1.0 - t)).sqrt(), 1e-6 * g));
        // Ideal output α|0⟩ + Gβ|ψ⟩ over the output cutoff (2 here).
        let rho = res.herald.conditional_state.unwrap();
        let side = (rho.dim() as f64).sqrt() as usize;
        let mut ideal = CVector::zeros(rho.dim());
        ideal[0] = cplx(alpha);
        ideal[side] = beta_h * g;
        ideal[1] = beta_v * g;
        assert!(close(rho.fidelity_with_pure(&ideal), 1.0, 1e-6));
    }

    #[test]
    fn amplifier_fidelity_deficit_is_three_photon_false_heralds() {
        // At moderate T the only deviation is the incoherent vacuum from
        // input + two reflected ancillas; it is O(1−T).
        let input = superposition_input(0.6, cplx(0.8), ZERO);
        for t in [0.9, 0.99] {
            let cfg = AmplifierConfig {
                transmittance: t,
                ancilla: Ancilla::Ideal,
                detector: DetectorModel::ideal(),
            };
            let res = qubit_amplifier(&input, &cfg).unwrap();
            let g = res.gain.unwrap();
            let rho = res.herald.conditional_state.unwrap();
            let side = (rho.dim() as f64).sqrt() as usize;
            let mut ideal = CVector::zeros(rho.dim());
            ideal[0] = cplx(0.6);
            ideal[side] = cplx(0.8 * g);
            let f = rho.fidelity_with_pure(&ideal);
            assert!(f < 1.0 && 1.0 - f < 2.0 * (1.0 - t), "T={t} F={f}");
        }
    }

    #[test]
    fn amplifier_single_photon_success_probability() {
        let input = superposition_input(0.0, cplx(1.0), ZERO);
        let t = 0.9;
        let cfg = AmplifierConfig {
            transmittance: t,
            ancilla: Ancilla::Ideal,
            detector: DetectorModel::ideal(),
        };
        let res = qubit_amplifier(&input, &cfg).unwrap();
        // The V click needs the reflected V ancilla. A reflected H ancilla
        // bunches with the input photon and still fires a single H detector.
        let expected = 1.0 - t;
        assert!(close(res.herald.probability, expected, 1e-12), "{}", res.herald.probability);
    }

    #[test]
    fn amplifier_rejects_bad_inputs() {
        let cfg = AmplifierConfig {
            transmittance: 0.9,
            ancilla: Ancilla::Ideal,
            detector: DetectorModel::ideal(),
        };
        let three = DensityOperator::maximally_mixed(3).unwrap();
        assert!(matches!(qubit_amplifier(&three, &cfg), Err(PhotonicsError::EncodingMismatch(_))));
        let ok = DensityOperator::maximally_mixed(4).unwrap();
        let bad_t = AmplifierConfig { transmittance: 1.0, ..cfg };
        assert!(qubit_amplifier(&ok, &bad_t).is_err());
    }

    #[test]
    fn analytic_success_probability_examples() {
        assert_eq!(amplifier_success_probability(0.9, 1.0, 0.011), 0.0);
        assert!(close(amplifier_success_probability(1.0, 0.5, 1.0), 0.5, 1e-15));
        let p = amplifier_success_probability(0.9, 0.99, 0.011);
        assert!(close(p, 9.801e-7, 1e-15), "{p}");
    }
}
