//! Bell functionals, local bounds, no-click binning, critical detection
//! efficiencies and the classical detection-loophole attack.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use num_complex::Complex64;
use thiserror::Error;

use crate::qstate::{states, CMatrix, CVector, CorrelationTable, DensityOperator, QStateError};

/// Largest deterministic-strategy count accepted by [`local_bound`].
pub const MAX_STRATEGIES: f64 = 1e7;
/// Margin above the local bound that counts as a violation.
pub const VIOLATION_MARGIN: f64 = 1e-12;
/// Bisection stops when the bracket is narrower than this.
pub const BISECTION_TOL: f64 = 1e-7;
pub const MAX_BISECTION_STEPS: usize = 60;
/// Random-free restarts of the setting optimizer.
pub const SETTING_RESTARTS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BellError {
    #[error("table shape {table:?} does not match functional shape {functional:?}")]
    ShapeMismatch {
        table: (usize, usize, usize, usize),
        functional: (usize, usize, usize, usize),
    },
    #[error("coefficient array has {got} entries, scenario needs {expected}")]
    CoefficientCount { expected: usize, got: usize },
    #[error("{0:e} deterministic strategies exceed the enumeration limit")]
    EnumerationTooLarge(f64),
    #[error("invalid no-click assignment: {0}")]
    InvalidAssignment(String),
    #[error("bisection did not converge in {0} steps")]
    NoConvergence(usize),
    #[error("{0}")]
    Unsupported(String),
    #[error("linear program failed: {0}")]
    LinearProgram(String),
    #[error(transparent)]
    State(#[from] QStateError),
}

pub type Result<T> = std::result::Result<T, BellError>;

/// Linear functional `Σ g_abxy P(ab|xy)` over a scenario `(m_A, m_B, o_A, o_B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BellFunctional {
    shape: (usize, usize, usize, usize),
    coefficients: Vec<f64>,
    local_bound_cache: Option<f64>,
}

impl BellFunctional {
    /// Coefficients in `[x][y][a][b]` order, matching [`CorrelationTable`].
    pub fn new(m_a: usize, m_b: usize, o_a: usize, o_b: usize, coefficients: Vec<f64>) -> Result<Self> {
        let expected = m_a * m_b * o_a * o_b;
        if coefficients.len() != expected {
            return Err(BellError::CoefficientCount {
                expected,
                got: coefficients.len(),
            });
        }
        Ok(Self {
            shape: (m_a, m_b, o_a, o_b),
            coefficients,
            local_bound_cache: None,
        })
    }

    /// Binary-outcome functional `Σ s_xy ⟨A_x B_y⟩` over the listed
    /// `(x, y, s_xy)` terms; outcome 0 is the +1 eigenvalue.
    pub fn from_correlators(m_a: usize, m_b: usize, terms: &[(usize, usize, f64)]) -> Result<Self> {
        let mut coefficients = vec![0.0; m_a * m_b * 4];
        for &(x, y, s) in terms {
            if x >= m_a || y >= m_b {
                return Err(BellError::Unsupported(format!("term ({x},{y}) outside {m_a}x{m_b}")));
            }
            for a in 0..2 {
                for b in 0..2 {
                    let sign = if a == b { 1.0 } else { -1.0 };
                    coefficients[((x * m_b + y) * 2 + a) * 2 + b] += s * sign;
                }
            }
        }
        Self::new(m_a, m_b, 2, 2, coefficients)
    }

    /// `S = E00 + E01 + E10 − E11`, local bound 2.
    pub fn chsh() -> Self {
        let mut f = Self::from_correlators(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, -1.0)])
            .expect("fixed CHSH shape");
        f.local_bound_cache = Some(2.0);
        f
    }

    /// CHSH on Alice's inputs `{0, 1}` and Bob's inputs `{1, 2}` of a
    /// three-input Bob, whose input 0 is the key setting.
    pub fn chsh_with_key_setting() -> Self {
        let mut f = Self::from_correlators(2, 3, &[(0, 1, 1.0), (0, 2, 1.0), (1, 1, 1.0), (1, 2, -1.0)])
            .expect("fixed CHSH shape");
        f.local_bound_cache = Some(2.0);
        f
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.shape
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficient(&self, a: usize, b: usize, x: usize, y: usize) -> f64 {
        let (_, m_b, o_a, o_b) = self.shape;
        self.coefficients[((x * m_b + y) * o_a + a) * o_b + b]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            shape: self.shape,
            coefficients: self.coefficients.iter().map(|c| c * factor).collect(),
            local_bound_cache: self.local_bound_cache.map(|b| {
                if factor >= 0.0 {
                    b * factor
                } else {
                    f64::NAN
                }
            }),
        }
        .drop_nan_cache()
    }

    fn drop_nan_cache(mut self) -> Self {
        if self.local_bound_cache.is_some_and(f64::is_nan) {
            self.local_bound_cache = None;
        }
        self
    }

    /// Computes and stores the local bound.
    pub fn with_cached_bound(mut self) -> Result<Self> {
        self.local_bound_cache = Some(local_bound(&self)?);
        Ok(self)
    }

    pub fn cached_bound(&self) -> Option<f64> {
        self.local_bound_cache
    }

    /// Correlator decomposition of a binary-outcome functional:
    /// `constant + Σ α_x ⟨A_x⟩ + Σ β_y ⟨B_y⟩ + Σ γ_xy ⟨A_x B_y⟩`.
    pub fn correlator_form(&self) -> Result<CorrelatorForm> {
        let (m_a, m_b, o_a, o_b) = self.shape;
        if o_a != 2 || o_b != 2 {
            return Err(BellError::Unsupported("correlator form needs binary outcomes".into()));
        }
        let mut form = CorrelatorForm {
            constant: 0.0,
            alice: vec![0.0; m_a],
            bob: vec![0.0; m_b],
            joint: vec![vec![0.0; m_b]; m_a],
        };
        for x in 0..m_a {
            for y in 0..m_b {
                for a in 0..2 {
                    for b in 0..2 {
                        let g = self.coefficient(a, b, x, y) / 4.0;
                        let (sa, sb) = (1.0 - 2.0 * a as f64, 1.0 - 2.0 * b as f64);
                        form.constant += g;
                        form.alice[x] += g * sa;
                        form.bob[y] += g * sb;
                        form.joint[x][y] += g * sa * sb;
                    }
                }
            }
        }
        Ok(form)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatorForm {
    pub constant: f64,
    pub alice: Vec<f64>,
    pub bob: Vec<f64>,
    pub joint: Vec<Vec<f64>>,
}

/// `Σ g_abxy P(ab|xy)`.
pub fn bell_value(table: &CorrelationTable, f: &BellFunctional) -> Result<f64> {
    if table.shape() != f.shape {
        return Err(BellError::ShapeMismatch {
            table: table.shape(),
            functional: f.shape,
        });
    }
    Ok(table.probs().iter().zip(&f.coefficients).map(|(p, g)| p * g).sum())
}

/// Maximum of the functional over deterministic local strategies.
///
/// Every Alice strategy is enumerated; for each, Bob's best response is taken
/// input by input, which is exact because the value separates over `y`.
pub fn local_bound(f: &BellFunctional) -> Result<f64> {
    if let Some(b) = f.local_bound_cache {
        return Ok(b);
    }
    let (m_a, m_b, o_a, o_b) = f.shape;
    let count = (o_a as f64).powi(m_a as i32) * (o_b as f64).powi(m_b as i32);
    if count > MAX_STRATEGIES {
        return Err(BellError::EnumerationTooLarge(count));
    }
    if m_a == 0 || m_b == 0 {
        return Ok(0.0);
    }
    let n_alice = o_a.pow(m_a as u32);
    let mut best = f64::NEG_INFINITY;
    let mut outputs = vec![0usize; m_a];
    for s in 0..n_alice {
        let mut rest = s;
        for slot in outputs.iter_mut() {
            *slot = rest % o_a;
            rest /= o_a;
        }
        let mut value = 0.0;
        for y in 0..m_b {
            let column = (0..o_b)
                .map(|b| (0..m_a).map(|x| f.coefficient(outputs[x], b, x, y)).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            value += column;
        }
        best = best.max(value);
    }
    Ok(best)
}

/// Outcome that absorbs each party's no-click event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub struct NoClickBinning {
    pub alice: usize,
    pub bob: usize,
}


/// Merges the last outcome of each party into the assigned outcome.
pub fn bin_no_click(table: &CorrelationTable, binning: NoClickBinning) -> Result<CorrelationTable> {
    let (m_a, m_b, o_a, o_b) = table.shape();
    if o_a < 2 || o_b < 2 {
        return Err(BellError::InvalidAssignment("tables need a real outcome besides no-click".into()));
    }
    if binning.alice >= o_a - 1 || binning.bob >= o_b - 1 {
        return Err(BellError::InvalidAssignment(format!(
            "assignment ({}, {}) outside outcomes ({}, {})",
            binning.alice,
            binning.bob,
            o_a - 1,
            o_b - 1
        )));
    }
    let map_a = |a: usize| if a == o_a - 1 { binning.alice } else { a };
    let map_b = |b: usize| if b == o_b - 1 { binning.bob } else { b };
    let mut probs = vec![0.0; m_a * m_b * (o_a - 1) * (o_b - 1)];
    for x in 0..m_a {
        for y in 0..m_b {
            for a in 0..o_a {
                for b in 0..o_b {
                    let idx = ((x * m_b + y) * (o_a - 1) + map_a(a)) * (o_b - 1) + map_b(b);
                    probs[idx] += table.get(a, b, x, y);
                }
            }
        }
    }
    Ok(CorrelationTable::new(m_a, m_b, o_a - 1, o_b - 1, probs)?)
}

/// Largest change of a party's marginal when the other party's input changes.
pub fn nosignalling_residual(table: &CorrelationTable) -> f64 {
    let (m_a, m_b, o_a, o_b) = table.shape();
    let mut worst: f64 = 0.0;
    for x in 0..m_a {
        for a in 0..o_a {
            for y in 1..m_b {
                worst = worst.max((table.alice_marginal(a, x, y) - table.alice_marginal(a, x, 0)).abs());
            }
        }
    }
    for y in 0..m_b {
        for b in 0..o_b {
            for x in 1..m_a {
                worst = worst.max((table.bob_marginal(b, x, y) - table.bob_marginal(b, 0, y)).abs());
            }
        }
    }
    worst
}

/// Two-qubit states whose detection threshold is searched.
#[derive(Debug, Clone, PartialEq)]
pub enum StateFamily {
    /// `(|00⟩ + |11⟩)/√2`.
    MaximallyEntangled,
    /// `|00⟩`.
    Product,
    /// `cos θ |00⟩ + sin θ |11⟩`, with θ optimized in `(0, π/4]`.
    PartiallyEntangled,
    /// A fixed two-qubit state.
    Fixed(DensityOperator),
}

/// Measurement angles in the Z–X plane; angle θ measures `cos θ Z + sin θ X`.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub alice: Vec<f64>,
    pub bob: Vec<f64>,
}

impl Settings {
    /// Angles reaching `2√2` with `(|00⟩ + |11⟩)/√2`.
    pub fn chsh_optimal() -> Self {
        Self {
            alice: vec![0.0, FRAC_PI_2],
            bob: vec![FRAC_PI_4, -FRAC_PI_4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub settings: Settings,
    /// State angle θ for the partially entangled family.
    pub state_angle: Option<f64>,
    /// Binned functional value at the witness efficiency.
    pub value: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyThresholdResult {
    pub eta_critical: f64,
    pub witness: Option<Witness>,
}

/// Expectations of Z and X products for a two-qubit state.
#[derive(Debug, Clone, Copy)]
struct QubitCorrelators {
    alice: [f64; 2],
    bob: [f64; 2],
    joint: [[f64; 2]; 2],
}

fn pauli_zx() -> [CMatrix; 3] {
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let id = CMatrix::identity(2, 2);
    let z = CMatrix::from_row_slice(2, 2, &[one, zero, zero, -one]);
    let x = CMatrix::from_row_slice(2, 2, &[zero, one, one, zero]);
    [id, z, x]
}

impl QubitCorrelators {
    fn of(rho: &DensityOperator) -> Result<Self> {
        if rho.dim() != 4 {
            return Err(BellError::Unsupported(format!("expected a two-qubit state, got dimension {}", rho.dim())));
        }
        let p = pauli_zx();
        let ev = |i: usize, j: usize| -> f64 { (rho.matrix() * p[i].kronecker(&p[j])).trace().re };
        Ok(Self {
            alice: [ev(1, 0), ev(2, 0)],
            bob: [ev(0, 1), ev(0, 2)],
            joint: [[ev(1, 1), ev(1, 2)], [ev(2, 1), ev(2, 2)]],
        })
    }

    fn partially_entangled(theta: f64) -> Self {
        // cos θ|00⟩ + sin θ|11⟩: ⟨Z⊗I⟩ = ⟨I⊗Z⟩ = cos 2θ, ⟨ZZ⟩ = 1, ⟨XX⟩ = sin 2θ.
        let (s, c) = (2.0 * theta).sin_cos();
        Self {
            alice: [c, 0.0],
            bob: [c, 0.0],
            joint: [[1.0, 0.0], [0.0, s]],
        }
    }
}

/// Binned functional value with outcome-0 binning at symmetric efficiency,
/// for unit vectors `n` (Alice) and `m` (Bob) in the Z–X plane.
struct BinnedObjective<'a> {
    form: &'a CorrelatorForm,
    c: QubitCorrelators,
    eta: f64,
}

impl BinnedObjective<'_> {
    fn value(&self, n: &[[f64; 2]], m: &[[f64; 2]]) -> f64 {
        let eta = self.eta;
        let dot = |u: &[f64; 2], v: &[f64; 2]| u[0] * v[0] + u[1] * v[1];
        let ta = |v: &[f64; 2]| [self.c.joint[0][0] * v[0] + self.c.joint[0][1] * v[1], self.c.joint[1][0] * v[0] + self.c.joint[1][1] * v[1]];
        let mut total = self.form.constant;
        for (x, nx) in n.iter().enumerate() {
            let ax = eta * dot(&self.c.alice, nx) + (1.0 - eta);
            total += self.form.alice[x] * ax;
        }
        for (y, my) in m.iter().enumerate() {
            let by = eta * dot(&self.c.bob, my) + (1.0 - eta);
            total += self.form.bob[y] * by;
        }
        for (x, nx) in n.iter().enumerate() {
            let a = dot(&self.c.alice, nx);
            for (y, my) in m.iter().enumerate() {
                let b = dot(&self.c.bob, my);
                let ab = dot(nx, &ta(my));
                let e = eta * eta * ab + eta * (1.0 - eta) * (a + b) + (1.0 - eta) * (1.0 - eta);
                total += self.form.joint[x][y] * e;
            }
        }
        total
    }

    /// Gradient direction for one of Alice's vectors; the value is affine in it.
    fn alice_direction(&self, x: usize, m: &[[f64; 2]]) -> [f64; 2] {
        let eta = self.eta;
        let mut d = [0.0; 2];
        for k in 0..2 {
            d[k] += self.form.alice[x] * eta * self.c.alice[k];
            for (y, my) in m.iter().enumerate() {
                let tm = self.c.joint[k][0] * my[0] + self.c.joint[k][1] * my[1];
                d[k] += self.form.joint[x][y] * (eta * eta * tm + eta * (1.0 - eta) * self.c.alice[k]);
            }
        }
        d
    }

    fn bob_direction(&self, y: usize, n: &[[f64; 2]]) -> [f64; 2] {
        let eta = self.eta;
        let mut d = [0.0; 2];
        for k in 0..2 {
            d[k] += self.form.bob[y] * eta * self.c.bob[k];
            for (x, nx) in n.iter().enumerate() {
                let tn = nx[0] * self.c.joint[0][k] + nx[1] * self.c.joint[1][k];
                d[k] += self.form.joint[x][y] * (eta * eta * tn + eta * (1.0 - eta) * self.c.bob[k]);
            }
        }
        d
    }
}

fn unit(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

fn angle(v: &[f64; 2]) -> f64 {
    v[1].atan2(v[0])
}

/// Coordinate ascent over measurement angles; each update is the closed-form
/// maximizer of an affine function on the unit circle.
fn optimize_settings(obj: &BinnedObjective, m_a: usize, m_b: usize) -> (f64, Settings) {
    let golden = 0.618_033_988_749_895;
    let mut best = (f64::NEG_INFINITY, Settings { alice: vec![], bob: vec![] });
    for restart in 0..SETTING_RESTARTS {
        let mut phase = restart as f64 * golden;
        let mut next = || {
            phase = (phase + golden).fract();
            2.0 * PI * phase - PI
        };
        let mut n: Vec<[f64; 2]> = (0..m_a).map(|_| unit(next())).collect();
        let mut m: Vec<[f64; 2]> = (0..m_b).map(|_| unit(next())).collect();
        if restart == 0 && m_a == 2 && m_b == 2 {
            let s = Settings::chsh_optimal();
            n = s.alice.iter().map(|&t| unit(t)).collect();
            m = s.bob.iter().map(|&t| unit(t)).collect();
        }
        let mut value = obj.value(&n, &m);
        for _ in 0..500 {
            for x in 0..m_a {
                let d = obj.alice_direction(x, &m);
                if d[0] != 0.0 || d[1] != 0.0 {
                    n[x] = unit(angle(&d));
                }
            }
            for y in 0..m_b {
                let d = obj.bob_direction(y, &n);
                if d[0] != 0.0 || d[1] != 0.0 {
                    m[y] = unit(angle(&d));
                }
            }
            let updated = obj.value(&n, &m);
            let gain = updated - value;
            value = updated;
            if gain < 1e-15 {
                break;
            }
        }
        if value > best.0 {
            best = (
                value,
                Settings {
                    alice: n.iter().map(angle).collect(),
                    bob: m.iter().map(angle).collect(),
                },
            );
        }
    }
    best
}

/// Best binned value at efficiency `eta` for a fixed state.
fn best_for_state(
    form: &CorrelatorForm,
    c: QubitCorrelators,
    eta: f64,
    settings: Option<&Settings>,
    shape: (usize, usize),
) -> (f64, Settings) {
    let obj = BinnedObjective { form, c, eta };
    match settings {
        Some(s) => {
            let n: Vec<[f64; 2]> = s.alice.iter().map(|&t| unit(t)).collect();
            let m: Vec<[f64; 2]> = s.bob.iter().map(|&t| unit(t)).collect();
            (obj.value(&n, &m), s.clone())
        }
        None => optimize_settings(&obj, shape.0, shape.1),
    }
}

/// Maximum over the state angle: a coarse grid, then golden-section refinement
/// around the best grid point.
fn best_over_state_angle(
    form: &CorrelatorForm,
    eta: f64,
    settings: Option<&Settings>,
    shape: (usize, usize),
) -> (f64, Settings, f64) {
    let eval = |theta: f64| best_for_state(form, QubitCorrelators::partially_entangled(theta), eta, settings, shape);
    let grid = 40;
    let lo_angle = 1e-4;
    let step = (FRAC_PI_4 - lo_angle) / grid as f64;
    let mut best_k = 0;
    let mut best_v = f64::NEG_INFINITY;
    for k in 0..=grid {
        let v = eval(lo_angle + k as f64 * step).0;
        if v > best_v {
            best_v = v;
            best_k = k;
        }
    }
    let mut a = (lo_angle + (best_k as f64 - 1.0) * step).max(lo_angle * 0.01);
    let mut b = (lo_angle + (best_k as f64 + 1.0) * step).min(FRAC_PI_4);
    let r = 0.618_033_988_749_895;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (eval(c).0, eval(d).0);
    while b - a > 1e-9 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = eval(c).0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = eval(d).0;
        }
    }
    let mut theta = 0.5 * (a + b);
    let (mut v, mut s) = eval(theta);
    let grid_theta = lo_angle + best_k as f64 * step;
    let (gv, gs) = eval(grid_theta);
    if gv > v {
        (v, s, theta) = (gv, gs, grid_theta);
    }
    (v, s, theta)
}

/// Best binned value of `f` at symmetric efficiency `eta`.
fn best_value(
    family: &StateFamily,
    form: &CorrelatorForm,
    eta: f64,
    settings: Option<&Settings>,
    shape: (usize, usize),
) -> Result<(f64, Settings, Option<f64>)> {
    let fixed = |rho: &DensityOperator| -> Result<(f64, Settings, Option<f64>)> {
        let (v, s) = best_for_state(form, QubitCorrelators::of(rho)?, eta, settings, shape);
        Ok((v, s, None))
    };
    match family {
        StateFamily::MaximallyEntangled => fixed(&states::partially_entangled(FRAC_PI_4)),
        StateFamily::Product => {
            let mut ket = CVector::zeros(4);
            ket[0] = Complex64::new(1.0, 0.0);
            fixed(&DensityOperator::from_pure(&ket)?)
        }
        StateFamily::Fixed(rho) => fixed(rho),
        StateFamily::PartiallyEntangled => {
            let (v, s, t) = best_over_state_angle(form, eta, settings, shape);
            Ok((v, s, Some(t)))
        }
    }
}

/// Binned value of `f` for a state family at efficiency `eta`, maximized over
/// settings (or at `settings`) and, for the partially entangled family, over
/// the state angle.
pub fn binned_value(family: &StateFamily, f: &BellFunctional, eta: f64, settings: Option<&Settings>) -> Result<f64> {
    let form = f.correlator_form()?;
    let (m_a, m_b, _, _) = f.shape;
    Ok(best_value(family, &form, eta, settings, (m_a, m_b))?.0)
}

/// Smallest symmetric detection efficiency at which the binned functional
/// exceeds its local bound.
///
/// Without `optimize_settings`, the settings are the CHSH-optimal angles
/// (two-input functionals only); see [`critical_efficiency_at`] for others.
pub fn critical_efficiency(
    family: &StateFamily,
    f: &BellFunctional,
    optimize_settings: bool,
) -> Result<EfficiencyThresholdResult> {
    if optimize_settings {
        threshold_search(family, f, None)
    } else {
        let (m_a, m_b, _, _) = f.shape;
        if (m_a, m_b) != (2, 2) {
            return Err(BellError::Unsupported("default settings exist only for two inputs per party".into()));
        }
        threshold_search(family, f, Some(&Settings::chsh_optimal()))
    }
}

/// Threshold search at fixed settings.
pub fn critical_efficiency_at(
    family: &StateFamily,
    f: &BellFunctional,
    settings: &Settings,
) -> Result<EfficiencyThresholdResult> {
    let (m_a, m_b, _, _) = f.shape;
    if settings.alice.len() != m_a || settings.bob.len() != m_b {
        return Err(BellError::Unsupported("settings do not match the functional's inputs".into()));
    }
    threshold_search(family, f, Some(settings))
}

fn threshold_search(
    family: &StateFamily,
    f: &BellFunctional,
    settings: Option<&Settings>,
) -> Result<EfficiencyThresholdResult> {
    let form = f.correlator_form()?;
    let bound = local_bound(f)?;
    let (m_a, m_b, _, _) = f.shape;
    let violates = |eta: f64| -> Result<(bool, (f64, Settings, Option<f64>))> {
        let r = best_value(family, &form, eta, settings, (m_a, m_b))?;
        Ok((r.0 > bound + VIOLATION_MARGIN, r))
    };
    let (at_one, top) = violates(1.0)?;
    if !at_one {
        return Ok(EfficiencyThresholdResult {
            eta_critical: 1.0,
            witness: None,
        });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut witness = top;
    let mut steps = 0;
    while hi - lo > BISECTION_TOL {
        if steps == MAX_BISECTION_STEPS {
            return Err(BellError::NoConvergence(steps));
        }
        steps += 1;
        let mid = 0.5 * (lo + hi);
        let (ok, r) = violates(mid)?;
        if ok {
            hi = mid;
            witness = r;
        } else {
            lo = mid;
        }
    }
    Ok(EfficiencyThresholdResult {
        eta_critical: hi,
        witness: Some(Witness {
            settings: witness.1,
            state_angle: witness.2,
            value: witness.0,
            eta: hi,
        }),
    })
}

/// Post-selected table and CHSH value produced by the best classical
/// detection-loophole strategy.
#[derive(Debug, Clone)]
pub struct LoopholeAttack {
    pub eta: f64,
    pub value: f64,
    /// Correlations on coincidences, renormalized per setting pair.
    pub postselected: CorrelationTable,
}

/// Best post-selected CHSH value of a local strategy in which each party may
/// decline to answer per input, answering with probability at least `eta` on
/// every input.
pub fn loophole_attack(eta: f64) -> f64 {
    loophole_attack_strategy(eta).map(|a| a.value).unwrap_or(f64::NAN)
}

/// Solves the attack as a linear program over shared randomness on the 81
/// flagged deterministic strategies. Coincidence rates are normalized to one
/// per setting pair, which turns the post-selected ratio into a linear
/// objective.
pub fn loophole_attack_strategy(eta: f64) -> Result<LoopholeAttack> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(BellError::Unsupported(format!("eta = {eta} outside (0, 1]")));
    }
    const ANSWERS: [i8; 3] = [1, -1, 0];
    let sign = [[1.0, 1.0], [1.0, -1.0]];
    let mut strategies = Vec::with_capacity(81);
    for a0 in ANSWERS {
        for a1 in ANSWERS {
            for b0 in ANSWERS {
                for b1 in ANSWERS {
                    strategies.push(([a0, a1], [b0, b1]));
                }
            }
        }
    }
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let weights: Vec<_> = strategies
        .iter()
        .map(|(a, b)| {
            let value: f64 = (0..2)
                .flat_map(|x| (0..2).map(move |y| (x, y)))
                .map(|(x, y)| sign[x][y] * f64::from(a[x] * b[y]))
                .sum();
            lp.add_var(value, (0.0, f64::INFINITY))
        })
        .collect();
    let t = lp.add_var(0.0, (0.0, f64::INFINITY));
    for x in 0..2 {
        for y in 0..2 {
            let expr: Vec<_> = strategies
                .iter()
                .zip(&weights)
                .filter(|((a, b), _)| a[x] != 0 && b[y] != 0)
                .map(|(_, &w)| (w, 1.0))
                .collect();
            lp.add_constraint(expr, ComparisonOp::Eq, 1.0);
        }
    }
    let mut total: Vec<_> = weights.iter().map(|&w| (w, 1.0)).collect();
    total.push((t, -1.0));
    lp.add_constraint(total, ComparisonOp::Eq, 0.0);
    for input in 0..2 {
        for party in 0..2 {
            let mut expr: Vec<_> = strategies
                .iter()
                .zip(&weights)
                .filter(|((a, b), _)| if party == 0 { a[input] != 0 } else { b[input] != 0 })
                .map(|(_, &w)| (w, 1.0))
                .collect();
            expr.push((t, -eta));
            lp.add_constraint(expr, ComparisonOp::Ge, 0.0);
        }
    }
    let solution = lp.solve().map_err(|e| BellError::LinearProgram(e.to_string()))?;
    let mut probs = vec![0.0; 16];
    for ((a, b), &w) in strategies.iter().zip(&weights) {
        let mass = *solution.var_value(w);
        if mass <= 0.0 {
            continue;
        }
        for x in 0..2 {
            for y in 0..2 {
                if a[x] == 0 || b[y] == 0 {
                    continue;
                }
                let (oa, ob) = (usize::from(a[x] < 0), usize::from(b[y] < 0));
                probs[((x * 2 + y) * 2 + oa) * 2 + ob] += mass;
            }
        }
    }
    // Absorb solver round-off so every setting pair sums to one.
    for chunk in probs.chunks_mut(4) {
        let s: f64 = chunk.iter().sum();
        chunk.iter_mut().for_each(|p| *p /= s);
    }
    Ok(LoopholeAttack {
        eta,
        value: solution.objective(),
        postselected: CorrelationTable::new(2, 2, 2, 2, probs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{born_table, Povm};

    #[test]
    fn chsh_coefficients_reproduce_correlators() {
        let f = BellFunctional::chsh();
        let form = f.correlator_form().unwrap();
        assert_eq!(form.constant, 0.0);
        assert_eq!(form.joint, vec![vec![1.0, 1.0], vec![1.0, -1.0]]);
    }

    #[test]
    fn bell_value_examples() {
        let f = BellFunctional::chsh();
        let uniform = CorrelationTable::from_fn(2, 2, 2, 2, |_, _, _, _| 0.25).unwrap();
        assert!(bell_value(&uniform, &f).unwrap().abs() < 1e-15);
        let det = CorrelationTable::from_fn(2, 2, 2, 2, |a, b, _, _| f64::from(u8::from(a == 0 && b == 0))).unwrap();
        assert!((bell_value(&det, &f).unwrap() - 2.0).abs() < 1e-15);
        let wrong = CorrelationTable::from_fn(2, 3, 2, 2, |_, _, _, _| 0.25).unwrap();
        assert!(matches!(bell_value(&wrong, &f), Err(BellError::ShapeMismatch { .. })));
    }

    #[test]
    fn tsirelson_value_from_born_table() {
        let s = Settings::chsh_optimal();
        let alice: Vec<_> = s.alice.iter().map(|&t| Povm::projective_zx(t)).collect();
        let bob: Vec<_> = s.bob.iter().map(|&t| Povm::projective_zx(t)).collect();
        let table = born_table(&states::partially_entangled(FRAC_PI_4), &alice, &bob).unwrap();
        let v = bell_value(&table, &BellFunctional::chsh()).unwrap();
        assert!((v - 2.0 * 2f64.sqrt()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn local_bound_examples() {
        let mut f = BellFunctional::chsh();
        f.local_bound_cache = None;
        assert_eq!(local_bound(&f).unwrap(), 2.0);
        assert_eq!(local_bound(&f.scaled(2.0)).unwrap(), 4.0);
        let zero = BellFunctional::new(2, 2, 2, 2, vec![0.0; 16]).unwrap();
        assert_eq!(local_bound(&zero).unwrap(), 0.0);
        let mut embedded = BellFunctional::chsh_with_key_setting();
        embedded.local_bound_cache = None;
        assert_eq!(local_bound(&embedded).unwrap(), 2.0);
        let huge = BellFunctional::new(12, 12, 4, 4, vec![0.0; 12 * 12 * 16]).unwrap();
        assert!(matches!(local_bound(&huge), Err(BellError::EnumerationTooLarge(_))));
    }

    #[test]
    fn binning_examples() {
        let clean = CorrelationTable::from_fn(2, 2, 3, 3, |a, b, _, _| if a < 2 && b < 2 { 0.25 } else { 0.0 }).unwrap();
        let binned = bin_no_click(&clean, NoClickBinning::default()).unwrap();
        assert!(binned.probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let lost = CorrelationTable::from_fn(2, 2, 3, 3, |a, b, _, _| f64::from(u8::from(a == 2 && b == 2))).unwrap();
        let binned = bin_no_click(&lost, NoClickBinning::default()).unwrap();
        assert_eq!(binned.get(0, 0, 1, 1), 1.0);
        assert!(bin_no_click(&lost, NoClickBinning { alice: 2, bob: 0 }).is_err());
    }

    #[test]
    fn fixed_settings_threshold_is_closed_form() {
        let r = critical_efficiency(&StateFamily::MaximallyEntangled, &BellFunctional::chsh(), false).unwrap();
        let exact = 2.0 / (1.0 + 2f64.sqrt());
        assert!((r.eta_critical - exact).abs() < 1e-6, "{}", r.eta_critical);
    }

    #[test]
    fn product_state_never_violates() {
        let r = critical_efficiency(&StateFamily::Product, &BellFunctional::chsh(), true).unwrap();
        assert_eq!(r.eta_critical, 1.0);
        assert!(r.witness.is_none());
    }

    #[test]
    fn attack_endpoints() {
        assert!((loophole_attack(1.0) - 2.0).abs() < 1e-9);
        assert!((loophole_attack(1e-3) - 4.0).abs() < 1e-9);
        assert!(loophole_attack(2.0 / 3.0) >= 2.0 * 2f64.sqrt());
        assert!(loophole_attack(0.0).is_nan());
    }
}
