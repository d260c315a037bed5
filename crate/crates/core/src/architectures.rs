//! End-to-end models of the standard, locally heralded and third-party
//! heralded DIQKD links.
//!
//! Every statistic is computed exactly from Fock-space states; nothing here
//! samples. Alice measures at angles `{0, π/2}`, Bob at `{0, π/4, −π/4}`.
//! The raw key comes from `(x, y) = (0, 0)`, CHSH from `x ∈ {0,1}, y ∈ {1,2}`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bellcert::{self, bell_value, bin_no_click, BellFunctional, NoClickBinning};
use crate::photonics::{
    self, amplify_modes, bell_state_measurement, distance_to_transmission, phase_unitary, polarization_rotation,
    AmplifierConfig, Ancilla, BellOutcome, DetectorModel, ModeEnsemble, ModeState, PhotonicsError,
};
use crate::qstate::{born_table, CMatrix, CorrelationTable, DensityOperator, Povm, QStateError};

pub const ALICE_ANGLES: [f64; 2] = [0.0, FRAC_PI_2];
pub const BOB_ANGLES: [f64; 3] = [0.0, FRAC_PI_4, -FRAC_PI_4];
pub const RAW_X: usize = 0;
pub const RAW_Y: usize = 0;
/// Pairs kept from an SPDC source.
pub const SOURCE_PAIR_CUTOFF: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("{name} = {value} is outside its valid range")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("scenario architecture is {found:?}, expected {expected:?}")]
    WrongArchitecture { expected: Architecture, found: Architecture },
    #[error("empty distance list")]
    EmptySweep,
    #[error(transparent)]
    Photonics(#[from] PhotonicsError),
    #[error(transparent)]
    Bell(#[from] bellcert::BellError),
    #[error(transparent)]
    State(#[from] QStateError),
}

pub type Result<T> = std::result::Result<T, ArchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Standard,
    LocalHeralding,
    ThirdParty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceModel {
    /// Thermal SPDC with multi-pair terms.
    #[default]
    Spdc,
    /// Exactly one polarization-singlet pair per round.
    IdealPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AncillaModel {
    Ideal,
    #[default]
    HeraldedSpdc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub architecture: Architecture,
    /// Total Alice–Bob fiber length in km.
    pub l_total: f64,
    /// Attenuation in dB/km.
    pub alpha: f64,
    pub eta_d: f64,
    pub p: f64,
    #[serde(rename = "t")]
    pub transmittance: f64,
    pub p_dc: f64,
    pub rep_rate: f64,
    /// Seconds; zero for all-optical links, positive for matter nodes.
    pub readout_time: f64,
    pub node_fidelity: f64,
    /// Fraction of `l_total` between Alice and the source. `None` picks 0.5
    /// for the standard link; local heralding always uses 0.
    pub source_position: Option<f64>,
    pub source_model: SourceModel,
    pub ancilla: AncillaModel,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            architecture: Architecture::Standard,
            l_total: 0.0,
            alpha: 0.2,
            eta_d: 0.9,
            p: 0.011,
            transmittance: 0.99,
            p_dc: 0.0,
            rep_rate: 1e8,
            readout_time: 0.0,
            node_fidelity: 0.9,
            source_position: None,
            source_model: SourceModel::Spdc,
            ancilla: AncillaModel::HeraldedSpdc,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("eta_d", self.eta_d),
            ("p_dc", self.p_dc),
            ("node_fidelity", self.node_fidelity),
            ("source_position", self.source_position.unwrap_or(0.0)),
        ];
        for (name, value) in unit {
            if !(0.0..=1.0).contains(&value) {
                return Err(ArchError::OutOfRange { name, value });
            }
        }
        let checks = [
            ("p", self.p, (0.0..1.0).contains(&self.p)),
            ("t", self.transmittance, self.transmittance > 0.0 && self.transmittance < 1.0),
            ("l_total", self.l_total, self.l_total >= 0.0 && self.l_total.is_finite()),
            ("alpha", self.alpha, self.alpha >= 0.0 && self.alpha.is_finite()),
            ("rep_rate", self.rep_rate, self.rep_rate > 0.0 && self.rep_rate.is_finite()),
            ("readout_time", self.readout_time, self.readout_time >= 0.0 && self.readout_time.is_finite()),
        ];
        for (name, value, ok) in checks {
            if !ok {
                return Err(ArchError::OutOfRange { name, value });
            }
        }
        Ok(())
    }

    pub fn source_fraction(&self) -> f64 {
        match self.architecture {
            Architecture::LocalHeralding => 0.0,
            _ => self.source_position.unwrap_or(0.5),
        }
    }

    pub fn uses_matter_nodes(&self) -> bool {
        self.readout_time > 0.0
    }

    /// Transmission of the full `l_total` fiber.
    pub fn channel_transmission(&self) -> f64 {
        distance_to_transmission(self.l_total, self.alpha)
    }

    fn detector(&self) -> DetectorModel {
        DetectorModel {
            eta_d: self.eta_d,
            p_dc: self.p_dc,
        }
    }

    fn source(&self) -> Result<ModeState> {
        Ok(match self.source_model {
            SourceModel::Spdc => photonics::spdc_source(self.p, SOURCE_PAIR_CUTOFF, SOURCE_PAIR_CUTOFF)?,
            SourceModel::IdealPair => {
                let r = std::f64::consts::FRAC_1_SQRT_2;
                ModeState::from_terms(
                    4,
                    1,
                    &[
                        (vec![1, 0, 0, 1], Complex64::new(r, 0.0)),
                        (vec![0, 1, 1, 0], Complex64::new(-r, 0.0)),
                    ],
                )?
            }
        })
    }

    fn ancilla_model(&self) -> Ancilla {
        match self.ancilla {
            AncillaModel::Ideal => Ancilla::Ideal,
            AncillaModel::HeraldedSpdc => Ancilla::HeraldedSpdc {
                p: self.p,
                n_pair_max: SOURCE_PAIR_CUTOFF,
                trigger: self.detector(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunNotes {
    /// Transmission of the full fiber length.
    pub eta_t: f64,
    pub nosignalling_residual: f64,
    /// Largest change of the herald distribution across setting pairs.
    pub herald_independence_residual: Option<f64>,
    pub photon_cutoff: usize,
    pub messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Binned table, conditioned on the herald where there is one.
    pub table: CorrelationTable,
    pub herald_probability: f64,
    pub chsh: f64,
    pub qber: f64,
    pub key_rate: f64,
    pub notes: RunNotes,
}

fn binary_entropy(q: f64) -> f64 {
    if q <= 0.0 || q >= 1.0 {
        return 0.0;
    }
    -q * q.log2() - (1.0 - q) * (1.0 - q).log2()
}

/// `max(0, 1 − h(Q) − h((1 + √((S/2)² − 1))/2))`, zero for `S ≤ 2`.
pub fn secret_fraction(chsh: f64, qber: f64) -> f64 {
    if !(chsh > 2.0) {
        return 0.0;
    }
    let s = chsh.min(2.0 * std::f64::consts::SQRT_2);
    let eve = binary_entropy((1.0 + ((s / 2.0).powi(2) - 1.0).max(0.0).sqrt()) / 2.0);
    (1.0 - binary_entropy(qber.clamp(0.0, 1.0)) - eve).max(0.0)
}

/// Disagreement probability of the `(raw_x, raw_y)` outcomes.
pub fn qber(table: &CorrelationTable, raw_x: usize, raw_y: usize) -> f64 {
    let (_, _, o_a, o_b) = table.shape();
    let mut q = 0.0;
    for a in 0..o_a {
        for b in 0..o_b {
            if a != b {
                q += table.get(a, b, raw_x, raw_y);
            }
        }
    }
    q
}

/// CHSH functional matching the table's input counts.
pub fn chsh_functional(table: &CorrelationTable) -> BellFunctional {
    match table.shape() {
        (2, 3, _, _) => BellFunctional::chsh_with_key_setting(),
        _ => BellFunctional::chsh(),
    }
}

/// Key rate of a binned table with raw-key inputs `(raw_x, raw_y)`.
pub fn key_rate(table: &CorrelationTable, raw_x: usize, raw_y: usize) -> Result<f64> {
    let s = bell_value(table, &chsh_functional(table))?;
    Ok(secret_fraction(s, qber(table, raw_x, raw_y)))
}

/// Outcome probability of a polarization analyzer with H and V threshold
/// detectors. Outcome 0 is the H port (double clicks included), 1 the V port,
/// 2 no click. `swap` exchanges the roles of H and V for single clicks.
fn analyzer_weight(det: &DetectorModel, outcome: usize, n_h: usize, n_v: usize, swap: bool) -> f64 {
    let (ph, pv) = (det.click_probability(n_h), det.click_probability(n_v));
    let h_only = ph * (1.0 - pv);
    let v_only = (1.0 - ph) * pv;
    let (first, second) = if swap { (v_only, h_only) } else { (h_only, v_only) };
    match outcome {
        0 => first + ph * pv,
        1 => second,
        _ => (1.0 - ph) * (1.0 - pv),
    }
}

/// Raw three-outcome table of an ensemble over `[a_H, a_V, b_H, b_V]`, binned
/// to outcome 0. Bob's labels are swapped so the singlet gives `+cos`.
fn photonic_table(ens: &ModeEnsemble, det_a: &DetectorModel, det_b: &DetectorModel) -> Result<CorrelationTable> {
    let ens = ens.normalized();
    let mut probs = vec![0.0; 2 * 3 * 3 * 3];
    for (x, &ta) in ALICE_ANGLES.iter().enumerate() {
        let ra = ens.apply_mode_unitary(0, 1, &polarization_rotation(ta))?;
        for (y, &tb) in BOB_ANGLES.iter().enumerate() {
            let rotated = ra.apply_mode_unitary(2, 3, &polarization_rotation(tb))?;
            for a in 0..3 {
                for b in 0..3 {
                    probs[((x * 3 + y) * 3 + a) * 3 + b] = rotated.diagonal_expectation(&[0, 1, 2, 3], |n| {
                        analyzer_weight(det_a, a, n[0], n[1], false) * analyzer_weight(det_b, b, n[2], n[3], true)
                    });
                }
            }
        }
    }
    // Absorb truncation round-off.
    for chunk in probs.chunks_mut(9) {
        let s: f64 = chunk.iter().sum();
        chunk.iter_mut().for_each(|p| *p /= s);
    }
    let raw = CorrelationTable::new(2, 3, 3, 3, probs)?;
    Ok(bin_no_click(&raw, NoClickBinning::default())?)
}

/// Two-qubit state held by matter nodes: the one-photon-per-side sector of the
/// heralded light (anything else loads as white noise), then depolarized to
/// `fidelity`.
fn matter_node_state(ens: &ModeEnsemble, fidelity: f64) -> Result<DensityOperator> {
    let ens = ens.normalized();
    let mut rho = CMatrix::zeros(4, 4);
    let mut weight = 0.0;
    for branch in ens.branches() {
        let mut psi = [Complex64::new(0.0, 0.0); 4];
        for (qa, occ_a) in [[1usize, 0], [0, 1]].iter().enumerate() {
            for (qb, occ_b) in [[1usize, 0], [0, 1]].iter().enumerate() {
                psi[qa * 2 + qb] = branch.amplitude(&[occ_a[0], occ_a[1], occ_b[0], occ_b[1]]);
            }
        }
        for i in 0..4 {
            weight += psi[i].norm_sqr();
            for j in 0..4 {
                rho[(i, j)] += psi[i] * psi[j].conj();
            }
        }
    }
    let white = CMatrix::identity(4, 4) * Complex64::new(0.25, 0.0);
    let rho = rho + &white * Complex64::new(1.0 - weight, 0.0);
    let v = ((4.0 * fidelity - 1.0) / 3.0).clamp(0.0, 1.0);
    let noisy = rho * Complex64::new(v, 0.0) + white * Complex64::new(1.0 - v, 0.0);
    Ok(DensityOperator::from_unnormalized(noisy)?)
}

fn matter_node_table(ens: &ModeEnsemble, fidelity: f64) -> Result<CorrelationTable> {
    let rho = matter_node_state(ens, fidelity)?;
    let alice: Vec<Povm> = ALICE_ANGLES.iter().map(|&t| Povm::projective_zx(t)).collect();
    let bob: Vec<Povm> = BOB_ANGLES.iter().map(|&t| Povm::projective_zx(t).relabeled()).collect();
    Ok(born_table(&rho, &alice, &bob)?)
}

fn finish(table: CorrelationTable, herald_probability: f64, notes: RunNotes) -> Result<RunResult> {
    let chsh = bell_value(&table, &chsh_functional(&table))?;
    let q = qber(&table, RAW_X, RAW_Y);
    let notes = RunNotes {
        nosignalling_residual: bellcert::nosignalling_residual(&table),
        ..notes
    };
    Ok(RunResult {
        key_rate: secret_fraction(chsh, q),
        table,
        herald_probability: herald_probability.clamp(0.0, 1.0),
        chsh,
        qber: q,
        notes,
    })
}

fn expect(s: &Scenario, expected: Architecture) -> Result<()> {
    s.validate()?;
    if s.architecture != expected {
        return Err(ArchError::WrongArchitecture {
            expected,
            found: s.architecture,
        });
    }
    Ok(())
}

/// Source between the parties, photons lost in their fiber segments and
/// detected directly. Uniform loss before a threshold detector is folded into
/// the detector efficiency.
pub fn run_standard(s: &Scenario) -> Result<RunResult> {
    expect(s, Architecture::Standard)?;
    let f = s.source_fraction();
    let eta_a = distance_to_transmission(f * s.l_total, s.alpha);
    let eta_b = distance_to_transmission((1.0 - f) * s.l_total, s.alpha);
    let source = s.source()?;
    let cutoff = source.n_max();
    let det = s.detector();
    let table = photonic_table(&source.into(), &det.behind_loss(eta_a), &det.behind_loss(eta_b))?;
    finish(
        table,
        1.0,
        RunNotes {
            eta_t: s.channel_transmission(),
            photon_cutoff: cutoff,
            ..RunNotes::default()
        },
    )
}

/// Source next to Alice; Bob's photon crosses the whole fiber and is checked
/// by the heralded amplifier before he measures.
pub fn run_local_heralding(s: &Scenario) -> Result<RunResult> {
    expect(s, Architecture::LocalHeralding)?;
    let eta_t = s.channel_transmission();
    let source = ModeEnsemble::from(s.source()?);
    let lossy = source.loss(2, eta_t)?.loss(3, eta_t)?;
    let config = AmplifierConfig {
        transmittance: s.transmittance,
        ancilla: s.ancilla_model(),
        detector: s.detector(),
    };
    let heralds = amplify_modes(&lossy, (2, 3), &config)?;
    let mut merged: Option<ModeEnsemble> = None;
    for (_, e) in heralds {
        merged = Some(match merged {
            None => e,
            Some(m) => m.merged(e)?,
        });
    }
    let mut notes = RunNotes {
        eta_t,
        ..RunNotes::default()
    };
    let Some(conditional) = merged else {
        notes.messages.push("amplifier never heralds".into());
        return no_herald(notes);
    };
    let herald = conditional.trace();
    if herald <= 0.0 {
        notes.messages.push("amplifier never heralds".into());
        return no_herald(notes);
    }
    // Output modes may hold all transmitted ancilla photons in one polarization.
    let anc_max = match config.ancilla {
        Ancilla::Ideal => 1,
        Ancilla::HeraldedSpdc { n_pair_max, .. } => n_pair_max,
    };
    let cutoff = conditional.n_max().max(2 * anc_max);
    let conditional = conditional.with_cutoff(cutoff)?;
    notes.photon_cutoff = cutoff;
    let table = if s.uses_matter_nodes() {
        matter_node_table(&conditional, s.node_fidelity)?
    } else {
        let det = s.detector();
        photonic_table(&conditional, &det, &det)?
    };
    finish(table, herald, notes)
}

fn no_herald(notes: RunNotes) -> Result<RunResult> {
    let table = CorrelationTable::from_fn(2, 3, 2, 2, |a, b, _, _| f64::from(u8::from(a == 0 && b == 0)))?;
    finish(table, 0.0, notes)
}

/// Sources at both ends; the inner photons meet at a midpoint Bell-state
/// measurement whose success heralds the round. A ψ⁺ herald is rotated to ψ⁻
/// by a Z flip on Bob's side.
pub fn run_third_party(s: &Scenario) -> Result<RunResult> {
    expect(s, Architecture::ThirdParty)?;
    let eta_half = distance_to_transmission(s.l_total / 2.0, s.alpha);
    let source = s.source()?;
    // Modes: a(H,V) c1(H,V) | c2(H,V) b(H,V). After swapping, each BSM port
    // may hold the photons of both sources.
    let cutoff = 2 * source.n_max();
    let half = source.with_cutoff(cutoff)?;
    let joint = ModeEnsemble::from(half.tensor(&half)?);
    let bsm = bell_state_measurement(&joint, (2, 3), (4, 5), &s.detector().behind_loss(eta_half))?;

    let mut conditional: Option<ModeEnsemble> = None;
    let mut per_outcome = Vec::new();
    for o in &bsm.outcomes {
        let (Some(kind), Some(c)) = (o.bell_state, &o.conditional) else {
            continue;
        };
        let corrected = match kind {
            BellOutcome::PsiMinus => c.clone(),
            BellOutcome::PsiPlus => c.apply_mode_unitary(2, 3, &phase_unitary(0.0, std::f64::consts::PI))?,
        };
        per_outcome.push(corrected.clone());
        conditional = Some(match conditional {
            None => corrected,
            Some(m) => m.merged(corrected)?,
        });
    }
    let mut notes = RunNotes {
        eta_t: s.channel_transmission(),
        photon_cutoff: cutoff,
        ..RunNotes::default()
    };
    let herald = bsm.success_probability();
    let Some(conditional) = conditional.filter(|_| herald > 0.0) else {
        notes.messages.push("Bell-state measurement never succeeds".into());
        return no_herald(notes);
    };

    // Outer outcomes per herald pattern, unnormalized, for the independence check.
    let det = s.detector();
    let rates: Vec<HeraldRates> = per_outcome
        .iter()
        .map(|e| herald_rates(e, &det))
        .collect::<Result<_>>()?;
    notes.herald_independence_residual = Some(herald_independence(&rates));

    let table = if s.uses_matter_nodes() {
        matter_node_table(&conditional, s.node_fidelity)?
    } else {
        photonic_table(&conditional, &det, &det)?
    };
    finish(table, herald, notes)
}

/// `P(c | x, y)` for one herald outcome `c`, summed over the outer outcomes.
fn herald_rates(ens: &ModeEnsemble, det: &DetectorModel) -> Result<HeraldRates> {
    let mut out = Vec::with_capacity(6);
    for &ta in &ALICE_ANGLES {
        let ra = ens.apply_mode_unitary(0, 1, &polarization_rotation(ta))?;
        for &tb in &BOB_ANGLES {
            let rotated = ra.apply_mode_unitary(2, 3, &polarization_rotation(tb))?;
            let mut total = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    total += rotated.diagonal_expectation(&[0, 1, 2, 3], |n| {
                        analyzer_weight(det, a, n[0], n[1], false) * analyzer_weight(det, b, n[2], n[3], true)
                    });
                }
            }
            out.push(total);
        }
    }
    Ok(out)
}

type HeraldRates = Vec<f64>;

fn herald_independence(per_outcome: &[HeraldRates]) -> f64 {
    let mut worst: f64 = 0.0;
    let mut success = vec![0.0; per_outcome.first().map_or(0, Vec::len)];
    for rates in per_outcome {
        let (lo, hi) = rates.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &r| (l.min(r), h.max(r)));
        worst = worst.max(hi - lo);
        for (s, r) in success.iter_mut().zip(rates) {
            *s += r;
        }
    }
    // The failure outcome is the complement of all successes.
    let (lo, hi) = success.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &r| (l.min(r), h.max(r)));
    if lo.is_finite() {
        worst = worst.max(hi - lo);
    }
    worst
}

pub fn run(s: &Scenario) -> Result<RunResult> {
    match s.architecture {
        Architecture::Standard => run_standard(s),
        Architecture::LocalHeralding => run_local_heralding(s),
        Architecture::ThirdParty => run_third_party(s),
    }
}

/// Round rate limited by node read-out.
pub fn effective_round_rate(s: &Scenario) -> f64 {
    if s.readout_time > 0.0 {
        s.rep_rate.min(1.0 / s.readout_time)
    } else {
        s.rep_rate
    }
}

/// Secret bits per second: round rate times herald probability times key rate.
pub fn secret_bits_per_second(s: &Scenario, res: &RunResult) -> f64 {
    effective_round_rate(s) * res.herald_probability * res.key_rate
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub l_km: f64,
    pub result: RunResult,
    pub bits_per_second: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// Key rate never rises with distance along the sweep.
    pub key_rate_non_increasing: bool,
    pub herald_non_increasing: bool,
}

/// Runs the scenario at each length, in parallel, keeping input order.
pub fn distance_sweep(s: &Scenario, l_values: &[f64]) -> Result<SweepReport> {
    if l_values.is_empty() {
        return Err(ArchError::EmptySweep);
    }
    let points = l_values
        .par_iter()
        .map(|&l| {
            let sc = Scenario {
                l_total: l,
                ..s.clone()
            };
            let result = run(&sc)?;
            Ok(SweepPoint {
                l_km: l,
                bits_per_second: secret_bits_per_second(&sc, &result),
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<&SweepPoint> = points.iter().collect();
    order.sort_by(|a, b| a.l_km.total_cmp(&b.l_km));
    let non_increasing = |f: fn(&SweepPoint) -> f64| order.windows(2).all(|w| f(w[1]) <= f(w[0]) + 1e-12);
    Ok(SweepReport {
        key_rate_non_increasing: non_increasing(|p| p.result.key_rate),
        herald_non_increasing: non_increasing(|p| p.result.herald_probability),
        points,
    })
}
