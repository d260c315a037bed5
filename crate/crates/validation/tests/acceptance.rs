//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line straight to
//! stdout (bypassing libtest capture) and then asserts the same condition.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};
use std::io::Write;

use diqkd_core::architectures::{
    effective_round_rate, run, secret_bits_per_second, AncillaModel, Architecture, RunResult, Scenario, SourceModel,
};
use diqkd_core::bellcert::{
    bell_value, critical_efficiency, local_bound, loophole_attack, BellFunctional, StateFamily,
};
use diqkd_core::keyproto::SessionStatus;
use diqkd_core::photonics::{amplifier_success_probability, qubit_amplifier, AmplifierConfig, Ancilla, DetectorModel};
use diqkd_core::qstate::{born_table, states, CVector, DensityOperator, Povm};
use diqkd_lab::{cmd_session, ScenarioFile};
use num_complex::Complex64;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!("[{}] criterion {id:>2} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn ideal_heralded(architecture: Architecture) -> Scenario {
    Scenario {
        architecture,
        eta_d: 1.0,
        p_dc: 0.0,
        source_model: SourceModel::IdealPair,
        ancilla: AncillaModel::Ideal,
        transmittance: 1.0 - 1e-9,
        ..Scenario::default()
    }
}

/// `α|0⟩ + β|1_H⟩` on two polarization modes with up to one photon each.
fn one_photon_qubit(beta: f64) -> DensityOperator {
    let alpha = (1.0 - beta * beta).sqrt();
    let v = CVector::from_vec(vec![
        Complex64::new(alpha, 0.0),
        Complex64::new(0.0, 0.0),
        Complex64::new(beta, 0.0),
        Complex64::new(0.0, 0.0),
    ]);
    DensityOperator::from_pure(&v).unwrap()
}

#[test]
fn criterion_01_tsirelson_anchor() {
    let alice = [Povm::projective_zx(0.0), Povm::projective_zx(FRAC_PI_2)];
    let bob = [Povm::projective_zx(FRAC_PI_4).relabeled(), Povm::projective_zx(-FRAC_PI_4).relabeled()];
    let table = born_table(&states::singlet(), &alice, &bob).unwrap();
    let s = bell_value(&table, &BellFunctional::chsh()).unwrap();
    let err = (s - 2.0 * SQRT_2).abs();
    report(1, "Tsirelson anchor", err < 1e-9, format!("S = {s:.12}, |S - 2√2| = {err:.1e} (tol 1e-9)"));
}

#[test]
fn criterion_02_local_bound() {
    let b = local_bound(&BellFunctional::chsh()).unwrap();
    report(2, "local bound", b == 2.0, format!("deterministic maximum = {b} (exact 2)"));
}

#[test]
fn criterion_03_critical_efficiency_maximally_entangled() {
    let r = critical_efficiency(&StateFamily::MaximallyEntangled, &BellFunctional::chsh(), false).unwrap();
    let err = (r.eta_critical - 0.8284).abs();
    report(3, "critical efficiency, maximally entangled", err <= 1e-3, format!("η* = {:.6} (0.8284 ± 1e-3)", r.eta_critical));
}

#[test]
fn criterion_04_eberhard_limit() {
    let r = critical_efficiency(&StateFamily::PartiallyEntangled, &BellFunctional::chsh(), true).unwrap();
    let err = (r.eta_critical - 2.0 / 3.0).abs();
    report(4, "Eberhard limit", err <= 5e-3, format!("optimized η* = {:.6} (2/3 ± 5e-3)", r.eta_critical));
}

#[test]
fn criterion_05_distance_cutoff() {
    let s = |l: f64| Scenario {
        architecture: Architecture::Standard,
        l_total: l,
        alpha: 0.2,
        eta_d: 1.0,
        p_dc: 0.0,
        source_position: Some(0.0),
        source_model: SourceModel::IdealPair,
        ..Scenario::default()
    };
    let rate = |l: f64| run(&s(l)).unwrap().key_rate;
    let (r35, r45) = (rate(3.5), rate(4.5));
    let (mut lo, mut hi) = (0.0, 10.0);
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let crossing = 0.5 * (lo + hi);
    let pass = r35 > 0.0 && r45 == 0.0 && (3.8..=4.4).contains(&crossing);
    report(
        5,
        "distance cutoff",
        pass,
        format!("r(3.5 km) = {r35:.4e} (> 0), r(4.5 km) = {r45:.4e} (= 0), crossing {crossing:.3} km (in [3.8, 4.4])"),
    );
}

#[test]
fn criterion_06_amplifier_success_magnitude() {
    let (eta_d, t, p) = (0.9, 0.99, 0.011);
    let analytic = amplifier_success_probability(eta_d, t, p);
    let det = DetectorModel::new(eta_d, 0.0).unwrap();
    let cfg = AmplifierConfig {
        transmittance: t,
        ancilla: Ancilla::HeraldedSpdc { p, n_pair_max: 2, trigger: det },
        detector: det,
    };
    let sim = qubit_amplifier(&one_photon_qubit(1.0), &cfg).unwrap().herald.probability;
    let ratio = sim / analytic;
    let pass = (5e-9..=5e-8).contains(&analytic) && (0.5..=2.0).contains(&ratio);
    report(
        6,
        "amplifier success magnitude",
        pass,
        format!("closed form {analytic:.3e} (in [5e-9, 5e-8]), simulation {sim:.3e}, ratio {ratio:.3} (in [0.5, 2])"),
    );
}

#[test]
fn criterion_07_gain_tradeoff() {
    let input = one_photon_qubit(FRAC_PI_4.sin());
    let det = DetectorModel::new(0.9, 0.0).unwrap();
    let ts: Vec<f64> = (0..10).map(|k| 0.9 + 0.099 * k as f64 / 9.0).collect();
    let points: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let cfg = AmplifierConfig {
                transmittance: t,
                ancilla: Ancilla::HeraldedSpdc { p: 0.011, n_pair_max: 2, trigger: det },
                detector: det,
            };
            let r = qubit_amplifier(&input, &cfg).unwrap();
            (r.gain.unwrap(), r.herald.probability)
        })
        .collect();
    let gain_up = points.windows(2).all(|w| w[1].0 > w[0].0);
    let herald_down = points.windows(2).all(|w| w[1].1 < w[0].1);
    let (first, last) = (points[0], points[points.len() - 1]);
    report(
        7,
        "gain trade-off",
        gain_up && herald_down,
        format!(
            "T 0.9 → 0.999: gain {:.3} → {:.3} (strictly rising: {gain_up}), herald {:.3e} → {:.3e} (strictly falling: {herald_down})",
            first.0, last.0, first.1, last.1
        ),
    );
}

#[test]
fn criterion_08_heralding_defeats_loss() {
    let lengths = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0];
    let mut details = Vec::new();
    let mut pass = true;
    for arch in [Architecture::LocalHeralding, Architecture::ThirdParty] {
        let runs: Vec<RunResult> = lengths
            .iter()
            .map(|&l| run(&Scenario { l_total: l, ..ideal_heralded(arch) }).unwrap())
            .collect();
        let dchsh = (runs[0].chsh - runs[runs.len() - 1].chsh).abs();
        let xs: Vec<f64> = runs.iter().map(|r| r.notes.eta_t.ln()).collect();
        let ys: Vec<f64> = runs.iter().map(|r| r.herald_probability.ln()).collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        let slope_err = (slope - 1.0).abs();
        pass &= dchsh < 1e-6 && slope_err < 1e-3;
        details.push(format!("{arch:?}: |ΔS| = {dchsh:.1e} (< 1e-6), herald slope vs η_t {slope:.6} (rel err < 1e-3)"));
    }
    report(8, "heralding defeats loss", pass, details.join("; "));
}

#[test]
fn criterion_09_herald_independence() {
    let scenarios = [
        ideal_heralded(Architecture::ThirdParty),
        Scenario {
            architecture: Architecture::ThirdParty,
            l_total: 20.0,
            p: 0.01,
            p_dc: 1e-4,
            ..Scenario::default()
        },
    ];
    let worst = scenarios
        .iter()
        .map(|s| run(s).unwrap().notes.herald_independence_residual.unwrap())
        .fold(0.0, f64::max);
    report(9, "herald independence", worst < 1e-9, format!("max variation across (x, y) = {worst:.1e} (< 1e-9)"));
}

#[test]
fn criterion_10_loophole_faking() {
    let at_one = loophole_attack(1.0);
    let etas: Vec<f64> = (1..=100).map(|k| k as f64 / 100.0).collect();
    let values: Vec<f64> = etas.iter().map(|&e| loophole_attack(e)).collect();
    let non_increasing = values.windows(2).all(|w| w[1] <= w[0] + 1e-9);
    let exceeds = etas.iter().zip(&values).any(|(&e, &v)| e >= 2.0 / 3.0 - 1e-3 && v > 2.0 * SQRT_2);
    let near_zero = loophole_attack(1e-3);
    let pass = (at_one - 2.0).abs() < 1e-9 && non_increasing && exceeds && (near_zero - 4.0).abs() < 1e-6;
    report(
        10,
        "loophole faking",
        pass,
        format!(
            "value(1) = {at_one:.6}, non-increasing: {non_increasing}, > 2√2 at some η ≥ 2/3: {exceeds}, value(1e-3) = {near_zero:.6}"
        ),
    );
}

#[test]
fn criterion_11_throughput_composition() {
    let optical = ideal_heralded(Architecture::LocalHeralding);
    let res = run(&optical).unwrap();
    let forced = RunResult {
        herald_probability: 1e-8,
        ..res.clone()
    };
    let bits = secret_bits_per_second(&optical, &forced);
    let optical_ok = optical.rep_rate == 1e8 && (bits - forced.key_rate).abs() <= 1e-9 * forced.key_rate.max(1.0);
    let rates: Vec<f64> = [1e6, 1e8, 1e10]
        .iter()
        .map(|&rep| {
            effective_round_rate(&Scenario {
                rep_rate: rep,
                readout_time: 2e-6,
                ..optical.clone()
            })
        })
        .collect();
    let capped = rates[1] == 5e5 && rates[2] == 5e5 && rates[0] <= 5e5;
    report(
        11,
        "throughput composition",
        optical_ok && capped,
        format!(
            "all-optical: {bits:.6} bit/s for key rate {:.6}; matter nodes at rep 1e6/1e8/1e10: {:?} rounds/s (cap 5e5)",
            forced.key_rate, rates
        ),
    );
}

#[test]
fn criterion_12_end_to_end_session() {
    let file = ScenarioFile {
        scenario: Scenario {
            eta_d: 1.0,
            p_dc: 0.0,
            source_model: SourceModel::IdealPair,
            ..Scenario::default()
        },
        session_rounds: 100_000,
        ..ScenarioFile::default()
    };
    let seed = 20_240_601;
    let a = cmd_session(&file, seed, Some(1)).unwrap();
    let b = cmd_session(&file, seed, Some(1)).unwrap();
    let c = cmd_session(&file, seed, Some(4)).unwrap();
    let bytes = a.transcript.to_bytes();
    let repeat_ok = bytes == b.transcript.to_bytes();
    let jobs_ok = bytes == c.transcript.to_bytes();
    let target = a.n_raw as f64 * a.key_rate;
    let len = a.key_bits.len() as f64;
    let len_ok = target > 0.0 && (len - target).abs() <= 0.05 * target;
    let pass = a.status == SessionStatus::Key && a.keys_match() && len_ok && repeat_ok && jobs_ok;
    report(
        12,
        "end-to-end session",
        pass,
        format!(
            "status {:?}, keys match: {}, key {len} bits vs n_raw·r = {target:.1} (±5%), transcript repeat identical: {repeat_ok}, across jobs 1/4: {jobs_ok}",
            a.status,
            a.keys_match()
        ),
    );
}
