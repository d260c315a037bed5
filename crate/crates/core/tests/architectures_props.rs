use std::f64::consts::SQRT_2;

use diqkd_core::architectures::{
    distance_sweep, key_rate, run, run_local_heralding, run_third_party, secret_fraction, AncillaModel, Architecture,
    Scenario, SourceModel, RAW_X, RAW_Y,
};
use proptest::prelude::*;

fn ideal(architecture: Architecture) -> Scenario {
    Scenario {
        architecture,
        eta_d: 1.0,
        source_model: SourceModel::IdealPair,
        ancilla: AncillaModel::Ideal,
        transmittance: 1.0 - 1e-9,
        ..Scenario::default()
    }
}

#[test]
fn heralded_links_are_loss_independent() {
    for arch in [Architecture::LocalHeralding, Architecture::ThirdParty] {
        let near = run(&ideal(arch)).unwrap();
        let far = run(&Scenario { l_total: 50.0, ..ideal(arch) }).unwrap();
        assert!((near.chsh - far.chsh).abs() < 1e-6, "{arch:?}");
        assert!((near.chsh - 2.0 * SQRT_2).abs() < 1e-6, "{arch:?}: {}", near.chsh);
        let ratio = far.herald_probability / near.herald_probability;
        assert!((ratio / 0.1 - 1.0).abs() < 1e-3, "{arch:?}: {ratio}");
    }
}

#[test]
fn third_party_herald_is_independent_of_settings() {
    for s in [
        ideal(Architecture::ThirdParty),
        Scenario { architecture: Architecture::ThirdParty, l_total: 20.0, p_dc: 1e-4, p: 0.01, ..Scenario::default() },
    ] {
        let r = run_third_party(&s).unwrap();
        assert!(r.notes.herald_independence_residual.unwrap() < 1e-9);
    }
}

#[test]
fn third_party_spdc_double_pairs_fake_heralds() {
    // One pair per source heralds with probability p²/2; a double pair from a
    // single source puts one H and one V photon on the splitter with
    // probability 1/3, adding 2p²/3.
    let p: f64 = 1e-3;
    let s = Scenario { architecture: Architecture::ThirdParty, eta_d: 1.0, p, ..Scenario::default() };
    let r = run_third_party(&s).unwrap();
    let leading = p * p * (0.5 + 2.0 / 3.0);
    assert!((r.herald_probability / leading - 1.0).abs() < 5e-3, "{}", r.herald_probability);
    assert!(r.chsh < 2.0 * SQRT_2 - 0.5);
}

#[test]
fn amplifier_herald_with_spdc_ancillas_is_order_1e_minus_8() {
    let s = Scenario { architecture: Architecture::LocalHeralding, ..Scenario::default() };
    let r = run_local_heralding(&s).unwrap();
    assert!(r.herald_probability > 1e-9 && r.herald_probability < 1e-7, "{}", r.herald_probability);
}

#[test]
fn dark_counts_swamp_rare_heralds() {
    let s = Scenario { architecture: Architecture::LocalHeralding, p_dc: 1e-6, ..Scenario::default() };
    let r = run_local_heralding(&s).unwrap();
    assert!(r.chsh < 2.0 && r.key_rate == 0.0, "{}", r.chsh);
}

#[test]
fn matter_nodes_depolarize_to_node_fidelity() {
    let s = Scenario { readout_time: 2e-6, node_fidelity: 0.9, ..ideal(Architecture::ThirdParty) };
    let r = run(&s).unwrap();
    // Werner visibility (4F − 1)/3 scales the ideal value.
    let v = (4.0 * 0.9 - 1.0) / 3.0;
    assert!((r.chsh - v * 2.0 * SQRT_2).abs() < 1e-9, "{}", r.chsh);
}

#[test]
fn sweeps_keep_order_and_factorize() {
    let ls = [0.0, 10.0, 20.0, 40.0, 5.0];
    let report = distance_sweep(&ideal(Architecture::ThirdParty), &ls).unwrap();
    assert_eq!(report.points.iter().map(|p| p.l_km).collect::<Vec<_>>(), ls);
    let base = &report.points[0];
    for p in &report.points {
        assert!((p.result.key_rate - base.result.key_rate).abs() < 1e-9);
        let expected = base.bits_per_second * 10f64.powf(-0.2 * p.l_km / 10.0);
        assert!((p.bits_per_second / expected - 1.0).abs() < 1e-9);
    }
    assert!(report.herald_non_increasing && report.key_rate_non_increasing);

    let zeros = distance_sweep(&ideal(Architecture::Standard), &[0.0; 3]).unwrap();
    assert!(zeros.points.windows(2).all(|w| w[0] == w[1]));
    assert!(distance_sweep(&ideal(Architecture::Standard), &[]).is_err());
}

#[test]
fn standard_key_rate_vanishes_below_closed_form_threshold() {
    // Symmetric losses with η_overall under 2/(1+√2) leave nothing to distil.
    let l = 2.0 * (-10.0 * (0.82f64).log10() / 0.2);
    let s = Scenario { l_total: l, source_position: Some(0.5), ..ideal(Architecture::Standard) };
    let r = run(&s).unwrap();
    assert_eq!(r.key_rate, 0.0);
    assert!(r.chsh <= 2.0 + 1e-12);
    assert_eq!(key_rate(&r.table, RAW_X, RAW_Y).unwrap(), 0.0);
}

#[test]
fn standard_distance_profile_with_source_at_alice() {
    let s = Scenario { source_position: Some(0.0), ..ideal(Architecture::Standard) };
    let report = distance_sweep(&s, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 8.0]).unwrap();
    assert!(report.key_rate_non_increasing);
    // One-sided loss: S = 2√2 η, so CHSH stays above 2 until η = 1/√2.
    for p in &report.points {
        let eta = 10f64.powf(-0.02 * p.l_km);
        assert!((p.result.chsh - 2.0 * SQRT_2 * eta).abs() < 1e-9);
        assert!((p.result.qber - (1.0 - eta) / 2.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn secret_fraction_is_monotone(s1 in 1.5..3.0f64, s2 in 1.5..3.0f64, q1 in 0.0..0.5f64, q2 in 0.0..0.5f64) {
        let (slo, shi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
        let (qlo, qhi) = if q1 < q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(secret_fraction(shi, qlo) >= secret_fraction(slo, qlo));
        prop_assert!(secret_fraction(shi, qhi) <= secret_fraction(shi, qlo));
        prop_assert!(secret_fraction(s1, q1) >= 0.0);
    }

    #[test]
    fn throughput_never_exceeds_rep_rate(l in 0.0..60.0f64, rep in 1e3..1e9f64, readout in prop_oneof![Just(0.0), 1e-7..1e-5f64]) {
        let s = Scenario { l_total: l, rep_rate: rep, readout_time: readout, ..ideal(Architecture::ThirdParty) };
        let r = run(&s).unwrap();
        let bps = diqkd_core::architectures::secret_bits_per_second(&s, &r);
        prop_assert!(bps <= rep);
        prop_assert!((0.0..=1.0).contains(&r.herald_probability));
    }
}
