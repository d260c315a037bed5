use diqkd_core::photonics::{
    amplifier_success_probability, beamsplitter_unitary, polarization_rotation, qubit_amplifier, spdc_source,
    AmplifierConfig, Ancilla, DetectorModel, ModeEnsemble, ModeState,
};
use diqkd_core::qstate::{CVector, DensityOperator};
use num_complex::Complex64;
use proptest::prelude::*;

fn random_two_mode(n_max: usize, amps: &[(f64, f64)]) -> ModeState {
    let mut terms = Vec::new();
    let mut k = 0;
    for i in 0..=n_max {
        for j in 0..=n_max {
            if i + j <= n_max {
                let (re, im) = amps[k % amps.len()];
                terms.push((vec![i, j], Complex64::new(re, im)));
                k += 1;
            }
        }
    }
    ModeState::from_terms(2, n_max, &terms).unwrap().normalized()
}

proptest! {
    #[test]
    fn mode_unitaries_preserve_norm(amps in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 6), t in 0.0..1.0f64, th in -3.2..3.2f64) {
        // Total photon number ≤ 2 fits a cutoff of 2 in every output mode.
        let s = random_two_mode(2, &amps);
        let out = s.apply_mode_unitary(0, 1, &beamsplitter_unitary(t)).unwrap();
        prop_assert!((out.norm_sqr() - 1.0).abs() < 1e-12);
        let out = out.apply_mode_unitary(1, 0, &polarization_rotation(th)).unwrap();
        prop_assert!((out.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beamsplitter_inverse_restores_state(amps in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 6), t in 0.0..1.0f64) {
        let s = random_two_mode(2, &amps);
        let u = beamsplitter_unitary(t);
        let inv = [[u[0][0].conj(), u[1][0].conj()], [u[0][1].conj(), u[1][1].conj()]];
        let back = s.apply_mode_unitary(0, 1, &u).unwrap().apply_mode_unitary(0, 1, &inv).unwrap();
        prop_assert!((back.inner(&s).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_preserves_trace(p in 0.0..0.3f64, eta in 0.0..1.0f64) {
        let s = ModeEnsemble::from(spdc_source(p, 2, 2).unwrap());
        let lossy = s.loss(0, eta).unwrap().loss(3, eta).unwrap();
        prop_assert!((lossy.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn click_probability_monotone(eta in 0.0..1.0f64, dc in 0.0..0.1f64, n in 0usize..5) {
        let d = DetectorModel::new(eta, dc).unwrap();
        prop_assert!(d.click_probability(n + 1) >= d.click_probability(n));
        prop_assert!((d.click_probability(0) - dc).abs() < 1e-15);
    }
}

fn amplifier_input(beta_h: Complex64, beta_v: Complex64) -> (f64, DensityOperator) {
    let alpha = (1.0 - beta_h.norm_sqr() - beta_v.norm_sqr()).sqrt();
    let v = CVector::from_vec(vec![Complex64::new(alpha, 0.0), beta_v, beta_h, Complex64::new(0.0, 0.0)]);
    (alpha, DensityOperator::from_pure(&v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn amplifier_output_matches_ideal_near_unit_transmittance(
        bh in (-0.6..0.6f64, -0.6..0.6f64),
        bv in (-0.6..0.6f64, -0.6..0.6f64),
        a in 0.1..1.0f64,
    ) {
        let beta_h = Complex64::new(bh.0, bh.1);
        let beta_v = Complex64::new(bv.0, bv.1);
        let scale = 1.0 / (a * a + beta_h.norm_sqr() + beta_v.norm_sqr()).sqrt();
        let (alpha, input) = amplifier_input(beta_h * scale, beta_v * scale);
        let t = 1.0 - 1e-7;
        let cfg = AmplifierConfig { transmittance: t, ancilla: Ancilla::Ideal, detector: DetectorModel::ideal() };
        let res = qubit_amplifier(&input, &cfg).unwrap();
        let g = (t / (1.0 - t)).sqrt();
        let rho = res.herald.conditional_state.unwrap();
        let side = (rho.dim() as f64).sqrt() as usize;
        let mut ideal = CVector::zeros(rho.dim());
        ideal[0] = Complex64::new(alpha, 0.0);
        ideal[side] = beta_h * scale * g;
        ideal[1] = beta_v * scale * g;
        let norm = ideal.norm();
        let f = rho.fidelity_with_pure(&(ideal / Complex64::new(norm, 0.0)));
        prop_assert!(f > 1.0 - 1e-6, "F = {f}");
    }
}

#[test]
fn heralded_ancilla_success_tracks_leading_order() {
    let (_, single) = amplifier_input(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0));
    for &(eta_d, t, p) in &[(0.9, 0.99, 0.011), (0.8, 0.95, 0.02), (0.95, 0.9, 0.005), (0.7, 0.99, 0.03)] {
        let det = DetectorModel::new(eta_d, 0.0).unwrap();
        let cfg = AmplifierConfig {
            transmittance: t,
            ancilla: Ancilla::HeraldedSpdc { p, n_pair_max: 2, trigger: det },
            detector: det,
        };
        let sim = qubit_amplifier(&single, &cfg).unwrap().herald.probability;
        let analytic = amplifier_success_probability(eta_d, t, p);
        let ratio = sim / analytic;
        assert!((0.5..=2.0).contains(&ratio), "eta_d={eta_d} T={t} p={p}: ratio {ratio}");
    }
}
