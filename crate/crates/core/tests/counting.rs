use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sunspin::protocols::{coherent_input, ideal_measurement_unitary, projection_noise_scaling, qubit_pair};
use sunspin::readout::*;
use sunspin::spin_core::*;

fn qubit_state(theta: f64, phi: f64) -> SpinState {
    let mut a = vec![ZERO; DIM];
    a[index_of(UP).unwrap()] = C64::from((theta / 2.0).cos());
    a[index_of(DOWN).unwrap()] = C64::from_polar((theta / 2.0).sin(), phi);
    SpinState::from_amplitudes(&a).unwrap()
}

fn expect(psi: &SpinState, op: &CMat) -> C64 {
    let a = psi.amplitudes();
    (a.adjoint() * op * a)[(0, 0)]
}

/// Ideal measurement with control phase `phi` applied on the qubit before the last pulse.
fn measurement(phi: f64) -> CMat {
    let maps = pair_rotation(qubit_pair(), Axis::X, -PI / 2.0) * ideal_measurement_unitary();
    pair_rotation(qubit_pair(), Axis::X, PI / 2.0) * pair_rotation(qubit_pair(), Axis::Z, -phi) * maps
}

#[test]
fn pair_count_variance_is_binomial() {
    let mut p = [0.0; DIM];
    p[index_of(UP).unwrap()] = 0.5;
    p[index_of(DOWN).unwrap()] = 0.5;
    let n = 10_000u64;
    let shots = 2000;
    let det = DetectionModel::ideal();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let counts: Vec<f64> = (0..shots).map(|s| sample_shot(&p, n, &det, s, &mut rng).unwrap().true_counts[index_of(UP).unwrap()] as f64).collect();
    let (_, var, _) = variance_with_error(&counts);
    let stat = (shots as f64 - 1.0) * var / (n as f64 / 4.0);
    // chi-square with 1999 dof, 0.5 % and 99.5 % points
    assert!(stat > 1839.0 && stat < 2165.0, "{stat}");
}

#[test]
fn sample_means_converge_to_populations() {
    let psi = qubit_state(1.1, 0.3).apply(&measurement(0.7));
    let p = psi.populations();
    let n = 1000u64;
    let shots = 4000;
    let det = DetectionModel::ideal();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sum = [0.0; DIM];
    for s in 0..shots {
        let r = sample_shot(&p, n, &det, s, &mut rng).unwrap();
        assert_eq!(r.true_counts.iter().sum::<u64>(), n);
        for k in 0..DIM {
            assert!(r.detected[k] <= r.true_counts[k]);
            sum[k] += r.true_counts[k] as f64;
        }
    }
    for k in 0..DIM {
        let mean = sum[k] / (shots as f64 * n as f64);
        let se = (p[k] * (1.0 - p[k]) / (shots as f64 * n as f64)).sqrt();
        assert!((mean - p[k]).abs() <= 4.0 * se + 1e-15, "level {k}: {mean} vs {}", p[k]);
    }
}

#[test]
fn detected_mean_scales_with_efficiency() {
    let det = DetectionModel::strontium();
    let k = index_of(-1.5).unwrap();
    let mut p = [0.0; DIM];
    p[k] = 0.6;
    p[index_of(-3.5).unwrap()] = 0.4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut t, mut d) = (0.0, 0.0);
    for s in 0..2000 {
        let r = sample_shot(&p, 5000, &det, s, &mut rng).unwrap();
        t += r.true_counts[k] as f64;
        d += r.detected[k] as f64;
    }
    assert!((det.efficiency[k] - 0.51).abs() < 1e-12);
    assert!((d / t - 0.51).abs() < 0.002, "{}", d / t);
}

#[test]
fn collective_operators_reproduce_pseudo_spin() {
    let (oz, oy) = collective_operators(&ideal_measurement_unitary()).unwrap();
    let [_, sy, sz] = qubit_spin();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let theta = rng.random_range(0.0..PI);
        let phi = rng.random_range(0.0..2.0 * PI);
        let psi = qubit_state(theta, phi);
        assert!((expect(&psi, &oz) - expect(&psi, &sz)).norm() < 1e-10);
        assert!((expect(&psi, &oy) - expect(&psi, &sy)).norm() < 1e-10);
    }
    let c = commutator(&oz, &oy);
    assert!(max_abs(&c) < 1e-12);
}

#[test]
fn variance_identity_independent_of_phase() {
    let n_atoms = 1000;
    for (k, phi) in [0.0, PI / 3.0, PI / 2.0].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + k as u64);
        let input = coherent_input().apply(&pair_rotation(qubit_pair(), Axis::Z, phi));
        let r = variance_check(&input, &ideal_measurement_unitary(), n_atoms, 10_000, &mut rng).unwrap();
        assert!(r.max_pull() < 3.0, "phi {phi}: {r:?}");
    }
    // coherent state along -y: transverse variance N/4 plus the additive N/4
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let r = variance_check(&coherent_input(), &ideal_measurement_unitary(), n_atoms, 10_000, &mut rng).unwrap();
    let want = n_atoms as f64 / 2.0;
    assert!((r.o_z.0 - want).abs() < 3.0 * r.o_z.1, "{r:?}");
}

#[test]
fn two_state_estimator_is_noisier() {
    let u = ideal_measurement_unitary();
    let p = coherent_input().apply(&u).populations();
    let det = DetectionModel { efficiency: [1.0; DIM], ..DetectionModel::ideal() };
    let n = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut four, mut two, mut sphi) = (vec![], vec![], vec![]);
    for s in 0..10_000 {
        let shot = sample_shot(&p, n, &det, s, &mut rng).unwrap();
        four.push(estimate_spin_projections(&shot, &det, EstimatorMode::FourState).unwrap().0);
        let (z, ph) = estimate_spin_projections(&shot, &det, EstimatorMode::TwoState).unwrap();
        two.push(z);
        sphi.push(ph);
    }
    let mean_phi = sphi.iter().sum::<f64>() / sphi.len() as f64;
    assert!((mean_phi + n as f64 / 2.0).abs() < 2.0, "{mean_phi}");
    let (m4, v4, e4) = variance_with_error(&four);
    let (m2, v2, e2) = variance_with_error(&two);
    assert!(m4.abs() < 1.0 && m2.abs() < 2.0);
    assert!(v2 - v4 > 3.0 * (e2 * e2 + e4 * e4).sqrt(), "two-state {v2} vs four-state {v4}");
}

#[test]
fn parallel_interferometer_noise_ratios() {
    let r = projection_noise_scaling(10_000, 10_000, 6).unwrap();
    for v in r.dual_ratio() {
        assert!((v / 2f64.sqrt() - 1.0).abs() < 0.1, "{r:?}");
    }
    for v in r.single_port_ratio() {
        assert!((v / 1.5f64.sqrt() - 1.0).abs() < 0.1, "{r:?}");
    }
}
