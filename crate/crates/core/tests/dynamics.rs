mod common;

use common::{fk_step, random_potential};
use green_bundle::dynamics::{
    apply_inverse, apply_map, apply_map_implicit, evolve, extremal_residual, momentum_from_configuration, tangent_map, PhasePoint,
};
use green_bundle::generating::{fk_generating, PotentialSpec, SequenceSpec};
use green_bundle::linalg::{symplectic_j, Matrix};
use green_bundle::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn point(v: &[f64], d: usize) -> PhasePoint {
    PhasePoint::from_slices(&v[..d], &v[d..2 * d])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn closed_form_matches_oracle_and_newton(seed in 0u64..100_000, d in 1usize..=3, coords in prop::collection::vec(-3.0f64..3.0, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_potential(&mut rng, d, 3, 2, 0.2);
        let s = fk_generating(v.clone());
        let x = point(&coords, d);
        let y = apply_map(&s, &x).unwrap();
        let (p, q) = fk_step(&v, &coords[..d], &coords[d..2 * d]);
        for i in 0..d {
            prop_assert!((y.p[i] - p[i]).abs() < 1e-12);
            prop_assert!((y.q[i] - q[i]).abs() < 1e-12);
        }
        let z = apply_map_implicit(&s, &x).unwrap();
        prop_assert!(z.point.distance(&y) < 1e-10);
    }

    #[test]
    fn inverse_round_trip(seed in 0u64..100_000, d in 1usize..=3, coords in prop::collection::vec(-3.0f64..3.0, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = fk_generating(random_potential(&mut rng, d, 3, 2, 0.2));
        let x = point(&coords, d);
        let back = apply_inverse(&s, &apply_map(&s, &x).unwrap()).unwrap();
        prop_assert!(back.distance(&x) < 1e-12);
        let fwd = apply_map(&s, &apply_inverse(&s, &x).unwrap()).unwrap();
        prop_assert!(fwd.distance(&x) < 1e-12);
    }

    #[test]
    fn tangent_map_is_symplectic_and_matches_differences(seed in 0u64..100_000, d in 1usize..=3, coords in prop::collection::vec(-3.0f64..3.0, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = fk_generating(random_potential(&mut rng, d, 3, 2, 0.2));
        let x = point(&coords, d);
        let m = tangent_map(&s, &x).unwrap();
        let j = symplectic_j(d);
        prop_assert!((m.transpose() * &j * &m - j).amax() < 1e-10);

        // Columns by central differences in (p, q) ordering.
        let h = 1e-6;
        for c in 0..2 * d {
            let mut up = coords[..2 * d].to_vec();
            let mut dn = up.clone();
            up[c] += h;
            dn[c] -= h;
            let yu = apply_map(&s, &point(&up, d)).unwrap();
            let yd = apply_map(&s, &point(&dn, d)).unwrap();
            for r in 0..d {
                prop_assert!(((yu.p[r] - yd.p[r]) / (2.0 * h) - m[(r, c)]).abs() < 1e-6);
                prop_assert!(((yu.q[r] - yd.q[r]) / (2.0 * h) - m[(d + r, c)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lattice_equivariance(seed in 0u64..100_000, d in 1usize..=3, coords in prop::collection::vec(-3.0f64..3.0, 6), shifts in prop::collection::vec(-3i64..=3, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = fk_generating(random_potential(&mut rng, d, 3, 2, 0.2));
        let x = point(&coords, d);
        let y = apply_map(&s, &x).unwrap();
        let mut moved = coords[..2 * d].to_vec();
        for i in 0..d {
            moved[i] += shifts[i] as f64;
            moved[d + i] += shifts[d + i] as f64;
        }
        let ym = apply_map(&s, &point(&moved, d)).unwrap();
        for i in 0..d {
            // T(p + e, q + f) = T(p, q) + (e, e + f)
            prop_assert!((ym.p[i] - y.p[i] - shifts[i] as f64).abs() < 1e-12);
            prop_assert!((ym.q[i] - y.q[i] - (shifts[i] + shifts[d + i]) as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn orbit_configuration_is_extremal() {
    let seq = SequenceSpec::fk_periodic(vec![PotentialSpec::chirikov(0.9), PotentialSpec::chirikov(-0.4)]).unwrap();
    let orbit = evolve(&seq, &PhasePoint::from_slices(&[0.1], &[0.2]), 3, -7).unwrap();
    assert_eq!((orbit.first_index(), orbit.last_index()), (-7, 3));
    let qs = orbit.configurations();
    assert!(extremal_residual(&seq, &qs, -7).iter().all(|&r| r < 1e-12));
    let rebuilt = momentum_from_configuration(&seq, &qs, -7).unwrap();
    for (a, b) in rebuilt.points().iter().zip(orbit.points()) {
        assert!(a.distance(b) < 1e-12);
    }
    let mut bad = qs.clone();
    bad[4][0] += 1e-3;
    assert!(matches!(momentum_from_configuration(&seq, &bad, -7), Err(Error::NotExtremal { .. })));
}

#[test]
fn orbit_csv_is_plot_ready() {
    let seq = SequenceSpec::fk_periodic(vec![PotentialSpec::zero(1)]).unwrap();
    let orbit = evolve(&seq, &PhasePoint::from_slices(&[0.5], &[0.25]), 0, 2).unwrap();
    let csv = orbit.to_csv(&seq);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,p_1,q_1,residual");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("2,5e-1,1.25e0,"));
}

#[test]
fn free_tangent_map() {
    let s = fk_generating(PotentialSpec::zero(1));
    let m = tangent_map(&s, &PhasePoint::from_slices(&[0.0], &[0.0])).unwrap();
    assert_eq!(m, Matrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]));
}
