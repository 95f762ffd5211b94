use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subelliptic::algebra::StratifiedAlgebra;

fn algebras() -> Vec<StratifiedAlgebra> {
    vec![StratifiedAlgebra::heisenberg(), StratifiedAlgebra::engel(), StratifiedAlgebra::preset("heisenberg", Some(5)).unwrap()]
}

fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, d)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn product_is_associative(k in 0usize..3, seed in any::<u64>()) {
        let alg = &algebras()[k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [x, y, z]: [Vec<f64>; 3] = std::array::from_fn(|_| (0..alg.dim()).map(|_| rng.random_range(-3.0..3.0)).collect());
        let left = alg.mul(&alg.mul(&x, &y), &z);
        let right = alg.mul(&x, &alg.mul(&y, &z));
        prop_assert!(close(&left, &right, 1e-12), "{left:?} vs {right:?}");
    }

    #[test]
    fn dilations_are_automorphisms(x in point(4), y in point(4), t in 0.1..5.0f64) {
        let alg = StratifiedAlgebra::engel();
        let lhs = alg.dilate(t, &alg.mul(&x, &y)).unwrap();
        let rhs = alg.mul(&alg.dilate(t, &x).unwrap(), &alg.dilate(t, &y).unwrap());
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn norm_is_homogeneous(k in 0usize..3, seed in any::<u64>(), t in 0.05..20.0f64) {
        let alg = &algebras()[k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..alg.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scaled = alg.homogeneous_norm(&alg.dilate(t, &x).unwrap());
        let want = t * alg.homogeneous_norm(&x);
        prop_assert!((scaled - want).abs() <= 1e-10 * want.max(1.0));
    }

    #[test]
    fn quasi_distance_is_left_invariant(x in point(4), y in point(4), z in point(4)) {
        let alg = StratifiedAlgebra::engel();
        let d = alg.quasi_distance(&x, &y);
        let moved = alg.quasi_distance(&alg.mul(&z, &x), &alg.mul(&z, &y));
        prop_assert!((d - moved).abs() <= 1e-10 * d.max(1.0), "{d} vs {moved}");
    }

    #[test]
    fn norm_satisfies_a_quasi_triangle_inequality(x in point(3), y in point(3)) {
        let alg = StratifiedAlgebra::heisenberg();
        let lhs = alg.homogeneous_norm(&alg.mul(&x, &y));
        let rhs = alg.homogeneous_norm(&x) + alg.homogeneous_norm(&y);
        prop_assert!(lhs <= 2.0 * rhs + 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn identity_and_inverse(x in point(4)) {
        let alg = StratifiedAlgebra::engel();
        let e = alg.mul(&x, &alg.inverse(&x));
        prop_assert!(e.iter().all(|v| v.abs() <= 1e-12));
        prop_assert_eq!(alg.quasi_distance(&x, &x), 0.0);
    }
}

#[test]
fn quasi_distance_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for alg in algebras() {
        for _ in 0..1000 {
            let x: Vec<f64> = (0..alg.dim()).map(|_| rng.random_range(-4.0..4.0)).collect();
            let y: Vec<f64> = (0..alg.dim()).map(|_| rng.random_range(-4.0..4.0)).collect();
            assert!((alg.quasi_distance(&x, &y) - alg.quasi_distance(&y, &x)).abs() <= 1e-12);
        }
    }
}

#[test]
fn first_layer_unit_has_norm_one() {
    let alg = StratifiedAlgebra::heisenberg();
    assert_eq!(alg.quasi_distance(&[0.0; 3], &[1.0, 0.0, 0.0]), 1.0);
}
