use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subelliptic::algebra::StratifiedAlgebra;
use subelliptic::frame::HorizontalFrame;
use subelliptic::poly::SparsePolynomial;

fn presets() -> Vec<StratifiedAlgebra> {
    vec![StratifiedAlgebra::abelian(3), StratifiedAlgebra::heisenberg(), StratifiedAlgebra::engel()]
}

/// All monomials in `d` variables of total degree at most `max`.
fn monomials(d: usize, max: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|e: Vec<u32>| {
                let used: u32 = e.iter().sum();
                (0..=max - used).map(move |k| {
                    let mut e2 = e.clone();
                    e2.push(k);
                    e2
                })
            })
            .collect();
    }
    out
}

#[test]
fn frame_differentiates_along_right_translations() {
    for alg in presets() {
        let d = alg.dim();
        let frame = HorizontalFrame::derive(Arc::new(alg.clone()));
        for i in 0..frame.len() {
            // x ∗ (t e_i) as polynomials in (x, t).
            let subs: Vec<SparsePolynomial> = (0..2 * d)
                .map(|j| match j {
                    j if j < d => SparsePolynomial::var(d + 1, j),
                    j if j - d == i => SparsePolynomial::var(d + 1, d),
                    _ => SparsePolynomial::zero(d + 1),
                })
                .collect();
            let moved: Vec<SparsePolynomial> = alg.product_polynomials().iter().map(|p| p.compose(&subs)).collect();
            for e in monomials(d, 4) {
                let f = SparsePolynomial::monomial(d, e.clone(), BigRational::from_integer(BigInt::from(1)));
                let along = f.compose(&moved).partial(d).drop_var_at_zero(d);
                assert_eq!(frame.field(i).apply(&f), along, "{} X{} on {e:?}", alg.name(), i + 1);
            }
        }
    }
}

#[test]
fn frame_is_triangular() {
    for alg in presets() {
        let frame = HorizontalFrame::derive(Arc::new(alg));
        for f in frame.fields() {
            for (k, c) in f.components.iter().enumerate() {
                assert!(c.partial(k).is_zero());
            }
        }
    }
}

#[test]
fn rational_dilations_are_automorphisms() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut r = || BigRational::new(BigInt::from(rng.random_range(-12i64..=12)), BigInt::from(rng.random_range(1i64..=7)));
    for alg in presets() {
        let d = alg.dim();
        for _ in 0..100 {
            let x: Vec<BigRational> = (0..d).map(|_| r()).collect();
            let y: Vec<BigRational> = (0..d).map(|_| r()).collect();
            let mut t = r();
            if t <= BigRational::from_integer(BigInt::from(0)) {
                t = -t + BigRational::from_integer(BigInt::from(1));
            }
            let lhs = alg.dilate_exact(&t, &alg.bch_product_exact(&x, &y).unwrap()).unwrap();
            let rhs = alg
                .bch_product_exact(&alg.dilate_exact(&t, &x).unwrap(), &alg.dilate_exact(&t, &y).unwrap())
                .unwrap();
            assert_eq!(lhs, rhs);
        }
    }
}

#[test]
fn norm_homogeneity_to_round_off() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for alg in presets() {
        for _ in 0..1000 {
            let x: Vec<f64> = (0..alg.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = rng.random_range(0.05..20.0);
            let lhs = alg.homogeneous_norm(&alg.dilate(t, &x).unwrap());
            let rhs = t * alg.homogeneous_norm(&x);
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0), "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn quasi_triangle_constant_per_preset() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for alg in presets() {
        let mut k = 0.0f64;
        for _ in 0..20_000 {
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            let x: Vec<f64> = (0..alg.dim()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..alg.dim()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let ratio = alg.homogeneous_norm(&alg.mul(&x, &y)) / (alg.homogeneous_norm(&x) + alg.homogeneous_norm(&y));
            k = k.max(ratio);
        }
        println!("{}: fitted quasi-triangle constant K = {k:.4}", alg.name());
        assert!((0.9..3.0).contains(&k), "{}: K = {k}", alg.name());
    }
}
