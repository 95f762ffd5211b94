use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subelliptic::algebra::StratifiedAlgebra;
use subelliptic::measures::{fortet_mourier, EmpiricalMeasure};

/// The LP over `(f, M, L)` written out directly.
fn lp_value(alg: &StratifiedAlgebra, atoms: &[Vec<f64>], w: &[f64]) -> f64 {
    let mut p = Problem::new(OptimizationDirection::Maximize);
    let f: Vec<_> = w.iter().map(|&wi| p.add_var(wi, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    let m = p.add_var(0.0, (0.0, f64::INFINITY));
    let l = p.add_var(0.0, (0.0, f64::INFINITY));
    p.add_constraint([(m, 1.0), (l, 1.0)], ComparisonOp::Le, 1.0);
    for (i, &fi) in f.iter().enumerate() {
        p.add_constraint([(fi, 1.0), (m, -1.0)], ComparisonOp::Le, 0.0);
        p.add_constraint([(fi, -1.0), (m, -1.0)], ComparisonOp::Le, 0.0);
        for (j, &fj) in f.iter().enumerate() {
            if i != j {
                let d = alg.quasi_distance(&atoms[i], &atoms[j]);
                p.add_constraint([(fi, 1.0), (fj, -1.0), (l, -d)], ComparisonOp::Le, 0.0);
            }
        }
    }
    p.solve().unwrap().objective()
}

fn random_atoms(rng: &mut ChaCha8Rng, n: usize, d: usize, r: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-r..r)).collect()).collect()
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.01..1.0)).collect()
}

#[test]
fn matches_a_generic_lp_solver() {
    let alg = StratifiedAlgebra::heisenberg();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for case in 0..25 {
        let (na, nb) = (rng.random_range(1..7), rng.random_range(1..7));
        let scale = [0.1, 1.0, 3.0][case % 3];
        let a = random_atoms(&mut rng, na, 3, scale);
        let b = random_atoms(&mut rng, nb, 3, scale);
        let mu = EmpiricalMeasure::new(a.clone(), random_weights(&mut rng, na)).unwrap();
        let nu = EmpiricalMeasure::new(b.clone(), random_weights(&mut rng, nb)).unwrap();
        let mut atoms = a;
        atoms.extend(b);
        let w: Vec<f64> = mu.weights().iter().copied().chain(nu.weights().iter().map(|v| -v)).collect();
        let want = lp_value(&alg, &atoms, &w);
        let got = fortet_mourier(&alg, &mu, &nu).unwrap().value;
        assert!((got - want).abs() <= 1e-8, "case {case}: {got} vs {want}");
    }
}

#[test]
fn two_diracs_follow_the_closed_form() {
    let alg = StratifiedAlgebra::heisenberg();
    for d in [0.01, 0.5, 1.0, 2.0, 7.0, 1e3] {
        let x = vec![0.0; 3];
        let y = vec![d, 0.0, 0.0];
        let got = fortet_mourier(&alg, &EmpiricalMeasure::dirac(x.clone()), &EmpiricalMeasure::dirac(y.clone())).unwrap().value;
        let closed = 2.0 * d / (2.0 + d);
        let lp = lp_value(&alg, &[x, y], &[1.0, -1.0]);
        assert!((got - closed).abs() <= 1e-10, "d = {d}: {got} vs {closed}");
        assert!((lp - closed).abs() <= 1e-8);
    }
    let far = 2.0 * 1e3 / (2.0 + 1e3);
    assert!(2.0 - far < 4e-3);
}

#[test]
fn metric_axioms_on_random_triples() {
    let alg = StratifiedAlgebra::heisenberg();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..50 {
        let support = random_atoms(&mut rng, 20, 3, 1.5);
        let [a, b, c]: [EmpiricalMeasure; 3] =
            std::array::from_fn(|_| EmpiricalMeasure::new(support.clone(), random_weights(&mut rng, 20)).unwrap());
        let ab = fortet_mourier(&alg, &a, &b).unwrap().value;
        let ba = fortet_mourier(&alg, &b, &a).unwrap().value;
        let bc = fortet_mourier(&alg, &b, &c).unwrap().value;
        let ac = fortet_mourier(&alg, &a, &c).unwrap().value;
        assert!((ab - ba).abs() <= 1e-8);
        assert!(ac <= ab + bc + 1e-8);
        assert!((0.0..=2.0).contains(&ab));
        let tv: f64 = a.weights().iter().zip(b.weights()).map(|(x, y)| (x - y).abs()).sum();
        assert!(ab <= tv + 1e-12, "{ab} > TV {tv}");
        assert_eq!(fortet_mourier(&alg, &a, &a).unwrap().value, 0.0);
    }
}

#[test]
fn potentials_are_feasible() {
    let alg = StratifiedAlgebra::engel();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mu = EmpiricalMeasure::uniform(random_atoms(&mut rng, 30, 4, 2.0)).unwrap();
    let nu = EmpiricalMeasure::uniform(random_atoms(&mut rng, 30, 4, 2.0)).unwrap();
    let r = fortet_mourier(&alg, &mu, &nu).unwrap();
    assert!(r.sup + r.lipschitz <= 1.0 + 1e-12);
    let atoms: Vec<Vec<f64>> = mu.atoms().iter().chain(nu.atoms()).cloned().collect();
    for (i, fi) in r.potentials.iter().enumerate() {
        assert!(fi.abs() <= r.sup + 1e-9);
        for (j, fj) in r.potentials.iter().enumerate() {
            let d = alg.quasi_distance(&atoms[i], &atoms[j]).min(alg.quasi_distance(&atoms[j], &atoms[i]));
            assert!(fi - fj <= r.lipschitz * d + 1e-9);
        }
    }
    let dual: f64 = r.potentials[..30].iter().sum::<f64>() / 30.0 - r.potentials[30..].iter().sum::<f64>() / 30.0;
    assert!((dual - r.value).abs() <= 1e-9);
}
