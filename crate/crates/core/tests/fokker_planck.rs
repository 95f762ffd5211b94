use std::sync::Arc;

use subelliptic::algebra::StratifiedAlgebra;
use subelliptic::drift::DriftSpec;
use subelliptic::fp::{build_operators, fp_solve, mollified_dirac, InitialDatum};
use subelliptic::frame::HorizontalFrame;
use subelliptic::grid::{DensityField, Grid};
use subelliptic::measures::l1_distance;

fn heisenberg() -> (Arc<StratifiedAlgebra>, HorizontalFrame) {
    let a = Arc::new(StratifiedAlgebra::heisenberg());
    (a.clone(), HorizontalFrame::derive(a))
}

fn heat(grid: &Grid, t: f64, eps: f64) -> DensityField {
    let (alg, frame) = heisenberg();
    let ops = build_operators(&frame, grid, &DriftSpec::zero(2)).unwrap();
    let datum = mollified_dirac(&alg, &[0.0; 3], eps, grid).unwrap();
    fp_solve(&ops, &datum, 0.0, t, 0.9 * ops.stable_dt(), &[t]).unwrap().snapshots.remove(0)
}

fn marginal_error(rho: &DensityField, t: f64) -> f64 {
    let m = rho.marginal(&[0, 1]).unwrap();
    let var = 2.0 * t;
    let vol = m.grid.cell_volume();
    (0..m.grid.node_count())
        .map(|i| {
            let p = m.grid.node(i);
            let g = (-(p[0] * p[0] + p[1] * p[1]) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var);
            (m.values[i] - g).abs() * vol
        })
        .sum()
}

#[test]
fn heat_solution_keeps_the_rotation_symmetry() {
    let grid = Grid::centered(&[3.0, 3.0, 1.0], &[24, 24, 24]).unwrap();
    let rho = heat(&grid, 0.1, 0.3);
    let top = rho.max();
    let n = grid.cells()[0];
    let mut worst = 0.0f64;
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=grid.cells()[2] {
                let a = rho.values[grid.flat_index(&[i, j, k])];
                let b = rho.values[grid.flat_index(&[n - i, n - j, k])];
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-10 * top, "asymmetry {worst:e} against max {top:e}");
}

#[test]
fn plateau_obeys_the_maximum_principle() {
    let (_, frame) = heisenberg();
    let grid = Grid::centered(&[2.0, 2.0, 1.0], &[20, 20, 20]).unwrap();
    let field = DensityField::from_fn(grid.clone(), 0.0, |x| {
        if x[0].abs() <= 0.6 && x[1].abs() <= 0.6 && x[2].abs() <= 0.3 {
            1.0
        } else {
            0.0
        }
    });
    let datum = InitialDatum::density(field).unwrap();
    let sup = datum.field().max();
    for beta in [[0.0, 0.0], [0.8, -0.4]] {
        let ops = build_operators(&frame, &grid, &DriftSpec::constant(&beta)).unwrap();
        let times = [0.02, 0.05, 0.1];
        let sol = fp_solve(&ops, &datum, 0.0, 0.1, 0.9 * ops.stable_dt(), &times).unwrap();
        for r in &sol.monitors.rows {
            assert!(r.min >= -1e-12, "min {} at {}", r.min, r.time);
            assert!(r.max <= sup + 1e-6, "max {} above {sup} at {}", r.max, r.time);
            assert!((r.mass + r.outflux - 1.0).abs() <= 1e-8);
            assert!(r.mass <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn time_refinement_converges() {
    let (alg, frame) = heisenberg();
    let grid = Grid::centered(&[2.5, 2.5, 1.0], &[20, 20, 20]).unwrap();
    let ops = build_operators(&frame, &grid, &DriftSpec::constant(&[1.0, 0.5])).unwrap();
    let datum = mollified_dirac(&alg, &[0.0; 3], 0.4, &grid).unwrap();
    let base = 0.9 * ops.stable_dt();
    let run = |dt: f64| fp_solve(&ops, &datum, 0.0, 0.1, dt, &[0.1]).unwrap().snapshots.remove(0);
    let fine = run(base / 8.0);
    let e1 = l1_distance(&run(base), &fine).unwrap();
    let e2 = l1_distance(&run(base / 2.0), &fine).unwrap();
    assert!(e2 < 0.7 * e1, "{e2} vs {e1}");
}

#[test]
fn spatial_refinement_improves_the_gaussian_marginal() {
    let t = 0.25;
    let coarse = marginal_error(&heat(&Grid::centered(&[3.5, 3.5, 1.5], &[24, 24, 32]).unwrap(), t, 0.3), t);
    let fine = marginal_error(&heat(&Grid::centered(&[3.5, 3.5, 1.5], &[48, 48, 64]).unwrap(), t, 0.3), t);
    assert!(coarse / fine >= 1.5, "coarse {coarse}, fine {fine}");
}

fn gaussian(grid: &Grid, shift: f64) -> DensityField {
    DensityField::from_fn(grid.clone(), 0.0, |x| {
        let r2 = (x[0] - shift).powi(2) + x[1] * x[1];
        (-r2 / 0.5).exp() / (0.5 * std::f64::consts::PI)
    })
}

#[test]
fn l1_distance_of_shifted_gaussians_is_monotone() {
    let grid = Grid::centered(&[4.0, 4.0], &[80, 80]).unwrap();
    let g = gaussian(&grid, 0.0);
    assert_eq!(l1_distance(&g, &g).unwrap(), 0.0);
    let d: Vec<f64> = [0.4, 0.2, 0.1].iter().map(|h| l1_distance(&g, &gaussian(&grid, *h)).unwrap()).collect();
    assert!(d[0] > d[1] && d[1] > d[2] && d[2] > 0.0, "{d:?}");
    let mut a = DensityField::zeros(grid.clone(), 0.0);
    let mut b = DensityField::zeros(grid.clone(), 0.0);
    a.values[grid.flat_index(&[10, 10])] = 1.0 / grid.cell_volume();
    b.values[grid.flat_index(&[60, 60])] = 1.0 / grid.cell_volume();
    assert!((l1_distance(&a, &b).unwrap() - 2.0).abs() <= 1e-12);
    assert!(l1_distance(&a, &DensityField::zeros(Grid::centered(&[1.0, 1.0], &[80, 80]).unwrap(), 0.0)).is_err());
}
