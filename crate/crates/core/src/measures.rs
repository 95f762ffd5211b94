//! Empirical measures, the Fortet–Mourier distance `d₀`, kernel density
//! estimates on the group and Hölder-in-time diagnostics.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::algebra::StratifiedAlgebra;
use crate::fp::{for_box, mollifier_mass, mollifier_profile, quasi_ball_extent};
use crate::grid::{DensityField, Grid};
use crate::sde::{path_rng, ItoSystem, SdeError, SimulationPlan};
use crate::stats;
use crate::transport::{FlowError, MinCostFlow};

#[derive(Debug, thiserror::Error)]
pub enum MeasureError {
    #[error("measure has no atoms")]
    Empty,
    #[error("atom {index} has {got} coordinates, expected {expected}")]
    Dimension { index: usize, got: usize, expected: usize },
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("{atoms} atoms exceed the budget of {cap}; subsample the measures or coarsen the cells")]
    TooManyAtoms { atoms: usize, cap: usize },
    #[error("grids differ")]
    GridMismatch,
    #[error("transport solver: {0}")]
    Flow(#[from] FlowError),
    #[error("simulation: {0}")]
    Sde(#[from] SdeError),
    #[error("{0}")]
    Input(String),
}

fn input(msg: impl Into<String>) -> MeasureError {
    MeasureError::Input(msg.into())
}

/// Weighted atoms with weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn uniform(atoms: Vec<Vec<f64>>) -> Result<Self, MeasureError> {
        let n = atoms.len();
        Self::new(atoms, vec![1.0 / n.max(1) as f64; n])
    }

    /// Weights must be nonnegative with positive total; they are rescaled to sum to one.
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if atoms.is_empty() {
            return Err(MeasureError::Empty);
        }
        if atoms.len() != weights.len() {
            return Err(MeasureError::Weights(format!("{} atoms but {} weights", atoms.len(), weights.len())));
        }
        let d = atoms[0].len();
        for (index, a) in atoms.iter().enumerate() {
            if a.len() != d {
                return Err(MeasureError::Dimension { index, got: a.len(), expected: d });
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(input(format!("atom {index} is not finite")));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(MeasureError::Weights("weights must be finite and nonnegative".into()));
        }
        let total = stats::stable_sum(&weights);
        if !(total > 0.0) {
            return Err(MeasureError::Weights("total weight is zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { atoms, weights })
    }

    /// Nodes of a density field as atoms, weighted by `value × cell volume`.
    pub fn from_density(field: &DensityField) -> Result<Self, MeasureError> {
        let vol = field.grid.cell_volume();
        let mut atoms = Vec::new();
        let mut weights = Vec::new();
        for (i, v) in field.values.iter().enumerate() {
            if *v > 0.0 {
                atoms.push(field.grid.node(i));
                weights.push(v * vol);
            }
        }
        Self::new(atoms, weights)
    }

    /// Dirac mass at `x`.
    pub fn dirac(x: Vec<f64>) -> Self {
        Self { atoms: vec![x], weights: vec![1.0] }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `∫ f dμ`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
        let v: Vec<f64> = self.atoms.par_iter().zip(&self.weights).map(|(a, w)| w * f(a)).collect();
        stats::stable_sum(&v)
    }
}

pub fn quasi_distance(algebra: &StratifiedAlgebra, x: &[f64], y: &[f64]) -> f64 {
    algebra.quasi_distance(x, y)
}

/// Signed weights on the merged support of two finite measures, with the
/// pairwise quasi-distance matrix (row-major).
#[derive(Clone, Debug, Serialize)]
pub struct FmProblem {
    pub atoms: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub distances: Vec<f64>,
}

/// Largest supported merged atom count.
pub const MAX_ATOMS: usize = 5000;

impl FmProblem {
    pub fn new(algebra: &StratifiedAlgebra, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<Self, MeasureError> {
        Self::from_weighted(algebra, mu.atoms(), mu.weights(), nu.atoms(), nu.weights())
    }

    /// Merges identical atoms; the weights need not be normalized.
    pub fn from_weighted(
        algebra: &StratifiedAlgebra,
        a_atoms: &[Vec<f64>],
        a_w: &[f64],
        b_atoms: &[Vec<f64>],
        b_w: &[f64],
    ) -> Result<Self, MeasureError> {
        let d = algebra.dim();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut atoms: Vec<Vec<f64>> = Vec::new();
        let mut mu = Vec::new();
        let mut nu = Vec::new();
        for (side, (list, w)) in [(a_atoms, a_w), (b_atoms, b_w)].into_iter().enumerate() {
            for (i, (x, wi)) in list.iter().zip(w).enumerate() {
                if x.len() != d {
                    return Err(MeasureError::Dimension { index: i, got: x.len(), expected: d });
                }
                let key: Vec<u64> = x.iter().map(|v| (v + 0.0).to_bits()).collect();
                let k = *index.entry(key).or_insert_with(|| {
                    atoms.push(x.clone());
                    mu.push(0.0);
                    nu.push(0.0);
                    atoms.len() - 1
                });
                if side == 0 {
                    mu[k] += wi;
                } else {
                    nu[k] += wi;
                }
            }
        }
        if atoms.len() > MAX_ATOMS {
            return Err(MeasureError::TooManyAtoms { atoms: atoms.len(), cap: MAX_ATOMS });
        }
        let n = atoms.len();
        let mut distances = vec![0.0; n * n];
        distances.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            for (j, r) in row.iter_mut().enumerate() {
                if i != j {
                    *r = algebra.quasi_distance(&atoms[i], &atoms[j]);
                }
            }
        });
        // Exact symmetry, so the LP sees one metric.
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (distances[i * n + j] + distances[j * n + i]);
                distances[i * n + j] = v;
                distances[j * n + i] = v;
            }
        }
        Ok(Self { atoms, mu, nu, distances })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.len() + j]
    }

    pub fn write_json(&self, path: &std::path::Path) -> std::io::Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self).map_err(std::io::Error::other)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FmOptions {
    /// Stop when the upper envelope is within this of the best value found.
    pub tol: f64,
    /// Nearest-neighbour arcs per atom in the initial network.
    pub neighbours: usize,
    pub max_rounds: usize,
}

impl Default for FmOptions {
    fn default() -> Self {
        Self { tol: 1e-10, neighbours: 10, max_rounds: 200 }
    }
}

/// Optimal value with the maximizing budget split and potentials.
#[derive(Clone, Debug, Serialize)]
pub struct FmResult {
    pub value: f64,
    /// Lipschitz budget `L`; the sup budget is `M = 1 − L`.
    pub lipschitz: f64,
    pub sup: f64,
    /// Duality gap of the outer search at exit.
    pub gap: f64,
    pub potentials: Vec<f64>,
    pub atoms: usize,
    pub arcs: usize,
    pub pivots: usize,
}

/// `d₀(μ, ν)` for normalized empirical measures.
pub fn fortet_mourier(algebra: &StratifiedAlgebra, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<FmResult, MeasureError> {
    solve_fm(&FmProblem::new(algebra, mu, nu)?, FmOptions::default())
}

/// Solves `max Σ f_i(μ_i − ν_i)` over `|f_i| ≤ M`, `|f_i − f_j| ≤ L d_ij`, `M + L ≤ 1`.
///
/// For fixed `L = θ` the inner problem is the dual of a transshipment with a
/// ground node: moving mass between atoms costs `θ d_ij`, creating or
/// destroying it costs `1 − θ`. Its value `g(θ)` is concave and piecewise
/// linear, and each optimal flow gives a line above `g`, so the outer
/// maximization is a cutting-plane search.
pub fn solve_fm(p: &FmProblem, opts: FmOptions) -> Result<FmResult, MeasureError> {
    let n = p.len();
    let w: Vec<f64> = p.mu.iter().zip(&p.nu).map(|(a, b)| a - b).collect();
    if n == 0 || w.iter().all(|v| *v == 0.0) {
        return Ok(FmResult {
            value: 0.0,
            lipschitz: 0.5,
            sup: 0.5,
            gap: 0.0,
            potentials: vec![0.0; n],
            atoms: n,
            arcs: 0,
            pivots: 0,
        });
    }
    let mut supply = w.clone();
    supply.push(-w.iter().sum::<f64>());
    let ground = n;
    let dmax = p.distances.iter().copied().fold(0.0, f64::max);
    let scale = 2.0 * (dmax + 1.0);
    let mut net = MinCostFlow::new(&supply, scale)?;
    // `None` marks a ground arc; `Some(d)` a pair arc of quasi-length d.
    let mut kind: Vec<Option<f64>> = vec![None; net.arc_count()];
    let add = |net: &mut MinCostFlow, kind: &mut Vec<Option<f64>>, u: usize, v: usize, d: Option<f64>| {
        net.add_arc(u, v, 0.0);
        kind.push(d);
    };
    for i in 0..n {
        add(&mut net, &mut kind, i, ground, None);
        add(&mut net, &mut kind, ground, i, None);
    }
    let k = opts.neighbours.min(n.saturating_sub(1));
    if k > 0 {
        let nbrs: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                let row = &p.distances[i * n..(i + 1) * n];
                idx.select_nth_unstable_by(k - 1, |&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
                idx.truncate(k);
                idx.sort_unstable();
                idx
            })
            .collect();
        let mut seen = std::collections::HashSet::new();
        for (i, js) in nbrs.iter().enumerate() {
            for &j in js {
                for (u, v) in [(i, j), (j, i)] {
                    if seen.insert((u, v)) {
                        add(&mut net, &mut kind, u, v, Some(p.distance(u, v)));
                    }
                }
            }
        }
    }
    let flow_tol = 1e-12 * scale;
    let max_pivots = 200 * (n + 1) * (n + 1) + 100_000;

    let mut eval = |theta: f64| -> Result<(f64, f64, f64, Vec<f64>), MeasureError> {
        for a in net.real_arcs() {
            let c = match kind[a] {
                Some(d) => theta * d,
                None => 1.0 - theta,
            };
            net.set_cost(a, c);
        }
        net.refresh_potentials();
        loop {
            net.solve(flow_tol, max_pivots)?;
            let pi: Vec<f64> = (0..n).map(|v| net.potential(v)).collect();
            let cutoff = -1e-11 * scale;
            let mut found: Vec<(f64, usize, usize)> = (0..n)
                .into_par_iter()
                .flat_map_iter(|i| {
                    let row = &p.distances[i * n..(i + 1) * n];
                    let mut best: Vec<(f64, usize, usize)> = Vec::new();
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let rc = theta * row[j] + pi[i] - pi[j];
                        if rc < cutoff {
                            best.push((rc, i, j));
                        }
                    }
                    best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
                    best.truncate(8);
                    best
                })
                .collect();
            if found.is_empty() {
                break;
            }
            found.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            found.truncate(20 * n);
            for (_, i, j) in found {
                add(&mut net, &mut kind, i, j, Some(p.distance(i, j)));
            }
        }
        let mut transport = 0.0;
        let mut ground_flow = 0.0;
        for a in net.real_arcs() {
            match kind[a] {
                Some(d) => transport += d * net.flow(a),
                None => ground_flow += net.flow(a),
            }
        }
        let value = theta * transport + (1.0 - theta) * ground_flow;
        let pg = net.potential(ground);
        let f = (0..n).map(|v| pg - net.potential(v)).collect();
        Ok((value, transport, ground_flow, f))
    };

    let mut lines: Vec<(f64, f64)> = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0.5, Vec::new());
    let mut theta = 0.5;
    let mut gap = f64::INFINITY;
    for _ in 0..opts.max_rounds {
        let (value, c, g, f) = eval(theta)?;
        if value > best.0 {
            best = (value, theta, f);
        }
        lines.push((c, g));
        let (t_star, upper) = envelope_max(&lines);
        gap = upper - best.0;
        if gap <= opts.tol * (1.0 + best.0.abs()) {
            break;
        }
        theta = t_star;
    }
    let (value, lipschitz, potentials) = best;
    Ok(FmResult {
        value: value.clamp(0.0, 2.0),
        lipschitz,
        sup: 1.0 - lipschitz,
        gap: gap.max(0.0),
        potentials,
        atoms: n,
        arcs: net.arc_count(),
        pivots: net.pivots,
    })
}

/// Maximizer of `min_k θC_k + (1 − θ)G_k` over `[0, 1]`.
fn envelope_max(lines: &[(f64, f64)]) -> (f64, f64) {
    let value = |t: f64| lines.iter().map(|(c, g)| t * c + (1.0 - t) * g).fold(f64::INFINITY, f64::min);
    let mut cands = vec![0.0, 1.0];
    for (a, la) in lines.iter().enumerate() {
        for lb in &lines[a + 1..] {
            let sa = la.0 - la.1;
            let sb = lb.0 - lb.1;
            if (sa - sb).abs() > 1e-300 {
                let t = (lb.1 - la.1) / (sa - sb);
                if (0.0..=1.0).contains(&t) {
                    cands.push(t);
                }
            }
        }
    }
    cands
        .into_iter()
        .map(|t| (t, value(t)))
        .fold((0.5, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
}

/// `d₀` between two grid densities after collapsing them onto coarse cells.
#[derive(Clone, Debug, Serialize)]
pub struct GridFm {
    pub result: FmResult,
    /// Upper bound on the change of `d₀` caused by the collapse, `2·r_max`.
    pub collapse_bound: f64,
    pub cells: Vec<usize>,
}

/// Coarse-cell centers and the largest center-to-corner quasi-distance.
pub struct CellCollapse {
    grid: Grid,
    cells: Vec<usize>,
    width: Vec<f64>,
    pub r_max: f64,
}

impl CellCollapse {
    pub fn new(algebra: &StratifiedAlgebra, grid: &Grid, cells: &[usize]) -> Result<Self, MeasureError> {
        let d = grid.dims();
        if cells.len() != d || cells.contains(&0) {
            return Err(input("coarse cell counts must be positive, one per axis"));
        }
        let width: Vec<f64> = (0..d).map(|k| (grid.upper()[k] - grid.lower()[k]) / cells[k] as f64).collect();
        let mut me = Self { grid: grid.clone(), cells: cells.to_vec(), width, r_max: 0.0 };
        let total: usize = cells.iter().product();
        let r = (0..total)
            .into_par_iter()
            .map(|c| {
                let center = me.center(c);
                let mut worst: f64 = 0.0;
                for corner in 0..(1usize << d) {
                    let y: Vec<f64> = (0..d)
                        .map(|k| center[k] + if corner >> k & 1 == 1 { 0.5 } else { -0.5 } * me.width[k])
                        .collect();
                    worst = worst.max(algebra.quasi_distance(&center, &y)).max(algebra.quasi_distance(&y, &center));
                }
                worst
            })
            .reduce(|| 0.0, f64::max);
        me.r_max = r;
        Ok(me)
    }

    fn cell_of(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for k in 0..self.cells.len() {
            let j = ((x[k] - self.grid.lower()[k]) / self.width[k]).floor();
            let j = (j.max(0.0) as usize).min(self.cells[k] - 1);
            idx = idx * self.cells[k] + j;
        }
        idx
    }

    fn center(&self, mut c: usize) -> Vec<f64> {
        let d = self.cells.len();
        let mut out = vec![0.0; d];
        for k in (0..d).rev() {
            let j = c % self.cells[k];
            c /= self.cells[k];
            out[k] = self.grid.lower()[k] + (j as f64 + 0.5) * self.width[k];
        }
        out
    }

    fn collapse(&self, atoms: impl Iterator<Item = (Vec<f64>, f64)>) -> Vec<(usize, f64)> {
        let mut acc: std::collections::BTreeMap<usize, f64> = Default::default();
        for (x, w) in atoms {
            if w != 0.0 {
                *acc.entry(self.cell_of(&x)).or_insert(0.0) += w;
            }
        }
        acc.into_iter().collect()
    }

    /// Field mass per coarse cell.
    pub fn collapse_field(&self, f: &DensityField) -> Vec<(usize, f64)> {
        let vol = f.grid.cell_volume();
        self.collapse(f.values.iter().enumerate().map(|(i, v)| (f.grid.node(i), v * vol)))
    }

    pub fn collapse_measure(&self, m: &EmpiricalMeasure) -> Vec<(usize, f64)> {
        self.collapse(m.atoms().iter().cloned().zip(m.weights().iter().copied()))
    }

    pub fn fm(&self, algebra: &StratifiedAlgebra, a: &[(usize, f64)], b: &[(usize, f64)]) -> Result<GridFm, MeasureError> {
        let to_atoms = |v: &[(usize, f64)]| -> (Vec<Vec<f64>>, Vec<f64>) {
            (v.iter().map(|(c, _)| self.center(*c)).collect(), v.iter().map(|(_, w)| *w).collect())
        };
        let (xa, wa) = to_atoms(a);
        let (xb, wb) = to_atoms(b);
        let p = FmProblem::from_weighted(algebra, &xa, &wa, &xb, &wb)?;
        Ok(GridFm { result: solve_fm(&p, FmOptions::default())?, collapse_bound: 2.0 * self.r_max, cells: self.cells.clone() })
    }
}

/// `d₀` between two densities on the same grid, collapsed onto `cells` coarse cells.
pub fn fortet_mourier_fields(
    algebra: &StratifiedAlgebra,
    a: &DensityField,
    b: &DensityField,
    cells: &[usize],
) -> Result<GridFm, MeasureError> {
    if a.grid != b.grid {
        return Err(MeasureError::GridMismatch);
    }
    let c = CellCollapse::new(algebra, &a.grid, cells)?;
    c.fm(algebra, &c.collapse_field(a), &c.collapse_field(b))
}

/// `Σ |a − b| · cell volume`.
pub fn l1_distance(a: &DensityField, b: &DensityField) -> Result<f64, MeasureError> {
    if a.grid != b.grid {
        return Err(MeasureError::GridMismatch);
    }
    let v: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).collect();
    Ok(stats::stable_sum(&v) * a.grid.cell_volume())
}

/// Bandwidth constant `c` in `ε = c·n^{−1/(Q+2)}`.
pub const KDE_BANDWIDTH_CONSTANT: f64 = 2.0;

pub fn default_bandwidth(algebra: &StratifiedAlgebra, n: usize) -> f64 {
    let q = algebra.homogeneous_dimension_f64();
    KDE_BANDWIDTH_CONSTANT * (n.max(1) as f64).powf(-1.0 / (q + 2.0))
}

#[derive(Clone, Debug)]
pub struct KdeResult {
    pub field: DensityField,
    /// `1 −` discrete integral: mass lost outside the grid or to quadrature.
    pub leakage: f64,
}

const KDE_CHUNK: usize = 2048;
const KDE_WAVE: usize = 8;

/// `y ↦ Σ_i w_i C ε^{−Q} ξ(D_{1/ε}(x_i⁻¹ ∗ y))` at every grid node.
pub fn kde_density(algebra: &StratifiedAlgebra, sample: &EmpiricalMeasure, eps: f64, grid: &Grid) -> Result<KdeResult, MeasureError> {
    let d = algebra.dim();
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(input(format!("bandwidth must be positive, got {eps}")));
    }
    if sample.dim() != d || grid.dims() != d {
        return Err(input("sample and grid must match the group dimension"));
    }
    let c = 1.0 / (mollifier_mass(algebra) * eps.powf(algebra.homogeneous_dimension_f64()));
    let nn = grid.node_count();
    let strides = grid.strides();
    let reach = eps.powf(algebra.coordinate_weights_f64()[d - 1]);
    let chunk = |range: std::ops::Range<usize>| -> Vec<f64> {
        let mut buf = vec![0.0; nn];
        let mut y = vec![0.0; d];
        let mut lo = vec![0usize; d];
        let mut hi = vec![0usize; d];
        for i in range {
            let x = &sample.atoms()[i];
            let w = sample.weights()[i] * c;
            let ext = quasi_ball_extent(algebra, x, eps);
            let mut empty = false;
            for k in 0..d {
                let h = grid.spacing(k);
                let a = ((x[k] - ext[k] - grid.lower()[k]) / h).ceil();
                let b = ((x[k] + ext[k] - grid.lower()[k]) / h).floor();
                let top = grid.cells()[k] as f64;
                if b < 0.0 || a > top {
                    empty = true;
                    break;
                }
                lo[k] = a.max(0.0) as usize;
                hi[k] = b.min(top) as usize;
            }
            if empty {
                continue;
            }
            let inv: Vec<f64> = x.iter().map(|v| -v).collect();
            // The last coordinate is central, so along a column of nodes it
            // enters `x⁻¹ ∗ y` with unit slope and its range can be solved for.
            let last = d - 1;
            let (h_last, lo_last, top_last) = (grid.spacing(last), grid.lower()[last], grid.cells()[last] as f64);
            for_box(&lo[..last], &hi[..last], |multi| {
                let base: usize = multi.iter().zip(&strides).map(|(a, b)| a * b).sum();
                grid.node_coords(base, &mut y);
                let z0 = algebra.mul(&inv, &y)[last];
                let (a, b) = ((-z0 - reach) / h_last, (-z0 + reach) / h_last);
                if b < 0.0 || a > top_last {
                    return;
                }
                let (a, b) = (a.ceil().max(0.0) as usize, b.floor().min(top_last) as usize);
                for j in a..=b {
                    let idx = base + j * strides[last];
                    y[last] = lo_last + j as f64 * h_last;
                    let z = algebra.dilate_unchecked(1.0 / eps, &algebra.mul(&inv, &y));
                    let v = mollifier_profile(algebra, &z);
                    if v > 0.0 {
                        buf[idx] += w * v;
                    }
                }
            });
        }
        buf
    };
    let n = sample.len();
    let ranges: Vec<std::ops::Range<usize>> = (0..n).step_by(KDE_CHUNK).map(|a| a..(a + KDE_CHUNK).min(n)).collect();
    let mut total = vec![0.0; nn];
    for wave in ranges.chunks(KDE_WAVE) {
        let parts: Vec<Vec<f64>> = wave.par_iter().cloned().map(chunk).collect();
        for part in parts {
            total.par_iter_mut().zip(&part).for_each(|(t, v)| *t += v);
        }
    }
    let field = DensityField { grid: grid.clone(), values: total, time: 0.0 };
    let leakage = 1.0 - field.mass();
    Ok(KdeResult { field, leakage })
}

/// One point of a Hölder curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HolderPoint {
    pub dt: f64,
    pub d0: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HolderFit {
    pub slope: f64,
    pub intercept: f64,
    /// `C_{s,T}(β)` used on the right-hand side.
    pub c_st: f64,
    pub kappa_eq: f64,
    pub rows: Vec<HolderRow>,
    pub bound_holds: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct HolderRow {
    pub dt: f64,
    pub d0: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Least-squares fit of `log d₀` against `log Δt`, and the check `d₀ ≤ 4·C·κ_eq·Δt^{1/2}`.
pub fn holder_fit(curve: &[HolderPoint], c_st: f64, kappa_eq: f64) -> Result<HolderFit, MeasureError> {
    if curve.len() < 4 {
        return Err(input(format!("need at least 4 points, got {}", curve.len())));
    }
    if curve.iter().any(|p| !(p.dt > 0.0) || !(p.d0 > 0.0) || !p.dt.is_finite() || !p.d0.is_finite()) {
        return Err(input("time steps and distances must be positive and finite"));
    }
    let mut dts: Vec<f64> = curve.iter().map(|p| p.dt).collect();
    dts.sort_by(f64::total_cmp);
    if dts.windows(2).any(|w| w[1] <= w[0] * (1.0 + 1e-12)) {
        return Err(input("time steps must be distinct"));
    }
    if dts[dts.len() - 1] < 4.0 * dts[0] * (1.0 - 1e-12) {
        return Err(input("time steps must span at least two octaves"));
    }
    let lx: Vec<f64> = curve.iter().map(|p| p.dt.ln()).collect();
    let ly: Vec<f64> = curve.iter().map(|p| p.d0.ln()).collect();
    let (slope, intercept) = stats::linear_fit(&lx, &ly);
    let rows: Vec<HolderRow> = curve
        .iter()
        .map(|p| {
            let rhs = 4.0 * c_st * kappa_eq * p.dt.sqrt();
            HolderRow { dt: p.dt, d0: p.d0, rhs, pass: p.d0 <= rhs }
        })
        .collect();
    let bound_holds = rows.iter().all(|r| r.pass);
    Ok(HolderFit { slope, intercept, c_st, kappa_eq, rows, bound_holds })
}

/// Draws `n` points from the normalized mollifier `ξ^ε(x⁻¹ ∗ ·)` by rejection.
pub fn sample_mollifier(algebra: &StratifiedAlgebra, x: &[f64], eps: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = algebra.dim();
    let zero = vec![0.0; d];
    let ext = quasi_ball_extent(algebra, &zero, 1.0);
    let peak = mollifier_profile(algebra, &zero);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i);
            loop {
                let z: Vec<f64> = ext.iter().map(|e| rng.random_range(-e..=*e)).collect();
                let accept: f64 = rng.random();
                if accept * peak < mollifier_profile(algebra, &z) {
                    return algebra.mul(x, &algebra.dilate_unchecked(eps, &z));
                }
            }
        })
        .collect()
}

/// Settings of a Monte Carlo Hölder curve.
#[derive(Clone, Debug)]
pub struct HolderCurvePlan {
    pub x0: Vec<f64>,
    pub eps: f64,
    pub s: f64,
    pub increments: Vec<f64>,
    pub dt: f64,
    pub n: usize,
    pub seed: u64,
}

/// `d₀(law at s, law at s + Δt)` for each increment, from coupled paths
/// started at a mollified Dirac.
pub fn holder_curve(system: &ItoSystem, plan: &HolderCurvePlan) -> Result<Vec<HolderPoint>, MeasureError> {
    if plan.increments.is_empty() {
        return Err(input("no increments"));
    }
    let alg = system.algebra();
    let starts = sample_mollifier(alg, &plan.x0, plan.eps, plan.n, plan.seed ^ 0x1d0_11e5);
    let horizon = plan.increments.iter().copied().fold(0.0, f64::max);
    let mut times: Vec<f64> = plan.increments.iter().map(|h| plan.s + h).collect();
    times.sort_by(f64::total_cmp);
    let sim = SimulationPlan::new(plan.x0.clone(), plan.s, plan.s + horizon, plan.dt, plan.n, plan.seed).at_times(times);
    let ens = system.simulate_from(&sim, &starts)?;
    let base = EmpiricalMeasure::uniform(starts)?;
    plan.increments
        .iter()
        .map(|h| {
            let later = ens.empirical_law(plan.s + h)?;
            Ok(HolderPoint { dt: *h, d0: fortet_mourier(alg, &base, &later)?.value })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_atom_closed_form() {
        let h = StratifiedAlgebra::heisenberg();
        for d in [0.1, 0.5, 1.0, 3.0, 1000.0] {
            let mu = EmpiricalMeasure::dirac(vec![0.0, 0.0, 0.0]);
            let nu = EmpiricalMeasure::dirac(vec![d, 0.0, 0.0]);
            let r = fortet_mourier(&h, &mu, &nu).unwrap();
            let want = 2.0 * d / (2.0 + d);
            assert!((r.value - want).abs() < 1e-9, "d = {d}: {} vs {want}", r.value);
        }
    }

    #[test]
    fn identical_measures_are_at_distance_zero() {
        let h = StratifiedAlgebra::heisenberg();
        let mu = EmpiricalMeasure::uniform(vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(fortet_mourier(&h, &mu, &mu).unwrap().value, 0.0);
    }

    #[test]
    fn l1_of_disjoint_unit_masses_is_two() {
        let g = Grid::centered(&[1.0, 1.0], &[8, 8]).unwrap();
        let mut a = DensityField::zeros(g.clone(), 0.0);
        let mut b = DensityField::zeros(g.clone(), 0.0);
        let vol = g.cell_volume();
        a.values[g.flat_index(&[2, 2])] = 1.0 / vol;
        b.values[g.flat_index(&[5, 5])] = 1.0 / vol;
        assert!((l1_distance(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn holder_fit_of_exact_power_law() {
        let curve: Vec<HolderPoint> =
            (4..=8).map(|k| 2f64.powi(-k)).map(|dt| HolderPoint { dt, d0: dt.sqrt() }).collect();
        let f = holder_fit(&curve, 1.0, 2.0).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12 && f.intercept.abs() < 1e-12);
        assert!(f.bound_holds);
    }

    #[test]
    fn constant_curve_is_flagged() {
        let curve: Vec<HolderPoint> = (4..=8).map(|k| HolderPoint { dt: 2f64.powi(-k), d0: 1.0 }).collect();
        let f = holder_fit(&curve, 1.0, 2.0).unwrap();
        assert!(f.slope.abs() < 1e-12);
        assert!(!f.bound_holds);
        assert!(!f.rows.last().unwrap().pass);
    }

    #[test]
    fn holder_fit_rejects_degenerate_abscissae() {
        let p = |dt| HolderPoint { dt, d0: 1.0 };
        assert!(holder_fit(&[p(0.1), p(0.1), p(0.2), p(0.4)], 1.0, 2.0).is_err());
        assert!(holder_fit(&[p(0.1), p(0.12), p(0.14), p(0.16)], 1.0, 2.0).is_err());
        assert!(holder_fit(&[p(0.1), p(0.2), p(0.4)], 1.0, 2.0).is_err());
    }

    #[test]
    fn single_atom_kde_is_the_mollifier() {
        let h = StratifiedAlgebra::heisenberg();
        let g = Grid::centered(&[0.6, 0.6, 0.25], &[32, 32, 48]).unwrap();
        let x = vec![0.05, -0.02, 0.01];
        let k = kde_density(&h, &EmpiricalMeasure::dirac(x.clone()), 0.4, &g).unwrap();
        let c = 1.0 / (mollifier_mass(&h) * 0.4f64.powf(4.0));
        for i in (0..g.node_count()).step_by(97) {
            let y = g.node(i);
            let z = h.dilate_unchecked(1.0 / 0.4, &h.mul(&[-x[0], -x[1], -x[2]], &y));
            let want = c * mollifier_profile(&h, &z);
            assert!((k.field.values[i] - want).abs() <= 1e-12 * want.max(1.0));
        }
        assert!(k.leakage.abs() < 0.02, "leakage {}", k.leakage);
    }

    #[test]
    fn too_many_atoms_is_an_input_error() {
        let h = StratifiedAlgebra::heisenberg();
        let atoms: Vec<Vec<f64>> = (0..MAX_ATOMS + 1).map(|i| vec![i as f64, 0.0, 0.0]).collect();
        let mu = EmpiricalMeasure::uniform(atoms).unwrap();
        let nu = EmpiricalMeasure::dirac(vec![0.0, 0.0, 0.5]);
        assert!(matches!(FmProblem::new(&h, &mu, &nu), Err(MeasureError::TooManyAtoms { .. })));
    }
}
