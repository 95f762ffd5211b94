//! Fokker–Planck solver `∂_t ρ = Δ_G ρ + div_G(βρ)` on a box with zero Dirichlet data.
//!
//! The discrete generator is a Markov jump process on the grid nodes. From a
//! node `x`, field `i` jumps to `x ∗ (±η_i e_i)` at rate `1/η_i²`, where `η_i`
//! is the spacing of axis `i`; the drift adds an upwind jump of rate
//! `|β_i|/η_i` in the direction of `−β_i`. Jump targets off the lattice are
//! spread by multilinear interpolation, and mass sent to boundary nodes or out
//! of the box is removed and booked as outflux. Explicit Euler stepping of the
//! forward equation is then positive and mass-exact for `dt ≤ 1/max rate`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::algebra::StratifiedAlgebra;
use crate::drift::{DriftError, DriftSpec};
use crate::frame::{FrameReport, HorizontalFrame};
use crate::grid::{DensityField, Grid, GridError};
use crate::poly::{rat_to_f64, CompiledMap, SparsePolynomial};

#[derive(Debug, thiserror::Error)]
pub enum FpError {
    #[error("frame fails verification: {0:?}")]
    Frame(FrameReport),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("dt = {dt} exceeds the stability bound {bound}; try dt = {suggested}")]
    Unstable { dt: f64, bound: f64, suggested: f64 },
    #[error("solver fault at t = {time}: {what}")]
    Fault { time: f64, what: String },
    #[error("{0}")]
    Input(String),
}

fn input(msg: impl Into<String>) -> FpError {
    FpError::Input(msg.into())
}

const CHUNK: usize = 4096;

/// Precomputed jumps of the discrete generator on one grid.
pub struct OperatorBundle {
    grid: Grid,
    algebra: Arc<StratifiedAlgebra>,
    frame_c: Vec<CompiledMap>,
    drift: DriftSpec,
    eta: Vec<f64>,
    slots: usize,
    interior: Vec<bool>,
    /// Per (node, slot): fraction of the jump that leaves the domain.
    killed: Vec<f64>,
    /// Forward targets per (node, slot), CSR.
    fwd_off: Vec<u32>,
    fwd: Vec<(u32, f64)>,
    /// Incoming (source slot index, weight) per target node, CSR.
    in_off: Vec<u32>,
    incoming: Vec<(u32, f64)>,
    static_rates: Option<Vec<f64>>,
}

impl std::fmt::Debug for OperatorBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OperatorBundle")
            .field("grid", &self.grid)
            .field("slots", &self.slots)
            .field("entries", &self.incoming.len())
            .finish()
    }
}

/// Builds the jump chain for `frame` and `drift` on `grid`.
pub fn build_operators(frame: &HorizontalFrame, grid: &Grid, drift: &DriftSpec) -> Result<OperatorBundle, FpError> {
    let report = frame.verify();
    if !report.all_pass() {
        return Err(FpError::Frame(report));
    }
    let alg = frame.algebra().clone();
    let d = alg.dim();
    if grid.dims() != d {
        return Err(input(format!("grid has {} axes, group dimension is {d}", grid.dims())));
    }
    drift.validate_shape(frame.len(), d)?;
    let m = frame.len();
    let slots = 2 * m;
    let eta: Vec<f64> = (0..m).map(|i| grid.spacing(i)).collect();
    let n = grid.node_count();
    let interior: Vec<bool> = (0..n).map(|i| !grid.is_boundary(i)).collect();

    let per_node: Vec<(Vec<(u32, f64)>, Vec<u32>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|node| {
            let mut targets = Vec::new();
            let mut counts = Vec::with_capacity(slots);
            let mut killed = Vec::with_capacity(slots);
            if !interior[node] {
                counts.resize(slots, 0);
                killed.resize(slots, 0.0);
                return (targets, counts, killed);
            }
            let x = grid.node(node);
            let mut step = vec![0.0; d];
            let mut w = Vec::new();
            for i in 0..m {
                for sign in [1.0, -1.0] {
                    step.iter_mut().for_each(|v| *v = 0.0);
                    step[i] = sign * eta[i];
                    let y = alg.mul(&x, &step);
                    let before = targets.len();
                    let mut kept = 0.0;
                    if grid.interpolation_weights(&y, &mut w) {
                        for &(t, wt) in &w {
                            if interior[t] {
                                targets.push((t as u32, wt));
                                kept += wt;
                            }
                        }
                    }
                    counts.push((targets.len() - before) as u32);
                    killed.push((1.0 - kept).max(0.0));
                }
            }
            (targets, counts, killed)
        })
        .collect();

    let mut fwd_off = Vec::with_capacity(n * slots + 1);
    let mut fwd = Vec::new();
    let mut killed = Vec::with_capacity(n * slots);
    fwd_off.push(0u32);
    for (targets, counts, k) in per_node {
        let mut pos = 0usize;
        for c in counts {
            fwd.extend_from_slice(&targets[pos..pos + c as usize]);
            pos += c as usize;
            fwd_off.push(fwd.len() as u32);
        }
        killed.extend(k);
    }
    // Transpose: incoming (slot, weight) lists per target node, ordered by slot.
    let mut in_count = vec![0u32; n + 1];
    for &(t, _) in &fwd {
        in_count[t as usize + 1] += 1;
    }
    for i in 0..n {
        in_count[i + 1] += in_count[i];
    }
    let in_off = in_count.clone();
    let mut cursor = in_count;
    let mut incoming = vec![(0u32, 0.0f64); fwd.len()];
    for slot in 0..n * slots {
        for &(t, w) in &fwd[fwd_off[slot] as usize..fwd_off[slot + 1] as usize] {
            let c = &mut cursor[t as usize];
            incoming[*c as usize] = (slot as u32, w);
            *c += 1;
        }
    }
    let frame_c = frame.fields().iter().map(|f| f.compile()).collect();
    let mut ops = OperatorBundle {
        grid: grid.clone(),
        algebra: alg,
        frame_c,
        drift: drift.clone(),
        eta,
        slots,
        interior,
        killed,
        fwd_off,
        fwd,
        in_off,
        incoming,
        static_rates: None,
    };
    if drift.components.iter().all(|c| c.is_time_independent()) {
        ops.static_rates = Some(ops.rates(0.0));
    }
    Ok(ops)
}

impl OperatorBundle {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn algebra(&self) -> &StratifiedAlgebra {
        &self.algebra
    }

    /// Largest total jump rate allowed by the declared drift bound.
    pub fn max_rate(&self) -> f64 {
        let b = self.drift.component_bound();
        self.eta.iter().map(|h| 2.0 / (h * h) + b / h).sum()
    }

    /// Explicit Euler is positive for `dt ≤ 1/max_rate`.
    pub fn stable_dt(&self) -> f64 {
        1.0 / self.max_rate()
    }

    /// Jump rate of every (node, slot) at time `t`.
    fn rates(&self, t: f64) -> Vec<f64> {
        let m = self.eta.len();
        let d = self.grid.dims();
        let mut out = vec![0.0; self.interior.len() * self.slots];
        out.par_chunks_mut(self.slots).enumerate().for_each_init(
            || (vec![0.0; d], vec![0.0; m]),
            |(x, beta), (node, r)| {
                if !self.interior[node] {
                    return;
                }
                self.grid.node_coords(node, x);
                self.drift.eval_into(t, x, beta);
                for i in 0..m {
                    let diff = 1.0 / (self.eta[i] * self.eta[i]);
                    let c = -beta[i];
                    r[2 * i] = diff + c.max(0.0) / self.eta[i];
                    r[2 * i + 1] = diff + (-c).max(0.0) / self.eta[i];
                }
            },
        );
        out
    }

    fn rates_at(&self, t: f64) -> std::borrow::Cow<'_, [f64]> {
        match &self.static_rates {
            Some(r) => std::borrow::Cow::Borrowed(r),
            None => std::borrow::Cow::Owned(self.rates(t)),
        }
    }

    /// Discrete backward generator `(L_h u)(x) = Σ rate·(E[u(jump target)] − u(x))` at time `t`.
    ///
    /// Values outside the interior count as zero.
    pub fn apply_generator(&self, u: &[f64], t: f64) -> Vec<f64> {
        let rates = self.rates_at(t);
        (0..u.len())
            .into_par_iter()
            .map(|node| {
                if !self.interior[node] {
                    return 0.0;
                }
                let mut acc = 0.0;
                for s in 0..self.slots {
                    let slot = node * self.slots + s;
                    let r = rates[slot];
                    let mut e = 0.0;
                    for &(t, w) in &self.fwd[self.fwd_off[slot] as usize..self.fwd_off[slot + 1] as usize] {
                        e += w * u[t as usize];
                    }
                    acc += r * (e - u[node]);
                }
                acc
            })
            .collect()
    }

    /// One explicit Euler step of the forward equation; returns the mass that left.
    fn step(&self, rho: &[f64], out: &mut [f64], rates: &[f64], dt: f64) -> f64 {
        let vol = self.grid.cell_volume();
        let slots = self.slots;
        let flux: Vec<f64> = (0..rates.len()).into_par_iter().map(|k| rates[k] * rho[k / slots]).collect();
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            for (j, o) in chunk.iter_mut().enumerate() {
                let y = c * CHUNK + j;
                if !self.interior[y] {
                    *o = 0.0;
                    continue;
                }
                let total: f64 = rates[y * slots..(y + 1) * slots].iter().sum();
                let mut gain = 0.0;
                for &(src, w) in &self.incoming[self.in_off[y] as usize..self.in_off[y + 1] as usize] {
                    gain += w * flux[src as usize];
                }
                *o = rho[y] * (1.0 - dt * total) + dt * gain;
            }
        });
        let lost: Vec<f64> = flux
            .par_chunks(CHUNK * slots)
            .zip(self.killed.par_chunks(CHUNK * slots))
            .map(|(f, k)| f.iter().zip(k).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        dt * vol * lost.iter().sum::<f64>()
    }

    /// `sup` and `inf` of `div_G β = Σ_i X_i β_i` over interior nodes at time `t`.
    pub fn horizontal_divergence_range(&self, t: f64) -> (f64, f64) {
        let d = self.grid.dims();
        let m = self.eta.len();
        let (lo, hi) = (0..self.interior.len())
            .into_par_iter()
            .filter(|&i| self.interior[i])
            .map_init(
                || (vec![0.0; d], vec![0.0; d], vec![0.0; d]),
                |(x, g, f), node| {
                    self.grid.node_coords(node, x);
                    let mut div = 0.0;
                    for i in 0..m {
                        g.iter_mut().for_each(|v| *v = 0.0);
                        self.drift.components[i].add_gradient(t, x, 1.0, g);
                        self.frame_c[i].eval_into(x, f);
                        div += f.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>();
                    }
                    (div, div)
                },
            )
            .reduce(|| (f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)));
        if lo > hi {
            (0.0, 0.0)
        } else {
            (lo, hi)
        }
    }
}

/// Initial data for [`fp_solve`].
#[derive(Clone, Debug)]
pub enum InitialDatum {
    Density(DensityField),
}

impl InitialDatum {
    /// Normalizes a nonnegative density; boundary nodes are zeroed first.
    pub fn density(mut field: DensityField) -> Result<Self, FpError> {
        if field.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(input("initial density must be finite and nonnegative"));
        }
        for i in 0..field.values.len() {
            if field.grid.is_boundary(i) {
                field.values[i] = 0.0;
            }
        }
        if field.normalize() <= 0.0 {
            return Err(input("initial density has zero mass on the interior"));
        }
        Ok(InitialDatum::Density(field))
    }

    pub fn field(&self) -> &DensityField {
        match self {
            InitialDatum::Density(f) => f,
        }
    }
}

/// Mollifier profile `exp(1/(r − 1))` for `r = ‖z‖^{2κ!} < 1`.
fn bump(r: f64) -> f64 {
    if r < 1.0 {
        (1.0 / (r - 1.0)).exp()
    } else {
        0.0
    }
}

/// `ξ(z)` with `‖z‖_G` read from the algebra.
pub fn mollifier_profile(algebra: &StratifiedAlgebra, z: &[f64]) -> f64 {
    let n = algebra.homogeneous_norm(z);
    if n >= 1.0 {
        0.0
    } else {
        bump(n.powf(algebra.norm_exponent() as f64))
    }
}

/// `∫ ξ` over the whole space.
///
/// With `r = ‖z‖^{2κ!}` the level sets scale as `vol{r ≤ ρ} = V(1)·ρ^a`,
/// `a = Q/(2κ!)`, and `V(1)` is a product of Dirichlet-type factors.
pub fn mollifier_mass(algebra: &StratifiedAlgebra) -> f64 {
    use statrs::function::gamma::gamma;
    let p_total = algebra.norm_exponent() as f64;
    let mut log_num = 0.0;
    let mut sum_ratio = 0.0;
    for (n, w) in algebra.layer_dims().iter().zip(algebra.layer_weights()) {
        let n = *n as f64;
        let p = p_total / rat_to_f64(w);
        let omega = 2.0 * std::f64::consts::PI.powf(n / 2.0) / gamma(n / 2.0);
        log_num += (omega / p * gamma(n / p)).ln();
        sum_ratio += n / p;
    }
    let v1 = (log_num - statrs::function::gamma::ln_gamma(1.0 + sum_ratio)).exp();
    let a = algebra.homogeneous_dimension_f64() / p_total;
    v1 * simpson(|v| bump(v.powf(1.0 / a)), 0.0, 1.0, 20_000)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Coordinate-wise bound on `|(x ∗ D_ε z)_k − x_k|` over `‖z‖_G ≤ 1`.
pub fn quasi_ball_extent(algebra: &StratifiedAlgebra, x: &[f64], eps: f64) -> Vec<f64> {
    let d = algebra.dim();
    let w = algebra.coordinate_weights_f64();
    let mut radii: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    radii.extend(w.iter().map(|l| eps.powf(*l)));
    algebra
        .product_polynomials()
        .iter()
        .enumerate()
        .map(|(k, p)| (p - &SparsePolynomial::var(2 * d, k)).abs_bound(&radii))
        .collect()
}

/// Grid version of `ξ^ε(x⁻¹ ∗ ·)`, normalized to unit discrete mass.
///
/// A mollifier covering at least 64 interior nodes is sampled at the nodes.
/// A smaller one is integrated on a reference lattice and deposited onto the
/// grid with multilinear weights, so its support then reaches one cell past
/// the quasi-ball.
pub fn mollified_dirac(algebra: &StratifiedAlgebra, x: &[f64], eps: f64, grid: &Grid) -> Result<InitialDatum, FpError> {
    let d = algebra.dim();
    if x.len() != d || grid.dims() != d {
        return Err(input("center and grid must match the group dimension"));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(input(format!("mollifier scale must be positive, got {eps}")));
    }
    let ext = quasi_ball_extent(algebra, x, eps);
    for k in 0..d {
        let h = grid.spacing(k);
        if x[k] - ext[k] < grid.lower()[k] + h || x[k] + ext[k] > grid.upper()[k] - h {
            return Err(input(format!("mollifier support exceeds the box along axis {}", k + 1)));
        }
    }
    let mut sampled = DensityField::zeros(grid.clone(), 0.0);
    let inv: Vec<f64> = x.iter().map(|v| -v).collect();
    let mut hits = 0usize;
    let mut y = vec![0.0; d];
    let strides = grid.strides();
    let mut lo = vec![0usize; d];
    let mut hi = vec![0usize; d];
    for k in 0..d {
        let h = grid.spacing(k);
        lo[k] = (((x[k] - ext[k]) - grid.lower()[k]) / h).floor().max(0.0) as usize;
        hi[k] = ((((x[k] + ext[k]) - grid.lower()[k]) / h).ceil() as usize).min(grid.cells()[k]);
    }
    for_box(&lo, &hi, |multi| {
        let idx: usize = multi.iter().zip(&strides).map(|(a, b)| a * b).sum();
        grid.node_coords(idx, &mut y);
        let z = algebra.dilate_unchecked(1.0 / eps, &algebra.mul(&inv, &y));
        let v = mollifier_profile(algebra, &z);
        if v > 0.0 {
            hits += 1;
            sampled.values[idx] = v;
        }
    });
    if hits >= 64 {
        return InitialDatum::density(sampled);
    }
    let mut deposit = DensityField::zeros(grid.clone(), 0.0);
    let w = algebra.coordinate_weights_f64();
    let q = (0..d)
        .map(|k| (4.0 * eps.powf(w[k]) / grid.spacing(k)).ceil() as usize)
        .max()
        .unwrap_or(1)
        .clamp(12, quadrature_cap(d));
    let mut weights = Vec::new();
    let nodes: Vec<f64> = (0..q).map(|j| -1.0 + (2 * j + 1) as f64 / q as f64).collect();
    for_box(&vec![0; d], &vec![q - 1; d], |multi| {
        let z: Vec<f64> = multi.iter().map(|&j| nodes[j]).collect();
        let v = mollifier_profile(algebra, &z);
        if v == 0.0 {
            return;
        }
        let y = algebra.mul(x, &algebra.dilate_unchecked(eps, &z));
        if grid.interpolation_weights(&y, &mut weights) {
            for &(i, wt) in &weights {
                deposit.values[i] += v * wt;
            }
        }
    });
    InitialDatum::density(deposit)
}

fn quadrature_cap(d: usize) -> usize {
    (2.0e6f64.powf(1.0 / d as f64)).floor() as usize
}

/// Visits every multi-index in the inclusive box `lo..=hi`.
pub(crate) fn for_box(lo: &[usize], hi: &[usize], mut f: impl FnMut(&[usize])) {
    let d = lo.len();
    if lo.iter().zip(hi).any(|(a, b)| a > b) {
        return;
    }
    let mut m = lo.to_vec();
    loop {
        f(&m);
        let mut a = d;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            if m[a] < hi[a] {
                m[a] += 1;
                break;
            }
            m[a] = lo[a];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MonitorRow {
    pub time: f64,
    pub mass: f64,
    pub min: f64,
    pub max: f64,
    pub l2: f64,
    pub outflux: f64,
}

/// Monitors recorded at the initial time and every output time.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SolveMonitors {
    pub rows: Vec<MonitorRow>,
    /// Initial `‖ρ_s‖_∞`.
    pub initial_sup: f64,
    /// `sup_r [div_G β]_+` over sampled times; bounds the growth of the maximum.
    pub divergence_plus: f64,
    /// `sup_r [div_G β]_−` over sampled times.
    pub divergence_minus: f64,
    /// `‖ρ_s‖_∞ · exp(sup [div_G β]_+ · (t − s))`.
    pub max_growth_bound: f64,
    /// Constant `½ sup |β|` of the L² Gronwall bound.
    pub l2_rate: f64,
    pub steps: usize,
    pub dt: f64,
}

impl SolveMonitors {
    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "time,mass,min,max,l2,outflux")?;
        for r in &self.rows {
            let cells = [r.time, r.mass, r.min, r.max, r.l2, r.outflux].map(crate::fmt_f64);
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()
    }
}

#[derive(Clone, Debug)]
pub struct FpSolution {
    pub snapshots: Vec<DensityField>,
    pub monitors: SolveMonitors,
    pub warnings: Vec<String>,
}

/// Explicit Euler time stepping from `s` through every output time.
///
/// The last step before each output time is shortened to land on it.
pub fn fp_solve(
    ops: &OperatorBundle,
    datum: &InitialDatum,
    s: f64,
    t: f64,
    dt: f64,
    output_times: &[f64],
) -> Result<FpSolution, FpError> {
    let start = datum.field();
    if start.grid != ops.grid {
        return Err(FpError::Grid(GridError::Mismatch));
    }
    if !(s < t) || !(dt > 0.0) {
        return Err(input("need s < t and dt > 0"));
    }
    let bound = ops.stable_dt();
    if dt > bound {
        return Err(FpError::Unstable { dt, bound, suggested: 0.9 * bound });
    }
    let mut outs: Vec<f64> = output_times.to_vec();
    outs.sort_by(f64::total_cmp);
    if outs.iter().any(|&o| o < s || o > t + 1e-12) {
        return Err(input(format!("output times must lie in [{s}, {t}]")));
    }
    let initial_mass = start.mass();
    let initial_sup = start.max();
    let mut rho = start.values.clone();
    let mut next = vec![0.0; rho.len()];
    let mut outflux = 0.0;
    let mut now = s;
    let mut steps = 0usize;
    let mut snapshots = Vec::with_capacity(outs.len());
    let l2_rate = 0.5 * ops.drift.sup_bound();
    let (mut div_lo, mut div_hi) = (0.0f64, 0.0f64);
    let record = |rho: &[f64], time: f64, outflux: f64, rows: &mut Vec<MonitorRow>| {
        let field = DensityField { grid: ops.grid.clone(), values: rho.to_vec(), time };
        rows.push(MonitorRow {
            time,
            mass: field.mass(),
            min: field.min(),
            max: field.max(),
            l2: field.l2_norm(),
            outflux,
        });
        field
    };
    let mut rows = Vec::new();
    record(&rho, s, 0.0, &mut rows);
    let drift_moves = !ops.drift.is_zero();
    if drift_moves {
        let (lo, hi) = ops.horizontal_divergence_range(s);
        div_lo = div_lo.min(lo);
        div_hi = div_hi.max(hi);
    }
    for &target in &outs {
        while now < target - 1e-13 * target.abs().max(1.0) {
            let h = dt.min(target - now);
            let rates = ops.rates_at(now);
            outflux += ops.step(&rho, &mut next, &rates, h);
            std::mem::swap(&mut rho, &mut next);
            now = if target - now <= dt { target } else { now + h };
            steps += 1;
            let mass = crate::stats::stable_sum(&rho) * ops.grid.cell_volume();
            if !mass.is_finite() || mass > 10.0 * initial_mass {
                return Err(FpError::Fault { time: now, what: format!("mass {mass} exceeds 10x the initial mass") });
            }
        }
        let field = record(&rho, target, outflux, &mut rows);
        if field.max() > 10.0 * initial_sup {
            return Err(FpError::Fault { time: target, what: "maximum exceeds 10x the initial maximum".into() });
        }
        if drift_moves {
            let (lo, hi) = ops.horizontal_divergence_range(target);
            div_lo = div_lo.min(lo);
            div_hi = div_hi.max(hi);
        }
        snapshots.push(field);
    }
    let mut warnings = Vec::new();
    let divergence_minus = (-div_lo).max(0.0);
    if divergence_minus > 0.0 {
        warnings.push(format!(
            "sampled [div_G beta]_- reaches {divergence_minus:.3e}; uniqueness of the continuous problem relies on a bound for it"
        ));
    }
    let span = outs.last().copied().unwrap_or(s) - s;
    let monitors = SolveMonitors {
        rows,
        initial_sup,
        divergence_plus: div_hi.max(0.0),
        divergence_minus,
        max_growth_bound: initial_sup * (div_hi.max(0.0) * span).exp(),
        l2_rate,
        steps,
        dt,
    };
    Ok(FpSolution { snapshots, monitors, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heis_frame() -> HorizontalFrame {
        HorizontalFrame::derive(Arc::new(StratifiedAlgebra::heisenberg()))
    }

    #[test]
    fn abelian_generator_is_the_five_point_laplacian() {
        let f = HorizontalFrame::derive(Arc::new(StratifiedAlgebra::abelian(2)));
        let g = Grid::centered(&[1.0, 1.0], &[10, 10]).unwrap();
        let ops = build_operators(&f, &g, &DriftSpec::zero(2)).unwrap();
        let h = g.spacing(0);
        let node = g.flat_index(&[4, 6]);
        let mut u = vec![0.0; g.node_count()];
        u[node] = 1.0;
        let lu = ops.apply_generator(&u, 0.0);
        assert!((lu[node] + 4.0 / (h * h)).abs() < 1e-9);
        for nb in [[3, 6], [5, 6], [4, 5], [4, 7]] {
            assert!((lu[g.flat_index(&nb)] - 1.0 / (h * h)).abs() < 1e-9);
        }
        let touched = lu.iter().filter(|v| **v != 0.0).count();
        assert_eq!(touched, 5);
    }

    #[test]
    fn heisenberg_generator_annihilates_constants_and_x3() {
        let g = Grid::centered(&[1.0, 1.0, 1.0], &[16, 16, 16]).unwrap();
        let ops = build_operators(&heis_frame(), &g, &DriftSpec::zero(2)).unwrap();
        let ones: Vec<f64> = (0..g.node_count()).map(|i| if g.is_boundary(i) { 0.0 } else { 1.0 }).collect();
        let x3: Vec<f64> = (0..g.node_count()).map(|i| if g.is_boundary(i) { 0.0 } else { g.node(i)[2] }).collect();
        let l1 = ops.apply_generator(&ones, 0.0);
        let l3 = ops.apply_generator(&x3, 0.0);
        let mut m = vec![0; 3];
        for i in 0..g.node_count() {
            g.multi_index(i, &mut m);
            if m.iter().all(|&j| (3..=13).contains(&j)) {
                assert!(l1[i].abs() < 1e-9, "constant at {m:?}: {}", l1[i]);
                assert!(l3[i].abs() < 1e-9, "x3 at {m:?}: {}", l3[i]);
            }
        }
    }

    #[test]
    fn mollifier_mass_matches_a_fine_sum() {
        let a = StratifiedAlgebra::heisenberg();
        let g = Grid::centered(&[1.05, 1.05, 1.05], &[84, 84, 84]).unwrap();
        let sum = DensityField::from_fn(g, 0.0, |z| mollifier_profile(&a, z)).mass();
        assert!((sum / mollifier_mass(&a) - 1.0).abs() < 2e-3, "{sum} vs {}", mollifier_mass(&a));
        let line = StratifiedAlgebra::abelian(1);
        let exact = simpson(|z| bump(z.abs().powi(2)), -1.0, 1.0, 200_000);
        assert!((mollifier_mass(&line) - exact).abs() < 1e-9);
    }

    #[test]
    fn mollified_dirac_properties() {
        let a = StratifiedAlgebra::heisenberg();
        let g = Grid::new(vec![-0.6, -0.6, -0.25], vec![0.6, 0.6, 0.25], vec![64, 64, 96]).unwrap();
        let x = [0.05, -0.02, 0.01];
        let datum = mollified_dirac(&a, &x, 0.4, &g).unwrap();
        let f = datum.field();
        assert!((f.mass() - 1.0).abs() < 1e-10);
        for (i, v) in f.values.iter().enumerate() {
            if *v > 0.0 {
                assert!(a.quasi_distance(&x, &g.node(i)) < 0.4);
            }
        }
        let wide = mollified_dirac(&a, &[0.0; 3], 0.4, &g).unwrap().field().max();
        let narrow = mollified_dirac(&a, &[0.0; 3], 0.2, &g).unwrap().field().max();
        let ratio = narrow / wide;
        assert!((ratio / 16.0 - 1.0).abs() < 0.05, "peak ratio {ratio}");
        assert!(mollified_dirac(&a, &[0.0; 3], 0.7, &g).is_err());
    }

    #[test]
    fn unresolved_mollifier_is_deposited() {
        let a = StratifiedAlgebra::heisenberg();
        let g = Grid::centered(&[1.0, 1.0, 1.0], &[16, 16, 16]).unwrap();
        let f = mollified_dirac(&a, &[0.0; 3], 0.05, &g).unwrap();
        assert!((f.field().mass() - 1.0).abs() < 1e-12);
        assert!(f.field().min() >= 0.0);
    }

    #[test]
    fn rejects_large_steps() {
        let g = Grid::centered(&[1.0, 1.0, 1.0], &[16, 16, 16]).unwrap();
        let ops = build_operators(&heis_frame(), &g, &DriftSpec::zero(2)).unwrap();
        let datum = mollified_dirac(ops.algebra(), &[0.0; 3], 0.3, &g).unwrap();
        let err = fp_solve(&ops, &datum, 0.0, 0.1, 1.0, &[0.1]).unwrap_err();
        match err {
            FpError::Unstable { suggested, .. } => assert!(suggested < ops.stable_dt()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conserves_mass_up_to_outflux() {
        let g = Grid::centered(&[1.0, 1.0, 1.0], &[16, 16, 16]).unwrap();
        let ops = build_operators(&heis_frame(), &g, &DriftSpec::constant(&[0.5, -0.3])).unwrap();
        let datum = mollified_dirac(ops.algebra(), &[0.1, 0.0, 0.0], 0.4, &g).unwrap();
        let dt = ops.stable_dt();
        let sol = fp_solve(&ops, &datum, 0.0, 0.2, dt, &[0.05, 0.2]).unwrap();
        for r in &sol.monitors.rows {
            assert!((r.mass + r.outflux - 1.0).abs() < 1e-12, "{r:?}");
            assert!(r.min >= -1e-15);
        }
        assert!(sol.monitors.rows.last().unwrap().outflux > 0.0);
    }
}
