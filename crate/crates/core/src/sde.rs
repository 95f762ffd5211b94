//! Itô form of the horizontal diffusion and its Euler–Maruyama simulation.
//!
//! The Stratonovich equation `dξ = X_0 dt + √2 Σ X_i(ξ) ∘ dB_i` with
//! `X_0 = −Σ β_i X_i` becomes
//! `dξ = (Σ_i (∇X_i)X_i − Σ β_i X_i) dt + √2 Σ X_i dB_i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::algebra::StratifiedAlgebra;
use crate::drift::{DriftError, DriftSpec};
use crate::frame::{FrameReport, HorizontalFrame};
use crate::measures::EmpiricalMeasure;
use crate::poly::{CompiledMap, CompiledPoly, SparsePolynomial};
use crate::stats::{self, Estimate};

#[derive(Debug, thiserror::Error)]
pub enum SdeError {
    #[error("frame fails verification: {0:?}")]
    Frame(FrameReport),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error("simulation fault: non-finite state on path {path} at step {step} (dt may be too large)")]
    SimulationFault { path: usize, step: usize },
    #[error("{0}")]
    Input(String),
}

fn input(msg: impl Into<String>) -> SdeError {
    SdeError::Input(msg.into())
}

/// Drift and diffusion coefficients of the Itô equation.
#[derive(Clone, Debug)]
pub struct ItoSystem {
    frame: HorizontalFrame,
    drift: DriftSpec,
    correction: Vec<SparsePolynomial>,
    diffusion_scale: f64,
    fields: Vec<Vec<(usize, CompiledPoly)>>,
    correction_c: Vec<(usize, CompiledPoly)>,
}

/// Converts the Stratonovich system to Itô form with diffusion columns `√2·X_i`.
pub fn strat_to_ito(frame: &HorizontalFrame, drift: &DriftSpec) -> Result<ItoSystem, SdeError> {
    let report = frame.verify();
    if !report.all_pass() {
        return Err(SdeError::Frame(report));
    }
    drift.validate_shape(frame.len(), frame.dim())?;
    Ok(ItoSystem::build(frame.clone(), drift.clone(), std::f64::consts::SQRT_2))
}

fn nonzero(polys: &[SparsePolynomial]) -> Vec<(usize, CompiledPoly)> {
    polys.iter().enumerate().filter(|(_, p)| !p.is_zero()).map(|(k, p)| (k, p.compile())).collect()
}

impl ItoSystem {
    fn build(frame: HorizontalFrame, drift: DriftSpec, diffusion_scale: f64) -> Self {
        let correction = frame.ito_correction();
        let fields = frame.fields().iter().map(|f| nonzero(&f.components)).collect();
        let correction_c = nonzero(&correction);
        Self { frame, drift, correction, diffusion_scale, fields, correction_c }
    }

    /// Same system with diffusion columns `scale·X_i`; zero gives the deterministic flow.
    pub fn with_diffusion_scale(&self, scale: f64) -> Self {
        Self::build(self.frame.clone(), self.drift.clone(), scale)
    }

    pub fn with_drift(&self, drift: &DriftSpec) -> Result<Self, SdeError> {
        drift.validate_shape(self.frame.len(), self.frame.dim())?;
        Ok(Self::build(self.frame.clone(), drift.clone(), self.diffusion_scale))
    }

    pub fn frame(&self) -> &HorizontalFrame {
        &self.frame
    }

    pub fn algebra(&self) -> &StratifiedAlgebra {
        self.frame.algebra()
    }

    pub fn drift(&self) -> &DriftSpec {
        &self.drift
    }

    pub fn dim(&self) -> usize {
        self.frame.dim()
    }

    pub fn diffusion_scale(&self) -> f64 {
        self.diffusion_scale
    }

    /// `Σ_i (∇X_i)X_i`, before the `scale²/2` factor.
    pub fn correction(&self) -> &[SparsePolynomial] {
        &self.correction
    }

    /// Largest total degree over the frame and correction polynomials.
    pub fn max_degree(&self) -> u32 {
        let frame = self.frame.fields().iter().flat_map(|f| f.components.iter());
        frame.chain(&self.correction).map(SparsePolynomial::total_degree).max().unwrap_or(0)
    }

    /// Ceiling `p·γ^{κ−1}` on the growth exponent of path moments.
    pub fn moment_ceiling(&self, p: f64) -> f64 {
        let gamma = self.max_degree() as f64;
        p * gamma.powi(self.algebra().step() as i32 - 1)
    }

    /// True if coordinate `k` has coefficients depending only on strictly lower layers.
    pub fn is_triangular(&self) -> bool {
        let alg = self.algebra();
        let d = alg.dim();
        (0..d).all(|k| {
            let polys = self.frame.fields().iter().map(|f| &f.components[k]).chain(std::iter::once(&self.correction[k]));
            polys.into_iter().all(|p| (0..d).all(|j| !p.depends_on(j) || alg.layer_of(j) < alg.layer_of(k)))
        })
    }

    /// Full Itô drift `(s²/2)·correction − Σ β_i X_i` at a point.
    pub fn drift_vector(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let half = 0.5 * self.diffusion_scale * self.diffusion_scale;
        let beta = self.drift.eval(t, x);
        let mut out = vec![0.0; d];
        for (k, p) in &self.correction_c {
            out[*k] += half * p.eval(x);
        }
        for (i, f) in self.fields.iter().enumerate() {
            for (k, p) in f {
                out[*k] -= beta[i] * p.eval(x);
            }
        }
        out
    }

    /// Simulates `n` paths and hands every stored state to an observer built per path.
    pub fn run_paths<O, F>(&self, grid: &TimeGrid, x0: &[f64], n: usize, seed: u64, make: F) -> Result<Vec<O>, SdeError>
    where
        O: PathObserver + Send,
        F: Fn(usize) -> O + Sync,
    {
        if x0.len() != self.dim() {
            return Err(input(format!("initial point has {} coordinates, expected {}", x0.len(), self.dim())));
        }
        if n == 0 {
            return Err(input("path count must be at least 1"));
        }
        let results: Vec<Result<O, SdeError>> =
            (0..n).into_par_iter().map(|p| self.run_one(grid, x0, p, seed, make(p))).collect();
        results.into_iter().collect()
    }

    /// Like [`ItoSystem::run_paths`], with path `p` started at `starts[p]`.
    pub fn run_paths_from<O, F>(&self, grid: &TimeGrid, starts: &[Vec<f64>], seed: u64, make: F) -> Result<Vec<O>, SdeError>
    where
        O: PathObserver + Send,
        F: Fn(usize) -> O + Sync,
    {
        if starts.is_empty() {
            return Err(input("path count must be at least 1"));
        }
        if let Some(bad) = starts.iter().find(|x| x.len() != self.dim()) {
            return Err(input(format!("initial point has {} coordinates, expected {}", bad.len(), self.dim())));
        }
        let results: Vec<Result<O, SdeError>> =
            (0..starts.len()).into_par_iter().map(|p| self.run_one(grid, &starts[p], p, seed, make(p))).collect();
        results.into_iter().collect()
    }

    fn run_one<O: PathObserver>(
        &self,
        grid: &TimeGrid,
        x0: &[f64],
        path: usize,
        seed: u64,
        mut obs: O,
    ) -> Result<O, SdeError> {
        let d = self.dim();
        let m = self.fields.len();
        let mut rng = path_rng(seed, path);
        let mut x = x0.to_vec();
        let mut next = vec![0.0; d];
        let mut beta = vec![0.0; m];
        let mut noise = vec![0.0; m];
        let sqdt = grid.dt.sqrt();
        let half = 0.5 * self.diffusion_scale * self.diffusion_scale;
        obs.observe(0, grid.s, &x);
        for step in 1..=grid.steps {
            let t_old = grid.time(step - 1);
            self.drift.eval_into(t_old, &x, &mut beta);
            for z in noise.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *z = g * sqdt;
            }
            next.copy_from_slice(&x);
            for (k, p) in &self.correction_c {
                next[*k] += grid.dt * half * p.eval(&x);
            }
            for (i, f) in self.fields.iter().enumerate() {
                let c = self.diffusion_scale * noise[i] - grid.dt * beta[i];
                if c == 0.0 {
                    continue;
                }
                for (k, p) in f {
                    next[*k] += c * p.eval(&x);
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(SdeError::SimulationFault { path, step });
            }
            std::mem::swap(&mut x, &mut next);
            obs.observe(step, grid.time(step), &x);
        }
        Ok(obs)
    }

    pub fn simulate(&self, plan: &SimulationPlan) -> Result<PathEnsemble, SdeError> {
        self.simulate_inner(plan, None)
    }

    /// Simulates one path per entry of `starts`; `plan.x0` and `plan.n` are ignored.
    pub fn simulate_from(&self, plan: &SimulationPlan, starts: &[Vec<f64>]) -> Result<PathEnsemble, SdeError> {
        let mut plan = plan.clone();
        plan.n = starts.len();
        plan.x0 = starts.first().cloned().unwrap_or_default();
        self.simulate_inner(&plan, Some(starts))
    }

    fn simulate_inner(&self, plan: &SimulationPlan, starts: Option<&[Vec<f64>]>) -> Result<PathEnsemble, SdeError> {
        let grid = TimeGrid::new(plan.s, plan.t, plan.dt)?;
        let slices = grid.slice_indices(plan.slice_times.as_deref())?;
        let alg = self.algebra();
        let d = self.dim();
        let make = |_| SliceRecorder {
            slices: &slices,
            next: 0,
            data: Vec::with_capacity(slices.len() * d),
            sup: 0.0,
            algebra: alg,
        };
        let paths = match starts {
            Some(st) => self.run_paths_from(&grid, st, plan.seed, make)?,
            None => self.run_paths(&grid, &plan.x0, plan.n, plan.seed, make)?,
        };
        let mut data = Vec::with_capacity(plan.n * slices.len() * self.dim());
        let mut sup_norm = Vec::with_capacity(plan.n);
        for p in paths {
            data.extend_from_slice(&p.data);
            sup_norm.push(p.sup);
        }
        Ok(PathEnsemble {
            d: self.dim(),
            n: plan.n,
            times: slices.iter().map(|&k| grid.time(k)).collect(),
            data,
            sup_norm,
            dt: plan.dt,
            seed: plan.seed,
            x0: plan.x0.clone(),
            s: plan.s,
            t: plan.t,
        })
    }
}

/// The counter-based stream for one path: ChaCha8 keyed by the seed, stream = path index.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Receives the state after every step (and the initial state as step 0).
pub trait PathObserver {
    fn observe(&mut self, step: usize, t: f64, x: &[f64]);
}

struct SliceRecorder<'a> {
    slices: &'a [usize],
    next: usize,
    data: Vec<f64>,
    sup: f64,
    algebra: &'a StratifiedAlgebra,
}

impl PathObserver for SliceRecorder<'_> {
    fn observe(&mut self, step: usize, _t: f64, x: &[f64]) {
        self.sup = self.sup.max(self.algebra.homogeneous_norm(x));
        while self.next < self.slices.len() && self.slices[self.next] == step {
            self.data.extend_from_slice(x);
            self.next += 1;
        }
    }
}

/// Uniform step grid on `[s, t]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub s: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    /// Requires `t − s` to be an integer multiple of `dt` (relative tolerance 1e-9).
    pub fn new(s: f64, t: f64, dt: f64) -> Result<Self, SdeError> {
        if !(s.is_finite() && t.is_finite() && s < t) {
            return Err(input(format!("time window needs s < t, got [{s}, {t}]")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(input(format!("step must be positive, got {dt}")));
        }
        let ratio = (t - s) / dt;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(input(format!("window length {} is not a multiple of dt = {dt}", t - s)));
        }
        Ok(Self { s, dt, steps: steps as usize })
    }

    pub fn time(&self, step: usize) -> f64 {
        self.s + step as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps)
    }

    /// Step index hit by time `tau`, if it lies on the grid.
    pub fn index_of(&self, tau: f64) -> Option<usize> {
        let r = (tau - self.s) / self.dt;
        let k = r.round();
        (k >= 0.0 && k <= self.steps as f64 && (r - k).abs() <= 1e-6).then_some(k as usize)
    }

    /// Requested slice indices, or 33 equispaced ones.
    pub fn slice_indices(&self, times: Option<&[f64]>) -> Result<Vec<usize>, SdeError> {
        let mut idx: Vec<usize> = match times {
            None => (0..=DEFAULT_SLICES - 1)
                .map(|j| ((j * self.steps) as f64 / (DEFAULT_SLICES - 1) as f64).round() as usize)
                .collect(),
            Some(ts) => ts
                .iter()
                .map(|&tau| self.index_of(tau).ok_or_else(|| input(format!("slice time {tau} is not on the step grid"))))
                .collect::<Result<_, _>>()?,
        };
        idx.sort_unstable();
        idx.dedup();
        if idx.is_empty() {
            return Err(input("at least one slice time is required"));
        }
        Ok(idx)
    }
}

pub const DEFAULT_SLICES: usize = 33;

/// Inputs of [`ItoSystem::simulate`].
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationPlan {
    pub x0: Vec<f64>,
    pub s: f64,
    pub t: f64,
    pub dt: f64,
    pub n: usize,
    pub seed: u64,
    pub slice_times: Option<Vec<f64>>,
}

impl SimulationPlan {
    pub fn new(x0: Vec<f64>, s: f64, t: f64, dt: f64, n: usize, seed: u64) -> Self {
        Self { x0, s, t, dt, n, seed, slice_times: None }
    }

    pub fn at_times(mut self, times: Vec<f64>) -> Self {
        self.slice_times = Some(times);
        self
    }
}

/// Stored slices of `n` paths plus each path's running sup of `‖ξ‖_G`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathEnsemble {
    pub d: usize,
    pub n: usize,
    pub times: Vec<f64>,
    /// `[path][slice][coordinate]`, flattened.
    pub data: Vec<f64>,
    pub sup_norm: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub s: f64,
    pub t: f64,
}

impl PathEnsemble {
    pub fn slice_index(&self, time: f64) -> Option<usize> {
        let tol = 1e-9 * time.abs().max(1.0);
        self.times.iter().position(|&t| (t - time).abs() <= tol)
    }

    pub fn state(&self, path: usize, slice: usize) -> &[f64] {
        let off = (path * self.times.len() + slice) * self.d;
        &self.data[off..off + self.d]
    }

    /// Coordinate `k` of every path at a stored slice.
    pub fn coordinate(&self, slice: usize, k: usize) -> Vec<f64> {
        (0..self.n).map(|p| self.state(p, slice)[k]).collect()
    }

    pub fn empirical_law(&self, time: f64) -> Result<EmpiricalMeasure, SdeError> {
        let j = self.slice_index(time).ok_or_else(|| input(format!("no stored slice at time {time}")))?;
        let atoms = (0..self.n).map(|p| self.state(p, j).to_vec()).collect();
        EmpiricalMeasure::uniform(atoms).map_err(|e| input(e.to_string()))
    }

    /// `E[sup_r ‖ξ_r‖_G^p]` with a bootstrap interval.
    pub fn sup_moment(&self, p: f64) -> Result<Estimate, SdeError> {
        if !(p >= 1.0) {
            return Err(input(format!("moment order must be at least 1, got {p}")));
        }
        let v: Vec<f64> = self.sup_norm.iter().map(|s| s.powf(p)).collect();
        Ok(stats::bootstrap_mean(&v, stats::BOOTSTRAP_RESAMPLES, self.seed ^ 0x5eed_b007))
    }
}

/// Result of [`moment_growth_fit`].
#[derive(Clone, Debug, Serialize)]
pub struct GrowthFit {
    pub exponent: f64,
    pub constant: f64,
    pub gamma: u32,
    pub ceiling: f64,
    pub norms: Vec<f64>,
    pub moments: Vec<Estimate>,
}

/// Settings shared by every run of a growth fit.
#[derive(Clone, Copy, Debug)]
pub struct MomentRun {
    pub s: f64,
    pub t: f64,
    pub dt: f64,
    pub n: usize,
    pub seed: u64,
}

/// Fits `log E[sup ‖ξ‖^p] ≈ a·log(1 + ‖x0‖_G) + log C` over initial points.
pub fn moment_growth_fit(system: &ItoSystem, p: f64, run: MomentRun, x0_grid: &[Vec<f64>]) -> Result<GrowthFit, SdeError> {
    let alg = system.algebra();
    let norms: Vec<f64> = x0_grid.iter().map(|x| alg.homogeneous_norm(x)).collect();
    let mut distinct = norms.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    if distinct.len() < 4 {
        return Err(input("moment fit needs at least 4 initial points with distinct norms"));
    }
    let mut moments = Vec::with_capacity(x0_grid.len());
    for x0 in x0_grid {
        let plan = SimulationPlan::new(x0.clone(), run.s, run.t, run.dt, run.n, run.seed).at_times(vec![run.t]);
        moments.push(system.simulate(&plan)?.sup_moment(p)?);
    }
    let lx: Vec<f64> = norms.iter().map(|r| (1.0 + r).ln()).collect();
    let ly: Vec<f64> = moments.iter().map(|m| m.mean.ln()).collect();
    let (exponent, intercept) = stats::linear_fit(&lx, &ly);
    Ok(GrowthFit {
        exponent,
        constant: intercept.exp(),
        gamma: system.max_degree(),
        ceiling: system.moment_ceiling(p),
        norms,
        moments,
    })
}

/// Evaluates a compiled field at a point, for callers outside the stepping loop.
pub fn eval_field(field: &CompiledMap, x: &[f64]) -> Vec<f64> {
    field.eval(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn heis() -> ItoSystem {
        let f = HorizontalFrame::derive(Arc::new(StratifiedAlgebra::heisenberg()));
        strat_to_ito(&f, &DriftSpec::zero(2)).unwrap()
    }

    #[test]
    fn corrections() {
        assert!(heis().correction().iter().all(SparsePolynomial::is_zero));
        let a = HorizontalFrame::derive(Arc::new(StratifiedAlgebra::abelian(3)));
        let sys = strat_to_ito(&a, &DriftSpec::zero(3)).unwrap();
        assert!(sys.correction().iter().all(SparsePolynomial::is_zero));
        let e = HorizontalFrame::derive(Arc::new(StratifiedAlgebra::engel()));
        let sys = strat_to_ito(&e, &DriftSpec::zero(2)).unwrap();
        assert_eq!(sys.correction()[3], SparsePolynomial::parse("-x1/6", 4, false).unwrap());
        assert!(sys.is_triangular());
        assert_eq!(sys.max_degree(), 2);
        assert_eq!(sys.moment_ceiling(2.0), 8.0);
    }

    #[test]
    fn deterministic_system_has_zero_moment() {
        let sys = heis().with_diffusion_scale(0.0);
        let e = sys.simulate(&SimulationPlan::new(vec![0.0; 3], 0.0, 1.0, 0.01, 10, 1)).unwrap();
        assert_eq!(e.sup_moment(2.0).unwrap().mean, 0.0);
    }

    #[test]
    fn same_seed_same_ensemble() {
        let plan = SimulationPlan::new(vec![0.1, 0.0, 0.0], 0.0, 0.5, 0.01, 50, 9);
        let a = heis().simulate(&plan).unwrap();
        let b = heis().simulate(&plan).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times.len(), DEFAULT_SLICES);
        let c = heis().simulate(&SimulationPlan { seed: 10, ..plan }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn empirical_law_slices() {
        let plan = SimulationPlan::new(vec![0.5, -1.0, 2.0], 0.0, 0.2, 0.01, 4, 2);
        let e = heis().simulate(&plan).unwrap();
        let law = e.empirical_law(0.0).unwrap();
        assert_eq!(law.len(), 4);
        assert!(law.atoms().iter().all(|a| a == &[0.5, -1.0, 2.0]));
        assert!(e.empirical_law(0.0123).is_err());
        let one = heis().simulate(&SimulationPlan { n: 1, ..plan }).unwrap();
        assert_eq!(one.empirical_law(0.2).unwrap().weights(), &[1.0]);
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(0.0, 1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 0.1).is_err());
        assert!(TimeGrid::new(0.0, 1.0, -0.1).is_err());
        assert_eq!(TimeGrid::new(0.0, 1.0, 1e-3).unwrap().steps, 1000);
    }

    #[test]
    fn fault_reports_path_and_step() {
        let f = HorizontalFrame::derive(Arc::new(StratifiedAlgebra::heisenberg()));
        let drift = DriftSpec::constant(&[1e200, 0.0]);
        let sys = strat_to_ito(&f, &drift).unwrap();
        let plan = SimulationPlan::new(vec![1e300, 1e300, 0.0], 0.0, 1.0, 0.5, 3, 1);
        match sys.simulate(&plan) {
            Err(SdeError::SimulationFault { path, step }) => {
                assert_eq!(path, 0);
                assert!(step >= 1);
            }
            other => panic!("expected a fault, got {other:?}"),
        }
    }
}
