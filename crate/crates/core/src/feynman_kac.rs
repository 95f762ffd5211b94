//! Monte Carlo evaluation of
//! `u(s,x) = E[ψ(ξ_t) e^{∫_s^t h}] − E[∫_s^t f(r, ξ_r) e^{∫_s^r h} dr]`
//! and manufactured solutions of `∂_s u + L_s u + h u = f`.

use num_rational::BigRational;
use num_traits::FromPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::drift::ScalarExpr;
use crate::frame::PolyField;
use crate::poly::{ParseError, SparsePolynomial};
use crate::sde::{ItoSystem, PathObserver, SdeError, TimeGrid};
use crate::stats::{self, Estimate};

#[derive(Debug, thiserror::Error)]
pub enum FkError {
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("growth bound violated at {point:?}: |ψ| = {value} > {bound}")]
    Growth { point: Vec<f64>, value: f64, bound: f64 },
    #[error("potential exceeds its declared upper bound {declared} (closed form {found})")]
    Potential { declared: f64, found: f64 },
    #[error("{0}")]
    Input(String),
}

fn input(msg: impl Into<String>) -> FkError {
    FkError::Input(msg.into())
}

/// `Σ_i X_i²` and `X_i` applied to a polynomial in `(x, s)`, with the drift
/// kept separate so it may depend on time and space.
#[derive(Clone, Debug)]
pub struct GeneratorImage {
    /// `½σ² Σ_i X_i(X_i u)`, polynomial in `(x, s)`.
    pub second_order: SparsePolynomial,
    /// `X_i u`, polynomial in `(x, s)`.
    pub first_order: Vec<SparsePolynomial>,
    drift: Vec<ScalarExpr>,
}

impl GeneratorImage {
    /// `L_s u (x)`.
    pub fn eval(&self, s: f64, x: &[f64]) -> f64 {
        let mut xs = x.to_vec();
        xs.push(s);
        let mut v = self.second_order.eval(&xs);
        for (b, p) in self.drift.iter().zip(&self.first_order) {
            if !p.is_zero() {
                v -= b.eval(s, x) * p.eval(&xs);
            }
        }
        v
    }

    /// The image as one polynomial, available when every `β_i` is constant.
    pub fn polynomial(&self) -> Option<SparsePolynomial> {
        let mut out = self.second_order.clone();
        for (b, p) in self.drift.iter().zip(&self.first_order) {
            let c = b.as_constant()?;
            if c != 0.0 {
                out = &out - &p.scale(&BigRational::from_f64(c)?);
            }
        }
        Some(out)
    }
}

fn lift(field: &PolyField) -> PolyField {
    let d = field.arity();
    let map: Vec<usize> = (0..d).collect();
    let mut comps: Vec<SparsePolynomial> = field.components.iter().map(|c| c.embed(d + 1, &map)).collect();
    comps.push(SparsePolynomial::zero(d + 1));
    PolyField::new(comps)
}

/// `L_s u = Δ_G u − Σ β_i X_i u` for `u` a polynomial in `(x_1..x_d, s)`.
///
/// The second-order part carries the diffusion scale: `√2` columns give
/// `Δ_G = Σ X_i²`.
pub fn generator_apply(system: &ItoSystem, u: &SparsePolynomial) -> Result<GeneratorImage, FkError> {
    let d = system.dim();
    if u.arity() != d + 1 {
        return Err(input(format!("expected a polynomial in {} variables (x and s), got {}", d + 1, u.arity())));
    }
    let mut half = 0.5 * system.diffusion_scale().powi(2);
    // √2 columns square to 1 only up to rounding.
    if (half - half.round()).abs() < 1e-12 {
        half = half.round();
    }
    let half = BigRational::from_f64(half).ok_or_else(|| input("diffusion scale is not finite"))?;
    let fields: Vec<PolyField> = system.frame().fields().iter().map(lift).collect();
    let first_order: Vec<SparsePolynomial> = fields.iter().map(|x| x.apply(u)).collect();
    let mut second = SparsePolynomial::zero(d + 1);
    for (x, xu) in fields.iter().zip(&first_order) {
        second = &second + &x.apply(xu);
    }
    Ok(GeneratorImage {
        second_order: second.scale(&half),
        first_order,
        drift: system.drift().components.clone(),
    })
}

/// The source term `f(s, x)`.
#[derive(Clone, Debug)]
pub enum Source {
    Zero,
    Expr(ScalarExpr),
    /// Polynomial in `(x, s)`.
    Poly(SparsePolynomial),
    Manufactured(Box<Manufactured>),
}

/// `f = ∂_s u + L_s u + h u` kept unexpanded.
#[derive(Clone, Debug)]
pub struct Manufactured {
    pub ds_u: SparsePolynomial,
    pub image: GeneratorImage,
    pub u: SparsePolynomial,
    pub h: ScalarExpr,
}

impl Source {
    pub fn eval(&self, s: f64, x: &[f64]) -> f64 {
        match self {
            Source::Zero => 0.0,
            Source::Expr(e) => e.eval(s, x),
            Source::Poly(p) => {
                let mut xs = x.to_vec();
                xs.push(s);
                p.eval(&xs)
            }
            Source::Manufactured(m) => {
                let mut xs = x.to_vec();
                xs.push(s);
                m.ds_u.eval(&xs) + m.image.eval(s, x) + m.h.eval(s, x) * m.u.eval(&xs)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Source::Zero => true,
            Source::Expr(e) => e.as_constant() == Some(0.0),
            Source::Poly(p) => p.is_zero(),
            Source::Manufactured(_) => false,
        }
    }
}

/// The source that makes `u` an exact solution; polynomial when `β` and `h` are constant.
pub fn manufactured_source(system: &ItoSystem, u: &SparsePolynomial, h: &ScalarExpr) -> Result<Source, FkError> {
    let d = system.dim();
    let image = generator_apply(system, u)?;
    let ds_u = u.partial(d);
    if let (Some(lu), Some(hc)) = (image.polynomial(), h.as_constant()) {
        let hc = BigRational::from_f64(hc).ok_or_else(|| input("potential is not finite"))?;
        return Ok(Source::Poly(&(&ds_u + &lu) + &u.scale(&hc)));
    }
    Ok(Source::Manufactured(Box::new(Manufactured { ds_u, image, u: u.clone(), h: h.clone() })))
}

/// Terminal payoff, potential and source on `[s, t]`.
#[derive(Clone, Debug)]
pub struct TerminalProblem {
    /// `ψ(x)`, polynomial in `x`.
    pub psi: SparsePolynomial,
    /// Declared growth: `|ψ(x)| ≤ N (1 + ‖x‖_G)^p`.
    pub growth_constant: f64,
    pub growth_degree: f64,
    pub h: ScalarExpr,
    /// Declared `sup h`.
    pub h_bound: f64,
    pub f: Source,
    pub t: f64,
}

impl TerminalProblem {
    /// Growth constants default to `N = Σ|c|` and `p` = largest weighted degree,
    /// which bound any polynomial; `h_bound` defaults to the closed-form bound.
    pub fn new(system: &ItoSystem, psi: SparsePolynomial, h: ScalarExpr, f: Source, t: f64) -> Result<Self, FkError> {
        let d = system.dim();
        if psi.arity() != d {
            return Err(input(format!("terminal payoff must be a polynomial in {d} variables")));
        }
        h.validate(d).map_err(|e| input(e.to_string()))?;
        let w = system.algebra().coordinate_weights();
        let degree = psi
            .weighted_degrees(&w)
            .iter()
            .map(crate::poly::rat_to_f64)
            .fold(0.0, f64::max);
        let constant: f64 = psi.terms().map(|(_, c)| crate::poly::rat_to_f64(c).abs()).sum();
        let h_bound = h.upper_bound();
        if !h_bound.is_finite() {
            return Err(input("potential must be bounded above"));
        }
        Ok(Self { psi, growth_constant: constant, growth_degree: degree, h, h_bound, f, t })
    }

    pub fn with_growth(mut self, constant: f64, degree: f64) -> Self {
        self.growth_constant = constant;
        self.growth_degree = degree;
        self
    }

    pub fn with_h_bound(mut self, bound: f64) -> Self {
        self.h_bound = bound;
        self
    }

    /// Samples the growth declaration at random points of norm up to `radius`
    /// and compares the closed-form bound on `h` with the declared one.
    pub fn check(&self, system: &ItoSystem, samples: usize, radius: f64, seed: u64) -> Result<(), FkError> {
        let found = self.h.upper_bound();
        if found > self.h_bound + 1e-12 * self.h_bound.abs() + 1e-300 {
            return Err(FkError::Potential { declared: self.h_bound, found });
        }
        let alg = system.algebra();
        let w = alg.coordinate_weights_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let r: f64 = rng.random_range(0.0..=radius);
            let x: Vec<f64> = w.iter().map(|l| rng.random_range(-1.0..=1.0) * r.powf(*l)).collect();
            let value = self.psi.eval(&x).abs();
            let bound = self.growth_constant * (1.0 + alg.homogeneous_norm(&x)).powf(self.growth_degree);
            if value > bound * (1.0 + 1e-9) {
                return Err(FkError::Growth { point: x, value, bound });
            }
        }
        Ok(())
    }
}

/// Result record of [`fk_estimate`].
#[derive(Clone, Debug, Serialize)]
pub struct FkEstimate {
    pub estimate: Estimate,
    pub dt: f64,
    pub seed: u64,
    pub s: f64,
    pub x: Vec<f64>,
    pub t: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct FkRun {
    pub dt: f64,
    pub n: usize,
    pub seed: u64,
    /// Warn when the 95% interval is wider than `2·tolerance`.
    pub tolerance: Option<f64>,
}

struct Accumulator<'a> {
    problem: &'a TerminalProblem,
    steps: usize,
    dt: f64,
    h_int: f64,
    f_int: f64,
    prev_h: f64,
    prev_g: f64,
    value: f64,
}

impl PathObserver for Accumulator<'_> {
    fn observe(&mut self, step: usize, t: f64, x: &[f64]) {
        let h = self.problem.h.eval(t, x);
        if step > 0 {
            self.h_int += 0.5 * self.dt * (self.prev_h + h);
        }
        let g = if self.problem.f.is_zero() { 0.0 } else { self.problem.f.eval(t, x) * self.h_int.exp() };
        if step > 0 {
            self.f_int += 0.5 * self.dt * (self.prev_g + g);
        }
        self.prev_h = h;
        self.prev_g = g;
        if step == self.steps {
            self.value = self.problem.psi.eval(x) * self.h_int.exp() - self.f_int;
        }
    }
}

/// Path values `ψ(ξ_t)e^{H_t} − F_t` with trapezoidal `H = ∫h`, `F = ∫f e^{H}`.
pub fn fk_path_values(system: &ItoSystem, problem: &TerminalProblem, s: f64, x: &[f64], run: FkRun) -> Result<Vec<f64>, FkError> {
    if run.n < 100 {
        return Err(input(format!("need at least 100 paths, got {}", run.n)));
    }
    let grid = TimeGrid::new(s, problem.t, run.dt)?;
    let paths = system.run_paths(&grid, x, run.n, run.seed, |_| Accumulator {
        problem,
        steps: grid.steps,
        dt: grid.dt,
        h_int: 0.0,
        f_int: 0.0,
        prev_h: 0.0,
        prev_g: 0.0,
        value: f64::NAN,
    })?;
    Ok(paths.into_iter().map(|a| a.value).collect())
}

pub fn fk_estimate(system: &ItoSystem, problem: &TerminalProblem, s: f64, x: &[f64], run: FkRun) -> Result<FkEstimate, FkError> {
    let values = fk_path_values(system, problem, s, x, run)?;
    let estimate = stats::bootstrap_mean(&values, stats::BOOTSTRAP_RESAMPLES, run.seed ^ 0xf00d_cafe);
    let mut warnings = Vec::new();
    if let Some(tol) = run.tolerance {
        let half = 0.5 * (estimate.ci_high - estimate.ci_low);
        if half > tol {
            warnings.push(format!("confidence half-width {half:.3e} exceeds the requested tolerance {tol:.3e}"));
        }
    }
    Ok(FkEstimate { estimate, dt: run.dt, seed: run.seed, s, x: x.to_vec(), t: problem.t, warnings })
}
