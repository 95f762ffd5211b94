//! Left-invariant horizontal frames and their symbolic checks.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_rational::BigRational;
use num_traits::{One, Zero};

use crate::algebra::{AlgebraError, StratifiedAlgebra};
use crate::poly::{CompiledMap, SparsePolynomial};

/// A vector field `Σ_k X_k(x) ∂_k` with polynomial coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolyField {
    pub components: Vec<SparsePolynomial>,
}

impl PolyField {
    pub fn new(components: Vec<SparsePolynomial>) -> Self {
        Self { components }
    }

    pub fn constant_basis(d: usize, i: usize) -> Self {
        let components = (0..d)
            .map(|k| if k == i { SparsePolynomial::one(d) } else { SparsePolynomial::zero(d) })
            .collect();
        Self { components }
    }

    pub fn arity(&self) -> usize {
        self.components.first().map(SparsePolynomial::arity).unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(SparsePolynomial::is_zero)
    }

    /// `X f = Σ_k X_k ∂_k f`.
    pub fn apply(&self, f: &SparsePolynomial) -> SparsePolynomial {
        let mut out = SparsePolynomial::zero(f.arity());
        for (k, c) in self.components.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let df = f.partial(k);
            if !df.is_zero() {
                out = &out + &(c * &df);
            }
        }
        out
    }

    /// Euclidean divergence `Σ_k ∂_k X_k`.
    pub fn divergence(&self) -> SparsePolynomial {
        self.components
            .iter()
            .enumerate()
            .fold(SparsePolynomial::zero(self.arity()), |acc, (k, c)| &acc + &c.partial(k))
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.eval(x)).collect()
    }

    pub fn compile(&self) -> CompiledMap {
        CompiledMap::new(&self.components)
    }
}

/// `[X, Y]^k = X(Y^k) − Y(X^k)`.
pub fn lie_bracket_fields(x: &PolyField, y: &PolyField) -> Result<PolyField, AlgebraError> {
    if x.dim() != y.dim() || x.arity() != y.arity() {
        return Err(AlgebraError::Dimension { expected: x.dim(), got: y.dim() });
    }
    let components =
        x.components.iter().zip(&y.components).map(|(xk, yk)| &x.apply(yk) - &y.apply(xk)).collect();
    Ok(PolyField { components })
}

/// The horizontal fields `X_1..X_m` of a group.
#[derive(Clone, Debug)]
pub struct HorizontalFrame {
    algebra: Arc<StratifiedAlgebra>,
    fields: Vec<PolyField>,
}

impl HorizontalFrame {
    /// Jacobian columns of `y ↦ x ∗ y` at `y = 0` along the first-layer axes.
    pub fn derive(algebra: Arc<StratifiedAlgebra>) -> Self {
        let d = algebra.dim();
        let fields = (0..algebra.rank())
            .map(|i| {
                let components = algebra
                    .product_polynomials()
                    .iter()
                    .map(|p| {
                        let mut q = p.partial(d + i);
                        for v in (d..2 * d).rev() {
                            q = q.drop_var_at_zero(v);
                        }
                        q
                    })
                    .collect();
                PolyField { components }
            })
            .collect();
        Self { algebra, fields }
    }

    /// Wraps hand-written fields; only shapes are checked.
    pub fn from_fields(algebra: Arc<StratifiedAlgebra>, fields: Vec<PolyField>) -> Result<Self, AlgebraError> {
        let d = algebra.dim();
        for f in &fields {
            if f.dim() != d || f.components.iter().any(|c| c.arity() != d) {
                return Err(AlgebraError::Dimension { expected: d, got: f.dim() });
            }
        }
        if fields.is_empty() {
            return Err(AlgebraError::Input("a frame needs at least one field".into()));
        }
        Ok(Self { algebra, fields })
    }

    pub fn algebra(&self) -> &Arc<StratifiedAlgebra> {
        &self.algebra
    }

    pub fn fields(&self) -> &[PolyField] {
        &self.fields
    }

    pub fn field(&self, i: usize) -> &PolyField {
        &self.fields[i]
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.algebra.dim()
    }

    /// Runs the homogeneity, divergence and triangularity checks on every field.
    pub fn verify(&self) -> FrameReport {
        let weights = self.algebra.coordinate_weights();
        let one = BigRational::one();
        let fields = self
            .fields
            .iter()
            .map(|f| {
                let homogeneous = f
                    .components
                    .iter()
                    .enumerate()
                    .all(|(k, c)| c.is_weighted_homogeneous(&weights, &(&weights[k] - &one)));
                let divergence_free = f.divergence().is_zero();
                let triangular = f.components.iter().enumerate().all(|(k, c)| {
                    (0..weights.len()).all(|j| !c.depends_on(j) || weights[j] <= &weights[k] - &one)
                });
                FieldChecks { homogeneous, divergence_free, adjoint_implied: divergence_free, triangular }
            })
            .collect();
        FrameReport { fields }
    }

    pub fn check_hormander(&self, points: &[Vec<f64>], depth: usize) -> Result<HormanderReport, AlgebraError> {
        if points.is_empty() {
            return Err(AlgebraError::Input("Hörmander check needs at least one point".into()));
        }
        if depth == 0 {
            return Err(AlgebraError::Input("bracket depth must be at least 1".into()));
        }
        let d = self.dim();
        for p in points {
            if p.len() != d {
                return Err(AlgebraError::Dimension { expected: d, got: p.len() });
            }
        }
        let brackets = self.iterated_brackets(depth);
        let compiled: Vec<CompiledMap> = brackets.iter().map(PolyField::compile).collect();
        let ranks = points
            .iter()
            .map(|p| {
                let cols: Vec<Vec<f64>> = compiled.iter().map(|c| c.eval(p)).collect();
                let (rank, singular_values) = numerical_rank(d, &cols);
                PointRank { point: p.clone(), rank, singular_values }
            })
            .collect::<Vec<_>>();
        let passes = ranks.iter().all(|r| r.rank == d);
        Ok(HormanderReport { depth, dim: d, bracket_count: brackets.len(), points: ranks, passes })
    }

    /// All nonzero right-nested brackets `[X_{i1},[X_{i2},…,X_{in}]]` with `n ≤ depth`.
    pub fn iterated_brackets(&self, depth: usize) -> Vec<PolyField> {
        let mut all: Vec<PolyField> = self.fields.iter().filter(|f| !f.is_zero()).cloned().collect();
        let mut level = all.clone();
        for _ in 1..depth {
            let mut next: Vec<PolyField> = Vec::new();
            for x in &self.fields {
                for b in &level {
                    let c = lie_bracket_fields(x, b).expect("frame fields share a shape");
                    if !c.is_zero() && !next.contains(&c) && !all.contains(&c) {
                        next.push(c);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            all.extend(next.iter().cloned());
            level = next;
        }
        all
    }

    /// `Σ_i Σ_j ∂_j(X_{i,k}) X_{i,j}` for every coordinate `k`.
    pub fn ito_correction(&self) -> Vec<SparsePolynomial> {
        let d = self.dim();
        (0..d)
            .map(|k| {
                self.fields
                    .iter()
                    .fold(SparsePolynomial::zero(d), |acc, f| &acc + &f.apply(&f.components[k]))
            })
            .collect()
    }
}

/// Singular-value rank with the relative cutoff `1e-9 · σ_max`.
pub fn numerical_rank(d: usize, columns: &[Vec<f64>]) -> (usize, Vec<f64>) {
    if columns.is_empty() {
        return (0, vec![]);
    }
    let m = DMatrix::from_fn(d, columns.len(), |r, c| columns[c][r]);
    let sv = m.singular_values();
    let mut values: Vec<f64> = sv.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let top = values.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return (0, values);
    }
    let rank = values.iter().filter(|&&s| s > 1e-9 * top).count();
    (rank, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldChecks {
    pub homogeneous: bool,
    pub divergence_free: bool,
    /// `X_i^* = −X_i`, which holds exactly when the field is divergence free.
    pub adjoint_implied: bool,
    pub triangular: bool,
}

impl FieldChecks {
    pub fn all(&self) -> bool {
        self.homogeneous && self.divergence_free && self.adjoint_implied && self.triangular
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameReport {
    pub fields: Vec<FieldChecks>,
}

impl FrameReport {
    pub fn all_pass(&self) -> bool {
        self.fields.iter().all(FieldChecks::all)
    }
}

#[derive(Clone, Debug)]
pub struct PointRank {
    pub point: Vec<f64>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HormanderReport {
    pub depth: usize,
    pub dim: usize,
    pub bracket_count: usize,
    pub points: Vec<PointRank>,
    pub passes: bool,
}

impl HormanderReport {
    pub fn min_rank(&self) -> usize {
        self.points.iter().map(|p| p.rank).min().unwrap_or(0)
    }
}

/// Bernoulli numbers `B_n` with `B_1 = +1/2`, used by the frame oracle in tests.
pub fn bernoulli_plus(n: usize) -> Vec<BigRational> {
    let mut b = vec![BigRational::zero(); n + 1];
    b[0] = BigRational::one();
    for m in 1..=n {
        let mut acc = BigRational::zero();
        for (k, bk) in b.iter().enumerate().take(m) {
            acc += binomial(m + 1, k) * bk;
        }
        b[m] = -acc / BigRational::from_integer((m as i64 + 1).into());
    }
    if n >= 1 {
        b[1] = -b[1].clone();
    }
    b
}

fn binomial(n: usize, k: usize) -> BigRational {
    let mut r = BigRational::one();
    for i in 0..k {
        r = r * BigRational::from_integer(((n - i) as i64).into()) / BigRational::from_integer(((i + 1) as i64).into());
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::rat;

    fn poly(s: &str, d: usize) -> SparsePolynomial {
        SparsePolynomial::parse(s, d, false).unwrap()
    }

    fn field(parts: &[&str], d: usize) -> PolyField {
        PolyField::new(parts.iter().map(|s| poly(s, d)).collect())
    }

    #[test]
    fn heisenberg_frame() {
        let f = HorizontalFrame::derive(Arc::new(StratifiedAlgebra::heisenberg()));
        assert_eq!(f.field(0), &field(&["1", "0", "-x2/2"], 3));
        assert_eq!(f.field(1), &field(&["0", "1", "x1/2"], 3));
        assert!(f.verify().all_pass());
        let b = lie_bracket_fields(f.field(0), f.field(1)).unwrap();
        assert_eq!(b, field(&["0", "0", "1"], 3));
        assert!(lie_bracket_fields(f.field(0), f.field(0)).unwrap().is_zero());
    }

    #[test]
    fn engel_frame() {
        let f = HorizontalFrame::derive(Arc::new(StratifiedAlgebra::engel()));
        assert_eq!(f.field(0), &field(&["1", "0", "-x2/2", "-x2^2/12"], 4));
        assert_eq!(f.field(1), &field(&["0", "1", "x1/2", "x1*x2/12 - x3/2"], 4));
        assert!(f.verify().all_pass());
        let b = lie_bracket_fields(f.field(0), f.field(1)).unwrap();
        assert_eq!(b.components[2], SparsePolynomial::one(4));
        assert_eq!(b.components[3], poly("x2/2", 4));
    }

    #[test]
    fn alternate_engel_fields_disagree_with_the_group_law() {
        let a = Arc::new(StratifiedAlgebra::engel());
        let alternate = field(&["0", "1", "x1/2", "x1*x2/12"], 4);
        let derived = HorizontalFrame::derive(a);
        assert_ne!(derived.field(1), &alternate);
    }

    #[test]
    fn abelian_frame_is_constant() {
        let f = HorizontalFrame::derive(Arc::new(StratifiedAlgebra::abelian(3)));
        for i in 0..3 {
            assert_eq!(f.field(i), &PolyField::constant_basis(3, i));
        }
    }

    #[test]
    fn divergence_counterexample() {
        let a = Arc::new(StratifiedAlgebra::abelian(1));
        let f = HorizontalFrame::from_fields(a, vec![field(&["x1"], 1)]).unwrap();
        let report = f.verify();
        assert!(!report.fields[0].divergence_free);
        assert!(!report.all_pass());
    }

    #[test]
    fn hormander_ranks() {
        let h = HorizontalFrame::derive(Arc::new(StratifiedAlgebra::heisenberg()));
        let origin = vec![vec![0.0; 3]];
        let r2 = h.check_hormander(&origin, 2).unwrap();
        assert!(r2.passes);
        assert_eq!(r2.min_rank(), 3);
        let r1 = h.check_hormander(&origin, 1).unwrap();
        assert!(!r1.passes);
        assert_eq!(r1.min_rank(), 2);
        assert!(h.check_hormander(&[], 2).is_err());
        let e = HorizontalFrame::derive(Arc::new(StratifiedAlgebra::engel()));
        let pts = vec![vec![0.0; 4], vec![1.5, -2.0, 0.3, 4.0]];
        assert_eq!(e.check_hormander(&pts, 3).unwrap().min_rank(), 4);
        assert_eq!(e.check_hormander(&pts, 2).unwrap().min_rank(), 3);
    }

    #[test]
    fn bernoulli_numbers() {
        let b = bernoulli_plus(6);
        assert_eq!(b[1], rat(1, 2));
        assert_eq!(b[2], rat(1, 6));
        assert_eq!(b[3], rat(0, 1));
        assert_eq!(b[4], rat(-1, 30));
        assert_eq!(b[6], rat(1, 42));
    }
}
