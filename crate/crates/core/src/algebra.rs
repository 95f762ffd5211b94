//! Stratified nilpotent Lie algebras and the group law in exponential coordinates.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::poly::{parse_rational, rat_to_f64, CompiledMap, ParseError, SparsePolynomial};

#[derive(Debug, thiserror::Error)]
pub enum AlgebraError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid algebra: {0}")]
    Invalid(String),
    #[error("dilation factor must be positive, got {0}")]
    NonPositiveDilation(f64),
    #[error("exact dilation needs integer weights")]
    NonIntegerWeights,
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("cannot read algebra file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed algebra file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Input(String),
}

/// Arithmetic needed to run brackets over floats, rationals and polynomials.
pub trait Scalar: Clone {
    fn zero_like(&self) -> Self;
    fn add(&self, other: &Self) -> Self;
    fn mul(&self, other: &Self) -> Self;
    fn scale(&self, c: &BigRational) -> Self;
}

impl Scalar for f64 {
    fn zero_like(&self) -> Self {
        0.0
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn scale(&self, c: &BigRational) -> Self {
        self * rat_to_f64(c)
    }
}

impl Scalar for BigRational {
    fn zero_like(&self) -> Self {
        BigRational::zero()
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn scale(&self, c: &BigRational) -> Self {
        self * c
    }
}

impl Scalar for SparsePolynomial {
    fn zero_like(&self) -> Self {
        SparsePolynomial::zero(self.arity())
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn scale(&self, c: &BigRational) -> Self {
        SparsePolynomial::scale(self, c)
    }
}

/// One structure constant `[e_i, e_j] ∋ c·e_k`, zero-based, with `i < j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructureConstant {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub c: BigRational,
}

/// Graded nilpotent Lie algebra `V_1 ⊕ … ⊕ V_κ` with its BCH group law.
#[derive(Clone)]
pub struct StratifiedAlgebra {
    name: String,
    layer_dims: Vec<usize>,
    weights: Vec<BigRational>,
    weights_f64: Vec<f64>,
    layer_of: Vec<usize>,
    constants: Vec<StructureConstant>,
    table: Vec<Vec<Vec<(usize, BigRational)>>>,
    product: Vec<SparsePolynomial>,
    product_f64: CompiledMap,
    norm_exponent: u64,
}

impl fmt::Debug for StratifiedAlgebra {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StratifiedAlgebra")
            .field("name", &self.name)
            .field("layer_dims", &self.layer_dims)
            .field("weights", &self.weights.iter().map(|w| w.to_string()).collect::<Vec<_>>())
            .field("brackets", &self.constants.len())
            .finish()
    }
}

/// On-disk form of a custom algebra.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgebraFile {
    #[serde(default)]
    pub name: Option<String>,
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub weights: Option<Vec<NumberOrString>>,
    #[serde(default)]
    pub brackets: Vec<BracketEntry>,
}

/// A bracket line of [`AlgebraFile`], indices starting at 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BracketEntry {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub c: NumberOrString,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NumberOrString {
    Int(i64),
    Float(f64),
    Text(String),
}

impl NumberOrString {
    pub fn to_rational(&self) -> Result<BigRational, ParseError> {
        match self {
            NumberOrString::Int(n) => Ok(BigRational::from_integer(BigInt::from(*n))),
            NumberOrString::Float(v) => parse_rational(&v.to_string()),
            NumberOrString::Text(s) => parse_rational(s),
        }
    }
}

fn factorial(n: u64) -> u64 {
    (1..=n).product()
}

impl StratifiedAlgebra {
    /// Builds and validates an algebra from zero-based structure constants.
    ///
    /// Entries with `i > j` are folded onto `(j, i)` with a sign flip.
    pub fn new(
        name: impl Into<String>,
        layer_dims: Vec<usize>,
        weights: Vec<BigRational>,
        brackets: Vec<StructureConstant>,
    ) -> Result<Self, AlgebraError> {
        let invalid = |m: String| AlgebraError::Invalid(m);
        if layer_dims.is_empty() || layer_dims.contains(&0) {
            return Err(invalid("layer dimensions must be positive".into()));
        }
        if weights.len() != layer_dims.len() {
            return Err(invalid(format!(
                "{} weights for {} layers",
                weights.len(),
                layer_dims.len()
            )));
        }
        if !weights[0].is_positive() || weights.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("weights must be positive and strictly increasing".into()));
        }
        let d: usize = layer_dims.iter().sum();
        let layer_of: Vec<usize> =
            layer_dims.iter().enumerate().flat_map(|(l, &n)| std::iter::repeat_n(l, n)).collect();

        let mut merged: BTreeMap<(usize, usize, usize), BigRational> = BTreeMap::new();
        let mut seen: BTreeMap<(usize, usize, usize), BigRational> = BTreeMap::new();
        for b in brackets {
            if b.i >= d || b.j >= d || b.k >= d {
                return Err(invalid(format!("bracket index out of range for dimension {d}")));
            }
            if b.i == b.j {
                if !b.c.is_zero() {
                    return Err(invalid(format!("[e{0},e{0}] must vanish", b.i + 1)));
                }
                continue;
            }
            let (key, c) =
                if b.i < b.j { ((b.i, b.j, b.k), b.c.clone()) } else { ((b.j, b.i, b.k), -b.c.clone()) };
            let directed = (b.i, b.j, b.k);
            if seen.insert(directed, b.c.clone()).is_some() {
                return Err(invalid(format!(
                    "duplicate bracket entry ({}, {}, {})",
                    b.i + 1,
                    b.j + 1,
                    b.k + 1
                )));
            }
            if let Some(prev) = merged.get(&key) {
                if *prev != c {
                    return Err(invalid(format!(
                        "brackets ({},{}) and ({},{}) are not antisymmetric",
                        b.i + 1,
                        b.j + 1,
                        b.j + 1,
                        b.i + 1
                    )));
                }
            } else {
                merged.insert(key, c);
            }
        }
        let constants: Vec<StructureConstant> = merged
            .into_iter()
            .filter(|(_, c)| !c.is_zero())
            .map(|((i, j, k), c)| StructureConstant { i, j, k, c })
            .collect();
        for sc in &constants {
            let (wi, wj, wk) = (&weights[layer_of[sc.i]], &weights[layer_of[sc.j]], &weights[layer_of[sc.k]]);
            if &(wi + wj) != wk {
                return Err(invalid(format!(
                    "bracket [e{},e{}] -> e{} breaks the grading",
                    sc.i + 1,
                    sc.j + 1,
                    sc.k + 1
                )));
            }
        }
        let mut table = vec![vec![Vec::new(); d]; d];
        for sc in &constants {
            table[sc.i][sc.j].push((sc.k, sc.c.clone()));
            table[sc.j][sc.i].push((sc.k, -sc.c.clone()));
        }
        let kappa = layer_dims.len() as u64;
        let weights_f64 = weights.iter().map(rat_to_f64).collect();
        let mut alg = Self {
            name: name.into(),
            layer_dims,
            weights,
            weights_f64,
            layer_of,
            constants,
            table,
            product: Vec::new(),
            product_f64: CompiledMap::new(&[]),
            norm_exponent: 2 * factorial(kappa),
        };
        alg.check_jacobi()?;
        alg.check_nilpotent()?;
        alg.product = alg.symbolic_bch();
        alg.product_f64 = CompiledMap::new(&alg.product);
        Ok(alg)
    }

    /// Commutative `ℝ^d` with a single layer.
    pub fn abelian(d: usize) -> Self {
        Self::new(format!("abelian-{d}"), vec![d], vec![BigRational::one()], vec![])
            .expect("abelian preset is valid")
    }

    /// First Heisenberg group: `[e1, e2] = e3`.
    pub fn heisenberg() -> Self {
        Self::new(
            "heisenberg",
            vec![2, 1],
            vec![int(1), int(2)],
            vec![StructureConstant { i: 0, j: 1, k: 2, c: int(1) }],
        )
        .expect("heisenberg preset is valid")
    }

    /// Four-dimensional Engel-type algebra: `[e1, e2] = e3`, `[e2, e3] = e4`.
    pub fn engel() -> Self {
        Self::new(
            "engel",
            vec![2, 1, 1],
            vec![int(1), int(2), int(3)],
            vec![
                StructureConstant { i: 0, j: 1, k: 2, c: int(1) },
                StructureConstant { i: 1, j: 2, k: 3, c: int(1) },
            ],
        )
        .expect("engel preset is valid")
    }

    pub fn preset(name: &str, dim: Option<usize>) -> Result<Self, AlgebraError> {
        match name {
            "heisenberg" => Ok(Self::heisenberg()),
            "engel" => Ok(Self::engel()),
            "abelian" => {
                let d = dim.ok_or_else(|| AlgebraError::Input("abelian preset needs a dimension".into()))?;
                if d == 0 {
                    return Err(AlgebraError::Input("abelian dimension must be positive".into()));
                }
                Ok(Self::abelian(d))
            }
            other => Err(AlgebraError::Input(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_file_data(file: &AlgebraFile) -> Result<Self, AlgebraError> {
        let weights = match &file.weights {
            Some(w) => w.iter().map(NumberOrString::to_rational).collect::<Result<Vec<_>, _>>()?,
            None => (1..=file.layer_dims.len() as i64).map(int).collect(),
        };
        let mut brackets = Vec::with_capacity(file.brackets.len());
        for b in &file.brackets {
            if b.i == 0 || b.j == 0 || b.k == 0 {
                return Err(AlgebraError::Invalid("bracket indices start at 1".into()));
            }
            brackets.push(StructureConstant { i: b.i - 1, j: b.j - 1, k: b.k - 1, c: b.c.to_rational()? });
        }
        let name = file.name.clone().unwrap_or_else(|| "custom".into());
        Self::new(name, file.layer_dims.clone(), weights, brackets)
    }

    pub fn from_json(text: &str) -> Result<Self, AlgebraError> {
        Self::from_file_data(&serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, AlgebraError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_data(&self) -> AlgebraFile {
        AlgebraFile {
            name: Some(self.name.clone()),
            layer_dims: self.layer_dims.clone(),
            weights: Some(self.weights.iter().map(|w| NumberOrString::Text(w.to_string())).collect()),
            brackets: self
                .constants
                .iter()
                .map(|c| BracketEntry { i: c.i + 1, j: c.j + 1, k: c.k + 1, c: NumberOrString::Text(c.c.to_string()) })
                .collect(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.layer_of.len()
    }

    /// Number of horizontal directions, `dim V_1`.
    pub fn rank(&self) -> usize {
        self.layer_dims[0]
    }

    /// Number of layers κ.
    pub fn step(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layer_weights(&self) -> &[BigRational] {
        &self.weights
    }

    /// Layer index of coordinate `k`.
    pub fn layer_of(&self, k: usize) -> usize {
        self.layer_of[k]
    }

    /// Weight of every coordinate.
    pub fn coordinate_weights(&self) -> Vec<BigRational> {
        self.layer_of.iter().map(|&l| self.weights[l].clone()).collect()
    }

    pub fn coordinate_weights_f64(&self) -> Vec<f64> {
        self.layer_of.iter().map(|&l| self.weights_f64[l]).collect()
    }

    pub fn structure_constants(&self) -> &[StructureConstant] {
        &self.constants
    }

    /// Exponent `2κ!` of the homogeneous norm.
    pub fn norm_exponent(&self) -> u64 {
        self.norm_exponent
    }

    /// `Q = Σ_ℓ λ_ℓ·dim V_ℓ`.
    pub fn homogeneous_dimension_exact(&self) -> BigRational {
        self.layer_dims
            .iter()
            .zip(&self.weights)
            .map(|(&n, w)| w * BigRational::from_integer(BigInt::from(n)))
            .fold(BigRational::zero(), |a, b| a + b)
    }

    /// `Q` as an integer; `None` for weights with a fractional total.
    pub fn homogeneous_dimension(&self) -> Option<u64> {
        let q = self.homogeneous_dimension_exact();
        q.is_integer().then(|| q.to_integer().to_u64()).flatten()
    }

    pub fn homogeneous_dimension_f64(&self) -> f64 {
        rat_to_f64(&self.homogeneous_dimension_exact())
    }

    fn check_len(&self, got: usize) -> Result<(), AlgebraError> {
        if got != self.dim() {
            return Err(AlgebraError::Dimension { expected: self.dim(), got });
        }
        Ok(())
    }

    /// `[x, y]`, generic over the coordinate ring.
    pub fn bracket_generic<T: Scalar>(&self, x: &[T], y: &[T]) -> Vec<T> {
        let zero = x[0].zero_like();
        let mut out = vec![zero; self.dim()];
        for sc in &self.constants {
            let t = x[sc.i].mul(&y[sc.j]).add(&x[sc.j].mul(&y[sc.i]).scale(&-BigRational::one()));
            out[sc.k] = out[sc.k].add(&t.scale(&sc.c));
        }
        out
    }

    pub fn bracket_coords(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, AlgebraError> {
        self.check_len(x.len())?;
        self.check_len(y.len())?;
        Ok(self.bracket_generic(x, y))
    }

    pub fn bracket_exact(&self, x: &[BigRational], y: &[BigRational]) -> Result<Vec<BigRational>, AlgebraError> {
        self.check_len(x.len())?;
        self.check_len(y.len())?;
        Ok(self.bracket_generic(x, y))
    }

    /// `[e_i, e_j]` as a sparse list.
    pub fn bracket_basis(&self, i: usize, j: usize) -> &[(usize, BigRational)] {
        &self.table[i][j]
    }

    fn check_jacobi(&self) -> Result<(), AlgebraError> {
        let d = self.dim();
        let basis = |i: usize| -> Vec<BigRational> {
            let mut v = vec![BigRational::zero(); d];
            v[i] = BigRational::one();
            v
        };
        for i in 0..d {
            for j in i + 1..d {
                for l in j + 1..d {
                    let (a, b, c) = (basis(i), basis(j), basis(l));
                    let t1 = self.bracket_generic(&a, &self.bracket_generic(&b, &c));
                    let t2 = self.bracket_generic(&b, &self.bracket_generic(&c, &a));
                    let t3 = self.bracket_generic(&c, &self.bracket_generic(&a, &b));
                    if (0..d).any(|k| !(&t1[k] + &t2[k] + &t3[k]).is_zero()) {
                        return Err(AlgebraError::Invalid(format!(
                            "Jacobi identity fails for (e{}, e{}, e{})",
                            i + 1,
                            j + 1,
                            l + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Requires the lower central series to vanish after κ terms.
    fn check_nilpotent(&self) -> Result<(), AlgebraError> {
        let d = self.dim();
        let mut current: Vec<Vec<BigRational>> = (0..d)
            .map(|i| {
                let mut v = vec![BigRational::zero(); d];
                v[i] = BigRational::one();
                v
            })
            .collect();
        for _ in 0..self.step() {
            let mut next = Vec::new();
            for i in 0..d {
                let mut e = vec![BigRational::zero(); d];
                e[i] = BigRational::one();
                for v in &current {
                    next.push(self.bracket_generic(&e, v));
                }
            }
            current = row_basis(next);
            if current.is_empty() {
                return Ok(());
            }
        }
        Err(AlgebraError::Invalid(format!("brackets of length {} do not vanish", self.step() + 1)))
    }

    /// BCH product as polynomials in `(x_1..x_d, y_1..y_d)` via Dynkin's formula.
    fn symbolic_bch(&self) -> Vec<SparsePolynomial> {
        let d = self.dim();
        let x: Vec<SparsePolynomial> = (0..d).map(|i| SparsePolynomial::var(2 * d, i)).collect();
        let y: Vec<SparsePolynomial> = (0..d).map(|i| SparsePolynomial::var(2 * d, d + i)).collect();
        let mut out = vec![SparsePolynomial::zero(2 * d); d];
        for (word, coeff) in dynkin_words(self.step()) {
            let mut acc = if *word.last().unwrap() { y.clone() } else { x.clone() };
            for &letter in word.iter().rev().skip(1) {
                acc = self.bracket_generic(if letter { &y } else { &x }, &acc);
            }
            for k in 0..d {
                out[k] = &out[k] + &acc[k].scale(&coeff);
            }
        }
        out
    }

    /// Group law components as polynomials in `2d` variables.
    pub fn product_polynomials(&self) -> &[SparsePolynomial] {
        &self.product
    }

    pub fn bch_product(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, AlgebraError> {
        self.check_len(x.len())?;
        self.check_len(y.len())?;
        Ok(self.mul(x, y))
    }

    /// Unchecked floating product; panics on bad lengths.
    pub fn mul(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.mul_into(x, y, &mut out);
        out
    }

    pub fn mul_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut xy = [0.0f64; 32];
        let buf: &mut [f64] = if 2 * d <= 32 { &mut xy[..2 * d] } else { return self.mul_into_heap(x, y, out) };
        buf[..d].copy_from_slice(x);
        buf[d..].copy_from_slice(y);
        self.product_f64.eval_into(buf, out);
    }

    fn mul_into_heap(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let buf: Vec<f64> = x.iter().chain(y).copied().collect();
        self.product_f64.eval_into(&buf, out);
    }

    pub fn bch_product_exact(&self, x: &[BigRational], y: &[BigRational]) -> Result<Vec<BigRational>, AlgebraError> {
        self.check_len(x.len())?;
        self.check_len(y.len())?;
        let point: Vec<BigRational> = x.iter().chain(y).cloned().collect();
        Ok(self.product.iter().map(|p| p.eval_exact(&point)).collect())
    }

    pub fn inverse(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| -v).collect()
    }

    pub fn dilate(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, AlgebraError> {
        if !(t > 0.0) {
            return Err(AlgebraError::NonPositiveDilation(t));
        }
        self.check_len(x.len())?;
        Ok(self.dilate_unchecked(t, x))
    }

    pub(crate) fn dilate_unchecked(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let scale: Vec<f64> = self.weights_f64.iter().map(|w| t.powf(*w)).collect();
        x.iter().zip(&self.layer_of).map(|(v, &l)| v * scale[l]).collect()
    }

    pub fn dilate_exact(&self, t: &BigRational, x: &[BigRational]) -> Result<Vec<BigRational>, AlgebraError> {
        if !t.is_positive() {
            return Err(AlgebraError::NonPositiveDilation(rat_to_f64(t)));
        }
        self.check_len(x.len())?;
        let powers = self
            .weights
            .iter()
            .map(|w| {
                if !w.is_integer() {
                    return Err(AlgebraError::NonIntegerWeights);
                }
                let k = w.to_integer().to_usize().ok_or(AlgebraError::NonIntegerWeights)?;
                Ok(num_traits::pow(t.clone(), k))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(x.iter().zip(&self.layer_of).map(|(v, &l)| v * &powers[l]).collect())
    }

    /// `‖x‖_G = (Σ_ℓ |π_ℓ(x)|^{2κ!/λ_ℓ})^{1/(2κ!)}`.
    pub fn homogeneous_norm(&self, x: &[f64]) -> f64 {
        let mut sq = [0.0f64; 16];
        let mut sq_heap;
        let layers: &mut [f64] = if self.layer_dims.len() <= 16 {
            &mut sq[..self.layer_dims.len()]
        } else {
            sq_heap = vec![0.0; self.layer_dims.len()];
            &mut sq_heap
        };
        for (v, &l) in x.iter().zip(&self.layer_of) {
            layers[l] += v * v;
        }
        // Rescale by the largest homogeneous layer size to keep the powers finite.
        let mut top = 0.0f64;
        for (s, w) in layers.iter_mut().zip(&self.weights_f64) {
            *s = s.sqrt().powf(1.0 / w);
            top = top.max(*s);
        }
        if top == 0.0 {
            return 0.0;
        }
        let p = self.norm_exponent as f64;
        let sum: f64 = layers.iter().map(|s| (s / top).powf(p)).sum();
        top * sum.powf(1.0 / p)
    }

    /// `‖x⁻¹ ∗ y‖_G`.
    pub fn quasi_distance(&self, x: &[f64], y: &[f64]) -> f64 {
        if x == y {
            return 0.0;
        }
        let d = self.dim();
        let mut buf = [0.0f64; 32];
        if 2 * d <= 32 {
            for k in 0..d {
                buf[k] = -x[k];
            }
            buf[d..2 * d].copy_from_slice(y);
            let mut z = [0.0f64; 16];
            self.product_f64.eval_into(&buf[..2 * d], &mut z[..d]);
            self.homogeneous_norm(&z[..d])
        } else {
            let z = self.mul(&self.inverse(x), y);
            self.homogeneous_norm(&z)
        }
    }

    pub fn element(&self, coords: Vec<f64>) -> Result<GroupElement<'_>, AlgebraError> {
        self.check_len(coords.len())?;
        Ok(GroupElement { algebra: self, coords })
    }
}

fn int(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// Words in `{X=false, Y=true}` with their Dynkin coefficients, up to length `max_len`.
fn dynkin_words(max_len: usize) -> Vec<(Vec<bool>, BigRational)> {
    let fact = |n: usize| -> BigInt { (1..=n).map(BigInt::from).product() };
    let mut acc: BTreeMap<Vec<bool>, BigRational> = BTreeMap::new();
    // Each block is (r_i, s_i) with r_i + s_i ≥ 1.
    fn recurse(
        blocks: &mut Vec<(usize, usize)>,
        used: usize,
        max_len: usize,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if !blocks.is_empty() {
            out.push(blocks.clone());
        }
        for r in 0..=max_len - used {
            for s in 0..=max_len - used - r {
                if r + s == 0 {
                    continue;
                }
                blocks.push((r, s));
                recurse(blocks, used + r + s, max_len, out);
                blocks.pop();
            }
        }
    }
    let mut seqs = Vec::new();
    recurse(&mut Vec::new(), 0, max_len, &mut seqs);
    for seq in seqs {
        let n = seq.len();
        let total: usize = seq.iter().map(|(r, s)| r + s).sum();
        let mut word = Vec::with_capacity(total);
        let mut denom = BigInt::from(n * total);
        for &(r, s) in &seq {
            word.extend(std::iter::repeat_n(false, r));
            word.extend(std::iter::repeat_n(true, s));
            denom *= fact(r) * fact(s);
        }
        if total >= 2 && word[total - 1] == word[total - 2] {
            continue;
        }
        let sign = if n % 2 == 1 { 1 } else { -1 };
        let c = BigRational::new(BigInt::from(sign), denom);
        let e = acc.entry(word).or_insert_with(BigRational::zero);
        *e += c;
    }
    acc.into_iter().filter(|(_, c)| !c.is_zero()).collect()
}

/// Row-reduces rational vectors and returns a basis of their span.
pub(crate) fn row_basis(mut rows: Vec<Vec<BigRational>>) -> Vec<Vec<BigRational>> {
    rows.retain(|r| r.iter().any(|v| !v.is_zero()));
    let Some(width) = rows.first().map(Vec::len) else { return rows };
    let mut basis: Vec<Vec<BigRational>> = Vec::new();
    let mut pivots: Vec<usize> = Vec::new();
    for mut r in rows {
        for (b, &p) in basis.iter().zip(&pivots) {
            if !r[p].is_zero() {
                let f = r[p].clone() / &b[p];
                for c in 0..width {
                    r[c] = &r[c] - &(&f * &b[c]);
                }
            }
        }
        if let Some(p) = r.iter().position(|v| !v.is_zero()) {
            basis.push(r);
            pivots.push(p);
        }
    }
    basis
}

/// A point of the group together with its algebra.
#[derive(Clone, Debug)]
pub struct GroupElement<'a> {
    algebra: &'a StratifiedAlgebra,
    coords: Vec<f64>,
}

impl<'a> GroupElement<'a> {
    pub fn identity(algebra: &'a StratifiedAlgebra) -> Self {
        Self { algebra, coords: vec![0.0; algebra.dim()] }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn mul(&self, rhs: &GroupElement<'_>) -> GroupElement<'a> {
        GroupElement { algebra: self.algebra, coords: self.algebra.mul(&self.coords, &rhs.coords) }
    }

    pub fn inverse(&self) -> GroupElement<'a> {
        GroupElement { algebra: self.algebra, coords: self.algebra.inverse(&self.coords) }
    }

    pub fn dilate(&self, t: f64) -> Result<GroupElement<'a>, AlgebraError> {
        Ok(GroupElement { algebra: self.algebra, coords: self.algebra.dilate(t, &self.coords)? })
    }

    pub fn norm(&self) -> f64 {
        self.algebra.homogeneous_norm(&self.coords)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::rat;

    fn r(v: &[i64]) -> Vec<BigRational> {
        v.iter().map(|&n| int(n)).collect()
    }

    /// Hand-expanded BCH through degree three.
    fn bch3(a: &StratifiedAlgebra, x: &[BigRational], y: &[BigRational]) -> Vec<BigRational> {
        let xy = a.bracket_generic(x, y);
        let xxy = a.bracket_generic(x, &xy);
        let yxy = a.bracket_generic(y, &xy);
        (0..a.dim())
            .map(|k| &x[k] + &y[k] + &xy[k] * rat(1, 2) + &xxy[k] * rat(1, 12) - &yxy[k] * rat(1, 12))
            .collect()
    }

    #[test]
    fn engel_brackets() {
        let a = StratifiedAlgebra::engel();
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        assert_eq!(a.bracket_coords(&e(0), &e(1)).unwrap(), e(2));
        assert_eq!(a.bracket_coords(&e(1), &e(2)).unwrap(), e(3));
        let x = [0.3, -1.2, 2.0, 0.5];
        assert!(a.bracket_coords(&x, &x).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(a.bracket_coords(&x[..3], &x), Err(AlgebraError::Dimension { .. })));
    }

    #[test]
    fn engel_product_of_generators() {
        let a = StratifiedAlgebra::engel();
        let p = a.bch_product_exact(&r(&[1, 0, 0, 0]), &r(&[0, 1, 0, 0])).unwrap();
        assert_eq!(p, vec![int(1), int(1), rat(1, 2), rat(-1, 12)]);
    }

    #[test]
    fn heisenberg_product_of_generators() {
        let a = StratifiedAlgebra::heisenberg();
        let p = a.bch_product_exact(&r(&[1, 0, 0]), &r(&[0, 1, 0])).unwrap();
        assert_eq!(p, vec![int(1), int(1), rat(1, 2)]);
        assert_eq!(a.bch_product(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), vec![1.0, 1.0, 0.5]);
    }

    #[test]
    fn dynkin_matches_degree_three_expansion() {
        for a in [StratifiedAlgebra::heisenberg(), StratifiedAlgebra::engel()] {
            let x: Vec<BigRational> = (0..a.dim()).map(|k| rat(k as i64 * 3 - 2, 5)).collect();
            let y: Vec<BigRational> = (0..a.dim()).map(|k| rat(7 - 2 * k as i64, 3)).collect();
            assert_eq!(a.bch_product_exact(&x, &y).unwrap(), bch3(&a, &x, &y));
        }
    }

    #[test]
    fn inverse_is_negation() {
        let a = StratifiedAlgebra::engel();
        let x = r(&[3, -2, 5, 7]);
        let minus: Vec<BigRational> = x.iter().map(|v| -v).collect();
        assert!(a.bch_product_exact(&x, &minus).unwrap().iter().all(Zero::is_zero));
    }

    #[test]
    fn dilations() {
        let e = StratifiedAlgebra::engel();
        assert_eq!(e.dilate(2.0, &[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![2.0, 2.0, 4.0, 8.0]);
        let h = StratifiedAlgebra::heisenberg();
        assert_eq!(h.dilate(3.0, &[1.0, 0.0, 1.0]).unwrap(), vec![3.0, 0.0, 9.0]);
        assert_eq!(h.dilate(1.0, &[0.2, 0.4, -1.0]).unwrap(), vec![0.2, 0.4, -1.0]);
        assert!(matches!(h.dilate(0.0, &[0.0; 3]), Err(AlgebraError::NonPositiveDilation(_))));
        assert!(h.dilate(-1.0, &[0.0; 3]).is_err());
    }

    #[test]
    fn norms_and_dimension() {
        let e = StratifiedAlgebra::engel();
        let h = StratifiedAlgebra::heisenberg();
        assert_eq!(e.homogeneous_norm(&[1.0, 0.0, 0.0, 0.0]), 1.0);
        assert_eq!(h.homogeneous_norm(&[0.0, 0.0, 1.0]), 1.0);
        assert_eq!(e.homogeneous_norm(&[0.0, 0.0, 0.0, 1.0]), 1.0);
        let x2 = e.dilate(2.0, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((e.homogeneous_norm(&x2) - 2.0).abs() < 1e-14);
        assert_eq!(h.homogeneous_dimension(), Some(4));
        assert_eq!(e.homogeneous_dimension(), Some(7));
        assert_eq!(StratifiedAlgebra::abelian(5).homogeneous_dimension(), Some(5));
        assert_eq!(e.norm_exponent(), 12);
        assert_eq!(h.homogeneous_norm(&[0.0; 3]), 0.0);
    }

    #[test]
    fn rejects_bad_algebras() {
        let bad_grading = StratifiedAlgebra::new(
            "x",
            vec![2, 1],
            vec![int(1), int(2)],
            vec![StructureConstant { i: 0, j: 2, k: 1, c: int(1) }],
        );
        assert!(bad_grading.is_err());
        let not_antisym = StratifiedAlgebra::from_json(
            r#"{"layer_dims":[2,1],"brackets":[{"i":1,"j":2,"k":3,"c":"1"},{"i":2,"j":1,"k":3,"c":"1"}]}"#,
        );
        assert!(not_antisym.is_err());
        let decreasing = StratifiedAlgebra::new("x", vec![2, 1], vec![int(2), int(1)], vec![]);
        assert!(decreasing.is_err());
    }

    #[test]
    fn loads_custom_json() {
        let a = StratifiedAlgebra::from_json(
            r#"{"layer_dims":[2,1,1],"weights":[1,2,3],
                "brackets":[{"i":1,"j":2,"k":3,"c":"1"},{"i":2,"j":3,"k":4,"c":"−-1/1"}]}"#,
        );
        assert!(a.is_err(), "double sign is not a rational");
        let a = StratifiedAlgebra::from_json(
            r#"{"layer_dims":[2,1,1],"weights":[1,2,"3"],
                "brackets":[{"i":1,"j":2,"k":3,"c":"1"},{"i":3,"j":2,"k":4,"c":"−1"}]}"#,
        )
        .unwrap();
        let p = a.bch_product_exact(&r(&[1, 0, 0, 0]), &r(&[0, 1, 0, 0])).unwrap();
        assert_eq!(p[3], rat(-1, 12));
        let round = StratifiedAlgebra::from_file_data(&a.to_file_data()).unwrap();
        assert_eq!(round.product_polynomials(), a.product_polynomials());
    }

    #[test]
    fn fractional_weights_are_representable() {
        let a = StratifiedAlgebra::new(
            "frac",
            vec![2, 1],
            vec![rat(1, 2), int(1)],
            vec![StructureConstant { i: 0, j: 1, k: 2, c: int(1) }],
        )
        .unwrap();
        assert_eq!(a.homogeneous_dimension_exact(), int(2));
        assert!(a.dilate_exact(&int(2), &r(&[1, 1, 1])).is_err());
        let x = [0.3, -0.7, 0.2];
        let t = 1.7;
        let lhs = a.homogeneous_norm(&a.dilate(t, &x).unwrap());
        assert!((lhs - t * a.homogeneous_norm(&x)).abs() < 1e-12);
    }
}
