//! Exact multivariate polynomials over the rationals.
//!
//! Variables are indexed from zero internally and printed as `x1, x2, ...`.
//! A [`SparsePolynomial`] never stores a zero coefficient.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Failure to parse a rational or polynomial literal.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot parse `{input}`: {reason}")]
pub struct ParseError {
    pub input: String,
    pub reason: String,
}

impl ParseError {
    fn new(input: &str, reason: &str) -> Self {
        Self { input: input.to_string(), reason: reason.to_string() }
    }
}

/// Multi-index of exponents, one entry per variable.
pub type Exponents = Vec<u32>;

/// Sparse polynomial with exact rational coefficients.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SparsePolynomial {
    arity: usize,
    terms: BTreeMap<Exponents, BigRational>,
}

/// Builds a rational from a numerator and denominator.
pub fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Parses `"3"`, `"-1/12"` or `"−1/12"` (unicode minus) into a rational.
pub fn parse_rational(text: &str) -> Result<BigRational, ParseError> {
    let cleaned: String = text.trim().replace('\u{2212}', "-");
    let bad = || ParseError::new(text, "not a rational number");
    if let Some((n, d)) = cleaned.split_once('/') {
        let n: BigInt = n.trim().parse().map_err(|_| bad())?;
        let d: BigInt = d.trim().parse().map_err(|_| bad())?;
        if d.is_zero() {
            return Err(ParseError::new(text, "zero denominator"));
        }
        Ok(BigRational::new(n, d))
    } else if cleaned.contains(['.', 'e', 'E']) {
        let v: f64 = cleaned.parse().map_err(|_| bad())?;
        BigRational::from_float(v).ok_or_else(bad)
    } else {
        let n: BigInt = cleaned.parse().map_err(|_| bad())?;
        Ok(BigRational::from_integer(n))
    }
}

/// Converts a rational to the nearest `f64`.
pub fn rat_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

impl SparsePolynomial {
    pub fn zero(arity: usize) -> Self {
        Self { arity, terms: BTreeMap::new() }
    }

    pub fn constant(arity: usize, c: BigRational) -> Self {
        Self::monomial(arity, vec![0; arity], c)
    }

    pub fn one(arity: usize) -> Self {
        Self::constant(arity, BigRational::one())
    }

    /// The coordinate function `x_{var+1}`.
    pub fn var(arity: usize, var: usize) -> Self {
        assert!(var < arity, "variable {var} out of range for arity {arity}");
        let mut e = vec![0; arity];
        e[var] = 1;
        Self::monomial(arity, e, BigRational::one())
    }

    pub fn monomial(arity: usize, exponents: Exponents, c: BigRational) -> Self {
        assert_eq!(exponents.len(), arity, "exponent vector length");
        let mut p = Self::zero(arity);
        if !c.is_zero() {
            p.terms.insert(exponents, c);
        }
        p
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Exponents, &BigRational)> {
        self.terms.iter()
    }

    pub fn coefficient(&self, exponents: &[u32]) -> BigRational {
        self.terms.get(exponents).cloned().unwrap_or_else(BigRational::zero)
    }

    /// Returns the constant term if the polynomial has no other terms.
    pub fn as_constant(&self) -> Option<BigRational> {
        match self.terms.len() {
            0 => Some(BigRational::zero()),
            1 => {
                let (e, c) = self.terms.iter().next()?;
                e.iter().all(|&k| k == 0).then(|| c.clone())
            }
            _ => None,
        }
    }

    fn add_term(&mut self, exponents: Exponents, c: BigRational) {
        if c.is_zero() {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(exponents) {
            Entry::Vacant(v) => {
                v.insert(c);
            }
            Entry::Occupied(mut o) => {
                let sum = o.get() + c;
                if sum.is_zero() {
                    o.remove();
                } else {
                    *o.get_mut() = sum;
                }
            }
        }
    }

    pub fn scale(&self, c: &BigRational) -> Self {
        if c.is_zero() {
            return Self::zero(self.arity);
        }
        let terms = self.terms.iter().map(|(e, v)| (e.clone(), v * c)).collect();
        Self { arity: self.arity, terms }
    }

    /// Partial derivative with respect to variable `var`.
    pub fn partial(&self, var: usize) -> Self {
        assert!(var < self.arity);
        let mut out = Self::zero(self.arity);
        for (e, c) in &self.terms {
            let k = e[var];
            if k == 0 {
                continue;
            }
            let mut e2 = e.clone();
            e2[var] = k - 1;
            out.add_term(e2, c * BigRational::from_integer(BigInt::from(k)));
        }
        out
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    /// Weighted degree of every monomial, `Σ_j weights[j]·e_j`.
    pub fn weighted_degrees(&self, weights: &[BigRational]) -> Vec<BigRational> {
        assert_eq!(weights.len(), self.arity);
        self.terms
            .keys()
            .map(|e| {
                e.iter()
                    .zip(weights)
                    .map(|(&k, w)| w * BigRational::from_integer(BigInt::from(k)))
                    .fold(BigRational::zero(), |a, b| a + b)
            })
            .collect()
    }

    /// True if every monomial has weighted degree exactly `degree`.
    pub fn is_weighted_homogeneous(&self, weights: &[BigRational], degree: &BigRational) -> bool {
        self.weighted_degrees(weights).iter().all(|d| d == degree)
    }

    /// True if variable `var` appears in some monomial.
    pub fn depends_on(&self, var: usize) -> bool {
        self.terms.keys().any(|e| e[var] > 0)
    }

    pub fn eval_exact(&self, point: &[BigRational]) -> BigRational {
        assert_eq!(point.len(), self.arity);
        let mut acc = BigRational::zero();
        for (e, c) in &self.terms {
            let mut m = c.clone();
            for (x, &k) in point.iter().zip(e) {
                if k > 0 {
                    m *= num_traits::pow(x.clone(), k as usize);
                }
            }
            acc += m;
        }
        acc
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        assert_eq!(point.len(), self.arity);
        self.terms
            .iter()
            .map(|(e, c)| {
                let mut m = rat_to_f64(c);
                for (x, &k) in point.iter().zip(e) {
                    if k > 0 {
                        m *= x.powi(k as i32);
                    }
                }
                m
            })
            .sum()
    }

    /// Substitutes polynomials (all of a common arity) for every variable.
    pub fn compose(&self, subs: &[SparsePolynomial]) -> Self {
        assert_eq!(subs.len(), self.arity);
        let target = subs.first().map(|s| s.arity).unwrap_or(0);
        let mut out = Self::zero(target);
        for (e, c) in &self.terms {
            let mut m = Self::constant(target, c.clone());
            for (s, &k) in subs.iter().zip(e) {
                for _ in 0..k {
                    m = &m * s;
                }
            }
            out = &out + &m;
        }
        out
    }

    /// Re-embeds into a larger variable set; `map[j]` is the new index of variable `j`.
    pub fn embed(&self, new_arity: usize, map: &[usize]) -> Self {
        assert_eq!(map.len(), self.arity);
        let mut out = Self::zero(new_arity);
        for (e, c) in &self.terms {
            let mut e2 = vec![0; new_arity];
            for (j, &k) in e.iter().enumerate() {
                e2[map[j]] += k;
            }
            out.add_term(e2, c.clone());
        }
        out
    }

    /// Sets variable `var` to zero and drops it, lowering the arity by one.
    pub fn drop_var_at_zero(&self, var: usize) -> Self {
        let mut out = Self::zero(self.arity - 1);
        for (e, c) in &self.terms {
            if e[var] == 0 {
                let mut e2 = e.clone();
                e2.remove(var);
                out.add_term(e2, c.clone());
            }
        }
        out
    }

    /// Largest `|c|·Π|x_j|^{e_j}` bound of the polynomial over a box `|x_j| ≤ r_j`.
    pub fn abs_bound(&self, radii: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                let mut m = rat_to_f64(&c.abs());
                for (r, &k) in radii.iter().zip(e) {
                    m *= r.powi(k as i32);
                }
                m
            })
            .sum()
    }

    pub fn compile(&self) -> CompiledPoly {
        CompiledPoly::new(self)
    }

    /// Parses expressions such as `"1/2*x1^2*x2 - 3*x3 + s"`.
    ///
    /// Variables are `x1..x<n>` and, when `time_var` is set, `s` which maps to
    /// the last slot of the arity.
    pub fn parse(text: &str, arity: usize, time_var: bool) -> Result<Self, ParseError> {
        Parser::new(text, arity, time_var).parse()
    }
}

impl Add for &SparsePolynomial {
    type Output = SparsePolynomial;
    fn add(self, rhs: &SparsePolynomial) -> SparsePolynomial {
        assert_eq!(self.arity, rhs.arity, "arity mismatch");
        let mut out = self.clone();
        for (e, c) in &rhs.terms {
            out.add_term(e.clone(), c.clone());
        }
        out
    }
}

impl Sub for &SparsePolynomial {
    type Output = SparsePolynomial;
    fn sub(self, rhs: &SparsePolynomial) -> SparsePolynomial {
        self + &(-rhs)
    }
}

impl Neg for &SparsePolynomial {
    type Output = SparsePolynomial;
    fn neg(self) -> SparsePolynomial {
        let terms = self.terms.iter().map(|(e, c)| (e.clone(), -c)).collect();
        SparsePolynomial { arity: self.arity, terms }
    }
}

impl Mul for &SparsePolynomial {
    type Output = SparsePolynomial;
    fn mul(self, rhs: &SparsePolynomial) -> SparsePolynomial {
        assert_eq!(self.arity, rhs.arity, "arity mismatch");
        let mut out = SparsePolynomial::zero(self.arity);
        for (a, ca) in &self.terms {
            for (b, cb) in &rhs.terms {
                let e = a.iter().zip(b).map(|(x, y)| x + y).collect();
                out.add_term(e, ca * cb);
            }
        }
        out
    }
}

macro_rules! owned_ops {
    ($($tr:ident $m:ident),*) => {$(
        impl $tr for SparsePolynomial {
            type Output = SparsePolynomial;
            fn $m(self, rhs: SparsePolynomial) -> SparsePolynomial { (&self).$m(&rhs) }
        }
    )*};
}
owned_ops!(Add add, Sub sub, Mul mul);

impl Neg for SparsePolynomial {
    type Output = SparsePolynomial;
    fn neg(self) -> SparsePolynomial {
        -&self
    }
}

impl fmt::Display for SparsePolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (n, (e, c)) in self.terms.iter().rev().enumerate() {
            let neg = c.is_negative();
            let mag = c.abs();
            match (n, neg) {
                (0, true) => write!(f, "-")?,
                (0, false) => {}
                (_, true) => write!(f, " - ")?,
                (_, false) => write!(f, " + ")?,
            }
            let vars: Vec<String> = e
                .iter()
                .enumerate()
                .filter(|(_, &k)| k > 0)
                .map(|(j, &k)| if k == 1 { format!("x{}", j + 1) } else { format!("x{}^{}", j + 1, k) })
                .collect();
            let numer = mag.numer();
            let denom = mag.denom();
            if vars.is_empty() {
                write!(f, "{mag}")?;
            } else {
                if !numer.is_one() {
                    write!(f, "{numer}*")?;
                }
                write!(f, "{}", vars.join("*"))?;
                if !denom.is_one() {
                    write!(f, "/{denom}")?;
                }
            }
        }
        Ok(())
    }
}

/// Floating-point evaluation form of a polynomial.
#[derive(Clone, Debug)]
pub struct CompiledPoly {
    arity: usize,
    coeffs: Vec<f64>,
    // (variable, exponent) pairs per term, flattened; `offsets[t]..offsets[t+1]`.
    factors: Vec<(u32, u32)>,
    offsets: Vec<u32>,
}

impl CompiledPoly {
    fn new(p: &SparsePolynomial) -> Self {
        let mut coeffs = Vec::with_capacity(p.len());
        let mut factors = Vec::new();
        let mut offsets = vec![0];
        for (e, c) in p.terms() {
            coeffs.push(rat_to_f64(c));
            for (j, &k) in e.iter().enumerate() {
                if k > 0 {
                    factors.push((j as u32, k));
                }
            }
            offsets.push(factors.len() as u32);
        }
        Self { arity: p.arity(), coeffs, factors, offsets }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (t, &c) in self.coeffs.iter().enumerate() {
            let mut m = c;
            for &(j, k) in &self.factors[self.offsets[t] as usize..self.offsets[t + 1] as usize] {
                let v = x[j as usize];
                m *= match k {
                    1 => v,
                    2 => v * v,
                    3 => v * v * v,
                    _ => v.powi(k as i32),
                };
            }
            acc += m;
        }
        acc
    }
}

/// A vector of compiled polynomials sharing one arity.
#[derive(Clone, Debug)]
pub struct CompiledMap {
    polys: Vec<CompiledPoly>,
}

impl CompiledMap {
    pub fn new(polys: &[SparsePolynomial]) -> Self {
        Self { polys: polys.iter().map(SparsePolynomial::compile).collect() }
    }

    pub fn len(&self) -> usize {
        self.polys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polys.is_empty()
    }

    pub fn component(&self, k: usize) -> &CompiledPoly {
        &self.polys[k]
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.polys) {
            *o = p.eval(x);
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.polys.len()];
        self.eval_into(x, &mut out);
        out
    }
}

struct Parser<'a> {
    src: &'a str,
    chars: Vec<char>,
    pos: usize,
    arity: usize,
    time_var: bool,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, arity: usize, time_var: bool) -> Self {
        let chars = src.replace('\u{2212}', "-").chars().filter(|c| !c.is_whitespace()).collect();
        Self { src, chars, pos: 0, arity, time_var }
    }

    fn err(&self, msg: &str) -> ParseError {
        ParseError::new(self.src, &format!("{msg} at position {}", self.pos))
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn parse(mut self) -> Result<SparsePolynomial, ParseError> {
        if self.chars.is_empty() {
            return Err(self.err("empty expression"));
        }
        let p = self.expr()?;
        if self.pos != self.chars.len() {
            return Err(self.err("unexpected character"));
        }
        Ok(p)
    }

    fn expr(&mut self) -> Result<SparsePolynomial, ParseError> {
        let mut acc = SparsePolynomial::zero(self.arity);
        let mut first = true;
        loop {
            let sign = match self.peek() {
                Some('+') => {
                    self.pos += 1;
                    1
                }
                Some('-') => {
                    self.pos += 1;
                    -1
                }
                _ if first => 1,
                _ => break,
            };
            first = false;
            let t = self.term()?;
            acc = if sign < 0 { &acc - &t } else { &acc + &t };
            if self.peek().is_none() || self.peek() == Some(')') {
                break;
            }
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<SparsePolynomial, ParseError> {
        let mut acc = self.power()?;
        loop {
            match self.peek() {
                Some('*') => {
                    self.pos += 1;
                    acc = &acc * &self.power()?;
                }
                Some('/') => {
                    self.pos += 1;
                    let d = self.number()?;
                    if d.is_zero() {
                        return Err(self.err("division by zero"));
                    }
                    acc = acc.scale(&d.recip());
                }
                _ => return Ok(acc),
            }
        }
    }

    fn power(&mut self) -> Result<SparsePolynomial, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some('^') {
            self.pos += 1;
            let k = self.number()?;
            let k = k
                .to_integer()
                .to_u32()
                .filter(|_| k.is_integer())
                .ok_or_else(|| self.err("exponent must be a nonnegative integer"))?;
            let mut out = SparsePolynomial::one(self.arity);
            for _ in 0..k {
                out = &out * &base;
            }
            return Ok(out);
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<SparsePolynomial, ParseError> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let p = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(self.err("missing ')'"));
                }
                self.pos += 1;
                Ok(p)
            }
            Some('-') => {
                self.pos += 1;
                Ok(-self.power()?)
            }
            Some('x') => {
                self.pos += 1;
                let start = self.pos;
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
                let idx: usize = self.chars[start..self.pos]
                    .iter()
                    .collect::<String>()
                    .parse()
                    .map_err(|_| self.err("expected variable index"))?;
                let dims = if self.time_var { self.arity - 1 } else { self.arity };
                if idx == 0 || idx > dims {
                    return Err(self.err("variable index out of range"));
                }
                Ok(SparsePolynomial::var(self.arity, idx - 1))
            }
            Some('s') if self.time_var => {
                self.pos += 1;
                Ok(SparsePolynomial::var(self.arity, self.arity - 1))
            }
            Some(c) if c.is_ascii_digit() || c == '.' => {
                let c = self.number()?;
                Ok(SparsePolynomial::constant(self.arity, c))
            }
            _ => Err(self.err("expected a term")),
        }
    }

    fn number(&mut self) -> Result<BigRational, ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit() || c == '.') {
            self.pos += 1;
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        if s.is_empty() {
            return Err(self.err("expected a number"));
        }
        parse_rational(&s).map_err(|_| self.err("bad number"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(i: usize) -> SparsePolynomial {
        SparsePolynomial::var(3, i)
    }

    #[test]
    fn zero_coefficients_are_dropped() {
        let p = &x(0) - &x(0);
        assert!(p.is_zero());
        assert_eq!(p.len(), 0);
    }

    #[test]
    fn product_and_derivative() {
        let p = &(&x(0) + &x(1)) * &(&x(0) - &x(1));
        let q = &(&x(0) * &x(0)) - &(&x(1) * &x(1));
        assert_eq!(p, q);
        assert_eq!(p.partial(0), x(0).scale(&rat(2, 1)));
        assert_eq!(p.total_degree(), 2);
    }

    #[test]
    fn exact_and_float_eval_agree() {
        let p = SparsePolynomial::parse("1/12*x1^2*x2 - x3/2 + 3", 3, false).unwrap();
        let exact = p.eval_exact(&[rat(1, 2), rat(-2, 3), rat(5, 1)]);
        assert_eq!(exact, rat(1, 12) * rat(1, 4) * rat(-2, 3) - rat(5, 2) + rat(3, 1));
        assert!((p.eval(&[0.5, -2.0 / 3.0, 5.0]) - rat_to_f64(&exact)).abs() < 1e-14);
        assert!((p.compile().eval(&[0.5, -2.0 / 3.0, 5.0]) - rat_to_f64(&exact)).abs() < 1e-14);
    }

    #[test]
    fn parser_handles_time_and_unicode_minus() {
        let p = SparsePolynomial::parse("x1^2 + x2^2 \u{2212} 4*s", 3, true).unwrap();
        assert_eq!(p.eval(&[1.0, 2.0, 0.5]), 3.0);
        assert!(SparsePolynomial::parse("x4", 3, true).is_err());
        assert!(SparsePolynomial::parse("x1 +", 3, false).is_err());
        assert_eq!(parse_rational("\u{2212}1/12").unwrap(), rat(-1, 12));
    }

    #[test]
    fn display_round_trips() {
        let p = SparsePolynomial::parse("-x2^2/12 + 7/3*x1*x3 - 2", 3, false).unwrap();
        let q = SparsePolynomial::parse(&p.to_string(), 3, false).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn compose_substitutes() {
        let p = &x(0) * &x(1);
        let subs = vec![&x(0) + &x(2), x(2), x(1)];
        let q = p.compose(&subs);
        assert_eq!(q, &(&x(0) * &x(2)) + &(&x(2) * &x(2)));
    }

    #[test]
    fn weighted_homogeneity() {
        let w = vec![rat(1, 1), rat(1, 1), rat(2, 1)];
        let p = SparsePolynomial::parse("x1*x2 - x3", 3, false).unwrap();
        assert!(p.is_weighted_homogeneous(&w, &rat(2, 1)));
        assert!(!p.is_weighted_homogeneous(&w, &rat(1, 1)));
    }
}
