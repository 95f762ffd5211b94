//! Bounded closed-form coefficients in `(t, x)`.
//!
//! Drift components, potentials and sources are drawn from a small registry so
//! that every declared bound can be checked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DriftError {
    #[error("expected {expected} drift components, got {got}")]
    Components { expected: usize, got: usize },
    #[error("coefficient `{name}` has {got} spatial entries, expected {expected}")]
    Shape { name: &'static str, expected: usize, got: usize },
    #[error("non-finite value at t={t}, x={x:?}")]
    NonFinite { t: f64, x: Vec<f64> },
    #[error("sampled sup {sampled} exceeds the declared bound {declared} by more than 1%")]
    BoundViolated { sampled: f64, declared: f64 },
    #[error("invalid coefficient: {0}")]
    Invalid(String),
}

/// One bounded scalar function of `(t, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarExpr {
    Constant {
        value: f64,
    },
    /// `a·sin(k·x + ω t + φ)`.
    Sin {
        amplitude: f64,
        #[serde(default)]
        wave: Vec<f64>,
        #[serde(default)]
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `a·tanh(k·x + ω t + φ)`.
    Tanh {
        amplitude: f64,
        #[serde(default)]
        wave: Vec<f64>,
        #[serde(default)]
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `a / (1 + |x − c|² / w²)`.
    Bump {
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
    },
    Sum {
        terms: Vec<ScalarExpr>,
    },
}

fn dot(k: &[f64], x: &[f64]) -> f64 {
    k.iter().zip(x).map(|(a, b)| a * b).sum()
}

impl ScalarExpr {
    pub fn constant(value: f64) -> Self {
        ScalarExpr::Constant { value }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            ScalarExpr::Constant { value } => *value,
            ScalarExpr::Sin { amplitude, wave, omega, phase } => {
                amplitude * (dot(wave, x) + omega * t + phase).sin()
            }
            ScalarExpr::Tanh { amplitude, wave, omega, phase } => {
                amplitude * (dot(wave, x) + omega * t + phase).tanh()
            }
            ScalarExpr::Bump { amplitude, center, width } => {
                let r2: f64 = center.iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum();
                amplitude / (1.0 + r2 / (width * width))
            }
            ScalarExpr::Sum { terms } => terms.iter().map(|e| e.eval(t, x)).sum(),
        }
    }

    /// Spatial gradient, accumulated into `out`.
    pub fn add_gradient(&self, t: f64, x: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            ScalarExpr::Constant { .. } => {}
            ScalarExpr::Sin { amplitude, wave, omega, phase } => {
                let c = scale * amplitude * (dot(wave, x) + omega * t + phase).cos();
                for (o, k) in out.iter_mut().zip(wave) {
                    *o += c * k;
                }
            }
            ScalarExpr::Tanh { amplitude, wave, omega, phase } => {
                let th = (dot(wave, x) + omega * t + phase).tanh();
                let c = scale * amplitude * (1.0 - th * th);
                for (o, k) in out.iter_mut().zip(wave) {
                    *o += c * k;
                }
            }
            ScalarExpr::Bump { amplitude, center, width } => {
                let w2 = width * width;
                let r2: f64 = center.iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum();
                let q = 1.0 + r2 / w2;
                let c = -scale * amplitude * 2.0 / (w2 * q * q);
                for ((o, cj), v) in out.iter_mut().zip(center).zip(x) {
                    *o += c * (v - cj);
                }
            }
            ScalarExpr::Sum { terms } => {
                for e in terms {
                    e.add_gradient(t, x, scale, out);
                }
            }
        }
    }

    pub fn gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.add_gradient(t, x, 1.0, &mut g);
        g
    }

    /// Closed-form bound on `|self|`.
    pub fn abs_bound(&self) -> f64 {
        match self {
            ScalarExpr::Constant { value } => value.abs(),
            ScalarExpr::Sin { amplitude, .. }
            | ScalarExpr::Tanh { amplitude, .. }
            | ScalarExpr::Bump { amplitude, .. } => amplitude.abs(),
            ScalarExpr::Sum { terms } => terms.iter().map(ScalarExpr::abs_bound).sum(),
        }
    }

    /// Closed-form bound on `sup self` (one-sided).
    pub fn upper_bound(&self) -> f64 {
        match self {
            ScalarExpr::Constant { value } => *value,
            ScalarExpr::Bump { amplitude, .. } => amplitude.max(0.0),
            ScalarExpr::Sum { terms } => terms.iter().map(ScalarExpr::upper_bound).sum(),
            other => other.abs_bound(),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            ScalarExpr::Constant { value } => Some(*value),
            ScalarExpr::Sum { terms } => terms.iter().map(ScalarExpr::as_constant).sum(),
            _ => None,
        }
    }

    pub fn is_time_independent(&self) -> bool {
        match self {
            ScalarExpr::Sin { omega, .. } | ScalarExpr::Tanh { omega, .. } => *omega == 0.0,
            ScalarExpr::Sum { terms } => terms.iter().all(ScalarExpr::is_time_independent),
            _ => true,
        }
    }

    /// Checks spatial shapes and finiteness of the parameters.
    pub fn validate(&self, d: usize) -> Result<(), DriftError> {
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(DriftError::Invalid(format!("{what} must be finite")))
            }
        };
        let shape = |name: &'static str, v: &[f64], allow_empty: bool| {
            if v.len() == d || (allow_empty && v.is_empty()) {
                Ok(())
            } else {
                Err(DriftError::Shape { name, expected: d, got: v.len() })
            }
        };
        match self {
            ScalarExpr::Constant { value } => finite(*value, "value"),
            ScalarExpr::Sin { amplitude, wave, omega, phase } | ScalarExpr::Tanh { amplitude, wave, omega, phase } => {
                finite(*amplitude, "amplitude")?;
                finite(*omega, "omega")?;
                finite(*phase, "phase")?;
                shape("wave", wave, true)?;
                wave.iter().try_for_each(|&k| finite(k, "wave"))
            }
            ScalarExpr::Bump { amplitude, center, width } => {
                finite(*amplitude, "amplitude")?;
                if !(*width > 0.0 && width.is_finite()) {
                    return Err(DriftError::Invalid("bump width must be positive".into()));
                }
                shape("center", center, false)
            }
            ScalarExpr::Sum { terms } => terms.iter().try_for_each(|e| e.validate(d)),
        }
    }
}

/// The drift coefficients `β_1..β_m`, with `X_0 = −Σ β_i X_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub components: Vec<ScalarExpr>,
    /// User-declared bound on `sup |β(t,x)|` (Euclidean norm over `i`).
    #[serde(default)]
    pub bound: Option<f64>,
}

impl DriftSpec {
    pub fn zero(m: usize) -> Self {
        Self { components: vec![ScalarExpr::constant(0.0); m], bound: Some(0.0) }
    }

    pub fn constant(beta: &[f64]) -> Self {
        let bound = beta.iter().fold(0.0, |acc: f64, b| acc.hypot(*b));
        Self { components: beta.iter().map(|&b| ScalarExpr::constant(b)).collect(), bound: Some(bound) }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(|c| c.as_constant() == Some(0.0))
    }

    pub fn as_constant(&self) -> Option<Vec<f64>> {
        self.components.iter().map(ScalarExpr::as_constant).collect()
    }

    /// Declared bound, or the closed-form one when none was declared.
    pub fn sup_bound(&self) -> f64 {
        self.bound.unwrap_or_else(|| self.closed_form_bound())
    }

    pub fn closed_form_bound(&self) -> f64 {
        self.components.iter().fold(0.0, |acc: f64, c| acc.hypot(c.abs_bound()))
    }

    /// Largest `|β_i|` bound over the components.
    pub fn component_bound(&self) -> f64 {
        let per = self.components.iter().map(ScalarExpr::abs_bound).fold(0.0, f64::max);
        per.min(self.sup_bound())
    }

    #[inline]
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(t, x);
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.eval(t, x)).collect()
    }

    pub fn validate_shape(&self, m: usize, d: usize) -> Result<(), DriftError> {
        if self.components.len() != m {
            return Err(DriftError::Components { expected: m, got: self.components.len() });
        }
        if let Some(b) = self.bound {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(DriftError::Invalid("declared bound must be finite and nonnegative".into()));
            }
        }
        self.components.iter().try_for_each(|c| c.validate(d))
    }

    /// Samples `|β|` on a box and time window and compares with the declared bound.
    pub fn check_bound(
        &self,
        window: (f64, f64),
        lower: &[f64],
        upper: &[f64],
        samples: usize,
        seed: u64,
    ) -> Result<f64, DriftError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sup = 0.0f64;
        let mut x = vec![0.0; lower.len()];
        for _ in 0..samples {
            let t = window.0 + (window.1 - window.0) * rng.random::<f64>();
            for (k, v) in x.iter_mut().enumerate() {
                *v = lower[k] + (upper[k] - lower[k]) * rng.random::<f64>();
            }
            let b = self.eval(t, &x);
            if b.iter().any(|v| !v.is_finite()) {
                return Err(DriftError::NonFinite { t, x: x.clone() });
            }
            sup = sup.max(b.iter().fold(0.0f64, |acc, v| acc.hypot(*v)));
        }
        let declared = self.sup_bound();
        if sup > declared * 1.01 + 1e-300 {
            return Err(DriftError::BoundViolated { sampled: sup, declared });
        }
        Ok(sup)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_finite_differences() {
        let exprs = [
            ScalarExpr::Sin { amplitude: 0.7, wave: vec![1.0, -2.0, 0.5], omega: 3.0, phase: 0.1 },
            ScalarExpr::Tanh { amplitude: -1.2, wave: vec![0.3, 0.0, 2.0], omega: 0.0, phase: 0.4 },
            ScalarExpr::Bump { amplitude: 2.0, center: vec![0.1, 0.2, -0.3], width: 0.8 },
        ];
        let x = [0.4, -0.6, 0.9];
        let t = 0.3;
        for e in &exprs {
            let g = e.gradient(t, &x);
            for k in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += 1e-6;
                xm[k] -= 1e-6;
                let fd = (e.eval(t, &xp) - e.eval(t, &xm)) / 2e-6;
                assert!((fd - g[k]).abs() < 1e-7, "{e:?} axis {k}");
            }
        }
    }

    #[test]
    fn sampled_bound_respects_declaration() {
        let beta = DriftSpec {
            components: vec![
                ScalarExpr::Sin { amplitude: 1.0, wave: vec![1.0, 0.0, 0.0], omega: 0.0, phase: 0.0 },
                ScalarExpr::constant(0.5),
            ],
            bound: None,
        };
        let sup = beta.check_bound((0.0, 1.0), &[-3.0; 3], &[3.0; 3], 2000, 7).unwrap();
        assert!(sup <= beta.sup_bound());
        let lying = DriftSpec { bound: Some(0.5), ..beta };
        assert!(matches!(
            lying.check_bound((0.0, 1.0), &[-3.0; 3], &[3.0; 3], 2000, 7),
            Err(DriftError::BoundViolated { .. })
        ));
    }

    #[test]
    fn parses_registry_json() {
        let d: DriftSpec = serde_json::from_str(
            r#"{"components":[{"kind":"constant","value":1.0},{"kind":"tanh","amplitude":0.5,"wave":[1,0,0]}]}"#,
        )
        .unwrap();
        assert_eq!(d.eval(0.0, &[0.0, 0.0, 0.0]), vec![1.0, 0.0]);
        assert!(d.validate_shape(2, 3).is_ok());
        assert!(d.validate_shape(2, 4).is_err());
        assert_eq!(DriftSpec::constant(&[1.0, 0.0]).as_constant(), Some(vec![1.0, 0.0]));
    }
}
