//! Envelope functions `f(x, p)` applied entrywise to kernel values.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

type EvalFn = Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>;

/// Closed-form values used by the linearizations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticValues {
    pub f0: f64,
    pub d0: f64,
    pub f1: f64,
    pub f2: f64,
    pub d2: f64,
}

#[derive(Clone)]
enum Kind {
    Identity,
    Linear(f64),
    Exp(f64),
    Power(f64),
    SignScaled,
    NonsmoothSin,
    Constant(f64),
    Square,
    Custom { eval: EvalFn, p_dependent: bool },
}

/// An envelope function.
///
/// The registry kinds carry exact derivatives; custom envelopes fall back to
/// Richardson-extrapolated central differences.
#[derive(Clone)]
pub struct Envelope {
    name: String,
    kind: Kind,
}

/// A derivative value and where it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivative {
    pub value: f64,
    pub analytic: Option<f64>,
    pub numeric: Option<f64>,
}

impl Derivative {
    pub fn is_numeric_only(&self) -> bool {
        self.analytic.is_none()
    }
}

impl Envelope {
    pub fn identity() -> Self {
        Self {
            name: "identity".into(),
            kind: Kind::Identity,
        }
    }

    /// `f(x) = c x`
    pub fn linear(c: f64) -> Self {
        Self {
            name: format!("linear:c={c}"),
            kind: Kind::Linear(c),
        }
    }

    /// `f(x) = exp(a x)`
    pub fn exp(a: f64) -> Self {
        Self {
            name: format!("exp:a={a}"),
            kind: Kind::Exp(a),
        }
    }

    /// `f(x) = (1 + x)^a`, extended by 0 for `x <= -1`.
    pub fn power(a: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::invalid(format!("power envelope needs a > 0, got {a}")));
        }
        Ok(Self {
            name: format!("power:a={a}"),
            kind: Kind::Power(a),
        })
    }

    /// `f(x, p) = p^{-1/2} sign(x)` with `sign(0) = 0`.
    pub fn sign_scaled() -> Self {
        Self {
            name: "sign-scaled".into(),
            kind: Kind::SignScaled,
        }
    }

    /// `f(x) = x + x^2 sin(1/x)`, extended by `f(0) = 0`.
    ///
    /// Differentiable at 0 with `f'(0) = 1` but not continuously differentiable there.
    pub fn nonsmooth_sin() -> Self {
        Self {
            name: "nonsmooth-sin".into(),
            kind: Kind::NonsmoothSin,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            name: format!("constant:c={c}"),
            kind: Kind::Constant(c),
        }
    }

    /// `f(x) = x^2`
    pub fn square() -> Self {
        Self {
            name: "square".into(),
            kind: Kind::Square,
        }
    }

    /// A user-supplied envelope with no closed-form derivatives.
    pub fn custom<F>(name: impl Into<String>, p_dependent: bool, f: F) -> Self
    where
        F: Fn(f64, usize) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            kind: Kind::Custom {
                eval: Arc::new(f),
                p_dependent,
            },
        }
    }

    /// `f(x, p) + c`.
    pub fn plus_constant(&self, c: f64) -> Self {
        let inner = self.clone();
        Self::custom(format!("{}+{c}", self.name), self.is_p_dependent(), move |x, p| {
            inner.eval(x, p) + c
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_p_dependent(&self) -> bool {
        match &self.kind {
            Kind::SignScaled => true,
            Kind::Custom { p_dependent, .. } => *p_dependent,
            _ => false,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64, p: usize) -> f64 {
        match &self.kind {
            Kind::Identity => x,
            Kind::Linear(c) => c * x,
            Kind::Exp(a) => (a * x).exp(),
            Kind::Power(a) => {
                if x > -1.0 {
                    (1.0 + x).powf(*a)
                } else {
                    0.0
                }
            }
            Kind::SignScaled => {
                let s = if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                s / (p as f64).sqrt()
            }
            Kind::NonsmoothSin => {
                if x == 0.0 {
                    0.0
                } else {
                    x + x * x * (1.0 / x).sin()
                }
            }
            Kind::Constant(c) => *c,
            Kind::Square => x * x,
            Kind::Custom { eval, .. } => eval(x, p),
        }
    }

    /// Exact derivative, when the envelope is a registry kind differentiable at `x`.
    pub fn exact_derivative(&self, x: f64, _p: usize) -> Option<f64> {
        match &self.kind {
            Kind::Identity => Some(1.0),
            Kind::Linear(c) => Some(*c),
            Kind::Exp(a) => Some(a * (a * x).exp()),
            Kind::Power(a) => (x > -1.0).then(|| a * (1.0 + x).powf(a - 1.0)),
            Kind::SignScaled => (x != 0.0).then_some(0.0),
            Kind::NonsmoothSin => Some(if x == 0.0 {
                1.0
            } else {
                1.0 + 2.0 * x * (1.0 / x).sin() - (1.0 / x).cos()
            }),
            Kind::Constant(_) => Some(0.0),
            Kind::Square => Some(2.0 * x),
            Kind::Custom { .. } => None,
        }
    }

    /// Central difference with step `h = max(1e-6, 1e-6 |x|)`, Richardson-extrapolated once.
    ///
    /// Returns `None` when the two step sizes disagree, which is how jumps and
    /// kinks show up.
    pub fn numeric_derivative(&self, x: f64, p: usize) -> Option<f64> {
        let h = (1e-6 * x.abs()).max(1e-6);
        let central = |h: f64| (self.eval(x + h, p) - self.eval(x - h, p)) / (2.0 * h);
        let coarse = central(h);
        let fine = central(h / 2.0);
        let extrapolated = (4.0 * fine - coarse) / 3.0;
        let converged = (fine - coarse).abs() <= 1e-4 * extrapolated.abs().max(1.0);
        (extrapolated.is_finite() && converged).then_some(extrapolated)
    }

    pub fn derivative(&self, x: f64, p: usize) -> Result<Derivative> {
        let analytic = self.exact_derivative(x, p);
        let numeric = self.numeric_derivative(x, p);
        match analytic.or(numeric) {
            Some(value) => Ok(Derivative {
                value,
                analytic,
                numeric,
            }),
            None => Err(Error::Capability(format!(
                "envelope '{}' has no derivative at x = {x} (numeric differentiation did not converge)",
                self.name
            ))),
        }
    }

    /// `f(0), f'(0), f(1), f(2), f'(2)` for the registry kinds where all exist.
    pub fn analytic(&self) -> Option<AnalyticValues> {
        if matches!(self.kind, Kind::Custom { .. } | Kind::SignScaled) {
            return None;
        }
        Some(AnalyticValues {
            f0: self.eval(0.0, 1),
            d0: self.exact_derivative(0.0, 1)?,
            f1: self.eval(1.0, 1),
            f2: self.eval(2.0, 1),
            d2: self.exact_derivative(2.0, 1)?,
        })
    }

    /// Monomial coefficients when the envelope is a p-independent polynomial.
    pub fn polynomial(&self) -> Option<Vec<f64>> {
        match self.kind {
            Kind::Identity => Some(vec![0.0, 1.0]),
            Kind::Linear(c) => Some(vec![0.0, c]),
            Kind::Constant(c) => Some(vec![c]),
            Kind::Square => Some(vec![0.0, 0.0, 1.0]),
            _ => None,
        }
    }

    /// Largest `delta` in `{2^-1, 2^-2, ...}` such that
    /// `|f(x) - f(0) - f'(0) x| <= eps |x|` holds on a fine grid of `[-delta, delta]`.
    pub fn linearization_radius(&self, p: usize, eps: f64) -> Option<f64> {
        let d0 = self.derivative(0.0, p).ok()?.value;
        let f0 = self.eval(0.0, p);
        (1..48).map(|k| 0.5f64.powi(k)).find(|&delta| {
            (1..=2000).all(|i| {
                let x = delta * (i as f64 / 1000.0 - 1.0);
                (self.eval(x, p) - f0 - d0 * x).abs() <= eps * x.abs() + 1e-15
            })
        })
    }
}

impl fmt::Debug for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Envelope").field(&self.name).finish()
    }
}

impl fmt::Display for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// The value of `key` in `k=v,...`; any other key is an error.
fn param(spec: &str, key: &str, default: Option<f64>) -> Result<f64> {
    let mut found = None;
    for item in spec.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        match item.split_once('=') {
            Some((k, v)) if k.trim() == key => found = Some(v),
            _ => {
                return Err(Error::invalid(format!(
                    "unexpected envelope parameter '{item}' (expected {key}=<number>)"
                )))
            }
        }
    }
    match (found, default) {
        (Some(v), _) => v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("envelope parameter {key}='{v}' is not a number"))),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(Error::invalid(format!("envelope needs parameter '{key}'"))),
    }
}

impl FromStr for Envelope {
    type Err = Error;

    /// Parses `name[:key=value,...]`, e.g. `exp:a=1`, `power:a=0.5`, `sign-scaled`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, params) = s.split_once(':').unwrap_or((s, ""));
        let bare = |e: Envelope| {
            if params.trim().is_empty() {
                Ok(e)
            } else {
                Err(Error::invalid(format!(
                    "envelope '{head}' takes no parameters, got '{params}'"
                )))
            }
        };
        match head {
            "identity" => bare(Envelope::identity()),
            "linear" => Ok(Envelope::linear(param(params, "c", None)?)),
            "exp" => Ok(Envelope::exp(param(params, "a", Some(1.0))?)),
            "power" => Envelope::power(param(params, "a", None)?),
            "sign-scaled" => bare(Envelope::sign_scaled()),
            "nonsmooth-sin" => bare(Envelope::nonsmooth_sin()),
            "constant" => Ok(Envelope::constant(param(params, "c", None)?)),
            "square" => bare(Envelope::square()),
            other => Err(Error::invalid(format!(
                "unknown envelope '{other}' (expected identity, linear, exp, power, sign-scaled, nonsmooth-sin, constant, square)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn parse_registry() {
        let e: Envelope = "exp:a=1".parse().unwrap();
        assert_eq!(e.eval(1.0, 10), E);
        let p: Envelope = "power:a=0.5".parse().unwrap();
        assert!((p.eval(3.0, 1) - 2.0).abs() < 1e-15);
        assert_eq!(p.eval(-2.0, 1), 0.0);
        assert!("power:a=-1".parse::<Envelope>().is_err());
        assert!("exp:a=x".parse::<Envelope>().is_err());
        assert!("bessel".parse::<Envelope>().is_err());
        assert!("exp:b=2".parse::<Envelope>().is_err());
        assert!("identity:a=1".parse::<Envelope>().is_err());
        assert_eq!("exp".parse::<Envelope>().unwrap().eval(1.0, 1), E);
        assert_eq!("sign-scaled".parse::<Envelope>().unwrap().eval(-0.3, 4), -0.5);
        assert_eq!("constant:c=2".parse::<Envelope>().unwrap().eval(9.0, 4), 2.0);
    }

    #[test]
    fn nonsmooth_extension() {
        let f = Envelope::nonsmooth_sin();
        assert_eq!(f.eval(0.0, 1), 0.0);
        let d = f.derivative(0.0, 1).unwrap();
        assert_eq!(d.analytic, Some(1.0));
        assert!((d.numeric.unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn sign_has_no_derivative_at_zero() {
        let f = Envelope::sign_scaled();
        assert!(matches!(f.derivative(0.0, 100), Err(Error::Capability(_))));
        assert!(f.analytic().is_none());
        assert!(f.is_p_dependent());
    }

    #[test]
    fn custom_uses_numeric_fallback() {
        let f = Envelope::custom("cosh", false, |x, _| x.cosh());
        let d = f.derivative(0.7, 1).unwrap();
        assert!(d.is_numeric_only());
        assert!((d.value - 0.7f64.sinh()).abs() < 1e-8);
    }

    #[test]
    fn analytic_values_match_numeric() {
        for e in [
            Envelope::exp(1.0),
            Envelope::exp(-1.0),
            Envelope::power(0.5).unwrap(),
            Envelope::nonsmooth_sin(),
        ] {
            let av = e.analytic().unwrap();
            assert!((e.numeric_derivative(0.0, 1).unwrap() - av.d0).abs() < 1e-5, "{e}");
            assert!((e.numeric_derivative(2.0, 1).unwrap() - av.d2).abs() < 1e-5, "{e}");
        }
    }

    #[test]
    fn linearization_radius_controls_remainder() {
        for e in [
            Envelope::exp(1.0),
            Envelope::nonsmooth_sin(),
            Envelope::power(0.5).unwrap(),
        ] {
            let delta = e.linearization_radius(1, 0.01).expect("differentiable at 0");
            assert!(delta > 0.0);
        }
        assert!(Envelope::sign_scaled().linearization_radius(10, 0.01).is_none());
    }
}
