//! Scalar backends.
//!
//! Two backends share the [`Scalar`] trait: exact arbitrary-precision
//! rationals ([`Rational`]) for every ReLU-path computation, and `f64` for
//! SoftMax/SoftPlus paths. Only the float backend can hold `-inf`; masking on
//! the rational backend is structural (see [`crate::tensor::apply_mask`]).

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::str::FromStr;

use num::{BigInt, BigRational, One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Exact rational number. Always reduced, denominator positive.
pub type Rational = BigRational;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Rational,
    Float,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Rational => "rational",
            Backend::Float => "float",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub trait Scalar:
    Clone
    + fmt::Debug
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    const BACKEND: Backend;

    fn zero() -> Self;
    fn one() -> Self;
    fn is_zero(&self) -> bool;
    fn from_rational(q: &Rational) -> Self;
    fn to_f64(&self) -> f64;
    /// `None` when the value has no representation in this backend.
    fn from_f64(x: f64) -> Option<Self>;
    /// The distinguished `-inf`, if the backend has one.
    fn neg_infinity() -> Option<Self>;

    fn is_neg_infinity(&self) -> bool {
        false
    }

    fn from_i64(v: i64) -> Self {
        Self::from_rational(&Rational::from_integer(BigInt::from(v)))
    }

    fn relu(&self) -> Self {
        if *self > Self::zero() {
            self.clone()
        } else {
            Self::zero()
        }
    }

    fn abs(&self) -> Self {
        if *self < Self::zero() {
            -self.clone()
        } else {
            self.clone()
        }
    }

    fn to_json(&self) -> Value;
    fn from_json(v: &Value) -> Result<Self, String>;
}

impl Scalar for Rational {
    const BACKEND: Backend = Backend::Rational;

    fn zero() -> Self {
        Zero::zero()
    }
    fn one() -> Self {
        One::one()
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }
    fn from_rational(q: &Rational) -> Self {
        q.clone()
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn from_f64(x: f64) -> Option<Self> {
        BigRational::from_float(x)
    }
    fn neg_infinity() -> Option<Self> {
        None
    }
    fn abs(&self) -> Self {
        Signed::abs(self)
    }

    fn to_json(&self) -> Value {
        Value::String(self.to_string())
    }

    fn from_json(v: &Value) -> Result<Self, String> {
        match v {
            Value::String(s) => parse_rational(s),
            Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Ok(Rational::from_integer(BigInt::from(i)))
                } else if let Some(u) = n.as_u64() {
                    Ok(Rational::from_integer(BigInt::from(u)))
                } else {
                    let f = n.as_f64().ok_or_else(|| format!("bad number {n}"))?;
                    BigRational::from_float(f).ok_or_else(|| format!("bad number {n}"))
                }
            }
            other => Err(format!("expected a rational, got {other}")),
        }
    }
}

impl Scalar for f64 {
    const BACKEND: Backend = Backend::Float;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn is_zero(&self) -> bool {
        *self == 0.0
    }
    fn from_rational(q: &Rational) -> Self {
        Scalar::to_f64(q)
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn from_f64(x: f64) -> Option<Self> {
        Some(x)
    }
    fn neg_infinity() -> Option<Self> {
        Some(f64::NEG_INFINITY)
    }
    fn is_neg_infinity(&self) -> bool {
        *self == f64::NEG_INFINITY
    }

    fn to_json(&self) -> Value {
        if *self == f64::NEG_INFINITY {
            Value::String("-inf".into())
        } else if *self == f64::INFINITY {
            Value::String("inf".into())
        } else {
            serde_json::Number::from_f64(*self)
                .map(Value::Number)
                .unwrap_or_else(|| Value::String("nan".into()))
        }
    }

    fn from_json(v: &Value) -> Result<Self, String> {
        match v {
            Value::Number(n) => n.as_f64().ok_or_else(|| format!("bad number {n}")),
            Value::String(s) => match s.trim() {
                "-inf" => Ok(f64::NEG_INFINITY),
                "inf" => Ok(f64::INFINITY),
                other => parse_rational(other).map(|q| Scalar::to_f64(&q)),
            },
            other => Err(format!("expected a number, got {other}")),
        }
    }
}

/// Parses `"p/q"`, `"p"` or a plain decimal such as `"-1.25"` exactly.
pub fn parse_rational(s: &str) -> Result<Rational, String> {
    let s = s.trim();
    if let Ok(q) = Rational::from_str(s) {
        return Ok(q);
    }
    // decimal literal
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (int_part, frac_part) = body
        .split_once('.')
        .ok_or_else(|| format!("cannot parse {s:?} as a rational"))?;
    if int_part.is_empty() && frac_part.is_empty()
        || !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return Err(format!("cannot parse {s:?} as a rational"));
    }
    let digits = format!("{int_part}{frac_part}");
    let numer = BigInt::from_str(if digits.is_empty() { "0" } else { &digits })
        .map_err(|e| e.to_string())?;
    let denom = num::pow(BigInt::from(10), frac_part.len());
    let q = Rational::new(numer, denom);
    Ok(if neg { -q } else { q })
}

/// Convenience constructor `p/q`.
pub fn ratio(p: i64, q: i64) -> Rational {
    Rational::new(BigInt::from(p), BigInt::from(q))
}

pub fn int(p: i64) -> Rational {
    Rational::from_integer(BigInt::from(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_is_reduced() {
        let q = ratio(6, -4);
        assert_eq!(q.numer(), &BigInt::from(-3));
        assert_eq!(q.denom(), &BigInt::from(2));
    }

    #[test]
    fn parse_forms() {
        assert_eq!(parse_rational("3/2").unwrap(), ratio(3, 2));
        assert_eq!(parse_rational("-7").unwrap(), int(-7));
        assert_eq!(parse_rational("-1.25").unwrap(), ratio(-5, 4));
        assert_eq!(parse_rational(".5").unwrap(), ratio(1, 2));
        assert!(parse_rational("abc").is_err());
        assert!(parse_rational(".").is_err());
    }

    #[test]
    fn json_round_trip() {
        let q = ratio(-22, 7);
        assert_eq!(q.to_json(), Value::String("-22/7".into()));
        assert_eq!(Rational::from_json(&q.to_json()).unwrap(), q);
        assert_eq!(f64::NEG_INFINITY.to_json(), Value::String("-inf".into()));
        assert_eq!(f64::from_json(&Value::String("-inf".into())).unwrap(), f64::NEG_INFINITY);
        assert_eq!(f64::from_json(&serde_json::json!(0.5)).unwrap(), 0.5);
        assert_eq!(Rational::from_json(&serde_json::json!(0.5)).unwrap(), ratio(1, 2));
    }

    #[test]
    fn rational_has_no_neg_infinity() {
        assert!(<Rational as Scalar>::neg_infinity().is_none());
        assert!(<Rational as Scalar>::from_f64(f64::NEG_INFINITY).is_none());
        assert_eq!(f64::NEG_INFINITY.relu(), 0.0);
    }
}
