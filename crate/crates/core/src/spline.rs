//! Polynomials, max–min spline forms and max-definable expressions.
//!
//! Variables are `x_{ij}` entries of an `n x p` input, stored 0-based and
//! printed 1-based (`x_1_1` is the top-left entry).

use std::collections::BTreeMap;
use std::fmt;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::scalar::{parse_rational, Rational, Scalar};
use crate::tensor::Mat;

/// Upper bound on the number of polynomials a normalized form may hold.
pub const MAX_FORM_SIZE: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    pub row: usize,
    pub col: usize,
}

impl Var {
    pub fn new(row: usize, col: usize) -> Self {
        Var { row, col }
    }

    /// Parses `x_i_j` (1-based).
    pub fn parse(s: &str) -> Result<Var> {
        let bad = || Error::Parse(format!("bad variable name {s:?}, expected x_i_j"));
        let rest = s.trim().strip_prefix("x_").ok_or_else(bad)?;
        let (i, j) = rest.split_once('_').ok_or_else(bad)?;
        let i: usize = i.parse().map_err(|_| bad())?;
        let j: usize = j.parse().map_err(|_| bad())?;
        if i == 0 || j == 0 {
            return Err(bad());
        }
        Ok(Var::new(i - 1, j - 1))
    }

    fn check(&self, n: usize, p: usize) -> Result<()> {
        if self.row >= n || self.col >= p {
            return Err(Error::VariableOutOfRange {
                var: self.to_string(),
                n,
                p,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x_{}_{}", self.row + 1, self.col + 1)
    }
}

/// Product of variable powers. The empty monomial is the constant 1.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial(BTreeMap<Var, u32>);

impl Monomial {
    pub fn one() -> Self {
        Monomial(BTreeMap::new())
    }

    pub fn var(v: Var) -> Self {
        Monomial(BTreeMap::from([(v, 1)]))
    }

    pub fn from_exponents(exps: impl IntoIterator<Item = (Var, u32)>) -> Self {
        let mut m = BTreeMap::new();
        for (v, e) in exps {
            if e > 0 {
                *m.entry(v).or_insert(0) += e;
            }
        }
        Monomial(m)
    }

    /// Multiset of variables, sorted, each repeated by its exponent.
    pub fn from_vars(vars: &[Var]) -> Self {
        Monomial::from_exponents(vars.iter().map(|&v| (v, 1)))
    }

    pub fn exponents(&self) -> &BTreeMap<Var, u32> {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.values().sum()
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.0.keys().copied()
    }

    pub fn var_list(&self) -> Vec<Var> {
        self.0
            .iter()
            .flat_map(|(&v, &e)| std::iter::repeat_n(v, e as usize))
            .collect()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut m = self.0.clone();
        for (&v, &e) in &other.0 {
            *m.entry(v).or_insert(0) += e;
        }
        Monomial(m)
    }

    pub fn max_col(&self) -> Option<usize> {
        self.0.keys().map(|v| v.col).max()
    }

    pub fn check(&self, n: usize, p: usize) -> Result<()> {
        self.0.keys().try_for_each(|v| v.check(n, p))
    }

    pub fn eval<T: Scalar>(&self, x: &Mat<T>) -> Result<T> {
        self.check(x.rows(), x.cols())?;
        let mut acc = T::one();
        for (v, &e) in &self.0 {
            let base = x.get(v.row, v.col);
            for _ in 0..e {
                acc = acc * base.clone();
            }
        }
        Ok(acc)
    }

    pub fn to_json(&self) -> Value {
        Value::Object(self.0.iter().map(|(v, e)| (v.to_string(), json!(e))).collect())
    }

    pub fn from_json(v: &Value) -> Result<Monomial> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Parse(format!("monomial must be an object, got {v}")))?;
        let mut exps = Vec::new();
        for (k, e) in obj {
            let e = e
                .as_u64()
                .and_then(|e| u32::try_from(e).ok())
                .ok_or_else(|| Error::Parse(format!("bad exponent for {k}: {e}")))?;
            exps.push((Var::parse(k)?, e));
        }
        Ok(Monomial::from_exponents(exps))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("1");
        }
        let mut first = true;
        for (v, e) in &self.0 {
            if !first {
                f.write_str("*")?;
            }
            first = false;
            if *e == 1 {
                write!(f, "{v}")?;
            } else {
                write!(f, "{v}^{e}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Polynomial(BTreeMap<Monomial, Rational>);

impl Polynomial {
    pub fn zero() -> Self {
        Polynomial(BTreeMap::new())
    }

    pub fn constant(c: Rational) -> Self {
        Polynomial::term(c, Monomial::one())
    }

    pub fn var(v: Var) -> Self {
        Polynomial::term(Rational::one(), Monomial::var(v))
    }

    pub fn term(c: Rational, m: Monomial) -> Self {
        let mut p = Polynomial::zero();
        p.add_term(m, c);
        p
    }

    pub fn from_terms(terms: impl IntoIterator<Item = (Monomial, Rational)>) -> Self {
        let mut p = Polynomial::zero();
        for (m, c) in terms {
            p.add_term(m, c);
        }
        p
    }

    fn add_term(&mut self, m: Monomial, c: Rational) {
        let entry = self.0.entry(m.clone()).or_insert_with(Rational::zero);
        *entry += c;
        if Scalar::is_zero(entry) {
            self.0.remove(&m);
        }
    }

    pub fn terms(&self) -> &BTreeMap<Monomial, Rational> {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.0.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn constant_term(&self) -> Rational {
        self.0.get(&Monomial::one()).cloned().unwrap_or_else(Rational::zero)
    }

    /// `Some(c)` when the polynomial is the constant `c`.
    pub fn as_constant(&self) -> Option<Rational> {
        match self.0.len() {
            0 => Some(Rational::zero()),
            1 => self.0.get(&Monomial::one()).cloned(),
            _ => None,
        }
    }

    pub fn coefficient(&self, m: &Monomial) -> Rational {
        self.0.get(m).cloned().unwrap_or_else(Rational::zero)
    }

    pub fn monomials(&self) -> impl Iterator<Item = &Monomial> {
        self.0.keys()
    }

    pub fn max_col(&self) -> Option<usize> {
        self.0.keys().filter_map(Monomial::max_col).max()
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let mut p = self.clone();
        for (m, c) in &other.0 {
            p.add_term(m.clone(), c.clone());
        }
        p
    }

    pub fn neg(&self) -> Polynomial {
        Polynomial(self.0.iter().map(|(m, c)| (m.clone(), -c.clone())).collect())
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.add(&other.neg())
    }

    pub fn scale(&self, c: &Rational) -> Polynomial {
        if Scalar::is_zero(c) {
            return Polynomial::zero();
        }
        Polynomial(self.0.iter().map(|(m, k)| (m.clone(), k * c)).collect())
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut p = Polynomial::zero();
        for (m1, c1) in &self.0 {
            for (m2, c2) in &other.0 {
                p.add_term(m1.mul(m2), c1 * c2);
            }
        }
        p
    }

    pub fn check(&self, n: usize, p: usize) -> Result<()> {
        self.0.keys().try_for_each(|m| m.check(n, p))
    }

    pub fn eval<T: Scalar>(&self, x: &Mat<T>) -> Result<T> {
        let mut acc = T::zero();
        for (m, c) in &self.0 {
            acc = acc + T::from_rational(c) * m.eval(x)?;
        }
        Ok(acc)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "op": "poly",
            "terms": self.0.iter().map(|(m, c)| json!({"coef": c.to_string(), "exps": m.to_json()})).collect::<Vec<_>>(),
        })
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("0");
        }
        for (i, (m, c)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            if m.is_one() {
                write!(f, "{c}")?;
            } else if c == &Rational::one() {
                write!(f, "{m}")?;
            } else {
                write!(f, "{c}*{m}")?;
            }
        }
        Ok(())
    }
}

pub fn eval_poly<T: Scalar>(poly: &Polynomial, x: &Mat<T>) -> Result<T> {
    poly.eval(x)
}

fn max_of<T: Scalar>(vals: impl IntoIterator<Item = T>) -> Option<T> {
    vals.into_iter().reduce(|a, b| if b > a { b } else { a })
}

fn min_of<T: Scalar>(vals: impl IntoIterator<Item = T>) -> Option<T> {
    vals.into_iter().reduce(|a, b| if b < a { b } else { a })
}

/// `max_i min_j ξ_ij`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PBForm {
    rows: Vec<Vec<Polynomial>>,
}

/// `min_i max_j ξ_ij`, the dual of [`PBForm`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinMaxForm {
    rows: Vec<Vec<Polynomial>>,
}

impl PBForm {
    pub fn new(rows: Vec<Vec<Polynomial>>) -> Result<Self> {
        if rows.is_empty() || rows.iter().any(Vec::is_empty) {
            return Err(Error::Empty("max-min form"));
        }
        Ok(PBForm { rows })
    }

    pub fn poly(p: Polynomial) -> Self {
        PBForm { rows: vec![vec![p]] }
    }

    pub fn rows(&self) -> &[Vec<Polynomial>] {
        &self.rows
    }

    pub fn polys(&self) -> impl Iterator<Item = &Polynomial> {
        self.rows.iter().flatten()
    }

    pub fn size(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn degree(&self) -> u32 {
        self.polys().map(Polynomial::degree).max().unwrap_or(0)
    }

    pub fn as_polynomial(&self) -> Option<&Polynomial> {
        match self.rows.as_slice() {
            [row] if row.len() == 1 => Some(&row[0]),
            _ => None,
        }
    }

    pub fn max_col(&self) -> Option<usize> {
        self.polys().filter_map(Polynomial::max_col).max()
    }

    pub fn check(&self, n: usize, p: usize) -> Result<()> {
        self.polys().try_for_each(|q| q.check(n, p))
    }

    pub fn eval<T: Scalar>(&self, x: &Mat<T>) -> Result<T> {
        let mut best = None;
        for row in &self.rows {
            let vals = row.iter().map(|q| q.eval(x)).collect::<Result<Vec<_>>>()?;
            let m = min_of(vals).expect("nonempty row");
            best = max_of(best.into_iter().chain([m]));
        }
        Ok(best.expect("nonempty form"))
    }

    /// Swaps max and min and negates every polynomial; evaluates to `-self`.
    pub fn negated_dual(&self) -> MinMaxForm {
        MinMaxForm {
            rows: self.rows.iter().map(|r| r.iter().map(Polynomial::neg).collect()).collect(),
        }
    }

    pub fn to_json(&self) -> Value {
        let row_json = |r: &Vec<Polynomial>| {
            if r.len() == 1 {
                r[0].to_json()
            } else {
                json!({"op": "min", "args": r.iter().map(Polynomial::to_json).collect::<Vec<_>>()})
            }
        };
        if self.rows.len() == 1 {
            row_json(&self.rows[0])
        } else {
            json!({"op": "max", "args": self.rows.iter().map(row_json).collect::<Vec<_>>()})
        }
    }
}

impl MinMaxForm {
    pub fn rows(&self) -> &[Vec<Polynomial>] {
        &self.rows
    }

    pub fn eval<T: Scalar>(&self, x: &Mat<T>) -> Result<T> {
        let mut best = None;
        for row in &self.rows {
            let vals = row.iter().map(|q| q.eval(x)).collect::<Result<Vec<_>>>()?;
            let m = max_of(vals).expect("nonempty row");
            best = min_of(best.into_iter().chain([m]));
        }
        Ok(best.expect("nonempty form"))
    }

    /// Back to max–min form, evaluating to `-self`.
    pub fn negated_dual(&self) -> PBForm {
        PBForm {
            rows: self.rows.iter().map(|r| r.iter().map(Polynomial::neg).collect()).collect(),
        }
    }
}

pub fn eval_pbform<T: Scalar>(f: &PBForm, x: &Mat<T>) -> Result<T> {
    f.eval(x)
}

/// Expression generated from constants and variables by sums, products,
/// scalar multiples, max and min.
#[derive(Clone, Debug, PartialEq)]
pub enum MaxDefExpr {
    Const(Rational),
    Var(Var),
    Poly(Polynomial),
    Sum(Vec<MaxDefExpr>),
    Product(Vec<MaxDefExpr>),
    Scale(Rational, Box<MaxDefExpr>),
    Max(Vec<MaxDefExpr>),
    Min(Vec<MaxDefExpr>),
}

impl MaxDefExpr {
    pub fn var(row: usize, col: usize) -> Self {
        MaxDefExpr::Var(Var::new(row, col))
    }

    pub fn int(c: i64) -> Self {
        MaxDefExpr::Const(crate::scalar::int(c))
    }

    pub fn scale(c: Rational, e: MaxDefExpr) -> Self {
        MaxDefExpr::Scale(c, Box::new(e))
    }

    pub fn neg(e: MaxDefExpr) -> Self {
        MaxDefExpr::scale(-Rational::one(), e)
    }

    pub fn max2(a: MaxDefExpr, b: MaxDefExpr) -> Self {
        MaxDefExpr::Max(vec![a, b])
    }

    pub fn min2(a: MaxDefExpr, b: MaxDefExpr) -> Self {
        MaxDefExpr::Min(vec![a, b])
    }

    pub fn mul2(a: MaxDefExpr, b: MaxDefExpr) -> Self {
        MaxDefExpr::Product(vec![a, b])
    }

    pub fn sum2(a: MaxDefExpr, b: MaxDefExpr) -> Self {
        MaxDefExpr::Sum(vec![a, b])
    }

    fn args(&self) -> &[MaxDefExpr] {
        match self {
            MaxDefExpr::Sum(a) | MaxDefExpr::Product(a) | MaxDefExpr::Max(a) | MaxDefExpr::Min(a) => a,
            MaxDefExpr::Scale(_, e) => std::slice::from_ref(e),
            _ => &[],
        }
    }

    /// No max or min anywhere below this node.
    pub fn is_polynomial(&self) -> bool {
        match self {
            MaxDefExpr::Max(_) | MaxDefExpr::Min(_) => false,
            _ => self.args().iter().all(MaxDefExpr::is_polynomial),
        }
    }

    /// Expands a max/min-free expression.
    pub fn to_polynomial(&self) -> Option<Polynomial> {
        Some(match self {
            MaxDefExpr::Const(c) => Polynomial::constant(c.clone()),
            MaxDefExpr::Var(v) => Polynomial::var(*v),
            MaxDefExpr::Poly(p) => p.clone(),
            MaxDefExpr::Sum(a) => {
                let mut acc = Polynomial::zero();
                for e in a {
                    acc = acc.add(&e.to_polynomial()?);
                }
                acc
            }
            MaxDefExpr::Product(a) => {
                let mut acc = Polynomial::constant(Rational::one());
                for e in a {
                    acc = acc.mul(&e.to_polynomial()?);
                }
                acc
            }
            MaxDefExpr::Scale(c, e) => e.to_polynomial()?.scale(c),
            MaxDefExpr::Max(_) | MaxDefExpr::Min(_) => return None,
        })
    }

    pub fn check(&self, n: usize, p: usize) -> Result<()> {
        match self {
            MaxDefExpr::Var(v) => v.check(n, p),
            MaxDefExpr::Poly(q) => q.check(n, p),
            MaxDefExpr::Const(_) => Ok(()),
            MaxDefExpr::Sum(a) | MaxDefExpr::Product(a) | MaxDefExpr::Max(a) | MaxDefExpr::Min(a) => {
                if a.is_empty() {
                    return Err(Error::Parse(format!("{} node with no arguments", self.op_name())));
                }
                a.iter().try_for_each(|e| e.check(n, p))
            }
            MaxDefExpr::Scale(_, e) => e.check(n, p),
        }
    }

    fn op_name(&self) -> &'static str {
        match self {
            MaxDefExpr::Const(_) => "const",
            MaxDefExpr::Var(_) => "var",
            MaxDefExpr::Poly(_) => "poly",
            MaxDefExpr::Sum(_) => "sum",
            MaxDefExpr::Product(_) => "product",
            MaxDefExpr::Scale(..) => "scale",
            MaxDefExpr::Max(_) => "max",
            MaxDefExpr::Min(_) => "min",
        }
    }

    pub fn eval<T: Scalar>(&self, x: &Mat<T>) -> Result<T> {
        match self {
            MaxDefExpr::Const(c) => Ok(T::from_rational(c)),
            MaxDefExpr::Var(v) => {
                v.check(x.rows(), x.cols())?;
                Ok(x.get(v.row, v.col).clone())
            }
            MaxDefExpr::Poly(q) => q.eval(x),
            MaxDefExpr::Sum(a) => {
                let mut acc = T::zero();
                for e in a {
                    acc = acc + e.eval(x)?;
                }
                Ok(acc)
            }
            MaxDefExpr::Product(a) => {
                let mut acc = T::one();
                for e in a {
                    acc = acc * e.eval(x)?;
                }
                Ok(acc)
            }
            MaxDefExpr::Scale(c, e) => Ok(T::from_rational(c) * e.eval(x)?),
            MaxDefExpr::Max(a) => {
                let vals = a.iter().map(|e| e.eval(x)).collect::<Result<Vec<_>>>()?;
                max_of(vals).ok_or_else(|| Error::Parse("max node with no arguments".into()))
            }
            MaxDefExpr::Min(a) => {
                // min(x, y) = -max(-x, -y)
                let vals = a.iter().map(|e| e.eval(x).map(|v| -v)).collect::<Result<Vec<_>>>()?;
                max_of(vals)
                    .map(|v| -v)
                    .ok_or_else(|| Error::Parse("min node with no arguments".into()))
            }
        }
    }

    pub fn to_json(&self) -> Value {
        let args = |a: &[MaxDefExpr]| a.iter().map(MaxDefExpr::to_json).collect::<Vec<_>>();
        match self {
            MaxDefExpr::Const(c) => json!({"op": "const", "value": c.to_string()}),
            MaxDefExpr::Var(v) => json!({"op": "var", "name": v.to_string()}),
            MaxDefExpr::Poly(q) => q.to_json(),
            MaxDefExpr::Scale(c, e) => json!({"op": "scale", "coef": c.to_string(), "arg": e.to_json()}),
            other => json!({"op": other.op_name(), "args": args(other.args())}),
        }
    }

    pub fn from_json(v: &Value) -> Result<MaxDefExpr> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Parse(format!("expression must be an object, got {v}")))?;
        let op = obj
            .get("op")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Parse(format!("expression without \"op\": {v}")))?;
        let rational = |key: &str| -> Result<Rational> {
            let raw = obj
                .get(key)
                .ok_or_else(|| Error::Parse(format!("{op} node missing {key:?}")))?;
            Rational::from_json(raw).map_err(Error::Parse)
        };
        let args = || -> Result<Vec<MaxDefExpr>> {
            let a = obj
                .get("args")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Parse(format!("{op} node missing \"args\" array")))?;
            if a.is_empty() {
                return Err(Error::Parse(format!("{op} node with no arguments")));
            }
            a.iter().map(MaxDefExpr::from_json).collect()
        };
        Ok(match op {
            "const" => MaxDefExpr::Const(rational("value")?),
            "var" => {
                let name = obj
                    .get("name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::Parse("var node missing \"name\"".into()))?;
                MaxDefExpr::Var(Var::parse(name)?)
            }
            "poly" => MaxDefExpr::Poly(parse_poly_terms(obj)?),
            "sum" => MaxDefExpr::Sum(args()?),
            "product" => MaxDefExpr::Product(args()?),
            "max" => MaxDefExpr::Max(args()?),
            "min" => MaxDefExpr::Min(args()?),
            "scale" => {
                let arg = obj
                    .get("arg")
                    .ok_or_else(|| Error::Parse("scale node missing \"arg\"".into()))?;
                MaxDefExpr::scale(rational("coef")?, MaxDefExpr::from_json(arg)?)
            }
            other => return Err(Error::Parse(format!("unknown op {other:?}"))),
        })
    }
}

fn parse_poly_terms(obj: &Map<String, Value>) -> Result<Polynomial> {
    let terms = obj
        .get("terms")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("poly node missing \"terms\" array".into()))?;
    let mut p = Polynomial::zero();
    for t in terms {
        let coef = t
            .get("coef")
            .ok_or_else(|| Error::Parse(format!("term missing \"coef\": {t}")))?;
        let coef = match coef {
            Value::String(s) => parse_rational(s).map_err(Error::Parse)?,
            other => Rational::from_json(other).map_err(Error::Parse)?,
        };
        let exps = match t.get("exps") {
            Some(e) => Monomial::from_json(e)?,
            None => Monomial::one(),
        };
        p = p.add(&Polynomial::term(coef, exps));
    }
    Ok(p)
}

impl fmt::Display for MaxDefExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaxDefExpr::Const(c) => write!(f, "{c}"),
            MaxDefExpr::Var(v) => write!(f, "{v}"),
            MaxDefExpr::Poly(q) => write!(f, "({q})"),
            MaxDefExpr::Scale(c, e) => write!(f, "{c}*{e}"),
            other => {
                write!(f, "{}(", other.op_name())?;
                for (i, a) in other.args().iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

pub fn eval_maxdef<T: Scalar>(e: &MaxDefExpr, x: &Mat<T>) -> Result<T> {
    e.eval(x)
}

type Rows = Vec<Vec<Polynomial>>;

fn check_size(rows: &Rows) -> Result<()> {
    let size: usize = rows.iter().map(Vec::len).sum();
    if size > MAX_FORM_SIZE {
        return Err(Error::TooLarge(format!(
            "normal form would hold {size} polynomials (limit {MAX_FORM_SIZE})"
        )));
    }
    Ok(())
}

/// Sorts and deduplicates each row, then drops rows that contain another row
/// (a superset row has a smaller min, so it never attains the max).
fn simplify(rows: Rows) -> Rows {
    let mut rows: Rows = rows
        .into_iter()
        .map(|mut r| {
            r.sort();
            r.dedup();
            r
        })
        .collect();
    rows.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    rows.dedup();
    let mut kept: Rows = Vec::new();
    for r in rows {
        let absorbed = kept.iter().any(|k| k.iter().all(|q| r.binary_search(q).is_ok()));
        if !absorbed {
            kept.push(r);
        }
    }
    kept
}

fn lattice_max(a: &Rows, b: &Rows) -> Result<Rows> {
    let rows: Rows = a.iter().chain(b).cloned().collect();
    check_size(&rows)?;
    Ok(simplify(rows))
}

fn cross_product(a: &Rows, b: &Rows) -> Result<usize> {
    let prod = a.len().saturating_mul(b.len());
    let width = a.iter().map(Vec::len).max().unwrap_or(0) + b.iter().map(Vec::len).max().unwrap_or(0);
    if prod.saturating_mul(width) > MAX_FORM_SIZE {
        return Err(Error::TooLarge(format!("{prod} rows of width up to {width}")));
    }
    Ok(prod)
}

fn lattice_min(a: &Rows, b: &Rows) -> Result<Rows> {
    let mut rows = Vec::with_capacity(cross_product(a, b)?);
    for ra in a {
        for rb in b {
            rows.push(ra.iter().chain(rb).cloned().collect());
        }
    }
    Ok(simplify(rows))
}

fn lattice_sum(a: &Rows, b: &Rows) -> Result<Rows> {
    let mut rows = Vec::with_capacity(cross_product(a, b)?);
    for ra in a {
        for rb in b {
            if ra.len().saturating_mul(rb.len()) > MAX_FORM_SIZE {
                return Err(Error::TooLarge("sum of wide rows".into()));
            }
            rows.push(ra.iter().flat_map(|u| rb.iter().map(move |v| u.add(v))).collect());
        }
    }
    Ok(simplify(rows))
}

/// `-max_i min_j ξ_ij = max over choice functions c of min_i (-ξ_{i,c(i)})`.
fn lattice_neg(a: &Rows) -> Result<Rows> {
    let mut total: usize = 1;
    for r in a {
        total = total.saturating_mul(r.len());
    }
    if total.saturating_mul(a.len()) > MAX_FORM_SIZE {
        return Err(Error::TooLarge(format!("negation needs {total} rows")));
    }
    let mut rows: Rows = vec![Vec::new()];
    for r in a {
        let mut next = Vec::with_capacity(rows.len() * r.len());
        for partial in &rows {
            for q in r {
                let mut row = partial.clone();
                row.push(q.neg());
                next.push(row);
            }
        }
        rows = next;
    }
    Ok(simplify(rows))
}

fn lattice_scale(a: &Rows, c: &Rational) -> Result<Rows> {
    if *c >= Rational::zero() {
        Ok(simplify(a.iter().map(|r| r.iter().map(|q| q.scale(c)).collect()).collect()))
    } else {
        let n = lattice_neg(a)?;
        Ok(simplify(n.iter().map(|r| r.iter().map(|q| q.scale(&-c.clone())).collect()).collect()))
    }
}

/// Multiplication by a polynomial that is positive everywhere commutes with
/// max and min.
fn lattice_scale_positive(a: &Rows, p: &Polynomial) -> Rows {
    simplify(a.iter().map(|r| r.iter().map(|q| q.mul(p)).collect()).collect())
}

fn poly_rows(p: Polynomial) -> Rows {
    vec![vec![p]]
}

/// Normalizes an expression into max–min form.
///
/// Products need one max/min-free factor `P`. Multiplying `P` into a max uses
/// `P·max(a,b) = P·a + P·(b-a)⁺` together with the pointwise identity
/// `x·y⁺ = max(min(xy, (x²+1)y), min(0, -(x²+1)y))`.
pub fn normalize_to_pbform(e: &MaxDefExpr) -> Result<PBForm> {
    let rows = normalize_rows(e)?;
    PBForm::new(rows)
}

fn normalize_rows(e: &MaxDefExpr) -> Result<Rows> {
    if let Some(p) = e.to_polynomial() {
        return Ok(poly_rows(p));
    }
    match e {
        MaxDefExpr::Max(a) => fold(a, lattice_max),
        MaxDefExpr::Min(a) => fold(a, lattice_min),
        MaxDefExpr::Sum(a) => fold(a, lattice_sum),
        MaxDefExpr::Scale(c, inner) => lattice_scale(&normalize_rows(inner)?, c),
        MaxDefExpr::Product(a) => {
            let (polys, lattice): (Vec<&MaxDefExpr>, Vec<&MaxDefExpr>) =
                a.iter().partition(|x| x.is_polynomial());
            if lattice.len() > 1 {
                return Err(Error::UnsupportedProduct(e.to_string()));
            }
            let mut p = Polynomial::constant(Rational::one());
            for q in polys {
                p = p.mul(&q.to_polynomial().expect("polynomial factor"));
            }
            mul_poly(&p, lattice[0])
        }
        MaxDefExpr::Const(_) | MaxDefExpr::Var(_) | MaxDefExpr::Poly(_) => unreachable!(),
    }
}

fn fold(args: &[MaxDefExpr], op: fn(&Rows, &Rows) -> Result<Rows>) -> Result<Rows> {
    let mut it = args.iter();
    let first = it
        .next()
        .ok_or_else(|| Error::Parse("lattice node with no arguments".into()))?;
    let mut acc = normalize_rows(first)?;
    for a in it {
        acc = op(&acc, &normalize_rows(a)?)?;
    }
    Ok(acc)
}

/// Max–min form of `P·e`.
fn mul_poly(p: &Polynomial, e: &MaxDefExpr) -> Result<Rows> {
    if let Some(c) = p.as_constant() {
        return lattice_scale(&normalize_rows(e)?, &c);
    }
    if let Some(q) = e.to_polynomial() {
        return Ok(poly_rows(p.mul(&q)));
    }
    match e {
        MaxDefExpr::Sum(a) => {
            let parts = a.iter().map(|x| mul_poly(p, x)).collect::<Result<Vec<_>>>()?;
            let mut acc = parts[0].clone();
            for part in &parts[1..] {
                acc = lattice_sum(&acc, part)?;
            }
            Ok(acc)
        }
        MaxDefExpr::Scale(c, inner) => mul_poly(&p.scale(c), inner),
        MaxDefExpr::Product(a) => {
            let (polys, lattice): (Vec<&MaxDefExpr>, Vec<&MaxDefExpr>) =
                a.iter().partition(|x| x.is_polynomial());
            if lattice.len() > 1 {
                return Err(Error::UnsupportedProduct(e.to_string()));
            }
            let mut q = p.clone();
            for f in polys {
                q = q.mul(&f.to_polynomial().expect("polynomial factor"));
            }
            mul_poly(&q, lattice[0])
        }
        MaxDefExpr::Max(a) => {
            // P·max(u, v) = P·u + P·(v - u)⁺
            let mut acc_expr = a[0].clone();
            let mut acc = mul_poly(p, &a[0])?;
            for v in &a[1..] {
                let pv = mul_poly(p, v)?;
                let diff = lattice_sum(&normalize_rows(v)?, &lattice_neg(&normalize_rows(&acc_expr)?)?)?;
                let p_diff = lattice_sum(&pv, &lattice_neg(&acc)?)?;
                acc = lattice_sum(&acc, &times_positive_part(p, &p_diff, &diff)?)?;
                acc_expr = MaxDefExpr::max2(acc_expr, v.clone());
            }
            Ok(acc)
        }
        MaxDefExpr::Min(a) => {
            // P·min(u, v) = P·u - P·(u - v)⁺
            let mut acc_expr = a[0].clone();
            let mut acc = mul_poly(p, &a[0])?;
            for v in &a[1..] {
                let pv = mul_poly(p, v)?;
                let diff = lattice_sum(&normalize_rows(&acc_expr)?, &lattice_neg(&normalize_rows(v)?)?)?;
                let p_diff = lattice_sum(&acc, &lattice_neg(&pv)?)?;
                let pos = times_positive_part(p, &p_diff, &diff)?;
                acc = lattice_sum(&acc, &lattice_neg(&pos)?)?;
                acc_expr = MaxDefExpr::min2(acc_expr, v.clone());
            }
            Ok(acc)
        }
        MaxDefExpr::Const(_) | MaxDefExpr::Var(_) | MaxDefExpr::Poly(_) => unreachable!(),
    }
}

/// `P·h⁺` given forms of `P·h` and `h`.
fn times_positive_part(p: &Polynomial, p_times_h: &Rows, h: &Rows) -> Result<Rows> {
    let lift = p.mul(p).add(&Polynomial::constant(Rational::one()));
    let lifted = lattice_scale_positive(h, &lift);
    let left = lattice_min(p_times_h, &lifted)?;
    let right = lattice_min(&poly_rows(Polynomial::zero()), &lattice_neg(&lifted)?)?;
    lattice_max(&left, &right)
}

/// `r x p` grid of max–min forms over an `n x p` input.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    pub n: usize,
    pub p: usize,
    cells: Vec<Vec<PBForm>>,
}

impl SplineGrid {
    pub fn new(n: usize, p: usize, cells: Vec<Vec<PBForm>>) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::EmptyShape((n, p)));
        }
        if cells.is_empty() {
            return Err(Error::Empty("spline grid"));
        }
        for row in &cells {
            if row.len() != p {
                return Err(Error::shape("spline grid row", (cells.len(), row.len()), (cells.len(), p)));
            }
            for f in row {
                f.check(n, p)?;
            }
        }
        Ok(SplineGrid { n, p, cells })
    }

    /// Scalar spline of one `n x 1` input.
    pub fn scalar(n: usize, f: PBForm) -> Result<Self> {
        SplineGrid::new(n, 1, vec![vec![f]])
    }

    pub fn r(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[Vec<PBForm>] {
        &self.cells
    }

    pub fn cell(&self, i: usize, j: usize) -> &PBForm {
        &self.cells[i][j]
    }

    pub fn degree(&self) -> u32 {
        self.cells.iter().flatten().map(PBForm::degree).max().unwrap_or(0)
    }

    /// First `(column, variable)` where an output column reads a later input
    /// column, if any.
    pub fn autoregressive_violation(&self) -> Option<(usize, Var)> {
        for row in &self.cells {
            for (j, f) in row.iter().enumerate() {
                for q in f.polys() {
                    for m in q.monomials() {
                        if let Some(v) = m.vars().find(|v| v.col > j) {
                            return Some((j, v));
                        }
                    }
                }
            }
        }
        None
    }

    pub fn eval<T: Scalar>(&self, x: &Mat<T>) -> Result<Mat<T>> {
        if x.shape() != (self.n, self.p) {
            return Err(Error::shape("spline input", x.shape(), (self.n, self.p)));
        }
        let rows = self
            .cells
            .iter()
            .map(|r| r.iter().map(|f| f.eval(x)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Mat::from_rows(rows)
    }

    pub fn from_json(v: &Value) -> Result<SplineGrid> {
        let dim = |k: &str| -> Result<usize> {
            v.get(k)
                .and_then(Value::as_u64)
                .map(|d| d as usize)
                .ok_or_else(|| Error::Parse(format!("spline file missing positive integer {k:?}")))
        };
        let (n, p) = (dim("n")?, dim("p")?);
        let grid = v
            .get("grid")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse("spline file missing \"grid\" array".into()))?;
        let mut cells = Vec::new();
        for (i, row) in grid.iter().enumerate() {
            let row = row
                .as_array()
                .ok_or_else(|| Error::Parse(format!("grid row {} is not an array", i + 1)))?;
            let mut out = Vec::new();
            for cell in row {
                let e = MaxDefExpr::from_json(cell)?;
                e.check(n, p)?;
                out.push(normalize_to_pbform(&e)?);
            }
            cells.push(out);
        }
        SplineGrid::new(n, p, cells)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "n": self.n,
            "p": self.p,
            "grid": self.cells.iter().map(|r| r.iter().map(PBForm::to_json).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}
