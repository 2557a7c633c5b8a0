//! Monomial bases of degree `<= k` and the Veronese map.
//!
//! Order is graded lexicographic with the constant first; variables are
//! taken row-major, so for a `2 x 2` input the degree-1 block reads
//! `x_11, x_12, x_21, x_22`.

use std::collections::HashMap;

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spline::{Monomial, Var};
use crate::tensor::Mat;

/// `C(nvars + k, k)`, the number of monomials of degree `<= k` in `nvars`
/// variables.
pub fn veronese_dim(nvars: usize, k: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 1..=k as u128 {
        acc = acc * (nvars as u128 + i) / i;
    }
    acc
}

/// Variables of an `n x p` input in row-major order.
pub fn row_major_vars(n: usize, p: usize) -> Vec<Var> {
    (0..n).flat_map(|i| (0..p).map(move |j| Var::new(i, j))).collect()
}

/// All monomials of degree `<= k` in `vars`, graded lexicographic.
pub fn graded_monomials(vars: &[Var], k: usize) -> Vec<Monomial> {
    let mut out = vec![Monomial::one()];
    for d in 1..=k {
        out.extend(vars.iter().copied().combinations_with_replacement(d).map(|c| Monomial::from_vars(&c)));
    }
    out
}

#[derive(Clone, Debug)]
pub struct VeroneseIndex {
    n: usize,
    p: usize,
    k: usize,
    monomials: Vec<Monomial>,
    positions: HashMap<Monomial, usize>,
}

impl VeroneseIndex {
    pub fn new(n: usize, p: usize, k: usize) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::EmptyShape((n, p)));
        }
        if k == 0 {
            return Err(Error::InvalidParameters("Veronese degree must be at least 1".into()));
        }
        let monomials = graded_monomials(&row_major_vars(n, p), k);
        let positions = monomials.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Ok(VeroneseIndex {
            n,
            p,
            k,
            monomials,
            positions,
        })
    }

    pub fn nvars(&self) -> usize {
        self.n * self.p
    }

    pub fn degree(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn monomials(&self) -> &[Monomial] {
        &self.monomials
    }

    pub fn monomial(&self, i: usize) -> &Monomial {
        &self.monomials[i]
    }

    pub fn position(&self, m: &Monomial) -> Option<usize> {
        self.positions.get(m).copied()
    }

    pub fn eval<T: Scalar>(&self, x: &Mat<T>) -> Result<Mat<T>> {
        if x.shape() != (self.n, self.p) {
            return Err(Error::shape("veronese input", x.shape(), (self.n, self.p)));
        }
        let vals = self.monomials.iter().map(|m| m.eval(x)).collect::<Result<Vec<_>>>()?;
        Mat::column(vals)
    }
}

pub fn veronese_eval<T: Scalar>(idx: &VeroneseIndex, x: &Mat<T>) -> Result<Mat<T>> {
    idx.eval(x)
}

/// Splits a monomial into factors of degree `<= k2`, filling each factor
/// greedily from the sorted variable multiset. The constant gives no factors.
pub fn greedy_factors(m: &Monomial, k2: usize) -> Vec<Monomial> {
    m.var_list().chunks(k2.max(1)).map(Monomial::from_vars).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverEntry {
    pub monomial: Monomial,
    pub factors: Vec<Monomial>,
    /// Position of each factor in the degree-`k2` index.
    pub positions: Vec<usize>,
}

/// For every monomial of degree `<= k * k2` in the `n x p` variables, a
/// factorization into at most `k` monomials of degree `<= k2`.
pub fn compose_cover(k: usize, k2: usize, n: usize, p: usize) -> Result<Vec<CoverEntry>> {
    if k == 0 || k2 == 0 {
        return Err(Error::InvalidParameters("cover degrees must be at least 1".into()));
    }
    let inner = VeroneseIndex::new(n, p, k2)?;
    let all = graded_monomials(&row_major_vars(n, p), k * k2);
    Ok(all
        .into_iter()
        .map(|m| {
            let factors = greedy_factors(&m, k2);
            let positions = factors
                .iter()
                .map(|f| inner.position(f).expect("factor degree <= k2"))
                .collect();
            CoverEntry {
                monomial: m,
                factors,
                positions,
            }
        })
        .collect())
}
