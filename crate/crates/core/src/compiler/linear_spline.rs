//! Max–min forms of affine pieces as ReLU networks.
//!
//! Each form is reduced by a balanced tree: first the mins inside every row,
//! then the max across rows. A tree level costs one hidden layer using
//! `max(a,b) = a + relu(b-a)` and `min(a,b) = a - relu(a-b)`, with `a` itself
//! carried as `relu(a) - relu(-a)`.

use crate::error::{Error, Result};
use crate::scalar::{Rational, Scalar};
use crate::spline::{Monomial, PBForm, Polynomial, Var};
use crate::tensor::Mat;
use crate::transformer::{AffineLayer, FeedForwardNet};

/// Affine function of the previous layer.
#[derive(Clone, Debug)]
struct Affine {
    coef: Vec<Rational>,
    bias: Rational,
}

impl Affine {
    fn sub(&self, other: &Affine) -> Affine {
        Affine {
            coef: self.coef.iter().zip(&other.coef).map(|(a, b)| a.clone() - b.clone()).collect(),
            bias: self.bias.clone() - other.bias.clone(),
        }
    }

    fn neg(&self) -> Affine {
        Affine {
            coef: self.coef.iter().map(|a| -a.clone()).collect(),
            bias: -self.bias.clone(),
        }
    }

    /// Sum of `c * unit` over the given hidden units.
    fn of_units(width: usize, terms: &[(usize, i64)]) -> Affine {
        let mut coef = vec![Rational::zero(); width];
        for &(u, c) in terms {
            coef[u] = coef[u].clone() + Rational::from_i64(c);
        }
        Affine {
            coef,
            bias: Rational::zero(),
        }
    }
}

/// Reads an affine polynomial in the inputs `x_{k,1}`, `k < in_dim`.
fn affine_of(poly: &Polynomial, in_dim: usize) -> Result<Affine> {
    if poly.degree() > 1 {
        return Err(Error::DegreeTooHigh {
            max: 1,
            found: poly.degree(),
        });
    }
    let mut coef = vec![Rational::zero(); in_dim];
    for (m, c) in poly.terms() {
        if let Some(v) = m.vars().next() {
            if v.col != 0 || v.row >= in_dim {
                return Err(Error::VariableOutOfRange {
                    var: v.to_string(),
                    n: in_dim,
                    p: 1,
                });
            }
            coef[v.row] = c.clone();
        }
    }
    Ok(Affine {
        coef,
        bias: poly.constant_term(),
    })
}

/// The polynomial `x_{k,1}` used to address input `k`.
pub fn input_var(k: usize) -> Polynomial {
    Polynomial::var(Var::new(k, 0))
}

/// Builds `c + Σ coef_k x_{k,1}` as a polynomial.
pub fn affine_poly(coef: &[(usize, Rational)], constant: Rational) -> Polynomial {
    Polynomial::from_terms(
        coef.iter()
            .map(|(k, c)| (Monomial::var(Var::new(*k, 0)), c.clone()))
            .chain([(Monomial::one(), constant)]),
    )
}

type Rows = Vec<Vec<Affine>>;

fn finished(rows: &Rows) -> bool {
    rows.len() == 1 && rows[0].len() == 1
}

struct Level {
    units: Vec<Affine>,
}

impl Level {
    fn push(&mut self, a: Affine) -> usize {
        self.units.push(a);
        self.units.len() - 1
    }

    /// Returns `(relu(a), relu(-a))` unit indices.
    fn carry(&mut self, a: &Affine) -> (usize, usize) {
        (self.push(a.clone()), self.push(a.neg()))
    }
}

/// One unit per reduction: `(value-builder terms)`.
type Pending = Vec<(usize, i64)>;

/// Exact ReLU network computing each max–min form of affine pieces, one
/// output per form. Inputs are `x_{1,1}..x_{in_dim,1}`.
pub fn linear_spline_to_ffn(forms: &[PBForm], in_dim: usize) -> Result<FeedForwardNet<Rational>> {
    if forms.is_empty() {
        return Err(Error::Empty("linear spline"));
    }
    if in_dim == 0 {
        return Err(Error::EmptyShape((0, 1)));
    }
    let mut states = forms
        .iter()
        .map(|f| {
            f.rows()
                .iter()
                .map(|r| r.iter().map(|q| affine_of(q, in_dim)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut layers: Vec<AffineLayer<Rational>> = Vec::new();
    let mut prev_width = in_dim;
    while !states.iter().all(finished) {
        let mut level = Level { units: Vec::new() };
        // each state's new rows as unit-term lists
        let mut next: Vec<Vec<Vec<Pending>>> = Vec::with_capacity(states.len());
        for rows in &states {
            let reduce_min = rows.iter().any(|r| r.len() > 1);
            let mut out_rows: Vec<Vec<Pending>> = Vec::new();
            if reduce_min {
                for r in rows {
                    let mut out = Vec::new();
                    for pair in r.chunks(2) {
                        let (p, n) = level.carry(&pair[0]);
                        if let [a, b] = pair {
                            let d = level.push(a.sub(b));
                            out.push(vec![(p, 1), (n, -1), (d, -1)]);
                        } else {
                            out.push(vec![(p, 1), (n, -1)]);
                        }
                    }
                    out_rows.push(out);
                }
            } else {
                let singles: Vec<&Affine> = rows.iter().map(|r| &r[0]).collect();
                let mut out = Vec::new();
                for pair in singles.chunks(2) {
                    let (p, n) = level.carry(pair[0]);
                    if let [a, b] = pair {
                        let d = level.push(b.sub(a));
                        out.push(vec![(p, 1), (n, -1), (d, 1)]);
                    } else {
                        out.push(vec![(p, 1), (n, -1)]);
                    }
                }
                out_rows = out.into_iter().map(|u| vec![u]).collect();
            }
            next.push(out_rows);
        }
        let width = level.units.len();
        let a = Mat::from_fn(width, prev_width, |r, c| level.units[r].coef[c].clone());
        let b = Mat::from_fn(width, 1, |r, _| level.units[r].bias.clone());
        layers.push(AffineLayer::new(a, b)?);
        prev_width = width;
        states = next
            .into_iter()
            .map(|rows| rows.into_iter().map(|r| r.iter().map(|t| Affine::of_units(width, t)).collect()).collect())
            .collect();
    }
    let outputs: Vec<Affine> = states
        .into_iter()
        .map(|mut rows| rows.remove(0).remove(0))
        .collect();
    let a = Mat::from_fn(outputs.len(), prev_width, |r, c| outputs[r].coef[c].clone());
    let b = Mat::from_fn(outputs.len(), 1, |r, _| outputs[r].bias.clone());
    layers.push(AffineLayer::new(a, b)?);
    FeedForwardNet::new(layers)
}

/// Number of affine pieces in a form.
pub fn piece_count(f: &PBForm) -> usize {
    f.size()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::int;
    use crate::transformer::eval_ffn;

    fn v(k: usize) -> Polynomial {
        input_var(k)
    }

    fn col(vals: &[i64]) -> Mat<Rational> {
        Mat::column(vals.iter().map(|&x| int(x)).collect()).unwrap()
    }

    #[test]
    fn abs_value() {
        let f = PBForm::new(vec![vec![v(0)], vec![v(0).neg()]]).unwrap();
        let net = linear_spline_to_ffn(&[f], 1).unwrap();
        assert_eq!(eval_ffn(&net, &col(&[-3])).unwrap(), col(&[3]));
        assert_eq!(net.depth(), 2);
    }

    #[test]
    fn max_of_three() {
        let f = PBForm::new(vec![vec![v(0)], vec![v(1)], vec![Polynomial::zero()]]).unwrap();
        let net = linear_spline_to_ffn(std::slice::from_ref(&f), 2).unwrap();
        assert_eq!(eval_ffn(&net, &col(&[-1, -2])).unwrap(), col(&[0]));
        for (a, b) in [(3, -2), (-5, 4), (0, 0), (7, 7)] {
            let x = col(&[a, b]);
            assert_eq!(eval_ffn(&net, &x).unwrap().get(0, 0), &f.eval(&x).unwrap());
        }
    }

    #[test]
    fn min_of_relus() {
        // min(max(x,0), max(y,0)) = max over choices of min(...)
        let z = Polynomial::zero();
        let f = PBForm::new(vec![
            vec![v(0), v(1)],
            vec![v(0), z.clone()],
            vec![z.clone(), v(1)],
            vec![z.clone(), z],
        ])
        .unwrap();
        let net = linear_spline_to_ffn(&[f], 2).unwrap();
        assert_eq!(eval_ffn(&net, &col(&[2, 5])).unwrap(), col(&[2]));
        assert_eq!(eval_ffn(&net, &col(&[-2, 5])).unwrap(), col(&[0]));
    }

    #[test]
    fn affine_only_is_single_layer() {
        let f = PBForm::poly(affine_poly(&[(0, int(2)), (1, int(-1))], int(3)));
        let net = linear_spline_to_ffn(&[f], 2).unwrap();
        assert_eq!(net.depth(), 1);
        assert_eq!(eval_ffn(&net, &col(&[4, 1])).unwrap(), col(&[10]));
    }

    #[test]
    fn several_outputs_share_depth() {
        let f = PBForm::poly(v(0));
        let g = PBForm::new(vec![vec![v(0), v(1), Polynomial::constant(int(1))], vec![v(1).neg()]]).unwrap();
        let net = linear_spline_to_ffn(&[f.clone(), g.clone()], 2).unwrap();
        for (a, b) in [(3, -2), (-5, 4), (0, 0), (1, 9)] {
            let x = col(&[a, b]);
            let out = eval_ffn(&net, &x).unwrap();
            assert_eq!(out.get(0, 0), &f.eval(&x).unwrap());
            assert_eq!(out.get(1, 0), &g.eval(&x).unwrap());
        }
    }

    #[test]
    fn rejects_nonlinear() {
        let f = PBForm::poly(v(0).mul(&v(0)));
        assert!(matches!(linear_spline_to_ffn(&[f], 1), Err(Error::DegreeTooHigh { .. })));
        let g = PBForm::poly(v(3));
        assert!(linear_spline_to_ffn(&[g], 2).is_err());
    }
}
