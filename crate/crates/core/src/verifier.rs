//! Sampling oracles and property checks for compiled and hand-built models.
//!
//! All randomness comes from ChaCha8 streams keyed by `(seed, index)`, so a
//! sample or trial is the same whether it runs serially or in parallel.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::compiler::CompiledEncoder;
use crate::error::{Error, Result};
use crate::scalar::{Rational, Scalar};
use crate::spline::SplineGrid;
use crate::tensor::{apply_mask, relu, stack_rows, IntoBackend, Mat};
use crate::transformer::{
    eval_encdec, eval_encoder, eval_ffn, Activation, AttentionHead, EncDecStack, EncoderBlock, FeedForwardNet,
    MultiheadAttention,
};

pub const NUMERATOR_RANGE: i64 = 10;
pub const MAX_DENOMINATOR: i64 = 7;
pub const DEGREE_STEP_DENOMINATOR: i64 = 1000;

/// Generator for item `index` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Numerator uniform in `[-10, 10]`, denominator uniform in `[1, 7]`.
pub fn sample_rational(rng: &mut ChaCha8Rng) -> Rational {
    let num = rng.gen_range(-NUMERATOR_RANGE..=NUMERATOR_RANGE);
    let den = rng.gen_range(1..=MAX_DENOMINATOR);
    crate::scalar::ratio(num, den)
}

pub fn sample_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Mat<Rational> {
    Mat::from_fn(n, p, |_, _| sample_rational(rng))
}

/// Deterministic sample matrices `0..count` for a seed.
pub fn sample_matrices(seed: u64, count: usize, n: usize, p: usize) -> Vec<Mat<Rational>> {
    (0..count).map(|i| sample_matrix(&mut stream_rng(seed, i as u64), n, p)).collect()
}

/// Anything mapping an `n x p` matrix to a matrix.
pub trait Evaluable<T: Scalar>: Sync {
    fn input_shape(&self) -> (usize, usize);
    fn eval(&self, x: &Mat<T>) -> Result<Mat<T>>;
}

impl Evaluable<Rational> for CompiledEncoder {
    fn input_shape(&self) -> (usize, usize) {
        (self.n, self.p)
    }
    fn eval(&self, x: &Mat<Rational>) -> Result<Mat<Rational>> {
        CompiledEncoder::eval(self, x)
    }
}

impl<T: Scalar> Evaluable<T> for AttentionHead<T> {
    fn input_shape(&self) -> (usize, usize) {
        (self.n(), self.p())
    }
    fn eval(&self, x: &Mat<T>) -> Result<Mat<T>> {
        crate::transformer::eval_attention(self, x)
    }
}

impl<T: Scalar> Evaluable<T> for MultiheadAttention<T> {
    fn input_shape(&self) -> (usize, usize) {
        (self.n(), self.p())
    }
    fn eval(&self, x: &Mat<T>) -> Result<Mat<T>> {
        crate::transformer::eval_multihead(self, x)
    }
}

/// A chain of encoder blocks with a declared input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<T: Scalar> {
    pub blocks: Vec<EncoderBlock<T>>,
    pub n: usize,
    pub p: usize,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn new(blocks: Vec<EncoderBlock<T>>) -> Result<Self> {
        let first = blocks.first().ok_or(Error::Empty("encoder"))?;
        let (n, p) = (first.in_rows(), first.attn.p());
        Ok(EncoderModel { blocks, n, p })
    }
}

impl<T: Scalar> Evaluable<T> for EncoderModel<T> {
    fn input_shape(&self) -> (usize, usize) {
        (self.n, self.p)
    }
    fn eval(&self, x: &Mat<T>) -> Result<Mat<T>> {
        eval_encoder(&self.blocks, x)
    }
}

/// Encoder–decoder evaluated on the stacked input `[X; Y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncDecModel<T: Scalar> {
    pub stack: EncDecStack<T>,
    pub n_x: usize,
    pub n_y: usize,
    pub p: usize,
}

impl<T: Scalar> EncDecModel<T> {
    pub fn new(stack: EncDecStack<T>) -> Result<Self> {
        let stage = stack.stages.first().ok_or(Error::Empty("encoder-decoder stages"))?;
        let n_x = match stack.encoder.first() {
            Some(b) => b.in_rows(),
            None => stage.gamma.n(),
        };
        let n_y = stage.beta.n();
        Ok(EncDecModel {
            p: stage.beta.p(),
            stack,
            n_x,
            n_y,
        })
    }

    pub fn split(&self, xy: &Mat<T>) -> Result<(Mat<T>, Mat<T>)> {
        if xy.shape() != (self.n_x + self.n_y, self.p) {
            return Err(Error::shape("stacked input", xy.shape(), (self.n_x + self.n_y, self.p)));
        }
        let x = xy.select_rows(&(0..self.n_x).collect::<Vec<_>>())?;
        let y = xy.select_rows(&(self.n_x..self.n_x + self.n_y).collect::<Vec<_>>())?;
        Ok((x, y))
    }
}

impl<T: Scalar> Evaluable<T> for EncDecModel<T> {
    fn input_shape(&self) -> (usize, usize) {
        (self.n_x + self.n_y, self.p)
    }
    fn eval(&self, xy: &Mat<T>) -> Result<Mat<T>> {
        let (x, y) = self.split(xy)?;
        eval_encdec(&self.stack, &x, &y)
    }
}

impl Evaluable<Rational> for SplineGrid {
    fn input_shape(&self) -> (usize, usize) {
        (self.n, self.p)
    }
    fn eval(&self, x: &Mat<Rational>) -> Result<Mat<Rational>> {
        SplineGrid::eval(self, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivFailure {
    pub sample: usize,
    pub x: Mat<Rational>,
    pub expected: Mat<Rational>,
    pub got: Mat<Rational>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivReport {
    pub kind: &'static str,
    pub samples: usize,
    pub seed: u64,
    pub exact: bool,
    #[serde(serialize_with = "ser_rational")]
    pub max_abs_error: Rational,
    pub first_failure: Option<EquivFailure>,
}

fn ser_rational<S: serde::Serializer>(q: &Rational, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&q.to_string())
}

fn max_abs_diff(a: &Mat<Rational>, b: &Mat<Rational>) -> Rational {
    a.entries()
        .iter()
        .zip(b.entries())
        .map(|(u, v)| (u.clone() - v.clone()).abs())
        .fold(Rational::zero(), |acc, d| if d > acc { d } else { acc })
}

/// Compares `model` with the spline on seeded random rational inputs.
pub fn oracle_equiv<M: Evaluable<Rational>>(model: &M, oracle: &SplineGrid, n_samples: usize, seed: u64) -> Result<EquivReport> {
    let shape = (oracle.n, oracle.p);
    if model.input_shape() != shape {
        return Err(Error::shape("model vs spline input", model.input_shape(), shape));
    }
    let results = (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<(Mat<Rational>, Mat<Rational>, Mat<Rational>)> {
            let x = sample_matrix(&mut stream_rng(seed, i as u64), shape.0, shape.1);
            let expected = oracle.eval(&x)?;
            let got = model.eval(&x)?;
            if got.shape() != expected.shape() {
                return Err(Error::shape("model vs spline output", got.shape(), expected.shape()));
            }
            Ok((x, expected, got))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut max_err = Rational::zero();
    let mut first_failure = None;
    for (i, (x, expected, got)) in results.into_iter().enumerate() {
        let err = max_abs_diff(&expected, &got);
        if !err.is_zero() && first_failure.is_none() {
            first_failure = Some(EquivFailure {
                sample: i,
                x,
                expected: expected.clone(),
                got: got.clone(),
            });
        }
        if err > max_err {
            max_err = err;
        }
    }
    Ok(EquivReport {
        kind: "equiv",
        samples: n_samples,
        seed,
        exact: first_failure.is_none(),
        max_abs_error: max_err,
        first_failure,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct ArWitness<T: Scalar> {
    pub x: Mat<T>,
    pub x_prime: Mat<T>,
    /// Number of leading columns kept (1-based prefix length).
    pub j: usize,
    /// 1-based output column that changed.
    pub column: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct ArReport<T: Scalar> {
    pub kind: &'static str,
    pub trials: usize,
    pub seed: u64,
    pub pass: bool,
    pub witness: Option<ArWitness<T>>,
}

/// Resamples the columns after a random prefix and checks that the output
/// columns of the prefix are unchanged.
pub fn autoregressive_check<T: Scalar, M: Evaluable<T>>(model: &M, trials: usize, seed: u64) -> Result<ArReport<T>> {
    let (n, p) = model.input_shape();
    if p < 2 {
        return Err(Error::InvalidParameters("autoregressive check needs at least two columns".into()));
    }
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<Option<ArWitness<T>>> {
            let mut rng = stream_rng(seed, t as u64);
            let x = sample_matrix(&mut rng, n, p);
            let j = rng.gen_range(1..p);
            let fresh = sample_matrix(&mut rng, n, p);
            let x_prime = Mat::from_fn(n, p, |r, c| if c < j { x.get(r, c).clone() } else { fresh.get(r, c).clone() });
            let (x, x_prime): (Mat<T>, Mat<T>) = (x.map(T::from_rational), x_prime.map(T::from_rational));
            let out = model.eval(&x)?;
            let out_prime = model.eval(&x_prime)?;
            for c in 0..j.min(out.cols()) {
                if (0..out.rows()).any(|r| out.get(r, c) != out_prime.get(r, c)) {
                    return Ok(Some(ArWitness {
                        x,
                        x_prime,
                        j,
                        column: c + 1,
                    }));
                }
            }
            Ok(None)
        })
        .collect::<Result<Vec<_>>>()?;
    let witness = outcomes.into_iter().flatten().next();
    Ok(ArReport {
        kind: "autoregressive",
        trials,
        seed,
        pass: witness.is_none(),
        witness,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct TrialDegree {
    pub degree: u32,
    /// Differences never vanished: the true degree is at least `degree`.
    pub saturated: bool,
}

impl Serialize for TrialDegree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.saturated {
            s.serialize_str(&format!("≥{}", self.degree))
        } else {
            s.serialize_u32(self.degree)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DegreeReport {
    pub kind: &'static str,
    pub trials: usize,
    pub seed: u64,
    pub max_deg: u32,
    pub per_trial: Vec<TrialDegree>,
    pub modal: TrialDegree,
    pub max: TrialDegree,
    pub bound: u64,
    pub bound_satisfied: bool,
}

/// Highest `k <= limit + 1` with a nonzero `k`-th forward difference in any
/// output entry; values holds one output per collinear point.
fn difference_degree(values: &[Mat<Rational>]) -> u32 {
    let mut best = 0;
    let entries = values[0].entries().len();
    for e in 0..entries {
        let mut diff: Vec<Rational> = values.iter().map(|v| v.entries()[e].clone()).collect();
        let mut k = 0u32;
        let mut last_nonzero = if diff.iter().any(|d| !d.is_zero()) { Some(0) } else { None };
        while diff.len() > 1 {
            diff = diff.windows(2).map(|w| w[1].clone() - w[0].clone()).collect();
            k += 1;
            if diff.iter().any(|d| !d.is_zero()) {
                last_nonzero = Some(k);
            }
        }
        best = best.max(last_nonzero.unwrap_or(0));
    }
    best
}

/// Estimates the polynomial degree along random lines by exact forward
/// differences at `max_deg + 2` points spaced `1/1000` apart.
pub fn estimate_degree<M: Evaluable<Rational>>(model: &M, max_deg: u32, trials: usize, seed: u64, bound: u64) -> Result<DegreeReport> {
    if trials == 0 {
        return Err(Error::InvalidParameters("degree estimation needs at least one trial".into()));
    }
    let (n, p) = model.input_shape();
    let step = crate::scalar::ratio(1, DEGREE_STEP_DENOMINATOR);
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<TrialDegree> {
            let mut rng = stream_rng(seed, t as u64);
            let base = sample_matrix(&mut rng, n, p);
            let dir = sample_matrix(&mut rng, n, p);
            let values = (0..max_deg as i64 + 2)
                .map(|k| {
                    let x = base.add(&dir.scale(&(step.clone() * crate::scalar::int(k))))?;
                    model.eval(&x)
                })
                .collect::<Result<Vec<_>>>()?;
            let d = difference_degree(&values);
            Ok(if d > max_deg {
                TrialDegree {
                    degree: max_deg,
                    saturated: true,
                }
            } else {
                TrialDegree {
                    degree: d,
                    saturated: false,
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts: BTreeMap<TrialDegree, usize> = BTreeMap::new();
    for d in &per_trial {
        *counts.entry(*d).or_insert(0) += 1;
    }
    // ties go to the larger estimate
    let modal = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| a.0.cmp(b.0)))
        .map(|(d, _)| *d)
        .expect("at least one trial");
    let max = *per_trial.iter().max().expect("at least one trial");
    Ok(DegreeReport {
        kind: "degree",
        trials,
        seed,
        max_deg,
        per_trial,
        modal,
        max,
        bound,
        bound_satisfied: !modal.saturated && u64::from(modal.degree) <= bound,
    })
}

/// `3^t`.
pub fn encoder_degree_bound(t: usize) -> u64 {
    3u64.saturating_pow(t as u32)
}

/// `3^(t+s) + 3^t - 3^s` for `s` encoder blocks and `t` encoder–decoder
/// stages.
pub fn encdec_degree_bound(s: usize, t: usize) -> u64 {
    encoder_degree_bound(t + s) + encoder_degree_bound(t) - encoder_degree_bound(s)
}

/// Encoder with every attention activation replaced, evaluated in `f64`.
/// Feed-forward nets stay ReLU. The exact weights are kept for swapping back.
#[derive(Clone, Debug)]
pub struct SmoothedModel {
    original: Vec<EncoderBlock<Rational>>,
    pub activation: Activation,
    pub blocks: Vec<EncoderBlock<f64>>,
    pub n: usize,
    pub p: usize,
}

impl SmoothedModel {
    /// The exact weights this model was built from.
    pub fn swap_back(&self) -> Vec<EncoderBlock<Rational>> {
        self.original.clone()
    }

    /// The same weights with ReLU attention, in `f64`.
    pub fn relu_reference(&self) -> Vec<EncoderBlock<f64>> {
        self.original.iter().map(EncoderBlock::convert).collect()
    }
}

impl Evaluable<f64> for SmoothedModel {
    fn input_shape(&self) -> (usize, usize) {
        (self.n, self.p)
    }
    fn eval(&self, x: &Mat<f64>) -> Result<Mat<f64>> {
        eval_encoder(&self.blocks, x)
    }
}

fn with_activation<T: Scalar>(blocks: &[EncoderBlock<T>], act: Activation) -> Vec<EncoderBlock<T>> {
    blocks
        .iter()
        .map(|b| EncoderBlock {
            attn: b.attn.with_activation(act),
            ffn: b.ffn.clone(),
            residual: b.residual,
        })
        .collect()
}

pub fn smooth_swap(blocks: &[EncoderBlock<Rational>], activation: Activation) -> Result<SmoothedModel> {
    let first = blocks.first().ok_or(Error::Empty("encoder"))?;
    if blocks.iter().flat_map(|b| &b.attn.heads).any(|h| h.activation != Activation::Relu) {
        return Err(Error::InvalidParameters("smoothing expects a ReLU-attention model".into()));
    }
    if let Activation::Softplus(beta) = activation {
        if beta.is_nan() || beta <= 0.0 {
            return Err(Error::InvalidBeta(beta));
        }
    }
    let as_float: Vec<EncoderBlock<f64>> = blocks.iter().map(EncoderBlock::convert).collect();
    Ok(SmoothedModel {
        original: blocks.to_vec(),
        activation,
        blocks: with_activation(&as_float, activation),
        n: first.in_rows(),
        p: first.attn.p(),
    })
}

/// Per-entry bound on `|smoothed - relu|` for one input, propagating the
/// softplus gap `ln 2 / β` through every layer. Products use
/// `|ab - a'b'| <= |a||Δb| + |Δa||b| + |Δa||Δb|` with `a`, `b` the ReLU values;
/// ReLU and softplus are 1-Lipschitz.
pub fn softplus_error_bound(blocks: &[EncoderBlock<f64>], beta: f64, x: &Mat<f64>) -> Result<Mat<f64>> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::InvalidBeta(beta));
    }
    let gap = if beta.is_infinite() { 0.0 } else { std::f64::consts::LN_2 / beta };
    let abs = |m: &Mat<f64>| m.map(|v: &f64| v.abs());
    let mut z = x.clone();
    let mut err = Mat::<f64>::zeros(x.rows(), x.cols());
    for block in blocks {
        let mut head_vals = Vec::new();
        let mut head_errs = Vec::new();
        for h in &block.attn.heads {
            let q = h.a_q.matmul(&z)?.add(&h.b_q)?;
            let k = h.a_k.matmul(&z)?.add(&h.b_k)?;
            let v = h.a_v.matmul(&z)?.add(&h.b_v)?;
            let eq = abs(&h.a_q).matmul(&err)?;
            let ek = abs(&h.a_k).matmul(&err)?;
            let ev = abs(&h.a_v).matmul(&err)?;
            let s = k.transpose().matmul(&q)?;
            let es = abs(&k)
                .transpose()
                .matmul(&eq)?
                .add(&ek.transpose().matmul(&abs(&q))?)?
                .add(&ek.transpose().matmul(&eq)?)?;
            let (w, ew) = if h.masked {
                let masked = apply_mask(&s)?;
                let w = masked.relu();
                let ew = Mat::from_fn(s.rows(), s.cols(), |i, j| if i > j { 0.0 } else { es.get(i, j) + gap });
                (w, ew)
            } else {
                (relu(&s), es.map(|e: &f64| e + gap))
            };
            let out = v.matmul(&w)?;
            let eout = abs(&v).matmul(&ew)?.add(&ev.matmul(&abs(&w))?)?.add(&ev.matmul(&ew)?)?;
            head_vals.push(out);
            head_errs.push(eout);
        }
        let a = stack_rows(&head_vals)?;
        let mut ea = stack_rows(&head_errs)?;
        let mut h = a;
        let last = block.ffn.layers.len() - 1;
        for (i, l) in block.ffn.layers.iter().enumerate() {
            ea = abs(&l.a).matmul(&ea)?;
            h = l.apply(&h)?;
            if i < last {
                h = relu(&h);
            }
        }
        if block.residual {
            h = h.add(&z)?;
            ea = ea.add(&err)?;
        }
        z = h;
        err = ea;
    }
    Ok(err)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    #[serde(serialize_with = "ser_beta")]
    pub beta: f64,
    pub max_error: f64,
    pub bound: f64,
}

fn ser_beta<S: serde::Serializer>(b: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if b.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub kind: &'static str,
    pub samples: usize,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    /// Errors never increase with `β`.
    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].max_error <= w[0].max_error)
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].max_error < w[0].max_error)
    }

    pub fn within_bounds(&self) -> bool {
        self.rows.iter().all(|r| r.max_error <= r.bound)
    }
}

/// Max error of the softplus(β) model against the ReLU model over the
/// samples, one row per β in ascending order. `f64::INFINITY` is the ReLU
/// model itself.
pub fn smooth_convergence_table(blocks: &[EncoderBlock<Rational>], samples: &[Mat<f64>], betas: &[f64]) -> Result<ConvergenceTable> {
    let mut betas = betas.to_vec();
    if let Some(b) = betas.iter().find(|b| b.is_nan() || **b <= 0.0) {
        return Err(Error::InvalidBeta(*b));
    }
    betas.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let reference: Vec<EncoderBlock<f64>> = blocks.iter().map(EncoderBlock::convert).collect();
    let relu_out = samples.iter().map(|x| eval_encoder(&reference, x)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(betas.len());
    for beta in betas {
        let act = if beta.is_infinite() { Activation::Relu } else { Activation::Softplus(beta) };
        let model = with_activation(&reference, act);
        let per_sample = samples
            .par_iter()
            .zip(&relu_out)
            .map(|(x, r)| -> Result<(f64, f64)> {
                let out = eval_encoder(&model, x)?;
                let err = out.entries().iter().zip(r.entries()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let bound_m = softplus_error_bound(&reference, beta, x)?;
                // slack for float rounding in the two evaluations
                let slack = r.entries().iter().map(|v| v.abs()).fold(1.0, f64::max) * 1e-9;
                let bound = bound_m.entries().iter().cloned().fold(0.0, f64::max) + slack;
                Ok((err, bound))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(ConvergenceRow {
            beta,
            max_error: per_sample.iter().map(|e| e.0).fold(0.0, f64::max),
            bound: per_sample.iter().map(|e| e.1).fold(0.0, f64::max),
        });
    }
    Ok(ConvergenceTable {
        kind: "smooth",
        samples: samples.len(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SoftmaxReport {
    pub kind: &'static str,
    pub samples: usize,
    pub finite_outputs: bool,
    pub probability_columns: bool,
    pub masked_entries_zero: bool,
    pub max_column_deviation: f64,
}

impl SoftmaxReport {
    pub fn well_formed(&self) -> bool {
        self.finite_outputs && self.probability_columns && self.masked_entries_zero
    }
}

/// Runs the softmax-swapped model and checks every head's weight matrix:
/// columns sum to 1 within `1e-12`, entries lie in `[0, 1]`, masked entries
/// are exactly 0, and outputs are finite.
pub fn softmax_check(model: &SmoothedModel, samples: &[Mat<f64>]) -> Result<SoftmaxReport> {
    if model.activation != Activation::Softmax {
        return Err(Error::InvalidParameters("softmax check needs a softmax-swapped model".into()));
    }
    let mut finite = true;
    let mut prob = true;
    let mut masked_zero = true;
    let mut dev: f64 = 0.0;
    for x in samples {
        let mut z = x.clone();
        for block in &model.blocks {
            for h in &block.attn.heads {
                let w = h.weights(&z, &z)?;
                for c in 0..w.cols() {
                    let sum: f64 = (0..w.rows()).map(|r| *w.get(r, c)).sum();
                    dev = dev.max((sum - 1.0).abs());
                    for r in 0..w.rows() {
                        let v = *w.get(r, c);
                        if !(0.0..=1.0).contains(&v) {
                            prob = false;
                        }
                        if h.masked && r > c && v != 0.0 {
                            masked_zero = false;
                        }
                    }
                }
            }
            z = block.eval(&z)?;
            if z.entries().iter().any(|v| !v.is_finite()) {
                finite = false;
            }
        }
    }
    Ok(SoftmaxReport {
        kind: "softmax",
        samples: samples.len(),
        finite_outputs: finite,
        probability_columns: prob && dev <= 1e-12,
        masked_entries_zero: masked_zero,
        max_column_deviation: dev,
    })
}

/// Float copies of the sample matrices.
pub fn to_float(samples: &[Mat<Rational>]) -> Vec<Mat<f64>> {
    samples.iter().map(|m| m.convert()).collect()
}

/// `eval_ffn` on each column separately, for checking columnwise semantics.
pub fn eval_ffn_by_columns<T: Scalar>(ffn: &FeedForwardNet<T>, x: &Mat<T>) -> Result<Mat<T>> {
    let cols = (0..x.cols()).map(|c| eval_ffn(ffn, &x.col(c))).collect::<Result<Vec<_>>>()?;
    let rows = cols[0].rows();
    Ok(Mat::from_fn(rows, cols.len(), |r, c| cols[c].get(r, 0).clone()))
}

/// JSON of any report.
pub fn report_json<R: Serialize>(r: &R) -> Value {
    serde_json::to_value(r).expect("reports serialize")
}

#[allow(dead_code)]
fn assert_into_backend<T: IntoBackend<f64>>() {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile_spline, CompileOptions};
    use crate::fixtures::{unit_encdec, unit_encoder, unit_scalar_head};
    use crate::scalar::int;
    use crate::spline::{normalize_to_pbform, MaxDefExpr, PBForm, Polynomial};

    fn cube_grid() -> SplineGrid {
        let x = MaxDefExpr::var(0, 0);
        let e = MaxDefExpr::Product(vec![x.clone(), x.clone(), x]);
        SplineGrid::scalar(1, normalize_to_pbform(&e).unwrap()).unwrap()
    }

    #[test]
    fn samples_are_reproducible() {
        let a = sample_matrices(7, 5, 2, 3);
        let b = sample_matrices(7, 5, 2, 3);
        assert_eq!(a, b);
        assert_ne!(a, sample_matrices(8, 5, 2, 3));
        for m in &a {
            for q in m.entries() {
                assert!(q.denom() <= &num::BigInt::from(MAX_DENOMINATOR));
                assert!(q.abs() <= int(NUMERATOR_RANGE));
            }
        }
    }

    #[test]
    fn cube_head_matches_oracle() {
        let r = oracle_equiv(&unit_scalar_head(false), &cube_grid(), 1000, 42).unwrap();
        assert!(r.exact);
        assert!(r.max_abs_error.is_zero());
        assert_eq!(r.samples, 1000);
    }

    #[test]
    fn corrupted_model_gives_witness() {
        let mut h = unit_scalar_head(false);
        h.b_v = Mat::from_vec(1, 1, vec![int(1)]).unwrap();
        let r = oracle_equiv(&h, &cube_grid(), 50, 1).unwrap();
        assert!(!r.exact);
        let w = r.first_failure.unwrap();
        assert_ne!(w.expected, w.got);
    }

    #[test]
    fn zero_against_zero() {
        let z = |r, c| Mat::<Rational>::zeros(r, c);
        let h = AttentionHead::new(z(1, 1), z(1, 1), z(1, 1), z(1, 1), z(1, 1), z(1, 1), Activation::Relu, false).unwrap();
        let zero = SplineGrid::scalar(1, PBForm::poly(Polynomial::zero())).unwrap();
        assert!(oracle_equiv(&h, &zero, 100, 3).unwrap().exact);
    }

    #[test]
    fn masked_head_is_autoregressive_and_unmasked_is_not() {
        let masked = crate::fixtures::random_head_model(2, 3, 5);
        let mut m = masked.clone();
        m.masked = true;
        assert!(autoregressive_check::<Rational, _>(&m, 100, 9).unwrap().pass);
        let f: AttentionHead<f64> = m.convert();
        assert!(autoregressive_check::<f64, _>(&f.with_activation(Activation::Softmax), 100, 9).unwrap().pass);

        // keys read column 2, queries are constant: column 1 output sees column 2
        let one = |r, c| Mat::<Rational>::from_fn(r, c, |_, _| int(1));
        let z = |r, c| Mat::<Rational>::zeros(r, c);
        let h = AttentionHead::new(z(1, 1), one(1, 2), one(1, 1), z(1, 2), one(1, 1), z(1, 2), Activation::Relu, false).unwrap();
        let r = autoregressive_check::<Rational, _>(&h, 50, 9).unwrap();
        assert!(!r.pass);
        let w = r.witness.unwrap();
        assert_eq!(w.j, 1);
        assert_eq!(w.column, 1);
    }

    #[test]
    fn degree_fixtures() {
        let r = estimate_degree(&unit_scalar_head(false), 6, 30, 1, 3).unwrap();
        assert_eq!(r.modal, TrialDegree { degree: 3, saturated: false });
        assert!(r.bound_satisfied);

        let two = EncoderModel::new(unit_encoder(2)).unwrap();
        let r = estimate_degree(&two, 11, 25, 2, 9).unwrap();
        assert_eq!(r.modal.degree, 9);

        let ed = EncDecModel::new(unit_encdec()).unwrap();
        let r = estimate_degree(&ed, 11, 25, 3, encdec_degree_bound(1, 1)).unwrap();
        assert!(r.bound_satisfied);
        assert!(r.modal.degree <= 9);

        let affine = SplineGrid::scalar(1, normalize_to_pbform(&MaxDefExpr::sum2(MaxDefExpr::var(0, 0), MaxDefExpr::int(2))).unwrap()).unwrap();
        assert_eq!(estimate_degree(&affine, 4, 5, 1, 1).unwrap().modal.degree, 1);

        let sat = estimate_degree(&two, 4, 5, 1, 9).unwrap();
        assert!(sat.modal.saturated);
        assert!(!sat.bound_satisfied);
        assert_eq!(serde_json::to_value(sat.modal).unwrap(), serde_json::json!("≥4"));
    }

    #[test]
    fn bounds_arithmetic() {
        assert_eq!(encoder_degree_bound(2), 9);
        assert_eq!(encdec_degree_bound(1, 1), 9);
        assert_eq!(encdec_degree_bound(2, 1), 27 + 3 - 9);
    }

    #[test]
    fn softplus_table_behaviour() {
        let g = cube_grid();
        let c = compile_spline(&g, &CompileOptions::default()).unwrap();
        let xs = to_float(&sample_matrices(11, 20, 1, 1));
        let t = smooth_convergence_table(&c.blocks, &xs, &[1000.0, 10.0, 100.0, f64::INFINITY]).unwrap();
        let betas: Vec<f64> = t.rows.iter().map(|r| r.beta).collect();
        assert_eq!(betas, [10.0, 100.0, 1000.0, f64::INFINITY]);
        // paired ± heads cancel the softplus gap, so errors may hit zero
        assert!(t.is_monotone(), "{t:?}");
        assert!(t.within_bounds(), "{t:?}");
        assert_eq!(t.rows[3].max_error, 0.0);

        let cube = smooth_convergence_table(&unit_encoder(1), &xs, &[10.0, 100.0, 1000.0]).unwrap();
        assert!(cube.strictly_decreasing(), "{cube:?}");
        assert!(cube.within_bounds(), "{cube:?}");
        assert!(smooth_convergence_table(&c.blocks, &xs, &[]).unwrap().rows.is_empty());
    }

    #[test]
    fn swap_round_trip_and_softmax_mask() {
        let blocks = unit_encoder(2);
        let s = smooth_swap(&blocks, Activation::Softplus(10.0)).unwrap();
        assert_eq!(s.swap_back(), blocks);
        assert!(s.blocks.iter().flat_map(|b| &b.attn.heads).all(|h| h.activation == Activation::Softplus(10.0)));
        assert!(smooth_swap(&with_activation(&blocks, Activation::Softmax), Activation::Softmax).is_err());

        let grid = SplineGrid::from_json(&serde_json::json!({"n": 1, "p": 2, "grid": [[
            {"op": "var", "name": "x_1_1"},
            {"op": "product", "args": [{"op": "var", "name": "x_1_1"}, {"op": "var", "name": "x_1_2"}]}
        ]]}))
        .unwrap();
        let c = crate::compiler::compile_autoregressive(&grid, &CompileOptions::default()).unwrap();
        let sm = smooth_swap(&c.blocks, Activation::Softmax).unwrap();
        let rep = softmax_check(&sm, &to_float(&sample_matrices(4, 10, 1, 2))).unwrap();
        assert!(rep.well_formed(), "{rep:?}");
    }
}
