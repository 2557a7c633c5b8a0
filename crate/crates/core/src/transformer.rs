//! Attention modules, feed-forward nets, encoder/decoder blocks and the
//! encoder–decoder recursion.
//!
//! Everything is generic over the [`Scalar`] backend. Parameter containers
//! are plain data; evaluation is pure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Rational, Scalar};
use crate::tensor::{apply_mask, relu, softmax_columns, softplus_beta, stack_rows, IntoBackend, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
    Softplus(f64),
}

impl Activation {
    pub fn name(&self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::Softmax => "softmax".into(),
            Activation::Softplus(b) => format!("softplus({b})"),
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One attention head `X -> V(X) act(K(X)^T Q(Y))` with affine query, key and
/// value layers. For self-attention `Y = X`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AttentionHead<T: Scalar> {
    #[serde(rename = "A_Q")]
    pub a_q: Mat<T>,
    #[serde(rename = "B_Q")]
    pub b_q: Mat<T>,
    #[serde(rename = "A_K")]
    pub a_k: Mat<T>,
    #[serde(rename = "B_K")]
    pub b_k: Mat<T>,
    #[serde(rename = "A_V")]
    pub a_v: Mat<T>,
    #[serde(rename = "B_V")]
    pub b_v: Mat<T>,
    #[serde(default)]
    pub masked: bool,
    pub activation: Activation,
    /// Divide scores by `sqrt(d)` before the activation. Off by default.
    #[serde(default, skip_serializing_if = "is_false")]
    pub scaled: bool,
}

impl<T: Scalar> AttentionHead<T> {
    pub fn new(
        a_q: Mat<T>,
        b_q: Mat<T>,
        a_k: Mat<T>,
        b_k: Mat<T>,
        a_v: Mat<T>,
        b_v: Mat<T>,
        activation: Activation,
        masked: bool,
    ) -> Result<Self> {
        let head = AttentionHead {
            a_q,
            b_q,
            a_k,
            b_k,
            a_v,
            b_v,
            masked,
            activation,
            scaled: false,
        };
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_q.rows() != self.a_k.rows() {
            return Err(Error::shape("A_Q/A_K rows", self.a_q.shape(), self.a_k.shape()));
        }
        if self.b_q.rows() != self.a_q.rows() || self.b_k.rows() != self.a_k.rows() {
            return Err(Error::shape("B_Q/B_K rows", self.b_q.shape(), self.b_k.shape()));
        }
        if self.b_q.cols() != self.b_k.cols() || self.b_v.cols() != self.b_k.cols() {
            return Err(Error::shape("bias columns", self.b_q.shape(), self.b_v.shape()));
        }
        if self.a_v.rows() != self.b_v.rows() {
            return Err(Error::shape("A_V/B_V rows", self.a_v.shape(), self.b_v.shape()));
        }
        if self.a_v.cols() != self.a_k.cols() {
            return Err(Error::shape("A_V/A_K cols", self.a_v.shape(), self.a_k.shape()));
        }
        if let Activation::Softplus(b) = self.activation {
            if b.is_nan() || b <= 0.0 {
                return Err(Error::InvalidBeta(b));
            }
        }
        Ok(())
    }

    /// Rows of the key/value input.
    pub fn n(&self) -> usize {
        self.a_k.cols()
    }

    /// Rows of the query input (`n` for self-attention).
    pub fn n_query(&self) -> usize {
        self.a_q.cols()
    }

    pub fn p(&self) -> usize {
        self.b_k.cols()
    }

    pub fn d(&self) -> usize {
        self.a_k.rows()
    }

    pub fn m(&self) -> usize {
        self.a_v.rows()
    }

    pub fn with_activation(&self, activation: Activation) -> Self {
        AttentionHead {
            activation,
            ..self.clone()
        }
    }

    pub fn convert<U: Scalar>(&self) -> AttentionHead<U>
    where
        T: IntoBackend<U>,
    {
        AttentionHead {
            a_q: self.a_q.convert(),
            b_q: self.b_q.convert(),
            a_k: self.a_k.convert(),
            b_k: self.b_k.convert(),
            a_v: self.a_v.convert(),
            b_v: self.b_v.convert(),
            masked: self.masked,
            activation: self.activation,
            scaled: self.scaled,
        }
    }

    fn check_inputs(&self, kv: &Mat<T>, query: &Mat<T>) -> Result<()> {
        if kv.rows() != self.n() || kv.cols() != self.p() {
            return Err(Error::shape("attention input", kv.shape(), (self.n(), self.p())));
        }
        if query.rows() != self.n_query() || query.cols() != self.p() {
            return Err(Error::shape(
                "attention query input",
                query.shape(),
                (self.n_query(), self.p()),
            ));
        }
        Ok(())
    }

    /// `K(kv)^T Q(query)`, optionally scaled.
    pub fn scores(&self, kv: &Mat<T>, query: &Mat<T>) -> Result<Mat<T>> {
        self.check_inputs(kv, query)?;
        let q = self.a_q.matmul(query)?.add(&self.b_q)?;
        let k = self.a_k.matmul(kv)?.add(&self.b_k)?;
        let s = k.transpose().matmul(&q)?;
        if !self.scaled {
            return Ok(s);
        }
        let d = self.d() as u64;
        let root = (d as f64).sqrt().round() as u64;
        if root * root == d {
            Ok(s.scale(&T::from_rational(&Rational::new(1.into(), root.into()))))
        } else if let Some(c) = T::from_f64(1.0 / (d as f64).sqrt()).filter(|_| {
            T::BACKEND == crate::scalar::Backend::Float
        }) {
            Ok(s.scale(&c))
        } else {
            Err(Error::UnsupportedBackend {
                op: "irrational attention scaling",
                backend: T::BACKEND.name(),
            })
        }
    }

    /// The `p x p` activated score matrix (after masking).
    pub fn weights(&self, kv: &Mat<T>, query: &Mat<T>) -> Result<Mat<T>> {
        let s = self.scores(kv, query)?;
        if self.masked {
            let m = apply_mask(&s)?;
            match self.activation {
                Activation::Relu => Ok(m.relu()),
                Activation::Softmax => m.softmax(),
                Activation::Softplus(b) => m.softplus(b),
            }
        } else {
            match self.activation {
                Activation::Relu => Ok(relu(&s)),
                Activation::Softmax => softmax_columns(&s),
                Activation::Softplus(b) => softplus_beta(&s, b),
            }
        }
    }

    fn eval_pair(&self, kv: &Mat<T>, query: &Mat<T>) -> Result<Mat<T>> {
        let w = self.weights(kv, query)?;
        let v = self.a_v.matmul(kv)?.add(&self.b_v)?;
        v.matmul(&w)
    }
}

/// Self-attention `V(X) act(mask?(K(X)^T Q(X)))`.
pub fn eval_attention<T: Scalar>(head: &AttentionHead<T>, x: &Mat<T>) -> Result<Mat<T>> {
    head.eval_pair(x, x)
}

/// Encoder–decoder attention: keys and values from `x`, queries from `y`.
pub fn eval_encdec_attention<T: Scalar>(
    head: &AttentionHead<T>,
    x: &Mat<T>,
    y: &Mat<T>,
) -> Result<Mat<T>> {
    head.eval_pair(x, y)
}

/// Heads stacked vertically in declared order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MultiheadAttention<T: Scalar> {
    pub heads: Vec<AttentionHead<T>>,
}

impl<T: Scalar> MultiheadAttention<T> {
    pub fn new(heads: Vec<AttentionHead<T>>) -> Result<Self> {
        let mh = MultiheadAttention { heads };
        mh.validate()?;
        Ok(mh)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.heads.first().ok_or(Error::Empty("multihead attention"))?;
        for h in &self.heads {
            h.validate()?;
            if (h.n(), h.n_query(), h.p(), h.m()) != (first.n(), first.n_query(), first.p(), first.m()) {
                return Err(Error::shape(
                    "multihead heads",
                    (first.n(), first.m()),
                    (h.n(), h.m()),
                ));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.heads[0].n()
    }

    pub fn n_query(&self) -> usize {
        self.heads[0].n_query()
    }

    pub fn p(&self) -> usize {
        self.heads[0].p()
    }

    pub fn out_rows(&self) -> usize {
        self.heads.iter().map(AttentionHead::m).sum()
    }

    pub fn is_masked(&self) -> bool {
        self.heads.iter().all(|h| h.masked)
    }

    pub fn convert<U: Scalar>(&self) -> MultiheadAttention<U>
    where
        T: IntoBackend<U>,
    {
        MultiheadAttention {
            heads: self.heads.iter().map(AttentionHead::convert).collect(),
        }
    }

    pub fn with_activation(&self, act: Activation) -> Self {
        MultiheadAttention {
            heads: self.heads.iter().map(|h| h.with_activation(act)).collect(),
        }
    }
}

pub fn eval_multihead<T: Scalar>(mh: &MultiheadAttention<T>, x: &Mat<T>) -> Result<Mat<T>> {
    let outs = mh
        .heads
        .iter()
        .map(|h| eval_attention(h, x))
        .collect::<Result<Vec<_>>>()?;
    stack_rows(&outs)
}

pub fn eval_multihead_encdec<T: Scalar>(
    mh: &MultiheadAttention<T>,
    x: &Mat<T>,
    y: &Mat<T>,
) -> Result<Mat<T>> {
    let outs = mh
        .heads
        .iter()
        .map(|h| eval_encdec_attention(h, x, y))
        .collect::<Result<Vec<_>>>()?;
    stack_rows(&outs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AffineLayer<T: Scalar> {
    #[serde(rename = "A")]
    pub a: Mat<T>,
    /// Column vector.
    pub b: Mat<T>,
}

impl<T: Scalar> AffineLayer<T> {
    pub fn new(a: Mat<T>, b: Mat<T>) -> Result<Self> {
        if b.cols() != 1 || b.rows() != a.rows() {
            return Err(Error::shape("affine layer bias", a.shape(), b.shape()));
        }
        Ok(AffineLayer { a, b })
    }

    pub fn linear(a: Mat<T>) -> Self {
        let b = Mat::zeros(a.rows(), 1);
        AffineLayer { a, b }
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn apply(&self, x: &Mat<T>) -> Result<Mat<T>> {
        self.a.matmul(x)?.add_column_broadcast(&self.b)
    }

    /// `self ∘ inner` as a single affine layer.
    pub fn compose(&self, inner: &AffineLayer<T>) -> Result<AffineLayer<T>> {
        let a = self.a.matmul(&inner.a)?;
        let b = self.a.matmul(&inner.b)?.add(&self.b)?;
        AffineLayer::new(a, b)
    }
}

/// `x -> A_{l+1} σ(A_l ... σ(A_1 x + b_1) ... + b_l) + b_{l+1}` with ReLU
/// between layers, applied columnwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FeedForwardNet<T: Scalar> {
    pub layers: Vec<AffineLayer<T>>,
}

impl<T: Scalar> FeedForwardNet<T> {
    pub fn new(layers: Vec<AffineLayer<T>>) -> Result<Self> {
        let net = FeedForwardNet { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Empty("feed-forward net"));
        }
        for l in &self.layers {
            if l.b.cols() != 1 || l.b.rows() != l.a.rows() {
                return Err(Error::shape("affine layer bias", l.a.shape(), l.b.shape()));
            }
        }
        for w in self.layers.windows(2) {
            if w[1].in_dim() != w[0].out_dim() {
                return Err(Error::shape("layer chain", w[0].a.shape(), w[1].a.shape()));
            }
        }
        Ok(())
    }

    pub fn identity_via_relu(n: usize) -> Self {
        let i = Mat::<T>::identity(n);
        let neg = i.scale(&-T::one());
        let first = AffineLayer::linear(stack_rows(&[i.clone(), neg.clone()]).unwrap());
        let second = AffineLayer::linear(stack_rows(&[i, neg]).unwrap().transpose());
        FeedForwardNet {
            layers: vec![first, second],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, AffineLayer::out_dim)
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn convert<U: Scalar>(&self) -> FeedForwardNet<U>
    where
        T: IntoBackend<U>,
    {
        FeedForwardNet {
            layers: self
                .layers
                .iter()
                .map(|l| AffineLayer {
                    a: l.a.convert(),
                    b: l.b.convert(),
                })
                .collect(),
        }
    }

    /// `next ∘ self`, merging the boundary affine layers.
    pub fn then(&self, next: &FeedForwardNet<T>) -> Result<FeedForwardNet<T>> {
        let (last, head) = self.layers.split_last().expect("validated");
        let merged = next.layers[0].compose(last)?;
        let mut layers = head.to_vec();
        layers.push(merged);
        layers.extend(next.layers[1..].iter().cloned());
        FeedForwardNet::new(layers)
    }

    /// Splits into one-hidden-layer nets whose composition is `self`.
    pub fn split_hidden_layers(&self) -> Vec<FeedForwardNet<T>> {
        let h = self.hidden_layers();
        if h <= 1 {
            return vec![self.clone()];
        }
        let mut parts = Vec::with_capacity(h);
        for k in 0..h - 1 {
            let l = self.layers[k].clone();
            let id = AffineLayer::linear(Mat::identity(l.out_dim()));
            parts.push(FeedForwardNet { layers: vec![l, id] });
        }
        parts.push(FeedForwardNet {
            layers: self.layers[h - 1..].to_vec(),
        });
        parts
    }
}

pub fn eval_ffn<T: Scalar>(ffn: &FeedForwardNet<T>, x: &Mat<T>) -> Result<Mat<T>> {
    if x.rows() != ffn.in_dim() {
        return Err(Error::shape("ffn input", x.shape(), (ffn.in_dim(), x.cols())));
    }
    let mut z = x.clone();
    let last = ffn.layers.len() - 1;
    for (i, l) in ffn.layers.iter().enumerate() {
        z = l.apply(&z)?;
        if i < last {
            z = relu(&z);
        }
    }
    Ok(z)
}

/// `φ ∘ α`, plus the input when `residual` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EncoderBlock<T: Scalar> {
    #[serde(flatten)]
    pub attn: MultiheadAttention<T>,
    pub ffn: FeedForwardNet<T>,
    #[serde(default)]
    pub residual: bool,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn new(attn: MultiheadAttention<T>, ffn: FeedForwardNet<T>, residual: bool) -> Result<Self> {
        let block = EncoderBlock { attn, ffn, residual };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        self.ffn.validate()?;
        if self.ffn.in_dim() != self.attn.out_rows() {
            return Err(Error::shape(
                "block ffn input",
                (self.attn.out_rows(), self.attn.p()),
                (self.ffn.in_dim(), self.attn.p()),
            ));
        }
        if self.residual && self.ffn.out_dim() != self.attn.n() {
            return Err(Error::shape(
                "residual block",
                (self.attn.n(), self.attn.p()),
                (self.ffn.out_dim(), self.attn.p()),
            ));
        }
        Ok(())
    }

    pub fn in_rows(&self) -> usize {
        self.attn.n()
    }

    pub fn out_rows(&self) -> usize {
        self.ffn.out_dim()
    }

    pub fn convert<U: Scalar>(&self) -> EncoderBlock<U>
    where
        T: IntoBackend<U>,
    {
        EncoderBlock {
            attn: self.attn.convert(),
            ffn: self.ffn.convert(),
            residual: self.residual,
        }
    }

    pub fn eval(&self, x: &Mat<T>) -> Result<Mat<T>> {
        let y = eval_ffn(&self.ffn, &eval_multihead(&self.attn, x)?)?;
        if self.residual {
            y.add(x)
        } else {
            Ok(y)
        }
    }
}

/// An encoder block whose heads are all masked.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<T: Scalar>(EncoderBlock<T>);

impl<T: Scalar> DecoderBlock<T> {
    pub fn new(block: EncoderBlock<T>) -> Result<Self> {
        if !block.attn.is_masked() {
            return Err(Error::InvalidParameters("decoder block with an unmasked head".into()));
        }
        Ok(DecoderBlock(block))
    }

    pub fn block(&self) -> &EncoderBlock<T> {
        &self.0
    }

    pub fn into_block(self) -> EncoderBlock<T> {
        self.0
    }
}

/// Applies the blocks left to right; an empty list is the identity.
pub fn eval_encoder<T: Scalar>(blocks: &[EncoderBlock<T>], x: &Mat<T>) -> Result<Mat<T>> {
    let mut z = x.clone();
    for (i, b) in blocks.iter().enumerate() {
        z = b.eval(&z).map_err(|e| e.in_block(i))?;
    }
    Ok(z)
}

/// One encoder–decoder stage `(E, T) -> φ(γ(E, β(T)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EncDecStage<T: Scalar> {
    pub beta: MultiheadAttention<T>,
    pub gamma: MultiheadAttention<T>,
    pub phi: FeedForwardNet<T>,
    #[serde(default)]
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EncDecStack<T: Scalar> {
    pub encoder: Vec<EncoderBlock<T>>,
    pub stages: Vec<EncDecStage<T>>,
}

impl<T: Scalar> EncDecStack<T> {
    pub fn convert<U: Scalar>(&self) -> EncDecStack<U>
    where
        T: IntoBackend<U>,
    {
        EncDecStack {
            encoder: self.encoder.iter().map(EncoderBlock::convert).collect(),
            stages: self
                .stages
                .iter()
                .map(|s| EncDecStage {
                    beta: s.beta.convert(),
                    gamma: s.gamma.convert(),
                    phi: s.phi.convert(),
                    residual: s.residual,
                })
                .collect(),
        }
    }
}

/// `τ_0 = Y`, `τ_i = φ_i(γ_i(ε_s(X), β_i(τ_{i-1})))`, with `ε_s(X)`
/// computed once.
pub fn eval_encdec<T: Scalar>(stack: &EncDecStack<T>, x: &Mat<T>, y: &Mat<T>) -> Result<Mat<T>> {
    let enc = eval_encoder(&stack.encoder, x)?;
    let offset = stack.encoder.len();
    let mut tau = y.clone();
    for (i, st) in stack.stages.iter().enumerate() {
        let step = || -> Result<Mat<T>> {
            let b = eval_multihead(&st.beta, &tau)?;
            let g = eval_multihead_encdec(&st.gamma, &enc, &b)?;
            let out = eval_ffn(&st.phi, &g)?;
            if st.residual {
                out.add(&tau)
            } else {
                Ok(out)
            }
        };
        tau = step().map_err(|e| e.in_block(offset + i))?;
    }
    Ok(tau)
}
