//! Small reference models: unit-weight heads and encoders with known
//! polynomial outputs, and seeded random ReLU encoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{int, Rational};
use crate::tensor::Mat;
use crate::transformer::{Activation, AttentionHead, EncDecStack, EncDecStage, EncoderBlock, FeedForwardNet, MultiheadAttention};

fn scalar(v: i64) -> Mat<Rational> {
    Mat::from_vec(1, 1, vec![int(v)]).expect("1x1")
}

/// `1 x 1` head with unit weights and zero biases: `x -> x³`.
pub fn unit_scalar_head(masked: bool) -> AttentionHead<Rational> {
    AttentionHead::new(scalar(1), scalar(0), scalar(1), scalar(0), scalar(1), scalar(0), Activation::Relu, masked)
        .expect("valid head")
}

/// `t` blocks of the unit head followed by an identity ReLU net:
/// `x -> x^(3^t)`.
pub fn unit_encoder(t: usize) -> Vec<EncoderBlock<Rational>> {
    (0..t)
        .map(|_| {
            EncoderBlock::new(
                MultiheadAttention::new(vec![unit_scalar_head(false)]).expect("one head"),
                FeedForwardNet::identity_via_relu(1),
                false,
            )
            .expect("valid block")
        })
        .collect()
}

/// One encoder block and one encoder–decoder stage, all unit weights:
/// `(x, y) -> x⁶ y³` on the region where `x y > 0`.
pub fn unit_encdec() -> EncDecStack<Rational> {
    EncDecStack {
        encoder: unit_encoder(1),
        stages: vec![EncDecStage {
            beta: MultiheadAttention::new(vec![unit_scalar_head(true)]).expect("one head"),
            gamma: MultiheadAttention::new(vec![unit_scalar_head(false)]).expect("one head"),
            phi: FeedForwardNet::identity_via_relu(1),
            residual: false,
        }],
    }
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<Rational> {
    Mat::from_fn(rows, cols, |_, _| int(rng.gen_range(-3..=3)))
}

fn random_head(rng: &mut ChaCha8Rng, n: usize, p: usize, d: usize, m: usize) -> AttentionHead<Rational> {
    AttentionHead::new(
        random_mat(rng, d, n),
        random_mat(rng, d, p),
        random_mat(rng, d, n),
        random_mat(rng, d, p),
        random_mat(rng, m, n),
        random_mat(rng, m, p),
        Activation::Relu,
        false,
    )
    .expect("consistent shapes")
}

/// Random small-integer ReLU encoder mapping `n x p` to `n x p`.
pub fn random_encoder(t: usize, n: usize, p: usize, heads: usize, seed: u64) -> Vec<EncoderBlock<Rational>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, m, hidden) = (2, 1, 3);
    (0..t)
        .map(|_| {
            let hs = (0..heads).map(|_| random_head(&mut rng, n, p, d, m)).collect();
            let ffn = FeedForwardNet::new(vec![
                crate::transformer::AffineLayer::new(random_mat(&mut rng, hidden, heads * m), random_mat(&mut rng, hidden, 1))
                    .expect("bias shape"),
                crate::transformer::AffineLayer::new(random_mat(&mut rng, n, hidden), random_mat(&mut rng, n, 1))
                    .expect("bias shape"),
            ])
            .expect("chain");
            EncoderBlock::new(MultiheadAttention::new(hs).expect("heads"), ffn, false).expect("block")
        })
        .collect()
}

/// Random single ReLU head on `n x p` inputs.
pub fn random_head_model(n: usize, p: usize, seed: u64) -> AttentionHead<Rational> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_head(&mut rng, n, p, 2, 1)
}
