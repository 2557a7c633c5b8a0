//! Single heads with one output row, and the small FFN shapes the compiler
//! glues them with.

use crate::error::{Error, Result};
use crate::scalar::{Rational, Scalar};
use crate::tensor::{stack_rows, Mat};
use crate::transformer::{Activation, AffineLayer, AttentionHead, EncoderBlock, FeedForwardNet, MultiheadAttention};

fn check_index(what: &'static str, index: usize, bound: usize) -> Result<()> {
    if index >= bound {
        return Err(Error::IndexOutOfRange { what, index, bound });
    }
    Ok(())
}

fn head(
    a_q: Mat<Rational>,
    b_q: Mat<Rational>,
    a_v: Mat<Rational>,
    b_v: Mat<Rational>,
    b_k: Mat<Rational>,
    n: usize,
) -> AttentionHead<Rational> {
    AttentionHead {
        a_q,
        b_q,
        a_k: Mat::zeros(1, n),
        b_k,
        a_v,
        b_v,
        masked: false,
        activation: Activation::Relu,
        scaled: false,
    }
}

/// Head whose only nonzero output is `x[i_hat, j_hat]` at column `j`
/// (0-based indices).
pub fn build_copy_head(i_hat: usize, j_hat: usize, j: usize, n: usize, p: usize) -> Result<AttentionHead<Rational>> {
    check_index("copy head source row", i_hat, n)?;
    check_index("copy head source column", j_hat, p)?;
    check_index("copy head target column", j, p)?;
    Ok(head(
        Mat::zeros(1, n),
        Mat::basis(1, p, 0, j),
        Mat::basis(1, n, 0, i_hat),
        Mat::zeros(1, p),
        Mat::basis(1, p, 0, j_hat),
        n,
    ))
}

/// Head whose output row is 1 at column `j` and 0 elsewhere, for every input.
pub fn build_const_head(j: usize, n: usize, p: usize) -> Result<AttentionHead<Rational>> {
    check_index("constant head column", j, p)?;
    Ok(head(
        Mat::zeros(1, n),
        Mat::basis(1, p, 0, j),
        Mat::zeros(1, n),
        Mat::basis(1, p, 0, 0),
        Mat::basis(1, p, 0, 0),
        n,
    ))
}

/// Head producing `z[a, j] * relu(±z[b, c])` at column `c`. When row `b` is
/// nonzero only in column `j` this is the single entry `z[a,j] relu(±z[b,j])`.
pub fn build_quadratic_head(a: usize, b: usize, j: usize, positive: bool, n: usize, p: usize) -> Result<AttentionHead<Rational>> {
    check_index("quadratic head value row", a, n)?;
    check_index("quadratic head query row", b, n)?;
    check_index("quadratic head column", j, p)?;
    let sign = if positive { Rational::one() } else { -Rational::one() };
    Ok(head(
        Mat::basis(1, n, 0, b).scale(&sign),
        Mat::zeros(1, p),
        Mat::basis(1, n, 0, a),
        Mat::zeros(1, p),
        Mat::basis(1, p, 0, j),
        n,
    ))
}

/// Head whose output row is the given nonnegative constants.
pub fn build_const_row_head(values: &[Rational], n: usize) -> Result<AttentionHead<Rational>> {
    let p = values.len();
    if p == 0 {
        return Err(Error::Empty("constant row"));
    }
    if values.iter().any(|v| *v < Rational::zero()) {
        return Err(Error::InvalidParameters("constant row heads need nonnegative values".into()));
    }
    Ok(head(
        Mat::zeros(1, n),
        Mat::from_vec(1, p, values.to_vec())?,
        Mat::zeros(1, n),
        Mat::basis(1, p, 0, 0),
        Mat::basis(1, p, 0, 0),
        n,
    ))
}

pub(crate) fn set_masked(mut heads: Vec<AttentionHead<Rational>>, masked: bool) -> Vec<AttentionHead<Rational>> {
    for h in &mut heads {
        h.masked = masked;
    }
    heads
}

/// One-hidden-layer net computing `m · z` exactly: the inputs `m` reads are
/// split as `relu(z) - relu(-z)`.
pub fn linear_ffn(m: &Mat<Rational>) -> FeedForwardNet<Rational> {
    let used: Vec<usize> = (0..m.cols()).filter(|&c| (0..m.rows()).any(|r| !m.get(r, c).is_zero())).collect();
    let used = if used.is_empty() { vec![0] } else { used };
    let k = used.len();
    let select = Mat::from_fn(k, m.cols(), |r, c| if used[r] == c { Rational::one() } else { Rational::zero() });
    let first = stack_rows(&[select.clone(), select.scale(&-Rational::one())]).expect("same width");
    let second = Mat::from_fn(m.rows(), 2 * k, |r, c| {
        if c < k {
            m.get(r, used[c]).clone()
        } else {
            -m.get(r, used[c - k]).clone()
        }
    });
    FeedForwardNet {
        layers: vec![AffineLayer::linear(first), AffineLayer::linear(second)],
    }
}

/// `[I_n I_n ... I_n]`, summing the `p` diagonal blocks back into `n` rows.
fn column_sum(n: usize, p: usize) -> Mat<Rational> {
    Mat::from_fn(n, n * p, |r, c| if c % n == r { Rational::one() } else { Rational::zero() })
}

/// Block-diagonal copy heads `(i, j, j)`, ordered by column then row.
fn diagonal_copy_heads(n: usize, p: usize) -> Vec<AttentionHead<Rational>> {
    (0..p)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .map(|(i, j)| build_copy_head(i, j, j, n, p).expect("indices in range"))
        .collect()
}

/// Rewrites a one-hidden-layer net, applied columnwise, as attention followed
/// by a one-hidden-layer net.
pub fn ffn_block_form(phi: &FeedForwardNet<Rational>, n: usize, p: usize, masked: bool) -> Result<EncoderBlock<Rational>> {
    phi.validate()?;
    if phi.hidden_layers() != 1 {
        return Err(Error::HiddenLayers(phi.hidden_layers()));
    }
    if phi.in_dim() != n {
        return Err(Error::shape("block form input", (n, p), (phi.in_dim(), p)));
    }
    let heads = set_masked(diagonal_copy_heads(n, p), masked);
    let psi = AffineLayer::linear(column_sum(n, p));
    let mut layers = phi.layers.clone();
    layers[0] = layers[0].compose(&psi)?;
    EncoderBlock::new(MultiheadAttention::new(heads)?, FeedForwardNet::new(layers)?, false)
}

/// Turns on the residual connection of a block whose output has as many rows
/// as its input, compensating so the block computes the same function.
pub fn with_residual(block: &EncoderBlock<Rational>, p: usize) -> Result<EncoderBlock<Rational>> {
    let n = block.in_rows();
    if block.out_rows() != n {
        return Err(Error::shape("residual block", (n, p), (block.out_rows(), p)));
    }
    if block.ffn.layers.len() == 1 {
        // the old net is affine; route its value through relu(v) - relu(-v)
        let lifted = EncoderBlock::new(block.attn.clone(), linear_ffn_affine(&block.ffn.layers[0])?, false)?;
        return with_residual(&lifted, p);
    }
    let masked = block.attn.is_masked();
    let h0 = block.attn.out_rows();
    let mut heads = block.attn.heads.clone();
    heads.extend(set_masked(diagonal_copy_heads(n, p), masked));
    let h = heads.len();
    let psi = column_sum(n, p);

    // hidden: old units on the old heads, then relu(Ψ z) and relu(-Ψ z)
    let first = &block.ffn.layers[0];
    let hidden_old = first.out_dim();
    let a1 = Mat::from_fn(hidden_old + 2 * n, h, |r, c| {
        if r < hidden_old {
            if c < h0 {
                first.a.get(r, c).clone()
            } else {
                Rational::zero()
            }
        } else if c >= h0 {
            let v = psi.get((r - hidden_old) % n, c - h0).clone();
            if r - hidden_old < n {
                v
            } else {
                -v
            }
        } else {
            Rational::zero()
        }
    });
    let b1 = Mat::from_fn(hidden_old + 2 * n, 1, |r, _| {
        if r < hidden_old {
            first.b.get(r, 0).clone()
        } else {
            Rational::zero()
        }
    });

    let mut layers = vec![AffineLayer::new(a1, b1)?];
    // carry the extra units alongside any further hidden layers
    let carried = 2 * n;
    let last = block.ffn.layers.len() - 1;
    for (k, l) in block.ffn.layers.iter().enumerate().skip(1) {
        let (r0, c0) = (l.out_dim(), l.in_dim());
        if k < last {
            let a = Mat::from_fn(r0 + carried, c0 + carried, |r, c| {
                if r < r0 && c < c0 {
                    l.a.get(r, c).clone()
                } else if r >= r0 && c >= c0 && r - r0 == c - c0 {
                    Rational::one()
                } else {
                    Rational::zero()
                }
            });
            let b = Mat::from_fn(r0 + carried, 1, |r, _| if r < r0 { l.b.get(r, 0).clone() } else { Rational::zero() });
            layers.push(AffineLayer::new(a, b)?);
        } else {
            // subtract the input: out = old - (relu(Ψz) - relu(-Ψz))
            let a = Mat::from_fn(r0, c0 + carried, |r, c| {
                if c < c0 {
                    l.a.get(r, c).clone()
                } else if (c - c0) % n == r {
                    if c - c0 < n {
                        -Rational::one()
                    } else {
                        Rational::one()
                    }
                } else {
                    Rational::zero()
                }
            });
            layers.push(AffineLayer::new(a, l.b.clone())?);
        }
    }
    EncoderBlock::new(MultiheadAttention::new(heads)?, FeedForwardNet::new(layers)?, true)
}

/// One-hidden-layer net equal to an affine layer.
fn linear_ffn_affine(l: &AffineLayer<Rational>) -> Result<FeedForwardNet<Rational>> {
    let mut net = linear_ffn(&l.a);
    let last = net.layers.len() - 1;
    net.layers[last].b = l.b.clone();
    net.validate()?;
    Ok(net)
}
