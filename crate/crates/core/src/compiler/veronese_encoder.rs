//! Encoders whose output holds every needed monomial of `X` once per column,
//! each in a row that is nonzero only in that column.

use std::collections::{BTreeSet, HashMap};

use super::heads::{build_const_head, build_copy_head, build_quadratic_head, set_masked};
use super::{CompileOptions, MonomialLayout, Mode, RawBlock};
use crate::error::{Error, Result};
use crate::scalar::{Rational, Scalar};
use crate::spline::{Monomial, Var};
use crate::tensor::Mat;
use crate::transformer::AttentionHead;
use crate::veronese::{graded_monomials, greedy_factors, row_major_vars, veronese_dim, VeroneseIndex};

/// Built blocks before they are turned into encoder blocks.
pub(crate) struct VeroneseBuild {
    pub blocks: Vec<RawBlock>,
    pub layout: MonomialLayout,
    pub stages: usize,
    pub mode: Mode,
}

/// Heads plus, for each output row, the heads it sums with coefficients.
struct BlockBuilder {
    heads: Vec<AttentionHead<Rational>>,
    rows: Vec<Vec<(usize, i64)>>,
}

impl BlockBuilder {
    fn new() -> Self {
        BlockBuilder {
            heads: Vec::new(),
            rows: Vec::new(),
        }
    }

    fn head(&mut self, h: AttentionHead<Rational>) -> usize {
        self.heads.push(h);
        self.heads.len() - 1
    }

    fn row(&mut self, terms: Vec<(usize, i64)>) -> usize {
        self.rows.push(terms);
        self.rows.len() - 1
    }

    fn finish(self, masked: bool, tag: String) -> RawBlock {
        let h = self.heads.len();
        let mut readout = Mat::zeros(self.rows.len(), h);
        for (r, terms) in self.rows.iter().enumerate() {
            for &(k, c) in terms {
                readout.set(r, k, Rational::from_i64(c));
            }
        }
        RawBlock {
            heads: set_masked(self.heads, masked),
            readout,
            tag,
        }
    }
}

fn allowed(m: &Monomial, j: usize, masked: bool) -> bool {
    !masked || m.max_col().is_none_or(|c| c <= j)
}

fn graded_key(m: &Monomial) -> (u32, Vec<Var>) {
    (m.degree(), m.var_list())
}

fn ceil_log2(s: usize) -> usize {
    let mut t = 0;
    while (1usize << t) < s {
        t += 1;
    }
    t
}

/// The two blocks of the quadratic construction on an `n_in x p` input, and
/// the position of every monomial of degree `<= 2` of that input.
struct Eps2 {
    first: RawBlock,
    second: RawBlock,
    index: VeroneseIndex,
    n_in: usize,
    p: usize,
}

impl Eps2 {
    fn block_len(&self) -> usize {
        self.index.len()
    }

    /// Row of `m` (a monomial of the stage input) in column `j`'s block.
    fn row(&self, m: &Monomial, j: usize) -> usize {
        j * self.block_len() + self.index.position(m).expect("degree <= 2")
    }

    fn out_rows(&self) -> usize {
        self.p * self.block_len()
    }
}

fn build_eps2_raw(n_in: usize, p: usize, masked: bool, stage: usize) -> Result<Eps2> {
    let d1 = n_in * p + 1;
    let copy_index = |i: usize, jh: usize, j: usize| (i * p + jh) * p + j;

    // entries x_{îĵ} into every column, then the constant 1
    let mut a = BlockBuilder::new();
    for i in 0..n_in {
        for jh in 0..p {
            for j in 0..p {
                a.head(build_copy_head(i, jh, j, n_in, p)?);
            }
        }
    }
    for j in 0..p {
        a.head(build_const_head(j, n_in, p)?);
    }
    for j in 0..p {
        a.row(vec![(n_in * p * p + j, 1)]);
        for i in 0..n_in {
            for jh in 0..p {
                a.row(vec![(copy_index(i, jh, j), 1)]);
            }
        }
    }
    let first = a.finish(masked, format!("stage {stage}: entries and constant in every column"));

    // on the block-diagonal v1 layout: entries, constant, and z_a relu(±z_b)
    let n1 = p * d1;
    let mut b = BlockBuilder::new();
    for i in 0..n_in {
        for jh in 0..p {
            for j in 0..p {
                b.head(build_copy_head(j * d1 + 1 + i * p + jh, j, j, n1, p)?);
            }
        }
    }
    for j in 0..p {
        b.head(build_const_head(j, n1, p)?);
    }
    let plus_base = b.heads.len();
    for positive in [true, false] {
        for j in 0..p {
            for ra in 0..d1 {
                for rb in 0..d1 {
                    b.head(build_quadratic_head(j * d1 + ra, j * d1 + rb, j, positive, n1, p)?);
                }
            }
        }
    }
    let minus_base = plus_base + p * d1 * d1;
    let quad = |base: usize, j: usize, ra: usize, rb: usize| base + (j * d1 + ra) * d1 + rb;

    let vars = row_major_vars(n_in, p);
    let var_pos: HashMap<Var, usize> = vars.iter().enumerate().map(|(k, v)| (*v, k)).collect();
    let index = VeroneseIndex::new(n_in, p, 2)?;
    for j in 0..p {
        for m in index.monomials() {
            let vl = m.var_list();
            let terms = match vl.as_slice() {
                [] => vec![(n_in * p * p + j, 1)],
                [v] => vec![(copy_index(v.row, v.col, j), 1)],
                [u, w] => {
                    let (ra, rb) = (1 + var_pos[u], 1 + var_pos[w]);
                    vec![(quad(plus_base, j, ra, rb), 1), (quad(minus_base, j, ra, rb), -1)]
                }
                _ => unreachable!("degree <= 2"),
            };
            b.row(terms);
        }
    }
    let second = b.finish(masked, format!("stage {stage}: quadratic monomials"));
    Ok(Eps2 {
        first,
        second,
        index,
        n_in,
        p,
    })
}

/// Predicted `(largest row or head count, parameter entries)` of the faithful
/// construction for `stages` chained copies.
fn faithful_cost(n: usize, p: usize, stages: usize) -> (u128, u128) {
    let (p128, mut n_in) = (p as u128, n as u128);
    let mut worst = 0u128;
    let mut params = 0u128;
    for _ in 0..stages {
        let d1 = n_in * p128 + 1;
        let heads_a = n_in * p128 * p128 + p128;
        let heads_b = heads_a + 2 * p128 * d1 * d1;
        let rows_out = p128 * veronese_dim((n_in * p128) as usize, 2);
        worst = worst.max(heads_a).max(heads_b).max(p128 * d1).max(rows_out);
        params = params.saturating_add(heads_a * n_in).saturating_add(heads_b * p128 * d1);
        n_in = rows_out;
    }
    (worst, params)
}

pub(crate) fn build_faithful(n: usize, p: usize, s: usize, opts: &CompileOptions) -> Result<VeroneseBuild> {
    let stages = ceil_log2(s);
    let masked = opts.masked;
    let (worst, params) = faithful_cost(n, p, stages.max(1));
    let cap = opts.row_cap as u128;
    let clamp = |v: u128| v.min(usize::MAX as u128) as usize;
    if worst > cap {
        return Err(Error::ResourceCap {
            what: "intermediate rows or heads",
            needed: clamp(worst),
            cap: opts.row_cap,
        });
    }
    if params > cap.saturating_mul(50) {
        return Err(Error::ResourceCap {
            what: "parameters",
            needed: clamp(params),
            cap: clamp(cap.saturating_mul(50)),
        });
    }
    let xvars = row_major_vars(n, p);

    if stages == 0 {
        let e = build_eps2_raw(n, p, masked, 1)?;
        let d1 = n * p + 1;
        let mut layout = MonomialLayout::new(p * d1);
        for j in 0..p {
            layout.insert(Monomial::one(), j, j * d1)?;
            for (k, v) in xvars.iter().enumerate() {
                let m = Monomial::var(*v);
                if allowed(&m, j, masked) {
                    layout.insert(m, j, j * d1 + 1 + k)?;
                }
            }
        }
        return Ok(VeroneseBuild {
            blocks: vec![e.first],
            layout,
            stages: 1,
            mode: Mode::Faithful,
        });
    }

    let mut blocks = Vec::new();
    // (X-monomial, column) -> row of the current stage output
    let mut pos: HashMap<(Monomial, usize), usize> = HashMap::new();
    let mut n_in = n;
    let mut rows_out = 0;
    for t in 1..=stages {
        let e = build_eps2_raw(n_in, p, masked, t)?;
        let max_deg = if t == stages { s } else { 1 << t };
        let half = 1usize << (t - 1);
        let mut next = HashMap::new();
        for m in graded_monomials(&xvars, max_deg) {
            for j in 0..p {
                if !allowed(&m, j, masked) {
                    continue;
                }
                let zm = if t == 1 {
                    m.clone()
                } else {
                    let zvars: Vec<Var> = greedy_factors(&m, half)
                        .iter()
                        .map(|f| Var::new(pos[&(f.clone(), j)], j))
                        .collect();
                    Monomial::from_vars(&zvars)
                };
                next.insert((m.clone(), j), e.row(&zm, j));
            }
        }
        debug_assert_eq!(e.n_in, n_in);
        pos = next;
        n_in = e.out_rows();
        rows_out = n_in;
        blocks.push(e.first);
        blocks.push(e.second);
    }
    let mut layout = MonomialLayout::new(rows_out);
    let mut entries: Vec<_> = pos.into_iter().collect();
    entries.sort_by_key(|((m, j), _)| (*j, graded_key(m)));
    for ((m, j), r) in entries {
        layout.insert(m, j, r)?;
    }
    Ok(VeroneseBuild {
        blocks,
        layout,
        stages,
        mode: Mode::Faithful,
    })
}

/// Only the monomials in `targets[j]` (plus the constant) are produced, each
/// built from two factors of the previous stage.
pub(crate) fn build_pruned(n: usize, p: usize, s: usize, targets: &[BTreeSet<Monomial>], opts: &CompileOptions) -> Result<VeroneseBuild> {
    let stages = ceil_log2(s);
    let masked = opts.masked;
    if targets.len() != p {
        return Err(Error::InvalidParameters(format!("expected {p} target sets, got {}", targets.len())));
    }
    for (j, set) in targets.iter().enumerate() {
        for m in set {
            m.check(n, p)?;
            if m.degree() as usize > s {
                return Err(Error::DegreeTooHigh {
                    max: s as u32,
                    found: m.degree(),
                });
            }
            if !allowed(m, j, masked) {
                return Err(Error::NotAutoregressive {
                    column: j + 1,
                    var: m.vars().find(|v| v.col > j).expect("violating variable").to_string(),
                });
            }
        }
    }

    // need[t][j]: monomials stage t must provide in column j
    let mut need: Vec<Vec<BTreeSet<Monomial>>> = vec![vec![BTreeSet::new(); p]; stages + 1];
    for j in 0..p {
        need[stages][j] = targets[j].clone();
        need[stages][j].insert(Monomial::one());
    }
    for t in (1..=stages).rev() {
        let half = 1usize << (t - 1);
        for j in 0..p {
            let mut below = BTreeSet::new();
            below.insert(Monomial::one());
            for m in &need[t][j] {
                if m.is_one() {
                    continue;
                }
                if m.degree() as usize <= half {
                    below.insert(m.clone());
                } else {
                    let vl = m.var_list();
                    below.insert(Monomial::from_vars(&vl[..half]));
                    below.insert(Monomial::from_vars(&vl[half..]));
                }
            }
            need[t - 1][j] = below;
        }
    }
    let sorted = |set: &BTreeSet<Monomial>| {
        let mut v: Vec<Monomial> = set.iter().cloned().collect();
        v.sort_by_key(graded_key);
        v
    };

    let mut blocks = Vec::new();
    let mut b = BlockBuilder::new();
    let mut pos: HashMap<(Monomial, usize), usize> = HashMap::new();
    for j in 0..p {
        for m in sorted(&need[0][j]) {
            let h = match m.var_list().as_slice() {
                [] => build_const_head(j, n, p)?,
                [v] => build_copy_head(v.row, v.col, j, n, p)?,
                _ => unreachable!("degree <= 1"),
            };
            let k = b.head(h);
            pos.insert((m, j), b.row(vec![(k, 1)]));
        }
    }
    let mut n_in = b.rows.len();
    blocks.push(b.finish(masked, "entries and constant in every column".into()));

    for t in 1..=stages {
        let half = 1usize << (t - 1);
        let mut b = BlockBuilder::new();
        let mut next = HashMap::new();
        for j in 0..p {
            for m in sorted(&need[t][j]) {
                let terms = if m.is_one() {
                    vec![(b.head(build_const_head(j, n_in, p)?), 1)]
                } else if m.degree() as usize <= half {
                    let src = pos[&(m.clone(), j)];
                    vec![(b.head(build_copy_head(src, j, j, n_in, p)?), 1)]
                } else {
                    let vl = m.var_list();
                    let ra = pos[&(Monomial::from_vars(&vl[..half]), j)];
                    let rb = pos[&(Monomial::from_vars(&vl[half..]), j)];
                    let plus = b.head(build_quadratic_head(ra, rb, j, true, n_in, p)?);
                    let minus = b.head(build_quadratic_head(ra, rb, j, false, n_in, p)?);
                    vec![(plus, 1), (minus, -1)]
                };
                next.insert((m, j), b.row(terms));
            }
        }
        n_in = b.rows.len();
        pos = next;
        blocks.push(b.finish(masked, format!("stage {t}: monomials up to degree {}", (1usize << t).min(s))));
    }

    let mut layout = MonomialLayout::new(n_in);
    let mut entries: Vec<_> = pos.into_iter().collect();
    entries.sort_by_key(|((m, j), r)| (*j, graded_key(m), *r));
    for ((m, j), r) in entries {
        layout.insert(m, j, r)?;
    }
    Ok(VeroneseBuild {
        blocks,
        layout,
        stages: stages.max(1),
        mode: Mode::Pruned,
    })
}

/// Every monomial of degree `<= s` allowed in each column.
pub(crate) fn all_targets(n: usize, p: usize, s: usize, masked: bool) -> Vec<BTreeSet<Monomial>> {
    let all = graded_monomials(&row_major_vars(n, p), s);
    (0..p)
        .map(|j| all.iter().filter(|m| allowed(m, j, masked)).cloned().collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log2_ceiling() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(4), 2);
        assert_eq!(ceil_log2(5), 3);
    }

    #[test]
    fn first_stage_head_count() {
        for (n, p) in [(1, 1), (1, 2), (2, 1), (2, 2), (3, 2)] {
            let e = build_eps2_raw(n, p, false, 1).unwrap();
            assert_eq!(e.first.heads.len(), n * p * p + p);
        }
    }

    #[test]
    fn faithful_guard_trips() {
        let opts = CompileOptions {
            row_cap: 100,
            ..CompileOptions::default()
        };
        assert!(matches!(build_faithful(2, 2, 4, &opts), Err(Error::ResourceCap { .. })));
    }
}
