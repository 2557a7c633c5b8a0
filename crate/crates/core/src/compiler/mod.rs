//! Explicit encoder weights for splines.
//!
//! The pipeline is: an encoder producing every needed monomial of `X` in a
//! block-diagonal layout, two extra constant-row heads per output row, then
//! the max–min forms of the spline read off those monomials by a ReLU
//! network, split into attention blocks one hidden layer at a time.

pub mod heads;
pub mod linear_spline;
mod veronese_encoder;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::scalar::{Rational, Scalar};
use crate::spline::{Monomial, PBForm, Polynomial, SplineGrid};
use crate::tensor::Mat;
use crate::transformer::{eval_encoder, AffineLayer, AttentionHead, EncoderBlock, FeedForwardNet, MultiheadAttention};

pub use heads::{
    build_const_head, build_const_row_head, build_copy_head, build_quadratic_head, ffn_block_form, linear_ffn,
    with_residual,
};
pub use linear_spline::{affine_poly, input_var, linear_spline_to_ffn};

/// Default cap on rows or heads of any faithful intermediate stage.
pub const DEFAULT_ROW_CAP: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Faithful,
    Pruned,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Faithful => "faithful",
            Mode::Pruned => "pruned",
        }
    }

    /// Pruned once faithful stages start to blow up.
    pub fn default_for(s: usize, p: usize) -> Mode {
        if s >= 3 || p >= 2 {
            Mode::Pruned
        } else {
            Mode::Faithful
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "faithful" => Ok(Mode::Faithful),
            "pruned" => Ok(Mode::Pruned),
            other => Err(Error::Parse(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompileOptions {
    /// `None` picks [`Mode::default_for`].
    pub mode: Option<Mode>,
    pub masked: bool,
    pub residual: bool,
    pub row_cap: usize,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            mode: None,
            masked: false,
            residual: false,
            row_cap: DEFAULT_ROW_CAP,
        }
    }
}

impl CompileOptions {
    pub fn faithful() -> Self {
        CompileOptions {
            mode: Some(Mode::Faithful),
            ..Self::default()
        }
    }

    pub fn pruned() -> Self {
        CompileOptions {
            mode: Some(Mode::Pruned),
            ..Self::default()
        }
    }

    pub fn masked(mut self, masked: bool) -> Self {
        self.masked = masked;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub monomial: Monomial,
    pub column: usize,
    pub row: usize,
}

/// Where each `(monomial, column)` pair lives. Rows and columns are 0-based.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonomialLayout {
    entries: Vec<LayoutEntry>,
    rows: usize,
    index: HashMap<(Monomial, usize), usize>,
}

impl MonomialLayout {
    pub fn new(rows: usize) -> Self {
        MonomialLayout {
            entries: Vec::new(),
            rows,
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, monomial: Monomial, column: usize, row: usize) -> Result<()> {
        if row >= self.rows {
            return Err(Error::IndexOutOfRange {
                what: "layout row",
                index: row,
                bound: self.rows,
            });
        }
        if self.index.insert((monomial.clone(), column), row).is_some() {
            return Err(Error::InvalidParameters(format!("duplicate layout entry {monomial} in column {}", column + 1)));
        }
        self.entries.push(LayoutEntry { monomial, column, row });
        Ok(())
    }

    pub fn row(&self, m: &Monomial, column: usize) -> Option<usize> {
        self.index.get(&(m.clone(), column)).copied()
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether `row -> (monomial, column)` is one-to-one.
    pub fn is_injective(&self) -> bool {
        let rows: BTreeSet<usize> = self.entries.iter().map(|e| e.row).collect();
        rows.len() == self.entries.len()
    }
}

/// Attention heads with a linear readout, before conversion to a block.
#[derive(Clone, Debug)]
pub(crate) struct RawBlock {
    pub heads: Vec<AttentionHead<Rational>>,
    /// `out_rows x heads`.
    pub readout: Mat<Rational>,
    pub tag: String,
}

impl RawBlock {
    fn into_block(self) -> Result<(EncoderBlock<Rational>, String)> {
        let block = EncoderBlock::new(MultiheadAttention::new(self.heads)?, linear_ffn(&self.readout), false)?;
        Ok((block, self.tag))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub blocks: usize,
    pub heads: Vec<usize>,
    pub rows: Vec<usize>,
    pub hidden_units: Vec<usize>,
    pub depth: usize,
}

#[derive(Clone, Debug)]
pub struct CompiledEncoder {
    pub blocks: Vec<EncoderBlock<Rational>>,
    /// Layout of the monomial rows; for a compiled spline these rows sit
    /// after `layout_offset` constant rows in the last block's FFN input.
    pub layout: MonomialLayout,
    pub layout_offset: usize,
    pub provenance: Vec<String>,
    pub mode: Mode,
    pub stages: usize,
    pub n: usize,
    pub p: usize,
    pub masked: bool,
}

impl CompiledEncoder {
    pub fn eval(&self, x: &Mat<Rational>) -> Result<Mat<Rational>> {
        eval_encoder(&self.blocks, x)
    }

    pub fn stats(&self) -> Stats {
        Stats {
            blocks: self.blocks.len(),
            heads: self.blocks.iter().map(|b| b.attn.heads.len()).collect(),
            rows: self.blocks.iter().map(EncoderBlock::out_rows).collect(),
            hidden_units: self
                .blocks
                .iter()
                .map(|b| b.ffn.layers[..b.ffn.layers.len() - 1].iter().map(AffineLayer::out_dim).sum())
                .collect(),
            depth: self.blocks.len(),
        }
    }

    pub fn weights_json(&self) -> Value {
        json!({ "blocks": serde_json::to_value(&self.blocks).expect("weights serialize") })
    }

    /// Sidecar with 1-based rows and columns.
    pub fn layout_json(&self) -> Value {
        json!({
            "rows": self.layout.entries().iter().map(|e| json!({
                "monomial": e.monomial.to_json(),
                "column": e.column + 1,
                "row": self.layout_offset + e.row + 1,
            })).collect::<Vec<_>>(),
            "mode": self.mode.name(),
            "stages": self.stages,
            "provenance": self.provenance,
        })
    }
}

fn finish_blocks(raw: Vec<RawBlock>) -> Result<(Vec<EncoderBlock<Rational>>, Vec<String>)> {
    raw.into_iter().map(RawBlock::into_block).collect::<Result<Vec<_>>>().map(|v| v.into_iter().unzip())
}

fn apply_residual(blocks: Vec<EncoderBlock<Rational>>, p: usize) -> Result<Vec<EncoderBlock<Rational>>> {
    blocks
        .into_iter()
        .map(|b| if b.in_rows() == b.out_rows() { with_residual(&b, p) } else { Ok(b) })
        .collect()
}

fn check_dims(n: usize, p: usize) -> Result<()> {
    if n == 0 || p == 0 {
        return Err(Error::EmptyShape((n, p)));
    }
    Ok(())
}

/// The two-block encoder whose output carries `v_2(X)` once per column.
pub fn build_eps2(n: usize, p: usize, opts: &CompileOptions) -> Result<CompiledEncoder> {
    let opts = CompileOptions {
        mode: Some(opts.mode.unwrap_or(Mode::Faithful)),
        ..opts.clone()
    };
    build_veronese_encoder(n, p, 2, &opts)
}

/// Encoder whose output holds every monomial of degree `<= s` in each
/// column, at the rows given by its layout.
pub fn build_veronese_encoder(n: usize, p: usize, s: usize, opts: &CompileOptions) -> Result<CompiledEncoder> {
    check_dims(n, p)?;
    if s == 0 {
        return Err(Error::InvalidParameters("Veronese degree must be at least 1".into()));
    }
    let mode = opts.mode.unwrap_or_else(|| Mode::default_for(s, p));
    let build = match mode {
        Mode::Faithful => veronese_encoder::build_faithful(n, p, s, opts)?,
        Mode::Pruned => {
            let targets = veronese_encoder::all_targets(n, p, s, opts.masked);
            veronese_encoder::build_pruned(n, p, s, &targets, opts)?
        }
    };
    let (mut blocks, provenance) = finish_blocks(build.blocks)?;
    if opts.residual {
        blocks = apply_residual(blocks, p)?;
    }
    Ok(CompiledEncoder {
        blocks,
        layout: build.layout,
        layout_offset: 0,
        provenance,
        mode: build.mode,
        stages: build.stages,
        n,
        p,
        masked: opts.masked,
    })
}

/// Compiles an `r x p` grid of max–min forms over `n x p` inputs.
pub fn compile_spline(f: &SplineGrid, opts: &CompileOptions) -> Result<CompiledEncoder> {
    let (n, p, r) = (f.n, f.p, f.r());
    check_dims(n, p)?;
    if opts.masked {
        if let Some((column, var)) = f.autoregressive_violation() {
            return Err(Error::NotAutoregressive {
                column: column + 1,
                var: var.to_string(),
            });
        }
    }
    let s = (f.degree() as usize).max(1);
    let mode = opts.mode.unwrap_or_else(|| Mode::default_for(s, p));

    // monomials each output column reads
    let mut targets: Vec<BTreeSet<Monomial>> = vec![BTreeSet::new(); p];
    for row in f.cells() {
        for (j, form) in row.iter().enumerate() {
            for q in form.polys() {
                targets[j].extend(q.monomials().filter(|m| !m.is_one()).cloned());
            }
        }
    }
    let mut build = match mode {
        Mode::Faithful => veronese_encoder::build_faithful(n, p, s, opts)?,
        Mode::Pruned => veronese_encoder::build_pruned(n, p, s, &targets, opts)?,
    };
    let last = build.blocks.pop().expect("at least one block");

    // rows of the last readout that the linear spline reads
    let mut selected: Vec<usize> = Vec::new();
    let mut sel_index: HashMap<(Monomial, usize), usize> = HashMap::new();
    for (j, set) in targets.iter().enumerate() {
        for m in set {
            let row = build
                .layout
                .row(m, j)
                .ok_or_else(|| Error::InvalidParameters(format!("monomial {m} missing from column {}", j + 1)))?;
            sel_index.insert((m.clone(), j), selected.len());
            selected.push(row);
        }
    }
    let l = selected.len();
    let h = last.heads.len();
    let base = 2 * r;

    // ℓ_j as forms over inputs (x, x', selected monomial rows)
    let translate = |q: &Polynomial, j: usize| -> Polynomial {
        let coef: Vec<(usize, Rational)> = q
            .terms()
            .iter()
            .filter(|(m, _)| !m.is_one())
            .map(|(m, c)| (base + sel_index[&(m.clone(), j)], c.clone()))
            .collect();
        affine_poly(&coef, q.constant_term())
    };
    let mut ell: Vec<Vec<PBForm>> = Vec::with_capacity(p);
    for j in 0..p {
        let col = (0..r)
            .map(|i| {
                let form = f.cell(i, j);
                PBForm::new(form.rows().iter().map(|row| row.iter().map(|q| translate(q, j)).collect()).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        ell.push(col);
    }

    // ℓ_j(0) and the constant rows b, b' that cancel them off the diagonal
    let zero_in = Mat::<Rational>::zeros(base + l, 1);
    let at_zero: Vec<Vec<Rational>> = ell
        .iter()
        .map(|col| col.iter().map(|form| form.eval(&zero_in)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut b = vec![vec![Rational::zero(); p]; r];
    let mut b_prime = vec![vec![Rational::zero(); p]; r];
    for i in 0..r {
        for c in 0..p {
            let off: Rational = (0..p).filter(|&j| j != c).fold(Rational::zero(), |acc, j| acc + at_zero[j][i].clone());
            b[i][c] = (-off.clone()).relu();
            b_prime[i][c] = off.relu();
        }
    }

    let n_in = last.heads[0].n();
    let mut heads = Vec::with_capacity(base + h);
    for values in b.iter().chain(&b_prime) {
        heads.push(build_const_row_head(values, n_in)?);
    }
    heads.extend(last.heads);
    let heads = heads::set_masked(heads, opts.masked);

    // keep the constant rows (nonnegative, so one relu each) and the selected
    // monomial rows (as relu(v) - relu(-v))
    let a1 = Mat::from_fn(base + 2 * l, base + h, |row, c| {
        if row < base {
            if c == row {
                Rational::one()
            } else {
                Rational::zero()
            }
        } else if c < base {
            Rational::zero()
        } else {
            let k = (row - base) % l.max(1);
            let v = last.readout.get(selected[k], c - base).clone();
            if row - base < l {
                v
            } else {
                -v
            }
        }
    });
    let a2 = Mat::from_fn(base + l, base + 2 * l, |row, c| {
        if row < base {
            if c == row {
                Rational::one()
            } else {
                Rational::zero()
            }
        } else if c == row {
            Rational::one()
        } else if c == row + l {
            -Rational::one()
        } else {
            Rational::zero()
        }
    });
    let keep = FeedForwardNet::new(vec![AffineLayer::linear(a1), AffineLayer::linear(a2)])?;

    let mut forms: Vec<PBForm> = (0..base).map(|k| PBForm::poly(input_var(k))).collect();
    forms.extend(ell.into_iter().flatten());
    let spline_net = linear_spline_to_ffn(&forms, base + l)?;
    // y - y' + y_1 + ... + y_p
    let psi = Mat::from_fn(r, r * (p + 2), |i, c| {
        if c % r != i {
            Rational::zero()
        } else if c / r == 1 {
            -Rational::one()
        } else {
            Rational::one()
        }
    });
    let psi = FeedForwardNet::new(vec![AffineLayer::linear(psi)])?;
    let full = keep.then(&spline_net)?.then(&psi)?;
    let pieces = full.split_hidden_layers();

    let (mut blocks, mut provenance) = finish_blocks(build.blocks)?;
    let mut pieces = pieces.into_iter();
    let first = pieces.next().expect("at least one piece");
    blocks.push(EncoderBlock::new(MultiheadAttention::new(heads)?, first, false)?);
    provenance.push(format!("{}; constant rows and linear spline, hidden layer 1", last.tag));
    for (k, piece) in pieces.enumerate() {
        let rows = piece.in_dim();
        blocks.push(ffn_block_form(&piece, rows, p, opts.masked)?);
        provenance.push(format!("linear spline hidden layer {} as an attention block", k + 2));
    }
    if opts.residual {
        blocks = apply_residual(blocks, p)?;
    }
    build.layout = {
        let mut kept = MonomialLayout::new(l);
        for (j, set) in targets.iter().enumerate() {
            for m in set {
                kept.insert(m.clone(), j, sel_index[&(m.clone(), j)])?;
            }
        }
        kept
    };
    Ok(CompiledEncoder {
        blocks,
        layout: build.layout,
        layout_offset: base,
        provenance,
        mode: build.mode,
        stages: build.stages,
        n,
        p,
        masked: opts.masked,
    })
}

/// [`compile_spline`] with every head masked. Fails if some output column
/// reads a later input column.
pub fn compile_autoregressive(f: &SplineGrid, opts: &CompileOptions) -> Result<CompiledEncoder> {
    let opts = CompileOptions {
        masked: true,
        ..opts.clone()
    };
    compile_spline(f, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::int;
    use crate::spline::{normalize_to_pbform, MaxDefExpr, Var};

    fn scalar_grid(e: MaxDefExpr, n: usize) -> SplineGrid {
        SplineGrid::scalar(n, normalize_to_pbform(&e).unwrap()).unwrap()
    }

    fn col(vals: &[i64]) -> Mat<Rational> {
        Mat::column(vals.iter().map(|&v| int(v)).collect()).unwrap()
    }

    #[test]
    fn eps2_examples() {
        let e = build_eps2(2, 1, &CompileOptions::faithful()).unwrap();
        assert_eq!(e.blocks.len(), 2);
        assert_eq!(e.blocks[0].attn.heads.len(), 2 + 1);
        let out = e.eval(&col(&[1, 2])).unwrap();
        let vals: Vec<_> = e.layout.entries().iter().map(|en| out.get(en.row, en.column).clone()).collect();
        assert_eq!(vals, [1, 1, 2, 1, 2, 4].map(int));

        let e = build_eps2(1, 2, &CompileOptions::faithful()).unwrap();
        let x = Mat::from_rows(vec![vec![int(3), int(-1)]]).unwrap();
        let out = e.eval(&x).unwrap();
        for j in 0..2 {
            let vals: Vec<_> =
                e.layout.entries().iter().filter(|en| en.column == j).map(|en| out.get(en.row, j).clone()).collect();
            assert_eq!(vals, [1, 3, -1, 9, -3, 1].map(int));
        }
    }

    #[test]
    fn veronese_degree_four_scalar() {
        for opts in [CompileOptions::faithful(), CompileOptions::pruned()] {
            let e = build_veronese_encoder(1, 1, 4, &opts).unwrap();
            let out = e.eval(&col(&[2])).unwrap();
            let vals: Vec<_> = e.layout.entries().iter().map(|en| out.get(en.row, 0).clone()).collect();
            assert_eq!(vals, [1, 2, 4, 8, 16].map(int), "{:?}", opts.mode);
        }
    }

    #[test]
    fn compile_square() {
        let x = MaxDefExpr::var(0, 0);
        let g = scalar_grid(MaxDefExpr::mul2(x.clone(), x), 1);
        for opts in [CompileOptions::faithful(), CompileOptions::pruned(), CompileOptions::default()] {
            let c = compile_spline(&g, &opts).unwrap();
            for v in -5..=5 {
                assert_eq!(c.eval(&col(&[v])).unwrap(), col(&[v * v]));
            }
        }
    }

    #[test]
    fn compile_identity_and_abs() {
        let x = MaxDefExpr::var(0, 0);
        let id = compile_spline(&scalar_grid(x.clone(), 1), &CompileOptions::default()).unwrap();
        let abs = compile_spline(&scalar_grid(MaxDefExpr::max2(x.clone(), MaxDefExpr::neg(x)), 1), &CompileOptions::default()).unwrap();
        assert_eq!(abs.stages, 1);
        for v in -4..=4 {
            assert_eq!(id.eval(&col(&[v])).unwrap(), col(&[v]));
            assert_eq!(abs.eval(&col(&[v])).unwrap(), col(&[v.abs()]));
        }
    }

    #[test]
    fn compile_with_constants_off_diagonal() {
        // two columns with constant terms exercise b and b'
        let grid = SplineGrid::from_json(&json!({"n": 1, "p": 2, "grid": [[
            {"op": "sum", "args": [{"op": "var", "name": "x_1_1"}, {"op": "const", "value": "3"}]},
            {"op": "max", "args": [{"op": "var", "name": "x_1_2"}, {"op": "const", "value": "-5"}]}
        ]]}))
        .unwrap();
        for opts in [CompileOptions::pruned(), CompileOptions::faithful(), CompileOptions::pruned().masked(true)] {
            let c = compile_spline(&grid, &opts).unwrap();
            for (a, bv) in [(1, 2), (-4, -9), (0, 0), (7, -5)] {
                let x = Mat::from_rows(vec![vec![int(a), int(bv)]]).unwrap();
                assert_eq!(c.eval(&x).unwrap(), grid.eval(&x).unwrap());
            }
        }
    }

    #[test]
    fn masked_rejects_future_columns() {
        let grid = SplineGrid::from_json(&json!({"n": 1, "p": 2, "grid": [[
            {"op": "var", "name": "x_1_2"}, {"op": "var", "name": "x_1_2"}
        ]]}))
        .unwrap();
        match compile_autoregressive(&grid, &CompileOptions::default()) {
            Err(Error::NotAutoregressive { column, var }) => {
                assert_eq!(column, 1);
                assert_eq!(var, Var::new(0, 1).to_string());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn residual_option_keeps_function() {
        let x = MaxDefExpr::var(0, 0);
        let g = scalar_grid(MaxDefExpr::max2(MaxDefExpr::mul2(x.clone(), x.clone()), x), 1);
        let opts = CompileOptions {
            residual: true,
            ..CompileOptions::pruned()
        };
        let c = compile_spline(&g, &opts).unwrap();
        for v in -4..=4 {
            assert_eq!(c.eval(&col(&[v])).unwrap(), g.eval(&col(&[v])).unwrap());
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Faithful, Mode::Pruned] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!(Mode::default_for(2, 1), Mode::Faithful);
        assert_eq!(Mode::default_for(3, 1), Mode::Pruned);
        assert_eq!(Mode::default_for(1, 2), Mode::Pruned);
    }
}
