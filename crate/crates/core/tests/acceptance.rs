//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits nonzero on any failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use splineformer::compiler::{
    build_eps2, compile_autoregressive, compile_spline, ffn_block_form, linear_spline_to_ffn, CompileOptions, Mode,
};
use splineformer::fixtures::{random_encoder, random_head_model, unit_encdec, unit_encoder, unit_scalar_head};
use splineformer::scalar::{int, ratio};
use splineformer::spline::{eval_pbform, normalize_to_pbform, MaxDefExpr, Monomial, PBForm, Polynomial, SplineGrid, Var};
use splineformer::tensor::{apply_mask, Mat};
use splineformer::transformer::{eval_attention, eval_ffn, AffineLayer, FeedForwardNet};
use splineformer::verifier::{
    autoregressive_check, encdec_degree_bound, estimate_degree, oracle_equiv, sample_matrices, smooth_convergence_table, stream_rng,
    to_float, EncDecModel, EncoderModel, TrialDegree,
};
use splineformer::veronese::veronese_dim;
use splineformer::Rational;

const SEED: u64 = 42;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, format!("took {elapsed:?}, limit {limit:?}"))
}

fn var(r: usize, c: usize) -> MaxDefExpr {
    MaxDefExpr::var(r, c)
}

fn grid(n: usize, p: usize, cells: Vec<Vec<MaxDefExpr>>) -> SplineGrid {
    let cells = cells
        .into_iter()
        .map(|r| r.into_iter().map(|e| normalize_to_pbform(&e).expect("normalizes")).collect())
        .collect();
    SplineGrid::new(n, p, cells).expect("grid")
}

fn cube_grid() -> SplineGrid {
    grid(1, 1, vec![vec![MaxDefExpr::Product(vec![var(0, 0), var(0, 0), var(0, 0)])]])
}

fn cubic_identity() -> Outcome {
    let start = Instant::now();
    let head = unit_scalar_head(false);
    for x in sample_matrices(SEED, 1000, 1, 1) {
        let v = x.get(0, 0).clone();
        let out = eval_attention(&head, &x).map_err(|e| e.to_string())?;
        ensure(*out.get(0, 0) == v.clone() * v.clone() * v.clone(), format!("head({v}) = {}", out.get(0, 0)))?;
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("1000 points exact in {:?}", start.elapsed()))
}

fn eps2_layout() -> Outcome {
    let start = Instant::now();
    for (n, p) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        let enc = build_eps2(n, p, &CompileOptions::faithful()).map_err(|e| e.to_string())?;
        ensure(enc.mode == Mode::Faithful, "mode")?;
        let heads = enc.blocks[0].attn.heads.len();
        ensure(heads == n * p * p + p, format!("({n},{p}): stage-1 heads {heads}"))?;
        let per_col = veronese_dim(n * p, 2) as usize;
        ensure(enc.layout.len() == p * per_col, format!("({n},{p}): layout size {}", enc.layout.len()))?;
        for x in sample_matrices(SEED, 100, n, p) {
            let out = enc.eval(&x).map_err(|e| e.to_string())?;
            ensure(out.cols() == p, "columns")?;
            let mut expected = Mat::<Rational>::zeros(out.rows(), p);
            for e in enc.layout.entries() {
                let v = e.monomial.eval(&x).map_err(|e| e.to_string())?;
                expected = Mat::from_fn(out.rows(), p, |r, c| if (r, c) == (e.row, e.column) { v.clone() } else { expected.get(r, c).clone() });
            }
            ensure(out == expected, format!("({n},{p}): output differs from block-diagonal v2 on {x:?}"))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("4 shapes x 100 samples exact, head counts np^2+p, {:?}", start.elapsed()))
}

fn spline_suite() -> Outcome {
    let start = Instant::now();
    let (x, y) = (var(0, 0), var(1, 0));
    let xy = MaxDefExpr::mul2(x.clone(), y.clone());
    // x³ = x²·max(x,0) + x²·min(x,0)
    let x2 = MaxDefExpr::mul2(x.clone(), x.clone());
    let cube_pb = MaxDefExpr::sum2(
        MaxDefExpr::mul2(x2.clone(), MaxDefExpr::max2(x.clone(), MaxDefExpr::int(0))),
        MaxDefExpr::mul2(x2.clone(), MaxDefExpr::min2(x.clone(), MaxDefExpr::int(0))),
    );
    let suite = [
        ("|x|", 1, MaxDefExpr::max2(x.clone(), MaxDefExpr::neg(x.clone()))),
        ("max(x,0)", 1, MaxDefExpr::max2(x.clone(), MaxDefExpr::int(0))),
        ("x^2", 1, x2.clone()),
        ("x^3", 1, cube_pb),
        ("max(xy,x+y)", 2, MaxDefExpr::max2(xy, MaxDefExpr::sum2(x.clone(), y.clone()))),
        ("min(x^2,y)", 2, MaxDefExpr::min2(x2, y)),
    ];
    for (name, n, e) in suite {
        let g = grid(n, 1, vec![vec![e]]);
        let c = compile_spline(&g, &CompileOptions::pruned()).map_err(|e| format!("{name}: {e}"))?;
        let r = oracle_equiv(&c, &g, 1000, SEED).map_err(|e| format!("{name}: {e}"))?;
        ensure(r.exact, format!("{name}: max error {}", r.max_abs_error))?;
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("6 splines x 1000 samples exact in {:?}", start.elapsed()))
}

fn autoregressive() -> Outcome {
    let x1 = var(0, 0);
    let x2 = var(0, 1);
    let prefix = grid(1, 2, vec![vec![x1.clone(), MaxDefExpr::mul2(x1.clone(), x2.clone())]]);
    let x3 = var(0, 2);
    let linear = grid(
        1,
        3,
        vec![vec![
            MaxDefExpr::sum2(MaxDefExpr::scale(int(2), x1.clone()), MaxDefExpr::int(1)),
            MaxDefExpr::sum2(x1.clone(), MaxDefExpr::neg(x2.clone())),
            MaxDefExpr::Sum(vec![x1, MaxDefExpr::scale(ratio(1, 2), x2), MaxDefExpr::scale(int(-3), x3)]),
        ]],
    );
    for (name, g) in [("[x1, x1 x2]", prefix), ("3-column linear", linear)] {
        let c = compile_autoregressive(&g, &CompileOptions::default()).map_err(|e| format!("{name}: {e}"))?;
        let ar = autoregressive_check::<Rational, _>(&c, 200, SEED).map_err(|e| format!("{name}: {e}"))?;
        ensure(ar.pass, format!("{name}: prefix witness {:?}", ar.witness))?;
        let eq = oracle_equiv(&c, &g, 500, SEED).map_err(|e| format!("{name}: {e}"))?;
        ensure(eq.exact, format!("{name}: max error {}", eq.max_abs_error))?;
    }
    Ok("2 masked encoders: 200 prefix trials, 500 samples exact".into())
}

fn degree_bounds() -> Outcome {
    let start = Instant::now();
    let exact = |d| TrialDegree { degree: d, saturated: false };
    let unit = estimate_degree(&unit_scalar_head(false), 5, 50, SEED, 3).map_err(|e| e.to_string())?;
    ensure(unit.modal == exact(3), format!("unit head modal {:?}", unit.modal))?;
    let random = estimate_degree(&random_head_model(2, 2, SEED), 5, 50, SEED, 3).map_err(|e| e.to_string())?;
    ensure(random.modal == exact(3), format!("random head modal {:?}", random.modal))?;
    let two = EncoderModel::new(random_encoder(2, 1, 2, 2, SEED)).map_err(|e| e.to_string())?;
    let two = estimate_degree(&two, 11, 50, SEED, 9).map_err(|e| e.to_string())?;
    ensure(two.bound_satisfied, format!("2-block encoder modal {:?}", two.modal))?;
    let ed = EncDecModel::new(unit_encdec()).map_err(|e| e.to_string())?;
    let bound = encdec_degree_bound(1, 1);
    let ed = estimate_degree(&ed, 11, 50, SEED, bound).map_err(|e| e.to_string())?;
    ensure(bound == 9 && ed.bound_satisfied, format!("encoder-decoder modal {:?}", ed.modal))?;
    // x^6 y^3 where xy > 0, zero elsewhere
    ensure(ed.max == exact(9), format!("encoder-decoder max {:?}", ed.max))?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "modal degrees: unit head {}, random head {}, 2 blocks {}, encoder-decoder {} (max {})",
        unit.modal.degree, random.modal.degree, two.modal.degree, ed.modal.degree, ed.max.degree
    ))
}

fn random_int_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<Rational> {
    Mat::from_fn(r, c, |_, _| ratio(rng.gen_range(-6..=6), rng.gen_range(1..=3)))
}

fn ffn_as_block() -> Outcome {
    for k in 0..10u64 {
        let mut rng = stream_rng(SEED, k);
        let (n, h, p) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let out = rng.gen_range(1..=4);
        let phi = FeedForwardNet::new(vec![
            AffineLayer::new(random_int_mat(&mut rng, h, n), random_int_mat(&mut rng, h, 1)).map_err(|e| e.to_string())?,
            AffineLayer::new(random_int_mat(&mut rng, out, h), random_int_mat(&mut rng, out, 1)).map_err(|e| e.to_string())?,
        ])
        .map_err(|e| e.to_string())?;
        let masked = k % 2 == 1;
        let block = ffn_block_form(&phi, n, p, masked).map_err(|e| e.to_string())?;
        for x in sample_matrices(SEED + k, 100, n, p) {
            let got = block.eval(&x).map_err(|e| e.to_string())?;
            let want = eval_ffn(&phi, &x).map_err(|e| e.to_string())?;
            ensure(got == want, format!("net {k} ({n}->{h}->{out}, p={p}) differs"))?;
        }
    }
    Ok("10 nets x 100 matrices exact".into())
}

fn random_form(rng: &mut ChaCha8Rng) -> (PBForm, usize, usize) {
    let nvars = rng.gen_range(1..=3);
    let pieces = rng.gen_range(1..=4);
    let mut rows: Vec<Vec<Polynomial>> = vec![Vec::new()];
    for i in 0..pieces {
        if i > 0 && rng.gen_bool(0.5) {
            rows.push(Vec::new());
        }
        let mut terms: Vec<(Monomial, Rational)> = (0..nvars).map(|k| (Monomial::var(Var::new(k, 0)), int(rng.gen_range(-3..=3)))).collect();
        terms.push((Monomial::one(), ratio(rng.gen_range(-4..=4), 2)));
        let poly = Polynomial::from_terms(terms);
        rows.last_mut().expect("row").push(poly);
    }
    (PBForm::new(rows).expect("nonempty"), nvars, pieces)
}

fn linear_forms() -> Outcome {
    let mut worst = 0;
    for k in 0..20u64 {
        let mut rng = stream_rng(SEED, 1000 + k);
        let (f, nvars, pieces) = random_form(&mut rng);
        let net = linear_spline_to_ffn(std::slice::from_ref(&f), nvars).map_err(|e| e.to_string())?;
        let limit = (pieces as f64).log2().ceil() as usize + 2;
        ensure(net.depth() <= limit, format!("form {k}: depth {} > {limit}", net.depth()))?;
        worst = worst.max(net.depth());
        for x in sample_matrices(SEED + k, 50, nvars, 1) {
            let got = eval_ffn(&net, &x).map_err(|e| e.to_string())?;
            let want = eval_pbform(&f, &x).map_err(|e| e.to_string())?;
            ensure(*got.get(0, 0) == want, format!("form {k} differs at {x:?}"))?;
        }
    }
    Ok(format!("20 forms exact, max depth {worst}"))
}

fn mask_semantics() -> Outcome {
    for (i, x) in sample_matrices(SEED, 100, 3, 3).into_iter().enumerate() {
        let xf: Mat<f64> = x.convert();
        let sm = apply_mask(&xf).and_then(|m| m.softmax()).map_err(|e| e.to_string())?;
        for c in 0..3 {
            let sum: f64 = (0..3).map(|r| sm.get(r, c)).sum();
            ensure((sum - 1.0).abs() <= 1e-12, format!("matrix {i} column {c} sums to {sum}"))?;
            for r in 0..3 {
                let v = *sm.get(r, c);
                ensure((0.0..=1.0).contains(&v), "softmax entry outside [0,1]")?;
                ensure(r <= c || v == 0.0, format!("matrix {i}: masked entry ({r},{c}) = {v}"))?;
            }
        }
        let exact = apply_mask(&x).map_err(|e| e.to_string())?;
        ensure(exact.is_structural(), "rational mask should be structural")?;
        let float_path = apply_mask(&xf).map_err(|e| e.to_string())?.relu();
        ensure(exact.relu().convert::<f64>() == float_path, format!("matrix {i}: relu paths differ"))?;
    }
    Ok("100 matrices: softmax columns within 1e-12, relu paths identical".into())
}

fn smoothing() -> Outcome {
    let xs = to_float(&sample_matrices(SEED, 100, 1, 1));
    let betas = [10.0, 100.0, 1000.0];
    let cube = smooth_convergence_table(&unit_encoder(1), &xs, &betas).map_err(|e| e.to_string())?;
    ensure(cube.strictly_decreasing(), format!("cubic encoder errors not strictly decreasing: {:?}", cube.rows))?;
    ensure(cube.within_bounds(), format!("cubic encoder error above bound: {:?}", cube.rows))?;
    let compiled = compile_spline(&cube_grid(), &CompileOptions::default()).map_err(|e| e.to_string())?;
    let table = smooth_convergence_table(&compiled.blocks, &xs, &betas).map_err(|e| e.to_string())?;
    ensure(table.is_monotone(), format!("compiled x^3 errors increase: {:?}", table.rows))?;
    ensure(table.within_bounds(), format!("compiled x^3 error above bound: {:?}", table.rows))?;
    let fmt = |t: &splineformer::verifier::ConvergenceTable| t.rows.iter().map(|r| format!("{:.3e}", r.max_error)).collect::<Vec<_>>().join(" > ");
    Ok(format!("cubic encoder {}; compiled x^3 {}", fmt(&cube), fmt(&table)))
}

fn run_cli(args: &[&str]) -> Result<(i32, Vec<u8>), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_splineformer"))
        .args(args)
        .env_remove("SPLINEFORMER_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    Ok((out.status.code().unwrap_or(-1), out.stdout))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spline = dir.path().join("spline.json");
    let doc = json!({"n": 2, "p": 1, "grid": [[{"op": "max", "args": [
        {"op": "product", "args": [{"op": "var", "name": "x_1_1"}, {"op": "var", "name": "x_2_1"}]},
        {"op": "sum", "args": [{"op": "var", "name": "x_1_1"}, {"op": "var", "name": "x_2_1"}]}
    ]}]]});
    std::fs::write(&spline, doc.to_string()).map_err(|e| e.to_string())?;
    let s = spline.to_str().expect("utf8");
    let mut runs = Vec::new();
    for k in 0..2 {
        let w = dir.path().join(format!("w{k}.json"));
        let w_s = w.to_str().expect("utf8");
        let (c1, compile_out) = run_cli(&["compile", s, "-o", w_s])?;
        let (c2, verify_out) = run_cli(&["verify", w_s, s, "--samples", "200", "--seed", "7"])?;
        ensure(c1 == 0 && c2 == 0, format!("exit codes {c1}, {c2}"))?;
        let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
        runs.push((compile_out, verify_out, read(&w)?, read(&dir.path().join(format!("w{k}.layout.json")))?));
    }
    ensure(runs[0] == runs[1], "outputs differ between reruns")?;
    Ok(format!("compile + verify reruns byte-identical ({} weight bytes)", runs[0].2.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("cubic identity of the unit head", cubic_identity),
        ("two-block encoder yields block-diagonal v2", eps2_layout),
        ("pruned spline compilation", spline_suite),
        ("masked compilation is autoregressive", autoregressive),
        ("degree bounds", degree_bounds),
        ("feed-forward net as encoder block", ffn_as_block),
        ("max-min forms as ReLU nets", linear_forms),
        ("mask semantics", mask_semantics),
        ("softplus smoothing", smoothing),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
