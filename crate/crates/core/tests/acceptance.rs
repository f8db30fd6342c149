//! Acceptance run: one PASS/FAIL line per criterion, with the sub-checks
//! that decided it indented underneath. Exits nonzero if any criterion fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use num::{BigRational, One, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polyformer::combinatorics::{enumerate_multi_indices, enumerate_rank_tuples, MultiIndex, RankTuple};
use polyformer::constructor::{
    build_monomial_bank, build_pipeline, build_rank1_network, build_rank_recursion,
    embed_ffn_in_transformer, embedded_output_row, eval_readout, pad_state, BuildBudget, Layout,
};
use polyformer::harness::{build_flat_rank1_ffn, check_bounds, measure_error, Claim, Sampler, END_TO_END};
use polyformer::networks::{eval_transformer_batch, FfnNetwork};
use polyformer::polyoracle::{
    all_terms_polynomial, decompose, eval_monomial_sym, eval_monomial_sym_permsum, product_rule_residual,
    parse_polynomial, rational, Polynomial,
};
use polyformer::sawtooth::{
    build_clamped_product_ffn, build_product_ffn, build_square_ffn, sawtooth_closed_form,
    sawtooth_exact, square_error_form, GadgetParams,
};
use polyformer::Matrix;

struct Check {
    line: String,
    pass: bool,
}

type Checks = Vec<Check>;
type Criterion = (&'static str, fn() -> Checks);

impl From<Claim> for Check {
    fn from(c: Claim) -> Self {
        Check {
            line: c.to_string(),
            pass: c.pass,
        }
    }
}

fn strict(id: impl Into<String>, bound: f64, measured: f64) -> Check {
    Claim::strict(id, bound, measured).into()
}

fn within(id: impl Into<String>, tolerance: f64, measured: f64) -> Check {
    Claim::within(id, tolerance, measured).into()
}

const GADGET_GRID: [(usize, usize); 9] = [(2, 1), (2, 2), (2, 3), (4, 1), (4, 2), (4, 3), (8, 1), (8, 2), (8, 3)];

fn random_x(d: usize, n: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::new(d, n, (0..d * n).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
}

fn flag(id: impl Into<String>, ok: bool) -> Check {
    Check {
        line: format!("{} {}", if ok { "PASS" } else { "FAIL" }, id.into()),
        pass: ok,
    }
}

fn runtime(limit: Duration, took: Duration) -> Check {
    strict(format!("runtime under {}s", limit.as_secs()), limit.as_secs_f64(), took.as_secs_f64())
}

fn max_by_column(f: &FfnNetwork, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = Matrix::new(f.input_dim(), xs.len(), {
        let mut v = vec![0.0; f.input_dim() * xs.len()];
        for (j, x) in xs.iter().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                v[i * xs.len() + j] = *xi;
            }
        }
        v
    })
    .unwrap();
    let out = f.eval_columns(&cols).unwrap();
    (0..xs.len()).map(|j| out.column(j)).collect()
}

fn squaring() -> Checks {
    let start = Instant::now();
    let grid: Vec<Vec<f64>> = (0..=4096).map(|i| vec![i as f64 / 4096.0]).collect();
    let mut checks = Vec::new();
    for (nw, l) in GADGET_GRID {
        let g = GadgetParams::new(nw, l).unwrap();
        let sq = build_square_ffn(&g).unwrap();
        let out = max_by_column(&sq, &grid);
        let mut worst: f64 = 0.0;
        let mut form: f64 = 0.0;
        for (x, y) in grid.iter().zip(&out) {
            let err = y[0] - x[0] * x[0];
            worst = worst.max(err.abs());
            form = form.max((err - square_error_form(g.resolution(), x[0]).unwrap()).abs());
        }
        let bound = 0.25f64.powi(g.resolution() as i32 + 1);
        checks.push(within(format!("N={nw} L={l} |f~ - x^2|"), bound, worst));
        checks.push(within(format!("N={nw} L={l} signed error form"), 1e-10, form));
    }
    checks.push(runtime(Duration::from_secs(5), start.elapsed()));
    checks
}

fn product() -> Checks {
    let start = Instant::now();
    let grid: Vec<Vec<f64>> = (0..129 * 129)
        .map(|i| vec![(i / 129) as f64 / 128.0, (i % 129) as f64 / 128.0])
        .collect();
    let mut checks = Vec::new();
    for (nw, l) in GADGET_GRID {
        let g = GadgetParams::new(nw, l).unwrap();
        let prod = max_by_column(&build_product_ffn(&g).unwrap(), &grid);
        let clamped = max_by_column(&build_clamped_product_ffn(&g).unwrap(), &grid);
        let worst = grid.iter().zip(&prod).map(|(x, y)| (y[0] - x[0] * x[1]).abs()).fold(0.0, f64::max);
        checks.push(strict(format!("N={nw} L={l} |g~ - xy|"), g.unit_error(), worst));
        let inside = clamped.iter().all(|y| (0.0..=1.0).contains(&y[0]));
        checks.push(flag(format!("N={nw} L={l} h~ in [0,1]"), inside));
    }
    checks.push(runtime(Duration::from_secs(5), start.elapsed()));
    checks
}

fn monomial_bank() -> Checks {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checks = Vec::new();
    for d in 1..=2 {
        for s in 1..=3u32 {
            for (nw, l) in GADGET_GRID {
                let b = BuildBudget::new(d, 1, s, nw, l).unwrap();
                let (bank, _) = build_monomial_bank(&b).unwrap();
                let xs: Vec<Vec<f64>> = (0..1000).map(|_| (0..d).map(|_| rng.gen_range(0.0..=1.0)).collect()).collect();
                let out = max_by_column(&bank, &xs);
                let tag = format!("d={d} s={s} N={nw} L={l}");
                for (k, p) in enumerate_multi_indices(d, s).iter().enumerate() {
                    let worst = xs.iter().zip(&out).map(|(x, y)| (y[k] - p.eval(x)).abs()).fold(0.0, f64::max);
                    let c = strict(format!("{tag} x^{p}"), b.monomial_error_bound(p.degree()), worst);
                    if !c.pass {
                        checks.push(c);
                    }
                }
                let size = bank.size_report();
                checks.push(flag(
                    format!("{tag} width {} <= {}, depth {} <= {}", size.width, b.bank_width_bound(), size.depth, b.bank_depth_bound()),
                    size.width as f64 <= b.bank_width_bound() && size.depth <= b.bank_depth_bound(),
                ));
            }
        }
    }
    checks.push(flag("every monomial within (j-1)N^-L (failures listed above)", checks.iter().all(|c| c.pass)));
    checks.push(runtime(Duration::from_secs(10), start.elapsed()));
    checks
}

fn embedding() -> Checks {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checks = Vec::new();
    let b = BuildBudget::new(2, 1, 3, 4, 2).unwrap();
    let sources = [
        ("square N=4 L=3", build_square_ffn(&GadgetParams::new(4, 3).unwrap()).unwrap()),
        ("clamped product N=8 L=2", build_clamped_product_ffn(&GadgetParams::new(8, 2).unwrap()).unwrap()),
        ("monomial bank d=2 s=3", build_monomial_bank(&b).unwrap().0),
    ];
    for (name, f) in sources {
        let t = embed_ffn_in_transformer(&f).unwrap();
        let out = embedded_output_row(&f);
        let inputs: Vec<Vec<f64>> = (0..1000).map(|_| (0..f.input_dim()).map(|_| rng.gen_range(0.0..=1.0)).collect()).collect();
        let states: Vec<Matrix> = inputs
            .iter()
            .map(|x| Matrix::column_vector(x).unwrap().pad_rows(t.state_dim()))
            .collect();
        let expected = max_by_column(&f, &inputs);
        let worst = eval_transformer_batch(&t, &states)
            .unwrap()
            .iter()
            .zip(&expected)
            .flat_map(|(y, e)| e.iter().enumerate().map(move |(k, v)| (y.get(out + k, 0) - v).abs()))
            .fold(0.0, f64::max);
        checks.push(within(format!("{name} output"), 1e-12, worst));
        checks.push(flag(format!("{name} width {} = 2 x {}", t.width(), f.width()), t.width() == 2 * f.width()));
        checks.push(flag(format!("{name} depth {} = {}", t.depth(), f.depth()), t.depth() == f.depth()));
    }
    checks
}

fn rank_one() -> Checks {
    let b = BuildBudget::new(2, 4, 3, 4, 2).unwrap();
    let (net, map) = build_rank1_network(&b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<Matrix> = (0..1000).map(|_| random_x(2, 4, &mut rng)).collect();
    let states: Vec<Matrix> = xs.iter().map(|x| x.pad_cols(5).pad_rows(net.state_dim())).collect();
    let ys = eval_transformer_batch(&net, &states).unwrap();
    let mut checks = Vec::new();
    for p in enumerate_multi_indices(2, 3) {
        let t = RankTuple::new(vec![p.clone()]).unwrap();
        let row = map.tuple_row(&t).unwrap();
        let worst = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y.get(row, 4) - eval_monomial_sym(&t, x).unwrap()).abs())
            .fold(0.0, f64::max);
        checks.push(if p.degree() == 1 {
            within(format!("m{t} exact"), 1e-10, worst)
        } else {
            strict(format!("m{t}"), b.rank1_error_bound(p.degree()), worst)
        });
    }
    let size = net.size_report();
    checks.push(flag(format!("width {} <= {}", size.width, b.bank_width_bound()), size.width as f64 <= b.bank_width_bound()));
    checks.push(flag(format!("depth {} <= {}", size.depth, b.rank1_depth_bound()), size.depth <= b.rank1_depth_bound()));
    checks
}

fn rank_recursion() -> Checks {
    let b = BuildBudget::new(2, 4, 3, 4, 2).unwrap();
    let layout = Layout::new(&b).unwrap();
    let (rank1, _) = build_rank1_network(&b).unwrap();
    let (recursion, map) = build_rank_recursion(&b).unwrap();
    let net = pad_state(&rank1, layout.state_dim()).unwrap().then(&recursion).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs: Vec<Matrix> = (0..500).map(|_| random_x(2, 4, &mut rng)).collect();
    let states: Vec<Matrix> = xs.iter().map(|x| layout.pad_input(x).unwrap()).collect();
    let ys = eval_transformer_batch(&net, &states).unwrap();
    let mut checks = Vec::new();
    for t in enumerate_rank_tuples(2, 3).iter().filter(|t| t.rank() >= 2) {
        let row = map.tuple_row(t).unwrap();
        let worst = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y.get(row, 4) - eval_monomial_sym(t, x).unwrap()).abs())
            .fold(0.0, f64::max);
        checks.push(strict(format!("m{t}"), b.tuple_error_bound(t), worst));
    }
    let size = recursion.size_report();
    checks.push(flag(format!("width {} <= {}", size.width, b.network_width_bound()), size.width as f64 <= b.network_width_bound()));
    checks.push(flag(format!("depth {} <= {}", size.depth, b.recursion_depth_bound()), size.depth <= b.recursion_depth_bound()));
    checks
}

/// Random positive combination of basis elements on `d x n`, scaled so `f(1) = 1`.
fn random_target(d: usize, n: usize, s: u32, rng: &mut impl Rng) -> Polynomial {
    let mut parts: Vec<(BigRational, RankTuple)> = enumerate_rank_tuples(d, s)
        .into_iter()
        .filter_map(|t| (t.rank() <= n && rng.gen_bool(0.5)).then(|| (rational(rng.gen_range(1..10), 1), t)))
        .collect();
    if parts.is_empty() {
        parts.push((BigRational::one(), RankTuple::new(vec![MultiIndex::unit(d, 0)]).unwrap()));
    }
    let f = Polynomial::from_decomposition(d, n, &parts).unwrap();
    let total = f.sum_of_coefficients();
    f.scale(&(BigRational::one() / total))
}

fn end_to_end() -> Checks {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = random_target(2, 3, 3, &mut rng);
    let mut checks = vec![flag("f(1) = 1", f.sum_of_coefficients() == BigRational::one())];
    let mut errors = Vec::new();
    for (nw, l) in [(4, 2), (8, 2), (4, 3)] {
        let b = BuildBudget::new(2, 3, 3, nw, l).unwrap();
        let report = check_bounds(&f, &b, &Sampler::default()).unwrap();
        let end = report.claim(END_TO_END).unwrap();
        errors.push(end.measured);
        checks.push(strict(format!("N={nw} L={l} error < 8^s N^-L"), end.bound, end.measured));
        let size = report.size("full network").unwrap();
        checks.push(flag(format!("N={nw} L={l} width {} <= {}", size.width, size.width_bound), size.width as f64 <= size.width_bound));
        checks.push(flag(format!("N={nw} L={l} depth {} <= {}", size.depth, size.depth_bound), size.depth <= size.depth_bound));

        let p = build_pipeline(&f, &b).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = random_x(2, 3, &mut rng);
            let mut order: Vec<usize> = (0..3).collect();
            order.shuffle(&mut rng);
            let permuted = Matrix::hcat(&order.iter().map(|&j| x.column_block(j, 1)).collect::<Vec<_>>()).unwrap();
            let a = eval_readout(&p.network, &p.readout, &x).unwrap();
            let c = eval_readout(&p.network, &p.readout, &permuted).unwrap();
            worst = worst.max((a - c).abs());
        }
        checks.push(within(format!("N={nw} L={l} column permutation invariance"), 1e-10, worst));
    }
    checks.push(strict("error(N=8,L=2) < error(N=4,L=2)", errors[0], errors[1]));
    checks.push(strict("error(N=4,L=3) < error(N=4,L=2)", errors[0], errors[2]));
    checks.push(runtime(Duration::from_secs(60), start.elapsed()));
    checks
}

const EXAMPLE_TWO: &str = include_str!("../polys/example2.poly");

fn examples() -> Checks {
    let mut checks = Vec::new();
    let f1 = all_terms_polynomial(2, 2, 2);
    let f1_at_ones = 14.0;
    let normalized = f1.scale(&rational(1, 14));
    for (nw, l) in [(4, 2), (8, 2)] {
        let unit = (nw as f64).powi(-(l as i32));
        let b = BuildBudget::new(2, 2, 2, nw, l).unwrap();
        let p = build_pipeline(&normalized, &b).unwrap();
        let err = measure_error(&p.network, &p.readout, &normalized, &Sampler::default()).unwrap().max_abs_error;
        let size = p.network.size_report();
        let tag = format!("example 1 N={nw} L={l}");
        checks.push(flag(format!("{tag} width {} <= 16N = {}", size.width, 16 * nw), size.width <= 16 * nw));
        checks.push(flag(
            format!("{tag} width {} <= 12(2d)^s N = {}", size.width, b.network_width_bound()),
            size.width as f64 <= b.network_width_bound(),
        ));
        checks.push(flag(format!("{tag} depth {} <= 4L+6", size.depth), size.depth <= 4 * l + 6));
        checks.push(strict(format!("{tag} f(1) x normalized error < 1600 N^-L"), 1600.0 * unit, f1_at_ones * err));
        checks.push(strict(format!("{tag} normalized error < 8^s N^-L"), 64.0 * unit, err));
    }
    let f2 = parse_polynomial(EXAMPLE_TWO, Some(2), Some(3)).unwrap();
    for (nw, l) in [(4, 2), (4, 3), (8, 3)] {
        let unit = (nw as f64).powi(-(l as i32));
        let b = BuildBudget::new(2, 3, 4, nw, l).unwrap();
        let p = build_pipeline(&f2, &b).unwrap();
        let err = measure_error(&p.network, &p.readout, &f2, &Sampler::default()).unwrap().max_abs_error;
        let size = p.network.size_report();
        let tag = format!("example 2 N={nw} L={l}");
        checks.push(flag(format!("{tag} width {} <= 3072N = {}", size.width, 3072 * nw), size.width <= 3072 * nw));
        checks.push(flag(format!("{tag} depth {} <= 8L+12", size.depth), size.depth <= 8 * l + 12));
        checks.push(strict(format!("{tag} error < 4096 N^-L"), 4096.0 * unit, err));
    }
    checks
}

fn oracles() -> Checks {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let random_part = |d: usize, rng: &mut ChaCha8Rng| loop {
        let p = MultiIndex::new((0..d).map(|_| rng.gen_range(0..=2)).collect());
        if !p.is_zero() {
            break p;
        }
    };
    let mut residual: f64 = 0.0;
    let (mut at_n, mut beyond_n) = (0, 0);
    for case in 0..150 {
        let d = rng.gen_range(1..=2);
        let n: usize = rng.gen_range(1..=4);
        // Joined rank n - 1, n, n + 1, n + 2 in turn.
        let joined = (n + case % 4).saturating_sub(1).max(2);
        let parent = RankTuple::canonical((0..joined - 1).map(|_| random_part(d, &mut rng)).collect()).unwrap();
        let extra = random_part(d, &mut rng);
        at_n += usize::from(joined == n);
        beyond_n += usize::from(joined > n);
        let x = random_x(d, n, &mut rng);
        residual = residual.max(product_rule_residual(&parent, &extra, &x).unwrap().abs());
    }
    let mut checks = vec![
        within("product rule residual, 150 cases", 1e-9, residual),
        flag(format!("cases with r = n ({at_n}) and r > n ({beyond_n})"), at_n > 0 && beyond_n > 0),
    ];

    let mut cross: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.gen_range(1..=2);
        let n = rng.gen_range(1..=6);
        let rank = rng.gen_range(1..=n.min(4));
        let t = RankTuple::canonical((0..rank).map(|_| random_part(d, &mut rng)).collect()).unwrap();
        let x = random_x(d, n, &mut rng);
        cross = cross.max((eval_monomial_sym(&t, &x).unwrap() - eval_monomial_sym_permsum(&t, &x).unwrap()).abs());
    }
    checks.push(within("orbit sum vs permutation sum, n <= 6", 1e-9, cross));

    let mut exact = true;
    for _ in 0..50 {
        let (d, n, s) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=3));
        let parts: Vec<(BigRational, RankTuple)> = enumerate_rank_tuples(d, s)
            .into_iter()
            .filter_map(|t| {
                (t.rank() <= n && rng.gen_bool(0.4)).then(|| (rational(rng.gen_range(-9..10), rng.gen_range(1..7)), t))
            })
            .filter(|(c, _)| !c.is_zero())
            .collect();
        let f = Polynomial::from_decomposition(d, n, &parts).unwrap();
        let back = Polynomial::from_decomposition(d, n, &decompose(&f).unwrap()).unwrap();
        exact &= back == f;
    }
    checks.push(flag("decompose then re-expand is exact (50 polynomials)", exact));

    let mut closed: f64 = 0.0;
    for k in 1..=10 {
        for i in 0..=4096 {
            let x = i as f64 / 4096.0;
            closed = closed.max((sawtooth_closed_form(k, x).unwrap() - sawtooth_exact(k, x).unwrap()).abs());
        }
    }
    checks.push(within("sawtooth closed form vs composition", 1e-12, closed));
    checks
}

fn parameter_audit() -> Checks {
    let mut counts = Vec::new();
    let mut flat = Vec::new();
    for n in [3, 5, 8] {
        let text: String = (1..=n).map(|j| format!("1/{n} * x[1][{j}] * x[2][{j}]\n")).collect();
        let f = parse_polynomial(&text, Some(2), Some(n)).unwrap();
        let b = BuildBudget::new(2, n, 2, 4, 2).unwrap();
        counts.push(build_pipeline(&f, &b).unwrap().network.size_report().parameter_count);
        flat.push(build_flat_rank1_ffn(&b).unwrap().size_report().parameter_count);
    }
    vec![
        flag(format!("transformer params across n = 3, 5, 8: {counts:?}"), counts.windows(2).all(|w| w[0] == w[1])),
        flag(format!("flat FNN params across n = 3, 5, 8: {flat:?}"), flat.windows(2).all(|w| w[0] < w[1])),
    ]
}

fn determinism() -> Checks {
    let poly = concat!(env!("CARGO_MANIFEST_DIR"), "/polys/example2.poly");
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_polyformer"))
            .args(["verify", "--poly", poly, "--N", "4", "--L", "2", "--seed", "11", "--samples", "300"])
            .env_remove("POLYFORMER_SEED")
            .output()
            .unwrap()
    };
    let (a, b) = (run(), run());
    vec![
        flag("verify exits successfully", a.status.success() && b.status.success()),
        flag(format!("two verify runs byte-identical ({} bytes)", a.stdout.len()), !a.stdout.is_empty() && a.stdout == b.stdout),
    ]
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("squaring gadget", squaring),
        ("product gadget", product),
        ("monomial bank", monomial_bank),
        ("FNN embedding", embedding),
        ("rank-1 stage", rank_one),
        ("rank recursion", rank_recursion),
        ("end-to-end approximation", end_to_end),
        ("worked examples", examples),
        ("oracle suite", oracles),
        ("parameter-count audit", parameter_audit),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let checks = run();
        let pass = checks.iter().all(|c| c.pass);
        failed += usize::from(!pass);
        println!(
            "criterion {:>2} {} {name} ({} checks, {:.2}s)",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            checks.len(),
            start.elapsed().as_secs_f64()
        );
        for c in checks.iter().filter(|c| !c.pass || !pass) {
            println!("    {}", c.line);
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
