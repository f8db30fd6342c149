//! Verification engine: empirical error measurement against the exact
//! oracle, size audits against the closed-form budgets, decay sweeps, and
//! the oracle self-test.
//!
//! Sampled maxima only bound the true supremum from below, so a passing
//! claim is evidence, never proof. A failing one is a genuine counterexample.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combinatorics::{enumerate_multi_indices, falling_factorial, MultiIndex, RankTuple};
use crate::constructor::{
    build_monomial_bank, build_pipeline, embed_ffn_in_transformer, embedded_output_row,
    reference_values, BuildBudget, Pipeline, ReadOut,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::networks::{
    eval_transformer_batch, eval_transformer_checkpoints, parallel_ffn, FfnNetwork,
    TransformerNetwork, WeightSlot,
};
use crate::polyoracle::{
    eval_monomial_sym, eval_monomial_sym_permsum, eval_polynomial, product_rule_residual,
    parse_polynomial, Polynomial,
};
use crate::sawtooth::{
    build_square_ffn, sawtooth_closed_form, sawtooth_exact, square_error_form, square_ref,
    GadgetParams,
};

/// Samples per parallel work item.
const CHUNK: usize = 32;
/// Full grids beyond this many points are refused.
const GRID_LIMIT: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    /// Every point of a `resolution`-per-entry grid over `[0,1]^{d×n}`.
    Grid { resolution: usize },
    Uniform { count: usize },
    /// `count` uniform matrices plus the all-zero and all-one corners, plus a
    /// 3-per-entry grid when `d·n ≤ 6`.
    Standard { count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampler {
    pub kind: SamplerKind,
    pub seed: u64,
}

pub const DEFAULT_SEED: u64 = 0x5eed;
pub const DEFAULT_SAMPLES: usize = 2000;

impl Default for Sampler {
    fn default() -> Self {
        Sampler::standard(DEFAULT_SAMPLES, DEFAULT_SEED)
    }
}

impl Sampler {
    pub fn grid(resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Precondition(format!(
                "grid resolution must be at least 2 (got {resolution})"
            )));
        }
        Ok(Sampler {
            kind: SamplerKind::Grid { resolution },
            seed: 0,
        })
    }

    pub fn uniform(count: usize, seed: u64) -> Self {
        Sampler {
            kind: SamplerKind::Uniform { count },
            seed,
        }
    }

    pub fn standard(count: usize, seed: u64) -> Self {
        Sampler {
            kind: SamplerKind::Standard { count },
            seed,
        }
    }

    pub fn points(&self, d: usize, n: usize) -> Result<Vec<Matrix>> {
        match self.kind {
            SamplerKind::Grid { resolution } => grid_points(d, n, resolution),
            SamplerKind::Uniform { count } => Ok(uniform_points(d, n, count, self.seed)),
            SamplerKind::Standard { count } => {
                let mut points = uniform_points(d, n, count, self.seed);
                points.push(Matrix::zeros(d, n));
                points.push(Matrix::filled(d, n, 1.0));
                if d * n <= 6 {
                    points.extend(grid_points(d, n, 3)?);
                }
                Ok(points)
            }
        }
    }
}

fn uniform_points(d: usize, n: usize, count: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let values = (0..d * n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            Matrix::new(d, n, values).expect("finite values")
        })
        .collect()
}

fn grid_points(d: usize, n: usize, resolution: usize) -> Result<Vec<Matrix>> {
    let entries = d * n;
    let total = u32::try_from(entries)
        .ok()
        .and_then(|e| resolution.checked_pow(e))
        .filter(|&t| t <= GRID_LIMIT)
        .ok_or_else(|| {
            Error::Precondition(format!(
                "a {resolution}-point grid over {entries} entries exceeds {GRID_LIMIT} points"
            ))
        })?;
    let step = 1.0 / (resolution - 1) as f64;
    Ok((0..total)
        .map(|mut code| {
            let values = (0..entries)
                .map(|_| {
                    let v = (code % resolution) as f64 * step;
                    code /= resolution;
                    v
                })
                .collect();
            Matrix::new(d, n, values).expect("finite values")
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub max_abs_error: f64,
    pub argmax_point: Matrix,
    pub sample_count: usize,
}

/// Evaluates `net` on every point, chunked across threads; results keep the
/// order of `points`.
fn trace(
    net: &TransformerNetwork,
    column_count: usize,
    points: &[Matrix],
    checkpoints: &[usize],
) -> Result<Vec<Vec<Matrix>>> {
    let chunks: Vec<Vec<Vec<Matrix>>> = points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let padded: Vec<Matrix> = chunk
                .iter()
                .map(|x| x.pad_cols(column_count + 1).pad_rows(net.state_dim()))
                .collect();
            let by_checkpoint = eval_transformer_checkpoints(net, &padded, checkpoints)?;
            Ok((0..chunk.len())
                .map(|s| by_checkpoint.iter().map(|c| c[s].clone()).collect())
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Max over samples of `|f(X) - readout|`. Ties keep the earliest sample, so
/// the result does not depend on thread scheduling.
pub fn measure_error(
    net: &TransformerNetwork,
    readout: &ReadOut,
    f: &Polynomial,
    s: &Sampler,
) -> Result<ErrorStats> {
    if readout.column != f.n() || readout.row >= net.state_dim() || f.d() > net.state_dim() {
        return Err(Error::dims(
            "measure_error",
            format!(
                "polynomial is {}x{}, readout cell ({}, {}), state has {} rows",
                f.d(),
                f.n(),
                readout.row,
                readout.column,
                net.state_dim()
            ),
        ));
    }
    let points = s.points(f.d(), f.n())?;
    let errors: Vec<f64> = points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let padded: Vec<Matrix> = chunk
                .iter()
                .map(|x| x.pad_cols(f.n() + 1).pad_rows(net.state_dim()))
                .collect();
            let out = eval_transformer_batch(net, &padded)?;
            chunk
                .iter()
                .zip(&out)
                .map(|(x, y)| Ok((eval_polynomial(f, x)? - readout.read(y)).abs()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let (at, max) = errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(ErrorStats {
        max_abs_error: max.max(0.0),
        argmax_point: points[at].clone(),
        sample_count: points.len(),
    })
}

/// One bound comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub bound: f64,
    pub measured: f64,
    pub pass: bool,
}

/// Guard for rounding in the strict comparison.
pub const RELATIVE_GUARD: f64 = 1e-9;
/// Zero bounds (exact paths) accept this much rounding.
pub const EXACT_TOLERANCE: f64 = 1e-10;

impl Claim {
    /// Passes iff `measured < bound·(1 + 1e-9)`, or `measured ≤ 1e-10` when
    /// the bound is zero.
    pub fn strict(id: impl Into<String>, bound: f64, measured: f64) -> Self {
        let pass = if bound == 0.0 {
            measured <= EXACT_TOLERANCE
        } else {
            measured < bound * (1.0 + RELATIVE_GUARD)
        };
        Claim {
            id: id.into(),
            bound,
            measured,
            pass,
        }
    }

    /// Passes iff `measured ≤ tolerance`; for identities checked numerically.
    pub fn within(id: impl Into<String>, tolerance: f64, measured: f64) -> Self {
        Claim {
            id: id.into(),
            bound: tolerance,
            measured,
            pass: measured <= tolerance,
        }
    }
}

impl fmt::Display for Claim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} measured {:.6e}  bound {:.6e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.measured,
            self.bound
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeAudit {
    pub stage: String,
    pub width: usize,
    pub width_bound: f64,
    pub depth: usize,
    pub depth_bound: usize,
    pub parameter_count: usize,
    pub pass: bool,
}

impl SizeAudit {
    fn new(stage: &str, size: crate::networks::SizeReport, width_bound: f64, depth_bound: usize) -> Self {
        SizeAudit {
            stage: stage.to_string(),
            width: size.width,
            width_bound,
            depth: size.depth,
            depth_bound,
            parameter_count: size.parameter_count,
            pass: size.width as f64 <= width_bound && size.depth <= depth_bound,
        }
    }
}

impl fmt::Display for SizeAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} width {} <= {}  depth {} <= {}  params {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.stage,
            self.width,
            self.width_bound,
            self.depth,
            self.depth_bound,
            self.parameter_count
        )
    }
}

/// Observed range of a group of intermediate values that must stay in
/// `[lo, hi]` for the next product gadget to see inputs in `[0,1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeCheck {
    pub quantity: String,
    pub lo: f64,
    pub hi: f64,
    pub observed_min: f64,
    pub observed_max: f64,
    pub pass: bool,
}

impl fmt::Display for RangeCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} observed [{:.6e}, {:.6e}] within [{}, {}]",
            if self.pass { "PASS" } else { "FAIL" },
            self.quantity,
            self.observed_min,
            self.observed_max,
            self.lo,
            self.hi
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub budget: BuildBudget,
    pub sampler: Sampler,
    pub sample_count: usize,
    pub f_at_ones: f64,
    pub claims: Vec<Claim>,
    pub ranges: Vec<RangeCheck>,
    pub sizes: Vec<SizeAudit>,
}

impl BoundReport {
    pub fn all_pass(&self) -> bool {
        self.failures().next().is_none()
    }

    /// Identifiers of every failing claim, range, or size audit.
    pub fn failures(&self) -> impl Iterator<Item = &str> {
        self.claims
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.id.as_str())
            .chain(self.ranges.iter().filter(|r| !r.pass).map(|r| r.quantity.as_str()))
            .chain(self.sizes.iter().filter(|s| !s.pass).map(|s| s.stage.as_str()))
    }

    pub fn claim(&self, id: &str) -> Option<&Claim> {
        self.claims.iter().find(|c| c.id == id)
    }

    pub fn size(&self, stage: &str) -> Option<&SizeAudit> {
        self.sizes.iter().find(|s| s.stage == stage)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.budget;
        writeln!(
            f,
            "budget d={} n={} s={} N={} L={}  samples={} seed={}  f(1)={}",
            b.d(),
            b.n(),
            b.s(),
            b.gadget().n_width(),
            b.gadget().l_depth(),
            self.sample_count,
            self.sampler.seed,
            self.f_at_ones
        )?;
        writeln!(f, "errors:")?;
        for c in &self.claims {
            writeln!(f, "  {c}")?;
        }
        writeln!(f, "ranges:")?;
        for r in &self.ranges {
            writeln!(f, "  {r}")?;
        }
        writeln!(f, "sizes:")?;
        for s in &self.sizes {
            writeln!(f, "  {s}")?;
        }
        write!(f, "result: {}", if self.all_pass() { "PASS" } else { "FAIL" })
    }
}

pub const END_TO_END: &str = "end-to-end f";
pub const REFERENCE_AGREEMENT: &str = "network matches reference arithmetic";
/// Network and reference model differ only by rounding.
const REFERENCE_TOLERANCE: f64 = 1e-9;

pub fn monomial_claim_id(p: &MultiIndex) -> String {
    format!("monomial x^{p}")
}

pub fn tuple_claim_id(t: &RankTuple) -> String {
    format!("rank-{} m{t}", t.rank())
}

/// Per-sample measurements in claim order, plus range observations.
struct SampleAudit {
    errors: Vec<f64>,
    ranges: Vec<(f64, f64)>,
}

/// Measures every claim of `p` on `net`, which is `p.network` or a modified
/// copy with the same layout.
pub fn audit_network(p: &Pipeline, net: &TransformerNetwork, s: &Sampler) -> Result<BoundReport> {
    let b = *p.budget();
    let n = b.n();
    let layout = &p.layout;
    let monomials = enumerate_multi_indices(b.d(), b.s());
    let basis: Vec<(RankTuple, usize)> = layout
        .basis()
        .iter()
        .map(|t| (t.clone(), layout.tuple_row(t).expect("basis row")))
        .collect();
    let (bank_end, tf1_end, _) = p.stage_blocks();
    let checkpoints = [bank_end, tf1_end, net.depth()];
    let max_rank = b.s() as usize;
    let points = s.points(b.d(), n)?;

    let audit_one = |x: &Matrix, states: &[Matrix]| -> Result<SampleAudit> {
        let (bank, tf1, last) = (&states[0], &states[1], &states[2]);
        let reference = reference_values(p, x)?;
        let mut errors = Vec::with_capacity(monomials.len() + basis.len() + 2);
        // (min, max) for bank outputs, then per rank 1..=s.
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); max_rank + 1];
        let mut drift: f64 = 0.0;
        let widen = |r: &mut (f64, f64), v: f64| *r = (r.0.min(v), r.1.max(v));
        for (k, q) in monomials.iter().enumerate() {
            let row = layout.bank_row(k);
            let mut worst: f64 = 0.0;
            for j in 0..n {
                let v = bank.get(row, j);
                worst = worst.max((v - q.eval(&x.column(j))).abs());
                drift = drift.max((v - reference.bank[j][k]).abs());
                widen(&mut ranges[0], v);
            }
            errors.push(worst);
        }
        for (t, row) in &basis {
            let v = if t.rank() == 1 { tf1.get(*row, n) } else { last.get(*row, n) };
            errors.push((v - eval_monomial_sym(t, x)?).abs());
            drift = drift.max((v - reference.tuples[t]).abs());
            widen(&mut ranges[t.rank()], v);
        }
        let out = p.readout.read(last);
        errors.push((out - eval_polynomial_ref(p, x)?).abs());
        drift = drift.max((out - reference.readout).abs());
        errors.push(drift);
        Ok(SampleAudit { errors, ranges })
    };

    let audits: Vec<SampleAudit> = points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let states = trace(net, n, chunk, &checkpoints)?;
            chunk
                .iter()
                .zip(&states)
                .map(|(x, st)| audit_one(x, st))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut measured = vec![0.0f64; monomials.len() + basis.len() + 2];
    let mut observed = vec![(f64::INFINITY, f64::NEG_INFINITY); max_rank + 1];
    for a in &audits {
        for (m, e) in measured.iter_mut().zip(&a.errors) {
            *m = m.max(*e);
        }
        for (o, r) in observed.iter_mut().zip(&a.ranges) {
            *o = (o.0.min(r.0), o.1.max(r.1));
        }
    }

    let mut claims = Vec::with_capacity(measured.len());
    let mut values = measured.into_iter();
    for q in &monomials {
        claims.push(Claim::strict(
            monomial_claim_id(q),
            b.monomial_error_bound(q.degree()),
            values.next().expect("claim"),
        ));
    }
    for (t, _) in &basis {
        claims.push(Claim::strict(tuple_claim_id(t), b.tuple_error_bound(t), values.next().expect("claim")));
    }
    claims.push(Claim::strict(
        END_TO_END,
        b.network_error_bound(p.f_at_ones),
        values.next().expect("claim"),
    ));
    claims.push(Claim::within(REFERENCE_AGREEMENT, REFERENCE_TOLERANCE, values.next().expect("claim")));

    let mut ranges = Vec::new();
    for (r, (lo, hi)) in observed.into_iter().enumerate() {
        if lo > hi {
            continue;
        }
        let (quantity, ceiling) = if r == 0 {
            ("bank outputs".to_string(), 1.0)
        } else {
            (format!("rank-{r} values"), falling_factorial(n as u64, r as u64)? as f64)
        };
        ranges.push(RangeCheck {
            quantity,
            lo: 0.0,
            hi: ceiling,
            observed_min: lo,
            observed_max: hi,
            pass: lo >= 0.0 && hi <= ceiling,
        });
    }

    let sizes = vec![
        SizeAudit::new("monomial bank", layout.bank().size_report(), b.bank_width_bound(), b.bank_depth_bound()),
        SizeAudit::new("rank-1 stage", p.rank1.size_report(), b.bank_width_bound(), b.rank1_depth_bound()),
        SizeAudit::new(
            "rank recursion",
            p.recursion.size_report(),
            b.network_width_bound(),
            b.recursion_depth_bound(),
        ),
        SizeAudit::new("full network", net.size_report(), b.network_width_bound(), b.network_depth_bound()),
    ];

    Ok(BoundReport {
        budget: b,
        sampler: *s,
        sample_count: points.len(),
        f_at_ones: p.f_at_ones,
        claims,
        ranges,
        sizes,
    })
}

fn eval_polynomial_ref(p: &Pipeline, x: &Matrix) -> Result<f64> {
    // The decomposition re-expands to f exactly, so this is f(X).
    let mut v = p.readout.bias;
    for (c, t) in &p.decomposition {
        if t.rank() > 0 {
            v += crate::polyoracle::to_f64(c) * eval_monomial_sym(t, x)?;
        }
    }
    Ok(v)
}

/// Builds every stage for `f` under `b` and compares each measured error,
/// intermediate range, and size with its bound.
pub fn check_bounds(f: &Polynomial, b: &BuildBudget, s: &Sampler) -> Result<BoundReport> {
    let p = build_pipeline(f, b)?;
    audit_network(&p, &p.network, s)
}

/// Copy of `p.network` with the first nonzero input weight of the first
/// product gadget scaled by `factor`. Needs `s ≥ 2`.
pub fn corrupt_product_gadget(p: &Pipeline, factor: f64) -> Result<TransformerNetwork> {
    let (_, tf1_end, rec_end) = p.stage_blocks();
    if rec_end == tf1_end {
        return Err(Error::Precondition("degree 1 builds contain no product gadget".into()));
    }
    let block = &p.network.blocks()[tf1_end];
    let index = block
        .feed_forward
        .w1()
        .values()
        .iter()
        .position(|v| *v != 0.0)
        .ok_or_else(|| Error::InvalidNetwork("empty gadget layer".into()))?;
    p.network.with_scaled_weight(tf1_end, WeightSlot::W1, index, factor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_width: usize,
    pub l_depth: usize,
    pub max_error: f64,
    pub bound: f64,
    pub width: usize,
    pub depth: usize,
    pub params: usize,
}

pub const SWEEP_SCHEMA: &str = "polyformer-sweep/1";

/// End-to-end error and size for every `(N, L)` pair, with `s` the degree of `f`.
pub fn sweep(f: &Polynomial, n_values: &[usize], l_values: &[usize], s: &Sampler) -> Result<Vec<SweepRow>> {
    let degree = f.degree().max(1);
    let mut rows = Vec::with_capacity(n_values.len() * l_values.len());
    for &nw in n_values {
        for &l in l_values {
            let b = BuildBudget::new(f.d(), f.n(), degree, nw, l)?;
            let p = build_pipeline(f, &b)?;
            let stats = measure_error(&p.network, &p.readout, f, s)?;
            let size = p.network.size_report();
            rows.push(SweepRow {
                n_width: nw,
                l_depth: l,
                max_error: stats.max_abs_error,
                bound: b.network_error_bound(p.f_at_ones),
                width: size.width,
                depth: size.depth,
                params: size.parameter_count,
            });
        }
    }
    Ok(rows)
}

/// The bound on every row, plus the decay orderings available in the grid:
/// `error(N=8) < error(N=2)` at fixed `L` and `error(L=3) < error(L=1)` at
/// fixed `N ≥ 4`.
pub fn sweep_claims(rows: &[SweepRow]) -> Vec<Claim> {
    let find = |nw: usize, l: usize| rows.iter().find(|r| r.n_width == nw && r.l_depth == l);
    let mut claims: Vec<Claim> = rows
        .iter()
        .map(|r| Claim::strict(format!("N={} L={} bound", r.n_width, r.l_depth), r.bound, r.max_error))
        .collect();
    for r in rows.iter().filter(|r| r.n_width == 8) {
        if let Some(coarse) = find(2, r.l_depth) {
            claims.push(Claim::strict(
                format!("L={} error(N=8) < error(N=2)", r.l_depth),
                coarse.max_error,
                r.max_error,
            ));
        }
    }
    for r in rows.iter().filter(|r| r.l_depth == 3 && r.n_width >= 4) {
        if let Some(shallow) = find(r.n_width, 1) {
            claims.push(Claim::strict(
                format!("N={} error(L=3) < error(L=1)", r.n_width),
                shallow.max_error,
                r.max_error,
            ));
        }
    }
    claims
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "# schema: {SWEEP_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// `n` copies of the monomial bank side by side followed by the column-sum
/// map: the rank-1 stage as one FNN on `vec(X)` with nothing shared across
/// columns. Its parameter count grows linearly in `n`.
pub fn build_flat_rank1_ffn(b: &BuildBudget) -> Result<FfnNetwork> {
    let (bank, _) = build_monomial_bank(b)?;
    let (d, m, n) = (b.d(), bank.output_dim(), b.n());
    let flat = parallel_ffn(&vec![bank; n])?;
    let mut sum = Matrix::zeros(m, n * m);
    for j in 0..n {
        for k in 0..m {
            sum.set(k, j * m + k, 1.0);
        }
    }
    debug_assert_eq!(flat.input_dim(), n * d);
    flat.postcompose_affine(&sum, &vec![0.0; m])
}

/// Numerical identities of the oracle layer, the gadgets, and the embedding.
pub fn selftest(seed: u64) -> Result<Vec<Claim>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: Vec<f64> = (0..=4096).map(|i| i as f64 / 4096.0).collect();
    let mut claims = Vec::new();

    let mut closed: f64 = 0.0;
    for k in 1..=8 {
        for &x in &grid {
            closed = closed.max((sawtooth_closed_form(k, x)? - sawtooth_exact(k, x)?).abs());
        }
    }
    claims.push(Claim::within("sawtooth closed form vs composition", 1e-12, closed));

    let mut form: f64 = 0.0;
    for k in 1..=8 {
        for &x in &grid {
            form = form.max((square_ref(k, x)? - x * x - square_error_form(k, x)?).abs());
        }
    }
    claims.push(Claim::within("squaring error quadratic form", 1e-10, form));

    let mut residual: f64 = 0.0;
    let mut cross: f64 = 0.0;
    for case in 0..200 {
        let d = rng.gen_range(1..=2);
        let n = rng.gen_range(1..=5);
        let x = Matrix::new(d, n, (0..d * n).map(|_| rng.gen_range(0.0..=1.0)).collect())?;
        let rank = rng.gen_range(1..=n + 1);
        let parts: Vec<MultiIndex> = (0..rank)
            .map(|_| loop {
                let p = MultiIndex::new((0..d).map(|_| rng.gen_range(0..=2)).collect());
                if !p.is_zero() {
                    break p;
                }
            })
            .collect();
        let t = RankTuple::canonical(parts.clone())?;
        cross = cross.max((eval_monomial_sym(&t, &x)? - eval_monomial_sym_permsum(&t, &x)?).abs());
        if case % 2 == 0 && rank >= 2 {
            let (extra, parent) = parts.split_last().expect("rank ≥ 2");
            let parent = RankTuple::canonical(parent.to_vec())?;
            residual = residual.max(product_rule_residual(&parent, extra, &x)?.abs());
        }
    }
    claims.push(Claim::within("product rule residual", 1e-9, residual));
    claims.push(Claim::within("orbit sum vs permutation sum", 1e-9, cross));

    let mut embed: f64 = 0.0;
    for (nw, l) in [(2, 1), (4, 2), (8, 3)] {
        let sq = build_square_ffn(&GadgetParams::new(nw, l)?)?;
        let t = embed_ffn_in_transformer(&sq)?;
        let out = embedded_output_row(&sq);
        let xs: Vec<Matrix> = (0..256)
            .map(|_| {
                let mut m = Matrix::zeros(t.state_dim(), 1);
                m.set(0, 0, rng.gen_range(0.0..=1.0));
                m
            })
            .collect();
        for (x, y) in xs.iter().zip(eval_transformer_batch(&t, &xs)?) {
            embed = embed.max((sq.eval(&[x.get(0, 0)])?[0] - y.get(out, 0)).abs());
        }
    }
    claims.push(Claim::within("embedding equivalence", 1e-12, embed));
    Ok(claims)
}

/// Reads a polynomial from JSON (by extension) or the line format.
pub fn load_polynomial(path: &Path, d: Option<usize>, n: Option<usize>) -> Result<Polynomial> {
    let text = std::fs::read_to_string(path)?;
    let f = if path.extension().is_some_and(|e| e == "json") {
        Polynomial::from_json(&text)?
    } else {
        parse_polynomial(&text, d, n)?
    };
    for (want, got, name) in [(d, f.d(), "d"), (n, f.n(), "n")] {
        if let Some(w) = want {
            if w != got {
                return Err(Error::Precondition(format!("{name} = {w} requested, file has {got}")));
            }
        }
    }
    Ok(f)
}

/// `path` with its extension replaced by `manifest.json`.
pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("manifest.json")
}
