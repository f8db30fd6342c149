//! Explicit Transformer weights approximating a column-symmetric polynomial.
//!
//! The pipeline has four stages acting on one state matrix with `n + 1`
//! columns, the last of which starts at zero:
//!
//! 1. a per-column ReLU network (the monomial bank) embedded in feed-forward
//!    layers computes every monomial `x^p`, `1 ≤ |p| ≤ s`, of each column;
//! 2. one attention layer with zero logits sums the columns into column
//!    `n + 1`, giving every rank-1 monomial column-symmetric polynomial;
//! 3. a rank recursion builds rank `r + 1` from ranks `r` and 1 via the
//!    product gadget, clamping every result into `[0, P(n, r + 1)]`;
//! 4. one feed-forward layer writes the weighted sum into the readout row.
//!
//! Only column `n + 1` is meaningful after stage 2.

use std::collections::HashMap;
use std::fmt;

use num::{BigRational, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::combinatorics::{
    enumerate_multi_indices, enumerate_rank_tuples, falling_factorial, MultiIndex, RankTuple,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::networks::{
    compose_ffn, parallel_ffn, AttentionParams, FeedForwardParams, FfnNetwork, SizeReport,
    TransformerBlock, TransformerNetwork,
};
use crate::polyoracle::{check_column_symmetric, decompose, merged_tuples, to_f64, Polynomial};
use crate::sawtooth::{
    build_clamped_product_ffn, build_product_ffn, clamped_product_ref, product_ref, GadgetParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawBudget")]
pub struct BuildBudget {
    d: usize,
    n: usize,
    s: u32,
    gadget: GadgetParams,
}

#[derive(Deserialize)]
struct RawBudget {
    d: usize,
    n: usize,
    s: u32,
    gadget: GadgetParams,
}

impl TryFrom<RawBudget> for BuildBudget {
    type Error = Error;

    fn try_from(raw: RawBudget) -> Result<Self> {
        BuildBudget::new(raw.d, raw.n, raw.s, raw.gadget.n_width(), raw.gadget.l_depth())
    }
}

impl BuildBudget {
    pub fn new(d: usize, n: usize, s: u32, n_width: usize, l_depth: usize) -> Result<Self> {
        if d == 0 || n == 0 || s == 0 {
            return Err(Error::InvalidBudget(format!(
                "d, n, s must be positive (got d={d}, n={n}, s={s})"
            )));
        }
        if s > 12 {
            return Err(Error::InvalidBudget(format!("degree {s} is beyond the supported 12")));
        }
        let gadget = GadgetParams::new(n_width, l_depth)?;
        Ok(BuildBudget { d, n, s, gadget })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> u32 {
        self.s
    }

    pub fn gadget(&self) -> GadgetParams {
        self.gadget
    }

    /// Same budget for a different number of columns.
    pub fn with_columns(&self, n: usize) -> Result<Self> {
        BuildBudget::new(self.d, n, self.s, self.gadget.n_width(), self.gadget.l_depth())
    }

    fn nf(&self) -> f64 {
        self.gadget.n_width() as f64
    }

    fn lf(&self) -> usize {
        self.gadget.l_depth()
    }

    fn unit(&self) -> f64 {
        self.gadget.unit_error()
    }

    /// `12·s·d^s·N`, the width allowance of the bank and of the rank-1 stage.
    pub fn bank_width_bound(&self) -> f64 {
        12.0 * self.s as f64 * (self.d as f64).powi(self.s as i32) * self.nf()
    }

    /// `(s-1)(L+1)`.
    pub fn bank_depth_bound(&self) -> usize {
        (self.s as usize - 1) * (self.lf() + 1)
    }

    /// `(s-1)(L+1) + 1`.
    pub fn rank1_depth_bound(&self) -> usize {
        self.bank_depth_bound() + 1
    }

    /// `12·(2d)^s·N`, shared by the recursion stage and the whole network.
    pub fn network_width_bound(&self) -> f64 {
        12.0 * (2.0 * self.d as f64).powi(self.s as i32) * self.nf()
    }

    /// `(s-1)(L+2)`.
    pub fn recursion_depth_bound(&self) -> usize {
        (self.s as usize - 1) * (self.lf() + 2)
    }

    /// `2sL + 3s`.
    pub fn network_depth_bound(&self) -> usize {
        2 * self.s as usize * self.lf() + 3 * self.s as usize
    }

    /// `(j-1)·N^{-L}` for a degree-`j` monomial.
    pub fn monomial_error_bound(&self, degree: u32) -> f64 {
        (degree.saturating_sub(1)) as f64 * self.unit()
    }

    /// `n(|p|-1)·N^{-L}` for the rank-1 polynomial `m_p`.
    pub fn rank1_error_bound(&self, degree: u32) -> f64 {
        self.n as f64 * self.monomial_error_bound(degree)
    }

    /// `(P(n+r-1, r)·∏(|p_i|+1) - n^r)·N^{-L}`; reduces to the rank-1 bound
    /// only in spirit, so rank-1 tuples use [`Self::rank1_error_bound`].
    pub fn tuple_error_bound(&self, t: &RankTuple) -> f64 {
        if t.rank() == 1 {
            return self.rank1_error_bound(t.total_degree());
        }
        let r = t.rank() as u32;
        let n = self.n as f64;
        let falling: f64 = (0..r).map(|i| n + r as f64 - 1.0 - i as f64).product();
        let parts: f64 = t.parts().iter().map(|p| p.degree() as f64 + 1.0).product();
        (falling * parts - n.powi(r as i32)) * self.unit()
    }

    /// `8^s·N^{-L}·f(1)`.
    pub fn network_error_bound(&self, f_at_ones: f64) -> f64 {
        8f64.powi(self.s as i32) * self.unit() * f_at_ones
    }
}

/// A quantity tracked in a fixed row of the state.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum Quantity {
    /// Monomial `x^p` of a single column (bank output).
    Monomial(MultiIndex),
    /// Monomial column-symmetric polynomial `m_t`, read in column `n + 1`.
    Tuple(RankTuple),
    Readout,
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quantity::Monomial(p) => write!(f, "x^{p}"),
            Quantity::Tuple(t) => write!(f, "m{t}"),
            Quantity::Readout => write!(f, "readout"),
        }
    }
}

/// Row assignment of tracked quantities. Raw inputs always occupy rows
/// `0..d`; entries are injective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowMap {
    input_rows: usize,
    entries: Vec<(Quantity, usize)>,
}

impl RowMap {
    fn new(input_rows: usize, entries: Vec<(Quantity, usize)>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (q, row) in &entries {
            if let Some(prev) = seen.insert(*row, q) {
                return Err(Error::Layout(format!("{prev} and {q} share row {row}")));
            }
        }
        Ok(RowMap { input_rows, entries })
    }

    pub fn input_rows(&self) -> usize {
        self.input_rows
    }

    pub fn entries(&self) -> &[(Quantity, usize)] {
        &self.entries
    }

    pub fn row(&self, q: &Quantity) -> Option<usize> {
        self.entries.iter().find(|(k, _)| k == q).map(|(_, r)| *r)
    }

    pub fn monomial_row(&self, p: &MultiIndex) -> Option<usize> {
        self.row(&Quantity::Monomial(p.clone()))
    }

    pub fn tuple_row(&self, t: &RankTuple) -> Option<usize> {
        self.row(&Quantity::Tuple(t.clone()))
    }
}

/// The state cell holding the approximation of `f(X)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadOut {
    pub row: usize,
    pub column: usize,
    /// Constant term of `f`, added by the readout layer.
    pub bias: f64,
}

impl ReadOut {
    pub fn read(&self, state: &Matrix) -> f64 {
        state.get(self.row, self.column)
    }
}

/// Feed-forward layer assembled unit by unit, then emitted dense.
struct FfBuilder {
    dim: usize,
    units: Vec<(Vec<(usize, f64)>, f64)>,
    outputs: Vec<(usize, usize, f64)>,
    b2: Vec<f64>,
}

impl FfBuilder {
    fn new(dim: usize) -> Self {
        FfBuilder {
            dim,
            units: Vec::new(),
            outputs: Vec::new(),
            b2: vec![0.0; dim],
        }
    }

    /// Adds the hidden unit `ReLU(Σ w·state[row] + bias)`.
    fn unit(&mut self, weights: Vec<(usize, f64)>, bias: f64) -> usize {
        self.units.push((weights, bias));
        self.units.len() - 1
    }

    /// Adds `weight · unit` to `row`.
    fn write(&mut self, row: usize, unit: usize, weight: f64) {
        self.outputs.push((row, unit, weight));
    }

    /// `ReLU(state[row])` written back with weight -1, zeroing a nonnegative row.
    fn clear(&mut self, row: usize) {
        let u = self.unit(vec![(row, 1.0)], 0.0);
        self.write(row, u, -1.0);
    }

    fn build(mut self) -> Result<FeedForwardParams> {
        if self.units.is_empty() {
            self.units.push((Vec::new(), 0.0));
        }
        let r = self.units.len();
        let mut w1 = Matrix::zeros(r, self.dim);
        let mut b1 = vec![0.0; r];
        for (u, (weights, bias)) in self.units.iter().enumerate() {
            for &(row, w) in weights {
                w1.add_at(u, row, w);
            }
            b1[u] = *bias;
        }
        let mut w2 = Matrix::zeros(self.dim, r);
        for &(row, u, w) in &self.outputs {
            w2.add_at(row, u, w);
        }
        FeedForwardParams::new(w1, b1, w2, self.b2)
    }

    fn block(self) -> Result<TransformerBlock> {
        let dim = self.dim;
        Ok(TransformerBlock {
            attention: AttentionParams::inert(dim),
            feed_forward: self.build()?,
        })
    }
}

fn max_layer_dim(f: &FfnNetwork) -> usize {
    f.layers()
        .iter()
        .map(|l| l.output_dim())
        .chain(std::iter::once(f.input_dim()))
        .max()
        .expect("nonempty")
}

/// Feed-forward blocks running `f` inside rows `offset..offset + 2W`, input in
/// the first half. Returns the blocks and the row where the output starts.
fn embed_blocks(
    f: &FfnNetwork,
    offset: usize,
    half: usize,
    state_dim: usize,
) -> Result<(Vec<TransformerBlock>, usize)> {
    let layers = f.layers();
    let depth = f.depth();
    let base = |step: usize| offset + if step.is_multiple_of(2) { 0 } else { half };
    let mut blocks = Vec::with_capacity(depth.max(1));
    let fused_last = |b: &mut FfBuilder, units: &[usize], out_base: usize| {
        let last = layers.last().expect("nonempty");
        for o in 0..last.output_dim() {
            for (v, &u) in units.iter().enumerate() {
                let w = last.weight.get(o, v);
                if w != 0.0 {
                    b.write(out_base + o, u, w);
                }
            }
            b.b2[out_base + o] += last.bias[o];
        }
    };
    if depth == 0 {
        let mut b = FfBuilder::new(state_dim);
        let cur = base(0);
        let units: Vec<usize> = (0..f.input_dim())
            .map(|k| {
                let u = b.unit(vec![(cur + k, 1.0)], 0.0);
                b.write(cur + k, u, -1.0);
                u
            })
            .collect();
        fused_last(&mut b, &units, base(1));
        blocks.push(b.block()?);
        return Ok((blocks, base(1)));
    }
    for (i, layer) in layers[..depth].iter().enumerate() {
        let (cur, next) = (base(i), base(i + 1));
        let mut b = FfBuilder::new(state_dim);
        let units: Vec<usize> = (0..layer.output_dim())
            .map(|u| {
                let weights = (0..layer.input_dim())
                    .filter(|&k| layer.weight.get(u, k) != 0.0)
                    .map(|k| (cur + k, layer.weight.get(u, k)))
                    .collect();
                b.unit(weights, layer.bias[u])
            })
            .collect();
        if i + 1 < depth {
            for (v, &u) in units.iter().enumerate() {
                b.write(next + v, u, 1.0);
            }
        } else {
            fused_last(&mut b, &units, next);
        }
        for k in 0..layer.input_dim() {
            b.clear(cur + k);
        }
        blocks.push(b.block()?);
    }
    Ok((blocks, base(depth)))
}

/// Transformer realizing an FNN whose inputs, hidden values, and outputs are
/// nonnegative on the intended domain.
///
/// The state has `2W` rows, `W` the largest layer dimension. Each block reads
/// one half, writes the next hidden layer into the other half, and zeroes the
/// half it read. Attention is inert throughout. The input goes in rows
/// `0..input_dim`; the output lands at [`embedded_output_row`].
pub fn embed_ffn_in_transformer(f: &FfnNetwork) -> Result<TransformerNetwork> {
    let half = max_layer_dim(f);
    let (blocks, _) = embed_blocks(f, 0, half, 2 * half)?;
    TransformerNetwork::new(2 * half, blocks)
}

/// First output row of [`embed_ffn_in_transformer`].
pub fn embedded_output_row(f: &FfnNetwork) -> usize {
    if f.depth().max(1) % 2 == 1 {
        max_layer_dim(f)
    } else {
        0
    }
}

/// `W_O = I`, `W_V = (n+1)·I`, `W_K = W_Q = 0`: every column gains the row
/// sums over all `n + 1` columns.
pub fn build_summation_attention(d_state: usize, n: usize) -> Result<AttentionParams> {
    AttentionParams::new(
        Matrix::identity(d_state),
        Matrix::identity(d_state).scale((n + 1) as f64),
        Matrix::zeros(d_state, d_state),
        Matrix::zeros(d_state, d_state),
    )
}

/// Per-column network mapping `x ∈ [0,1]^d` to every monomial `x^p`,
/// `1 ≤ |p| ≤ s`, in canonical order. Degree `j` is built from the degree
/// `j-1` prefix `p - e_i` and `x_i`, `i` the lowest row with `p_i > 0`.
pub fn build_monomial_bank(b: &BuildBudget) -> Result<(FfnNetwork, RowMap)> {
    let d = b.d;
    let h = build_clamped_product_ffn(&b.gadget)?;
    let mut bank = FfnNetwork::identity(d, 0);
    let mut known: Vec<MultiIndex> = enumerate_multi_indices(d, 1);
    for j in 2..=b.s {
        let k = known.len();
        let fresh = crate::combinatorics::multi_indices_of_degree(d, j);
        let mut parts = vec![FfnNetwork::identity(k, b.lf() + 1)];
        let mut select = Matrix::zeros(k + 2 * fresh.len(), k);
        for c in 0..k {
            select.set(c, c, 1.0);
        }
        for (t, p) in fresh.iter().enumerate() {
            let i = p.first_nonzero().expect("degree ≥ 2");
            let mut prefix = p.exponents().to_vec();
            prefix[i] -= 1;
            let prefix = MultiIndex::new(prefix);
            let at = known.iter().position(|q| *q == prefix).expect("prefix enumerated");
            select.set(k + 2 * t, at, 1.0);
            select.set(k + 2 * t + 1, i, 1.0);
            parts.push(h.clone());
        }
        let stage = parallel_ffn(&parts)?.precompose_affine(&select, &vec![0.0; select.rows()])?;
        bank = compose_ffn(&bank, &stage)?;
        known.extend(fresh);
    }
    let entries = known
        .into_iter()
        .enumerate()
        .map(|(row, p)| (Quantity::Monomial(p), row))
        .collect();
    Ok((bank, RowMap::new(d, entries)?))
}

/// Rank `r + 1` target of one recursion step.
#[derive(Clone, Debug)]
struct Target {
    tuple: RankTuple,
    parent: RankTuple,
    extra: MultiIndex,
    merged: Vec<RankTuple>,
}

fn targets_of_rank(basis: &[RankTuple], rank: usize) -> Result<Vec<Target>> {
    basis
        .iter()
        .filter(|t| t.rank() == rank)
        .map(|t| {
            let (extra, parent) = t.parts().split_last().expect("rank ≥ 2");
            let parent = RankTuple::new(parent.to_vec())?;
            let merged = merged_tuples(&parent, extra)?;
            Ok(Target {
                tuple: t.clone(),
                parent,
                extra: extra.clone(),
                merged,
            })
        })
        .collect()
}

/// Row plan shared by every stage.
#[derive(Clone, Debug)]
pub struct Layout {
    budget: BuildBudget,
    bank: FfnNetwork,
    bank_half: usize,
    bank_out: usize,
    tf1_rows: usize,
    state_dim: usize,
    basis: Vec<RankTuple>,
    tuple_rows: HashMap<RankTuple, usize>,
    scratch: Vec<usize>,
    readout_row: usize,
}

impl Layout {
    pub fn new(b: &BuildBudget) -> Result<Self> {
        let (bank, _) = build_monomial_bank(b)?;
        let monomials = enumerate_multi_indices(b.d, b.s);
        let (bank_half, tf1_rows, bank_out) = if b.s == 1 {
            (b.d, b.d, 0)
        } else {
            let half = max_layer_dim(&bank);
            let out = if bank.depth() % 2 == 1 { half } else { 0 };
            (half, 2 * half, out)
        };
        let basis = enumerate_rank_tuples(b.d, b.s);
        let mut tuple_rows = HashMap::new();
        for (i, p) in monomials.iter().enumerate() {
            tuple_rows.insert(RankTuple::new(vec![p.clone()])?, bank_out + i);
        }
        let rank1_end = bank_out + monomials.len();
        // Everything outside the rank-1 rows is zero once the sums are taken.
        let mut free = (0..tf1_rows).filter(|r| *r < bank_out || *r >= rank1_end).chain(tf1_rows..);
        let mut take = || free.next().expect("unbounded");
        for t in basis.iter().filter(|t| t.rank() >= 2) {
            tuple_rows.insert(t.clone(), take());
        }
        let width = build_product_ffn(&b.gadget)?.width();
        let most_targets = (2..=b.s as usize)
            .map(|r| basis.iter().filter(|t| t.rank() == r).count())
            .max()
            .unwrap_or(0);
        let halves = match b.lf() {
            1 => 0,
            2 => 1,
            _ => 2,
        };
        let scratch: Vec<usize> = (0..halves * most_targets * width).map(|_| take()).collect();
        let readout_row = take();
        let state_dim = tf1_rows.max(
            std::iter::once(readout_row)
                .chain(scratch.iter().copied())
                .chain(tuple_rows.values().copied())
                .max()
                .expect("readout row")
                + 1,
        );
        Ok(Layout {
            budget: *b,
            bank,
            bank_half,
            bank_out,
            tf1_rows,
            state_dim,
            basis,
            tuple_rows,
            scratch,
            readout_row,
        })
    }

    pub fn budget(&self) -> &BuildBudget {
        &self.budget
    }

    pub fn bank(&self) -> &FfnNetwork {
        &self.bank
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn tf1_rows(&self) -> usize {
        self.tf1_rows
    }

    /// Number of bank blocks before the attention block.
    pub fn bank_blocks(&self) -> usize {
        if self.budget.s == 1 {
            0
        } else {
            self.bank.depth()
        }
    }

    /// Row of bank output `index` (canonical monomial order) in every column.
    pub fn bank_row(&self, index: usize) -> usize {
        self.bank_out + index
    }

    pub fn basis(&self) -> &[RankTuple] {
        &self.basis
    }

    pub fn tuple_row(&self, t: &RankTuple) -> Option<usize> {
        self.tuple_rows.get(t).copied()
    }

    pub fn readout_row(&self) -> usize {
        self.readout_row
    }

    pub fn column(&self) -> usize {
        self.budget.n
    }

    /// Embeds a raw `d x n` matrix into the `state_dim x (n+1)` input layout.
    pub fn pad_input(&self, x: &Matrix) -> Result<Matrix> {
        pad_input(x, self.budget.d, self.budget.n, self.state_dim)
    }

    fn row_map(&self, upto_rank: usize, with_readout: bool) -> Result<RowMap> {
        let mut entries: Vec<(Quantity, usize)> = self
            .basis
            .iter()
            .filter(|t| t.rank() <= upto_rank)
            .map(|t| (Quantity::Tuple(t.clone()), self.tuple_rows[t]))
            .collect();
        if with_readout {
            entries.push((Quantity::Readout, self.readout_row));
        }
        RowMap::new(self.budget.d, entries)
    }
}

fn pad_input(x: &Matrix, d: usize, n: usize, state_dim: usize) -> Result<Matrix> {
    if x.shape() != (d, n) {
        return Err(Error::Layout(format!(
            "expected a {d}x{n} input, got {}x{}",
            x.rows(),
            x.cols()
        )));
    }
    if let Some(v) = x.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Layout(format!("input entry {v} outside [0, 1]")));
    }
    Ok(x.pad_cols(n + 1).pad_rows(state_dim))
}

fn tf1_blocks(layout: &Layout, state_dim: usize) -> Result<Vec<TransformerBlock>> {
    let b = &layout.budget;
    let mut blocks = if b.s == 1 {
        Vec::new()
    } else {
        embed_blocks(&layout.bank, 0, layout.bank_half, state_dim)?.0
    };
    blocks.push(TransformerBlock {
        attention: build_summation_attention(state_dim, b.n)?,
        feed_forward: FeedForwardParams::zero(state_dim),
    });
    Ok(blocks)
}

/// Bank plus summation attention on a state of `tf1_rows` rows. Afterwards
/// column `n + 1` holds every rank-1 polynomial at its RowMap row.
pub fn build_rank1_network(b: &BuildBudget) -> Result<(TransformerNetwork, RowMap)> {
    let layout = Layout::new(b)?;
    let net = TransformerNetwork::new(layout.tf1_rows, tf1_blocks(&layout, layout.tf1_rows)?)?;
    Ok((net, layout.row_map(1, false)?))
}

fn scale_or_zero(p: u64) -> f64 {
    if p == 0 {
        0.0
    } else {
        1.0 / p as f64
    }
}

fn recursion_blocks(layout: &Layout) -> Result<Vec<TransformerBlock>> {
    let b = &layout.budget;
    let dim = layout.state_dim;
    let n = b.n as u64;
    let gadget = build_product_ffn(&b.gadget)?;
    let layers = gadget.layers();
    let depth = gadget.depth();
    let width = gadget.width();
    let mut blocks = Vec::new();
    for r in 1..b.s as usize {
        let targets = targets_of_rank(&layout.basis, r + 1)?;
        let p_parent = falling_factorial(n, r as u64)?;
        let ceiling = falling_factorial(n, r as u64 + 1)? as f64;
        let in_parent = scale_or_zero(p_parent);
        let in_extra = 1.0 / n as f64;
        let out_scale = (n * p_parent) as f64;
        let row = |t: &RankTuple| layout.tuple_rows[t];
        let span = targets.len() * width;
        let scratch = |step: usize, q: usize, u: usize| layout.scratch[(step % 2) * span + q * width + u];

        for (i, layer) in layers[..depth].iter().enumerate() {
            let mut ff = FfBuilder::new(dim);
            for (q, t) in targets.iter().enumerate() {
                let units: Vec<usize> = (0..layer.output_dim())
                    .map(|u| {
                        let weights = if i == 0 {
                            vec![
                                (row(&t.parent), layer.weight.get(u, 0) * in_parent),
                                (
                                    row(&RankTuple::new(vec![t.extra.clone()]).expect("nonzero")),
                                    layer.weight.get(u, 1) * in_extra,
                                ),
                            ]
                        } else {
                            (0..layer.input_dim())
                                .filter(|&v| layer.weight.get(u, v) != 0.0)
                                .map(|v| (scratch(i - 1, q, v), layer.weight.get(u, v)))
                                .collect()
                        };
                        ff.unit(weights, layer.bias[u])
                    })
                    .collect();
                if i + 1 < depth {
                    for (u, &unit) in units.iter().enumerate() {
                        ff.write(scratch(i, q, u), unit, 1.0);
                    }
                } else {
                    let last = layers.last().expect("nonempty");
                    let target = row(&t.tuple);
                    for (u, &unit) in units.iter().enumerate() {
                        ff.write(target, unit, out_scale * last.weight.get(0, u));
                    }
                    ff.b2[target] += out_scale * last.bias[0];
                    for m in &t.merged {
                        let unit = ff.unit(vec![(row(m), 1.0)], 0.0);
                        ff.write(target, unit, -1.0);
                    }
                }
                if i > 0 {
                    for v in 0..layer.input_dim() {
                        ff.clear(scratch(i - 1, q, v));
                    }
                }
            }
            blocks.push(ff.block()?);
        }

        let mut lower = FfBuilder::new(dim);
        let mut upper = FfBuilder::new(dim);
        for t in &targets {
            let z = row(&t.tuple);
            let u = lower.unit(vec![(z, -1.0)], 0.0);
            lower.write(z, u, 1.0);
            let u = upper.unit(vec![(z, 1.0)], -ceiling);
            upper.write(z, u, -1.0);
        }
        blocks.push(lower.block()?);
        blocks.push(upper.block()?);
    }
    Ok(blocks)
}

/// Rank recursion on the full state. Expects column `n + 1` to carry the
/// rank-1 polynomials at their RowMap rows and zeros in every other row.
pub fn build_rank_recursion(b: &BuildBudget) -> Result<(TransformerNetwork, RowMap)> {
    let layout = Layout::new(b)?;
    let net = TransformerNetwork::new(layout.state_dim, recursion_blocks(&layout)?)?;
    Ok((net, layout.row_map(b.s as usize, false)?))
}

/// Extends a network to a larger state by zero rows and columns.
pub fn pad_state(net: &TransformerNetwork, dim: usize) -> Result<TransformerNetwork> {
    if dim < net.state_dim() {
        return Err(Error::Layout(format!(
            "cannot shrink state {} to {dim}",
            net.state_dim()
        )));
    }
    let blocks = net
        .blocks()
        .iter()
        .map(|blk| {
            let a = &blk.attention;
            let f = &blk.feed_forward;
            let mut b2 = f.b2().to_vec();
            b2.resize(dim, 0.0);
            Ok(TransformerBlock {
                attention: if a.is_inert() {
                    AttentionParams::inert(dim)
                } else {
                    AttentionParams::new(
                        a.w_o().pad_rows(dim),
                        a.w_v().pad_cols(dim),
                        a.w_k().pad_cols(dim),
                        a.w_q().pad_cols(dim),
                    )?
                },
                feed_forward: FeedForwardParams::new(
                    f.w1().pad_cols(dim),
                    f.b1().to_vec(),
                    f.w2().pad_rows(dim),
                    b2,
                )?,
            })
        })
        .collect::<Result<_>>()?;
    TransformerNetwork::new(dim, blocks)
}

/// Checks the target preconditions and returns `f(1)` with the decomposition.
pub fn check_target(f: &Polynomial, b: &BuildBudget) -> Result<(f64, Vec<(BigRational, RankTuple)>)> {
    if (f.d(), f.n()) != (b.d, b.n) {
        return Err(Error::Precondition(format!(
            "polynomial is over {}x{} matrices, budget is {}x{}",
            f.d(),
            f.n(),
            b.d,
            b.n
        )));
    }
    if f.degree() > b.s {
        return Err(Error::Precondition(format!(
            "polynomial degree {} exceeds s = {}",
            f.degree(),
            b.s
        )));
    }
    check_column_symmetric(f)?;
    let at_ones = crate::polyoracle::normalize_check(f)?;
    if at_ones > 1.0 + 1e-12 {
        return Err(Error::Precondition(format!(
            "f(1) = {at_ones} exceeds 1; rescale the coefficients"
        )));
    }
    let parts = decompose(f)?;
    if let Some((c, t)) = parts.iter().find(|(c, _)| !c.is_positive()) {
        return Err(Error::Precondition(format!("basis coefficient {c} on {t} is not positive")));
    }
    Ok((at_ones, parts))
}

/// Every stage of a full build with the bookkeeping needed to audit it.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub layout: Layout,
    pub rank1: TransformerNetwork,
    pub recursion: TransformerNetwork,
    pub network: TransformerNetwork,
    pub readout: ReadOut,
    pub row_map: RowMap,
    pub decomposition: Vec<(BigRational, RankTuple)>,
    pub f_at_ones: f64,
}

impl Pipeline {
    pub fn budget(&self) -> &BuildBudget {
        &self.layout.budget
    }

    /// Blocks of the bank, the attention block, and the recursion, in order.
    pub fn stage_blocks(&self) -> (usize, usize, usize) {
        (
            self.layout.bank_blocks(),
            self.layout.bank_blocks() + 1,
            self.layout.bank_blocks() + 1 + self.recursion.depth(),
        )
    }

    pub fn coefficient(&self, t: &RankTuple) -> f64 {
        self.decomposition
            .iter()
            .find(|(_, u)| u == t)
            .map(|(c, _)| to_f64(c))
            .unwrap_or(0.0)
    }
}

pub fn build_pipeline(f: &Polynomial, b: &BuildBudget) -> Result<Pipeline> {
    let (f_at_ones, decomposition) = check_target(f, b).map_err(|e| e.in_stage("target"))?;
    let layout = Layout::new(b).map_err(|e| e.in_stage("layout"))?;
    let dim = layout.state_dim;
    let rank1 = TransformerNetwork::new(layout.tf1_rows, tf1_blocks(&layout, layout.tf1_rows)?)
        .map_err(|e| e.in_stage("rank-1 stage"))?;
    let recursion = TransformerNetwork::new(dim, recursion_blocks(&layout)?)
        .map_err(|e| e.in_stage("rank recursion"))?;

    let constant = to_f64(
        &decomposition
            .iter()
            .find(|(_, t)| t.rank() == 0)
            .map(|(c, _)| c.clone())
            .unwrap_or_else(BigRational::zero),
    );
    let mut ff = FfBuilder::new(dim);
    for t in &layout.basis {
        let c = decomposition
            .iter()
            .find(|(_, u)| u == t)
            .map(|(c, _)| to_f64(c))
            .unwrap_or(0.0);
        let u = ff.unit(vec![(layout.tuple_rows[t], 1.0)], 0.0);
        ff.write(layout.readout_row, u, c);
    }
    ff.b2[layout.readout_row] = constant;
    let readout_net = TransformerNetwork::new(dim, vec![ff.block()?])?;

    let network = pad_state(&rank1, dim)?
        .then(&recursion)?
        .then(&readout_net)
        .map_err(|e| e.in_stage("assembly"))?;
    let readout = ReadOut {
        row: layout.readout_row,
        column: b.n,
        bias: constant,
    };
    let row_map = layout.row_map(b.s as usize, true)?;
    Ok(Pipeline {
        layout,
        rank1,
        recursion,
        network,
        readout,
        row_map,
        decomposition,
        f_at_ones,
    })
}

/// Full construction: a Transformer whose readout cell approximates `f(X)`.
pub fn assemble_network(f: &Polynomial, b: &BuildBudget) -> Result<(TransformerNetwork, ReadOut)> {
    let p = build_pipeline(f, b)?;
    Ok((p.network, p.readout))
}

/// Evaluates an assembled network on a raw `d x n` input.
pub fn eval_readout(net: &TransformerNetwork, readout: &ReadOut, x: &Matrix) -> Result<f64> {
    let n = readout.column;
    let padded = pad_input(x, x.rows(), n, net.state_dim())?;
    Ok(readout.read(&crate::networks::eval_transformer(net, &padded)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SizeBounds {
    pub width: f64,
    pub depth: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub name: String,
    pub first_block: usize,
    pub blocks: usize,
    pub size: SizeReport,
    pub bounds: SizeBounds,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecompositionEntry {
    pub coefficient: String,
    pub tuple: RankTuple,
}

/// Everything a consumer needs to read and audit a built network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub budget: BuildBudget,
    pub state_dim: usize,
    pub input_columns: usize,
    pub row_map: RowMap,
    pub readout: ReadOut,
    pub size: SizeReport,
    pub bounds: SizeBounds,
    pub error_bound: f64,
    pub f_at_ones: f64,
    pub stages: Vec<StageManifest>,
    pub decomposition: Vec<DecompositionEntry>,
}

pub fn manifest(p: &Pipeline) -> Manifest {
    let b = p.budget();
    let (bank_end, tf1_end, _) = p.stage_blocks();
    let bank_size = p.layout.bank.size_report();
    let stages = vec![
        StageManifest {
            name: "monomial bank (per-column FNN)".into(),
            first_block: 0,
            blocks: bank_end,
            size: bank_size,
            bounds: SizeBounds {
                width: b.bank_width_bound(),
                depth: b.bank_depth_bound(),
            },
        },
        StageManifest {
            name: "rank-1 stage".into(),
            first_block: 0,
            blocks: tf1_end,
            size: p.rank1.size_report(),
            bounds: SizeBounds {
                width: b.bank_width_bound(),
                depth: b.rank1_depth_bound(),
            },
        },
        StageManifest {
            name: "rank recursion".into(),
            first_block: tf1_end,
            blocks: p.recursion.depth(),
            size: p.recursion.size_report(),
            bounds: SizeBounds {
                width: b.network_width_bound(),
                depth: b.recursion_depth_bound(),
            },
        },
    ];
    Manifest {
        budget: *b,
        state_dim: p.network.state_dim(),
        input_columns: b.n + 1,
        row_map: p.row_map.clone(),
        readout: p.readout,
        size: p.network.size_report(),
        bounds: SizeBounds {
            width: b.network_width_bound(),
            depth: b.network_depth_bound(),
        },
        error_bound: b.network_error_bound(p.f_at_ones),
        f_at_ones: p.f_at_ones,
        stages,
        decomposition: p
            .decomposition
            .iter()
            .map(|(c, t)| DecompositionEntry {
                coefficient: c.to_string(),
                tuple: t.clone(),
            })
            .collect(),
    }
}

/// Scalar model of the constructed arithmetic, using the gadget reference
/// functions instead of network weights.
#[derive(Clone, Debug)]
pub struct ReferenceValues {
    /// `bank[j][k]`: monomial `k` of column `j`.
    pub bank: Vec<Vec<f64>>,
    pub tuples: HashMap<RankTuple, f64>,
    pub readout: f64,
}

pub fn bank_reference(b: &BuildBudget, column: &[f64]) -> Result<Vec<f64>> {
    let monomials = enumerate_multi_indices(b.d, b.s);
    let mut values: Vec<f64> = Vec::with_capacity(monomials.len());
    for p in &monomials {
        let v = if p.degree() == 1 {
            column[p.first_nonzero().expect("degree 1")]
        } else {
            let i = p.first_nonzero().expect("degree ≥ 2");
            let mut prefix = p.exponents().to_vec();
            prefix[i] -= 1;
            let prefix = MultiIndex::new(prefix);
            let at = monomials.iter().position(|q| *q == prefix).expect("prefix");
            clamped_product_ref(&b.gadget, values[at], column[i])?
        };
        values.push(v);
    }
    Ok(values)
}

pub fn reference_values(p: &Pipeline, x: &Matrix) -> Result<ReferenceValues> {
    let b = p.budget();
    let n = b.n as u64;
    let bank: Vec<Vec<f64>> = (0..b.n)
        .map(|j| bank_reference(b, &x.column(j)))
        .collect::<Result<_>>()?;
    let mut tuples = HashMap::new();
    for (k, q) in enumerate_multi_indices(b.d, b.s).into_iter().enumerate() {
        let sum: f64 = bank.iter().map(|col| col[k]).sum();
        tuples.insert(RankTuple::new(vec![q])?, sum);
    }
    for r in 1..b.s as usize {
        let p_parent = falling_factorial(n, r as u64)?;
        let ceiling = falling_factorial(n, r as u64 + 1)? as f64;
        for t in targets_of_rank(&p.layout.basis, r + 1)? {
            let a = tuples[&t.parent] * scale_or_zero(p_parent);
            let e = tuples[&RankTuple::new(vec![t.extra.clone()])?] / n as f64;
            let merged: f64 = t.merged.iter().map(|m| tuples[m]).sum();
            let z = (n * p_parent) as f64 * product_ref(&b.gadget, a.clamp(0.0, 1.0), e.clamp(0.0, 1.0))?
                - merged;
            tuples.insert(t.tuple.clone(), z.max(0.0).min(ceiling));
        }
    }
    let readout = p.readout.bias
        + p.layout
            .basis
            .iter()
            .map(|t| p.coefficient(t) * tuples[t])
            .sum::<f64>();
    Ok(ReferenceValues {
        bank,
        tuples,
        readout,
    })
}
