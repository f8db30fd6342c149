//! Multi-indices, rank tuples, and the exact counting functions used to index
//! the monomial column-symmetric basis.
//!
//! The canonical orders defined here are shared by the oracle, the row layout
//! of the constructor, and every report.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent vector `p ∈ ℕ^d` of one column's monomial factor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex {
    exponents: Vec<u32>,
}

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        MultiIndex { exponents }
    }

    pub fn zero(d: usize) -> Self {
        MultiIndex {
            exponents: vec![0; d],
        }
    }

    /// Unit vector `e_i`.
    pub fn unit(d: usize, i: usize) -> Self {
        let mut p = MultiIndex::zero(d);
        p.exponents[i] = 1;
        p
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.exponents.iter().all(|&e| e == 0)
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex {
            exponents: self
                .exponents
                .iter()
                .zip(&other.exponents)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Lowest row with a positive exponent.
    pub fn first_nonzero(&self) -> Option<usize> {
        self.exponents.iter().position(|&e| e > 0)
    }

    /// `x^p = ∏ x_i^{p_i}`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(x)
            .map(|(&e, &v)| v.powi(e as i32))
            .product()
    }

    /// Graded comparison: lower degree first, then lexicographically larger first.
    pub fn graded_cmp(&self, other: &MultiIndex) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.exponents.cmp(&self.exponents))
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.exponents.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

/// Non-increasing tuple `p_1 ≥ … ≥ p_r` of nonzero multi-indices, indexing the
/// monomial column-symmetric polynomial `m_{p_1..p_r}`. The empty tuple stands
/// for the constant polynomial 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<MultiIndex>", into = "Vec<MultiIndex>")]
pub struct RankTuple {
    parts: Vec<MultiIndex>,
}

impl TryFrom<Vec<MultiIndex>> for RankTuple {
    type Error = Error;

    fn try_from(parts: Vec<MultiIndex>) -> Result<Self> {
        RankTuple::new(parts)
    }
}

impl From<RankTuple> for Vec<MultiIndex> {
    fn from(t: RankTuple) -> Self {
        t.parts
    }
}

impl RankTuple {
    /// Validates the order invariant.
    pub fn new(parts: Vec<MultiIndex>) -> Result<Self> {
        if let Some(p) = parts.iter().find(|p| p.is_zero()) {
            return Err(Error::Precondition(format!("rank tuple part {p} has degree 0")));
        }
        if parts.windows(2).any(|w| w[0].dim() != w[1].dim()) {
            return Err(Error::Precondition("rank tuple parts differ in dimension".into()));
        }
        if parts.windows(2).any(|w| w[0].exponents < w[1].exponents) {
            return Err(Error::Precondition("rank tuple parts must be non-increasing".into()));
        }
        Ok(RankTuple { parts })
    }

    /// Sorts arbitrary nonzero parts into canonical non-increasing order.
    pub fn canonical(mut parts: Vec<MultiIndex>) -> Result<Self> {
        parts.sort_by(|a, b| b.exponents.cmp(&a.exponents));
        RankTuple::new(parts)
    }

    pub fn empty() -> Self {
        RankTuple { parts: Vec::new() }
    }

    pub fn parts(&self) -> &[MultiIndex] {
        &self.parts
    }

    pub fn rank(&self) -> usize {
        self.parts.len()
    }

    pub fn total_degree(&self) -> u32 {
        self.parts.iter().map(MultiIndex::degree).sum()
    }

    /// Canonical order: by rank, then total degree, then part by part in
    /// graded multi-index order.
    pub fn canonical_cmp(&self, other: &RankTuple) -> Ordering {
        self.rank()
            .cmp(&other.rank())
            .then_with(|| self.total_degree().cmp(&other.total_degree()))
            .then_with(|| {
                self.parts
                    .iter()
                    .zip(&other.parts)
                    .map(|(a, b)| a.graded_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
    }
}

impl fmt::Display for RankTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, p) in self.parts.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, "]")
    }
}

fn overflow(what: impl Into<String>) -> Error {
    Error::Overflow(what.into())
}

/// `C(n, k)`, exact, rejecting results beyond `u64`.
pub fn binomial(n: u64, k: u64) -> Result<u64> {
    if k > n {
        return Ok(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc·(n-i) is divisible by (i+1) after multiplication.
        acc = acc
            .checked_mul((n - i) as u128)
            .ok_or_else(|| overflow(format!("C({n},{k})")))?
            / (i + 1) as u128;
    }
    u64::try_from(acc).map_err(|_| overflow(format!("C({n},{k})")))
}

/// Number of `(p_1..p_n) ∈ ℕ^n` with `Σ p_i = k`, that is `C(k+n-1, n-1)`.
pub fn count_compositions(n: u64, k: u64) -> Result<u64> {
    if n == 0 {
        return Err(Error::Precondition("count_compositions needs n ≥ 1".into()));
    }
    let top = k
        .checked_add(n - 1)
        .ok_or_else(|| overflow("count_compositions"))?;
    binomial(top, n - 1)
}

pub fn factorial(n: u64) -> Result<u64> {
    (1..=n).try_fold(1u64, |acc, i| {
        acc.checked_mul(i).ok_or_else(|| overflow(format!("{n}!")))
    })
}

/// `P(n, r) = n!/(n-r)!`, and 0 when `r > n`.
pub fn falling_factorial(n: u64, r: u64) -> Result<u64> {
    if r > n {
        return Ok(0);
    }
    ((n - r + 1)..=n).try_fold(1u64, |acc, i| {
        acc.checked_mul(i)
            .ok_or_else(|| overflow(format!("P({n},{r})")))
    })
}

/// All `p ∈ ℕ^d` with `|p| = degree`, lexicographically descending.
pub fn multi_indices_of_degree(d: usize, degree: u32) -> Vec<MultiIndex> {
    fn fill(prefix: &mut Vec<u32>, d: usize, left: u32, out: &mut Vec<MultiIndex>) {
        if prefix.len() + 1 == d {
            prefix.push(left);
            out.push(MultiIndex::new(prefix.clone()));
            prefix.pop();
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            fill(prefix, d, left - e, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if d > 0 {
        fill(&mut Vec::with_capacity(d), d, degree, &mut out);
    }
    out
}

/// All `p` with `1 ≤ |p| ≤ s` in graded order.
pub fn enumerate_multi_indices(d: usize, s: u32) -> Vec<MultiIndex> {
    (1..=s).flat_map(|j| multi_indices_of_degree(d, j)).collect()
}

/// All non-increasing rank tuples with `Σ|p_i| ≤ s`, `r = 1..s`, in
/// canonical order.
pub fn enumerate_rank_tuples(d: usize, s: u32) -> Vec<RankTuple> {
    let indices = enumerate_multi_indices(d, s);
    // Non-increasing in lexicographic order means positions in `lex` are
    // non-decreasing once `lex` is sorted descending.
    let mut lex = indices.clone();
    lex.sort_by(|a, b| b.exponents.cmp(&a.exponents));

    fn extend(
        lex: &[MultiIndex],
        from: usize,
        budget: u32,
        current: &mut Vec<MultiIndex>,
        out: &mut Vec<RankTuple>,
    ) {
        for (i, p) in lex.iter().enumerate().skip(from) {
            if p.degree() <= budget {
                current.push(p.clone());
                out.push(RankTuple {
                    parts: current.clone(),
                });
                extend(lex, i, budget - p.degree(), current, out);
                current.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(&lex, 0, s, &mut Vec::new(), &mut out);
    out.sort_by(RankTuple::canonical_cmp);
    out
}

/// `∏ i_j!` over multiplicities `i_j` of the distinct parts of the tuple
/// padded with zero multi-indices to length `n`.
pub fn symmetry_coefficient(t: &RankTuple, n: usize) -> Result<u64> {
    if t.rank() > n {
        return Err(Error::Precondition(format!(
            "tuple of rank {} cannot be padded to {n} columns",
            t.rank()
        )));
    }
    let mut acc = factorial((n - t.rank()) as u64)?;
    let mut run = 1u64;
    for w in t.parts.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            acc = acc
                .checked_mul(factorial(run)?)
                .ok_or_else(|| overflow("symmetry coefficient"))?;
            run = 1;
        }
    }
    if t.rank() > 0 {
        acc = acc
            .checked_mul(factorial(run)?)
            .ok_or_else(|| overflow("symmetry coefficient"))?;
    }
    Ok(acc)
}
