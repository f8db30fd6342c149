//! Exact polynomials over the entries of a `d x n` matrix, monomial
//! column-symmetric polynomials, and the algebra used to verify constructions.
//!
//! Coefficients are exact rationals. Exponents are stored column-major
//! (entry `x_{ij}` at `j·d + i`), so comparing exponent vectors compares
//! whole columns first, which is the term order used by [`decompose`].

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;

use num::{BigInt, BigRational, One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::combinatorics::{factorial, symmetry_coefficient, MultiIndex, RankTuple};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Largest `n` accepted by the permutation-sum oracle.
pub const PERMSUM_LIMIT: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Term {
    pub coefficient: BigRational,
    /// Column-major exponents, length `d·n`.
    pub exponents: Vec<u32>,
}

impl Term {
    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }
}

/// Polynomial in canonical merged form: one entry per exponent pattern, no
/// zero coefficients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Polynomial {
    d: usize,
    n: usize,
    terms: BTreeMap<Vec<u32>, BigRational>,
}

impl Polynomial {
    pub fn zero(d: usize, n: usize) -> Self {
        Polynomial {
            d,
            n,
            terms: BTreeMap::new(),
        }
    }

    pub fn from_terms(d: usize, n: usize, terms: impl IntoIterator<Item = Term>) -> Result<Self> {
        let mut p = Polynomial::zero(d, n);
        for t in terms {
            p.add_term(t.exponents, t.coefficient)?;
        }
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree `s`; 0 for constants and the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    /// Terms in ascending term order.
    pub fn terms(&self) -> impl Iterator<Item = Term> + '_ {
        self.terms.iter().map(|(e, c)| Term {
            coefficient: c.clone(),
            exponents: e.clone(),
        })
    }

    pub fn coefficient(&self, exponents: &[u32]) -> BigRational {
        self.terms.get(exponents).cloned().unwrap_or_else(BigRational::zero)
    }

    pub fn constant_term(&self) -> BigRational {
        self.coefficient(&vec![0; self.d * self.n])
    }

    pub fn add_term(&mut self, exponents: Vec<u32>, coefficient: BigRational) -> Result<()> {
        if exponents.len() != self.d * self.n {
            return Err(Error::dims(
                "Polynomial::add_term",
                format!("{} exponents for a {}x{} matrix", exponents.len(), self.d, self.n),
            ));
        }
        match self.terms.entry(exponents) {
            Entry::Vacant(v) => {
                if !coefficient.is_zero() {
                    v.insert(coefficient);
                }
            }
            Entry::Occupied(mut o) => {
                *o.get_mut() += coefficient;
                if o.get().is_zero() {
                    o.remove();
                }
            }
        }
        Ok(())
    }

    /// `self + c·other`.
    pub fn add_scaled(&self, other: &Polynomial, c: &BigRational) -> Result<Polynomial> {
        if (self.d, self.n) != (other.d, other.n) {
            return Err(Error::dims(
                "Polynomial::add_scaled",
                format!("{}x{} vs {}x{}", self.d, self.n, other.d, other.n),
            ));
        }
        let mut out = self.clone();
        for (e, v) in &other.terms {
            out.add_term(e.clone(), v * c)?;
        }
        Ok(out)
    }

    pub fn scale(&self, c: &BigRational) -> Polynomial {
        let mut out = Polynomial::zero(self.d, self.n);
        if !c.is_zero() {
            out.terms = self.terms.iter().map(|(e, v)| (e.clone(), v * c)).collect();
        }
        out
    }

    pub fn sum_of_coefficients(&self) -> BigRational {
        self.terms.values().fold(BigRational::zero(), |a, c| a + c)
    }

    fn swap_columns(&self, a: usize, b: usize) -> BTreeMap<Vec<u32>, BigRational> {
        let d = self.d;
        self.terms
            .iter()
            .map(|(e, c)| {
                let mut e = e.clone();
                for i in 0..d {
                    e.swap(a * d + i, b * d + i);
                }
                (e, c.clone())
            })
            .collect()
    }

    /// Builds `Σ c·m_t`, with the empty tuple standing for the constant 1.
    pub fn from_decomposition(
        d: usize,
        n: usize,
        parts: &[(BigRational, RankTuple)],
    ) -> Result<Polynomial> {
        let mut out = Polynomial::zero(d, n);
        for (c, t) in parts {
            out = out.add_scaled(&expand_monomial_sym(t, d, n)?, c)?;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PolynomialDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Polynomial> {
        let doc: PolynomialDoc = serde_json::from_str(s)?;
        doc.try_into()
    }
}

impl fmt::Display for Polynomial {
    /// One term per line in the text format accepted by [`parse_polynomial`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (e, c) in &self.terms {
            write!(f, "{c}")?;
            for j in 0..self.n {
                for i in 0..self.d {
                    match e[j * self.d + i] {
                        0 => {}
                        1 => write!(f, " * x[{}][{}]", i + 1, j + 1)?,
                        p => write!(f, " * x[{}][{}]^{p}", i + 1, j + 1)?,
                    }
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn check_matrix(op: &'static str, d: usize, n: usize, x: &Matrix) -> Result<()> {
    if x.shape() != (d, n) {
        return Err(Error::dims(op, format!("expected {d}x{n}, got {:?}", x.shape())));
    }
    Ok(())
}

pub fn to_f64(c: &BigRational) -> f64 {
    c.to_f64().unwrap_or(f64::NAN)
}

pub fn eval_polynomial(f: &Polynomial, x: &Matrix) -> Result<f64> {
    check_matrix("eval_polynomial", f.d, f.n, x)?;
    let d = f.d;
    Ok(f.terms
        .iter()
        .map(|(e, c)| {
            e.iter().enumerate().fold(to_f64(c), |acc, (k, &p)| {
                if p == 0 {
                    acc
                } else {
                    acc * x.get(k % d, k / d).powi(p as i32)
                }
            })
        })
        .sum())
}

fn column_power(x: &Matrix, j: usize, p: &MultiIndex) -> f64 {
    p.exponents()
        .iter()
        .enumerate()
        .map(|(i, &e)| x.get(i, j).powi(e as i32))
        .product()
}

fn check_tuple(t: &RankTuple, d: usize) -> Result<()> {
    if t.parts().iter().any(|p| p.dim() != d) {
        return Err(Error::dims("monomial tuple", format!("parts must have dimension {d}")));
    }
    Ok(())
}

/// `m_t(X)`: sum over ordered choices of distinct columns, 0 when `r > n`.
pub fn eval_monomial_sym(t: &RankTuple, x: &Matrix) -> Result<f64> {
    check_tuple(t, x.rows())?;
    let n = x.cols();
    if t.rank() > n {
        return Ok(0.0);
    }
    let powers: Vec<Vec<f64>> = t
        .parts()
        .iter()
        .map(|p| (0..n).map(|j| column_power(x, j, p)).collect())
        .collect();
    fn go(powers: &[Vec<f64>], used: &mut [bool]) -> f64 {
        let Some((first, rest)) = powers.split_first() else {
            return 1.0;
        };
        let mut sum = 0.0;
        for j in 0..used.len() {
            if !used[j] && first[j] != 0.0 {
                used[j] = true;
                sum += first[j] * go(rest, used);
                used[j] = false;
            }
        }
        sum
    }
    Ok(go(&powers, &mut vec![false; n]))
}

/// `m_t(X) = (1/(n-r)!) Σ_{σ ∈ S_n} ∏_i x_{σ(i)}^{p_i}` by brute force.
pub fn eval_monomial_sym_permsum(t: &RankTuple, x: &Matrix) -> Result<f64> {
    check_tuple(t, x.rows())?;
    let n = x.cols();
    if n > PERMSUM_LIMIT {
        return Err(Error::TooManyColumns {
            n,
            limit: PERMSUM_LIMIT,
        });
    }
    let r = t.rank();
    if r > n {
        return Ok(0.0);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sum = 0.0;
    let term = |perm: &[usize]| -> f64 {
        t.parts()
            .iter()
            .zip(perm)
            .map(|(p, &j)| column_power(x, j, p))
            .product()
    };
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    sum += term(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            sum += term(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(sum / factorial((n - r) as u64)? as f64)
}

/// Coefficient of each term of `m_t`: the symmetry coefficient of the padded
/// tuple divided by the `(n-r)!` orderings of the zero part.
pub fn term_multiplicity(t: &RankTuple, n: usize) -> Result<u64> {
    Ok(symmetry_coefficient(t, n)? / factorial((n - t.rank()) as u64)?)
}

/// Explicit term list of `m_t` over a `d x n` matrix; the empty tuple gives 1.
pub fn expand_monomial_sym(t: &RankTuple, d: usize, n: usize) -> Result<Polynomial> {
    check_tuple(t, d)?;
    let mut out = Polynomial::zero(d, n);
    if t.rank() > n {
        return Ok(out);
    }
    fn go(
        parts: &[MultiIndex],
        d: usize,
        used: &mut [bool],
        exps: &mut Vec<u32>,
        out: &mut BTreeMap<Vec<u32>, BigRational>,
    ) {
        let Some((first, rest)) = parts.split_first() else {
            *out.entry(exps.clone()).or_insert_with(BigRational::zero) += BigRational::one();
            return;
        };
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                exps[j * d..(j + 1) * d].copy_from_slice(first.exponents());
                go(rest, d, used, exps, out);
                exps[j * d..(j + 1) * d].iter_mut().for_each(|e| *e = 0);
                used[j] = false;
            }
        }
    }
    go(t.parts(), d, &mut vec![false; n], &mut vec![0; d * n], &mut out.terms);
    Ok(out)
}

/// Checks invariance under every adjacent column transposition, reporting the
/// first violating pair (1-based).
pub fn check_column_symmetric(f: &Polynomial) -> Result<()> {
    for j in 0..f.n.saturating_sub(1) {
        if f.swap_columns(j, j + 1) != f.terms {
            return Err(Error::NotSymmetric(j + 1, j + 2));
        }
    }
    Ok(())
}

pub fn is_column_symmetric(f: &Polynomial) -> bool {
    check_column_symmetric(f).is_ok()
}

fn leading_tuple(d: usize, exponents: &[u32]) -> Result<RankTuple> {
    let parts: Vec<MultiIndex> = exponents
        .chunks(d)
        .map(|c| MultiIndex::new(c.to_vec()))
        .filter(|p| !p.is_zero())
        .collect();
    RankTuple::canonical(parts)
}

/// Writes a column-symmetric `f` as `Σ c·m_t` by repeatedly eliminating the
/// leading term. The constant term is returned under the empty tuple.
pub fn decompose(f: &Polynomial) -> Result<Vec<(BigRational, RankTuple)>> {
    decompose_traced(f).map(|(parts, _)| parts)
}

/// [`decompose`] together with the leading exponent vector eliminated at each
/// step, which strictly decreases.
pub fn decompose_traced(f: &Polynomial) -> Result<(Vec<(BigRational, RankTuple)>, Vec<Vec<u32>>)> {
    check_column_symmetric(f)?;
    let mut rest = f.clone();
    let mut parts = Vec::new();
    let mut leads = Vec::new();
    while let Some((lead, coeff)) = rest.terms.iter().next_back() {
        let lead = lead.clone();
        let tuple = leading_tuple(f.d, &lead)?;
        let c = coeff / BigRational::from_integer(BigInt::from(term_multiplicity(&tuple, f.n)?));
        rest = rest.add_scaled(&expand_monomial_sym(&tuple, f.d, f.n)?, &-c.clone())?;
        if rest.terms.contains_key(&lead) {
            return Err(Error::Precondition("leading term was not eliminated".into()));
        }
        leads.push(lead);
        parts.push((c, tuple));
    }
    Ok((parts, leads))
}

/// `m_{p_1..p_r,p'} - (m_{p_1..p_r}·m_{p'} - Σ_i m_{p_1..p_i+p'..p_r})`.
pub fn product_rule_residual(parent: &RankTuple, extra: &MultiIndex, x: &Matrix) -> Result<f64> {
    let mut joined = parent.parts().to_vec();
    joined.push(extra.clone());
    let lhs = eval_monomial_sym(&RankTuple::canonical(joined)?, x)?;
    let product = eval_monomial_sym(parent, x)?
        * eval_monomial_sym(&RankTuple::new(vec![extra.clone()])?, x)?;
    let mut merged_sum = 0.0;
    for t in merged_tuples(parent, extra)? {
        merged_sum += eval_monomial_sym(&t, x)?;
    }
    Ok(lhs - (product - merged_sum))
}

/// The tuples `(p_1, .., p_i + p', .., p_r)` for `i = 1..r`, canonicalized.
pub fn merged_tuples(parent: &RankTuple, extra: &MultiIndex) -> Result<Vec<RankTuple>> {
    (0..parent.rank())
        .map(|i| {
            let mut parts = parent.parts().to_vec();
            parts[i] = parts[i].add(extra);
            RankTuple::canonical(parts)
        })
        .collect()
}

/// `f(1)`, which is the sup norm on `[0,1]^{d x n}` for positive coefficients.
pub fn normalize_check(f: &Polynomial) -> Result<f64> {
    if f.is_zero() {
        return Err(Error::Precondition("polynomial has no positive coefficients".into()));
    }
    if let Some(t) = f.terms().find(|t| !t.coefficient.is_positive()) {
        return Err(Error::Precondition(format!(
            "coefficient {} is not positive",
            t.coefficient
        )));
    }
    Ok(to_f64(&f.sum_of_coefficients()))
}

/// Parses an exact rational from `a/b`, an integer, or a decimal with an
/// optional exponent.
pub fn parse_rational(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let den = parse_rational(b)?;
        if den.is_zero() {
            return None;
        }
        return Some(parse_rational(a)? / den);
    }
    let (mantissa, exp) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().ok()?),
        None => (s, 0),
    };
    let (neg, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let num: BigInt = format!("0{int}{frac}").parse().ok()?;
    let scale = exp - frac.len() as i32;
    let ten = BigInt::from(10);
    let mut r = BigRational::from_integer(num);
    if scale >= 0 {
        r *= BigRational::from_integer(num::pow(ten, scale as usize));
    } else {
        r /= BigRational::from_integer(num::pow(ten, (-scale) as usize));
    }
    Some(if neg { -r } else { r })
}

fn parse_variable(tok: &str, line: usize) -> Result<Option<(usize, usize, u32)>> {
    let Some(rest) = tok.strip_prefix("x[") else {
        return Ok(None);
    };
    let err = |msg: &str| Error::Parse {
        line,
        msg: format!("{msg} in `{tok}`"),
    };
    let (i, rest) = rest.split_once(']').ok_or_else(|| err("unclosed row index"))?;
    let rest = rest.strip_prefix('[').ok_or_else(|| err("missing column index"))?;
    let (j, rest) = rest.split_once(']').ok_or_else(|| err("unclosed column index"))?;
    let power = match rest.trim() {
        "" => 1,
        p => p
            .strip_prefix('^')
            .and_then(|e| e.trim().parse::<u32>().ok())
            .ok_or_else(|| err("bad exponent"))?,
    };
    let i: usize = i.trim().parse().map_err(|_| err("bad row index"))?;
    let j: usize = j.trim().parse().map_err(|_| err("bad column index"))?;
    if i == 0 || j == 0 {
        return Err(err("indices are 1-based"));
    }
    Ok(Some((i - 1, j - 1, power)))
}

/// Parses the text format: one term per line, `coeff * x[i][j]^e * …` with
/// 1-based indices, `#` comments, and an optional leading coefficient. `d` and
/// `n` are inferred from the largest indices unless given.
pub fn parse_polynomial(text: &str, d: Option<usize>, n: Option<usize>) -> Result<Polynomial> {
    let mut raw: Vec<(BigRational, Vec<(usize, usize, u32)>)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line_no = no + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut coeff = BigRational::one();
        let mut vars = Vec::new();
        for tok in body.split('*').map(str::trim) {
            if tok.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "empty factor".into(),
                });
            }
            if let Some(v) = parse_variable(tok, line_no)? {
                vars.push(v);
            } else if let Some(c) = parse_rational(tok) {
                coeff *= c;
            } else if let Some(v) = tok.strip_prefix('-').map(str::trim) {
                let v = parse_variable(v, line_no)?.ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("unrecognized factor `{tok}`"),
                })?;
                coeff = -coeff;
                vars.push(v);
            } else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unrecognized factor `{tok}`"),
                });
            }
        }
        raw.push((coeff, vars));
    }
    let max_i = raw.iter().flat_map(|(_, v)| v.iter().map(|t| t.0 + 1)).max().unwrap_or(1);
    let max_j = raw.iter().flat_map(|(_, v)| v.iter().map(|t| t.1 + 1)).max().unwrap_or(1);
    let d = d.unwrap_or(max_i);
    let n = n.unwrap_or(max_j);
    if max_i > d || max_j > n {
        return Err(Error::Parse {
            line: 0,
            msg: format!("variable x[{max_i}][{max_j}] outside a {d}x{n} matrix"),
        });
    }
    let mut f = Polynomial::zero(d, n);
    for (coeff, vars) in raw {
        let mut e = vec![0u32; d * n];
        for (i, j, p) in vars {
            e[j * d + i] += p;
        }
        f.add_term(e, coeff)?;
    }
    Ok(f)
}

#[derive(Serialize, Deserialize)]
struct PolynomialDoc {
    d: usize,
    n: usize,
    terms: Vec<TermDoc>,
}

#[derive(Serialize, Deserialize)]
struct TermDoc {
    /// Exact rational as a string, or a JSON number.
    coefficient: serde_json::Value,
    /// `exponents[i][j]` is the power of `x_{ij}` (0-based).
    exponents: Vec<Vec<u32>>,
}

impl From<&Polynomial> for PolynomialDoc {
    fn from(f: &Polynomial) -> Self {
        PolynomialDoc {
            d: f.d,
            n: f.n,
            terms: f
                .terms
                .iter()
                .map(|(e, c)| TermDoc {
                    coefficient: serde_json::Value::String(c.to_string()),
                    exponents: (0..f.d)
                        .map(|i| (0..f.n).map(|j| e[j * f.d + i]).collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<PolynomialDoc> for Polynomial {
    type Error = Error;

    fn try_from(doc: PolynomialDoc) -> Result<Self> {
        let mut f = Polynomial::zero(doc.d, doc.n);
        for (k, t) in doc.terms.into_iter().enumerate() {
            let bad = |msg: String| Error::Parse { line: k + 1, msg };
            let coeff = match &t.coefficient {
                serde_json::Value::String(s) => parse_rational(s),
                serde_json::Value::Number(num) => parse_rational(&num.to_string()),
                _ => None,
            }
            .ok_or_else(|| bad(format!("bad coefficient {}", t.coefficient)))?;
            if t.exponents.len() != doc.d || t.exponents.iter().any(|r| r.len() != doc.n) {
                return Err(bad(format!("exponents must be {}x{}", doc.d, doc.n)));
            }
            let mut e = vec![0u32; doc.d * doc.n];
            for (i, row) in t.exponents.iter().enumerate() {
                for (j, &p) in row.iter().enumerate() {
                    e[j * doc.d + i] = p;
                }
            }
            f.add_term(e, coeff)?;
        }
        Ok(f)
    }
}

/// All terms of degree `1..=s` with unit coefficients.
pub fn all_terms_polynomial(d: usize, n: usize, s: u32) -> Polynomial {
    let mut f = Polynomial::zero(d, n);
    for j in 1..=s {
        for p in crate::combinatorics::multi_indices_of_degree(d * n, j) {
            f.terms.insert(p.exponents().to_vec(), BigRational::one());
        }
    }
    f
}

pub fn rational(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}
