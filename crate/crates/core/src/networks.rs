//! Explicit-weight ReLU FNNs and Transformer networks.
//!
//! An [`FfnNetwork`] is a list of affine maps with ReLU between consecutive
//! maps and no activation after the last one, so a network with `k` layers
//! has `k - 1` hidden layers and depth `k - 1`.
//!
//! A [`TransformerNetwork`] is a stack of blocks, each a single-head
//! attention layer followed by a residual feed-forward layer, acting on a
//! `state_dim x columns` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, relu, softmax_columns, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl FfnLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::dims(
                "FfnLayer::new",
                format!("weight has {} rows, bias has {}", weight.rows(), bias.len()),
            ));
        }
        Ok(FfnLayer { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        FfnLayer {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let w = &self.weight;
        (0..w.rows())
            .map(|i| {
                w.row(i)
                    .iter()
                    .zip(x)
                    .fold(self.bias[i], |acc, (a, b)| acc + a * b)
            })
            .collect()
    }

    fn parameter_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFfn")]
pub struct FfnNetwork {
    input_dim: usize,
    layers: Vec<FfnLayer>,
}

#[derive(Deserialize)]
struct RawFfn {
    input_dim: usize,
    layers: Vec<FfnLayer>,
}

impl TryFrom<RawFfn> for FfnNetwork {
    type Error = Error;

    fn try_from(raw: RawFfn) -> Result<Self> {
        for layer in &raw.layers {
            if layer.weight.rows() != layer.bias.len() {
                return Err(Error::InvalidNetwork("layer bias length mismatch".into()));
            }
        }
        FfnNetwork::new(raw.input_dim, raw.layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeReport {
    pub width: usize,
    pub depth: usize,
    pub parameter_count: usize,
}

impl FfnNetwork {
    pub fn new(input_dim: usize, layers: Vec<FfnLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("an FNN needs at least one layer".into()));
        }
        let mut dim = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_dim() != dim {
                return Err(Error::InvalidNetwork(format!(
                    "layer {i} expects input dimension {}, previous dimension is {dim}",
                    layer.input_dim()
                )));
            }
            dim = layer.output_dim();
        }
        Ok(FfnNetwork { input_dim, layers })
    }

    /// `depth` hidden identity layers over `dim` values. Only transparent on
    /// nonnegative inputs.
    pub fn identity(dim: usize, depth: usize) -> Self {
        FfnNetwork {
            input_dim: dim,
            layers: vec![FfnLayer::identity(dim); depth + 1],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn layers(&self) -> &[FfnLayer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Largest hidden dimension; zero when there are no hidden layers.
    pub fn width(&self) -> usize {
        self.hidden_dims().max().unwrap_or(0)
    }

    pub fn hidden_dims(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers[..self.layers.len() - 1].iter().map(FfnLayer::output_dim)
    }

    pub fn size_report(&self) -> SizeReport {
        SizeReport {
            width: self.width(),
            depth: self.depth(),
            parameter_count: self.layers.iter().map(FfnLayer::parameter_count).sum(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::dims(
                "eval_ffn",
                format!("input has length {}, network expects {}", x.len(), self.input_dim),
            ));
        }
        let last = self.layers.len() - 1;
        let mut v = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            v = layer.apply(&v);
            if i < last {
                v.iter_mut().for_each(|e| *e = e.max(0.0));
            }
        }
        Ok(v)
    }

    /// Returns `x -> self(a·x + b)`, fusing the affine map into the first layer.
    pub fn precompose_affine(&self, a: &Matrix, b: &[f64]) -> Result<Self> {
        if a.rows() != self.input_dim || b.len() != a.rows() {
            return Err(Error::dims(
                "precompose_affine",
                format!("affine map is {}x{}, network input is {}", a.rows(), a.cols(), self.input_dim),
            ));
        }
        let first = &self.layers[0];
        let weight = matmul(&first.weight, a)?;
        let shift = first.apply(b);
        let mut layers = self.layers.clone();
        layers[0] = FfnLayer::new(weight, shift)?;
        FfnNetwork::new(a.cols(), layers)
    }

    /// Returns `x -> a·self(x) + b`, fusing the affine map into the last layer.
    pub fn postcompose_affine(&self, a: &Matrix, b: &[f64]) -> Result<Self> {
        if a.cols() != self.output_dim() || b.len() != a.rows() {
            return Err(Error::dims(
                "postcompose_affine",
                format!("affine map is {}x{}, network output is {}", a.rows(), a.cols(), self.output_dim()),
            ));
        }
        let last = self.layers.last().expect("nonempty");
        let weight = matmul(a, &last.weight)?;
        let bias = FfnLayer::new(a.clone(), b.to_vec())?.apply(&last.bias);
        let mut layers = self.layers.clone();
        *layers.last_mut().expect("nonempty") = FfnLayer::new(weight, bias)?;
        FfnNetwork::new(self.input_dim, layers)
    }

    /// Evaluates each column of `x` as an independent input.
    pub fn eval_columns(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.output_dim(), x.cols());
        for j in 0..x.cols() {
            for (i, v) in self.eval(&x.column(j))?.into_iter().enumerate() {
                out.set(i, j, v);
            }
        }
        Ok(out)
    }
}

pub fn eval_ffn(net: &FfnNetwork, x: &[f64]) -> Result<Vec<f64>> {
    net.eval(x)
}

/// `g ∘ f` with the last affine map of `f` fused into the first of `g`, so the
/// depth is `depth(f) + depth(g)`.
pub fn compose_ffn(f: &FfnNetwork, g: &FfnNetwork) -> Result<FfnNetwork> {
    if f.output_dim() != g.input_dim() {
        return Err(Error::dims(
            "compose_ffn",
            format!("f outputs {} values, g expects {}", f.output_dim(), g.input_dim()),
        ));
    }
    let f_last = f.layers.last().expect("nonempty");
    let g_first = &g.layers[0];
    let fused = FfnLayer::new(
        matmul(&g_first.weight, &f_last.weight)?,
        g_first.apply(&f_last.bias),
    )?;
    let mut layers: Vec<FfnLayer> = f.layers[..f.layers.len() - 1].to_vec();
    layers.push(fused);
    layers.extend_from_slice(&g.layers[1..]);
    FfnNetwork::new(f.input_dim, layers)
}

/// Block-diagonal stacking: inputs and outputs are concatenated in order.
/// Shallower networks are deepened by identity layers in front, which is
/// exact only for nonnegative inputs.
pub fn parallel_ffn(nets: &[FfnNetwork]) -> Result<FfnNetwork> {
    if nets.is_empty() {
        return Err(Error::InvalidNetwork("parallel_ffn needs at least one network".into()));
    }
    let depth = nets.iter().map(FfnNetwork::depth).max().expect("nonempty");
    let padded: Vec<FfnNetwork> = nets
        .iter()
        .map(|n| {
            if n.depth() == depth {
                Ok(n.clone())
            } else {
                compose_ffn(&FfnNetwork::identity(n.input_dim(), depth - n.depth()), n)
            }
        })
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(depth + 1);
    for l in 0..=depth {
        let rows: usize = padded.iter().map(|n| n.layers[l].output_dim()).sum();
        let cols: usize = padded.iter().map(|n| n.layers[l].input_dim()).sum();
        let mut weight = Matrix::zeros(rows, cols);
        let mut bias = Vec::with_capacity(rows);
        let (mut r0, mut c0) = (0, 0);
        for n in &padded {
            let layer = &n.layers[l];
            for i in 0..layer.output_dim() {
                for j in 0..layer.input_dim() {
                    weight.set(r0 + i, c0 + j, layer.weight.get(i, j));
                }
            }
            bias.extend_from_slice(&layer.bias);
            r0 += layer.output_dim();
            c0 += layer.input_dim();
        }
        layers.push(FfnLayer::new(weight, bias)?);
    }
    let input_dim = padded.iter().map(FfnNetwork::input_dim).sum();
    FfnNetwork::new(input_dim, layers)
}

/// Single-head attention parameters: `w_o` is `d x m`, the others `m x d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAttention")]
pub struct AttentionParams {
    w_o: Matrix,
    w_v: Matrix,
    w_k: Matrix,
    w_q: Matrix,
}

#[derive(Deserialize)]
struct RawAttention {
    w_o: Matrix,
    w_v: Matrix,
    w_k: Matrix,
    w_q: Matrix,
}

impl TryFrom<RawAttention> for AttentionParams {
    type Error = Error;

    fn try_from(raw: RawAttention) -> Result<Self> {
        AttentionParams::new(raw.w_o, raw.w_v, raw.w_k, raw.w_q)
    }
}

impl AttentionParams {
    pub fn new(w_o: Matrix, w_v: Matrix, w_k: Matrix, w_q: Matrix) -> Result<Self> {
        let (d, m) = w_o.shape();
        for (name, w) in [("w_v", &w_v), ("w_k", &w_k), ("w_q", &w_q)] {
            if w.shape() != (m, d) {
                return Err(Error::dims(
                    "AttentionParams::new",
                    format!("{name} is {:?}, expected {m}x{d}", w.shape()),
                ));
            }
        }
        Ok(AttentionParams { w_o, w_v, w_k, w_q })
    }

    /// Attention with `w_o = 0`, hence `Attn(X) = X`. Uses a one-dimensional
    /// head so inert layers stay small.
    pub fn inert(d: usize) -> Self {
        AttentionParams {
            w_o: Matrix::zeros(d, 1),
            w_v: Matrix::zeros(1, d),
            w_k: Matrix::zeros(1, d),
            w_q: Matrix::zeros(1, d),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w_o.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_o.cols()
    }

    pub fn heads(&self) -> usize {
        1
    }

    pub fn w_o(&self) -> &Matrix {
        &self.w_o
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn is_inert(&self) -> bool {
        self.w_o.is_zero()
    }

    fn parameter_count(&self) -> usize {
        4 * self.state_dim() * self.head_dim()
    }

    fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_o, &mut self.w_v, &mut self.w_k, &mut self.w_q]
    }
}

/// Residual per-column MLP `X + W2·ReLU(W1·X + b1·1ᵀ) + b2·1ᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFeedForward")]
pub struct FeedForwardParams {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

#[derive(Deserialize)]
struct RawFeedForward {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl TryFrom<RawFeedForward> for FeedForwardParams {
    type Error = Error;

    fn try_from(raw: RawFeedForward) -> Result<Self> {
        FeedForwardParams::new(raw.w1, raw.b1, raw.w2, raw.b2)
    }
}

impl FeedForwardParams {
    pub fn new(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        let (r, d) = w1.shape();
        if b1.len() != r || w2.shape() != (d, r) || b2.len() != d {
            return Err(Error::dims(
                "FeedForwardParams::new",
                format!(
                    "w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                    w1.shape(),
                    b1.len(),
                    w2.shape(),
                    b2.len()
                ),
            ));
        }
        if b1.iter().chain(&b2).any(|v| !v.is_finite()) {
            return Err(Error::InvalidNetwork("non-finite bias".into()));
        }
        Ok(FeedForwardParams { w1, b1, w2, b2 })
    }

    /// All-zero parameters with a single hidden unit: the identity map.
    pub fn zero(d: usize) -> Self {
        FeedForwardParams {
            w1: Matrix::zeros(1, d),
            b1: vec![0.0],
            w2: Matrix::zeros(d, 1),
            b2: vec![0.0; d],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    fn parameter_count(&self) -> usize {
        2 * self.hidden_dim() * self.state_dim() + self.b1.len() + self.b2.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub attention: AttentionParams,
    pub feed_forward: FeedForwardParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransformer")]
pub struct TransformerNetwork {
    state_dim: usize,
    blocks: Vec<TransformerBlock>,
}

#[derive(Deserialize)]
struct RawTransformer {
    state_dim: usize,
    blocks: Vec<TransformerBlock>,
}

impl TryFrom<RawTransformer> for TransformerNetwork {
    type Error = Error;

    fn try_from(raw: RawTransformer) -> Result<Self> {
        TransformerNetwork::new(raw.state_dim, raw.blocks)
    }
}

/// Which weight container a perturbation targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSlot {
    W1,
    B1,
    W2,
    B2,
    AttentionO,
    AttentionV,
    AttentionK,
    AttentionQ,
}

impl TransformerNetwork {
    pub fn new(state_dim: usize, blocks: Vec<TransformerBlock>) -> Result<Self> {
        for (i, b) in blocks.iter().enumerate() {
            if b.attention.state_dim() != state_dim || b.feed_forward.state_dim() != state_dim {
                return Err(Error::InvalidNetwork(format!(
                    "block {i} acts on dimension {}/{}, network state is {state_dim}",
                    b.attention.state_dim(),
                    b.feed_forward.state_dim()
                )));
            }
        }
        Ok(TransformerNetwork { state_dim, blocks })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Largest of the state dimension and every feed-forward hidden dimension.
    pub fn width(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.feed_forward.hidden_dim())
            .fold(self.state_dim, usize::max)
    }

    pub fn size_report(&self) -> SizeReport {
        SizeReport {
            width: self.width(),
            depth: self.depth(),
            parameter_count: self
                .blocks
                .iter()
                .map(|b| b.attention.parameter_count() + b.feed_forward.parameter_count())
                .sum(),
        }
    }

    /// Concatenates the blocks of `self` and `next`.
    pub fn then(&self, next: &TransformerNetwork) -> Result<Self> {
        if self.state_dim != next.state_dim {
            return Err(Error::dims(
                "TransformerNetwork::then",
                format!("state {} vs {}", self.state_dim, next.state_dim),
            ));
        }
        let mut blocks = self.blocks.clone();
        blocks.extend_from_slice(&next.blocks);
        TransformerNetwork::new(self.state_dim, blocks)
    }

    /// Copy with the weight at `index` (row-major) of `slot` in block `block`
    /// multiplied by `factor`.
    pub fn with_scaled_weight(
        &self,
        block: usize,
        slot: WeightSlot,
        index: usize,
        factor: f64,
    ) -> Result<Self> {
        let mut net = self.clone();
        let b = net
            .blocks
            .get_mut(block)
            .ok_or_else(|| Error::InvalidNetwork(format!("no block {block}")))?;
        let target: &mut [f64] = match slot {
            WeightSlot::W1 => b.feed_forward.w1.values_mut(),
            WeightSlot::B1 => &mut b.feed_forward.b1,
            WeightSlot::W2 => b.feed_forward.w2.values_mut(),
            WeightSlot::B2 => &mut b.feed_forward.b2,
            WeightSlot::AttentionO => b.attention.matrices_mut()[0].values_mut(),
            WeightSlot::AttentionV => b.attention.matrices_mut()[1].values_mut(),
            WeightSlot::AttentionK => b.attention.matrices_mut()[2].values_mut(),
            WeightSlot::AttentionQ => b.attention.matrices_mut()[3].values_mut(),
        };
        let v = target
            .get_mut(index)
            .ok_or_else(|| Error::InvalidNetwork(format!("no weight {index} in {slot:?}")))?;
        *v *= factor;
        Ok(net)
    }
}

fn check_state(op: &'static str, expected: usize, x: &Matrix) -> Result<()> {
    if x.rows() != expected {
        return Err(Error::dims(
            op,
            format!("input has {} rows, parameters expect {expected}", x.rows()),
        ));
    }
    Ok(())
}

pub fn eval_attention(p: &AttentionParams, x: &Matrix) -> Result<Matrix> {
    check_state("eval_attention", p.state_dim(), x)?;
    let mut out = vec![x.clone()];
    apply_attention(p, &mut out)?;
    Ok(out.pop().expect("one sample"))
}

pub fn eval_ff_layer(p: &FeedForwardParams, x: &Matrix) -> Result<Matrix> {
    check_state("eval_ff_layer", p.state_dim(), x)?;
    apply_feed_forward(p, x)
}

pub fn eval_transformer(net: &TransformerNetwork, x: &Matrix) -> Result<Matrix> {
    Ok(eval_transformer_batch(net, std::slice::from_ref(x))?
        .pop()
        .expect("one sample"))
}

/// Evaluates many independent inputs. Feed-forward layers run on the
/// horizontally concatenated batch; attention runs per input.
pub fn eval_transformer_batch(net: &TransformerNetwork, xs: &[Matrix]) -> Result<Vec<Matrix>> {
    let mut trace = eval_transformer_checkpoints(net, xs, &[net.depth()])?;
    Ok(trace.pop().expect("one checkpoint"))
}

/// Like [`eval_transformer_batch`] but also returns the states after the
/// first `c` blocks for every `c` in `checkpoints` (0 is the input itself).
/// `result[i][s]` is sample `s` at checkpoint `i`.
pub fn eval_transformer_checkpoints(
    net: &TransformerNetwork,
    xs: &[Matrix],
    checkpoints: &[usize],
) -> Result<Vec<Vec<Matrix>>> {
    for x in xs {
        check_state("eval_transformer", net.state_dim, x)?;
    }
    if let Some(&c) = checkpoints.iter().find(|&&c| c > net.depth()) {
        return Err(Error::InvalidNetwork(format!(
            "checkpoint {c} beyond depth {}",
            net.depth()
        )));
    }
    let mut results = vec![Vec::new(); checkpoints.len()];
    let record = |done: usize, state: &[Matrix], results: &mut Vec<Vec<Matrix>>| {
        for (slot, &c) in checkpoints.iter().enumerate() {
            if c == done {
                results[slot] = state.to_vec();
            }
        }
    };
    if xs.is_empty() {
        return Ok(results);
    }
    let widths: Vec<usize> = xs.iter().map(Matrix::cols).collect();
    let mut state = xs.to_vec();
    record(0, &state, &mut results);
    for (i, block) in net.blocks.iter().enumerate() {
        apply_attention(&block.attention, &mut state)?;
        let wide = apply_feed_forward(&block.feed_forward, &Matrix::hcat(&state)?)?;
        let mut offset = 0;
        for (s, w) in state.iter_mut().zip(&widths) {
            *s = wide.column_block(offset, *w);
            offset += w;
        }
        record(i + 1, &state, &mut results);
    }
    Ok(results)
}

fn apply_attention(p: &AttentionParams, samples: &mut [Matrix]) -> Result<()> {
    if p.is_inert() {
        return Ok(());
    }
    let wide = Matrix::hcat(samples)?;
    let values = matmul(&p.w_o, &matmul(&p.w_v, &wide)?)?;
    let keys = matmul(&p.w_k, &wide)?;
    let queries = matmul(&p.w_q, &wide)?;
    let mut offset = 0;
    for x in samples.iter_mut() {
        let n = x.cols();
        let k = keys.column_block(offset, n);
        let q = queries.column_block(offset, n);
        let weights = softmax_columns(&matmul(&k.transpose(), &q)?)?;
        let mixed = matmul(&values.column_block(offset, n), &weights)?;
        *x = x.add(&mixed)?;
        offset += n;
    }
    Ok(())
}

fn apply_feed_forward(p: &FeedForwardParams, x: &Matrix) -> Result<Matrix> {
    let mut pre = matmul(&p.w1, x)?;
    pre.add_row_bias(&p.b1)?;
    let mut out = x.add(&matmul(&p.w2, &relu(&pre))?)?;
    out.add_row_bias(&p.b2)?;
    Ok(out)
}

/// Tagged JSON document for either network kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Network {
    Ffn(FfnNetwork),
    Transformer(TransformerNetwork),
}

impl Network {
    pub fn size_report(&self) -> SizeReport {
        match self {
            Network::Ffn(n) => n.size_report(),
            Network::Transformer(n) => n.size_report(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn size_report(net: &Network) -> SizeReport {
    net.size_report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn random_ffn(dims: &[usize], rng: &mut impl Rng) -> FfnNetwork {
        let layers = dims
            .windows(2)
            .map(|w| FfnLayer::new(random_matrix(w[1], w[0], rng), random_vec(w[1], rng)).unwrap())
            .collect();
        FfnNetwork::new(dims[0], layers).unwrap()
    }

    #[test]
    fn identity_layer_is_identity() {
        let net = FfnNetwork::identity(3, 0);
        assert_eq!(net.eval(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        assert_eq!(net.size_report().parameter_count, 12);
        assert_eq!(net.depth(), 0);
    }

    #[test]
    fn relu_then_negate() {
        let l1 = FfnLayer::new(Matrix::identity(1), vec![0.0]).unwrap();
        let l2 = FfnLayer::new(Matrix::from_rows(&[vec![-1.0]]).unwrap(), vec![0.0]).unwrap();
        let net = FfnNetwork::new(1, vec![l1, l2]).unwrap();
        for x in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            let expected = -f64::max(x, 0.0);
            assert_eq!(net.eval(&[x]).unwrap(), vec![expected]);
        }
    }

    #[test]
    fn figure_one_shape_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = random_ffn(&[3, 4, 4, 1], &mut rng);
        let report = net.size_report();
        assert_eq!((report.width, report.depth), (4, 2));
        let ls = net.layers();
        for _ in 0..20 {
            let x = random_vec(3, &mut rng);
            let mut h1 = [0.0; 4];
            for i in 0..4 {
                let mut s = ls[0].bias[i];
                for k in 0..3 {
                    s += ls[0].weight.get(i, k) * x[k];
                }
                h1[i] = s.max(0.0);
            }
            let mut h2 = [0.0; 4];
            for i in 0..4 {
                let mut s = ls[1].bias[i];
                for k in 0..4 {
                    s += ls[1].weight.get(i, k) * h1[k];
                }
                h2[i] = s.max(0.0);
            }
            let mut y = ls[2].bias[0];
            for k in 0..4 {
                y += ls[2].weight.get(0, k) * h2[k];
            }
            assert!((net.eval(&x).unwrap()[0] - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn eval_rejects_wrong_length() {
        assert!(FfnNetwork::identity(2, 1).eval(&[1.0]).is_err());
    }

    #[test]
    fn network_validates_chaining() {
        let l1 = FfnLayer::identity(2);
        let l2 = FfnLayer::identity(3);
        assert!(FfnNetwork::new(2, vec![l1, l2]).is_err());
        assert!(FfnNetwork::new(2, vec![]).is_err());
    }

    #[test]
    fn compose_with_identity_keeps_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_ffn(&[2, 5, 3], &mut rng);
        let id = FfnNetwork::identity(3, 0);
        let composed = compose_ffn(&f, &id).unwrap();
        let x = [0.3, -0.7];
        assert_eq!(composed.eval(&x).unwrap(), f.eval(&x).unwrap());
    }

    #[test]
    fn compose_matches_sequential_and_adds_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_ffn(&[2, 6, 5, 3], &mut rng);
        let g = random_ffn(&[3, 4, 2], &mut rng);
        let h = compose_ffn(&f, &g).unwrap();
        assert_eq!(h.depth(), f.depth() + g.depth());
        for _ in 0..100 {
            let x = random_vec(2, &mut rng);
            let seq = g.eval(&f.eval(&x).unwrap()).unwrap();
            let fused = h.eval(&x).unwrap();
            for (a, b) in seq.iter().zip(&fused) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert!(compose_ffn(&g, &g).is_err());
    }

    #[test]
    fn parallel_single_and_duplicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_ffn(&[2, 3, 1], &mut rng);
        assert_eq!(parallel_ffn(std::slice::from_ref(&f)).unwrap(), f);
        let both = parallel_ffn(&[f.clone(), f.clone()]).unwrap();
        let x = [0.2, 0.9];
        let y = f.eval(&x).unwrap()[0];
        assert_eq!(both.eval(&[0.2, 0.9, 0.2, 0.9]).unwrap(), vec![y, y]);
        assert_eq!(both.width(), 2 * f.width());
        assert!(parallel_ffn(&[]).is_err());
    }

    #[test]
    fn parallel_pads_depth_on_nonnegative_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let deep = random_ffn(&[1, 4, 4, 1], &mut rng);
        let shallow = random_ffn(&[2, 3, 1], &mut rng);
        let stacked = parallel_ffn(&[deep.clone(), shallow.clone()]).unwrap();
        assert_eq!(stacked.depth(), 2);
        for _ in 0..20 {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            let c: f64 = rng.gen_range(0.0..1.0);
            let out = stacked.eval(&[a, b, c]).unwrap();
            assert!((out[0] - deep.eval(&[a]).unwrap()[0]).abs() <= 1e-12);
            assert!((out[1] - shallow.eval(&[b, c]).unwrap()[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn affine_pre_and_post_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let f = random_ffn(&[2, 4, 2], &mut rng);
        let a = random_matrix(2, 3, &mut rng);
        let b = random_vec(2, &mut rng);
        let pre = f.precompose_affine(&a, &b).unwrap();
        let post = f.postcompose_affine(&a.transpose(), &[0.5, 1.0, -1.0]).unwrap();
        for _ in 0..10 {
            let x = random_vec(3, &mut rng);
            let ax: Vec<f64> = (0..2)
                .map(|i| b[i] + (0..3).map(|k| a.get(i, k) * x[k]).sum::<f64>())
                .collect();
            let direct = f.eval(&ax).unwrap();
            let fused = pre.eval(&x).unwrap();
            assert!((direct[0] - fused[0]).abs() < 1e-12 && (direct[1] - fused[1]).abs() < 1e-12);
            let x2 = &x[..2];
            let fx = f.eval(x2).unwrap();
            let out = post.eval(x2).unwrap();
            let shift = [0.5, 1.0, -1.0];
            for i in 0..3 {
                let expected = shift[i] + a.get(0, i) * fx[0] + a.get(1, i) * fx[1];
                assert!((out[i] - expected).abs() < 1e-12);
            }
        }
    }

    fn random_attention(d: usize, m: usize, rng: &mut impl Rng) -> AttentionParams {
        AttentionParams::new(
            random_matrix(d, m, rng),
            random_matrix(m, d, rng),
            random_matrix(m, d, rng),
            random_matrix(m, d, rng),
        )
        .unwrap()
    }

    fn random_ff(d: usize, r: usize, rng: &mut impl Rng) -> FeedForwardParams {
        FeedForwardParams::new(
            random_matrix(r, d, rng),
            random_vec(r, rng),
            random_matrix(d, r, rng),
            random_vec(d, rng),
        )
        .unwrap()
    }

    #[test]
    fn inert_attention_is_residual_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(3, 4, &mut rng);
        let mut p = random_attention(3, 3, &mut rng);
        p.w_o = Matrix::zeros(3, 3);
        assert_eq!(eval_attention(&p, &x).unwrap(), x);
        assert_eq!(eval_attention(&AttentionParams::inert(3), &x).unwrap(), x);
    }

    #[test]
    fn uniform_attention_collects_row_sums() {
        let d = 2;
        let n = 3;
        let p = AttentionParams::new(
            Matrix::identity(d),
            Matrix::identity(d).scale((n + 1) as f64),
            Matrix::zeros(d, d),
            Matrix::zeros(d, d),
        )
        .unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 0.0], vec![0.5, 0.25, 0.0, 0.0]]).unwrap();
        let y = eval_attention(&p, &x).unwrap();
        assert!((y.get(0, 3) - 6.0).abs() < 1e-12);
        assert!((y.get(1, 3) - 0.75).abs() < 1e-12);
        assert!((y.get(0, 0) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_direct_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_attention(3, 2, &mut rng);
        let x = random_matrix(3, 4, &mut rng);
        let logits = matmul(&matmul(&p.w_k, &x).unwrap().transpose(), &matmul(&p.w_q, &x).unwrap()).unwrap();
        let direct = x
            .add(
                &matmul(
                    &matmul(&matmul(&p.w_o, &p.w_v).unwrap(), &x).unwrap(),
                    &softmax_columns(&logits).unwrap(),
                )
                .unwrap(),
            )
            .unwrap();
        assert!(eval_attention(&p, &x).unwrap().max_abs_diff(&direct) <= 1e-12);
        assert!(eval_attention(&p, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn feed_forward_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(3, 5, &mut rng);
        assert_eq!(eval_ff_layer(&FeedForwardParams::zero(3), &x).unwrap(), x);

        let p = random_ff(3, 6, &mut rng);
        let y = eval_ff_layer(&p, &x).unwrap();
        for j in 0..5 {
            let col = x.column(j);
            for i in 0..3 {
                let mut acc = col[i] + p.b2[i];
                for u in 0..6 {
                    let pre = p.b1[u] + (0..3).map(|k| p.w1.get(u, k) * col[k]).sum::<f64>();
                    acc += p.w2.get(i, u) * pre.max(0.0);
                }
                assert!((y.get(i, j) - acc).abs() <= 1e-12);
            }
        }

        let perm = [3, 0, 4, 1, 2];
        let permuted = Matrix::hcat(&perm.iter().map(|&j| x.column_block(j, 1)).collect::<Vec<_>>()).unwrap();
        let yp = eval_ff_layer(&p, &permuted).unwrap();
        for (new_j, &old_j) in perm.iter().enumerate() {
            assert_eq!(yp.column(new_j), y.column(old_j));
        }
    }

    fn random_transformer(d: usize, blocks: usize, rng: &mut impl Rng) -> TransformerNetwork {
        let blocks = (0..blocks)
            .map(|_| TransformerBlock {
                attention: random_attention(d, d, rng),
                feed_forward: random_ff(d, 4, rng),
            })
            .collect();
        TransformerNetwork::new(d, blocks).unwrap()
    }

    #[test]
    fn zero_transformer_is_identity_and_one_block_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(3, 4, &mut rng);
        let zero = TransformerNetwork::new(
            3,
            vec![
                TransformerBlock {
                    attention: AttentionParams::inert(3),
                    feed_forward: FeedForwardParams::zero(3)
                };
                2
            ],
        )
        .unwrap();
        assert_eq!(eval_transformer(&zero, &x).unwrap(), x);

        let one = random_transformer(3, 1, &mut rng);
        let b = &one.blocks()[0];
        let manual = eval_ff_layer(&b.feed_forward, &eval_attention(&b.attention, &x).unwrap()).unwrap();
        assert_eq!(eval_transformer(&one, &x).unwrap(), manual);
    }

    #[test]
    fn transformer_rejects_mismatched_blocks() {
        let block = TransformerBlock {
            attention: AttentionParams::inert(3),
            feed_forward: FeedForwardParams::zero(4),
        };
        assert!(TransformerNetwork::new(3, vec![block]).is_err());
    }

    #[test]
    fn batch_agrees_with_single_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = random_transformer(3, 3, &mut rng);
        let xs: Vec<Matrix> = (0..4).map(|i| random_matrix(3, 2 + i, &mut rng)).collect();
        let batch = eval_transformer_batch(&net, &xs).unwrap();
        for (x, y) in xs.iter().zip(&batch) {
            assert!(eval_transformer(&net, x).unwrap().max_abs_diff(y) <= 1e-12);
        }
        let trace = eval_transformer_checkpoints(&net, &xs[..1], &[0, 1, 3]).unwrap();
        assert_eq!(trace[0][0], xs[0]);
        assert_eq!(trace[2][0], batch[0]);
    }

    #[test]
    fn size_report_counts_every_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = random_transformer(3, 2, &mut rng);
        let per_block = 4 * 9 + (4 * 3 + 4 + 3 * 4 + 3);
        assert_eq!(net.size_report().parameter_count, 2 * per_block);
        assert_eq!(net.size_report().depth, 2);
        assert_eq!(net.size_report().width, 4);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = random_transformer(4, 2, &mut rng);
        let x = random_matrix(4, 3, &mut rng);
        let a = eval_transformer(&net, &x).unwrap();
        let b = eval_transformer(&net, &x).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn scaled_weight_copy_leaves_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = random_transformer(3, 1, &mut rng);
        let bumped = net.with_scaled_weight(0, WeightSlot::W1, 0, 2.0).unwrap();
        assert_eq!(
            bumped.blocks()[0].feed_forward.w1().values()[0],
            2.0 * net.blocks()[0].feed_forward.w1().values()[0]
        );
        assert!(net.with_scaled_weight(5, WeightSlot::W1, 0, 2.0).is_err());
    }

    #[test]
    fn json_documents_are_tagged() {
        let net = Network::Ffn(FfnNetwork::identity(2, 1));
        let json = net.to_json().unwrap();
        assert!(json.contains(r#""kind":"ffn""#));
        let t = Network::Transformer(random_transformer(2, 1, &mut ChaCha8Rng::seed_from_u64(0)));
        let json = t.to_json().unwrap();
        assert!(json.contains(r#""kind":"transformer""#) && json.contains("state_dim"));
        let bad = r#"{"kind":"ffn","input_dim":3,"layers":[{"weight":{"rows":1,"cols":2,"values":[1,1]},"bias":[0]}]}"#;
        assert!(Network::from_json(bad).is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_value_exact(seed in any::<u64>(), blocks in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Network::Transformer(random_transformer(3, blocks, &mut rng));
            let back = Network::from_json(&t.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, t);
            let f = Network::Ffn(random_ffn(&[2, 3, 1], &mut rng));
            let back = Network::from_json(&f.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn transformer_is_column_permutation_equivariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = random_transformer(3, 2, &mut rng);
            let x = random_matrix(3, 5, &mut rng);
            let mut perm: Vec<usize> = (0..5).collect();
            for i in (1..5).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let xp = Matrix::hcat(&perm.iter().map(|&j| x.column_block(j, 1)).collect::<Vec<_>>()).unwrap();
            let y = eval_transformer(&net, &x).unwrap();
            let yp = eval_transformer(&net, &xp).unwrap();
            for (new_j, &old_j) in perm.iter().enumerate() {
                for i in 0..3 {
                    prop_assert!((yp.get(i, new_j) - y.get(i, old_j)).abs() <= 1e-10);
                }
            }
        }
    }
}
