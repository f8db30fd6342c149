//! Sawtooth functions, the squaring approximator built from them, and the
//! product gadgets, both as scalar reference functions and as explicit FNNs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::networks::{compose_ffn, parallel_ffn, FfnLayer, FfnNetwork};

/// Gadget width `N` and depth `L`. `k = floor(log2 N)` is always derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGadget")]
pub struct GadgetParams {
    n_width: usize,
    l_depth: usize,
    k: u32,
}

#[derive(Deserialize)]
struct RawGadget {
    n_width: usize,
    l_depth: usize,
}

impl TryFrom<RawGadget> for GadgetParams {
    type Error = Error;

    fn try_from(raw: RawGadget) -> Result<Self> {
        GadgetParams::new(raw.n_width, raw.l_depth)
    }
}

impl GadgetParams {
    pub fn new(n_width: usize, l_depth: usize) -> Result<Self> {
        if n_width < 2 {
            return Err(Error::WidthTooSmall(n_width));
        }
        if l_depth == 0 {
            return Err(Error::InvalidBudget("depth L must be at least 1".into()));
        }
        let k = n_width.ilog2();
        // Every sawtooth breakpoint j/2^(Lk) must stay representable.
        if (l_depth as u64) * (k as u64) > 40 {
            return Err(Error::InvalidBudget(format!(
                "L*k = {} exceeds the supported resolution 40",
                l_depth as u64 * k as u64
            )));
        }
        Ok(GadgetParams { n_width, l_depth, k })
    }

    pub fn n_width(&self) -> usize {
        self.n_width
    }

    pub fn l_depth(&self) -> usize {
        self.l_depth
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// Total number of sawtooth terms `L·k` in the squaring approximator.
    pub fn resolution(&self) -> u32 {
        self.l_depth as u32 * self.k
    }

    /// `N^{-L}`.
    pub fn unit_error(&self) -> f64 {
        (self.n_width as f64).powi(-(self.l_depth as i32))
    }
}

fn check_unit(op: &'static str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::OutOfDomain { op, value: x })
    }
}

fn tent(x: f64) -> f64 {
    if x <= 0.5 {
        2.0 * x
    } else {
        2.0 * (1.0 - x)
    }
}

/// `T_i(x)` by composing the tent map `i` times.
pub fn sawtooth_exact(i: u32, x: f64) -> Result<f64> {
    check_unit("sawtooth_exact", x)?;
    if i == 0 {
        return Err(Error::Precondition("sawtooth index must be positive".into()));
    }
    Ok((0..i).fold(x, |v, _| tent(v)))
}

/// `T_k(x) = T_1(2^{k-1}(x - i/2^{k-1}))` on segment `i`.
pub fn sawtooth_closed_form(k: u32, x: f64) -> Result<f64> {
    check_unit("sawtooth_closed_form", x)?;
    if k == 0 {
        return Err(Error::Precondition("sawtooth index must be positive".into()));
    }
    let segments = 2f64.powi(k as i32 - 1);
    let i = (x * segments).floor().min(segments - 1.0);
    Ok(tent(segments * (x - i / segments)))
}

/// `f̃_k(x) = x - Σ_{i=1}^{k} T_i(x)/4^i`.
pub fn square_ref(k: u32, x: f64) -> Result<f64> {
    check_unit("square_ref", x)?;
    let mut acc = x;
    let mut t = x;
    for i in 1..=k {
        t = tent(t);
        acc -= t * 0.25f64.powi(i as i32);
    }
    Ok(acc)
}

/// Exact signed error `f̃_k(x) - x²` on the segment containing `x`.
pub fn square_error_form(k: u32, x: f64) -> Result<f64> {
    check_unit("square_error_form", x)?;
    let segments = 2f64.powi(k as i32);
    let i = (x * segments).floor().min(segments - 1.0);
    let (a, b) = (i / segments, (i + 1.0) / segments);
    Ok(-(x - a) * (x - b))
}

/// `g̃(x,y) = 2f̃((x+y)/2) - f̃(x)/2 - f̃(y)/2` with resolution `L·k`.
pub fn product_ref(p: &GadgetParams, x: f64, y: f64) -> Result<f64> {
    check_unit("product_ref", x)?;
    check_unit("product_ref", y)?;
    let k = p.resolution();
    Ok(2.0 * square_ref(k, 0.5 * (x + y))? - 0.5 * (square_ref(k, x)? + square_ref(k, y)?))
}

/// `h̃ = ReLU(g̃)`.
pub fn clamped_product_ref(p: &GadgetParams, x: f64, y: f64) -> Result<f64> {
    Ok(product_ref(p, x, y)?.max(0.0))
}

/// Sawtooth term weights over the `2^i` hinge units `ReLU(y - m/2^i)`:
/// `T_i(y) = Σ_m w_m ReLU(y - m/2^i)` for `y ∈ [0,1]`.
fn sawtooth_hinges(i: u32) -> Vec<(f64, f64)> {
    let scale = 2f64.powi(i as i32);
    let count = 1usize << i;
    (0..count)
        .map(|m| {
            let shift = m as f64 / scale;
            let w = match m {
                0 => scale,
                _ if m % 2 == 1 => -2.0 * scale,
                _ => 2.0 * scale,
            };
            (shift, w)
        })
        .collect()
}

/// FNN with `L` hidden layers of width `2^{k+1} - 1` computing `f̃_{Lk}`.
///
/// Hidden layer `j` holds the hinge units of `T_1..T_k` applied to
/// `y_j = T_{(j-1)k}(x)` and one accumulator unit carrying `f̃_{(j-1)k}(x)`.
/// The accumulator is at least `x²`, so ReLU passes it unchanged.
pub fn build_square_ffn(p: &GadgetParams) -> Result<FfnNetwork> {
    let k = p.k() as usize;
    let hinges: Vec<Vec<(f64, f64)>> = (1..=p.k()).map(sawtooth_hinges).collect();
    let starts: Vec<usize> = hinges
        .iter()
        .scan(0, |acc, g| {
            let s = *acc;
            *acc += g.len();
            Some(s)
        })
        .collect();
    let acc = hinges.iter().map(Vec::len).sum::<usize>();
    let width = acc + 1;

    // Weights reading `scale · T_{i+1}(y)` off the hinge units of group `i`.
    let group_read = |i: usize, scale: f64, row: &mut [f64]| {
        for (m, &(_, w)) in hinges[i].iter().enumerate() {
            row[starts[i] + m] += scale * w;
        }
    };
    // Weights reading `f̃_{(j+1)k}(x)` off hidden layer `j`.
    let accumulator_read = |j: usize| {
        let mut row = vec![0.0; width];
        row[acc] = 1.0;
        for i in 0..k {
            group_read(i, -0.25f64.powi((j * k + i + 1) as i32), &mut row);
        }
        row
    };
    let hidden = |y_row: &[f64], acc_row: &[f64]| -> Result<FfnLayer> {
        let in_dim = y_row.len();
        let mut w = Matrix::zeros(width, in_dim);
        let mut b = vec![0.0; width];
        for (i, group) in hinges.iter().enumerate() {
            for (m, &(shift, _)) in group.iter().enumerate() {
                for (c, v) in y_row.iter().enumerate() {
                    w.set(starts[i] + m, c, *v);
                }
                b[starts[i] + m] = -shift;
            }
        }
        for (c, v) in acc_row.iter().enumerate() {
            w.set(acc, c, *v);
        }
        FfnLayer::new(w, b)
    };

    let mut layers = Vec::with_capacity(p.l_depth() + 1);
    layers.push(hidden(&[1.0], &[1.0])?);
    for j in 1..p.l_depth() {
        let mut y_row = vec![0.0; width];
        group_read(k - 1, 1.0, &mut y_row);
        layers.push(hidden(&y_row, &accumulator_read(j - 1))?);
    }
    let out = Matrix::new(1, width, accumulator_read(p.l_depth() - 1))?;
    layers.push(FfnLayer::new(out, vec![0.0])?);
    FfnNetwork::new(1, layers)
}

/// Two-input FNN computing `g̃_{Lk}`: three squaring networks in parallel on
/// `(x+y)/2`, `x`, `y`, combined by `2a - b/2 - c/2`. Width `< 6N`, depth `L`.
pub fn build_product_ffn(p: &GadgetParams) -> Result<FfnNetwork> {
    let square = build_square_ffn(p)?;
    let stacked = parallel_ffn(&[square.clone(), square.clone(), square])?;
    let split = Matrix::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let combine = Matrix::from_rows(&[vec![2.0, -0.5, -0.5]])?;
    stacked
        .precompose_affine(&split, &[0.0; 3])?
        .postcompose_affine(&combine, &[0.0])
}

/// `h̃_{Lk} = ReLU(g̃_{Lk})` with one extra hidden layer, depth `L + 1`.
pub fn build_clamped_product_ffn(p: &GadgetParams) -> Result<FfnNetwork> {
    compose_ffn(&build_product_ffn(p)?, &FfnNetwork::identity(1, 1))
}
