//! Differentiable primitives: one forward kernel and one vector-Jacobian
//! product per operation. Both the tape and the eager evaluator call the
//! same forward kernels, so taped and untaped runs agree bit for bit.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::cholesky::{cholesky_ladder, cholesky_solve, solve_lower_transposed};
use crate::linalg::Matrix;

/// Layer-normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Primitive operation kinds that can be recorded on a tape.
#[derive(Clone, Debug, PartialEq)]
pub enum Prim {
    /// Leaf value (parameter or constant); never evaluated.
    Leaf,
    Add,
    Sub,
    Scale(f64),
    MatMul,
    Transpose,
    Hadamard,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Sin,
    Cos,
    /// Elementwise `atan2(y, x)`; inputs are `[y, x]`.
    Atan2,
    SoftmaxRows,
    /// Inputs `[x, gain, bias]`; normalizes each column of `x` over its rows.
    LayerNorm,
    /// Lower Cholesky factor with the jitter ladder.
    Cholesky,
    /// Inputs `[a, b]`; returns `a⁻¹ b` for symmetric positive definite `a`.
    SolveSpd,
    /// Inputs `[a (n×m), w (m×1), b (p×m)]`; returns `Σᵢ wᵢ aᵢ bᵢᵀ`.
    WeightedOuter,
    ConcatCols,
    ConcatRows,
    Slice {
        rows: (usize, usize),
        cols: (usize, usize),
    },
    /// Inputs `[m (n×k), v (n×1)]`; adds `v` to every column.
    AddCol,
    /// Inputs `[m (n×k), v (n×1)]`; subtracts `v` from every column.
    SubCol,
    /// Sum of all entries, as 1×1.
    Sum,
    /// Wraps one row into `(-π, π]`. Unit derivative.
    WrapRow(usize),
    /// Coordinated-turn transition applied to each column of a 5×m state matrix.
    CtTransition { dt: f64 },
    /// Range/bearing measurement of each column of a 5×m state matrix.
    RangeBearing,
}

impl Prim {
    pub fn name(&self) -> &'static str {
        match self {
            Prim::Leaf => "leaf",
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Scale(_) => "scale",
            Prim::MatMul => "matmul",
            Prim::Transpose => "transpose",
            Prim::Hadamard => "hadamard",
            Prim::Tanh => "tanh",
            Prim::Sigmoid => "sigmoid",
            Prim::Relu => "relu",
            Prim::Exp => "exp",
            Prim::Sin => "sin",
            Prim::Cos => "cos",
            Prim::Atan2 => "atan2",
            Prim::SoftmaxRows => "softmax_rows",
            Prim::LayerNorm => "layer_norm",
            Prim::Cholesky => "cholesky",
            Prim::SolveSpd => "solve_spd",
            Prim::WeightedOuter => "weighted_outer",
            Prim::ConcatCols => "concat_cols",
            Prim::ConcatRows => "concat_rows",
            Prim::Slice { .. } => "slice",
            Prim::AddCol => "add_col",
            Prim::SubCol => "sub_col",
            Prim::Sum => "sum",
            Prim::WrapRow(_) => "wrap_row",
            Prim::CtTransition { .. } => "ct_transition",
            Prim::RangeBearing => "range_bearing",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Prim::Leaf => Some(0),
            Prim::ConcatCols | Prim::ConcatRows => None,
            Prim::Add
            | Prim::Sub
            | Prim::MatMul
            | Prim::Hadamard
            | Prim::Atan2
            | Prim::SolveSpd
            | Prim::AddCol
            | Prim::SubCol => Some(2),
            Prim::LayerNorm | Prim::WeightedOuter => Some(3),
            _ => Some(1),
        }
    }
}

/// Values saved by a forward kernel for its backward rule.
#[derive(Clone, Debug, Default)]
pub enum Cache {
    #[default]
    None,
    /// Cholesky factor of the (jittered) input, plus the jitter used.
    Factor { l: Matrix, jitter: f64 },
    /// Normalized activations and per-column inverse standard deviations.
    Normalized { xhat: Matrix, inv_std: Vec<f64> },
}

/// Wraps an angle into `(-π, π]`. Angles already in range are returned unchanged.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let tau = 2.0 * PI;
    let mut r = a - tau * ((a + PI) / tau).floor();
    if r <= -PI {
        r += tau;
    } else if r > PI {
        r -= tau;
    }
    r
}

/// Coefficients of the exact coordinated-turn transition for one turn rate.
///
/// Returns `(sin θ, cos θ, sin θ / ω, (1 - cos θ) / ω, d/dω of the last two)`
/// with `θ = ω Δt`, using a 4th-order series when `|θ| < 1e-4`.
#[derive(Clone, Copy, Debug)]
pub struct TurnCoeffs {
    pub sin: f64,
    pub cos: f64,
    pub a: f64,
    pub b: f64,
    pub da: f64,
    pub db: f64,
}

pub fn turn_coeffs(omega: f64, dt: f64) -> TurnCoeffs {
    let theta = omega * dt;
    let sin = theta.sin();
    let cos = theta.cos();
    if theta.abs() < 1e-4 {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        TurnCoeffs {
            sin,
            cos,
            a: dt * (1.0 - t2 / 6.0 + t4 / 120.0),
            b: dt * theta * (0.5 - t2 / 24.0 + t4 / 720.0),
            da: dt * dt * theta * (-1.0 / 3.0 + t2 / 30.0),
            db: dt * dt * (0.5 - t2 / 8.0 + t4 / 144.0),
        }
    } else {
        let a = sin / omega;
        let b = (1.0 - cos) / omega;
        TurnCoeffs {
            sin,
            cos,
            a,
            b,
            da: (dt * cos - a) / omega,
            db: (dt * sin - b) / omega,
        }
    }
}

/// One coordinated-turn step of a state `[px, vx, py, vy, ω]`.
pub fn ct_step(x: &[f64; 5], dt: f64) -> [f64; 5] {
    let [px, vx, py, vy, w] = *x;
    let k = turn_coeffs(w, dt);
    [
        px + vx * k.a - vy * k.b,
        vx * k.cos - vy * k.sin,
        py + vx * k.b + vy * k.a,
        vx * k.sin + vy * k.cos,
        w,
    ]
}

/// Jacobian of [`ct_step`], row-major 5×5.
pub fn ct_jacobian(x: &[f64; 5], dt: f64) -> [[f64; 5]; 5] {
    let [_, vx, _, vy, w] = *x;
    let k = turn_coeffs(w, dt);
    [
        [1.0, k.a, 0.0, -k.b, vx * k.da - vy * k.db],
        [0.0, k.cos, 0.0, -k.sin, -dt * (vx * k.sin + vy * k.cos)],
        [0.0, k.b, 1.0, k.a, vx * k.db + vy * k.da],
        [0.0, k.sin, 0.0, k.cos, dt * (vx * k.cos - vy * k.sin)],
        [0.0, 0.0, 0.0, 0.0, 1.0],
    ]
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn column_vector_of(op: &'static str, m: &Matrix, v: &Matrix) -> Result<()> {
    if v.cols() != 1 || v.rows() != m.rows() {
        return Err(shape_err(op, m, v));
    }
    Ok(())
}

fn row_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(g.rows(), 1);
    for r in 0..g.rows() {
        out.set(r, 0, g.row(r).iter().sum());
    }
    out
}

fn state_columns(op: &'static str, x: &Matrix) -> Result<()> {
    if x.rows() != 5 {
        return Err(Error::Shape {
            op,
            lhs: x.shape(),
            rhs: (5, x.cols()),
        });
    }
    Ok(())
}

/// Evaluates a primitive. Returns the output and whatever the backward rule needs.
pub fn forward(prim: &Prim, inputs: &[&Matrix]) -> Result<(Matrix, Cache)> {
    if let Some(n) = prim.arity() {
        if inputs.len() != n {
            return Err(Error::Arity {
                op: prim.name(),
                expected: n,
                got: inputs.len(),
            });
        }
    } else if inputs.is_empty() {
        return Err(Error::Arity {
            op: prim.name(),
            expected: 1,
            got: 0,
        });
    }
    let mut cache = Cache::None;
    let out = match prim {
        Prim::Leaf => {
            return Err(Error::InvalidArgument("leaf nodes have no forward rule".into()));
        }
        Prim::Add => inputs[0].add(inputs[1])?,
        Prim::Sub => inputs[0].sub(inputs[1])?,
        Prim::Scale(s) => inputs[0].scale(*s),
        Prim::MatMul => inputs[0].matmul(inputs[1])?,
        Prim::Transpose => inputs[0].transpose(),
        Prim::Hadamard => inputs[0].hadamard(inputs[1])?,
        Prim::Tanh => inputs[0].map(f64::tanh),
        Prim::Sigmoid => inputs[0].map(sigmoid),
        Prim::Relu => inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Prim::Exp => inputs[0].map(f64::exp),
        Prim::Sin => inputs[0].map(f64::sin),
        Prim::Cos => inputs[0].map(f64::cos),
        Prim::Atan2 => inputs[0].zip_map(inputs[1], "atan2", f64::atan2)?,
        Prim::SoftmaxRows => softmax_rows(inputs[0]),
        Prim::LayerNorm => {
            let (y, xhat, inv_std) = layer_norm(inputs[0], inputs[1], inputs[2])?;
            cache = Cache::Normalized { xhat, inv_std };
            y
        }
        Prim::Cholesky => {
            let (l, jitter) = cholesky_ladder(inputs[0])?;
            cache = Cache::Factor { l: l.clone(), jitter };
            l
        }
        Prim::SolveSpd => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rows() != a.cols() || a.rows() != b.rows() {
                return Err(shape_err("solve_spd", a, b));
            }
            let (l, jitter) = cholesky_ladder(a)?;
            let x = cholesky_solve(&l, b)?;
            cache = Cache::Factor { l, jitter };
            x
        }
        Prim::WeightedOuter => weighted_outer(inputs[0], inputs[1], inputs[2])?,
        Prim::ConcatCols => {
            let rows = inputs[0].rows();
            let cols: usize = inputs.iter().map(|m| m.cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            let mut off = 0;
            for m in inputs {
                if m.rows() != rows {
                    return Err(shape_err("concat_cols", inputs[0], m));
                }
                for r in 0..rows {
                    for c in 0..m.cols() {
                        out.set(r, off + c, m.get(r, c));
                    }
                }
                off += m.cols();
            }
            out
        }
        Prim::ConcatRows => {
            let cols = inputs[0].cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for m in inputs {
                if m.cols() != cols {
                    return Err(shape_err("concat_rows", inputs[0], m));
                }
                data.extend_from_slice(m.data());
                rows += m.rows();
            }
            Matrix::new(rows, cols, data)?
        }
        Prim::Slice { rows, cols } => {
            let x = inputs[0];
            if rows.0 > rows.1 || cols.0 > cols.1 || rows.1 > x.rows() || cols.1 > x.cols() {
                return Err(Error::Shape {
                    op: "slice",
                    lhs: x.shape(),
                    rhs: (rows.1, cols.1),
                });
            }
            Matrix::from_fn(rows.1 - rows.0, cols.1 - cols.0, |r, c| x.get(rows.0 + r, cols.0 + c))
        }
        Prim::AddCol | Prim::SubCol => {
            let (m, v) = (inputs[0], inputs[1]);
            column_vector_of(prim.name(), m, v)?;
            let sign = if *prim == Prim::AddCol { 1.0 } else { -1.0 };
            let mut out = m.clone();
            for r in 0..m.rows() {
                let d = v.get(r, 0);
                for c in 0..m.cols() {
                    if sign > 0.0 {
                        out.add_at(r, c, d);
                    } else {
                        out.set(r, c, m.get(r, c) - d);
                    }
                }
            }
            out
        }
        Prim::Sum => Matrix::scalar(inputs[0].sum()),
        Prim::WrapRow(row) => {
            let x = inputs[0];
            if *row >= x.rows() {
                return Err(Error::Shape {
                    op: "wrap_row",
                    lhs: x.shape(),
                    rhs: (*row + 1, x.cols()),
                });
            }
            let mut out = x.clone();
            for c in 0..x.cols() {
                out.set(*row, c, wrap_angle(x.get(*row, c)));
            }
            out
        }
        Prim::CtTransition { dt } => {
            let x = inputs[0];
            state_columns("ct_transition", x)?;
            let mut out = Matrix::zeros(5, x.cols());
            for c in 0..x.cols() {
                let s = [x.get(0, c), x.get(1, c), x.get(2, c), x.get(3, c), x.get(4, c)];
                let y = ct_step(&s, *dt);
                for (r, v) in y.iter().enumerate() {
                    out.set(r, c, *v);
                }
            }
            out
        }
        Prim::RangeBearing => {
            let x = inputs[0];
            state_columns("range_bearing", x)?;
            let mut out = Matrix::zeros(2, x.cols());
            for c in 0..x.cols() {
                let (px, py) = (x.get(0, c), x.get(2, c));
                let range = (px * px + py * py).sqrt();
                if range == 0.0 {
                    return Err(Error::TargetAtOrigin);
                }
                out.set(0, c, range);
                out.set(1, c, py.atan2(px));
            }
            out
        }
    };
    if !out.is_finite() {
        return Err(Error::NonFinite(prim.name()));
    }
    Ok((out, cache))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>)> {
    column_vector_of("layer_norm", x, gain)?;
    column_vector_of("layer_norm", x, bias)?;
    let d = x.rows() as f64;
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.cols());
    for c in 0..x.cols() {
        let mean = (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / d;
        let var = (0..x.rows()).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for r in 0..x.rows() {
            let h = (x.get(r, c) - mean) * inv;
            xhat.set(r, c, h);
            y.set(r, c, gain.get(r, 0) * h + bias.get(r, 0));
        }
        inv_std.push(inv);
    }
    Ok((y, xhat, inv_std))
}

fn weighted_outer(a: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let m = a.cols();
    if w.shape() != (m, 1) {
        return Err(shape_err("weighted_outer", a, w));
    }
    if b.cols() != m {
        return Err(shape_err("weighted_outer", a, b));
    }
    let (n, p) = (a.rows(), b.rows());
    let mut out = Matrix::zeros(n, p);
    for i in 0..m {
        let wi = w.get(i, 0);
        for r in 0..n {
            let ar = wi * a.get(r, i);
            for c in 0..p {
                out.add_at(r, c, ar * b.get(c, i));
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product: given the adjoint of the output, returns one
/// adjoint per input, each shaped like that input.
pub fn backward(
    prim: &Prim,
    inputs: &[&Matrix],
    output: &Matrix,
    cache: &Cache,
    g: &Matrix,
) -> Result<Vec<Matrix>> {
    let grads = match prim {
        Prim::Leaf => Vec::new(),
        Prim::Add => vec![g.clone(), g.clone()],
        Prim::Sub => vec![g.clone(), g.scale(-1.0)],
        Prim::Scale(s) => vec![g.scale(*s)],
        Prim::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![g.matmul(&b.transpose())?, a.transpose().matmul(g)?]
        }
        Prim::Transpose => vec![g.transpose()],
        Prim::Hadamard => vec![g.hadamard(inputs[1])?, g.hadamard(inputs[0])?],
        Prim::Tanh => vec![g.zip_map(output, "tanh'", |g, y| g * (1.0 - y * y))?],
        Prim::Sigmoid => vec![g.zip_map(output, "sigmoid'", |g, y| g * y * (1.0 - y))?],
        Prim::Relu => vec![g.zip_map(inputs[0], "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?],
        Prim::Exp => vec![g.hadamard(output)?],
        Prim::Sin => vec![g.zip_map(inputs[0], "sin'", |g, x| g * x.cos())?],
        Prim::Cos => vec![g.zip_map(inputs[0], "cos'", |g, x| -g * x.sin())?],
        Prim::Atan2 => {
            let (y, x) = (inputs[0], inputs[1]);
            let mut gy = Matrix::zeros(y.rows(), y.cols());
            let mut gx = Matrix::zeros(x.rows(), x.cols());
            for i in 0..g.len() {
                let (yv, xv) = (y.data()[i], x.data()[i]);
                let den = xv * xv + yv * yv;
                gy.data_mut()[i] = g.data()[i] * xv / den;
                gx.data_mut()[i] = -g.data()[i] * yv / den;
            }
            vec![gy, gx]
        }
        Prim::SoftmaxRows => {
            let mut gx = Matrix::zeros(output.rows(), output.cols());
            for r in 0..output.rows() {
                let dot: f64 = output.row(r).iter().zip(g.row(r)).map(|(y, g)| y * g).sum();
                for c in 0..output.cols() {
                    gx.set(r, c, output.get(r, c) * (g.get(r, c) - dot));
                }
            }
            vec![gx]
        }
        Prim::LayerNorm => {
            let Cache::Normalized { xhat, inv_std } = cache else {
                return Err(Error::InvalidArgument("layer_norm backward without cache".into()));
            };
            let gain = inputs[1];
            let (d, k) = xhat.shape();
            let mut gx = Matrix::zeros(d, k);
            let mut ggain = Matrix::zeros(d, 1);
            let mut gbias = Matrix::zeros(d, 1);
            for c in 0..k {
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for r in 0..d {
                    let dh = g.get(r, c) * gain.get(r, 0);
                    sum_dh += dh;
                    sum_dh_h += dh * xhat.get(r, c);
                    ggain.add_at(r, 0, g.get(r, c) * xhat.get(r, c));
                    gbias.add_at(r, 0, g.get(r, c));
                }
                let df = d as f64;
                for r in 0..d {
                    let dh = g.get(r, c) * gain.get(r, 0);
                    let v = inv_std[c] / df * (df * dh - sum_dh - xhat.get(r, c) * sum_dh_h);
                    gx.set(r, c, v);
                }
            }
            vec![gx, ggain, gbias]
        }
        Prim::Cholesky => {
            let Cache::Factor { l, .. } = cache else {
                return Err(Error::InvalidArgument("cholesky backward without cache".into()));
            };
            vec![cholesky_backward(l, g)?]
        }
        Prim::SolveSpd => {
            let Cache::Factor { l, .. } = cache else {
                return Err(Error::InvalidArgument("solve backward without cache".into()));
            };
            let gb = cholesky_solve(l, g)?;
            let ga = gb.matmul(&output.transpose())?.symmetrized().scale(-1.0);
            vec![ga, gb]
        }
        Prim::WeightedOuter => {
            let (a, w, b) = (inputs[0], inputs[1], inputs[2]);
            let m = a.cols();
            let gb_full = g.matmul(b)?; // n×m: column i is G bᵢ
            let gta = g.transpose().matmul(a)?; // p×m: column i is Gᵀ aᵢ
            let mut ga = Matrix::zeros(a.rows(), m);
            let mut gbo = Matrix::zeros(b.rows(), m);
            let mut gw = Matrix::zeros(m, 1);
            for i in 0..m {
                let wi = w.get(i, 0);
                let mut dot = 0.0;
                for r in 0..a.rows() {
                    ga.set(r, i, wi * gb_full.get(r, i));
                    dot += a.get(r, i) * gb_full.get(r, i);
                }
                for r in 0..b.rows() {
                    gbo.set(r, i, wi * gta.get(r, i));
                }
                gw.set(i, 0, dot);
            }
            vec![ga, gw, gbo]
        }
        Prim::ConcatCols => {
            let mut out = Vec::with_capacity(inputs.len());
            let mut off = 0;
            for m in inputs {
                out.push(Matrix::from_fn(m.rows(), m.cols(), |r, c| g.get(r, off + c)));
                off += m.cols();
            }
            out
        }
        Prim::ConcatRows => {
            let mut out = Vec::with_capacity(inputs.len());
            let mut off = 0;
            for m in inputs {
                out.push(Matrix::from_fn(m.rows(), m.cols(), |r, c| g.get(off + r, c)));
                off += m.rows();
            }
            out
        }
        Prim::Slice { rows, cols } => {
            let x = inputs[0];
            let mut gx = Matrix::zeros(x.rows(), x.cols());
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    gx.set(rows.0 + r, cols.0 + c, g.get(r, c));
                }
            }
            vec![gx]
        }
        Prim::AddCol => vec![g.clone(), row_sums(g)],
        Prim::SubCol => vec![g.clone(), row_sums(g).scale(-1.0)],
        Prim::Sum => {
            let s = g.to_scalar()?;
            vec![Matrix::filled(inputs[0].rows(), inputs[0].cols(), s)]
        }
        Prim::WrapRow(_) => vec![g.clone()],
        Prim::CtTransition { dt } => {
            let x = inputs[0];
            let mut gx = Matrix::zeros(5, x.cols());
            for c in 0..x.cols() {
                let s = [x.get(0, c), x.get(1, c), x.get(2, c), x.get(3, c), x.get(4, c)];
                let j = ct_jacobian(&s, *dt);
                for (k, row) in j.iter().enumerate() {
                    let gk = g.get(k, c);
                    if gk == 0.0 {
                        continue;
                    }
                    for (r, jv) in row.iter().enumerate() {
                        gx.add_at(r, c, jv * gk);
                    }
                }
            }
            vec![gx]
        }
        Prim::RangeBearing => {
            let x = inputs[0];
            let mut gx = Matrix::zeros(5, x.cols());
            for c in 0..x.cols() {
                let (px, py) = (x.get(0, c), x.get(2, c));
                let r2 = px * px + py * py;
                let r = output.get(0, c);
                let (gr, gb) = (g.get(0, c), g.get(1, c));
                gx.set(0, c, gr * px / r - gb * py / r2);
                gx.set(2, c, gr * py / r + gb * px / r2);
            }
            vec![gx]
        }
    };
    Ok(grads)
}

/// Reverse-mode rule for `L = chol(sym(M))`:
/// `M̄ = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)` where `Φ` keeps the lower triangle and halves the diagonal.
fn cholesky_backward(l: &Matrix, gl: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    let gl_lower = Matrix::from_fn(n, n, |r, c| if r >= c { gl.get(r, c) } else { 0.0 });
    let mut phi = l.transpose().matmul(&gl_lower)?;
    for r in 0..n {
        for c in 0..n {
            if c > r {
                phi.set(r, c, 0.0);
            } else if c == r {
                phi.set(r, c, 0.5 * phi.get(r, c));
            }
        }
    }
    // S = L⁻ᵀ Φ L⁻¹: left solve, then right solve via transposes.
    let left = solve_lower_transposed(l, &phi)?;
    let s = solve_lower_transposed(l, &left.transpose())?.transpose();
    Ok(s.symmetrized())
}
