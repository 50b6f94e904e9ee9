use smallvec::SmallVec;

use crate::error::Result;
use crate::linalg::prim::{self, Prim};
use crate::linalg::tape::{NodeId, Tape};
use crate::linalg::Matrix;

/// Evaluation backend for code that should run both with and without a tape.
///
/// [`Eager`] computes values directly; [`Tape`] records them for a reverse
/// sweep. Both call the same forward kernels.
pub trait Graph {
    type Var: Clone;

    /// Introduces a value that is not differentiated.
    fn constant(&mut self, m: Matrix) -> Self::Var;

    /// Introduces a differentiable value. Backends without gradients treat it as a constant.
    fn param(&mut self, m: Matrix) -> Self::Var {
        self.constant(m)
    }

    /// Same value, cut from the gradient path.
    fn detach(&mut self, v: &Self::Var) -> Self::Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Matrix;

    fn apply(&mut self, prim: Prim, inputs: &[&Self::Var]) -> Result<Self::Var>;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Sub, &[a, b])
    }
    fn scale(&mut self, a: &Self::Var, s: f64) -> Result<Self::Var> {
        self.apply(Prim::Scale(s), &[a])
    }
    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::MatMul, &[a, b])
    }
    fn transpose(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Transpose, &[a])
    }
    fn hadamard(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Hadamard, &[a, b])
    }
    fn tanh(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Tanh, &[a])
    }
    fn sigmoid(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Sigmoid, &[a])
    }
    fn relu(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Relu, &[a])
    }
    fn sin(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Sin, &[a])
    }
    fn cos(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Cos, &[a])
    }
    fn atan2(&mut self, y: &Self::Var, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Atan2, &[y, x])
    }
    fn softmax_rows(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::SoftmaxRows, &[a])
    }
    fn layer_norm(&mut self, x: &Self::Var, gain: &Self::Var, bias: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::LayerNorm, &[x, gain, bias])
    }
    fn cholesky(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Cholesky, &[a])
    }
    fn solve_spd(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::SolveSpd, &[a, b])
    }
    fn weighted_outer(&mut self, a: &Self::Var, w: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::WeightedOuter, &[a, w, b])
    }
    fn concat_cols(&mut self, parts: &[&Self::Var]) -> Result<Self::Var> {
        self.apply(Prim::ConcatCols, parts)
    }
    fn concat_rows(&mut self, parts: &[&Self::Var]) -> Result<Self::Var> {
        self.apply(Prim::ConcatRows, parts)
    }
    fn slice(&mut self, a: &Self::Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Self::Var> {
        self.apply(Prim::Slice { rows, cols }, &[a])
    }
    fn add_col(&mut self, m: &Self::Var, v: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::AddCol, &[m, v])
    }
    fn sub_col(&mut self, m: &Self::Var, v: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::SubCol, &[m, v])
    }
    fn sum(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Prim::Sum, &[a])
    }
    fn wrap_row(&mut self, a: &Self::Var, row: usize) -> Result<Self::Var> {
        self.apply(Prim::WrapRow(row), &[a])
    }
    /// `Σ aᵢⱼ²` as 1×1.
    fn sum_squares(&mut self, a: &Self::Var) -> Result<Self::Var> {
        let sq = self.hadamard(a, a)?;
        self.sum(&sq)
    }
    /// `A x + b` for column vectors.
    fn affine(&mut self, w: &Self::Var, x: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        let wx = self.matmul(w, x)?;
        self.add(&wx, b)
    }
}

/// Tape-free evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Var = Matrix;

    fn constant(&mut self, m: Matrix) -> Matrix {
        m
    }

    fn detach(&mut self, v: &Matrix) -> Matrix {
        v.clone()
    }

    fn value<'a>(&'a self, v: &'a Matrix) -> &'a Matrix {
        v
    }

    fn apply(&mut self, prim: Prim, inputs: &[&Matrix]) -> Result<Matrix> {
        prim::forward(&prim, inputs).map(|(m, _)| m)
    }
}

impl Graph for Tape {
    type Var = NodeId;

    fn constant(&mut self, m: Matrix) -> NodeId {
        Tape::constant(self, m)
    }

    fn param(&mut self, m: Matrix) -> NodeId {
        Tape::param(self, m)
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Matrix {
        Tape::value(self, *v)
    }

    fn apply(&mut self, prim: Prim, inputs: &[&NodeId]) -> Result<NodeId> {
        let ids: SmallVec<[NodeId; 4]> = inputs.iter().map(|v| **v).collect();
        self.record(prim, &ids)
    }
}
