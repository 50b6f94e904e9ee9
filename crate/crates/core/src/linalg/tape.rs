use std::collections::BTreeMap;
use std::fmt::Write as _;

use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::linalg::prim::{self, Cache, Prim};
use crate::linalg::Matrix;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    prim: Prim,
    inputs: SmallVec<[NodeId; 3]>,
    value: Matrix,
    cache: Cache,
    /// True when the node depends on at least one parameter.
    tracked: bool,
}

/// Append-only record of one forward evaluation, for reverse-mode differentiation.
///
/// Forward values are computed eagerly at record time. Inputs always refer to
/// earlier nodes, so the node order is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Matrix, tracked: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            prim: Prim::Leaf,
            inputs: SmallVec::new(),
            value,
            cache: Cache::None,
            tracked,
        });
        id
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, true)
    }

    /// A constant leaf; no adjoint is ever propagated into it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, false)
    }

    /// Evaluates `prim` on existing nodes and appends the result.
    pub fn record(&mut self, prim: Prim, inputs: &[NodeId]) -> Result<NodeId> {
        if prim == Prim::Leaf {
            return Err(Error::InvalidArgument("use Tape::param or Tape::constant for leaves".into()));
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(id.0));
            }
        }
        let (value, cache) = {
            let values: SmallVec<[&Matrix; 4]> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            prim::forward(&prim, &values)?
        };
        let tracked = inputs.iter().any(|id| self.nodes[id.0].tracked);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            prim,
            inputs: inputs.iter().copied().collect(),
            value,
            cache,
            tracked,
        });
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Re-evaluates every recorded node from its recorded inputs and checks
    /// the result is bit-identical to the stored value.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if node.prim == Prim::Leaf {
                continue;
            }
            let values: SmallVec<[&Matrix; 4]> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let (v, _) = prim::forward(&node.prim, &values)?;
            if v.data().iter().zip(node.value.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Text description of the graph, one node per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tape nodes={}", self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let inputs: Vec<String> = node.inputs.iter().map(|id| format!("n{}", id.0)).collect();
            let kind = match &node.prim {
                Prim::Leaf if node.tracked => "param".to_string(),
                Prim::Leaf => "const".to_string(),
                Prim::Scale(s) => format!("scale[{s}]"),
                Prim::Slice { rows, cols } => format!("slice[{}..{},{}..{}]", rows.0, rows.1, cols.0, cols.1),
                Prim::WrapRow(r) => format!("wrap_row[{r}]"),
                Prim::CtTransition { dt } => format!("ct_transition[dt={dt}]"),
                p => p.name().to_string(),
            };
            let jitter = match &node.cache {
                Cache::Factor { jitter, .. } if *jitter > 0.0 => format!(" jitter={jitter:e}"),
                _ => String::new(),
            };
            let _ = writeln!(
                out,
                "n{i} = {kind}({}) shape={}x{}{jitter}",
                inputs.join(", "),
                node.value.rows(),
                node.value.cols()
            );
        }
        out
    }
}

/// Adjoints of the requested nodes.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<NodeId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.map.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.map.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Reverse sweep from a scalar `loss` node. Every node in `wanted` receives an
/// adjoint of its own shape (zero if the loss does not depend on it).
pub fn backward(tape: &Tape, loss: NodeId, wanted: &[NodeId]) -> Result<Gradients> {
    if loss.0 >= tape.nodes.len() {
        return Err(Error::UnknownNode(loss.0));
    }
    let loss_shape = tape.nodes[loss.0].value.shape();
    if loss_shape != (1, 1) {
        return Err(Error::NotScalar(loss_shape));
    }
    for id in wanted {
        if id.0 >= tape.nodes.len() {
            return Err(Error::UnknownNode(id.0));
        }
        if !tape.nodes[id.0].tracked {
            return Err(Error::UntrackedNode(id.0));
        }
    }
    let mut adj: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
    adj.resize_with(loss.0 + 1, || None);
    adj[loss.0] = Some(Matrix::scalar(1.0));

    for i in (0..=loss.0).rev() {
        let node = &tape.nodes[i];
        if node.prim == Prim::Leaf || !node.tracked {
            continue;
        }
        let Some(g) = adj[i].take() else { continue };
        let values: SmallVec<[&Matrix; 4]> = node.inputs.iter().map(|id| &tape.nodes[id.0].value).collect();
        let grads = prim::backward(&node.prim, &values, &node.value, &node.cache, &g)?;
        for (input, grad) in node.inputs.iter().zip(grads) {
            assert!(input.0 < i, "tape is not topologically ordered");
            if !tape.nodes[input.0].tracked {
                continue;
            }
            match &mut adj[input.0] {
                Some(acc) => acc.add_assign(&grad)?,
                slot @ None => *slot = Some(grad),
            }
        }
        // keep the adjoint of wanted interior nodes
        adj[i] = Some(g);
    }

    let mut map = BTreeMap::new();
    for id in wanted {
        let value = &tape.nodes[id.0].value;
        let g = adj
            .get(id.0)
            .and_then(|a| a.clone())
            .unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols()));
        map.insert(*id, g);
    }
    Ok(Gradients { map })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_add_identity() {
        let mut t = Tape::new();
        let a = t.param(Matrix::identity(2));
        let b = t.param(Matrix::identity(2));
        let c = t.record(Prim::Add, &[a, b]).unwrap();
        assert_eq!(t.value(c), &Matrix::identity(2).scale(2.0));
    }

    #[test]
    fn record_matmul_shape() {
        let mut t = Tape::new();
        let a = t.param(Matrix::filled(2, 3, 1.0));
        let b = t.param(Matrix::filled(3, 4, 1.0));
        let c = t.record(Prim::MatMul, &[a, b]).unwrap();
        assert_eq!(t.value(c).shape(), (2, 4));
        assert!(matches!(t.record(Prim::MatMul, &[b, a]), Err(Error::Shape { .. })));
    }

    #[test]
    fn record_cholesky_diag() {
        let mut t = Tape::new();
        let p = t.param(Matrix::from_diag(&[4.0, 9.0]));
        let l = t.record(Prim::Cholesky, &[p]).unwrap();
        assert_eq!(t.value(l), &Matrix::from_diag(&[2.0, 3.0]));
    }

    #[test]
    fn sum_gives_all_ones_adjoint() {
        let mut t = Tape::new();
        let a = t.param(Matrix::from_fn(3, 3, |r, c| (r + 2 * c) as f64));
        let s = t.record(Prim::Sum, &[a]).unwrap();
        let g = backward(&t, s, &[a]).unwrap();
        assert_eq!(g.get(a).unwrap(), &Matrix::filled(3, 3, 1.0));
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut t = Tape::new();
        let a = t.param(Matrix::identity(2));
        assert!(matches!(backward(&t, a, &[a]), Err(Error::NotScalar((2, 2)))));
    }

    #[test]
    fn unreached_param_gets_zero() {
        let mut t = Tape::new();
        let a = t.param(Matrix::identity(2));
        let b = t.param(Matrix::filled(1, 3, 1.0));
        let s = t.record(Prim::Sum, &[a]).unwrap();
        let g = backward(&t, s, &[a, b]).unwrap();
        assert_eq!(g.get(b).unwrap(), &Matrix::zeros(1, 3));
    }

    #[test]
    fn constants_are_not_differentiable() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::identity(2));
        let p = t.param(Matrix::identity(2));
        let c = t.record(Prim::Add, &[a, p]).unwrap();
        let s = t.record(Prim::Sum, &[c]).unwrap();
        assert!(matches!(backward(&t, s, &[a]), Err(Error::UntrackedNode(_))));
        assert!(t.replay_matches().unwrap());
        assert!(t.dump().contains("n2 = add(n0, n1) shape=2x2"));
    }
}
