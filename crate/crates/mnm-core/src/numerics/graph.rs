use super::{NumericsError, Result, Tensor};

/// Handle to a node on a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reverse rule of a recorded operation. Implementations read parent and
/// output values from the graph and add contributions into the sink.
pub trait BackwardOp {
    fn backward(&self, g: &Graph, out: NodeId, grad: &[f64], sink: &mut Gradients);
}

pub(crate) struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    needs_grad: bool,
    op: Option<Box<dyn BackwardOp>>,
}

/// Recording tape. Node order is creation order, which is a valid
/// topological order: every parent precedes its consumers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf. Gradient is collected iff the tensor asked
    /// for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad();
        let (shape, values) = t.into_parts();
        self.push_node(shape, values, needs, None)
    }

    /// Insert constant data that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(NumericsError::ValueCount {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(self.push_node(shape, values, false, None))
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push_node(vec![], vec![v], false, None)
    }

    /// Record an operation output. `op` is `None` when no parent tracks
    /// gradients; backward then skips the node entirely.
    pub fn push_node(
        &mut self,
        shape: Vec<usize>,
        values: Vec<f64>,
        needs_grad: bool,
        op: Option<Box<dyn BackwardOp>>,
    ) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            values,
            needs_grad,
            op: if needs_grad { op } else { None },
        });
        id
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.needs_grad(id))
    }

    /// Reverse pass from a scalar loss. Visits each recorded node exactly
    /// once, in reverse creation order. Leaf gradients are retained in the
    /// returned [`Gradients`]; intermediate buffers are dropped as soon as
    /// they have been propagated.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.values.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: node.shape.clone(),
            });
        }
        let mut sink = Gradients {
            bufs: (0..self.nodes.len()).map(|_| None).collect(),
            active: self.nodes.iter().map(|n| n.needs_grad).collect(),
        };
        sink.accumulate(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = sink.bufs[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Some(op) => op.backward(self, NodeId(i), &grad, &mut sink),
                None => sink.bufs[i] = Some(grad), // leaf: keep for the caller
            }
        }
        Ok(sink)
    }
}

/// Per-node gradient buffers produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
    active: Vec<bool>,
}

impl Gradients {
    /// Accumulated gradient of a leaf, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.bufs[id.0].as_deref()
    }

    /// Leaf gradient, or zeros when the node was unreachable from the loss.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        match self.bufs[id.0].as_ref() {
            Some(b) => b.clone(),
            None => vec![0.0; len],
        }
    }

    /// Add `contrib` into the buffer for `id`. No-op for nodes that do not
    /// track gradients.
    pub fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        if !self.active[id.0] {
            return;
        }
        match &mut self.bufs[id.0] {
            Some(buf) => {
                debug_assert_eq!(buf.len(), contrib.len());
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    /// Mutable zero-initialized buffer for scatter-style backward rules.
    /// Returns `None` for nodes that do not track gradients.
    pub fn buf_mut(&mut self, id: NodeId, len: usize) -> Option<&mut [f64]> {
        if !self.active[id.0] {
            return None;
        }
        let slot = &mut self.bufs[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        slot.as_deref_mut()
    }
}
