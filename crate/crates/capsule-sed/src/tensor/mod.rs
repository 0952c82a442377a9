//! N-dimensional `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: a shape plus row-major data behind an
//! `Arc`. Operations compute eagerly and, when at least one input is attached
//! to a [`Graph`] (via [`Graph::var`]), record a backward closure on that
//! graph so [`Graph::backward`] can later push gradients to every attached
//! leaf. Detached tensors are plain values and never touch a tape, which
//! makes pure inference allocation-light and thread-friendly.
//!
//! The graph is append-only, so node indices are already a topological
//! order; backward is a single reverse sweep.

mod conv;
mod grad_check;
mod norm;
mod ops;

pub use conv::Padding;
pub use grad_check::{check_gradients, relative_error, sample_indices, GradCheckReport};
pub use ops::NORM_EPS;
pub use norm::{BnMode, BnObservation, RunningStat};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Gradient buffers indexed by node id. `None` until the node receives
/// its first contribution.
type GradStore = Vec<Option<Vec<f64>>>;

type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Node {
    backward: Option<BackwardFn>,
    /// Keep this node's gradient around after the sweep (set for `var`s).
    retain: bool,
}

struct GraphInner {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<GradStore>,
}

/// Recording tape for reverse-mode differentiation. Cheap to clone; all
/// clones share the same tape. Single-threaded by construction (`Rc`).
#[derive(Clone)]
pub struct Graph(Rc<GraphInner>);

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph(Rc::new(GraphInner {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }))
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn push(&self, backward: Option<BackwardFn>, retain: bool) -> usize {
        let mut nodes = self.0.nodes.borrow_mut();
        nodes.push(Node { backward, retain });
        nodes.len() - 1
    }

    /// Attach a tensor to this graph as a differentiable leaf. The returned
    /// tensor shares the input's data; after [`Graph::backward`] its gradient
    /// is available through [`Tensor::grad`].
    pub fn var(&self, value: &Tensor) -> Tensor {
        let id = self.push(None, true);
        Tensor {
            shape: value.shape.clone(),
            data: Arc::clone(&value.data),
            node: Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }

    /// Run the reverse sweep from a scalar loss, populating gradients for
    /// every attached leaf reachable from it.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss.shape),
            ));
        }
        let node = loss.node.as_ref().ok_or_else(|| {
            Error::shape("backward", "loss is not attached to a graph".to_string())
        })?;
        if !self.same_graph(&node.graph) {
            return Err(Error::shape(
                "backward",
                "loss belongs to a different graph".to_string(),
            ));
        }

        let n = self.0.nodes.borrow().len();
        let mut grads: GradStore = (0..n).map(|_| None).collect();
        grads[node.id] = Some(vec![1.0]);

        for id in (0..=node.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let nodes = self.0.nodes.borrow();
            if let Some(back) = &nodes[id].backward {
                back(&g, &mut grads);
            }
            if nodes[id].retain {
                drop(nodes);
                grads[id] = Some(g);
            }
        }

        *self.0.grads.borrow_mut() = grads;
        Ok(())
    }
}

#[derive(Clone)]
struct NodeRef {
    graph: Graph,
    id: usize,
}

/// Immutable N-dimensional array of `f64` in row-major order, optionally
/// carrying a backreference into a differentiation graph.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "from_vec",
                format!(
                    "shape {:?} (numel {}) does not match {} values",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    /// Build a tensor around shared data without copying.
    pub fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "from_shared",
                format!("shape {:?} vs {} values", shape, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn vector(values: &[f64]) -> Tensor {
        Tensor {
            shape: vec![values.len()],
            data: Arc::new(values.to_vec()),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Extract the single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Value at a row-major multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            assert!(ix < self.shape[i], "index {:?} out of shape {:?}", index, self.shape);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    /// Drop any graph attachment, leaving a plain value.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if this
    /// tensor is an attached leaf (or retained node) that was reached.
    pub fn grad(&self) -> Option<Tensor> {
        let node = self.node.as_ref()?;
        let grads = node.graph.0.grads.borrow();
        let g = grads.get(node.id)?.as_ref()?;
        Some(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(g.clone()),
            node: None,
        })
    }

    /// Like [`Tensor::grad`], but a leaf with no path to the loss yields an
    /// all-zero gradient instead of `None`.
    pub fn grad_or_zero(&self) -> Tensor {
        self.grad().unwrap_or_else(|| Tensor::zeros(&self.shape))
    }

    /// Graph shared by the given tensors, if any is attached. Errors when two
    /// inputs belong to different graphs.
    fn recording_graph(inputs: &[&Tensor]) -> Result<Option<Graph>> {
        let mut found: Option<Graph> = None;
        for t in inputs {
            if let Some(nr) = &t.node {
                match &found {
                    None => found = Some(nr.graph.clone()),
                    Some(g) => {
                        if !g.same_graph(&nr.graph) {
                            return Err(Error::shape(
                                "op",
                                "inputs attached to different graphs".to_string(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(found)
    }

    /// Core constructor for differentiable operations: computes nothing
    /// itself, just wires `data`/`shape` up with a backward closure that
    /// scatters the output gradient onto the attached inputs.
    ///
    /// `grad_fn(g, sinks)` receives the output gradient and accumulates the
    /// per-input contributions via [`OpGrads::add`].
    pub(crate) fn from_op(
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Vec<f64>,
        grad_fn: impl Fn(&[f64], &mut OpGrads) + 'static,
    ) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let graph = Tensor::recording_graph(inputs)?;
        let data = Arc::new(data);
        let node = graph.map(|graph| {
            let ids: Vec<Option<usize>> = inputs
                .iter()
                .map(|t| t.node.as_ref().map(|n| n.id))
                .collect();
            let lens: Vec<usize> = inputs.iter().map(|t| t.len()).collect();
            let backward: BackwardFn = Box::new(move |g, store| {
                let mut sinks = OpGrads {
                    ids: &ids,
                    lens: &lens,
                    store,
                };
                grad_fn(g, &mut sinks);
            });
            let id = graph.push(Some(backward), false);
            NodeRef { graph, id }
        });
        Ok(Tensor { shape, data, node })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(6).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, data={:?}{})",
            self.shape,
            preview,
            if self.len() > 6 { ", .." } else { "" }
        )
    }
}

/// Gradient sinks for one recorded operation, indexed by input position.
pub(crate) struct OpGrads<'a> {
    ids: &'a [Option<usize>],
    lens: &'a [usize],
    store: &'a mut GradStore,
}

impl OpGrads<'_> {

    /// Accumulate into input `i`'s gradient buffer (no-op when detached).
    pub(crate) fn add(&mut self, i: usize, f: impl FnOnce(&mut [f64])) {
        if let Some(id) = self.ids[i] {
            let len = self.lens[i];
            let buf = self.store[id].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tensor::from_vec(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert!(!t.is_attached());
    }

    #[test]
    fn from_vec_rejects_bad_shape() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0]).is_err());
        assert!(Tensor::from_vec(vec![0], vec![]).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum(w * w), w = [1, 2] -> grad [2, 4]
        let g = Graph::new();
        let w = g.var(&Tensor::vector(&[1.0, 2.0]));
        let loss = w.mul(&w).unwrap().sum_all();
        g.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_parameter_has_no_grad() {
        let g = Graph::new();
        let w = g.var(&Tensor::vector(&[1.0, 2.0]));
        let u = g.var(&Tensor::vector(&[3.0]));
        let loss = w.mul(&w).unwrap().sum_all();
        g.backward(&loss).unwrap();
        assert!(u.grad().is_none());
        assert_eq!(u.grad_or_zero().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let w = g.var(&Tensor::vector(&[1.0, 2.0]));
        let y = w.mul(&w).unwrap();
        assert!(g.backward(&y).is_err());
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let g = Graph::new();
        let loss = Tensor::scalar(1.0);
        assert!(g.backward(&loss).is_err());
    }

    #[test]
    fn mixing_graphs_is_rejected() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let a = g1.var(&Tensor::vector(&[1.0]));
        let b = g2.var(&Tensor::vector(&[1.0]));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn reused_leaf_accumulates() {
        // loss = sum(w) + sum(w) -> grad 2 everywhere
        let g = Graph::new();
        let w = g.var(&Tensor::vector(&[1.0, 5.0]));
        let loss = w.sum_all().add(&w.sum_all()).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[2.0, 2.0]);
    }
}
