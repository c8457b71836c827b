//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every network operation in the pipeline is composed from the primitives
//! here, so the whole thing is trainable and checkable against central
//! finite differences. Tensors are immutable after construction; gradients
//! are produced by recording operations on a [`Tape`] and replaying it
//! backward once per training step.

mod conv;
mod gradcheck;
mod nn;
mod ops;

pub use gradcheck::grad_check;

use std::sync::Arc;

use crate::error::{Error, Result};

/// Index of a node on the active tape.
pub type NodeId = usize;

/// Dense N-dimensional array of f64 in row-major order.
///
/// Cloning is cheap (the buffer is shared). A tensor optionally carries a
/// reference to a node on the tape that produced it; tensors without a node
/// are constants as far as differentiation is concerned.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} does not match data length {}", data.len());
        Tensor { shape, data: Arc::new(data), node: None, requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Value of a rank-0/1 tensor with a single element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Element at a full multi-dimensional index (for tests and IO).
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (size {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Same buffer reinterpreted under a new shape (no tape involvement).
    /// For a differentiable version see [`Tape::reshape`].
    pub fn view(&self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "view {shape:?} incompatible with {:?}", self.shape);
        Tensor { shape, data: Arc::clone(&self.data), node: None, requires_grad: false }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }
}

type BackwardFn = Box<dyn FnOnce(&[f64], &mut GradStore)>;

struct Step {
    out: NodeId,
    backward: BackwardFn,
}

/// Records operations for one forward pass so they can be replayed in
/// reverse. One tape per training step; [`Tape::backward`] consumes it.
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    is_leaf: Vec<bool>,
    steps: Vec<Step>,
    enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { shapes: Vec::new(), is_leaf: Vec::new(), steps: Vec::new(), enabled: true }
    }

    /// A tape that computes forward values but records nothing; every output
    /// is a constant. Used for inference and finite-difference probes.
    pub fn no_grad() -> Tape {
        Tape { shapes: Vec::new(), is_leaf: Vec::new(), steps: Vec::new(), enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.enabled
    }

    /// Register a tensor as a differentiable leaf on this tape.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if !self.enabled {
            return t.clone();
        }
        let id = self.alloc(t.shape.clone(), true);
        Tensor { shape: t.shape.clone(), data: Arc::clone(&t.data), node: Some(id), requires_grad: true }
    }

    fn alloc(&mut self, shape: Vec<usize>, leaf: bool) -> NodeId {
        let id = self.shapes.len();
        self.shapes.push(shape);
        self.is_leaf.push(leaf);
        id
    }

    pub(crate) fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.enabled && inputs.iter().any(|t| t.node.is_some())
    }

    /// Emit an op result, optionally recording its backward rule.
    ///
    /// `backward` receives the gradient w.r.t. the output and accumulates
    /// into the inputs' slots. This is the extension point used by the
    /// geometric operators (warping, correlation) outside this module.
    pub(crate) fn emit(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "{op}: produced non-finite value from finite inputs"
        );
        let _ = op;
        match backward {
            Some(bw) => {
                let id = self.alloc(shape.clone(), false);
                self.steps.push(Step { out: id, backward: bw });
                Tensor { shape, data: Arc::new(data), node: Some(id), requires_grad: false }
            }
            None => Tensor::from_vec(shape, data),
        }
    }

    /// Run reverse-mode accumulation from a scalar loss. Consumes the tape.
    ///
    /// Returns gradients for every leaf registered with [`Tape::leaf`];
    /// intermediate gradients are freed as soon as their producers have
    /// consumed them. Fan-out accumulates by summation.
    pub fn backward(mut self, loss: &Tensor) -> Result<GradStore> {
        let node = loss
            .node
            .ok_or_else(|| Error::Graph("loss is not connected to this tape".into()))?;
        if loss.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                loss.shape
            )));
        }
        if node >= self.shapes.len() {
            return Err(Error::Graph("loss node is not on this tape".into()));
        }
        let mut store = GradStore {
            grads: vec![None; self.shapes.len()],
            shapes: std::mem::take(&mut self.shapes),
            is_leaf: std::mem::take(&mut self.is_leaf),
        };
        store.grads[node] = Some(vec![1.0]);
        for step in self.steps.drain(..).rev() {
            if let Some(g) = store.grads[step.out].take() {
                (step.backward)(&g, &mut store);
                // Leaves are op outputs only when an op aliased one (never in
                // practice); intermediates are dropped after use.
                if store.is_leaf[step.out] {
                    store.grads[step.out] = Some(g);
                }
            }
        }
        Ok(store)
    }
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    is_leaf: Vec<bool>,
}

impl GradStore {
    /// Accumulate a contribution into a node's gradient slot.
    pub(crate) fn accum(&mut self, node: NodeId, contrib: &[f64]) {
        let numel: usize = self.shapes[node].iter().product();
        debug_assert_eq!(numel, contrib.len(), "gradient length mismatch for node {node}");
        match &mut self.grads[node] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    /// Hand over a freshly allocated contribution without copying.
    pub(crate) fn give(&mut self, node: NodeId, contrib: Vec<f64>) {
        match &mut self.grads[node] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.node.and_then(|n| self.grads[n].as_deref())
    }

    /// Gradient of a leaf as a tensor of the leaf's shape (zeros if the leaf
    /// never received a contribution, i.e. the graph does not reach it).
    pub fn grad_of(&self, t: &Tensor) -> Tensor {
        match self.get(t) {
            Some(g) => Tensor::from_vec(t.shape.to_vec(), g.to_vec()),
            None => Tensor::zeros(t.shape()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_keeps_data_and_enables_grad() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let xl = tape.leaf(&x);
        assert_eq!(xl.data(), x.data());
        assert!(xl.requires_grad());
        assert!(xl.node().is_some());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        let y = tape.add(&x, &x).unwrap();
        match tape.backward(&y) {
            Err(Error::Graph(_)) => {}
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("non-scalar loss accepted"),
        }
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let tape = Tape::new();
        let loss = Tensor::scalar(1.0);
        match tape.backward(&loss) {
            Err(Error::Graph(_)) => {}
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("detached loss accepted"),
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]));
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn product_rule_on_elementwise_mul() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]));
        let y = tape.leaf(&Tensor::from_vec(vec![3], vec![4.0, 5.0, 6.0]));
        let p = tape.mul(&x, &y).unwrap();
        let loss = tape.sum_all(&p).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.get(&y).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn fanout_gradients_sum_over_consumers() {
        // z = sum(x*a) + sum(x*b): grad_x = a + b
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        let a = Tensor::from_vec(vec![2], vec![3.0, 4.0]);
        let b = Tensor::from_vec(vec![2], vec![10.0, 20.0]);
        let xa = tape.mul(&x, &a).unwrap();
        let xb = tape.mul(&x, &b).unwrap();
        let s1 = tape.sum_all(&xa).unwrap();
        let s2 = tape.sum_all(&xb).unwrap();
        let loss = tape.add(&s1, &s2).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[13.0, 24.0]);
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        let y = tape.add(&x, &x).unwrap();
        assert!(y.node().is_none());
    }
}
