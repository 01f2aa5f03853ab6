//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are copied
//! in from tensors (trainable or constant), operations are methods on the
//! [`Var`] handles, and [`Graph::backward`] walks the tape in reverse once to
//! produce [`Gradients`]. The tape is thrown away after each pass.
//!
//! ```
//! use evofa_core::autograd::Graph;
//! use evofa_core::Tensor;
//!
//! let g = Graph::new();
//! let x = g.param(&Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
//! ```
//!
//! Gradients are only propagated through nodes that depend on a trainable
//! leaf, so frozen sub-networks cost nothing on the backward pass.

mod nn;
mod ops;

use std::cell::RefCell;
use std::fmt;

pub use nn::{BatchNormMode, RunningStats, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, Tensor};

/// Inputs handed to an operation's backward closure.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a [f64],
    pub out: &'a [f64],
    pub inputs: Vec<&'a [f64]>,
    pub needs: Vec<bool>,
}

impl BackwardCtx<'_> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies `t` onto the tape, trainable iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Copies `t` onto the tape as a trainable leaf.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Moves `t` onto the tape as a constant.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, t.into_data(), false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push_leaf(Vec::new(), vec![v], false)
    }

    /// Binds every tensor of a group; `trainable = false` freezes the whole group.
    pub fn bind_group(&self, group: &ParamGroup, trainable: bool) -> Vec<Var<'_>> {
        group
            .tensors()
            .map(|t| {
                if trainable {
                    self.param(t)
                } else {
                    self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
                }
            })
            .collect()
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn record(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        parents: &[usize],
        backward: BackwardFn,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            shape,
            value,
            parents: parents.to_vec(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Runs `f` with borrowed input values; the borrow ends before anything is recorded.
    pub(crate) fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&[f64]]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&[f64]> = ids.iter().map(|&i| nodes[i].value.as_slice()).collect();
        f(&vals)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_owner(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = &node.backward else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let ctx = BackwardCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| nodes[p].value.as_slice()).collect(),
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = bw(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        // Trainable leaves the loss never touched get an explicit zero.
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && node.parents.is_empty() && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(Error::contract("variable belongs to a different graph"))
        }
    }
}

/// Result of one backward sweep, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradients for a slice of bound parameters, erroring if any is missing.
    pub fn collect(&self, vars: &[Var<'_>]) -> Result<Vec<Vec<f64>>> {
        vars.iter()
            .map(|&v| {
                self.get(v).map(<[f64]>::to_vec).ok_or_else(|| {
                    Error::contract(format!("no gradient for node {} (not trainable?)", v.id))
                })
            })
            .collect()
    }

    /// Accumulates into the `grad` buffers of `group`, matched by position with `vars`.
    pub fn write_into(&self, vars: &[Var<'_>], group: &mut ParamGroup) -> Result<()> {
        group.accumulate_grads(&self.collect(vars)?)
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the current value out of the tape.
    pub fn value(&self) -> Tensor {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shape is consistent")
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value[0]
    }

    pub(crate) fn same_graph(&self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::contract("operands live on different graphs"))
        }
    }
}
