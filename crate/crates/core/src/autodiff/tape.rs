use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Identifies a recorded node on a specific tape, so a tensor tracked on one
/// tape cannot be silently consumed by ops on another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub idx: usize,
}

/// Vector-Jacobian product: upstream gradient of the node's output, flattened,
/// mapped to one gradient contribution per recorded input (None for inputs
/// that do not need gradients).
type Vjp = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    /// Tracked inputs by node index; None marks an untracked operand whose
    /// gradient is dropped.
    inputs: Vec<Option<usize>>,
    /// None for leaves.
    vjp: Option<Vjp>,
}

/// Record of one forward pass in topological order. Single-writer: one
/// forward/backward at a time; independent tapes are fully independent.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor as a differentiable leaf of this tape.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let idx = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                shape: t.shape().to_vec(),
                inputs: Vec::new(),
                vjp: None,
            });
            nodes.len() - 1
        };
        Tensor::from_arc(
            t.shape().to_vec(),
            Arc::clone(t.data_arc()),
            Some(NodeRef { tape: self.id, idx }),
        )
    }

    /// Resolves a tensor's node index on this tape; errors if it belongs to
    /// a different tape.
    pub(crate) fn input_of(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(r) if r.tape == self.id => Ok(Some(r.idx)),
            Some(_) => Err(Error::argument("tensor is tracked on a different tape")),
        }
    }

    /// Records an op whose output `values` depend on `inputs`. Rejects
    /// non-finite outputs: anything recorded for training must stay finite.
    pub(crate) fn record(
        &self,
        op: &'static str,
        shape: Vec<usize>,
        inputs: Vec<Option<usize>>,
        vjp: Vjp,
        values: Arc<Vec<f64>>,
    ) -> Result<Tensor> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: op.to_string(),
            });
        }
        let idx = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                shape: shape.clone(),
                inputs,
                vjp: Some(vjp),
            });
            nodes.len() - 1
        };
        Ok(Tensor::from_arc(
            shape,
            values,
            Some(NodeRef { tape: self.id, idx }),
        ))
    }

    /// Reverse pass from a scalar loss. Visits each node at most once, in
    /// reverse topological order; multiple uses of a node sum their upstream
    /// gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let root = self
            .input_of(loss)?
            .ok_or_else(|| Error::argument("backward: loss is not tracked on this tape"))?;
        if loss.len() != 1 {
            return Err(Error::argument(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        bufs[root] = Some(vec![1.0]);
        for idx in (0..=root).rev() {
            let Some(g) = bufs[idx].take() else { continue };
            let node = &nodes[idx];
            if let Some(vjp) = &node.vjp {
                let contribs = vjp(&g);
                debug_assert_eq!(contribs.len(), node.inputs.len());
                for (src, contrib) in node.inputs.iter().zip(contribs) {
                    if let (Some(src), Some(c)) = (src, contrib) {
                        accumulate(&mut bufs[*src], c);
                    }
                }
            }
            bufs[idx] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients {
            tape: self.id,
            shapes,
            bufs,
        })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        None => *slot = Some(contrib),
        Some(buf) => {
            debug_assert_eq!(buf.len(), contrib.len());
            for (b, c) in buf.iter_mut().zip(&contrib) {
                *b += c;
            }
        }
    }
}

/// Result of a backward pass: one gradient per reached node.
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a tracked tensor, or None if the loss never reached it.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let r = t.node()?;
        if r.tape != self.tape {
            return None;
        }
        let buf = self.bufs.get(r.idx)?.as_ref()?;
        Some(Tensor::from_arc(
            self.shapes[r.idx].clone(),
            Arc::new(buf.clone()),
            None,
        ))
    }

    /// Gradient for a tracked tensor; zeros if unreached. Errors on tensors
    /// that were never tracked here.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let r = t
            .node()
            .filter(|r| r.tape == self.tape)
            .ok_or_else(|| Error::argument("gradient requested for a tensor not on this tape"))?;
        Ok(match &self.bufs[r.idx] {
            Some(buf) => Tensor::from_arc(self.shapes[r.idx].clone(), Arc::new(buf.clone()), None),
            None => Tensor::zeros(&self.shapes[r.idx]),
        })
    }
}
