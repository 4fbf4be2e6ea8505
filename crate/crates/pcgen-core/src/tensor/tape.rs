//! The computation tape: a Wengert list of executed ops.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::{check_all_finite, NodeRef, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Backward rule for one recorded op. Receives the output gradient and a
/// per-input mask of which gradients are actually needed; returns one
/// contribution per logical input (None where not wanted or not defined).
pub(crate) type BackFn = Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    /// Tape indices of the tracked inputs, aligned with `input_slots`.
    input_ids: Vec<usize>,
    /// Positions of the tracked inputs in the op's logical input list.
    input_slots: Vec<usize>,
    /// Number of logical inputs the backward fn expects.
    arity: usize,
    numel: usize,
    backward: Option<BackFn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeStatus {
    Recording,
    /// Backward has run; gradients are available, new ops are rejected.
    Consumed,
}

struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    status: TapeStatus,
}

/// Ordered record of executed ops, sufficient to run reverse-mode
/// backpropagation over everything computed through it.
///
/// One tape per forward/backward pass; tapes are single-threaded (`!Sync`),
/// distinct tapes may live on distinct threads. An inference tape
/// ([`Tape::inference`]) never records and never allocates nodes.
pub struct Tape {
    id: u64,
    recording: bool,
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            recording: true,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
                status: TapeStatus::Recording,
            }),
        }
    }

    /// Forward-only tape: ops execute but nothing is recorded.
    pub fn inference() -> Tape {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn status(&self) -> TapeStatus {
        self.inner.borrow().status
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Registers an input tensor. With `requires_grad`, the leaf is recorded
    /// and will receive a gradient from backward.
    pub fn leaf(&self, shape: &[usize], data: Vec<f32>, requires_grad: bool) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        if requires_grad && self.recording {
            Ok(self.record_leaf(t)?)
        } else {
            Ok(t)
        }
    }

    /// Attaches an existing constant tensor as a differentiable leaf.
    pub fn watch(&self, t: &Tensor) -> Result<Tensor> {
        if t.node.is_some() {
            return Err(Error::tape("watch: tensor is already recorded on a tape"));
        }
        if !self.recording {
            return Ok(t.clone());
        }
        self.record_leaf(t.clone())
    }

    fn record_leaf(&self, t: Tensor) -> Result<Tensor> {
        let mut inner = self.inner.borrow_mut();
        if inner.status != TapeStatus::Recording {
            return Err(Error::tape("cannot record on a consumed tape"));
        }
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            input_ids: Vec::new(),
            input_slots: Vec::new(),
            arity: 0,
            numel: t.numel(),
            backward: None,
        });
        Ok(Tensor::with_node(
            t.shape().to_vec(),
            t.data_arc(),
            Some(NodeRef {
                tape_id: self.id,
                index,
            }),
        ))
    }

    /// Checks that a tensor either is constant or belongs to this tape.
    pub(crate) fn check_input(&self, op: &'static str, t: &Tensor) -> Result<()> {
        match t.node {
            Some(n) if n.tape_id != self.id => Err(Error::tape(alloc::format!(
                "{op}: input tensor belongs to tape {} (stale), this is tape {}",
                n.tape_id,
                self.id
            ))),
            _ => Ok(()),
        }
    }

    /// Core recording primitive shared by all ops (and open to custom ops,
    /// e.g. the differentiable renderer).
    ///
    /// `inputs` is the op's full logical input list; only inputs already on
    /// this tape are tracked. `backward` maps (output grad, want-mask) to one
    /// gradient contribution per logical input, each the same length as that
    /// input's data. The output is finiteness-checked here.
    pub fn push_op(
        &self,
        op: &'static str,
        inputs: &[&Tensor],
        out_shape: Vec<usize>,
        out_data: Vec<f32>,
        backward: BackFn,
    ) -> Result<Tensor> {
        for t in inputs {
            self.check_input(op, t)?;
        }
        check_all_finite(op, &out_data)?;
        let numel: usize = out_shape.iter().product();
        debug_assert_eq!(numel, out_data.len(), "{op}: bad output buffer");

        let tracked: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .filter_map(|(slot, t)| t.node.map(|n| (slot, n.index)))
            .collect();

        if !self.recording || tracked.is_empty() {
            return Ok(Tensor::with_node(out_shape, Arc::new(out_data), None));
        }

        let mut inner = self.inner.borrow_mut();
        if inner.status != TapeStatus::Recording {
            return Err(Error::tape(alloc::format!(
                "{op}: cannot record on a consumed tape"
            )));
        }
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            input_ids: tracked.iter().map(|&(_, id)| id).collect(),
            input_slots: tracked.iter().map(|&(slot, _)| slot).collect(),
            arity: inputs.len(),
            numel,
            backward: Some(backward),
        });
        Ok(Tensor::with_node(
            out_shape,
            Arc::new(out_data),
            Some(NodeRef {
                tape_id: self.id,
                index,
            }),
        ))
    }

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// reachable recorded tensor, leaves included. Errors on a non-scalar
    /// loss, a loss from another tape, or a second call without reset.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        let node = match loss.node {
            Some(n) if n.tape_id == self.id => n,
            Some(_) => return Err(Error::tape("backward: loss belongs to another tape")),
            None => {
                return Err(Error::tape(
                    "backward: loss is not recorded on this tape (constant or inference mode)",
                ))
            }
        };
        if loss.numel() != 1 {
            return Err(Error::shape(
                "backward",
                alloc::format!("loss must be scalar, got {} elements", loss.numel()),
            ));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.status == TapeStatus::Consumed {
            return Err(Error::tape(
                "backward: tape already consumed (call backward once per tape)",
            ));
        }
        inner.status = TapeStatus::Consumed;

        let Inner { nodes, grads, .. } = &mut *inner;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[node.index] = Some(alloc::vec![1.0]);

        // Nodes are pushed in execution order, so a reverse index walk visits
        // ops in exact reverse execution order.
        for i in (0..=node.index).rev() {
            if grads[i].is_none() {
                continue;
            }
            let (contribs, ids): (Vec<Option<Vec<f32>>>, Vec<usize>) = {
                let n = &nodes[i];
                let Some(back) = &n.backward else { continue };
                let mut want = alloc::vec![false; n.arity];
                for &slot in &n.input_slots {
                    want[slot] = true;
                }
                let g = grads[i].as_ref().unwrap();
                debug_assert_eq!(g.len(), n.numel);
                let full = back(g, &want);
                debug_assert_eq!(full.len(), n.arity);
                let mut picked = Vec::with_capacity(n.input_slots.len());
                for &slot in &n.input_slots {
                    picked.push(full[slot].clone());
                }
                (picked, n.input_ids.clone())
            };
            for (id, contrib) in ids.into_iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.len(), nodes[id].numel);
                match &mut grads[id] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&c) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Gradient of the last backward's loss w.r.t. a recorded tensor.
    pub fn grad(&self, t: &Tensor) -> Result<Tensor> {
        self.grad_opt(t)?.ok_or_else(|| {
            Error::tape("grad: no gradient reached this tensor (not on the loss path)")
        })
    }

    /// As [`Tape::grad`] but returns None when no gradient reached the tensor.
    pub fn grad_opt(&self, t: &Tensor) -> Result<Option<Tensor>> {
        let node = match t.node {
            Some(n) if n.tape_id == self.id => n,
            Some(_) => return Err(Error::tape("grad: tensor belongs to another tape")),
            None => return Err(Error::tape("grad: tensor is not recorded on this tape")),
        };
        let inner = self.inner.borrow();
        if inner.status != TapeStatus::Consumed {
            return Err(Error::tape("grad: call backward first"));
        }
        Ok(inner.grads[node.index]
            .as_ref()
            .map(|g| Tensor::from_vec(t.shape(), g.clone()).unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_errors() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], alloc::vec![1.0, 2.0], true).unwrap();
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        let err = tape.backward(&loss).unwrap_err();
        assert!(matches!(err, Error::Tape { .. }));
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], alloc::vec![1.0, 2.0], true).unwrap();
        assert!(matches!(tape.backward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn foreign_tensor_is_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.leaf(&[1], alloc::vec![1.0], true).unwrap();
        assert!(t2.sum_all(&x).is_err());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = tape.leaf(&[3], alloc::vec![1.0, 2.0, 3.0], true).unwrap();
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(!x.requires_grad());
        assert!(!y.requires_grad());
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], alloc::vec![1.0, -2.0, 0.5], true).unwrap();
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], alloc::vec![1.0, 2.0], true).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_skips_unreachable_leaves() {
        let tape = Tape::new();
        let x = tape.leaf(&[1], alloc::vec![1.0], true).unwrap();
        let y = tape.leaf(&[1], alloc::vec![5.0], true).unwrap();
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.grad_opt(&y).unwrap().is_none());
        assert!(tape.grad(&y).is_err());
    }
}
