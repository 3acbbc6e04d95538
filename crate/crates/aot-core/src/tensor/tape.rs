//! Recording tape for reverse-mode differentiation.
//!
//! One tape may record per thread per element type. Nodes are created in
//! forward execution order; [`Tape::backward`] walks them in exact reverse
//! creation order, so gradient accumulation is deterministic.
//!
//! Tensors from a finished or foreign tape are treated as constants by
//! subsequent operations: only handles minted by the currently active tape
//! participate in recording.

use std::cell::RefCell;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread::LocalKey;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle tying a tensor to a node of a specific tape generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

/// Reverse function of one node: receives the adjoint of the node output and
/// emits per-parent contributions through the sink.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut dyn FnMut(usize, Tensor<T>))>;

/// Coerce a closure to [`BackwardFn`]; the turbofish pins the element type
/// where the closure body alone would not.
pub(crate) fn bw<T: Scalar>(
    f: impl Fn(&Tensor<T>, &mut dyn FnMut(usize, Tensor<T>)) + 'static,
) -> BackwardFn<T> {
    Box::new(f)
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    /// None marks a leaf (watched input or parameter).
    backward: Option<BackwardFn<T>>,
}

#[doc(hidden)]
pub struct TapeInner<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
}

thread_local! {
    #[doc(hidden)]
    pub static TAPE_SLOT_F32: RefCell<Option<TapeInner<f32>>> = const { RefCell::new(None) };
    #[doc(hidden)]
    pub static TAPE_SLOT_F64: RefCell<Option<TapeInner<f64>>> = const { RefCell::new(None) };
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn slot<T: Scalar>() -> &'static LocalKey<RefCell<Option<TapeInner<T>>>> {
    T::tape_cell()
}

/// Record a node on the active tape, if any.
///
/// `parents` are the operand handles in argument order; handles from other
/// tape generations are dropped (those operands act as constants). Returns
/// `None` when nothing needs recording, in which case the caller produces an
/// untracked result. `build` receives the resolved parent slots (index into
/// the tape, `None` for untracked operands) and returns the node's reverse
/// function.
pub(crate) fn record<T: Scalar>(
    parents: &[Option<NodeRef>],
    out_shape: &[usize],
    build: impl FnOnce(Vec<Option<usize>>) -> BackwardFn<T>,
) -> Option<NodeRef> {
    slot::<T>().with(|cell| {
        let mut guard = cell.borrow_mut();
        let tape = guard.as_mut()?;
        let resolved: Vec<Option<usize>> = parents
            .iter()
            .map(|p| p.and_then(|r| (r.tape == tape.id).then_some(r.index)))
            .collect();
        if resolved.iter().all(Option::is_none) {
            return None;
        }
        let backward = build(resolved);
        let index = tape.nodes.len();
        tape.nodes.push(Node {
            shape: out_shape.to_vec(),
            backward: Some(backward),
        });
        Some(NodeRef {
            tape: tape.id,
            index,
        })
    })
}

/// Gradient map produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    tape: u64,
    adjoints: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of a tensor recorded on the tape this map came from. Leaves
    /// always have an entry after backward; interior nodes only if gradient
    /// reached them.
    pub fn wrt(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.adjoints.get(node.index).and_then(|g| g.as_ref())
    }
}

/// RAII guard over the thread's recording slot.
pub struct Tape<T: Scalar> {
    id: u64,
    _not_send: PhantomData<*const T>,
}

impl<T: Scalar> Tape<T> {
    /// Begin recording on this thread. Fails if a tape of this element type
    /// is already active (recordings do not nest).
    pub fn new() -> Result<Tape<T>> {
        slot::<T>().with(|cell| {
            let mut guard = cell.borrow_mut();
            if guard.is_some() {
                return Err(Error::Tape(
                    "a tape is already recording on this thread".into(),
                ));
            }
            let id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
            *guard = Some(TapeInner {
                id,
                nodes: Vec::new(),
            });
            Ok(Tape {
                id,
                _not_send: PhantomData,
            })
        })
    }

    /// Register a differentiable leaf. The returned tensor shares the input's
    /// value and is addressable in the gradient map.
    pub fn watch(&self, t: &Tensor<T>) -> Tensor<T> {
        let index = slot::<T>().with(|cell| {
            let mut guard = cell.borrow_mut();
            let tape = guard
                .as_mut()
                .expect("Tape guard alive but recording slot empty");
            assert_eq!(tape.id, self.id, "Tape guard does not match active tape");
            let index = tape.nodes.len();
            tape.nodes.push(Node {
                shape: t.shape().to_vec(),
                backward: None,
            });
            index
        });
        Tensor::with_node(
            t.shape().to_vec(),
            t.data().to_vec(),
            Some(NodeRef {
                tape: self.id,
                index,
            }),
        )
    }

    /// Stop recording and propagate adjoints from `loss` back to every node.
    ///
    /// `loss` must be a single-element tensor recorded on this tape. Every
    /// leaf receives an adjoint (zeros if no gradient path reaches it), and
    /// d(loss)/d(loss) = 1.
    pub fn backward(self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let loss_node = loss
            .node()
            .ok_or_else(|| Error::Tape("backward: loss is not on any tape".into()))?;
        if loss_node.tape != self.id {
            return Err(Error::Tape(
                "backward: loss was recorded on a different tape".into(),
            ));
        }

        let inner = slot::<T>().with(|cell| cell.borrow_mut().take());
        // The slot is cleared; Drop must not clear a tape someone starts later.
        std::mem::forget(self);
        let inner = inner.ok_or_else(|| Error::Tape("backward: no active recording".into()))?;

        let mut adjoints: Vec<Option<Tensor<T>>> = (0..inner.nodes.len()).map(|_| None).collect();
        adjoints[loss_node.index] = Some(Tensor::with_node(
            inner.nodes[loss_node.index].shape.clone(),
            vec![T::ONE],
            None,
        ));

        for index in (0..inner.nodes.len()).rev() {
            let Some(adj) = adjoints[index].take() else {
                continue;
            };
            let node = &inner.nodes[index];
            if let Some(backward) = &node.backward {
                let mut sink = |parent: usize, contrib: Tensor<T>| {
                    debug_assert!(parent < index, "backward emitted to a later node");
                    debug_assert_eq!(
                        contrib.shape(),
                        inner.nodes[parent].shape.as_slice(),
                        "adjoint contribution shape mismatch"
                    );
                    match &mut adjoints[parent] {
                        Some(existing) => {
                            let mut data = existing.data().to_vec();
                            for (d, c) in data.iter_mut().zip(contrib.data()) {
                                *d += *c;
                            }
                            *existing =
                                Tensor::with_node(existing.shape().to_vec(), data, None);
                        }
                        spot @ None => *spot = Some(contrib),
                    }
                };
                backward(&adj, &mut sink);
            }
            adjoints[index] = Some(adj);
        }

        // Ensure every leaf has a populated adjoint and all results are finite.
        for (index, node) in inner.nodes.iter().enumerate() {
            if node.backward.is_none() && adjoints[index].is_none() {
                adjoints[index] = Some(Tensor::zeros(&node.shape));
            }
            if let Some(adj) = &adjoints[index] {
                for &v in adj.data() {
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!(
                            "backward produced non-finite adjoint {v:?} at node {index}"
                        )));
                    }
                }
            }
        }

        // Stamp node refs on the adjoints map so `wrt` can address them.
        Ok(Gradients {
            tape: inner.id,
            adjoints,
        })
    }

    /// Abandon the recording without computing gradients.
    pub fn discard(self) {
        drop(self);
    }
}

impl<T: Scalar> Drop for Tape<T> {
    fn drop(&mut self) {
        slot::<T>().with(|cell| {
            let mut guard = cell.borrow_mut();
            if guard.as_ref().map(|t| t.id) == Some(self.id) {
                *guard = None;
            }
        });
    }
}
