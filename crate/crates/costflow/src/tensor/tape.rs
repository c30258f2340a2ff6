//! Wengert-list tape. Every differentiable op pushes one entry holding a
//! closure that maps the node's output gradient to contributions on its
//! parents. [`backward`] walks entries in reverse creation order, which is a
//! valid topological order by construction, and is consumable exactly once.

use std::cell::RefCell;
use std::rc::Rc;

use super::{DType, Result, Tensor, TensorError};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradTable)>;

struct TapeInner {
    entries: Vec<Option<BackwardFn>>,
    consumed: bool,
}

/// Recording context for one forward pass. Cloning shares the tape.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                entries: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf (no backward fn) and returns the taped tensor.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push(None);
        t.detach().with_node(NodeRef {
            tape: self.clone(),
            id,
        })
    }

    pub(crate) fn push(&self, f: Option<BackwardFn>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.entries.push(f);
        inner.entries.len() - 1
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

/// Per-node gradient buffers, allocated lazily.
pub struct GradTable {
    slots: Vec<Option<Vec<f64>>>,
    dtype: DType,
}

impl GradTable {
    fn new(n: usize, dtype: DType) -> GradTable {
        GradTable {
            slots: (0..n).map(|_| None).collect(),
            dtype,
        }
    }

    /// Runs `add` against the gradient buffer of `id` (zero-initialized to
    /// `numel` on first touch), then quantizes the buffer in f32 mode.
    pub fn accumulate(&mut self, id: usize, numel: usize, add: impl FnOnce(&mut [f64])) {
        let slot = &mut self.slots[id];
        let buf = slot.get_or_insert_with(|| vec![0.0; numel]);
        debug_assert_eq!(buf.len(), numel, "gradient buffer size mismatch");
        add(buf);
        self.dtype.quantize_slice(buf);
    }

    fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.slots[id].take()
    }

    fn put(&mut self, id: usize, g: Vec<f64>) {
        self.slots[id] = Some(g);
    }
}

/// Gradients of one backward pass, queryable by taped tensor.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, if `t` was on the tape and reached.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node()?;
        self.slots.get(node.id)?.as_deref()
    }
}

/// Reverse pass from a scalar loss. Consumes the tape: a second call on the
/// same tape reports [`TensorError::TapeConsumed`].
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    let node = loss.node().ok_or(TensorError::BackwardRoot)?;
    if loss.numel() != 1 {
        return Err(TensorError::BackwardRoot);
    }
    let tape = node.tape.clone();
    {
        let mut inner = tape.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        inner.consumed = true;
    }
    let inner = tape.inner.borrow();
    let mut table = GradTable::new(inner.entries.len(), loss.dtype());
    table.accumulate(node.id, 1, |g| g[0] = 1.0);
    for id in (0..=node.id).rev() {
        let Some(g) = table.take(id) else { continue };
        if let Some(f) = &inner.entries[id] {
            f(&g, &mut table);
        }
        table.put(id, g);
    }
    Ok(Gradients { slots: table.slots })
}
