use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument for shape {shape:?}: {msg}")]
    InvalidArgument {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },
    #[error("{op} is undefined at {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },
    #[error("parameter `{0}` has no gradient; call zero_grads/backward first")]
    MissingGrad(String),
    #[error("parameter store: {0}")]
    Store(String),
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True while gradient recording is on for this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with gradient recording off; ops inside produce detached tensors.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = GRAD_ENABLED.with(|g| Restore(g.replace(false)));
    f()
}

type BackwardFn = Box<dyn Fn(&[f64])>;

pub(crate) struct Node {
    id: u64,
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// A shared handle to an immutable value plus its place in the autodiff
/// graph. Cloning is cheap and aliases the same node.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_len(data: &[f64], shape: &[usize]) -> Result<(), TensorError> {
    let numel: usize = shape.iter().product();
    if data.len() != numel {
        return Err(TensorError::DataLength {
            len: data.len(),
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

impl Tensor {
    /// A detached constant.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        check_len(&data, shape)?;
        Ok(Self::construct(data, shape.to_vec(), false, vec![], None))
    }

    /// A leaf that participates in gradient computation.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        check_len(&data, shape)?;
        Ok(Self::construct(data, shape.to_vec(), true, vec![], None))
    }

    pub(crate) fn param_with_grad(
        data: Vec<f64>,
        shape: Vec<usize>,
        grad: Option<Vec<f64>>,
    ) -> Tensor {
        let t = Self::construct(data, shape, true, vec![], None);
        *t.0.grad.borrow_mut() = grad;
        t
    }

    pub fn scalar(x: f64) -> Tensor {
        Self::construct(vec![x], vec![], false, vec![], None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Self::construct(vec![0.0; numel], shape.to_vec(), false, vec![], None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Self::construct(vec![value; numel], shape.to_vec(), false, vec![], None)
    }

    /// Records an op result. Recording is skipped (parents and the closure
    /// are dropped) when gradients are globally off or no parent needs them.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Tensor {
        let record = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if record {
            Self::construct(data, shape, true, parents, Some(backward_fn))
        } else {
            Self::construct(data, shape, false, vec![], None)
        }
    }

    fn construct(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward_fn,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Number of recorded graph parents (0 for leaves and detached results).
    pub fn num_parents(&self) -> usize {
        self.0.parents.len()
    }

    /// The scalar value, for 1-element tensors of any rank.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "item",
                shape: self.shape().to_vec(),
                msg: "expected exactly one element".into(),
            });
        }
        Ok(self.0.data[0])
    }

    /// A copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn set_grad_zero(&self) {
        *self.0.grad.borrow_mut() = Some(vec![0.0; self.numel()]);
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same value, cut out of the graph.
    pub fn detach(&self) -> Tensor {
        Self::construct(self.0.data.clone(), self.0.shape.clone(), false, vec![], None)
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate (`+=`) into
    /// every tensor on the path that requires them; call repeatedly to sum.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: self.shape().to_vec(),
            });
        }
        if !self.0.requires_grad {
            return Ok(()); // constant: nothing depends on parameters
        }

        // Every ancestor has a smaller id than its consumers, so reverse id
        // order is a valid topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                if p.0.requires_grad {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        // Intermediate gradients are scratch state for this sweep; only leaf
        // gradients persist and accumulate across calls.
        for node in &order {
            if node.0.backward_fn.is_some() {
                *node.0.grad.borrow_mut() = None;
            }
        }

        accumulate_grad(self, &[1.0]);
        for node in &order {
            let grad = node.0.grad.borrow().clone();
            if let (Some(f), Some(g)) = (node.0.backward_fn.as_ref(), grad) {
                f(&g);
            }
        }
        Ok(())
    }
}

/// Adds `contrib` into `t`'s gradient buffer, allocating zeros on first use.
pub(crate) fn accumulate_grad(t: &Tensor, contrib: &[f64]) {
    if !t.0.requires_grad {
        return;
    }
    let mut slot = t.0.grad.borrow_mut();
    match slot.as_mut() {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}
