use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Backward rule: `(inputs, output, grad_output) -> one gradient per input`.
/// `None` marks an input the op does not differentiate.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[Rc<Tensor<T>>], &Tensor<T>, &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Real> {
    name: &'static str,
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    leaf: bool,
}

/// A user-defined differentiable op with a hand-written backward.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &str;

    /// Number of gradients `backward` returns; must equal the input count.
    fn grad_arity(&self) -> usize;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

/// Wengert tape for one forward/backward pass.
///
/// Nodes are appended in execution order, so the recorded list is already
/// topologically sorted; `backward` walks it once in reverse. A tape may be
/// differentiated once; call [`Tape::reset`] before reusing it.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Tensor<T>>>>,
    consumed: Cell<bool>,
    check_finite: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            check_finite: Cell::new(cfg!(debug_assertions)),
        }
    }

    /// Toggle the NaN/Inf check run on every recorded value.
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.leaf_grads.borrow_mut().clear();
        self.consumed.set(false);
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            name: "leaf",
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            leaf: true,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn record(
        &self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>> {
        if self.consumed.get() {
            return Err(Error::Tape(format!("cannot record `{name}` on a differentiated tape")));
        }
        if self.check_finite.get() && !value.all_finite() {
            return Err(Error::Tape(format!("op `{name}` produced a non-finite value")));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        nodes.push(Node {
            name,
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
            leaf: false,
        });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    /// Run a [`CustomOp`] and record it like a built-in op.
    pub fn custom<'t>(
        &'t self,
        op: Rc<dyn CustomOp<T>>,
        inputs: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        if op.grad_arity() != inputs.len() {
            return Err(Error::CustomOp {
                name: op.name().to_string(),
                msg: format!(
                    "backward yields {} gradients for {} inputs",
                    op.grad_arity(),
                    inputs.len()
                ),
            });
        }
        let values: Vec<Rc<Tensor<T>>> = inputs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = op.forward(&refs)?;
        let name = leak_name(op.name());
        self.record(
            name,
            out,
            inputs,
            Box::new(move |ins, out, g| {
                let refs: Vec<&Tensor<T>> = ins.iter().map(|v| v.as_ref()).collect();
                op.backward(&refs, out, g)
            }),
        )
    }

    /// Reverse pass from a scalar `loss`. Populates gradients of every
    /// trainable leaf; intermediate gradients are dropped as soon as they
    /// have been propagated.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::Tape("backward called twice without reset".into()));
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id].value;
        if !out.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(out.shape(), T::one()));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.leaf {
                leaf_grads[id] = Some(g);
                continue;
            }
            let Some(bw) = node.backward.as_ref() else { continue };
            let ins: Vec<Rc<Tensor<T>>> =
                node.inputs.iter().map(|&i| nodes[i].value.clone()).collect();
            let gin = bw(&ins, &node.value, &g)?;
            if gin.len() != node.inputs.len() {
                return Err(Error::CustomOp {
                    name: node.name.to_string(),
                    msg: format!(
                        "backward returned {} gradients for {} inputs",
                        gin.len(),
                        node.inputs.len()
                    ),
                });
            }
            for (&src, gi) in node.inputs.iter().zip(gin) {
                let Some(gi) = gi else { continue };
                if !nodes[src].requires_grad {
                    continue;
                }
                if gi.shape() != nodes[src].value.shape() {
                    return Err(Error::CustomOp {
                        name: node.name.to_string(),
                        msg: format!(
                            "gradient shape {:?} does not match input shape {:?}",
                            gi.shape(),
                            nodes[src].value.shape()
                        ),
                    });
                }
                match &mut grads[src] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        drop(nodes);
        *self.leaf_grads.borrow_mut() = leaf_grads;
        self.consumed.set(true);
        Ok(())
    }

    /// Gradient of a trainable leaf after [`Tape::backward`]. Leaves the loss
    /// does not depend on get a zero gradient.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        if !self.consumed.get() {
            return None;
        }
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        if !(node.leaf && node.requires_grad) {
            return None;
        }
        let g = self.leaf_grads.borrow().get(var.id).cloned().flatten();
        Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
    }
}

// Custom op names live for the whole program; there are only a handful.
fn leak_name(name: &str) -> &'static str {
    use std::collections::HashMap;
    use std::sync::Mutex;
    static NAMES: Mutex<Option<HashMap<String, &'static str>>> = Mutex::new(None);
    let mut guard = NAMES.lock().unwrap();
    let map = guard.get_or_insert_with(HashMap::new);
    if let Some(&s) = map.get(name) {
        return s;
    }
    let s: &'static str = Box::leak(name.to_string().into_boxed_str());
    map.insert(name.to_string(), s);
    s
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }
}
