//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! A [`Graph`] records every executed operation in order. Each record keeps
//! its output value, the ids of its inputs and a backward rule mapping the
//! output gradient to input gradients. [`Graph::backward`] replays the rules
//! in reverse execution order, visiting each reachable operation once.
//!
//! The tape is meant to be built for one forward pass and dropped after the
//! gradients have been harvested.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// What a backward rule sees.
pub struct BackwardArgs<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad_output: &'a [T],
    /// Whether each input needs a gradient; rules may skip the others.
    pub needs_grad: &'a [bool],
}

/// Maps the output gradient to one flat gradient per input (`None` = no contribution).
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Vec<T>>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<String>,
    leaf_grad: Option<Vec<T>>,
}

/// Ordered record of executed operations.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    trace: RefCell<Vec<usize>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            trace: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.push_leaf(t, requires_grad, None)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false, None)
    }

    /// Records a copy of a named parameter, bound back to `name` for gradient harvesting.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
        let mut value = Tensor::new(t.shape(), t.data().to_vec())?;
        value.set_requires_grad(true);
        Ok(self.push_leaf(value, true, Some(name.to_string())))
    }

    fn push_leaf(&self, mut t: Tensor<T>, requires_grad: bool, param: Option<String>) -> Var {
        t.zero_grad();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value: t,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param,
            leaf_grad: None,
        });
        Var(nodes.len() - 1)
    }

    /// Records the result of an operation together with its backward rule.
    ///
    /// Fails if the output holds a non-finite value.
    pub fn record(
        &self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !output.all_finite() {
            return Err(Error::NonFinite(format!(
                "output of `{op}` (node {})",
                self.len()
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        for v in inputs {
            if v.0 >= nodes.len() {
                return Err(Error::Usage(format!("variable {} is not on this graph", v.0)));
            }
        }
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            op,
            value: output,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
            leaf_grad: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Borrows the value of `v`.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op
    }

    /// Runs `f` over borrowed input values.
    pub(crate) fn with_values<R>(&self, vars: &[Var], f: impl FnOnce(&[&Tensor<T>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor<T>> = vars.iter().map(|v| &nodes[v.0].value).collect();
        f(&vals)
    }

    /// Accumulates `d loss / d leaf` into every differentiable leaf reachable from `loss`.
    ///
    /// Calling it again (on the same or another root) adds to the stored gradients.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage(format!("variable {} is not on this graph", loss.0)))?;
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut trace = self.trace.borrow_mut();
        trace.clear();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_updates = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            trace.push(i);
            let Some(rule) = &node.backward else {
                leaf_updates.push((i, g));
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| nodes[j].requires_grad).collect();
            let input_grads = rule(&BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad_output: &g,
                needs_grad: &needs,
            })?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Usage(format!(
                    "backward rule of `{}` returned {} gradients for {} inputs",
                    node.op,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for ((&j, gi), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(gi), true) = (gi, *need) else { continue };
                if gi.len() != nodes[j].value.numel() {
                    return Err(Error::dim(format!(
                        "backward rule of `{}` produced a gradient of length {} for an input of shape {:?}",
                        node.op,
                        gi.len(),
                        nodes[j].value.shape()
                    )));
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }
        for (i, g) in leaf_updates {
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                let node = &nodes[i];
                return Err(Error::NonFinite(format!(
                    "gradient of {} at element {bad}",
                    node.param.as_deref().unwrap_or("leaf")
                )));
            }
            match &mut nodes[i].leaf_grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Node ids visited by the last [`Graph::backward`] call, in visiting order.
    pub fn last_backward_trace(&self) -> Vec<usize> {
        self.trace.borrow().clone()
    }

    /// Accumulated gradient of a leaf, shaped like its value.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        node.leaf_grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Gradients of all parameter-bound leaves, summed per parameter name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        let nodes = self.nodes.borrow();
        let mut out: BTreeMap<String, Vec<T>> = BTreeMap::new();
        for node in nodes.iter() {
            let (Some(name), Some(g)) = (&node.param, &node.leaf_grad) else {
                continue;
            };
            match out.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}
