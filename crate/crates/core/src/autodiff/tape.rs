use std::sync::atomic::{AtomicU32, Ordering};
use std::cell::RefCell;

use super::{AdError, NdArray};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

// Test-only hook: scales the gradient produced by the named op.
thread_local! {
    static GRADIENT_FAULT: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Corrupts the backward rule of `op` (by recorded op name) for negative-control tests.
/// Applies to backward passes run on the calling thread.
#[doc(hidden)]
pub fn set_gradient_fault(op: Option<&str>) {
    GRADIENT_FAULT.with(|f| *f.borrow_mut() = op.map(str::to_owned));
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Arguments handed to a backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [&'a NdArray],
    pub output: &'a NdArray,
    pub grad: &'a NdArray,
}

/// Maps the output gradient to one optional gradient per input (same order as the inputs).
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<NdArray>> + Send + Sync>;

struct Node {
    op: &'static str,
    value: NdArray,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Step-scoped record of executed operations.
///
/// A tape is created per forward pass, replayed once (or more, with identical
/// results) by [`Tape::backward`], and dropped.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: NdArray) -> Result<Var, AdError> {
        self.leaf("param", value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: NdArray) -> Result<Var, AdError> {
        self.leaf("constant", value, false)
    }

    fn leaf(&mut self, op: &'static str, value: NdArray, needs_grad: bool) -> Result<Var, AdError> {
        if let Some(index) = value.first_non_finite() {
            return Err(AdError::NonFinite { op, index });
        }
        Ok(self.push(Node { op, value, parents: Vec::new(), backward: None, needs_grad }))
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var { tape: self.id, idx: (self.nodes.len() - 1) as u32 }
    }

    fn check(&self, v: Var) -> Result<usize, AdError> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(AdError::UnknownVar);
        }
        Ok(v.index())
    }

    /// Value of a recorded variable.
    ///
    /// Panics if `v` belongs to another tape; use [`Tape::try_value`] to handle that case.
    pub fn value(&self, v: Var) -> &NdArray {
        self.try_value(v).expect("variable not recorded on this tape")
    }

    pub fn try_value(&self, v: Var) -> Result<&NdArray, AdError> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    /// Records an operation with a hand-written backward rule.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: NdArray,
        backward: BackwardFn,
    ) -> Result<Var, AdError> {
        let mut parents = Vec::with_capacity(inputs.len());
        for &v in inputs {
            parents.push(self.check(v)?);
        }
        if let Some(index) = value.first_non_finite() {
            return Err(AdError::NonFinite { op, index });
        }
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        Ok(self.push(Node {
            op,
            value,
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
        }))
    }

    /// Reverse-mode sweep from a scalar output.
    ///
    /// Does not mutate the tape: calling it twice yields identical gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients, AdError> {
        let out = self.check(output)?;
        if self.nodes[out].value.len() != 1 {
            return Err(AdError::NonScalar(self.nodes[out].value.shape().to_vec()));
        }
        let fault = GRADIENT_FAULT.with(|f| f.borrow().clone());
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(NdArray::ones(self.nodes[out].value.shape()));
        for i in (0..=out).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&NdArray> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let ctx = BackwardCtx { inputs: &inputs, output: &node.value, grad: &g };
            let mut input_grads = rule(&ctx);
            if fault.as_deref() == Some(node.op) {
                for ig in input_grads.iter_mut().flatten() {
                    for x in ig.data_mut() {
                        *x *= 1.5;
                    }
                }
            }
            grads[i] = Some(g);
            for (&p, ig) in node.parents.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[p].value.shape(), "gradient shape of {}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }
}

/// Gradients of a scalar with respect to every recorded variable.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    /// Gradient of `v`; exactly zero when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Result<NdArray, AdError> {
        if v.tape != self.tape || v.index() >= self.grads.len() {
            return Err(AdError::UnknownVar);
        }
        Ok(match &self.grads[v.index()] {
            Some(g) => g.clone(),
            None => NdArray::zeros(&self.shapes[v.index()]),
        })
    }

    /// Moves the gradient out, leaving zero behind.
    pub fn take(&mut self, v: Var) -> Result<NdArray, AdError> {
        if v.tape != self.tape || v.index() >= self.grads.len() {
            return Err(AdError::UnknownVar);
        }
        Ok(self.grads[v.index()].take().unwrap_or_else(|| NdArray::zeros(&self.shapes[v.index()])))
    }
}
