use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Handle to a value produced on (or registered with) a [`Tape`].
///
/// `node` is `Some` exactly when gradients can flow to this value.
pub struct Var<S> {
    value: Rc<Tensor<S>>,
    node: Option<NodeId>,
}

impl<S> Clone for Var<S> {
    fn clone(&self) -> Self {
        Self {
            value: Rc::clone(&self.value),
            node: self.node,
        }
    }
}

impl<S: Scalar> Var<S> {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<S>) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub(crate) fn shared(&self) -> Rc<Tensor<S>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Detached copy of the value.
    pub fn to_tensor(&self) -> Tensor<S> {
        (*self.value).clone()
    }
}

type BackwardFn<S> = Box<dyn FnOnce(&[Tensor<S>], &[bool]) -> Result<Vec<Option<Tensor<S>>>>>;

struct Record<S> {
    op: &'static str,
    outputs: Vec<(NodeId, Vec<usize>)>,
    inputs: Vec<Option<NodeId>>,
    backward: BackwardFn<S>,
}

/// How many times each op ran on a tape, keyed by op name.
#[derive(Debug, Default, Clone)]
pub struct OpCounters {
    counts: BTreeMap<&'static str, usize>,
}

impl OpCounters {
    pub fn get(&self, op: &str) -> usize {
        self.counts.get(op).copied().unwrap_or(0)
    }

    fn bump(&mut self, op: &'static str) {
        *self.counts.entry(op).or_default() += 1;
    }
}

/// Ordered record of differentiable ops for one forward/backward pass.
pub struct Tape<S> {
    grad_enabled: bool,
    check_finite: bool,
    next_id: NodeId,
    records: Vec<Record<S>>,
    counters: OpCounters,
    kink_probe: Option<DefaultHasher>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// Recording tape. Non-finite outputs are rejected in debug builds.
    pub fn new() -> Self {
        Self {
            grad_enabled: true,
            check_finite: cfg!(debug_assertions),
            next_id: 0,
            records: Vec::new(),
            counters: OpCounters::default(),
            kink_probe: None,
        }
    }

    /// Evaluation-only tape: ops run but nothing is recorded, so
    /// intermediates are freed as soon as their handles drop.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Registers a value that should receive a gradient.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var<S> {
        let node = self.grad_enabled.then(|| self.fresh_id());
        Var {
            value: Rc::new(value),
            node,
        }
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<S> {
        Var::constant(value)
    }

    /// Hash every leaky-ReLU input sign from now on. Finite-difference checks
    /// compare signatures to detect stencils that straddle a kink.
    pub fn enable_kink_probe(&mut self) {
        self.kink_probe = Some(DefaultHasher::new());
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kink_probe.as_ref().map(Hasher::finish)
    }

    pub(crate) fn probe_signs(&mut self, values: &[S]) {
        if let Some(h) = self.kink_probe.as_mut() {
            for chunk in values.chunks(64) {
                let mut bits = 0u64;
                for (i, v) in chunk.iter().enumerate() {
                    if *v >= S::zero() {
                        bits |= 1 << i;
                    }
                }
                h.write_u64(bits);
            }
        }
    }

    fn fresh_id(&mut self) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn check(&self, op: &'static str, t: &Tensor<S>) -> Result<()> {
        if self.check_finite && !t.all_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// Records a single-output op. `backward` receives the output gradient
    /// and a per-input flag saying which input gradients are wanted.
    pub(crate) fn record<F>(
        &mut self,
        op: &'static str,
        inputs: &[&Var<S>],
        output: Tensor<S>,
        backward: F,
    ) -> Result<Var<S>>
    where
        F: FnOnce(&Tensor<S>, &[bool]) -> Result<Vec<Option<Tensor<S>>>> + 'static,
    {
        let mut outs = self.record_multi(op, inputs, vec![output], move |g, needs| {
            backward(&g[0], needs)
        })?;
        Ok(outs.remove(0))
    }

    pub(crate) fn record_multi<F>(
        &mut self,
        op: &'static str,
        inputs: &[&Var<S>],
        outputs: Vec<Tensor<S>>,
        backward: F,
    ) -> Result<Vec<Var<S>>>
    where
        F: FnOnce(&[Tensor<S>], &[bool]) -> Result<Vec<Option<Tensor<S>>>> + 'static,
    {
        self.counters.bump(op);
        for o in &outputs {
            self.check(op, o)?;
        }
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.node.is_some());
        if !tracked {
            return Ok(outputs.into_iter().map(Var::constant).collect());
        }
        let mut out_meta = Vec::with_capacity(outputs.len());
        let mut vars = Vec::with_capacity(outputs.len());
        for o in outputs {
            let id = self.fresh_id();
            out_meta.push((id, o.shape().to_vec()));
            vars.push(Var {
                value: Rc::new(o),
                node: Some(id),
            });
        }
        self.records.push(Record {
            op,
            outputs: out_meta,
            inputs: inputs.iter().map(|v| v.node).collect(),
            backward: Box::new(backward),
        });
        Ok(vars)
    }

    /// Reverse sweep from a one-element `loss`. Consumes the tape; the
    /// returned [`Gradients`] hold `d loss / d leaf` for every reachable leaf.
    pub fn backward(self, loss: &Var<S>) -> Result<Gradients<S>> {
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss.node.ok_or_else(|| {
            Error::Contract("loss was not computed from any tracked tensor".into())
        })?;
        let mut grads: HashMap<NodeId, Tensor<S>> = HashMap::new();
        grads.insert(root, Tensor::ones(loss.shape()));

        for rec in self.records.into_iter().rev() {
            if !rec.outputs.iter().any(|(id, _)| grads.contains_key(id)) {
                continue;
            }
            let out_grads: Vec<Tensor<S>> = rec
                .outputs
                .iter()
                .map(|(id, shape)| grads.remove(id).unwrap_or_else(|| Tensor::zeros(shape)))
                .collect();
            let needs: Vec<bool> = rec.inputs.iter().map(Option::is_some).collect();
            let in_grads = (rec.backward)(&out_grads, &needs)?;
            if in_grads.len() != rec.inputs.len() {
                return Err(Error::Contract(format!(
                    "{} backward returned {} gradients for {} inputs",
                    rec.op,
                    in_grads.len(),
                    rec.inputs.len()
                )));
            }
            for (id, g) in rec.inputs.iter().zip(in_grads) {
                let (Some(id), Some(g)) = (id, g) else { continue };
                accumulate(&mut grads, *id, g, rec.op)?;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(
    grads: &mut HashMap<NodeId, Tensor<S>>,
    id: NodeId,
    g: Tensor<S>,
    op: &'static str,
) -> Result<()> {
    match grads.get_mut(&id) {
        Some(acc) => {
            acc.expect_same_shape(&g, op)?;
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => {
            grads.insert(id, g);
        }
    }
    Ok(())
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: HashMap<NodeId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, var: &Var<S>) -> Option<&Tensor<S>> {
        var.node.and_then(|id| self.grads.get(&id))
    }

    pub fn take(&mut self, var: &Var<S>) -> Option<Tensor<S>> {
        var.node.and_then(|id| self.grads.remove(&id))
    }

    /// Gradient of a leaf, zero-filled when the loss does not reach it.
    pub fn get_or_zeros(&self, var: &Var<S>) -> Tensor<S> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
