//! Named parameter storage and the per-pass binding context.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers (running statistics) are stored and checkpointed but never
    /// optimized or counted.
    pub trainable: bool,
    /// Projection applied after every optimizer step.
    pub lower_bound: Option<f64>,
}

/// Insertion-ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.insert(name.into(), tensor, true, None)
    }

    pub fn add_bounded(&mut self, name: impl Into<String>, tensor: Tensor, min: f64) -> ParamId {
        self.insert(name.into(), tensor, true, Some(min))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.insert(name.into(), tensor, false, None)
    }

    fn insert(
        &mut self,
        name: String,
        mut tensor: Tensor,
        trainable: bool,
        lower_bound: Option<f64>,
    ) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        tensor.requires_grad = trainable;
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor,
            trainable,
            lower_bound,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Sum of element counts over trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Replaces a tensor's values by name, keeping its shape.
    pub fn assign(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let t = self
            .by_name_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if t.len() != data.len() {
            return Err(Error::Format(format!(
                "parameter `{name}` holds {} values, got {}",
                t.len(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Clamps every bounded parameter to its lower bound.
    pub fn project(&mut self) {
        for p in &mut self.params {
            if let Some(min) = p.lower_bound {
                p.tensor.data_mut().iter_mut().for_each(|v| {
                    if *v < min {
                        *v = min
                    }
                });
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.grad = None);
    }

    /// Records every parameter on `tape`: trainable ones as gradient leaves,
    /// buffers as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, training: bool) -> Ctx<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.param(&p.tensor)
                } else {
                    tape.constant(&p.tensor)
                }
            })
            .collect();
        Ctx {
            tape,
            vars,
            training,
            buffer_updates: RefCell::new(Vec::new()),
            trace: RefCell::new(None),
        }
    }

    /// Adds `scale · dLoss/dParam` into each trainable tensor's grad slot.
    pub fn accumulate_grads(&mut self, ctx: &Ctx<'_>, grads: &Gradients, scale: f64) {
        for (p, v) in self.params.iter_mut().zip(&ctx.vars) {
            if !p.trainable {
                continue;
            }
            let g = grads.data(*v).expect("trainable parameters require grad");
            let slot = p.tensor.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut()
                .zip(g.iter())
                .for_each(|(s, d)| *s += scale * d);
        }
    }

    /// Blends running statistics collected during training passes into
    /// their buffers, in the given order.
    pub fn apply_buffer_updates(&mut self, updates: Vec<BufferUpdate>) {
        for u in updates {
            let m = u.momentum;
            self.params[u.id.0]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&u.observed)
                .for_each(|(r, o)| *r = m * *r + (1.0 - m) * o);
        }
    }
}

/// A batch statistic to fold into a running buffer:
/// `buffer ← momentum·buffer + (1 − momentum)·observed`.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferUpdate {
    pub id: ParamId,
    pub observed: Vec<f64>,
    pub momentum: f64,
}

/// One block's recorded input/output shapes (without the batch axis).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRecord {
    pub block: String,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

/// Parameters bound to a tape for one forward pass.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
    pub training: bool,
    buffer_updates: RefCell<Vec<BufferUpdate>>,
    trace: RefCell<Option<Vec<ShapeRecord>>>,
}

impl<'t> Ctx<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn param_vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn push_buffer_update(&self, update: BufferUpdate) {
        self.buffer_updates.borrow_mut().push(update);
    }

    pub fn take_buffer_updates(&self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    pub fn start_trace(&self) {
        *self.trace.borrow_mut() = Some(Vec::new());
    }

    pub fn take_trace(&self) -> Vec<ShapeRecord> {
        self.trace.borrow_mut().take().unwrap_or_default()
    }

    /// Records a block's shapes when tracing is on.
    pub fn record(&self, block: &str, input: Var<'t>, output: Var<'t>) {
        if let Some(trace) = self.trace.borrow_mut().as_mut() {
            trace.push(ShapeRecord {
                block: block.to_string(),
                input: input.shape()[1..].to_vec(),
                output: output.shape()[1..].to_vec(),
            });
        }
    }
}

/// Glorot-uniform samples for a kernel with the given fan-in/fan-out.
pub fn glorot_uniform(
    rng: &mut impl Rng,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}
