use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{glorot_uniform, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fully connected layer on the last axis: `(…, in) → (…, out)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(rng, vec![inputs, outputs], inputs, outputs),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs]));
        Dense { weight, bias }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(cx.var(self.weight))?.add(cx.var(self.bias))
    }
}
