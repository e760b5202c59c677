use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{BufferUpdate, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-3;

/// Batch normalization over every axis but the last. Training passes use
/// batch statistics and queue running-statistic updates on the context;
/// evaluation passes use the running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            scale: store.add(format!("{name}.scale"), Tensor::full(vec![channels], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(
                format!("{name}.running_mean"),
                Tensor::zeros(vec![channels]),
            ),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(vec![channels], 1.0),
            ),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let c = *shape.last().expect("rank >= 1");
        let rows = x.reshape(&[shape.iter().product::<usize>() / c, c])?;
        let normalized = if cx.training {
            let mean = rows.mean_axis(0)?;
            let centered = rows.sub(mean)?;
            let var = centered.mul(centered)?.mean_axis(0)?;
            for (id, stat) in [(self.running_mean, mean), (self.running_var, var)] {
                cx.push_buffer_update(BufferUpdate {
                    id,
                    observed: stat.data(),
                    momentum: BN_MOMENTUM,
                });
            }
            centered.div(var.add_scalar(BN_EPSILON).pow_const(0.5)?)?
        } else {
            let std = cx
                .var(self.running_var)
                .add_scalar(BN_EPSILON)
                .pow_const(0.5)?;
            rows.sub(cx.var(self.running_mean))?.div(std)?
        };
        normalized
            .mul(cx.var(self.scale))?
            .add(cx.var(self.shift))?
            .reshape(&shape)
    }
}
