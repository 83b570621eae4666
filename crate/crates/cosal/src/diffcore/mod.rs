//! Minimal differentiable compute core.
//!
//! A fixed inventory of layer primitives, each with a hand-written backward
//! pass. No graph, no tape: callers keep whatever activations they need and
//! chain backward calls in reverse order. Every backward here is verified
//! against central finite differences (see [`grad_check`] and the test
//! suites).

mod checkpoint;
mod gradcheck;
mod kernels;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::*;

use crate::error::{CosalError, Result};
use crate::scalar::{real, Real};
use crate::tensor::Tensor;
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

/// Layer inventory. Conv layers run stride 1; conv3x3 zero-pads by 1 so
/// spatial extents are preserved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    FullyConnected,
    Relu,
    Sigmoid,
    MaxPool2,
    Upsample2,
    Concat,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::FullyConnected => "fully-connected",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::MaxPool2 => "maxpool2",
            LayerKind::Upsample2 => "upsample2",
            LayerKind::Concat => "concat",
        }
    }

    pub fn has_params(self) -> bool {
        matches!(
            self,
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::FullyConnected
        )
    }
}

/// Trainable parameters of one layer plus their gradient accumulators.
///
/// Gradient tensors always shape-match their parameter tensors and are zeroed
/// at the start of each training step (`zero_grads` / `sgd_step`).
#[derive(Clone, Debug)]
pub struct LayerParams<F> {
    pub kind: LayerKind,
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
    pub weight_grad: Tensor<F>,
    pub bias_grad: Tensor<F>,
}

impl<F: Real> LayerParams<F> {
    /// conv3x3 weights are stored as [out_c, in_c, 3, 3].
    pub fn conv3x3<R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        Self::init(
            LayerKind::Conv3x3,
            &[out_c, in_c, 3, 3],
            &[out_c],
            in_c * 9,
            out_c * 9,
            rng,
        )
    }

    /// conv1x1 weights are stored as [out_c, in_c].
    pub fn conv1x1<R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        Self::init(LayerKind::Conv1x1, &[out_c, in_c], &[out_c], in_c, out_c, rng)
    }

    /// fully-connected weights are stored as [out_dim, in_dim].
    pub fn fully_connected<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::init(
            LayerKind::FullyConnected,
            &[out_dim, in_dim],
            &[out_dim],
            in_dim,
            out_dim,
            rng,
        )
    }

    /// Xavier-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero bias.
    /// Draws happen in f64 so f32 and f64 networks start from the same values.
    fn init<R: Rng>(
        kind: LayerKind,
        wshape: &[usize],
        bshape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let wlen: usize = wshape.iter().product();
        let wdata: Vec<F> = (0..wlen).map(|_| real(dist.sample(rng))).collect();
        LayerParams {
            kind,
            weights: Tensor::from_vec(wshape, wdata).expect("weight shape"),
            bias: Tensor::zeros(bshape),
            weight_grad: Tensor::zeros(wshape),
            bias_grad: Tensor::zeros(bshape),
        }
    }

    pub fn zero_grads(&mut self) {
        for g in self.weight_grad.data_mut() {
            *g = F::zero();
        }
        for g in self.bias_grad.data_mut() {
            *g = F::zero();
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// One plain SGD update with decoupled-from-nothing classic weight decay:
/// `w <- w - lr * (grad + weight_decay * w)`, then gradients are zeroed.
/// A non-finite gradient aborts with a diagnostic naming the layer.
pub fn sgd_step<F: Real>(
    name: &str,
    params: &mut LayerParams<F>,
    learning_rate: F,
    weight_decay: F,
) -> Result<()> {
    if !params.weight_grad.all_finite() || !params.bias_grad.all_finite() {
        return Err(CosalError::NonFiniteGrad {
            layer: name.to_string(),
        });
    }
    let wd = weight_decay;
    let lr = learning_rate;
    let (w, g) = (params.weights.data_mut(), params.weight_grad.data());
    for (wv, gv) in w.iter_mut().zip(g) {
        *wv = *wv - lr * (*gv + wd * *wv);
    }
    let (b, gb) = (params.bias.data_mut(), params.bias_grad.data());
    for (bv, gv) in b.iter_mut().zip(gb) {
        *bv = *bv - lr * (*gv + wd * *bv);
    }
    params.zero_grads();
    Ok(())
}

/// Uniform forward dispatch over the layer inventory. Pure function of
/// (params, inputs); output shape is deterministic from input shape and kind.
pub fn forward<F: Real>(
    kind: LayerKind,
    params: Option<&LayerParams<F>>,
    inputs: &[&Tensor<F>],
) -> Result<Tensor<F>> {
    let one = |name: &str| -> Result<&Tensor<F>> {
        if inputs.len() == 1 {
            Ok(inputs[0])
        } else {
            Err(CosalError::InvalidArgument(format!(
                "{name} expects exactly one input, got {}",
                inputs.len()
            )))
        }
    };
    let p = |name: &str| -> Result<&LayerParams<F>> {
        params.ok_or_else(|| CosalError::InvalidArgument(format!("{name} requires parameters")))
    };
    match kind {
        LayerKind::Conv3x3 => conv3x3_forward(p("conv3x3")?, one("conv3x3")?),
        LayerKind::Conv1x1 => conv1x1_forward(p("conv1x1")?, one("conv1x1")?),
        LayerKind::FullyConnected => fc_forward(p("fully-connected")?, one("fully-connected")?),
        LayerKind::Relu => Ok(relu_forward(one("relu")?)),
        LayerKind::Sigmoid => Ok(sigmoid_forward(one("sigmoid")?)),
        LayerKind::MaxPool2 => maxpool2_forward(one("maxpool2")?),
        LayerKind::Upsample2 => upsample2_forward(one("upsample2")?),
        LayerKind::Concat => {
            if inputs.len() != 2 {
                return Err(CosalError::InvalidArgument(format!(
                    "concat expects exactly two inputs, got {}",
                    inputs.len()
                )));
            }
            concat_forward(inputs[0], inputs[1])
        }
    }
}

/// Uniform backward dispatch. Returns one gradient tensor per input, in input
/// order; parameter gradients are accumulated (not overwritten) into `params`.
pub fn backward<F: Real>(
    kind: LayerKind,
    params: Option<&mut LayerParams<F>>,
    inputs: &[&Tensor<F>],
    upstream: &Tensor<F>,
) -> Result<Vec<Tensor<F>>> {
    match kind {
        LayerKind::Conv3x3 => {
            let p = params.ok_or_else(|| {
                CosalError::InvalidArgument("conv3x3 requires parameters".into())
            })?;
            Ok(vec![conv3x3_backward(p, inputs[0], upstream)?])
        }
        LayerKind::Conv1x1 => {
            let p = params.ok_or_else(|| {
                CosalError::InvalidArgument("conv1x1 requires parameters".into())
            })?;
            Ok(vec![conv1x1_backward(p, inputs[0], upstream)?])
        }
        LayerKind::FullyConnected => {
            let p = params.ok_or_else(|| {
                CosalError::InvalidArgument("fully-connected requires parameters".into())
            })?;
            Ok(vec![fc_backward(p, inputs[0], upstream)?])
        }
        LayerKind::Relu => Ok(vec![relu_backward(inputs[0], upstream)?]),
        LayerKind::Sigmoid => Ok(vec![sigmoid_backward(inputs[0], upstream)?]),
        LayerKind::MaxPool2 => Ok(vec![maxpool2_backward(inputs[0], upstream)?]),
        LayerKind::Upsample2 => Ok(vec![upsample2_backward(inputs[0], upstream)?]),
        LayerKind::Concat => {
            let (ga, gb) = concat_backward(inputs[0], inputs[1], upstream)?;
            Ok(vec![ga, gb])
        }
    }
}
