//! Differentiable layers. Each primitive exposes a pure forward function and a
//! backward function that takes whatever the forward pass saved.
//!
//! Activations are channels-last: `[batch, height, width, channels]`, so every
//! token is one contiguous row and channel mixing is a plain GEMM.

pub mod act;
pub mod conv;
pub mod cycle;
pub mod fc;
pub mod norm;
pub mod pool;
pub mod shortcut;

pub use act::{rprelu_backward, rprelu_forward, ActivationKind, RpreluGrads, RpreluParams};
pub use conv::{conv2d_backward, conv2d_forward, Conv2dParams};
pub use cycle::{cycle_fc_backward, cycle_fc_forward, cycle_offsets, CycleFcParams};
pub use fc::{
    channel_fc_backward, channel_fc_forward, spatial_fc_backward, spatial_fc_forward, ChannelFcGrads,
    ChannelFcParams, SpatialFcParams,
};
pub use norm::{batchnorm_backward, batchnorm_forward, BatchNormParams, BnCache, BN_EPS, BN_MOMENTUM};
pub use pool::{global_avg_pool_backward, global_avg_pool_forward, maxpool_backward, maxpool_forward, same_padding};
pub use shortcut::{uni_shortcut, uni_shortcut_backward, uni_shortcut_bits, ShortcutKind};

use serde::{Deserialize, Serialize};

use crate::kernels::SteMode;
use crate::tensor::{FloatTensor, Real};

/// What an optimiser is allowed to do with a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    /// Full-precision weight; weight decay applies.
    Weight,
    /// Latent weight of a layer that may be binarized.
    LatentBinary,
    Bias,
    /// Batch-norm scale/shift.
    Norm,
    /// RPReLU shifts and slopes.
    Activation,
    /// Not trained (running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub value: FloatTensor<T>,
    pub grad: FloatTensor<T>,
    pub kind: ParamKind,
}

impl<T: Real> Param<T> {
    pub fn new(value: FloatTensor<T>, kind: ParamKind) -> Self {
        let grad = FloatTensor::zeros(value.shape());
        Self { value, grad, kind }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    pub(crate) fn accumulate(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Callback used to enumerate parameters with stable, hierarchical names.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;

/// Anything owning parameters.
pub trait Parameterized<T: Real> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Per-call execution settings shared by every layer of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    pub binarize_activations: bool,
    pub binarize_weights: bool,
    pub ste: SteMode,
}

impl Mode {
    pub fn full_precision(training: bool) -> Self {
        Self {
            training,
            binarize_activations: false,
            binarize_weights: false,
            ste: SteMode::Windowed,
        }
    }

    pub fn binary(training: bool) -> Self {
        Self {
            training,
            binarize_activations: true,
            binarize_weights: true,
            ste: SteMode::Windowed,
        }
    }
}
