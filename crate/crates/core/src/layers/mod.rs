//! Layers with explicit forward and backward passes.

mod batchnorm;
mod block;
mod conv;
mod linear;
mod loss;
mod network;
mod ops;

pub use batchnorm::{BatchMoments, BatchNorm, BnCache, ChannelStats, StatsChoice};
pub use block::{Block, BlockCache, PlainBlock, ResidualBlock};
pub use conv::{conv_out_size, Conv2d, ConvCache};
pub use linear::{Linear, LinearCache};
pub use loss::{softmax_cross_entropy, softmax_rows};
pub use network::{
    BlockSpec, BnOwner, BnSlot, ForwardCtx, HeadCache, HeadSpec, LayerStack, NetworkSpec, NormMode,
    StemSpec, Step, Trace,
};
pub use ops::{global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward};

use crate::tensor::Scalar;

/// A trainable parameter buffer and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(len: usize) -> Self {
        Param {
            value: vec![T::zero(); len],
            grad: vec![T::zero(); len],
        }
    }

    pub fn from_value(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Param { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: self.value.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: self.grad.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
