//! Stochastic downsampling points.
//!
//! An instance `(p, r)` runs the shared network unchanged except that the
//! output of block `p` (after the residual addition) is average-pooled to
//! `target_size(h, r) × target_size(w, r)`. The classifier's global pooling
//! absorbs whatever spatial size arrives.

mod instance;
pub mod pool;

pub use instance::{enumerate_instances, InstanceCatalog, SDPointInstance};
pub use pool::{
    adaptive_avg_pool_backward, adaptive_avg_pool_forward, padded_pixel_ratio, pool_windows,
    target_size, PoolCache, PoolWindow,
};

use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, LayerStack, Step, Trace};
use crate::tensor::{Scalar, Tensor4};

/// Forward pass of one instance. With `p = 0` this runs exactly the same
/// operations as [`LayerStack::forward`].
pub fn sdpoint_forward<T: Scalar>(
    stack: &LayerStack<T>,
    x: &Tensor4<T>,
    inst: SDPointInstance,
    ctx: &mut ForwardCtx<'_, T>,
) -> Result<(Tensor4<T>, Trace<T>)> {
    let n = stack.num_blocks();
    if inst.point() > n {
        return Err(Error::invalid(format!(
            "instance {} exceeds the network's {} downsampling points",
            inst.id(),
            n
        )));
    }
    let mut trace = Trace::default();
    let mut h = stack.forward_stem(x, ctx, &mut trace)?;
    for i in 1..=n {
        h = stack.forward_block(i - 1, &h, ctx, &mut trace)?;
        if i == inst.point() {
            let r = inst.ratio().expect("non-identity instance has a ratio");
            let s = h.shape();
            let (pooled, cache) =
                adaptive_avg_pool_forward(&h, target_size(s.h, r), target_size(s.w, r))?;
            if ctx.keep {
                trace.steps.push(Step::Pool(cache));
            }
            h = pooled;
        }
    }
    let logits = stack.forward_head(&h, ctx, &mut trace)?;
    Ok((logits, trace))
}

/// Spatial size entering each block and the classifier for an instance:
/// element `i` is the input of block `i + 1`, the last element feeds the head.
pub fn shape_trace(
    spec: &crate::layers::NetworkSpec,
    inst: SDPointInstance,
) -> Result<Vec<(usize, usize)>> {
    use crate::layers::conv_out_size;
    let (mut h, mut w) = spec.input_hw;
    let mut out = Vec::with_capacity(spec.blocks.len() + 1);
    for (i, b) in spec.blocks.iter().enumerate() {
        out.push((h, w));
        h = conv_out_size(h, 3, b.stride(), 1)?;
        w = conv_out_size(w, 3, b.stride(), 1)?;
        if i + 1 == inst.point() {
            let r = inst.ratio().expect("non-identity instance has a ratio");
            h = target_size(h, r);
            w = target_size(w, r);
        }
    }
    out.push((h, w));
    Ok(out)
}
