//! Declarative architectures and their instantiated parameters.

use crate::downsample::pool::{adaptive_avg_pool_backward, PoolCache};
use crate::error::{Error, Result};
use crate::layers::batchnorm::{BatchMoments, BatchNorm, BnCache, ChannelStats, StatsChoice};
use crate::layers::block::{cast_bn, Block, BlockCache};
use crate::layers::conv::{Conv2d, ConvCache};
use crate::layers::linear::{Linear, LinearCache};
use crate::layers::ops::{
    global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward,
};
use crate::layers::Param;
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape4, Tensor4};

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockSpec {
    Residual {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    Plain {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
}

impl BlockSpec {
    pub fn in_channels(&self) -> usize {
        match *self {
            BlockSpec::Residual { in_channels, .. } | BlockSpec::Plain { in_channels, .. } => {
                in_channels
            }
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            BlockSpec::Residual { out_channels, .. } | BlockSpec::Plain { out_channels, .. } => {
                out_channels
            }
        }
    }

    pub fn stride(&self) -> usize {
        match *self {
            BlockSpec::Residual { stride, .. } | BlockSpec::Plain { stride, .. } => stride,
        }
    }

    pub fn has_projection(&self) -> bool {
        matches!(self, BlockSpec::Residual { .. })
            && (self.in_channels() != self.out_channels() || self.stride() != 1)
    }

    /// Channel count of each batch-norm layer, in forward order.
    pub fn bn_channels(&self) -> Vec<usize> {
        match *self {
            BlockSpec::Residual {
                in_channels,
                out_channels,
                ..
            } => vec![in_channels, out_channels],
            BlockSpec::Plain { out_channels, .. } => vec![out_channels],
        }
    }
}

/// Stride-1 convolution with same padding and no normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
}

/// Classifier stage: optional `bn → relu`, then global average pooling and a
/// linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    pub pre_activation: bool,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub input_hw: (usize, usize),
    pub stem: Option<StemSpec>,
    pub blocks: Vec<BlockSpec>,
    pub head: Option<HeadSpec>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BnOwner {
    /// 1-based block index.
    Block(usize),
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnSlot {
    pub owner: BnOwner,
    pub channels: usize,
}

impl NetworkSpec {
    pub fn empty(in_channels: usize, input_hw: (usize, usize)) -> Self {
        NetworkSpec {
            in_channels,
            input_hw,
            stem: None,
            blocks: Vec::new(),
            head: None,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        }
    }

    /// Pre-activation wide residual network for 32×32 inputs: a 3×3 stem with
    /// 16 channels, three stages of `(depth − 4) / 6` blocks with widths
    /// `16·k, 32·k, 64·k`, stage strides 1, 2, 2.
    pub fn wide_resnet(depth: usize, widen: usize, classes: usize) -> Result<Self> {
        if depth < 10 || !(depth - 4).is_multiple_of(6) {
            return Err(Error::invalid(format!(
                "wide resnet depth must be 6n + 4 with n ≥ 1, got {depth}"
            )));
        }
        if widen == 0 || classes == 0 {
            return Err(Error::invalid("widen factor and classes must be positive"));
        }
        let per_stage = (depth - 4) / 6;
        let mut blocks = Vec::with_capacity(per_stage * 3);
        let mut c_in = 16;
        for (stage, base) in [16, 32, 64].into_iter().enumerate() {
            let width = base * widen;
            for i in 0..per_stage {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                blocks.push(BlockSpec::Residual {
                    in_channels: c_in,
                    out_channels: width,
                    stride,
                });
                c_in = width;
            }
        }
        Ok(NetworkSpec {
            stem: Some(StemSpec {
                out_channels: 16,
                kernel: 3,
            }),
            blocks,
            head: Some(HeadSpec {
                pre_activation: true,
                classes,
            }),
            ..NetworkSpec::empty(3, (32, 32))
        })
    }

    pub fn with_input_hw(&self, h: usize, w: usize) -> Self {
        NetworkSpec {
            input_hw: (h, w),
            ..self.clone()
        }
    }

    /// Number of stochastic downsampling points, one after each block.
    pub fn downsampling_points(&self) -> usize {
        self.blocks.len()
    }

    /// 1-based indices of blocks that perform the architecture's fixed
    /// stride-2 downsampling.
    pub fn stage_boundaries(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.stride() == 2)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn classes(&self) -> Option<usize> {
        self.head.map(|h| h.classes)
    }

    pub fn final_channels(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.out_channels())
            .or(self.stem.map(|s| s.out_channels))
            .unwrap_or(self.in_channels)
    }

    pub fn bn_layout(&self) -> Vec<BnSlot> {
        let mut slots = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for channels in b.bn_channels() {
                slots.push(BnSlot {
                    owner: BnOwner::Block(i + 1),
                    channels,
                });
            }
        }
        if let Some(h) = self.head {
            if h.pre_activation {
                slots.push(BnSlot {
                    owner: BnOwner::Head,
                    channels: self.final_channels(),
                });
            }
        }
        slots
    }

    /// Index of the first batch-norm layer that runs after block `p`
    /// (`p = 0` means before any block).
    pub fn first_bn_after_block(&self, p: usize) -> usize {
        self.bn_layout()
            .iter()
            .position(|s| match s.owner {
                BnOwner::Block(b) => b > p,
                BnOwner::Head => true,
            })
            .unwrap_or_else(|| self.bn_layout().len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.input_hw.0 == 0 || self.input_hw.1 == 0 {
            return Err(Error::invalid("input channels and size must be positive"));
        }
        if self.blocks.is_empty() {
            return Err(Error::invalid("network needs at least one block"));
        }
        let head = self
            .head
            .ok_or_else(|| Error::invalid("network needs a classifier stage"))?;
        if head.classes == 0 {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("invalid batch norm hyperparameters"));
        }
        let mut c = self.in_channels;
        if let Some(stem) = self.stem {
            if stem.out_channels == 0 || stem.kernel == 0 || stem.kernel % 2 == 0 {
                return Err(Error::invalid(
                    "stem needs positive channels and an odd kernel",
                ));
            }
            c = stem.out_channels;
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels() != c {
                return Err(Error::invalid(format!(
                    "block {} expects {} channels but receives {}",
                    i + 1,
                    b.in_channels(),
                    c
                )));
            }
            if b.out_channels() == 0 || !(b.stride() == 1 || b.stride() == 2) {
                return Err(Error::invalid(format!(
                    "block {} has invalid channels or stride",
                    i + 1
                )));
            }
            c = b.out_channels();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Batch statistics; moments are recorded for the running update.
    Train,
    /// Batch statistics without touching running statistics.
    Batch,
    /// Each layer's running statistics.
    Running,
    /// Explicit statistics for every batch-norm layer, in layout order.
    Fixed(&'a [ChannelStats<T>]),
}

/// Per-forward state: normalisation mode, whether to keep backward caches,
/// and the batch moments observed by each batch-norm layer.
pub struct ForwardCtx<'a, T> {
    pub mode: NormMode<'a, T>,
    pub keep: bool,
    cursor: usize,
    moments: Vec<(usize, BatchMoments)>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn new(mode: NormMode<'a, T>, keep: bool) -> Self {
        ForwardCtx {
            mode,
            keep,
            cursor: 0,
            moments: Vec::new(),
        }
    }

    pub fn train() -> Self {
        Self::new(NormMode::Train, true)
    }

    pub fn moments(&self) -> &[(usize, BatchMoments)] {
        &self.moments
    }

    pub fn into_moments(self) -> Vec<(usize, BatchMoments)> {
        self.moments
    }

    pub(crate) fn batch_norm(
        &mut self,
        bn: &BatchNorm<T>,
        x: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, BnCache<T>)> {
        let layer = self.cursor;
        self.cursor += 1;
        let choice = match self.mode {
            NormMode::Train | NormMode::Batch => StatsChoice::Batch,
            NormMode::Running => {
                StatsChoice::Fixed(bn.running.as_ref().ok_or(Error::MissingBnStats { layer })?)
            }
            NormMode::Fixed(all) => {
                StatsChoice::Fixed(all.get(layer).ok_or(Error::MissingBnStats { layer })?)
            }
        };
        let (y, cache, moments) = bn.forward(x, choice, self.keep)?;
        if let Some(m) = moments {
            self.moments.push((layer, m));
        }
        Ok((y, cache))
    }
}

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    bn: Option<BnCache<T>>,
    act: Option<Tensor4<T>>,
    pooled_from: Shape4,
    fc: LinearCache<T>,
}

#[derive(Clone, Debug)]
pub enum Step<T> {
    Stem(ConvCache<T>),
    /// 0-based block position.
    Block(usize, Box<BlockCache<T>>),
    Pool(PoolCache),
    Head(HeadCache<T>),
}

/// Ordered record of a forward pass for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct Trace<T> {
    pub steps: Vec<Step<T>>,
}

/// Instantiated parameters for a [`NetworkSpec`].
#[derive(Clone, Debug)]
pub struct LayerStack<T = f32> {
    spec: NetworkSpec,
    pub stem: Option<Conv2d<T>>,
    pub blocks: Vec<Block<T>>,
    pub head_bn: Option<BatchNorm<T>>,
    pub fc: Linear<T>,
}

impl<T: Scalar> LayerStack<T> {
    pub fn new(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let stem = match spec.stem {
            Some(s) => {
                let mut conv =
                    Conv2d::new(spec.in_channels, s.out_channels, s.kernel, 1, s.kernel / 2)?;
                conv.init_he(rng);
                Some(conv)
            }
            None => None,
        };
        let blocks = spec
            .blocks
            .iter()
            .map(|b| Block::from_spec(b, spec.bn_momentum, spec.bn_eps, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = spec.head.expect("validated");
        let c = spec.final_channels();
        let head_bn = if head.pre_activation {
            Some(BatchNorm::new(c, spec.bn_momentum, spec.bn_eps)?)
        } else {
            None
        };
        let mut fc = Linear::new(c, head.classes)?;
        fc.init_uniform(rng);
        Ok(LayerStack {
            spec,
            stem,
            blocks,
            head_bn,
            fc,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward_stem(
        &self,
        x: &Tensor4<T>,
        ctx: &mut ForwardCtx<'_, T>,
        trace: &mut Trace<T>,
    ) -> Result<Tensor4<T>> {
        if x.shape().c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels,
                x.shape().c
            )));
        }
        match &self.stem {
            Some(conv) => {
                let (y, cache) = conv.forward(x, ctx.keep)?;
                if ctx.keep {
                    trace.steps.push(Step::Stem(cache));
                }
                Ok(y)
            }
            None => Ok(x.clone()),
        }
    }

    /// Runs the block at 0-based position `index`.
    pub fn forward_block(
        &self,
        index: usize,
        x: &Tensor4<T>,
        ctx: &mut ForwardCtx<'_, T>,
        trace: &mut Trace<T>,
    ) -> Result<Tensor4<T>> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::invalid(format!("no block at position {index}")))?;
        let (y, cache) = block.forward(x, ctx)?;
        if ctx.keep {
            trace.steps.push(Step::Block(index, Box::new(cache)));
        }
        Ok(y)
    }

    /// Classifier stage; accepts any spatial size.
    pub fn forward_head(
        &self,
        x: &Tensor4<T>,
        ctx: &mut ForwardCtx<'_, T>,
        trace: &mut Trace<T>,
    ) -> Result<Tensor4<T>> {
        let (act, bn) = match &self.head_bn {
            Some(bn) => {
                let (h, cache) = ctx.batch_norm(bn, x)?;
                (relu_forward(&h), Some(cache))
            }
            None => (x.clone(), None),
        };
        let pooled = global_avg_pool_forward(&act);
        let (logits, fc) = self.fc.forward(&pooled, ctx.keep)?;
        if ctx.keep {
            trace.steps.push(Step::Head(HeadCache {
                bn,
                pooled_from: act.shape(),
                act: self.head_bn.is_some().then_some(act),
                fc,
            }));
        }
        Ok(logits)
    }

    /// The network without any stochastic downsampling.
    pub fn forward(
        &self,
        x: &Tensor4<T>,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<(Tensor4<T>, Trace<T>)> {
        let mut trace = Trace::default();
        let mut h = self.forward_stem(x, ctx, &mut trace)?;
        for i in 0..self.blocks.len() {
            h = self.forward_block(i, &h, ctx, &mut trace)?;
        }
        let logits = self.forward_head(&h, ctx, &mut trace)?;
        Ok((logits, trace))
    }

    /// Backpropagates through a recorded trace, accumulating parameter
    /// gradients; returns the gradient with respect to the network input.
    pub fn backward(&mut self, trace: &Trace<T>, grad_logits: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = grad_logits.clone();
        for step in trace.steps.iter().rev() {
            g = match step {
                Step::Head(cache) => {
                    let dpooled = self.fc.backward(&cache.fc, &g)?;
                    let dact = global_avg_pool_backward(cache.pooled_from, &dpooled)?;
                    match (&mut self.head_bn, &cache.bn, &cache.act) {
                        (Some(bn), Some(bn_cache), Some(act)) => {
                            let dh = relu_backward(act, &dact)?;
                            bn.backward(bn_cache, &dh)?
                        }
                        (None, None, None) => dact,
                        _ => return Err(Error::invalid("head cache does not match head")),
                    }
                }
                Step::Pool(cache) => adaptive_avg_pool_backward(cache, &g)?,
                Step::Block(i, cache) => self.blocks[*i].backward(cache, &g)?,
                Step::Stem(cache) => match &mut self.stem {
                    Some(conv) => conv.backward(cache, &g)?,
                    None => return Err(Error::invalid("stem cache without a stem")),
                },
            };
        }
        Ok(g)
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        let mut v: Vec<&BatchNorm<T>> = self.blocks.iter().flat_map(|b| b.batch_norms()).collect();
        v.extend(self.head_bn.as_ref());
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v: Vec<&mut BatchNorm<T>> = self
            .blocks
            .iter_mut()
            .flat_map(|b| b.batch_norms_mut())
            .collect();
        v.extend(self.head_bn.as_mut());
        v
    }

    pub fn apply_running_updates(&mut self, moments: &[(usize, BatchMoments)]) {
        let mut bns = self.batch_norms_mut();
        for (layer, m) in moments {
            bns[*layer].update_running(m);
        }
    }

    /// Each layer's running statistics, if every layer has them.
    pub fn running_stats(&self) -> Option<Vec<ChannelStats<T>>> {
        self.batch_norms()
            .iter()
            .map(|bn| bn.running.clone())
            .collect()
    }

    pub fn params(&self) -> Vec<(String, Vec<usize>, &Param<T>)> {
        let mut v = Vec::new();
        if let Some(stem) = &self.stem {
            v.push((
                "stem.weight".to_string(),
                stem.weight_dims().to_vec(),
                &stem.weight,
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, dims, p) in b.params() {
                v.push((format!("block{}.{}", i + 1, name), dims, p));
            }
        }
        if let Some(bn) = &self.head_bn {
            v.push(("head.bn.gamma".into(), vec![bn.channels()], &bn.gamma));
            v.push(("head.bn.beta".into(), vec![bn.channels()], &bn.beta));
        }
        v.push((
            "head.fc.weight".into(),
            vec![self.fc.out_features, self.fc.in_features],
            &self.fc.weight,
        ));
        v.push((
            "head.fc.bias".into(),
            vec![self.fc.out_features],
            &self.fc.bias,
        ));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        if let Some(stem) = &mut self.stem {
            v.push(&mut stem.weight);
        }
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        if let Some(bn) = &mut self.head_bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v.push(&mut self.fc.weight);
        v.push(&mut self.fc.bias);
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, p)| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> LayerStack<U> {
        LayerStack {
            spec: self.spec.clone(),
            stem: self.stem.as_ref().map(|c| Conv2d {
                weight: c.weight.cast(),
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                pad: c.pad,
            }),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            head_bn: self.head_bn.as_ref().map(cast_bn),
            fc: Linear {
                weight: self.fc.weight.cast(),
                bias: self.fc.bias.cast(),
                in_features: self.fc.in_features,
                out_features: self.fc.out_features,
            },
        }
    }
}
