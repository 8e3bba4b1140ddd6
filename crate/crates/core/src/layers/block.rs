use crate::error::{Error, Result};
use crate::layers::batchnorm::{BatchNorm, BnCache};
use crate::layers::conv::{Conv2d, ConvCache};
use crate::layers::network::{BlockSpec, ForwardCtx};
use crate::layers::ops::{relu_backward, relu_forward};
use crate::layers::Param;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor4};

/// Pre-activation residual block: `shortcut(x) + conv(relu(bn(conv(relu(bn(x))))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub bn1: BatchNorm<T>,
    pub conv1: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    /// 1×1 projection when channels or stride change.
    pub shortcut: Option<Conv2d<T>>,
}

/// Post-activation `conv → bn → relu` triple.
#[derive(Clone, Debug)]
pub struct PlainBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

// Blocks and caches live in short vectors; boxing buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Block<T> {
    Residual(ResidualBlock<T>),
    Plain(PlainBlock<T>),
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum BlockCache<T> {
    Residual {
        bn1: BnCache<T>,
        a1: Option<Tensor4<T>>,
        conv1: ConvCache<T>,
        bn2: BnCache<T>,
        a2: Option<Tensor4<T>>,
        conv2: ConvCache<T>,
        shortcut: Option<ConvCache<T>>,
    },
    Plain {
        conv: ConvCache<T>,
        bn: BnCache<T>,
        out: Option<Tensor4<T>>,
    },
}

fn take<T>(t: &Option<Tensor4<T>>) -> Result<&Tensor4<T>> {
    t.as_ref()
        .ok_or_else(|| Error::invalid("backward through a forward run without caches"))
}

impl<T: Scalar> Block<T> {
    pub fn from_spec(spec: &BlockSpec, momentum: f64, eps: f64, rng: &mut Rng) -> Result<Self> {
        match *spec {
            BlockSpec::Residual {
                in_channels,
                out_channels,
                stride,
            } => {
                let mut conv1 = Conv2d::new(in_channels, out_channels, 3, stride, 1)?;
                let mut conv2 = Conv2d::new(out_channels, out_channels, 3, 1, 1)?;
                conv1.init_he(rng);
                conv2.init_he(rng);
                let shortcut = if spec.has_projection() {
                    let mut sc = Conv2d::new(in_channels, out_channels, 1, stride, 0)?;
                    sc.init_he(rng);
                    Some(sc)
                } else {
                    None
                };
                Ok(Block::Residual(ResidualBlock {
                    bn1: BatchNorm::new(in_channels, momentum, eps)?,
                    conv1,
                    bn2: BatchNorm::new(out_channels, momentum, eps)?,
                    conv2,
                    shortcut,
                }))
            }
            BlockSpec::Plain {
                in_channels,
                out_channels,
                stride,
            } => {
                let mut conv = Conv2d::new(in_channels, out_channels, 3, stride, 1)?;
                conv.init_he(rng);
                Ok(Block::Plain(PlainBlock {
                    conv,
                    bn: BatchNorm::new(out_channels, momentum, eps)?,
                }))
            }
        }
    }

    pub fn forward(
        &self,
        x: &Tensor4<T>,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<(Tensor4<T>, BlockCache<T>)> {
        let keep = ctx.keep;
        match self {
            Block::Residual(b) => {
                let (h1, bn1) = ctx.batch_norm(&b.bn1, x)?;
                let a1 = relu_forward(&h1);
                let (c1, conv1) = b.conv1.forward(&a1, keep)?;
                let (h2, bn2) = ctx.batch_norm(&b.bn2, &c1)?;
                let a2 = relu_forward(&h2);
                let (mut out, conv2) = b.conv2.forward(&a2, keep)?;
                let shortcut = match &b.shortcut {
                    Some(sc) => {
                        let (s, cache) = sc.forward(x, keep)?;
                        out.add_assign(&s)?;
                        Some(cache)
                    }
                    None => {
                        out.add_assign(x)?;
                        None
                    }
                };
                Ok((
                    out,
                    BlockCache::Residual {
                        bn1,
                        a1: keep.then_some(a1),
                        conv1,
                        bn2,
                        a2: keep.then_some(a2),
                        conv2,
                        shortcut,
                    },
                ))
            }
            Block::Plain(b) => {
                let (c, conv) = b.conv.forward(x, keep)?;
                let (h, bn) = ctx.batch_norm(&b.bn, &c)?;
                let out = relu_forward(&h);
                let cached = keep.then(|| out.clone());
                Ok((
                    out,
                    BlockCache::Plain {
                        conv,
                        bn,
                        out: cached,
                    },
                ))
            }
        }
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        match (self, cache) {
            (
                Block::Residual(b),
                BlockCache::Residual {
                    bn1,
                    a1,
                    conv1,
                    bn2,
                    a2,
                    conv2,
                    shortcut,
                },
            ) => {
                let da2 = b.conv2.backward(conv2, grad_out)?;
                let dh2 = relu_backward(take(a2)?, &da2)?;
                let dc1 = b.bn2.backward(bn2, &dh2)?;
                let da1 = b.conv1.backward(conv1, &dc1)?;
                let dh1 = relu_backward(take(a1)?, &da1)?;
                let mut dx = b.bn1.backward(bn1, &dh1)?;
                match (&mut b.shortcut, shortcut) {
                    (Some(sc), Some(sc_cache)) => {
                        dx.add_assign(&sc.backward(sc_cache, grad_out)?)?
                    }
                    (None, None) => dx.add_assign(grad_out)?,
                    _ => return Err(Error::invalid("shortcut cache does not match block")),
                }
                Ok(dx)
            }
            (Block::Plain(b), BlockCache::Plain { conv, bn, out }) => {
                let dh = relu_backward(take(out)?, grad_out)?;
                let dc = b.bn.backward(bn, &dh)?;
                b.conv.backward(conv, &dc)
            }
            _ => Err(Error::invalid("block cache does not match block kind")),
        }
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        match self {
            Block::Residual(b) => vec![&b.bn1, &b.bn2],
            Block::Plain(b) => vec![&b.bn],
        }
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        match self {
            Block::Residual(b) => vec![&mut b.bn1, &mut b.bn2],
            Block::Plain(b) => vec![&mut b.bn],
        }
    }

    /// Named parameters with their shapes, in a fixed order shared with
    /// [`Block::params_mut`].
    pub fn params(&self) -> Vec<(String, Vec<usize>, &Param<T>)> {
        match self {
            Block::Residual(b) => {
                let mut v = vec![
                    ("bn1.gamma".into(), vec![b.bn1.channels()], &b.bn1.gamma),
                    ("bn1.beta".into(), vec![b.bn1.channels()], &b.bn1.beta),
                    (
                        "conv1.weight".into(),
                        b.conv1.weight_dims().to_vec(),
                        &b.conv1.weight,
                    ),
                    ("bn2.gamma".into(), vec![b.bn2.channels()], &b.bn2.gamma),
                    ("bn2.beta".into(), vec![b.bn2.channels()], &b.bn2.beta),
                    (
                        "conv2.weight".into(),
                        b.conv2.weight_dims().to_vec(),
                        &b.conv2.weight,
                    ),
                ];
                if let Some(sc) = &b.shortcut {
                    v.push((
                        "shortcut.weight".into(),
                        sc.weight_dims().to_vec(),
                        &sc.weight,
                    ));
                }
                v
            }
            Block::Plain(b) => vec![
                (
                    "conv.weight".into(),
                    b.conv.weight_dims().to_vec(),
                    &b.conv.weight,
                ),
                ("bn.gamma".into(), vec![b.bn.channels()], &b.bn.gamma),
                ("bn.beta".into(), vec![b.bn.channels()], &b.bn.beta),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Block::Residual(b) => {
                let mut v = vec![
                    &mut b.bn1.gamma,
                    &mut b.bn1.beta,
                    &mut b.conv1.weight,
                    &mut b.bn2.gamma,
                    &mut b.bn2.beta,
                    &mut b.conv2.weight,
                ];
                if let Some(sc) = &mut b.shortcut {
                    v.push(&mut sc.weight);
                }
                v
            }
            Block::Plain(b) => vec![&mut b.conv.weight, &mut b.bn.gamma, &mut b.bn.beta],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Block<U> {
        fn conv<T: Scalar, U: Scalar>(c: &Conv2d<T>) -> Conv2d<U> {
            Conv2d {
                weight: c.weight.cast(),
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                pad: c.pad,
            }
        }
        match self {
            Block::Residual(b) => Block::Residual(ResidualBlock {
                bn1: cast_bn(&b.bn1),
                conv1: conv(&b.conv1),
                bn2: cast_bn(&b.bn2),
                conv2: conv(&b.conv2),
                shortcut: b.shortcut.as_ref().map(conv),
            }),
            Block::Plain(b) => Block::Plain(PlainBlock {
                conv: conv(&b.conv),
                bn: cast_bn(&b.bn),
            }),
        }
    }
}

pub(crate) fn cast_bn<T: Scalar, U: Scalar>(bn: &BatchNorm<T>) -> BatchNorm<U> {
    BatchNorm {
        gamma: bn.gamma.cast(),
        beta: bn.beta.cast(),
        running: bn.running.as_ref().map(|r| r.cast()),
        momentum: bn.momentum,
        eps: bn.eps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::NormMode;

    fn residual(c_in: usize, c_out: usize, stride: usize) -> Block<f32> {
        let spec = BlockSpec::Residual {
            in_channels: c_in,
            out_channels: c_out,
            stride,
        };
        Block::from_spec(&spec, 0.1, 1e-5, &mut Rng::new(9)).unwrap()
    }

    #[test]
    fn zero_body_is_identity() {
        let mut block = residual(2, 2, 1);
        if let Block::Residual(b) = &mut block {
            b.conv1.weight.value.fill(0.0);
            b.conv2.weight.value.fill(0.0);
            assert!(b.shortcut.is_none());
        }
        let mut rng = Rng::new(2);
        let x = Tensor4::from_vec(
            [2, 2, 5, 5],
            (0..100).map(|_| rng.normal() as f32).collect(),
        )
        .unwrap();
        let mut ctx = ForwardCtx::new(NormMode::Batch, false);
        let (y, _) = block.forward(&x, &mut ctx).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let block = residual(2, 4, 2);
        let x = Tensor4::full([1, 2, 8, 8], 0.5f32).unwrap();
        let mut ctx = ForwardCtx::new(NormMode::Batch, false);
        let (y, _) = block.forward(&x, &mut ctx).unwrap();
        assert_eq!(y.dims(), [1, 4, 4, 4]);
    }

    #[test]
    fn params_and_params_mut_agree() {
        let mut block = residual(2, 4, 2);
        let lens: Vec<usize> = block.params().iter().map(|(_, _, p)| p.len()).collect();
        let lens_mut: Vec<usize> = block.params_mut().iter().map(|p| p.len()).collect();
        assert_eq!(lens, lens_mut);
        assert_eq!(lens.len(), 7);
    }
}
