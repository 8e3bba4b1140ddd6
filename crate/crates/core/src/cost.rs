//! Analytic FLOP and parameter accounting.
//!
//! Counting conventions, per single image:
//! - multiply and add are separate operations, so a convolution or linear
//!   multiply-accumulate is 2 FLOPs (padded taps included);
//! - batch norm in its fused inference form is 2 FLOPs per element;
//! - ReLU and the residual addition are 1 FLOP per element;
//! - average pooling is one add per covered input element per window plus one
//!   divide per output element; global pooling likewise.

use std::fmt;
use std::str::FromStr;

use crate::downsample::{pool_windows, target_size, SDPointInstance};
use crate::error::{Error, Result};
use crate::layers::{conv_out_size, BlockSpec, NetworkSpec};

/// Per-image activation shape `(c, h, w)`.
pub type MapShape = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Linear,
    BatchNorm,
    Relu,
    Add,
    AvgPool,
    GlobalAvgPool,
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv" => LayerKind::Conv,
            "linear" => LayerKind::Linear,
            "bn" => LayerKind::BatchNorm,
            "relu" => LayerKind::Relu,
            "add" => LayerKind::Add,
            "avgpool" => LayerKind::AvgPool,
            "gap" => LayerKind::GlobalAvgPool,
            other => return Err(Error::UnknownLayerKind(other.to_string())),
        })
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::Linear => "linear",
            LayerKind::BatchNorm => "bn",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::AvgPool => "avgpool",
            LayerKind::GlobalAvgPool => "gap",
        })
    }
}

/// Kind-specific hyperparameters; fields irrelevant to a kind are ignored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerHyper {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_hw: (usize, usize),
}

impl LayerHyper {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerHyper {
            out_channels,
            kernel,
            stride,
            pad,
            ..Default::default()
        }
    }

    pub fn linear(out_features: usize) -> Self {
        LayerHyper {
            out_channels: out_features,
            ..Default::default()
        }
    }

    pub fn pool(out_h: usize, out_w: usize) -> Self {
        LayerHyper {
            out_hw: (out_h, out_w),
            ..Default::default()
        }
    }
}

/// FLOPs of one layer on one image and the layer's output shape.
pub fn layer_flops(kind: LayerKind, input: MapShape, hp: &LayerHyper) -> Result<(u64, MapShape)> {
    let [c, h, w] = input;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("layer input must be non-empty"));
    }
    let elems = (c * h * w) as u64;
    Ok(match kind {
        LayerKind::Conv => {
            let oh = conv_out_size(h, hp.kernel, hp.stride, hp.pad)?;
            let ow = conv_out_size(w, hp.kernel, hp.stride, hp.pad)?;
            let flops = 2 * (hp.out_channels * oh * ow * c * hp.kernel * hp.kernel) as u64;
            (flops, [hp.out_channels, oh, ow])
        }
        LayerKind::Linear => (2 * elems * hp.out_channels as u64, [hp.out_channels, 1, 1]),
        LayerKind::BatchNorm => (2 * elems, input),
        LayerKind::Relu | LayerKind::Add => (elems, input),
        LayerKind::AvgPool => {
            let (oh, ow) = hp.out_hw;
            let rows = pool_windows(h, oh)?;
            let cols = pool_windows(w, ow)?;
            let covered = rows.iter().map(|r| r.len()).sum::<usize>()
                * cols.iter().map(|c| c.len()).sum::<usize>();
            ((c * (covered + oh * ow)) as u64, [c, oh, ow])
        }
        LayerKind::GlobalAvgPool => ((c * (h * w + 1)) as u64, [c, 1, 1]),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: String,
    pub kind: LayerKind,
    pub input: MapShape,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub instance: SDPointInstance,
    pub flops: u64,
    pub per_layer: Vec<LayerCost>,
    pub params: u64,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

struct Tracer {
    shape: MapShape,
    layers: Vec<LayerCost>,
}

impl Tracer {
    fn push(&mut self, name: String, kind: LayerKind, hp: LayerHyper) -> Result<()> {
        let (flops, out) = layer_flops(kind, self.shape, &hp)?;
        self.layers.push(LayerCost {
            layer: name,
            kind,
            input: self.shape,
            flops,
        });
        self.shape = out;
        Ok(())
    }

    /// Cost a side branch without moving the main shape.
    fn branch(
        &mut self,
        name: String,
        kind: LayerKind,
        input: MapShape,
        hp: LayerHyper,
    ) -> Result<()> {
        let (flops, _) = layer_flops(kind, input, &hp)?;
        self.layers.push(LayerCost {
            layer: name,
            kind,
            input,
            flops,
        });
        Ok(())
    }
}

/// Traces one image through the instance and sums per-layer FLOPs,
/// including the instance's own pooling.
pub fn instance_cost(spec: &NetworkSpec, inst: SDPointInstance) -> Result<CostReport> {
    if inst.point() > spec.downsampling_points() {
        return Err(Error::invalid(format!(
            "instance {} exceeds the network's {} downsampling points",
            inst.id(),
            spec.downsampling_points()
        )));
    }
    let mut t = Tracer {
        shape: [spec.in_channels, spec.input_hw.0, spec.input_hw.1],
        layers: Vec::new(),
    };
    if let Some(stem) = spec.stem {
        t.push(
            "stem.conv".into(),
            LayerKind::Conv,
            LayerHyper::conv(stem.out_channels, stem.kernel, 1, stem.kernel / 2),
        )?;
    }
    for (i, block) in spec.blocks.iter().enumerate() {
        let b = i + 1;
        match *block {
            BlockSpec::Residual {
                out_channels,
                stride,
                ..
            } => {
                let input = t.shape;
                t.push(
                    format!("block{b}.bn1"),
                    LayerKind::BatchNorm,
                    LayerHyper::default(),
                )?;
                t.push(
                    format!("block{b}.relu1"),
                    LayerKind::Relu,
                    LayerHyper::default(),
                )?;
                t.push(
                    format!("block{b}.conv1"),
                    LayerKind::Conv,
                    LayerHyper::conv(out_channels, 3, stride, 1),
                )?;
                t.push(
                    format!("block{b}.bn2"),
                    LayerKind::BatchNorm,
                    LayerHyper::default(),
                )?;
                t.push(
                    format!("block{b}.relu2"),
                    LayerKind::Relu,
                    LayerHyper::default(),
                )?;
                t.push(
                    format!("block{b}.conv2"),
                    LayerKind::Conv,
                    LayerHyper::conv(out_channels, 3, 1, 1),
                )?;
                if block.has_projection() {
                    t.branch(
                        format!("block{b}.shortcut"),
                        LayerKind::Conv,
                        input,
                        LayerHyper::conv(out_channels, 1, stride, 0),
                    )?;
                }
                t.push(
                    format!("block{b}.add"),
                    LayerKind::Add,
                    LayerHyper::default(),
                )?;
            }
            BlockSpec::Plain {
                out_channels,
                stride,
                ..
            } => {
                t.push(
                    format!("block{b}.conv"),
                    LayerKind::Conv,
                    LayerHyper::conv(out_channels, 3, stride, 1),
                )?;
                t.push(
                    format!("block{b}.bn"),
                    LayerKind::BatchNorm,
                    LayerHyper::default(),
                )?;
                t.push(
                    format!("block{b}.relu"),
                    LayerKind::Relu,
                    LayerHyper::default(),
                )?;
            }
        }
        if b == inst.point() {
            let r = inst.ratio().expect("non-identity instance has a ratio");
            let [_, h, w] = t.shape;
            t.push(
                format!("sdpoint.pool@{b}"),
                LayerKind::AvgPool,
                LayerHyper::pool(target_size(h, r), target_size(w, r)),
            )?;
        }
    }
    if let Some(head) = spec.head {
        if head.pre_activation {
            t.push(
                "head.bn".into(),
                LayerKind::BatchNorm,
                LayerHyper::default(),
            )?;
            t.push("head.relu".into(), LayerKind::Relu, LayerHyper::default())?;
        }
        t.push(
            "head.gap".into(),
            LayerKind::GlobalAvgPool,
            LayerHyper::default(),
        )?;
        t.push(
            "head.fc".into(),
            LayerKind::Linear,
            LayerHyper::linear(head.classes),
        )?;
    }
    Ok(CostReport {
        instance: inst,
        flops: t.layers.iter().map(|l| l.flops).sum(),
        per_layer: t.layers,
        params: param_count(spec),
    })
}

/// Weights, batch-norm affine parameters, and classifier weights and bias.
/// Independent of the instance.
pub fn param_count(spec: &NetworkSpec) -> u64 {
    let mut total = 0usize;
    let mut c = spec.in_channels;
    if let Some(stem) = spec.stem {
        total += stem.out_channels * c * stem.kernel * stem.kernel;
        c = stem.out_channels;
    }
    for b in &spec.blocks {
        let (ci, co) = (b.in_channels(), b.out_channels());
        match b {
            BlockSpec::Residual { .. } => {
                total += 2 * ci + co * ci * 9 + 2 * co + co * co * 9;
                if b.has_projection() {
                    total += co * ci;
                }
            }
            BlockSpec::Plain { .. } => total += co * ci * 9 + 2 * co,
        }
        c = co;
    }
    if let Some(head) = spec.head {
        if head.pre_activation {
            total += 2 * c;
        }
        total += c * head.classes + head.classes;
    }
    total as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{HeadSpec, StemSpec};

    #[test]
    fn unit_conv_is_two_flops() {
        let (f, out) =
            layer_flops(LayerKind::Conv, [1, 1, 1], &LayerHyper::conv(1, 1, 1, 0)).unwrap();
        assert_eq!(f, 2);
        assert_eq!(out, [1, 1, 1]);
    }

    #[test]
    fn conv_3x3_16_channels_at_32() {
        let (f, _) = layer_flops(
            LayerKind::Conv,
            [16, 32, 32],
            &LayerHyper::conv(16, 3, 1, 1),
        )
        .unwrap();
        assert_eq!(f, 4_718_592);
    }

    #[test]
    fn linear_and_pool() {
        assert_eq!(
            layer_flops(LayerKind::Linear, [64, 1, 1], &LayerHyper::linear(10))
                .unwrap()
                .0,
            1280
        );
        assert_eq!(
            layer_flops(LayerKind::AvgPool, [1, 4, 4], &LayerHyper::pool(2, 2))
                .unwrap()
                .0,
            20
        );
        assert_eq!(
            layer_flops(LayerKind::GlobalAvgPool, [2, 3, 3], &LayerHyper::default())
                .unwrap()
                .0,
            20
        );
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!(
            "maxpool".parse::<LayerKind>(),
            Err(Error::UnknownLayerKind(_))
        ));
        for k in ["conv", "linear", "bn", "relu", "add", "avgpool", "gap"] {
            assert_eq!(k.parse::<LayerKind>().unwrap().to_string(), k);
        }
    }

    #[test]
    fn param_counts() {
        let mut single = NetworkSpec::empty(16, (8, 8));
        single.blocks.push(BlockSpec::Plain {
            in_channels: 16,
            out_channels: 16,
            stride: 1,
        });
        assert_eq!(param_count(&single), 2336);
        assert_eq!(param_count(&NetworkSpec::empty(3, (32, 32))), 0);
    }

    #[test]
    fn tiny_two_block_ordering() {
        let spec = NetworkSpec {
            stem: Some(StemSpec {
                out_channels: 4,
                kernel: 3,
            }),
            blocks: vec![
                BlockSpec::Residual {
                    in_channels: 4,
                    out_channels: 4,
                    stride: 1,
                },
                BlockSpec::Residual {
                    in_channels: 4,
                    out_channels: 8,
                    stride: 2,
                },
            ],
            head: Some(HeadSpec {
                pre_activation: true,
                classes: 3,
            }),
            ..NetworkSpec::empty(3, (8, 8))
        };
        let cost = |p, r| {
            instance_cost(&spec, SDPointInstance::new(p, r).unwrap())
                .unwrap()
                .flops
        };
        assert!(cost(1, 0.5) < cost(2, 0.5));
        assert!(cost(2, 0.5) < cost(0, 0.5));
        for p in 1..=2 {
            assert!(cost(p, 0.5) < cost(p, 0.75));
        }
    }

    #[test]
    fn report_sums_layers() {
        let spec = NetworkSpec::wide_resnet(16, 2, 10).unwrap();
        let r = instance_cost(&spec, SDPointInstance::new(3, 0.75).unwrap()).unwrap();
        assert_eq!(r.flops, r.per_layer.iter().map(|l| l.flops).sum::<u64>());
        assert!(r.per_layer.iter().any(|l| l.layer == "sdpoint.pool@3"));
    }
}
