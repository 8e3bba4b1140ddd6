#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use sdpoint::layers::{BlockSpec, HeadSpec, StemSpec};
use sdpoint::NetworkSpec;

/// A small network mixing identity, projection and plain blocks.
pub fn small_spec(in_hw: usize, classes: usize) -> NetworkSpec {
    NetworkSpec {
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
                out_channels: 6,
                stride: 2,
            },
            BlockSpec::Plain {
                in_channels: 6,
                out_channels: 6,
                stride: 1,
            },
        ],
        head: Some(HeadSpec {
            pre_activation: true,
            classes,
        }),
        ..NetworkSpec::empty(3, (in_hw, in_hw))
    }
}
