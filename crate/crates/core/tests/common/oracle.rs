//! Operation counting by direct simulation: nested loops over every output
//! position increment a counter once per multiply, add, compare or divide.
//! Shapes are discovered by the loops themselves.

use sdpoint::downsample::target_size;
use sdpoint::layers::BlockSpec;
use sdpoint::{NetworkSpec, SDPointInstance};

struct Counter {
    ops: u64,
    c: usize,
    h: usize,
    w: usize,
}

impl Counter {
    fn conv(&mut self, c_out: usize, k: usize, stride: usize, pad: usize) {
        let (mut oh, mut ow) = (0, 0);
        let mut r = 0;
        while r * stride + k <= self.h + 2 * pad {
            ow = 0;
            let mut q = 0;
            while q * stride + k <= self.w + 2 * pad {
                for _co in 0..c_out {
                    for _ci in 0..self.c {
                        for _ki in 0..k {
                            for _kj in 0..k {
                                self.ops += 1; // multiply
                                self.ops += 1; // accumulate
                            }
                        }
                    }
                }
                q += 1;
                ow += 1;
            }
            r += 1;
            oh += 1;
        }
        self.c = c_out;
        self.h = oh;
        self.w = ow;
    }

    fn per_element(&mut self, ops_each: u64) {
        for _ in 0..self.c * self.h * self.w {
            self.ops += ops_each;
        }
    }

    fn pool(&mut self, oh: usize, ow: usize) {
        let bounds =
            |len: usize, out: usize, j: usize| (j * len / out, ((j + 1) * len).div_ceil(out));
        for _ in 0..self.c {
            for i in 0..oh {
                let (r0, r1) = bounds(self.h, oh, i);
                for j in 0..ow {
                    let (c0, c1) = bounds(self.w, ow, j);
                    for _ in r0..r1 {
                        for _ in c0..c1 {
                            self.ops += 1;
                        }
                    }
                    self.ops += 1; // divide
                }
            }
        }
        self.h = oh;
        self.w = ow;
    }
}

pub fn flops_oracle(spec: &NetworkSpec, inst: SDPointInstance) -> u64 {
    let mut k = Counter {
        ops: 0,
        c: spec.in_channels,
        h: spec.input_hw.0,
        w: spec.input_hw.1,
    };
    if let Some(stem) = spec.stem {
        k.conv(stem.out_channels, stem.kernel, 1, stem.kernel / 2);
    }
    for (i, block) in spec.blocks.iter().enumerate() {
        match *block {
            BlockSpec::Residual {
                in_channels,
                out_channels,
                stride,
            } => {
                let (h0, w0) = (k.h, k.w);
                k.per_element(2);
                k.per_element(1);
                k.conv(out_channels, 3, stride, 1);
                k.per_element(2);
                k.per_element(1);
                k.conv(out_channels, 3, 1, 1);
                if in_channels != out_channels || stride != 1 {
                    let mut side = Counter {
                        ops: 0,
                        c: in_channels,
                        h: h0,
                        w: w0,
                    };
                    side.conv(out_channels, 1, stride, 0);
                    k.ops += side.ops;
                }
                k.per_element(1);
            }
            BlockSpec::Plain {
                out_channels,
                stride,
                ..
            } => {
                k.conv(out_channels, 3, stride, 1);
                k.per_element(2);
                k.per_element(1);
            }
        }
        if i + 1 == inst.point() {
            let r = inst.ratio().expect("non-identity instance has a ratio");
            k.pool(target_size(k.h, r), target_size(k.w, r));
        }
    }
    if let Some(head) = spec.head {
        if head.pre_activation {
            k.per_element(2);
            k.per_element(1);
        }
        for _ in 0..k.c {
            for _ in 0..k.h * k.w {
                k.ops += 1;
            }
            k.ops += 1;
        }
        for _ in 0..head.classes {
            for _ in 0..k.c {
                k.ops += 2;
            }
        }
    }
    k.ops
}
