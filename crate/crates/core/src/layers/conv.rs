use crate::error::{Error, Result};
use crate::layers::Param;
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Output length of a convolution along one axis, floor convention.
pub fn conv_out_size(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("kernel and stride must be positive"));
    }
    let padded = len + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} does not fit input {len} with padding {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Bias-free 2-D cross-correlation.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    input: Option<Tensor4<T>>,
    in_shape: Shape4,
    out_hw: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 {
            return Err(Error::invalid("convolution dimensions must be positive"));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!("unsupported stride {stride}")));
        }
        Ok(Conv2d {
            weight: Param::zeros(out_channels * in_channels * kernel * kernel),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    /// He-normal initialisation scaled by fan-out.
    pub fn init_he(&mut self, rng: &mut Rng) {
        let std = (2.0 / (self.kernel * self.kernel * self.out_channels) as f64).sqrt();
        for w in self.weight.value.iter_mut() {
            *w = T::of(rng.normal() * std);
        }
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn out_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels, input.c
            )));
        }
        let h = conv_out_size(input.h, self.kernel, self.stride, self.pad)?;
        let w = conv_out_size(input.w, self.kernel, self.stride, self.pad)?;
        Ok(Shape4 {
            n: input.n,
            c: self.out_channels,
            h,
            w,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, col: &mut [T]) {
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let plane = oh * ow;
        for ci in 0..self.in_channels {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for r in 0..oh {
                        let ih = r as isize * s - p + ki as isize;
                        let out = &mut dst[r * ow..(r + 1) * ow];
                        if ih < 0 || ih >= h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &xin[ih as usize * w..(ih as usize + 1) * w];
                        for (q, o) in out.iter_mut().enumerate() {
                            let iw = q as isize * s - p + kj as isize;
                            *o = if iw < 0 || iw >= w as isize {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let plane = oh * ow;
        for ci in 0..self.in_channels {
            let dxin = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    for r in 0..oh {
                        let ih = r as isize * s - p + ki as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = &mut dxin[ih as usize * w..(ih as usize + 1) * w];
                        for (q, &g) in src[r * ow..(r + 1) * ow].iter().enumerate() {
                            let iw = q as isize * s - p + kj as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[iw as usize] = dst[iw as usize] + g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor4<T>, keep: bool) -> Result<(Tensor4<T>, ConvCache<T>)> {
        let in_shape = x.shape();
        let out_shape = self.out_shape(in_shape)?;
        let (h, w, oh, ow) = (in_shape.h, in_shape.w, out_shape.h, out_shape.w);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let plane = oh * ow;
        let mut out = Tensor4::zeros(out_shape);
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); ckk * plane]
        };
        for n in 0..in_shape.n {
            let xs = x.sample(n);
            let col_ref: &[T] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, h, w, oh, ow, &mut col);
                &col
            };
            T::gemm(
                self.out_channels,
                ckk,
                plane,
                &self.weight.value,
                (ckk as isize, 1),
                col_ref,
                (plane as isize, 1),
                T::zero(),
                out.sample_mut(n),
                (plane as isize, 1),
            );
        }
        let cache = ConvCache {
            input: keep.then(|| x.clone()),
            in_shape,
            out_hw: (oh, ow),
        };
        Ok((out, cache))
    }

    /// Accumulates into `weight.grad` and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = cache
            .input
            .as_ref()
            .ok_or_else(|| Error::invalid("convolution backward without a cached input"))?;
        let in_shape = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        if grad_out.dims() != [in_shape.n, self.out_channels, oh, ow] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_backward",
                left: grad_out.dims(),
                right: [in_shape.n, self.out_channels, oh, ow],
            });
        }
        let (h, w) = (in_shape.h, in_shape.w);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let plane = oh * ow;
        let mut dx = Tensor4::zeros(in_shape);
        let pointwise = self.is_pointwise();
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); ckk * plane]
        };
        let mut dcol = vec![T::zero(); ckk * plane];
        for n in 0..in_shape.n {
            let g = grad_out.sample(n);
            let xs = x.sample(n);
            let col_ref: &[T] = if pointwise {
                xs
            } else {
                self.im2col(xs, h, w, oh, ow, &mut col);
                &col
            };
            // dW += G · colᵀ
            T::gemm(
                self.out_channels,
                plane,
                ckk,
                g,
                (plane as isize, 1),
                col_ref,
                (1, plane as isize),
                T::one(),
                &mut self.weight.grad,
                (ckk as isize, 1),
            );
            // dcol = Wᵀ · G
            let target: &mut [T] = if pointwise {
                dx.sample_mut(n)
            } else {
                &mut dcol
            };
            T::gemm(
                ckk,
                self.out_channels,
                plane,
                &self.weight.value,
                (1, ckk as isize),
                g,
                (plane as isize, 1),
                T::zero(),
                target,
                (plane as isize, 1),
            );
            if !pointwise {
                self.col2im(&dcol, h, w, oh, ow, dx.sample_mut(n));
            }
        }
        Ok(dx)
    }
}
