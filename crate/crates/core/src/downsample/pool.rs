//! Fractional adaptive average pooling.
//!
//! Along an axis of length `L` pooled to `M` cells, output `j` averages the
//! half-open window `[floor(j·L/M), ceil((j+1)·L/M))`. Windows may overlap by
//! one cell when `L/M` is not an integer.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Pooled length for ratio `r`: `max(1, floor(len·r + 0.5))`.
///
/// A tolerance of 1e-9 is added before flooring so that products such as
/// `5 × 0.3` that are exactly half-way in decimal round up.
pub fn target_size(in_size: usize, r: f64) -> usize {
    ((in_size as f64 * r + 0.5 + 1e-9).floor() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolWindow {
    pub start: usize,
    pub end: usize,
}

impl PoolWindow {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

pub fn pool_windows(in_len: usize, out_len: usize) -> Result<Vec<PoolWindow>> {
    if out_len == 0 || in_len == 0 {
        return Err(Error::invalid("pooling lengths must be positive"));
    }
    if out_len > in_len {
        return Err(Error::invalid(format!(
            "cannot pool {in_len} up to {out_len}"
        )));
    }
    Ok((0..out_len)
        .map(|j| PoolWindow {
            start: j * in_len / out_len,
            end: ((j + 1) * in_len).div_ceil(out_len),
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    in_shape: Shape4,
    rows: Vec<PoolWindow>,
    cols: Vec<PoolWindow>,
}

impl PoolCache {
    pub fn in_shape(&self) -> Shape4 {
        self.in_shape
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }
}

pub fn adaptive_avg_pool_forward<T: Scalar>(
    x: &Tensor4<T>,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor4<T>, PoolCache)> {
    let s = x.shape();
    let rows = pool_windows(s.h, out_h)?;
    let cols = pool_windows(s.w, out_w)?;
    let out_shape = s.with_hw(out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.len());
    for plane in x.data().chunks_exact(s.plane()) {
        for r in &rows {
            for c in &cols {
                let mut acc = 0.0f64;
                for i in r.start..r.end {
                    for v in &plane[i * s.w + c.start..i * s.w + c.end] {
                        acc += v.as_f64();
                    }
                }
                out.push(T::of(acc / (r.len() * c.len()) as f64));
            }
        }
    }
    Ok((
        Tensor4::from_parts(out_shape, out),
        PoolCache {
            in_shape: s,
            rows,
            cols,
        },
    ))
}

/// Each output gradient is spread evenly over its window.
pub fn adaptive_avg_pool_backward<T: Scalar>(
    cache: &PoolCache,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let s = cache.in_shape;
    let (oh, ow) = cache.out_hw();
    if grad_out.dims() != [s.n, s.c, oh, ow] {
        return Err(Error::ShapeMismatch {
            op: "adaptive_avg_pool_backward",
            left: grad_out.dims(),
            right: [s.n, s.c, oh, ow],
        });
    }
    let mut dx = Tensor4::zeros(s);
    for (g_plane, dx_plane) in grad_out
        .data()
        .chunks_exact(oh * ow)
        .zip(dx.data_mut().chunks_exact_mut(s.plane()))
    {
        for (ri, r) in cache.rows.iter().enumerate() {
            for (ci, c) in cache.cols.iter().enumerate() {
                let share = g_plane[ri * ow + ci] / T::of((r.len() * c.len()) as f64);
                for i in r.start..r.end {
                    for v in &mut dx_plane[i * s.w + c.start..i * s.w + c.end] {
                        *v = *v + share;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Fraction of stride-1 convolution outputs whose `k×k` window touches padding.
pub fn padded_pixel_ratio(h: usize, w: usize, k: usize, pad: usize) -> Result<f64> {
    if k == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::invalid("convolution output would be empty"));
    }
    let (oh, ow) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    // Output i reads padded rows [i, i + k); real rows are [pad, pad + h).
    let clean = |i: usize, len: usize| i >= pad && i + k <= pad + len;
    let clean_rows = (0..oh).filter(|&i| clean(i, h)).count();
    let clean_cols = (0..ow).filter(|&j| clean(j, w)).count();
    let total = oh * ow;
    Ok((total - clean_rows * clean_cols) as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_sizes() {
        assert_eq!(target_size(28, 0.75), 21);
        assert_eq!(target_size(8, 0.5), 4);
        assert_eq!(target_size(7, 0.5), 4);
        assert_eq!(target_size(5, 0.75), 4);
        assert_eq!(target_size(1, 0.5), 1);
        assert_eq!(target_size(5, 0.3), 2);
    }

    #[test]
    fn ramp_two_by_two() {
        let x = Tensor4::from_vec([1, 1, 4, 4], (1..=16).map(|v| v as f64).collect()).unwrap();
        let (y, _) = adaptive_avg_pool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn upsampling_rejected() {
        let x = Tensor4::full([1, 1, 4, 4], 1.0f32).unwrap();
        assert!(adaptive_avg_pool_forward(&x, 5, 4).is_err());
        assert!(adaptive_avg_pool_forward(&x, 0, 4).is_err());
    }

    #[test]
    fn windows_for_28_to_21_have_width_two() {
        let w = pool_windows(28, 21).unwrap();
        assert!(w.iter().all(|w| w.len() == 2));
        assert_eq!(w[0], PoolWindow { start: 0, end: 2 });
        assert_eq!(w[20], PoolWindow { start: 26, end: 28 });
    }

    #[test]
    fn gradient_mass_on_28_to_21() {
        let x = Tensor4::full([1, 1, 28, 28], 0.0f32).unwrap();
        let (_, cache) = adaptive_avg_pool_forward(&x, 21, 21).unwrap();
        let g = Tensor4::full([1, 1, 21, 21], 1.0f32).unwrap();
        let dx = adaptive_avg_pool_backward(&cache, &g).unwrap();
        assert_eq!(dx.sum(), 441.0);
    }

    #[test]
    fn padded_ratios() {
        assert_eq!(padded_pixel_ratio(8, 8, 3, 1).unwrap(), 0.4375);
        assert!((padded_pixel_ratio(6, 6, 3, 1).unwrap() - 20.0 / 36.0).abs() < 1e-15);
        assert_eq!(padded_pixel_ratio(8, 8, 3, 0).unwrap(), 0.0);
        assert_eq!(padded_pixel_ratio(1, 1, 3, 1).unwrap(), 1.0);
        assert!(padded_pixel_ratio(1, 1, 5, 1).is_err());
    }
}
